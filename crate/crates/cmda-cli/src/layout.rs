//! Fixed output tree under one root: frames and manifests from `generate`,
//! checkpoints and metrics per training command, reports per eval protocol.

use std::path::{Path, PathBuf};

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.root.join("frames")
    }

    pub fn frame_file(&self, group: &str, index: usize) -> PathBuf {
        self.frames_dir().join(format!("{group}_{index:06}.bin"))
    }

    /// Manifest-relative path of the same frame file.
    pub fn frame_rel(&self, group: &str, index: usize) -> String {
        format!("frames/{group}_{index:06}.bin")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("train.manifest")
    }

    pub fn eval_manifest(&self) -> PathBuf {
        self.root.join("eval.manifest")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.jsonl"))
    }

    pub fn report_json(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn report_csv(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.csv"))
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("reports").join("summary.json")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features.csv")
    }
}
