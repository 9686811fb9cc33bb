use super::types::{CameraFrame, DomainKind, Frame, PointCloud, SceneError};
use crate::geometry::Box3d;
use std::io::Write;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"CMDA";
const VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io { path: path.to_path_buf(), source }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn parse_err(&self, what: impl Into<String>) -> SceneError {
        SceneError::Parse { offset: self.offset as u64, what: what.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SceneError> {
        if self.offset + n > self.bytes.len() {
            return Err(self.parse_err(format!(
                "unexpected end of file reading {} ({} bytes wanted, {} left)",
                what,
                n,
                self.bytes.len() - self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, SceneError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, SceneError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, SceneError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(frame.id.len() as u32).to_le_bytes());
    out.extend_from_slice(frame.id.as_bytes());
    out.push(match frame.domain {
        DomainKind::Source => 0,
        DomainKind::Target => 1,
    });
    out.extend_from_slice(&(frame.cloud.len() as u32).to_le_bytes());
    for p in &frame.cloud.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(frame.labels.len() as u32).to_le_bytes());
    for b in &frame.labels {
        for v in [b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.class_id as f64] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    match &frame.camera {
        None => out.push(0),
        Some(cam) => {
            out.push(1);
            out.extend_from_slice(&(cam.height as u32).to_le_bytes());
            out.extend_from_slice(&(cam.width as u32).to_le_bytes());
            for v in &cam.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &cam.intrinsics {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &cam.extrinsics {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn decode_frame(bytes: &[u8]) -> Result<Frame, SceneError> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(SceneError::Parse { offset: 0, what: format!("bad magic {:?}", magic) });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SceneError::Version { found: version, expected: VERSION });
    }
    let id_len = r.u32("id length")? as usize;
    if id_len > 1 << 16 {
        return Err(r.parse_err(format!("unreasonable id length {}", id_len)));
    }
    let id = String::from_utf8(r.take(id_len, "id")?.to_vec())
        .map_err(|e| r.parse_err(format!("id is not utf-8: {}", e)))?;
    let domain = match r.u8("domain")? {
        0 => DomainKind::Source,
        1 => DomainKind::Target,
        d => return Err(r.parse_err(format!("unknown domain tag {}", d))),
    };
    let n_points = r.u32("point count")? as usize;
    let mut points = Vec::with_capacity(n_points.min(1 << 24));
    for _ in 0..n_points {
        let mut p = [0.0f32; 4];
        for v in &mut p {
            *v = r.f32("point")?;
        }
        points.push(p);
    }
    let n_labels = r.u32("label count")? as usize;
    let mut labels = Vec::with_capacity(n_labels.min(1 << 16));
    for _ in 0..n_labels {
        let mut raw = [0.0f32; 8];
        for v in &mut raw {
            *v = r.f32("label")?;
        }
        let b = Box3d::new(
            raw[0] as f64,
            raw[1] as f64,
            raw[2] as f64,
            raw[3] as f64,
            raw[4] as f64,
            raw[5] as f64,
            raw[6] as f64,
            raw[7] as u32,
        )
        .map_err(|e| r.parse_err(format!("bad label: {}", e)))?;
        labels.push(b);
    }
    let camera = match r.u8("camera flag")? {
        0 => None,
        1 => {
            let height = r.u32("camera height")? as usize;
            let width = r.u32("camera width")? as usize;
            if height * width > 1 << 22 {
                return Err(r.parse_err(format!("unreasonable image size {}x{}", height, width)));
            }
            let mut features = Vec::with_capacity(height * width * 3);
            for _ in 0..height * width * 3 {
                features.push(r.f32("camera feature")?);
            }
            let mut intrinsics = [0.0f64; 9];
            for v in &mut intrinsics {
                *v = r.f64("intrinsics")?;
            }
            let mut extrinsics = [0.0f64; 16];
            for v in &mut extrinsics {
                *v = r.f64("extrinsics")?;
            }
            Some(CameraFrame { height, width, features, intrinsics, extrinsics })
        }
        f => return Err(r.parse_err(format!("bad camera flag {}", f))),
    };
    if r.offset != bytes.len() {
        return Err(r.parse_err(format!("{} trailing bytes", bytes.len() - r.offset)));
    }
    Ok(Frame { id, domain, cloud: PointCloud { points }, labels, camera })
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<(), SceneError> {
    let bytes = encode_frame(frame);
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn load_frame(path: &Path) -> Result<Frame, SceneError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_frame(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub domain: DomainKind,
    /// Resolved against the manifest's directory on read.
    pub path: PathBuf,
}

/// Write `domain<TAB>relative-path` lines.
pub fn write_manifest(path: &Path, entries: &[(DomainKind, String)]) -> Result<(), SceneError> {
    let mut out = String::new();
    for (domain, rel) in entries {
        out.push_str(domain.as_str());
        out.push('\t');
        out.push_str(rel);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (tag, rel) = line.split_once('\t').ok_or_else(|| SceneError::Parse {
            offset: lineno as u64 + 1,
            what: format!("manifest line {} lacks a tab separator", lineno + 1),
        })?;
        let domain = DomainKind::parse(tag).ok_or_else(|| SceneError::Parse {
            offset: lineno as u64 + 1,
            what: format!("unknown domain tag {:?} on line {}", tag, lineno + 1),
        })?;
        entries.push(ManifestEntry { domain, path: base.join(rel) });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate::generate_scene;
    use crate::scene::types::DomainSpec;

    fn sample_frame() -> Frame {
        let spec = DomainSpec::source_preset(42);
        generate_scene(&spec, DomainKind::Source, 0).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.cmda");
        let frame = sample_frame();
        save_frame(&frame, &path).unwrap();
        let back = load_frame(&path).unwrap();
        assert_eq!(frame, back);
    }

    #[test]
    fn empty_cloud_frame_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.cmda");
        let frame = Frame {
            id: "empty".into(),
            domain: DomainKind::Target,
            cloud: PointCloud::default(),
            labels: vec![],
            camera: None,
        };
        save_frame(&frame, &path).unwrap();
        assert_eq!(load_frame(&path).unwrap(), frame);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cmda");
        let frame = sample_frame();
        save_frame(&frame, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_frame(&path) {
            Err(SceneError::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn wrong_version_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.cmda");
        let frame = sample_frame();
        save_frame(&frame, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_frame(&path), Err(SceneError::Version { found: 99, .. })));
    }

    #[test]
    fn wrong_magic_is_a_parse_error_at_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cmda");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load_frame(&path), Err(SceneError::Parse { offset: 0, .. })));
    }

    #[test]
    fn manifest_round_trips_and_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("frames.manifest");
        write_manifest(
            &manifest,
            &[
                (DomainKind::Source, "src/a.cmda".into()),
                (DomainKind::Target, "tgt/b.cmda".into()),
            ],
        )
        .unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].domain, DomainKind::Source);
        assert_eq!(entries[0].path, dir.path().join("src/a.cmda"));
        assert_eq!(entries[1].domain, DomainKind::Target);
    }

    #[test]
    fn malformed_manifest_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("bad.manifest");
        std::fs::write(&manifest, "source no-tab-here\n").unwrap();
        assert!(read_manifest(&manifest).is_err());
        std::fs::write(&manifest, "moon\tx.cmda\n").unwrap();
        assert!(read_manifest(&manifest).is_err());
    }
}
