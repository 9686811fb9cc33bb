//! Training objectives: cross-modal BEV alignment, grid entropy, domain
//! cross-entropy, detection loss, and their scheduled combination.

use crate::autodiff::{AdError, AdResult, Tape, Tensor, Var};

fn contract(op: &'static str, msg: String) -> AdError {
    AdError::Contract { op, msg }
}

/// Smooth-L1 quadratic zone for box regression.
pub const BOX_BETA: f64 = 1.0 / 9.0;

/// Scalar weights plus the two phase toggles. Pre-training runs (cmki=on,
/// cdan=off); self-training runs the reverse — exactly one is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_det: f64,
    pub lambda_cmki: f64,
    pub lambda_cdan: f64,
    pub lambda_d: f64,
    pub lambda_ent: f64,
    pub t_cmki: bool,
    pub t_cdan: bool,
}

impl LossWeights {
    pub fn pretrain() -> Self {
        Self {
            lambda_det: 1.0,
            lambda_cmki: 1.0,
            lambda_cdan: 1.0,
            lambda_d: 0.1,
            lambda_ent: 0.01,
            t_cmki: true,
            t_cdan: false,
        }
    }

    pub fn selftrain() -> Self {
        Self { t_cmki: false, t_cdan: true, ..Self::pretrain() }
    }

    pub fn validate(&self) -> AdResult<()> {
        let lambdas = [
            ("lambda_det", self.lambda_det),
            ("lambda_cmki", self.lambda_cmki),
            ("lambda_cdan", self.lambda_cdan),
            ("lambda_d", self.lambda_d),
            ("lambda_ent", self.lambda_ent),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(contract("loss_weights", format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.t_cmki == self.t_cdan {
            return Err(contract(
                "loss_weights",
                "exactly one of t_cmki/t_cdan must be active".into(),
            ));
        }
        Ok(())
    }
}

/// Mean over BEV cells of the L2 norm of the per-cell channel difference.
/// Symmetric, nonnegative, zero iff the maps agree.
pub fn cmki_loss(tape: &mut Tape, f_p: Var, f_i: Var) -> AdResult<Var> {
    let (sp, si) = (tape.shape(f_p).to_vec(), tape.shape(f_i).to_vec());
    if sp != si || sp.len() != 3 {
        return Err(contract("cmki_loss", format!("BEV maps {:?} vs {:?}", sp, si)));
    }
    let cells = sp[0] * sp[1];
    let diff = tape.sub(f_p, f_i)?;
    let flat = tape.reshape(diff, &[cells, sp[2]])?;
    let sq = tape.square(flat)?;
    let per_cell = tape.sum_last(sq)?;
    let norms = tape.sqrt(per_cell)?;
    tape.mean(norms)
}

/// Per-cell softmax entropy of a BEV map, normalized by log(channels) so one
/// cell contributes at most 1; total range [0, X·Y]. Minimizing it sharpens
/// cell-wise channel distributions.
pub fn entropy_loss(tape: &mut Tape, f: Var) -> AdResult<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(contract("entropy_loss", format!("want [x, y, zc], got {:?}", s)));
    }
    let zc = s[2];
    if zc < 2 {
        return Err(contract("entropy_loss", "needs at least 2 channels".into()));
    }
    let cells = s[0] * s[1];
    let flat = tape.reshape(f, &[cells, zc])?;
    let p = tape.softmax_last(flat)?;
    let logp = tape.log_softmax_last(flat)?;
    let plogp = tape.mul(p, logp)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / (zc as f64).ln())
}

/// Domain cross-entropy output; `empty_batch` flags the no-instances case
/// where the loss is a constant zero.
pub struct DomainLoss {
    pub loss: Var,
    pub empty_batch: bool,
}

/// Mean categorical cross-entropy of 2-way domain logits `[n, 2]` against
/// labels (0 = source, 1 = target). An empty batch yields zero.
pub fn domain_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> AdResult<DomainLoss> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[1] != 2 {
        return Err(contract("domain_loss", format!("want [n, 2] logits, got {:?}", s)));
    }
    if s[0] != labels.len() {
        return Err(contract(
            "domain_loss",
            format!("{} labels for {} instances", labels.len(), s[0]),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(contract("domain_loss", format!("label {bad} out of range")));
    }
    let n = labels.len();
    if n == 0 {
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(DomainLoss { loss, empty_batch: true });
    }
    let mut onehot = Tensor::zeros(&[n, 2]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(&[i, l], 1.0);
    }
    let onehot = tape.constant(onehot);
    let logp = tape.log_softmax_last(logits)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    let loss = tape.scale(total, -1.0 / n as f64)?;
    Ok(DomainLoss { loss, empty_batch: false })
}

/// Detection loss: mean binary cross-entropy on per-cell objectness logits
/// plus, over positive cells, smooth-L1 on the 8 box-regression channels
/// (summed per cell, meaned over positives). No positives → BCE only.
pub fn det_loss(
    tape: &mut Tape,
    obj_logits: Var,
    obj_targets: &Tensor,
    box_preds: Var,
    positives: &[usize],
    residual_targets: &Tensor,
) -> AdResult<Var> {
    if tape.shape(obj_logits) != obj_targets.shape() {
        return Err(contract(
            "det_loss",
            format!(
                "objectness logits {:?} vs targets {:?}",
                tape.shape(obj_logits),
                obj_targets.shape()
            ),
        ));
    }
    let sb = tape.shape(box_preds).to_vec();
    if sb.len() != 2 || sb[1] != 8 {
        return Err(contract("det_loss", format!("want [n, 8] box preds, got {:?}", sb)));
    }
    if residual_targets.shape() != [positives.len(), 8] {
        return Err(contract(
            "det_loss",
            format!(
                "residual targets {:?} for {} positives",
                residual_targets.shape(),
                positives.len()
            ),
        ));
    }
    let targets = tape.constant(obj_targets.clone());
    let bce = tape.bce_with_logits(obj_logits, targets)?;
    if positives.is_empty() {
        return Ok(bce);
    }
    let picked = tape.gather_rows(box_preds, positives)?;
    let target = tape.constant(residual_targets.clone());
    let huber = tape.smooth_l1(picked, target, BOX_BETA)?;
    let per_cell = tape.sum_last(huber)?;
    let reg = tape.mean(per_cell)?;
    tape.add(bce, reg)
}

/// Loss terms available this step. Terms for disabled phases are simply not
/// built, which keeps disabled branches out of the graph entirely.
pub struct LossParts {
    pub det: Var,
    pub cmki: Option<Var>,
    pub domain: Option<Var>,
    pub entropy: Option<Var>,
}

/// λ_det·L_det + T_cmki·λ_cmki·L_cmki + T_cdan·(λ_d·L_d + λ_ent·L_ent).
/// Terms whose toggle is off contribute nothing regardless of their value.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> AdResult<Var> {
    w.validate()?;
    let mut acc = tape.scale(parts.det, w.lambda_det)?;
    if w.t_cmki {
        if let Some(cmki) = parts.cmki {
            let term = tape.scale(cmki, w.lambda_cmki)?;
            acc = tape.add(acc, term)?;
        }
    }
    if w.t_cdan {
        if let Some(d) = parts.domain {
            let term = tape.scale(d, w.lambda_d)?;
            acc = tape.add(acc, term)?;
        }
        if let Some(ent) = parts.entropy {
            let term = tape.scale(ent, w.lambda_ent)?;
            acc = tape.add(acc, term)?;
        }
    }
    Ok(acc)
}
