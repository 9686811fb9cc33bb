use super::tape::{Tape, Var};
use super::tensor::{AdResult, Tensor};

/// Worst deviation found by [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |numeric|) over all checked elements.
    pub max_rel_err: f64,
    /// (input index, element index) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients of `loss_fn` against central finite differences.
///
/// `loss_fn` must rebuild its computation from scratch on the tape it is
/// handed (it runs once per perturbed element, so keep inputs small). All
/// `inputs` are registered as params in order.
pub fn check_gradients<F>(loss_fn: F, inputs: &[Tensor], eps: f64) -> AdResult<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> AdResult<Var>,
{
    let run = |tensors: &[Tensor]| -> AdResult<(f64, Tape, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        Ok((value, tape, vars))
    };

    let (_, tape, vars) = run(inputs)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| tape.grad(v).unwrap_or(&[]).to_vec()).collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, elements_checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = forward_only(&loss_fn, &work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = forward_only(&loss_fn, &work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].get(ei).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}

fn forward_only<F>(loss_fn: &F, tensors: &[Tensor]) -> AdResult<f64>
where
    F: Fn(&mut Tape, &[Var]) -> AdResult<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}
