//! Central finite-difference gradient checking against the tape.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub rel_tol: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is near zero are compared on an absolute scale.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rel_tol: 1e-5,
            scale_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(leaf, flat index, analytic, numeric)` at the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.max_rel_error <= cfg.rel_tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `f` at `leaves` with central differences.
///
/// `f` must build a scalar on the tape it is given, using the supplied leaf
/// handles in order.
pub fn check_gradients<F>(leaves: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for k in 0..leaf.len() {
            let orig = leaf.data()[k];
            probe[li].data_mut()[k] = orig + cfg.step;
            let plus = eval(&probe)?;
            probe[li].data_mut()[k] = orig - cfg.step;
            let minus = eval(&probe)?;
            probe[li].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[li].data()[k];
            let err = relative_error(a, numeric, cfg.scale_floor);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((li, k, a, numeric));
            }
        }
    }
    Ok(report)
}
