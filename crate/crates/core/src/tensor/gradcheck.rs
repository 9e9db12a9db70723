//! Central finite-difference check of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Entries probed per parameter; `None` probes every entry.
    pub max_probes_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_probes_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
    pub probes: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
/// Gradients smaller than this are compared on an absolute scale: central
/// differences at step 1e-5 carry roundoff near 1e-10, which would otherwise
/// dominate entries whose true gradient is zero (biases feeding batch norm).
pub const GRAD_MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_MAGNITUDE_FLOOR)
}

/// Compares the tape gradient of the scalar objective `f` against central
/// differences at every probed parameter entry.
///
/// `f` receives one tape variable per entry of `params`, in order, and must
/// return a scalar.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::contract(format!("grad_check step must be > 0, got {}", opts.step)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let base = tape.value(root).item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at the unperturbed point".into()));
    }
    let mut grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.take(&tape, v)).collect();
    drop(tape);

    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        tol: opts.tol,
        step: opts.step,
        params: Vec::with_capacity(params.len()),
        probes: 0,
        failures: 0,
        max_rel_err: 0.0,
    };
    for (p, (name, tensor)) in params.iter().enumerate() {
        let numel = tensor.numel();
        let indices: Vec<usize> = match opts.max_probes_per_param {
            Some(k) if k < numel => {
                let mut idx = rand::seq::index::sample(&mut rng, numel, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            probes: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            failures: 0,
        };
        for &i in &indices {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + opts.step;
            let plus = evaluate(&values)?;
            values[p].data_mut()[i] = orig - opts.step;
            let minus = evaluate(&values)?;
            values[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective while probing {name}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[p].data()[i], numeric);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
            }
            if err > opts.tol {
                check.failures += 1;
            }
        }
        report.probes += check.probes;
        report.failures += check.failures;
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    Ok(report)
}
