use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Checks at most this many coordinates per input (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Skip coordinates whose ±step perturbation crosses a ReLU or clamp kink.
    pub skip_kinks: bool,
    /// Corrupts analytic ReLU gradients by this factor (harness self-test).
    pub relu_fault: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            skip_kinks: true,
            relu_fault: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1e-12, |analytic| + |numeric|)
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Checked coordinates where both gradients were within rounding noise of zero.
    pub zero_within_noise: usize,
}

/// Largest derivative a central difference can confuse with zero: 64 ulps of
/// the larger function value, over the step.
fn rounding_noise(fp: f64, fm: f64, step: f64) -> f64 {
    64.0 * f64::EPSILON * fp.abs().max(fm.abs()) / step
}

/// Compares reverse-mode gradients of a scalar closure against central
/// finite differences.
pub fn grad_check<S, F>(
    f: F,
    inputs: &[Tensor<S>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var<S>]) -> Result<Var<S>>,
{
    let mut tape = Tape::new();
    if let Some(fault) = opts.relu_fault {
        tape.inject_relu_grad_fault(lit(fault));
    }
    let vars: Vec<Var<S>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !out.value().is_scalar() {
        return Err(Error::InvalidArgument(format!(
            "grad_check closure must return a scalar, got {:?}",
            out.shape()
        )));
    }
    let grads = tape.backward(&out)?;

    let eval = |inputs: &[Tensor<S>]| -> Result<(f64, u64)> {
        let mut tape = Tape::inference();
        let vars: Vec<Var<S>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((
            out.value().item().to_f64().unwrap_or(f64::NAN),
            tape.kink_fingerprint(),
        ))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let h: S = lit(opts.step);
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        let n = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (fp, kp) = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let (fm, km) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if opts.skip_kinks && kp != km {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[j].to_f64().unwrap_or(f64::NAN);
            let noise = rounding_noise(fp, fm, opts.step);
            let err = if a.abs() <= noise && numeric.abs() <= noise {
                report.zero_within_noise += 1;
                0.0
            } else {
                (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12)
            };
            if err.is_nan() {
                report.max_rel_error = f64::NAN;
            } else if !report.max_rel_error.is_nan() {
                report.max_rel_error = report.max_rel_error.max(err);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
