//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Parameters, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per parameter; larger tensors are subsampled.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_param: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// The loss does not depend on this parameter at all.
    pub no_gradient_path: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
    /// `(parameter, flat index)` where the loss stopped being finite.
    pub non_finite: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tolerance
    }
}

/// Compares tape gradients of `f` with `(f(θ+h) - f(θ-h)) / 2h` per
/// coordinate. Relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator.
pub fn grad_check<F>(params: &Parameters, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &Parameters) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    let grads = tape.backward(&loss)?;
    drop(tape);

    let eval = |p: &Parameters| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, p)?.item();
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::new(),
        non_finite: None,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.value(&name).map(|t| t.numel()).unwrap_or(0);
        let analytic = grads.param(&name);
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = params.value(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().value.data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().value.data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite.get_or_insert((name.clone(), i));
                worst = f64::INFINITY;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.map(|g| g.data()[i]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.params.push(ParamCheck {
            name,
            coords_checked: coords.len(),
            max_rel_error: worst,
            no_gradient_path: analytic.is_none(),
        });
    }
    Ok(report)
}
