//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    /// Gradients smaller than this in magnitude are compared absolutely:
    /// the relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_param: Some(40),
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `build` against central
/// differences, perturbing one coordinate of `params` at a time.
pub fn grad_check<F>(params: &[Tensor], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.input(p.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(c) if c < n => sample(&mut rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + opts.step;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - opts.step;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic[pi].data()[c], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_exact() {
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.11).cos());
        let report = grad_check(
            &[w],
            |g, ps| {
                let xi = g.input(x.clone());
                let y = g.matmul(xi, ps[0])?;
                Ok(g.sum(y))
            },
            &GradCheckOptions {
                coords_per_param: None,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.checked, 6);
    }
}
