//! MLP with causal connections over the flattened `(position x embedding)`
//! representation. Each layer is a block lower-triangular `(N_con d)^2`
//! matrix stored as its `N_con (N_con + 1) / 2` free `d x d` blocks, so masked
//! blocks do not exist as parameters and can never be updated.

use rand::Rng;

use super::ModelSpec;
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub(super) fn shapes(spec: &ModelSpec) -> Vec<Vec<usize>> {
    let (d, t) = (spec.d, spec.n_con);
    let mut out = vec![vec![t * (t + 1) / 2, d, d]; spec.layers];
    out.push(vec![t, d, spec.n_symbols]);
    out
}

/// Index of block `(t, t')`, `t' <= t`, within a layer.
pub fn block_index(t: usize, t_prime: usize) -> usize {
    debug_assert!(t_prime <= t);
    t * (t + 1) / 2 + t_prime
}

pub(super) fn init<G: Rng + ?Sized>(spec: &ModelSpec, rng: &mut G) -> Vec<Tensor> {
    let (d, t) = (spec.d, spec.n_con);
    let mut out = Vec::with_capacity(spec.layers + 1);
    for _ in 0..spec.layers {
        let mut w = Tensor::zeros(&[t * (t + 1) / 2, d, d]);
        for row in 0..t {
            // relu layers without normalization need a variance-preserving scale
            let bound = (6.0 / ((row + 1) * d) as f64).sqrt();
            for col in 0..=row {
                let off = block_index(row, col) * d * d;
                for v in &mut w.data_mut()[off..off + d * d] {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
        out.push(w);
    }
    out.push(Tensor::zeros(&[t, d, spec.n_symbols]));
    out
}

pub(super) fn forward(spec: &ModelSpec, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
    let t = spec.n_con;
    let mut h = x;
    for &w in &p[..spec.layers] {
        let y = g.block_causal(h, w, t)?;
        h = g.relu(y);
    }
    g.linear(h, p[spec.layers], t)
}
