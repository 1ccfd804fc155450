//! Pre-norm transformer layers shared by the standard transformer (weights
//! broadcast over positions) and the cisformer (one weight copy per position).
//!
//! Per layer: `h += attn(norm(h))`, `h += W2 relu(W1 norm(h) + b1)`, with the
//! heads of the attention output concatenated and no output projection.
//! A final parameter-free norm precedes the linear readout.

use rand::Rng;

use super::{init_bound, Arch, ModelSpec};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Tensors per layer: W_Q, W_K, W_V, W_1, b_1, W_2.
pub(super) const PER_LAYER: usize = 6;

fn prefix(spec: &ModelSpec, shape: &[usize]) -> Vec<usize> {
    match spec.arch {
        Arch::Cisformer => std::iter::once(spec.n_con).chain(shape.iter().copied()).collect(),
        _ => shape.to_vec(),
    }
}

pub(super) fn shapes(spec: &ModelSpec) -> Vec<Vec<usize>> {
    let d = spec.d;
    let mut out = Vec::with_capacity(spec.layers * PER_LAYER + 1);
    for _ in 0..spec.layers {
        out.push(prefix(spec, &[d, d]));
        out.push(prefix(spec, &[d, d]));
        out.push(prefix(spec, &[d, d]));
        out.push(prefix(spec, &[d, 4 * d]));
        out.push(prefix(spec, &[4 * d]));
        out.push(prefix(spec, &[4 * d, d]));
    }
    out.push(prefix(spec, &[d, spec.n_symbols]));
    out
}

pub(super) fn init<G: Rng + ?Sized>(spec: &ModelSpec, rng: &mut G) -> Vec<Tensor> {
    let d = spec.d;
    let shapes = shapes(spec);
    let last = shapes.len() - 1;
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i == last {
                // zero readout: initial logits are uniform, loss exactly ln N
                return Tensor::zeros(s);
            }
            match i % PER_LAYER {
                0..=3 => Tensor::uniform(s, init_bound(d), rng),
                4 => Tensor::zeros(s),
                _ => Tensor::uniform(s, init_bound(4 * d), rng),
            }
        })
        .collect()
}

pub(super) fn forward(spec: &ModelSpec, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
    let t = spec.n_con;
    let cfg = spec.attention_config()?;
    let mut h = x;
    for layer in p[..spec.layers * PER_LAYER].chunks(PER_LAYER) {
        let [wq, wk, wv, w1, b1, w2] = [layer[0], layer[1], layer[2], layer[3], layer[4], layer[5]];
        let n = g.rms_norm(h);
        let q = g.linear(n, wq, t)?;
        let k = g.linear(n, wk, t)?;
        let v = g.linear(n, wv, t)?;
        let z = g.attn_scores(q, k, &cfg, t)?;
        let a = g.causal_attention(z, cfg.kind)?;
        let o = g.attn_apply(a, v)?;
        h = g.add(h, o)?;

        let n = g.rms_norm(h);
        let u = g.linear(n, w1, t)?;
        let u = g.add_bias(u, b1, t)?;
        let u = g.relu(u);
        let f = g.linear(u, w2, t)?;
        h = g.add(h, f)?;
    }
    let n = g.rms_norm(h);
    g.linear(n, p[spec.layers * PER_LAYER], t)
}
