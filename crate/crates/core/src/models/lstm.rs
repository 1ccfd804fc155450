//! Stacked LSTM run left to right over the window; logits at position `t`
//! come from the top layer's hidden state at `t`.
//!
//! Gate columns are ordered input, forget, cell candidate, output.

use rand::Rng;

use super::{init_bound, ModelSpec};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub(super) fn shapes(spec: &ModelSpec) -> Vec<Vec<usize>> {
    let h = spec.hidden;
    let mut out = Vec::with_capacity(3 * spec.layers + 1);
    for l in 0..spec.layers {
        let input = if l == 0 { spec.d } else { h };
        out.push(vec![input, 4 * h]);
        out.push(vec![h, 4 * h]);
        out.push(vec![4 * h]);
    }
    out.push(vec![h, spec.n_symbols]);
    out
}

pub(super) fn init<G: Rng + ?Sized>(spec: &ModelSpec, rng: &mut G) -> Vec<Tensor> {
    let shapes = shapes(spec);
    let last = shapes.len() - 1;
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| match (i == last, i % 3) {
            (true, _) | (false, 2) => Tensor::zeros(s),
            _ => Tensor::uniform(s, init_bound(s[0]), rng),
        })
        .collect()
}

pub(super) fn forward(spec: &ModelSpec, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
    let (t_len, h) = (spec.n_con, spec.hidden);
    let batch = g.value(x).rows() / t_len;
    let mut seq = x;
    for layer in p[..3 * spec.layers].chunks(3) {
        let (wx, wh, b) = (layer[0], layer[1], layer[2]);
        // input contributions for all steps at once
        let xw = g.matmul(seq, wx)?;
        let xw = g.add_bias(xw, b, t_len)?;
        let mut hid = g.input(Tensor::zeros(&[batch, h]));
        let mut cell = g.input(Tensor::zeros(&[batch, h]));
        let mut outs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = g.time_slice(xw, t, t_len)?;
            let hw = g.matmul(hid, wh)?;
            let gates = g.add(xt, hw)?;
            let i = g.slice_cols(gates, 0, h)?;
            let f = g.slice_cols(gates, h, 2 * h)?;
            let c = g.slice_cols(gates, 2 * h, 3 * h)?;
            let o = g.slice_cols(gates, 3 * h, 4 * h)?;
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let c = g.tanh(c);
            let o = g.sigmoid(o);
            let keep = g.mul(f, cell)?;
            let write = g.mul(i, c)?;
            cell = g.add(keep, write)?;
            let squashed = g.tanh(cell);
            hid = g.mul(o, squashed)?;
            outs.push(hid);
        }
        seq = g.time_stack(&outs)?;
    }
    g.matmul(seq, p[3 * spec.layers])
}
