//! Causal multi-head attention maps with ALiBi biases.
//!
//! Scores are `z_ij = β Q_i·K_j + slope_h (j - i)` on the causal triangle
//! `j <= i`. Two maps turn a score row into a distribution:
//!
//! * dot-product attention (DPA): `a_ij ∝ exp(z_ij)`
//! * expressive attention (EA): `a_ij ∝ z_ij² / (1 + z_ij²)`
//!
//! The row kernels here are shared by the standalone [`scores`], [`dpa`] and
//! [`ea`] functions and by the autodiff graph ops.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// EA rows whose total weight falls below this are replaced by the uniform row.
pub const EA_FALLBACK_SUM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttnKind {
    Dpa,
    Ea,
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnKind::Dpa => "dpa",
            AttnKind::Ea => "ea",
        })
    }
}

impl FromStr for AttnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpa" => Ok(AttnKind::Dpa),
            "ea" => Ok(AttnKind::Ea),
            other => Err(Error::InvalidSpec(format!("unknown attention kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttnKind,
    pub n_heads: usize,
    pub head_dim: usize,
    pub beta: f64,
    pub alibi_slopes: Vec<f64>,
}

impl AttentionConfig {
    /// `β = 1/√head_dim` and the geometric ALiBi schedule `2^(-8(h+1)/H)`.
    pub fn new(kind: AttnKind, embed_dim: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !embed_dim.is_multiple_of(n_heads) {
            return Err(Error::InvalidSpec(format!(
                "{n_heads} heads do not divide embedding dimension {embed_dim}"
            )));
        }
        let head_dim = embed_dim / n_heads;
        Ok(AttentionConfig {
            kind,
            n_heads,
            head_dim,
            beta: 1.0 / (head_dim as f64).sqrt(),
            alibi_slopes: alibi_slopes(n_heads),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.alibi_slopes.len() != self.n_heads {
            return Err(Error::InvalidSpec(format!(
                "{} ALiBi slopes for {} heads",
                self.alibi_slopes.len(),
                self.n_heads
            )));
        }
        if self.alibi_slopes.iter().any(|&s| s.is_nan() || s < 0.0) {
            return Err(Error::InvalidSpec("ALiBi slopes must be nonnegative".into()));
        }
        Ok(())
    }
}

pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    (0..n_heads)
        .map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / n_heads as f64))
        .collect()
}

/// Causal score matrix `(heads, n_con, n_con)`; entries above the diagonal are
/// masked and stored as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub heads: usize,
    pub n_con: usize,
    pub z: Vec<f64>,
}

impl ScoreMatrix {
    /// Builds a score matrix from raw values, zeroing the masked triangle.
    pub fn from_raw(heads: usize, n_con: usize, mut z: Vec<f64>) -> Result<Self> {
        if z.len() != heads * n_con * n_con {
            return Err(Error::shape("scores", &[heads, n_con, n_con], &[z.len()]));
        }
        for block in z.chunks_mut(n_con * n_con) {
            for i in 0..n_con {
                block[i * n_con + i + 1..(i + 1) * n_con].fill(0.0);
            }
        }
        Ok(ScoreMatrix { heads, n_con, z })
    }

    /// `None` for masked entries (`j > i`).
    pub fn get(&self, h: usize, i: usize, j: usize) -> Option<f64> {
        (j <= i).then(|| self.z[(h * self.n_con + i) * self.n_con + j])
    }

    /// Adds `c` to every unmasked entry of row `(h, i)`.
    pub fn shift_row(&mut self, h: usize, i: usize, c: f64) {
        let off = (h * self.n_con + i) * self.n_con;
        for v in &mut self.z[off..=off + i] {
            *v += c;
        }
    }

    pub fn negated(&self) -> Self {
        ScoreMatrix {
            heads: self.heads,
            n_con: self.n_con,
            z: self.z.iter().map(|v| -v).collect(),
        }
    }
}

/// Row-normalized causal attention weights `(heads, n_con, n_con)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMatrix {
    pub heads: usize,
    pub n_con: usize,
    pub a: Vec<f64>,
}

impl AttnMatrix {
    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.a[(h * self.n_con + i) * self.n_con + j]
    }

    pub fn row(&self, h: usize, i: usize) -> &[f64] {
        let off = (h * self.n_con + i) * self.n_con;
        &self.a[off..off + self.n_con]
    }
}

/// Scores from `q`, `k` shaped `(heads, n_con, head_dim)`.
pub fn scores(q: &Tensor, k: &Tensor, cfg: &AttentionConfig) -> Result<ScoreMatrix> {
    cfg.validate()?;
    let want = [cfg.n_heads, q.shape().get(1).copied().unwrap_or(0), cfg.head_dim];
    if q.shape() != want {
        return Err(Error::shape("scores", q.shape(), &want));
    }
    if k.shape() != q.shape() {
        return Err(Error::shape("scores", q.shape(), k.shape()));
    }
    let (h, t, hd) = (cfg.n_heads, want[1], cfg.head_dim);
    let mut z = vec![0.0; h * t * t];
    for head in 0..h {
        score_block(
            q.data(),
            k.data(),
            head * t * hd,
            hd,
            hd,
            t,
            cfg.beta,
            cfg.alibi_slopes[head],
            &mut z[head * t * t..(head + 1) * t * t],
        );
    }
    Ok(ScoreMatrix {
        heads: h,
        n_con: t,
        z,
    })
}

pub fn dpa(z: &ScoreMatrix) -> AttnMatrix {
    let t = z.n_con;
    let mut a = vec![0.0; z.z.len()];
    for (zb, ab) in z.z.chunks(t * t).zip(a.chunks_mut(t * t)) {
        dpa_block(zb, ab, t);
    }
    AttnMatrix {
        heads: z.heads,
        n_con: t,
        a,
    }
}

pub fn ea(z: &ScoreMatrix) -> AttnMatrix {
    let t = z.n_con;
    let mut a = vec![0.0; z.z.len()];
    for (zb, ab) in z.z.chunks(t * t).zip(a.chunks_mut(t * t)) {
        ea_block(zb, ab, t);
    }
    AttnMatrix {
        heads: z.heads,
        n_con: t,
        a,
    }
}

/// Unnormalized EA weight `z² / (1 + z²)`.
#[inline]
pub fn ea_weight(z: f64) -> f64 {
    let s = z * z;
    s / (1.0 + s)
}

pub fn apply(kind: AttnKind, z: &ScoreMatrix) -> AttnMatrix {
    match kind {
        AttnKind::Dpa => dpa(z),
        AttnKind::Ea => ea(z),
    }
}

// Kernels. A "block" is one (batch, head) `t x t` score/attention matrix.
// `q`/`k` rows for the block start at `off` and advance by `rs`; the head's
// `hd` features are contiguous.

#[allow(clippy::too_many_arguments)]
pub(crate) fn score_block(
    q: &[f64],
    k: &[f64],
    off: usize,
    rs: usize,
    hd: usize,
    t: usize,
    beta: f64,
    slope: f64,
    z: &mut [f64],
) {
    for i in 0..t {
        let qi = &q[off + i * rs..off + i * rs + hd];
        let row = &mut z[i * t..(i + 1) * t];
        for j in 0..=i {
            let kj = &k[off + j * rs..off + j * rs + hd];
            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            row[j] = beta * dot + slope * (j as f64 - i as f64);
        }
        row[i + 1..].fill(0.0);
    }
}

/// Accumulates `dq`, `dk` for one block given `dz`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn score_block_backward(
    dz: &[f64],
    q: &[f64],
    k: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    off: usize,
    rs: usize,
    hd: usize,
    t: usize,
    beta: f64,
) {
    for i in 0..t {
        let qo = off + i * rs;
        let qi = &q[qo..qo + hd];
        for j in 0..=i {
            let g = beta * dz[i * t + j];
            if g == 0.0 {
                continue;
            }
            let ko = off + j * rs;
            for (d, &kv) in dq[qo..qo + hd].iter_mut().zip(&k[ko..ko + hd]) {
                *d += g * kv;
            }
            for (d, &qv) in dk[ko..ko + hd].iter_mut().zip(qi) {
                *d += g * qv;
            }
        }
    }
}

pub(crate) fn dpa_block(z: &[f64], a: &mut [f64], t: usize) {
    for i in 0..t {
        let zr = &z[i * t..i * t + i + 1];
        let ar = &mut a[i * t..(i + 1) * t];
        let m = zr.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut s = 0.0;
        for j in 0..=i {
            let e = (zr[j] - m).exp();
            ar[j] = e;
            s += e;
        }
        for v in &mut ar[..=i] {
            *v /= s;
        }
        ar[i + 1..].fill(0.0);
    }
}

pub(crate) fn dpa_block_backward(a: &[f64], da: &[f64], dz: &mut [f64], t: usize) {
    for i in 0..t {
        let r = i * t..i * t + i + 1;
        let (ar, dar) = (&a[r.clone()], &da[r.clone()]);
        let dot: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
        for (j, d) in dz[r].iter_mut().enumerate() {
            *d += ar[j] * (dar[j] - dot);
        }
    }
}

pub(crate) fn ea_block(z: &[f64], a: &mut [f64], t: usize) {
    for i in 0..t {
        let ar = &mut a[i * t..(i + 1) * t];
        let mut s = 0.0;
        for (w, &zv) in ar[..=i].iter_mut().zip(&z[i * t..=i * t + i]) {
            *w = ea_weight(zv);
            s += *w;
        }
        if s < EA_FALLBACK_SUM {
            ar[..=i].fill(1.0 / (i + 1) as f64);
        } else {
            let inv = 1.0 / s;
            for v in &mut ar[..=i] {
                *v *= inv;
            }
        }
        ar[i + 1..].fill(0.0);
    }
}

pub(crate) fn ea_block_backward(z: &[f64], a: &[f64], da: &[f64], dz: &mut [f64], t: usize) {
    for i in 0..t {
        let r = i * t..i * t + i + 1;
        let zr = &z[r.clone()];
        let s: f64 = zr.iter().map(|&v| ea_weight(v)).sum();
        if s < EA_FALLBACK_SUM {
            continue;
        }
        let (ar, dar) = (&a[r.clone()], &da[r.clone()]);
        let dot: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
        for (j, d) in dz[r].iter_mut().enumerate() {
            let dw = (dar[j] - dot) / s;
            let den = 1.0 + zr[j] * zr[j];
            *d += dw * 2.0 * zr[j] / (den * den);
        }
    }
}

/// `o_i = Σ_{j<=i} a_ij v_j` for one block, writing the head's columns of `o`.
pub(crate) fn apply_block(
    a: &[f64],
    v: &[f64],
    o: &mut [f64],
    off: usize,
    rs: usize,
    hd: usize,
    t: usize,
) {
    for i in 0..t {
        let oo = off + i * rs;
        let out = &mut o[oo..oo + hd];
        out.fill(0.0);
        for (j, &w) in a[i * t..=i * t + i].iter().enumerate() {
            let vo = off + j * rs;
            for (d, &vv) in out.iter_mut().zip(&v[vo..vo + hd]) {
                *d += w * vv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn apply_block_backward(
    a: &[f64],
    v: &[f64],
    dout: &[f64],
    da: &mut [f64],
    dv: &mut [f64],
    off: usize,
    rs: usize,
    hd: usize,
    t: usize,
) {
    for i in 0..t {
        let oo = off + i * rs;
        let g = &dout[oo..oo + hd];
        for j in 0..=i {
            let vo = off + j * rs;
            let w = a[i * t + j];
            let mut s = 0.0;
            for ((dvv, &vv), &gg) in dv[vo..vo + hd].iter_mut().zip(&v[vo..vo + hd]).zip(g) {
                s += gg * vv;
                *dvv += w * gg;
            }
            da[i * t + j] += s;
        }
    }
}
