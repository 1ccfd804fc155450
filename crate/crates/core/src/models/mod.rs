//! Model specifications, parameter stores and forward passes for the four
//! architectures: standard transformer, cisformer, block-causal MLP and LSTM.

mod lstm;
mod mlp;

pub use mlp::block_index;
mod transformer;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttnKind};
use crate::autodiff::{Graph, Var};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::stream::EncodedBatch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Transformer,
    Cisformer,
    Mlp,
    Lstm,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Transformer => "transformer",
            Arch::Cisformer => "cisformer",
            Arch::Mlp => "mlp",
            Arch::Lstm => "lstm",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transformer" => Ok(Arch::Transformer),
            "cisformer" => Ok(Arch::Cisformer),
            "mlp" => Ok(Arch::Mlp),
            "lstm" => Ok(Arch::Lstm),
            other => Err(Error::InvalidSpec(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Architecture selector plus every size that determines the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Attention map; ignored by the MLP and LSTM.
    pub attention: AttnKind,
    pub layers: usize,
    /// Embedding dimension `d = N + S`.
    pub d: usize,
    pub n_con: usize,
    pub heads: usize,
    /// Output classes `N`.
    pub n_symbols: usize,
    /// LSTM hidden size; ignored by the other architectures.
    pub hidden: usize,
}

pub const PAPER_D: usize = 20;
pub const PAPER_N_CON: usize = 24;
pub const PAPER_HEADS: usize = 4;
pub const PAPER_LSTM_HIDDEN: usize = 550;

impl ModelSpec {
    pub fn new(arch: Arch, attention: AttnKind, layers: usize, d: usize, n_con: usize, n_symbols: usize) -> Self {
        ModelSpec {
            arch,
            attention,
            layers,
            d,
            n_con,
            heads: PAPER_HEADS,
            n_symbols,
            hidden: PAPER_LSTM_HIDDEN,
        }
    }

    /// 60-layer standard transformer, `d = 20`, `N_con = 24`.
    pub fn paper_transformer(attention: AttnKind, n_symbols: usize) -> Self {
        ModelSpec::new(Arch::Transformer, attention, 60, PAPER_D, PAPER_N_CON, n_symbols)
    }

    /// 12-layer cisformer, about 1.3M parameters.
    pub fn paper_cisformer(attention: AttnKind, n_symbols: usize) -> Self {
        ModelSpec::new(Arch::Cisformer, attention, 12, PAPER_D, PAPER_N_CON, n_symbols)
    }

    /// 16-layer block-causal MLP, about 1.9M parameters.
    pub fn paper_mlp(n_symbols: usize) -> Self {
        ModelSpec::new(Arch::Mlp, AttnKind::Dpa, 16, PAPER_D, PAPER_N_CON, n_symbols)
    }

    /// Two stacked LSTM layers with 550 hidden units, about 3.7M parameters.
    pub fn paper_lstm(n_symbols: usize) -> Self {
        ModelSpec::new(Arch::Lstm, AttnKind::Dpa, 2, PAPER_D, PAPER_N_CON, n_symbols)
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.attention, self.d, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.layers == 0 || self.d == 0 || self.n_con == 0 || self.n_symbols < 2 {
            return fail(format!("all sizes must be positive: {self}"));
        }
        if self.n_symbols >= self.d {
            return fail(format!(
                "{} symbols leave no tape slots in embedding dimension {}",
                self.n_symbols, self.d
            ));
        }
        match self.arch {
            Arch::Transformer | Arch::Cisformer => {
                self.attention_config()?;
            }
            Arch::Lstm if self.hidden == 0 => return fail("LSTM hidden size must be positive".into()),
            _ => {}
        }
        Ok(())
    }

    /// Parameters of one attention+FFN layer: `11 d² + 4 d` shared, times `N_con`
    /// for the cisformer. `None` for the baselines.
    pub fn attention_layer_params(&self) -> Option<usize> {
        let per = 11 * self.d * self.d + 4 * self.d;
        match self.arch {
            Arch::Transformer => Some(per),
            Arch::Cisformer => Some(self.n_con * per),
            _ => None,
        }
    }

    /// Closed-form total parameter count.
    pub fn param_count(&self) -> usize {
        let (d, t, n, l) = (self.d, self.n_con, self.n_symbols, self.layers);
        match self.arch {
            Arch::Transformer => l * (11 * d * d + 4 * d) + d * n,
            Arch::Cisformer => l * t * (11 * d * d + 4 * d) + t * d * n,
            Arch::Mlp => l * d * d * t * (t + 1) / 2 + t * d * n,
            Arch::Lstm => {
                let h = self.hidden;
                (0..l)
                    .map(|i| {
                        let input = if i == 0 { d } else { h };
                        4 * (h * (input + h) + h)
                    })
                    .sum::<usize>()
                    + h * n
            }
        }
    }

    /// Shapes of the parameter tensors in checkpoint order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self.arch {
            Arch::Transformer | Arch::Cisformer => transformer::shapes(self),
            Arch::Mlp => mlp::shapes(self),
            Arch::Lstm => lstm::shapes(self),
        }
    }

    /// `key=value` lines: arch, attention, layers, d, n_con, heads, symbols, hidden.
    pub fn to_config_string(&self) -> String {
        format!(
            "arch={}\nattention={}\nlayers={}\nd={}\nn_con={}\nheads={}\nsymbols={}\nhidden={}\n",
            self.arch, self.attention, self.layers, self.d, self.n_con, self.heads, self.n_symbols, self.hidden
        )
    }

    /// Parses `key=value` lines; unknown keys are rejected, missing keys keep
    /// the 12-layer cisformer/EA defaults.
    pub fn from_config_str(s: &str) -> Result<Self> {
        let mut spec = ModelSpec::paper_cisformer(AttnKind::Ea, 16);
        for (key, value) in parse_kv(s)? {
            spec.set(&key, &value)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Sets one config key; returns an error for unknown keys or bad values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::parse("model spec", format!("{key}: expected an integer, got {v:?}")))
        };
        match key {
            "arch" => self.arch = value.parse()?,
            "attention" => self.attention = value.parse()?,
            "layers" => self.layers = num(value)?,
            "d" => self.d = num(value)?,
            "n_con" => self.n_con = num(value)?,
            "heads" => self.heads = num(value)?,
            "symbols" => self.n_symbols = num(value)?,
            "hidden" => self.hidden = num(value)?,
            _ => return Err(Error::parse("model spec", format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.arch {
            Arch::Transformer | Arch::Cisformer => write!(
                f,
                "{}+{} L={} d={} n_con={} heads={} N={}",
                self.arch, self.attention, self.layers, self.d, self.n_con, self.heads, self.n_symbols
            ),
            Arch::Mlp => write!(f, "mlp L={} d={} n_con={} N={}", self.layers, self.d, self.n_con, self.n_symbols),
            Arch::Lstm => write!(
                f,
                "lstm L={} h={} d={} n_con={} N={}",
                self.layers, self.hidden, self.d, self.n_con, self.n_symbols
            ),
        }
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv(s: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in s.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse("key=value config", format!("line {}: missing '='", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// A model: its spec and parameter tensors in checkpoint order.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
}

/// Uniform initialization bound for a weight matrix with `fan_in` inputs.
pub(crate) fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match spec.arch {
            Arch::Transformer | Arch::Cisformer => transformer::init(&spec, &mut rng),
            Arch::Mlp => mlp::init(&spec, &mut rng),
            Arch::Lstm => lstm::init(&spec, &mut rng),
        };
        Ok(Model { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::InvalidSpec(format!(
                "spec expects {} tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(Error::shape("model parameters", s, p.shape()));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Number of stored parameter elements.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        let s = &self.spec;
        if batch.embed_dim() != s.d || batch.n_con != s.n_con || batch.n_symbols != s.n_symbols {
            return Err(Error::shape(
                "model input",
                &[s.n_con, s.d, s.n_symbols],
                &[batch.n_con, batch.embed_dim(), batch.n_symbols],
            ));
        }
        Ok(())
    }

    /// Builds the forward pass over `inputs` shaped `(batch * n_con, d)` and
    /// returns logits `(batch * n_con, N)`. `params` are this model's tensors
    /// as graph variables, in checkpoint order.
    pub fn forward(&self, g: &mut Graph, params: &[Var], inputs: Var) -> Result<Var> {
        let x = g.value(inputs);
        if x.rank() != 2 || x.cols() != self.spec.d || !x.rows().is_multiple_of(self.spec.n_con) {
            return Err(Error::shape("model input", x.shape(), &[self.spec.n_con, self.spec.d]));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape("model parameters", &[self.params.len()], &[params.len()]));
        }
        match self.spec.arch {
            Arch::Transformer | Arch::Cisformer => transformer::forward(&self.spec, g, params, inputs),
            Arch::Mlp => mlp::forward(&self.spec, g, params, inputs),
            Arch::Lstm => lstm::forward(&self.spec, g, params, inputs),
        }
    }

    fn input_tensor(&self, batch: &EncodedBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        Tensor::new(vec![batch.batch * batch.n_con, self.spec.d], batch.inputs.clone())
    }

    /// Logits `(batch * n_con, N)` without recording gradients.
    pub fn logits(&self, batch: &EncodedBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(self.input_tensor(batch)?);
        let vars: Vec<Var> = self.params.iter().map(|p| g.input(p.clone())).collect();
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }

    /// Mean cross-entropy, its parameter gradients, and the logits it was computed from.
    pub fn loss_and_grads(&self, batch: &EncodedBatch) -> Result<(f64, Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let x = g.input(self.input_tensor(batch)?);
        let vars: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let logits = self.forward(&mut g, &vars, x)?;
        let loss = g.cross_entropy(logits, &batch.targets)?;
        let value = g.value(loss).item();
        let logits_t = g.value(logits).clone();
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(&self.params)
            .map(|(v, p)| g.take_grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, grads, logits_t))
    }

    pub fn save(&self, path: &Path) -> Result<usize> {
        let mut f = BufWriter::new(File::create(path)?);
        let n = write_checkpoint(&mut f, &self.params)?;
        f.flush()?;
        Ok(n)
    }

    pub fn load(spec: ModelSpec, path: &Path) -> Result<Self> {
        let params = read_checkpoint(BufReader::new(File::open(path)?))?;
        Model::from_params(spec, params)
    }
}
