//! IARC token streams: generation, the exact next-symbol oracle, window
//! slicing with control tapes, and the plain-text / binary exchange formats.
//!
//! A stream is a sequence of symbols in `[0, N)` with an aligned tape. A
//! control token taped at position `t` sits on symbol `x_t`; it changes the
//! rule that produces `x_{t+1}` onward, never `x_t` itself.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Control tokens in their fixed tape-slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Control {
    I,
    A,
    R,
    C,
}

impl Control {
    pub const ALL: [Control; 4] = [Control::I, Control::A, Control::R, Control::C];

    pub fn letter(self) -> char {
        match self {
            Control::I => 'I',
            Control::A => 'A',
            Control::R => 'R',
            Control::C => 'C',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'I' => Some(Control::I),
            'A' => Some(Control::A),
            'R' => Some(Control::R),
            'C' => Some(Control::C),
            _ => None,
        }
    }
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// The rule currently producing symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Increment,
    Addition,
    Reverse,
}

/// A canonical (sorted, deduplicated) subset of control tokens, e.g. `IAR`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskSet(Vec<Control>);

impl TaskSet {
    pub fn new(tokens: impl IntoIterator<Item = Control>) -> Result<Self> {
        let mut v: Vec<Control> = tokens.into_iter().collect();
        v.sort();
        v.dedup();
        if !v.iter().any(|c| *c != Control::C) {
            return Err(Error::InvalidConfig(
                "task set needs at least one of I, A, R".into(),
            ));
        }
        Ok(TaskSet(v))
    }

    pub fn iarc() -> Self {
        TaskSet(Control::ALL.to_vec())
    }

    pub fn tokens(&self) -> &[Control] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, c: Control) -> bool {
        self.0.contains(&c)
    }

    /// Tape slot of `c` within this subset (slots follow the I,A,R,C order).
    pub fn slot(&self, c: Control) -> Option<usize> {
        self.0.iter().position(|x| *x == c)
    }

    /// Tokens allowed to open a stream (everything except C).
    pub fn openers(&self) -> Vec<Control> {
        self.0.iter().copied().filter(|c| *c != Control::C).collect()
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.0 {
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for ch in s.trim().chars() {
            let c = Control::from_letter(ch)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown task letter {ch:?}")))?;
            if out.contains(&c) {
                return Err(Error::InvalidConfig(format!("duplicate task letter {ch:?}")));
            }
            out.push(c);
        }
        TaskSet::new(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskConfig {
    pub tasks: TaskSet,
    pub n_symbols: usize,
    pub spacing_min: usize,
    pub spacing_max: usize,
    pub seed: u64,
}

impl TaskConfig {
    pub fn new(tasks: TaskSet, n_symbols: usize, seed: u64) -> Result<Self> {
        let cfg = TaskConfig {
            tasks,
            n_symbols,
            spacing_min: 3,
            spacing_max: 9,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Picks `N = d - S` so that the one-hot embedding has exactly `embed_dim` slots.
    pub fn with_embed_dim(tasks: TaskSet, embed_dim: usize, seed: u64) -> Result<Self> {
        let s = tasks.len();
        if embed_dim <= s + 1 {
            return Err(Error::InvalidConfig(format!(
                "embedding dimension {embed_dim} leaves no room for symbols next to {s} tape slots"
            )));
        }
        TaskConfig::new(tasks, embed_dim - s, seed)
    }

    pub fn with_spacing(mut self, min: usize, max: usize) -> Result<Self> {
        self.spacing_min = min;
        self.spacing_max = max;
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn n_control(&self) -> usize {
        self.tasks.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.n_symbols + self.n_control()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_symbols < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 symbols, got {}",
                self.n_symbols
            )));
        }
        if self.n_symbols > u32::MAX as usize {
            return Err(Error::InvalidConfig("symbol count exceeds u32".into()));
        }
        if self.spacing_min < 1 || self.spacing_max < self.spacing_min {
            return Err(Error::InvalidConfig(format!(
                "spacing range [{}, {}] is empty or starts below 1",
                self.spacing_min, self.spacing_max
            )));
        }
        Ok(())
    }
}

/// Oracle state carried along the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OracleState {
    pub task: Option<Task>,
    /// Increment `k`, meaningful under `Task::Increment`.
    pub increment: u64,
    /// Stream index the reverse copy mirrors around, meaningful under `Task::Reverse`.
    pub anchor: usize,
}

impl OracleState {
    /// State after control token `c` is taped at position `t`.
    pub fn apply(self, c: Control, t: usize) -> Result<Self> {
        let mut s = self;
        match c {
            Control::I => {
                s.task = Some(Task::Increment);
                s.increment = 1;
            }
            Control::A => s.task = Some(Task::Addition),
            Control::R => {
                s.task = Some(Task::Reverse);
                s.anchor = t;
            }
            Control::C => match s.task {
                None => return Err(Error::ContextWithoutTask(t)),
                Some(Task::Increment) => s.increment += 1,
                Some(Task::Addition) => {}
                Some(Task::Reverse) => s.anchor = t,
            },
        }
        Ok(s)
    }
}

/// Next symbol `x_{t+1}` given `history[0..=t]` and the token taped on `x_t`.
///
/// The taped token updates the state before the rule is applied.
pub fn oracle_next(
    state: OracleState,
    history: &[u32],
    t: usize,
    taped: Option<Control>,
    n_symbols: usize,
) -> Result<(u32, OracleState)> {
    if t >= history.len() {
        return Err(Error::HistoryIndex {
            t,
            len: history.len(),
        });
    }
    let state = match taped {
        Some(c) => state.apply(c, t)?,
        None => state,
    };
    let n = n_symbols as u64;
    let next = match state.task {
        None => return Err(Error::NoActiveTask(t)),
        Some(Task::Increment) => (history[t] as u64 + state.increment % n) % n,
        Some(Task::Addition) => {
            let prev = if t == 0 { 0 } else { history[t - 1] as u64 };
            (history[t] as u64 + prev) % n
        }
        Some(Task::Reverse) => {
            let idx = (2 * state.anchor as i64 - t as i64).max(0) as usize;
            history[idx] as u64
        }
    };
    Ok((next as u32, state))
}

/// Symbols with an aligned control tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub symbols: Vec<u32>,
    pub tape: Vec<Option<Control>>,
}

impl TokenStream {
    pub fn new(symbols: Vec<u32>, tape: Vec<Option<Control>>) -> Result<Self> {
        if symbols.len() != tape.len() {
            return Err(Error::InvalidConfig(format!(
                "{} symbols but {} tape entries",
                symbols.len(),
                tape.len()
            )));
        }
        Ok(TokenStream { symbols, tape })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn control_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.tape
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|_| i))
    }

    /// Writes the `index<TAB>symbol<TAB>tape` dump, `-` marking an empty tape slot.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, (s, c)) in self.symbols.iter().zip(&self.tape).enumerate() {
            let tape = c.map(Control::letter).unwrap_or('-');
            writeln!(w, "{i}\t{s}\t{tape}")?;
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(r: R) -> Result<Self> {
        let mut symbols = Vec::new();
        let mut tape = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    "stream dump",
                    format!("line {}: expected 3 tab-separated fields", lineno + 1),
                ));
            }
            let idx: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse("stream dump", format!("line {}: bad index", lineno + 1)))?;
            if idx != symbols.len() {
                return Err(Error::parse(
                    "stream dump",
                    format!("line {}: index {idx} out of sequence", lineno + 1),
                ));
            }
            let sym: u32 = fields[1]
                .parse()
                .map_err(|_| Error::parse("stream dump", format!("line {}: bad symbol", lineno + 1)))?;
            let t = match fields[2] {
                "-" => None,
                s if s.chars().count() == 1 => Some(
                    Control::from_letter(s.chars().next().unwrap()).ok_or_else(|| {
                        Error::parse("stream dump", format!("line {}: bad tape token", lineno + 1))
                    })?,
                ),
                _ => {
                    return Err(Error::parse(
                        "stream dump",
                        format!("line {}: bad tape token", lineno + 1),
                    ))
                }
            };
            symbols.push(sym);
            tape.push(t);
        }
        Ok(TokenStream { symbols, tape })
    }
}

pub fn generate_stream(config: &TaskConfig, length: usize) -> Result<TokenStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    generate_stream_with(config, length, &mut rng)
}

/// Generates a stream drawing all randomness from `rng`.
///
/// Draw order: opening control token, then for every later control position
/// its gap followed by its token, then the initial symbol.
pub fn generate_stream_with<G: Rng + ?Sized>(
    config: &TaskConfig,
    length: usize,
    rng: &mut G,
) -> Result<TokenStream> {
    config.validate()?;
    if length == 0 {
        return Err(Error::InvalidConfig("stream length must be at least 1".into()));
    }
    let openers = config.tasks.openers();
    let all = config.tasks.tokens();

    let mut tape = vec![None; length];
    tape[0] = Some(openers[rng.gen_range(0..openers.len())]);
    let mut pos = 0usize;
    loop {
        pos += rng.gen_range(config.spacing_min..=config.spacing_max);
        if pos >= length {
            break;
        }
        tape[pos] = Some(all[rng.gen_range(0..all.len())]);
    }

    let mut symbols = Vec::with_capacity(length);
    symbols.push(rng.gen_range(0..config.n_symbols) as u32);
    let mut state = OracleState::default();
    for t in 0..length - 1 {
        let (next, s) = oracle_next(state, &symbols, t, tape[t], config.n_symbols)?;
        symbols.push(next);
        state = s;
    }
    Ok(TokenStream { symbols, tape })
}

/// True iff every symbol is in range, every taped token belongs to the task
/// subset, and the oracle reproduces each symbol from its predecessors.
///
/// Symbols before the first control token have no governing rule and are
/// accepted as given context.
pub fn validate_stream(stream: &TokenStream, config: &TaskConfig) -> bool {
    if stream.symbols.len() != stream.tape.len() {
        return false;
    }
    if stream.symbols.iter().any(|&s| s as usize >= config.n_symbols) {
        return false;
    }
    if stream.tape.iter().flatten().any(|c| !config.tasks.contains(*c)) {
        return false;
    }
    let mut state = OracleState::default();
    for t in 0..stream.len().saturating_sub(1) {
        if state.task.is_none() && stream.tape[t].is_none() {
            continue;
        }
        match oracle_next(state, &stream.symbols, t, stream.tape[t], config.n_symbols) {
            Ok((next, s)) if next == stream.symbols[t + 1] => state = s,
            _ => return false,
        }
    }
    true
}

/// One-hot encoded windows: `inputs` is row-major `(batch, n_con, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub batch: usize,
    pub n_con: usize,
    pub n_symbols: usize,
    pub tasks: TaskSet,
    pub inputs: Vec<f64>,
    /// Row-major `(batch, n_con)`; `targets[b][t]` is the symbol at window offset `t + 1`.
    pub targets: Vec<u32>,
}

impl EncodedBatch {
    pub fn embed_dim(&self) -> usize {
        self.n_symbols + self.tasks.len()
    }

    /// The `d`-dimensional input vector at window `b`, position `t`.
    pub fn input(&self, b: usize, t: usize) -> &[f64] {
        let d = self.embed_dim();
        let off = (b * self.n_con + t) * d;
        &self.inputs[off..off + d]
    }

    pub fn target(&self, b: usize, t: usize) -> u32 {
        self.targets[b * self.n_con + t]
    }

    /// Recovers the symbols and tape of window `b` from its one-hot rows.
    pub fn decode_window(&self, b: usize) -> (Vec<u32>, Vec<Option<Control>>) {
        let n = self.n_symbols;
        let mut syms = Vec::with_capacity(self.n_con);
        let mut tape = Vec::with_capacity(self.n_con);
        for t in 0..self.n_con {
            let x = self.input(b, t);
            let s = x[..n].iter().position(|&v| v != 0.0).unwrap_or(0);
            syms.push(s as u32);
            tape.push(
                x[n..]
                    .iter()
                    .position(|&v| v != 0.0)
                    .map(|slot| self.tasks.tokens()[slot]),
            );
        }
        (syms, tape)
    }

    /// Three little-endian `u32` dims `(batch, n_con, d)`, then little-endian `f32` data.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for dim in [self.batch, self.n_con, self.embed_dim()] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in &self.inputs {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

/// Slices `count` windows of length `n_con` at uniformly random starts.
pub fn slice_windows<G: Rng + ?Sized>(
    stream: &TokenStream,
    config: &TaskConfig,
    n_con: usize,
    count: usize,
    rng: &mut G,
) -> Result<EncodedBatch> {
    if n_con == 0 || stream.len() < n_con + 1 {
        return Err(Error::StreamTooShort {
            len: stream.len(),
            n_con,
        });
    }
    let d = config.embed_dim();
    let n = config.n_symbols;
    let mut inputs = vec![0.0; count * n_con * d];
    let mut targets = Vec::with_capacity(count * n_con);
    let last_start = stream.len() - n_con - 1;
    for b in 0..count {
        let start = rng.gen_range(0..=last_start);
        for t in 0..n_con {
            let row = &mut inputs[(b * n_con + t) * d..(b * n_con + t + 1) * d];
            let sym = stream.symbols[start + t] as usize;
            if sym >= n {
                return Err(Error::InvalidConfig(format!(
                    "symbol {sym} outside vocabulary of {n}"
                )));
            }
            row[sym] = 1.0;
            if let Some(c) = stream.tape[start + t] {
                let slot = config.tasks.slot(c).ok_or_else(|| {
                    Error::InvalidConfig(format!("token {c} not in task set {}", config.tasks))
                })?;
                row[n + slot] = 1.0;
            }
            targets.push(stream.symbols[start + t + 1]);
        }
    }
    Ok(EncodedBatch {
        batch: count,
        n_con,
        n_symbols: n,
        tasks: config.tasks.clone(),
        inputs,
        targets,
    })
}

/// Draws a fresh batch: one stream long enough that windows rarely overlap,
/// generated and sliced from a single `rng`.
pub fn sample_batch<G: Rng + ?Sized>(
    config: &TaskConfig,
    n_con: usize,
    count: usize,
    rng: &mut G,
) -> Result<EncodedBatch> {
    let length = (count * (n_con + 1)).max(4 * (n_con + 1)) + n_con + 1;
    let stream = generate_stream_with(config, length, rng)?;
    slice_windows(&stream, config, n_con, count, rng)
}
