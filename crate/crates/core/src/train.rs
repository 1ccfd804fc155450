//! Training and evaluation.
//!
//! One epoch is one momentum-SGD step on the mean cross-entropy of a freshly
//! generated batch of windows, over every window position. Evaluation runs on
//! separately seeded fresh batches and scores only the `N` symbol classes.

use std::fmt::Write as _;
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::optim::SgdMomentum;
use crate::stream::{sample_batch, EncodedBatch, TaskConfig, TaskSet};
use crate::tensor::Tensor;

/// Mixed into the data seed for held-out evaluation batches.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1_0000_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub n_con: usize,
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Seeds the training and evaluation data.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8000,
            batch_size: 200,
            lr: SgdMomentum::DEFAULT_LR,
            momentum: SgdMomentum::DEFAULT_MOMENTUM,
            n_con: 24,
            eval_every: 100,
            eval_batches: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_con == 0 || self.eval_every == 0 || self.eval_batches == 0 {
            return Err(Error::InvalidConfig(
                "batch size, n_con, eval_every and eval_batches must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} / momentum {} must be finite and nonnegative",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }

    pub fn eval_seed(&self) -> u64 {
        self.seed ^ EVAL_SEED_SALT
    }

    /// Single-line `key=value` echo used as the CSV header comment.
    pub fn echo(&self) -> String {
        format!(
            "epochs={} batch={} lr={} momentum={} n_con={} eval_every={} eval_batches={} seed={}",
            self.epochs,
            self.batch_size,
            self.lr,
            self.momentum,
            self.n_con,
            self.eval_every,
            self.eval_batches,
            self.seed
        )
    }
}

/// Anything that maps an encoded batch to symbol logits `(batch * n_con, N)`.
pub trait Predictor {
    fn predict(&self, batch: &EncodedBatch) -> Result<Tensor>;
}

impl Predictor for Model {
    fn predict(&self, batch: &EncodedBatch) -> Result<Tensor> {
        self.logits(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: usize,
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Correct predictions and summed cross-entropy over one batch.
fn score(logits: &Tensor, batch: &EncodedBatch) -> Result<(usize, f64)> {
    let n = batch.n_symbols;
    if logits.cols() != n || logits.rows() != batch.targets.len() {
        return Err(Error::shape("logits", logits.shape(), &[batch.targets.len(), n]));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, &t) in logits.data().chunks(n).zip(&batch.targets) {
        let t = t as usize;
        if t >= n {
            return Err(Error::InvalidConfig(format!("target {t} is not a symbol class (< {n})")));
        }
        if argmax(row) == t {
            correct += 1;
        }
        loss += crate::autodiff::log_sum_exp(row) - row[t];
    }
    Ok((correct, loss))
}

/// Accuracy and mean loss over `n_batches` fresh batches drawn from `seed`.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    task: &TaskConfig,
    n_con: usize,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut correct, mut loss, mut total) = (0usize, 0.0, 0usize);
    for _ in 0..n_batches {
        let batch = sample_batch(task, n_con, batch_size, &mut rng)?;
        let logits = model.predict(&batch)?;
        let (c, l) = score(&logits, &batch)?;
        correct += c;
        loss += l;
        total += batch.targets.len();
    }
    let denom = total.max(1) as f64;
    Ok(EvalResult {
        loss: loss / denom,
        accuracy: correct as f64 / denom,
        predictions: total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub model: String,
    pub tasks: String,
    pub config: TrainConfig,
    /// Held-out evaluations at epoch 0, every `eval_every` epochs and the last epoch.
    pub curve: Vec<EvalPoint>,
    /// Mean training-batch loss of every epoch.
    pub train_loss: Vec<f64>,
    /// Final accuracies keyed by task subset, filled by the ablation suite.
    pub ablation: Vec<(String, f64)>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> f64 {
        self.curve.last().map(|p| p.accuracy).unwrap_or(0.0)
    }

    pub fn initial(&self) -> Option<EvalPoint> {
        self.curve.first().copied()
    }

    /// `epoch,loss,accuracy` rows under a config comment line, then a trailing
    /// `key=value` block with ablation results when present.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# model={} tasks={} {}", self.model, self.tasks, self.config.echo());
        s.push_str("epoch,loss,accuracy\n");
        for p in &self.curve {
            let _ = writeln!(s, "{},{:.6},{:.6}", p.epoch, p.loss, p.accuracy);
        }
        if !self.ablation.is_empty() {
            s.push_str("# ablation\n");
            for (k, v) in &self.ablation {
                let _ = writeln!(s, "{k}={v:.6}");
            }
        }
        s
    }
}

/// Trains `model` in place; see [`train_with`].
pub fn train(model: &mut Model, task: &TaskConfig, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, task, cfg, |_, _| Ok(()))
}

/// Trains `model` in place, calling `on_eval` after every held-out evaluation.
pub fn train_with<F>(model: &mut Model, task: &TaskConfig, cfg: &TrainConfig, mut on_eval: F) -> Result<TrainReport>
where
    F: FnMut(&EvalPoint, &Model) -> Result<()>,
{
    cfg.validate()?;
    task.validate()?;
    let spec = model.spec().clone();
    if spec.d != task.embed_dim() || spec.n_symbols != task.n_symbols || spec.n_con != cfg.n_con {
        return Err(Error::shape(
            "train",
            &[spec.d, spec.n_symbols, spec.n_con],
            &[task.embed_dim(), task.n_symbols, cfg.n_con],
        ));
    }
    let start = Instant::now();
    let mut report = TrainReport {
        model: spec.to_string(),
        tasks: task.tasks.to_string(),
        config: cfg.clone(),
        curve: Vec::new(),
        train_loss: Vec::with_capacity(cfg.epochs),
        ablation: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let eval = |m: &Model, epoch: usize| -> Result<EvalPoint> {
        let r = evaluate(m, task, cfg.n_con, cfg.batch_size, cfg.eval_batches, cfg.eval_seed())?;
        Ok(EvalPoint {
            epoch,
            loss: r.loss,
            accuracy: r.accuracy,
        })
    };

    let p0 = eval(model, 0)?;
    on_eval(&p0, model)?;
    report.curve.push(p0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum, model.params());
    for epoch in 1..=cfg.epochs {
        let batch = sample_batch(task, cfg.n_con, cfg.batch_size, &mut rng)?;
        let (loss, grads, _) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, loss });
        }
        opt.step(model.params_mut(), &grads)?;
        report.train_loss.push(loss);
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let p = eval(model, epoch)?;
            if !p.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, loss: p.loss });
            }
            on_eval(&p, model)?;
            report.curve.push(p);
        }
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// The four task subsets of the ablation, in table order.
pub fn ablation_subsets() -> Vec<TaskSet> {
    ["IARC", "IAR", "IA", "IR"]
        .iter()
        .map(|s| s.parse().expect("static task subset"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub tasks: TaskSet,
    pub accuracy: f64,
    pub report: TrainReport,
}

/// Trains one fresh model per task subset, each with `N = d - S` symbols.
///
/// `factory` receives the subset's task config (with the right `N`) and
/// returns an initialized model.
pub fn ablation_suite<F>(embed_dim: usize, cfg: &TrainConfig, factory: F) -> Result<Vec<AblationRow>>
where
    F: Fn(&TaskConfig) -> Result<Model>,
{
    let mut rows = Vec::new();
    for tasks in ablation_subsets() {
        let task = TaskConfig::with_embed_dim(tasks.clone(), embed_dim, cfg.seed)?;
        let mut model = factory(&task)?;
        let mut report = train(&mut model, &task, cfg)?;
        let accuracy = report.final_accuracy();
        report.ablation.push((tasks.to_string(), accuracy));
        rows.push(AblationRow {
            tasks,
            accuracy,
            report,
        });
    }
    Ok(rows)
}
