//! Self-contained `key=value` experiment manifests and the single-run driver.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use iarc::models::parse_kv;
use iarc::train::{train_with, EvalPoint};
use iarc::{Arch, AttnKind, Model, ModelSpec, TaskConfig, TaskSet, TrainConfig, TrainReport};

use crate::{write_atomic, CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const REPORT_FILE: &str = "report.csv";
pub const LATEST_CHECKPOINT: &str = "checkpoint_latest.bin";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";

const MODEL_KEYS: [&str; 7] = ["arch", "attention", "layers", "d", "heads", "symbols", "hidden"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentManifest {
    pub id: String,
    pub model: ModelSpec,
    pub tasks: TaskSet,
    pub train: TrainConfig,
    /// Seeds parameter initialization; the data seed is `train.seed`.
    pub init_seed: u64,
    pub out: PathBuf,
}

impl ExperimentManifest {
    /// Paper-scale defaults for `arch` on `tasks`, with `N = 20 - |tasks|`.
    pub fn paper(id: &str, arch: Arch, attention: AttnKind, tasks: TaskSet, out: &Path) -> Result<Self> {
        let n = TaskConfig::with_embed_dim(tasks.clone(), iarc::models::PAPER_D, 0)?.n_symbols;
        let model = match arch {
            Arch::Transformer => ModelSpec::paper_transformer(attention, n),
            Arch::Cisformer => ModelSpec::paper_cisformer(attention, n),
            Arch::Mlp => ModelSpec::paper_mlp(n),
            Arch::Lstm => ModelSpec::paper_lstm(n),
        };
        Ok(ExperimentManifest {
            id: id.to_string(),
            model,
            tasks,
            train: TrainConfig::default(),
            init_seed: 0,
            out: out.to_path_buf(),
        })
    }

    /// Desk-scale preset: 2 layers (4 for the MLP), LSTM hidden size 64,
    /// 300 epochs, evaluation every 25 epochs on 5 batches.
    pub fn apply_quick(&mut self) {
        self.model.layers = match self.model.arch {
            Arch::Mlp => 4,
            _ => 2,
        };
        if self.model.arch == Arch::Lstm {
            self.model.hidden = 64;
        }
        self.train.epochs = 300;
        self.train.eval_every = 25;
        self.train.eval_batches = 5;
    }

    pub fn task_config(&self) -> Result<TaskConfig> {
        Ok(TaskConfig::new(self.tasks.clone(), self.model.n_symbols, self.train.seed)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\', '\n']) {
            return Err(CliError::Usage(format!("bad experiment id {:?}", self.id)));
        }
        self.model.validate()?;
        self.train.validate()?;
        let task = self.task_config()?;
        if task.embed_dim() != self.model.d {
            return Err(CliError::Usage(format!(
                "d = {} but {} symbols + {} control tokens = {}",
                self.model.d,
                task.n_symbols,
                task.n_control(),
                task.embed_dim()
            )));
        }
        if self.model.n_con != self.train.n_con {
            return Err(CliError::Usage("model and training context lengths differ".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let _ = writeln!(s, "id={}", self.id);
        let _ = writeln!(s, "out={}", self.out.display());
        s.push_str("# model\n");
        let _ = writeln!(s, "arch={}\nattention={}\nlayers={}\nd={}", m.arch, m.attention, m.layers, m.d);
        let _ = writeln!(s, "heads={}\nsymbols={}\nhidden={}", m.heads, m.n_symbols, m.hidden);
        let _ = writeln!(s, "init_seed={}", self.init_seed);
        s.push_str("# task\n");
        let _ = writeln!(s, "tasks={}", self.tasks);
        s.push_str("# training\n");
        let _ = writeln!(s, "n_con={}\nepochs={}\nbatch={}", t.n_con, t.epochs, t.batch_size);
        let _ = writeln!(s, "lr={}\nmomentum={}", t.lr, t.momentum);
        let _ = writeln!(s, "eval_every={}\neval_batches={}\nseed={}", t.eval_every, t.eval_batches, t.seed);
        s
    }

    /// Parses a manifest. Missing keys fall back to the paper-scale
    /// cisformer+EA on IARC; `symbols` defaults to `d - |tasks|`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = ExperimentManifest::paper("run", Arch::Cisformer, AttnKind::Ea, TaskSet::iarc(), Path::new("run"))?;
        let mut symbols_given = false;
        for (key, value) in parse_kv(text)? {
            let num = |v: &str| -> Result<u64> {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("manifest key {key}: expected an integer, got {v:?}")))
            };
            let float = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("manifest key {key}: expected a number, got {v:?}")))
            };
            match key.as_str() {
                "id" => m.id = value,
                "out" => m.out = PathBuf::from(value),
                "tasks" => m.tasks = value.parse()?,
                "init_seed" => m.init_seed = num(&value)?,
                "n_con" => {
                    m.train.n_con = num(&value)? as usize;
                    m.model.n_con = m.train.n_con;
                }
                "epochs" => m.train.epochs = num(&value)? as usize,
                "batch" => m.train.batch_size = num(&value)? as usize,
                "lr" => m.train.lr = float(&value)?,
                "momentum" => m.train.momentum = float(&value)?,
                "eval_every" => m.train.eval_every = num(&value)? as usize,
                "eval_batches" => m.train.eval_batches = num(&value)? as usize,
                "seed" => m.train.seed = num(&value)?,
                k if MODEL_KEYS.contains(&k) => {
                    symbols_given |= k == "symbols";
                    m.model.set(k, &value)?;
                }
                k => return Err(CliError::Usage(format!("unknown manifest key {k:?}"))),
            }
        }
        if !symbols_given {
            m.model.n_symbols = m.model.d.saturating_sub(m.tasks.len());
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Trains one manifest from scratch. Writes the manifest, the CSV report, a
/// checkpoint refreshed at every evaluation and the final checkpoint under
/// `manifest.out`.
pub fn run(manifest: &ExperimentManifest, mut progress: impl FnMut(&EvalPoint)) -> Result<TrainReport> {
    manifest.validate()?;
    let dir = &manifest.out;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;

    let task = manifest.task_config()?;
    let mut model = Model::init(manifest.model.clone(), manifest.init_seed)?;
    let latest = dir.join(LATEST_CHECKPOINT);
    let mut report = train_with(&mut model, &task, &manifest.train, |p, m| {
        progress(p);
        save(m, &latest)
    })?;
    save(&model, &dir.join(FINAL_CHECKPOINT))?;
    report.model = format!("{} id={}", report.model, manifest.id);
    write_atomic(&dir.join(REPORT_FILE), report.to_csv().as_bytes())?;
    Ok(report)
}

fn save(model: &Model, path: &Path) -> iarc::Result<()> {
    let tmp = path.with_extension("bin.tmp");
    model.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
