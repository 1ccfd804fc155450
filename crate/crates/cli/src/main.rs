use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iarc::stream::{generate_stream, validate_stream};
use iarc::train::evaluate;
use iarc::{Arch, AttnKind, Model, TaskConfig, TaskSet};
use iarc_cli::experiments::{self, SuiteOptions};
use iarc_cli::manifest::{self, ExperimentManifest, FINAL_CHECKPOINT, MANIFEST_FILE};
use iarc_cli::{write_atomic, CliError, Result};

/// IARC task-switching benchmark: stream generation, training and the
/// reproduction suites.
#[derive(Parser)]
#[command(name = "iarc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stream and write its text dump.
    Gen(GenArgs),
    /// Train one model from a manifest and/or flags.
    Train(TrainArgs),
    /// Evaluate a trained run directory on fresh batches.
    Eval(EvalArgs),
    /// Standard 60-layer transformer, DPA vs EA over IARC/IAR/IA/IR.
    Table1(SuiteArgs),
    /// LSTM, MLP, cisformer+DPA and cisformer+EA on IARC plus ablation bars.
    Fig1(Fig1Args),
}

#[derive(Args)]
struct GenArgs {
    /// Task subset, e.g. IARC, IAR, IA, IR.
    #[arg(long, default_value = "IARC")]
    tasks: TaskSet,
    /// Number of symbols N.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Stream length.
    #[arg(long, default_value_t = 1000)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-check the stream against the oracle (exit 2 on mismatch).
    #[arg(long)]
    validate: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value manifest; flags below override its entries.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Experiment id, also the default output subdirectory.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    tasks: Option<TaskSet>,
    /// transformer | cisformer | mlp | lstm
    #[arg(long)]
    arch: Option<Arch>,
    /// dpa | ea
    #[arg(long)]
    attn: Option<AttnKind>,
    #[arg(long)]
    layers: Option<usize>,
    /// Embedding dimension d = N + number of control tokens.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// LSTM hidden size.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Context length N_con.
    #[arg(long)]
    ncon: Option<usize>,
    /// Data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parameter initialization seed.
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Desk-scale preset (2 layers, 300 epochs), applied before the other flags.
    #[arg(long)]
    quick: bool,
    /// Print evaluation points to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to load instead of the run's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    eval_batches: usize,
    #[arg(long)]
    batch: Option<usize>,
    /// Evaluation data seed; defaults to the run's held-out seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SuiteArgs {
    /// Desk-scale preset, marked non-paper-scale in all outputs.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Concurrent trainings; defaults to the available cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print evaluation points to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct Fig1Args {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Skip the three extra subsets behind the right panel.
    #[arg(long)]
    no_ablation: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Table1(a) => table1(a),
        Command::Fig1(a) => fig1(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let cfg = TaskConfig::new(a.tasks, a.n, a.seed)?;
    let stream = generate_stream(&cfg, a.len)?;
    if a.validate && !validate_stream(&stream, &cfg) {
        return Err(CliError::InvalidStream(format!("seed {}", a.seed)));
    }
    match &a.out {
        Some(path) => {
            let mut buf = Vec::new();
            stream.write_dump(&mut buf).map_err(|e| CliError::io(path, e))?;
            write_atomic(path, &buf)?;
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            stream
                .write_dump(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| CliError::io(&PathBuf::from("<stdout>"), e))?;
        }
    }
    if a.validate {
        eprintln!("validated {} positions", stream.len());
    }
    Ok(())
}

fn build_manifest(a: &TrainArgs) -> Result<ExperimentManifest> {
    let mut m = match &a.manifest {
        Some(p) => ExperimentManifest::load(p)?,
        None => {
            let arch = a.arch.unwrap_or(Arch::Cisformer);
            let attn = a.attn.unwrap_or(AttnKind::Ea);
            let tasks = a.tasks.clone().unwrap_or_else(TaskSet::iarc);
            let id = a.id.clone().unwrap_or_else(|| format!("{arch}_{attn}_{tasks}"));
            ExperimentManifest::paper(&id, arch, attn, tasks, &PathBuf::from("runs").join(&id))?
        }
    };
    if a.manifest.is_some() {
        if let Some(arch) = a.arch {
            m.model.arch = arch;
        }
        if let Some(attn) = a.attn {
            m.model.attention = attn;
        }
        if let Some(t) = &a.tasks {
            m.tasks = t.clone();
        }
        if let Some(id) = &a.id {
            m.id = id.clone();
        }
    }
    if a.quick {
        m.apply_quick();
    }
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(a.layers, m.model.layers);
    set!(a.d, m.model.d);
    set!(a.heads, m.model.heads);
    set!(a.hidden, m.model.hidden);
    set!(a.epochs, m.train.epochs);
    set!(a.batch, m.train.batch_size);
    set!(a.lr, m.train.lr);
    set!(a.momentum, m.train.momentum);
    set!(a.seed, m.train.seed);
    set!(a.init_seed, m.init_seed);
    set!(a.eval_every, m.train.eval_every);
    set!(a.eval_batches, m.train.eval_batches);
    set!(a.out, m.out);
    if let Some(n) = a.ncon {
        m.train.n_con = n;
        m.model.n_con = n;
    }
    m.model.n_symbols = m.model.d.saturating_sub(m.tasks.len());
    m.validate()?;
    Ok(m)
}

fn train(a: TrainArgs) -> Result<()> {
    let m = build_manifest(&a)?;
    let verbose = a.verbose;
    let report = manifest::run(&m, |p| {
        if verbose {
            eprintln!("epoch {} loss {:.4} acc {:.4}", p.epoch, p.loss, p.accuracy);
        }
    })?;
    let first = report.initial().map(|p| p.accuracy).unwrap_or(f64::NAN);
    println!(
        "{} on {}: accuracy {:.4} -> {:.4} after {} epochs ({:.1}s), outputs in {}",
        m.model,
        m.tasks,
        first,
        report.final_accuracy(),
        m.train.epochs,
        report.wall_clock_secs,
        m.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = ExperimentManifest::load(&a.run.join(MANIFEST_FILE))?;
    let ckpt = a.checkpoint.unwrap_or_else(|| a.run.join(FINAL_CHECKPOINT));
    let model = Model::load(m.model.clone(), &ckpt)?;
    let task = m.task_config()?;
    let seed = a.seed.unwrap_or_else(|| m.train.eval_seed());
    let batch = a.batch.unwrap_or(m.train.batch_size);
    let r = evaluate(&model, &task, m.train.n_con, batch, a.eval_batches, seed)?;
    println!(
        "{} on {}: accuracy {:.6} loss {:.6} over {} predictions",
        m.model, m.tasks, r.accuracy, r.loss, r.predictions
    );
    Ok(())
}

fn suite_options(a: &SuiteArgs, default_out: &str) -> SuiteOptions {
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    SuiteOptions {
        quick: a.quick,
        epochs: a.epochs,
        layers: a.layers,
        eval_every: a.eval_every,
        eval_batches: a.eval_batches,
        seed: a.seed,
        jobs,
        out: a.out.clone().unwrap_or_else(|| PathBuf::from(default_out)),
        verbose: a.verbose,
    }
}

fn table1(a: SuiteArgs) -> Result<()> {
    let opts = suite_options(&a, "table1_out");
    let t = experiments::table1(&opts)?;
    print!("{}", t.render());
    println!("outputs in {}", opts.out.display());
    Ok(())
}

fn fig1(a: Fig1Args) -> Result<()> {
    let opts = suite_options(&a.suite, "fig1_out");
    let f = experiments::fig1(&opts, !a.no_ablation)?;
    print!("{}", f.summary());
    if !a.no_ablation {
        print!("{}", f.right_csv());
    }
    fs::metadata(&opts.out).map_err(|e| CliError::io(&opts.out, e))?;
    println!("outputs in {}", opts.out.display());
    Ok(())
}
