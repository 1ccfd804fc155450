//! The two reproduction suites: the 60-layer transformer DPA/EA ablation
//! table and the four-model IARC comparison with its ablation bars.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use iarc::train::{ablation_subsets, EvalPoint};
use iarc::{Arch, AttnKind, TaskSet, TrainReport};

use crate::manifest::{self, ExperimentManifest};
use crate::plot;
use crate::{write_atomic, CliError, Result};

/// Table values as printed, rows DPA then EA, columns IARC, IAR, IA, IR.
pub const PAPER_TABLE1: [[f64; 4]; 2] = [[0.45, 0.48, 0.80, 0.84], [0.58, 0.70, 0.99, 0.92]];

pub const TABLE1_ATTENTION: [AttnKind; 2] = [AttnKind::Dpa, AttnKind::Ea];

/// Column names and models of the comparison figure.
pub const FIG1_MODELS: [(&str, Arch, AttnKind); 4] = [
    ("lstm", Arch::Lstm, AttnKind::Dpa),
    ("mlp", Arch::Mlp, AttnKind::Dpa),
    ("cis_dpa", Arch::Cisformer, AttnKind::Dpa),
    ("cis_ea", Arch::Cisformer, AttnKind::Ea),
];

pub const WATERMARK: &str = "NON-PAPER-SCALE (quick preset or overrides; not comparable to published values)";

/// Scale and output settings shared by the suites.
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Desk-scale preset: few layers, a few hundred epochs, small LSTM.
    pub quick: bool,
    pub epochs: Option<usize>,
    pub layers: Option<usize>,
    pub eval_every: Option<usize>,
    pub eval_batches: Option<usize>,
    pub seed: u64,
    /// Concurrent trainings.
    pub jobs: usize,
    pub out: PathBuf,
    /// Print evaluation points to stderr as runs progress.
    pub verbose: bool,
}

impl SuiteOptions {
    pub fn new(out: &Path) -> Self {
        SuiteOptions {
            quick: false,
            epochs: None,
            layers: None,
            eval_every: None,
            eval_batches: None,
            seed: 0,
            jobs: 1,
            out: out.to_path_buf(),
            verbose: false,
        }
    }

    pub fn is_paper_scale(&self) -> bool {
        !self.quick && self.epochs.is_none() && self.layers.is_none()
    }

    fn manifest(&self, id: &str, arch: Arch, attention: AttnKind, tasks: TaskSet) -> Result<ExperimentManifest> {
        let mut m = ExperimentManifest::paper(id, arch, attention, tasks, &self.out.join(id))?;
        if self.quick {
            m.apply_quick();
        }
        if let Some(l) = self.layers {
            m.model.layers = l;
        }
        if let Some(e) = self.epochs {
            m.train.epochs = e;
        }
        if let Some(e) = self.eval_every {
            m.train.eval_every = e;
        }
        if let Some(b) = self.eval_batches {
            m.train.eval_batches = b;
        }
        m.train.seed = self.seed;
        m.init_seed = self.seed;
        m.validate()?;
        Ok(m)
    }
}

/// Runs every manifest on up to `jobs` threads; results keep input order.
pub fn run_all(manifests: &[ExperimentManifest], jobs: usize, verbose: bool) -> Result<Vec<TrainReport>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainReport>>>> = Mutex::new((0..manifests.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(m) = manifests.get(i) else { break };
        let r = manifest::run(m, |p| {
            if verbose {
                eprintln!("[{}] epoch {} loss {:.4} acc {:.4}", m.id, p.epoch, p.loss, p.accuracy);
            }
        });
        results.lock().expect("result slot lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, manifests.len().max(1)) {
            s.spawn(worker);
        }
    });
    results
        .into_inner()
        .expect("result slot lock")
        .into_iter()
        .map(|r| r.expect("every manifest ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1 {
    /// Final accuracies, rows DPA then EA, columns IARC, IAR, IA, IR.
    pub measured: [[f64; 4]; 2],
    pub paper_scale: bool,
}

impl Table1 {
    pub fn delta(&self, row: usize, col: usize) -> f64 {
        self.measured[row][col] - PAPER_TABLE1[row][col]
    }

    pub fn max_abs_delta(&self) -> f64 {
        (0..2)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| self.delta(r, c).abs())
            .fold(0.0, f64::max)
    }

    /// EA minus DPA per task subset.
    pub fn gaps(&self) -> [f64; 4] {
        std::array::from_fn(|c| self.measured[1][c] - self.measured[0][c])
    }

    pub fn render(&self) -> String {
        let subsets = ablation_subsets();
        let mut s = String::new();
        if !self.paper_scale {
            let _ = writeln!(s, "*** {WATERMARK} ***");
        }
        s.push_str("standard transformer, accuracy (published, delta)\n");
        let _ = write!(s, "{:<6}", "");
        for t in &subsets {
            let _ = write!(s, "{:<24}", t.to_string());
        }
        s.push('\n');
        for (r, kind) in TABLE1_ATTENTION.iter().enumerate() {
            let _ = write!(s, "{:<6}", kind.to_string().to_uppercase());
            for c in 0..4 {
                let cell = format!("{:.3} ({:.2}, {:+.3})", self.measured[r][c], PAPER_TABLE1[r][c], self.delta(r, c));
                let _ = write!(s, "{cell:<24}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<6}", "EA-DPA");
        for g in self.gaps() {
            let _ = write!(s, "{:<24}", format!("{g:+.3}"));
        }
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if !self.paper_scale {
            let _ = writeln!(s, "# {WATERMARK}");
        }
        s.push_str("attention,tasks,accuracy,paper,delta\n");
        for (r, kind) in TABLE1_ATTENTION.iter().enumerate() {
            for (c, t) in ablation_subsets().iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{kind},{t},{:.6},{:.2},{:+.6}",
                    self.measured[r][c],
                    PAPER_TABLE1[r][c],
                    self.delta(r, c)
                );
            }
        }
        s
    }
}

/// Trains the eight transformer runs and writes `table1.csv` and `table1.txt`.
pub fn table1(opts: &SuiteOptions) -> Result<Table1> {
    let mut manifests = Vec::new();
    for kind in TABLE1_ATTENTION {
        for tasks in ablation_subsets() {
            let id = format!("table1_{kind}_{tasks}");
            manifests.push(opts.manifest(&id, Arch::Transformer, kind, tasks)?);
        }
    }
    let reports = run_all(&manifests, opts.jobs, opts.verbose)?;
    let mut measured = [[0.0; 4]; 2];
    for (i, r) in reports.iter().enumerate() {
        measured[i / 4][i % 4] = r.final_accuracy();
    }
    let table = Table1 {
        measured,
        paper_scale: opts.is_paper_scale(),
    };
    write_atomic(&opts.out.join("table1.csv"), table.to_csv().as_bytes())?;
    write_atomic(&opts.out.join("table1.txt"), table.render().as_bytes())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig1 {
    /// IARC evaluation curves in [`FIG1_MODELS`] order.
    pub curves: Vec<(String, Vec<EvalPoint>)>,
    /// Final accuracies per model over IARC, IAR, IA, IR; empty when the
    /// ablation panel was skipped.
    pub ablation: Vec<(String, [f64; 4])>,
    pub paper_scale: bool,
}

impl Fig1 {
    pub fn final_accuracy(&self, name: &str) -> Option<f64> {
        self.curves
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, c)| c.last())
            .map(|p| p.accuracy)
    }

    /// Whether cisformer+EA ends at or above every other model on IARC.
    pub fn ordering_holds(&self) -> bool {
        let Some(ea) = self.final_accuracy("cis_ea") else {
            return false;
        };
        self.curves
            .iter()
            .filter(|(n, _)| n != "cis_ea")
            .all(|(n, _)| self.final_accuracy(n).is_some_and(|a| a <= ea))
    }

    pub fn left_csv(&self) -> String {
        let mut s = String::new();
        if !self.paper_scale {
            let _ = writeln!(s, "# {WATERMARK}");
        }
        s.push_str("epoch");
        for (n, _) in &self.curves {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        let rows = self.curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
        for i in 0..rows {
            let epoch = self.curves.iter().find_map(|(_, c)| c.get(i)).map(|p| p.epoch).unwrap_or(0);
            let _ = write!(s, "{epoch}");
            for (_, c) in &self.curves {
                match c.get(i) {
                    Some(p) => {
                        let _ = write!(s, ",{:.6}", p.accuracy);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn right_csv(&self) -> String {
        let mut s = String::new();
        if !self.paper_scale {
            let _ = writeln!(s, "# {WATERMARK}");
        }
        s.push_str("tasks");
        for (n, _) in &self.ablation {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (c, t) in ablation_subsets().iter().enumerate() {
            let _ = write!(s, "{t}");
            for (_, acc) in &self.ablation {
                let _ = write!(s, ",{:.6}", acc[c]);
            }
            s.push('\n');
        }
        s
    }

    pub fn left_svg(&self) -> String {
        let series: Vec<(&str, Vec<(f64, f64)>)> = self
            .curves
            .iter()
            .map(|(n, c)| (n.as_str(), c.iter().map(|p| (p.epoch as f64, p.accuracy)).collect()))
            .collect();
        let title = if self.paper_scale {
            "IARC accuracy".to_string()
        } else {
            "IARC accuracy (non-paper-scale)".to_string()
        };
        plot::line_chart(&title, "epoch", "accuracy", &series)
    }

    pub fn right_svg(&self) -> String {
        let groups: Vec<String> = ablation_subsets().iter().map(|t| t.to_string()).collect();
        let series: Vec<(&str, Vec<f64>)> = self.ablation.iter().map(|(n, a)| (n.as_str(), a.to_vec())).collect();
        let title = if self.paper_scale {
            "final accuracy by task subset"
        } else {
            "final accuracy by task subset (non-paper-scale)"
        };
        plot::bar_chart(title, &groups, &series)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        if !self.paper_scale {
            let _ = writeln!(s, "*** {WATERMARK} ***");
        }
        for (n, _) in &self.curves {
            let _ = writeln!(s, "{n:<8} final IARC accuracy {:.4}", self.final_accuracy(n).unwrap_or(f64::NAN));
        }
        if self.ordering_holds() {
            s.push_str("ordering: cis_ea >= all other models\n");
        } else {
            s.push_str("WARNING: ordering violated, cis_ea is not the best model on IARC\n");
        }
        s
    }
}

/// Trains the four comparison models on IARC and, with `ablation`, on the
/// other three subsets. Writes `fig1_left.{csv,svg}` and, with the ablation,
/// `fig1_right.{csv,svg}`.
pub fn fig1(opts: &SuiteOptions, ablation: bool) -> Result<Fig1> {
    let subsets: Vec<TaskSet> = if ablation {
        ablation_subsets()
    } else {
        vec![TaskSet::iarc()]
    };
    let mut manifests = Vec::new();
    for (name, arch, kind) in FIG1_MODELS {
        for tasks in &subsets {
            manifests.push(opts.manifest(&format!("fig1_{name}_{tasks}"), arch, kind, tasks.clone())?);
        }
    }
    let reports = run_all(&manifests, opts.jobs, opts.verbose)?;
    let per = subsets.len();
    let mut fig = Fig1 {
        curves: Vec::new(),
        ablation: Vec::new(),
        paper_scale: opts.is_paper_scale(),
    };
    for (m, (name, _, _)) in FIG1_MODELS.iter().enumerate() {
        let runs = &reports[m * per..(m + 1) * per];
        fig.curves.push((name.to_string(), runs[0].curve.clone()));
        if ablation {
            let acc: [f64; 4] = std::array::from_fn(|c| runs[c].final_accuracy());
            fig.ablation.push((name.to_string(), acc));
        }
    }
    if fig.curves.iter().any(|(_, c)| c.is_empty()) {
        return Err(CliError::Usage("a run produced no evaluation points".into()));
    }
    write_atomic(&opts.out.join("fig1_left.csv"), fig.left_csv().as_bytes())?;
    write_atomic(&opts.out.join("fig1_left.svg"), fig.left_svg().as_bytes())?;
    if ablation {
        write_atomic(&opts.out.join("fig1_right.csv"), fig.right_csv().as_bytes())?;
        write_atomic(&opts.out.join("fig1_right.svg"), fig.right_svg().as_bytes())?;
    }
    Ok(fig)
}
