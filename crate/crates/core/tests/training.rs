use iarc::train::{ablation_subsets, evaluate, train, train_with, Predictor};
use iarc::{Arch, AttnKind, EncodedBatch, Error, Model, ModelSpec, Result, SgdMomentum, TaskConfig, TaskSet, Tensor, TrainConfig};

#[test]
fn momentum_quadratic_converges() {
    // f(x) = (x - 3)² / 2
    let mut p = vec![Tensor::scalar(-4.0)];
    let mut opt = SgdMomentum::new(0.1, 0.8, &p);
    let mut steps = 0;
    while (p[0].item() - 3.0).abs() > 1e-6 {
        let g = Tensor::scalar(p[0].item() - 3.0);
        opt.step(&mut p, &[g]).unwrap();
        steps += 1;
        assert!(steps <= 500, "no convergence: x = {}", p[0].item());
    }
}

#[test]
fn zero_momentum_is_plain_descent() {
    let mut a = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
    let mut b = a.clone();
    let mut opt = SgdMomentum::new(0.03, 0.0, &a);
    for k in 0..50 {
        let g = a[0].map(|x| x.sin() + k as f64 * 0.01);
        opt.step(&mut a, &[g]).unwrap();
        let g = b[0].map(|x| x.sin() + k as f64 * 0.01);
        for (p, gi) in b[0].data_mut().iter_mut().zip(g.data()) {
            *p -= 0.03 * gi;
        }
        assert_eq!(a, b);
    }
}

struct FromTargets;

impl Predictor for FromTargets {
    fn predict(&self, batch: &EncodedBatch) -> Result<Tensor> {
        let n = batch.n_symbols;
        let mut out = Tensor::zeros(&[batch.targets.len(), n]);
        for (row, &t) in out.data_mut().chunks_mut(n).zip(&batch.targets) {
            row[t as usize] = 10.0;
        }
        Ok(out)
    }
}

struct Constant(usize);

impl Predictor for Constant {
    fn predict(&self, batch: &EncodedBatch) -> Result<Tensor> {
        let n = batch.n_symbols;
        let mut out = Tensor::zeros(&[batch.targets.len(), n]);
        for row in out.data_mut().chunks_mut(n) {
            row[self.0] = 1.0;
        }
        Ok(out)
    }
}

fn iarc16() -> TaskConfig {
    TaskConfig::new(TaskSet::iarc(), 16, 0).unwrap()
}

#[test]
fn evaluate_reference_predictors() {
    let task = iarc16();
    let perfect = evaluate(&FromTargets, &task, 24, 50, 4, 1).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    assert_eq!(perfect.predictions, 4 * 50 * 24);
    let c = evaluate(&Constant(5), &task, 24, 200, 10, 1).unwrap();
    assert!((c.accuracy - 0.0625).abs() < 0.02, "{}", c.accuracy);
    let e = || evaluate(&Constant(5), &task, 24, 20, 3, 9).unwrap();
    assert_eq!(e(), e());
}

fn small_spec(arch: Arch, task: &TaskConfig) -> ModelSpec {
    ModelSpec::new(arch, AttnKind::Ea, 2, task.embed_dim(), 8, task.n_symbols).with_hidden(16)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 16,
        n_con: 8,
        eval_every: 3,
        eval_batches: 2,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let task = iarc16();
    for arch in [Arch::Transformer, Arch::Cisformer, Arch::Mlp, Arch::Lstm] {
        let mut m = Model::init(small_spec(arch, &task), 3).unwrap();
        let before = m.params().to_vec();
        let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
        train(&mut m, &task, &cfg).unwrap();
        assert_eq!(m.params(), &before[..], "{arch}");
    }
}

#[test]
fn training_is_deterministic() {
    let task = iarc16();
    let run = || {
        let mut m = Model::init(small_spec(Arch::Cisformer, &task), 3).unwrap();
        let r = train(&mut m, &task, &small_cfg()).unwrap();
        (m.params().to_vec(), r.curve, r.train_loss)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let mut m = Model::init(small_spec(Arch::Cisformer, &task), 3).unwrap();
    let other = train(&mut m, &task, &TrainConfig { seed: 5, ..small_cfg() }).unwrap();
    assert_ne!(other.train_loss, a.2);
}

#[test]
fn training_changes_parameters_and_reports_curve() {
    let task = iarc16();
    let mut m = Model::init(small_spec(Arch::Transformer, &task), 3).unwrap();
    let before = m.params().to_vec();
    let mut seen = Vec::new();
    let r = train_with(&mut m, &task, &small_cfg(), |p, _| {
        seen.push(p.epoch);
        Ok(())
    })
    .unwrap();
    assert_ne!(m.params(), &before[..]);
    assert_eq!(seen, vec![0, 3, 6]);
    assert_eq!(r.curve.len(), 3);
    assert_eq!(r.train_loss.len(), 6);
    let csv = r.to_csv();
    assert!(csv.lines().nth(1) == Some("epoch,loss,accuracy"));
    assert!(csv.lines().nth(2).unwrap().starts_with("0,"));
}

#[test]
fn init_loss_is_ln_n() {
    let task = iarc16();
    for arch in [Arch::Transformer, Arch::Cisformer, Arch::Mlp, Arch::Lstm] {
        let m = Model::init(small_spec(arch, &task), 0).unwrap();
        let r = evaluate(&m, &task, 8, 50, 2, 0).unwrap();
        assert!((r.loss - 16f64.ln()).abs() < 1e-12, "{arch}: {}", r.loss);
    }
}

#[test]
fn callback_error_stops_training() {
    let task = iarc16();
    let mut m = Model::init(small_spec(Arch::Mlp, &task), 0).unwrap();
    let r = train_with(&mut m, &task, &small_cfg(), |p, _| {
        if p.epoch > 0 {
            Err(Error::InvalidConfig("stop".into()))
        } else {
            Ok(())
        }
    });
    assert!(r.is_err());
}

#[test]
fn invalid_configs_rejected() {
    let task = iarc16();
    let mut m = Model::init(small_spec(Arch::Mlp, &task), 0).unwrap();
    for cfg in [
        TrainConfig { lr: f64::NAN, ..small_cfg() },
        TrainConfig { batch_size: 0, ..small_cfg() },
        TrainConfig { eval_every: 0, ..small_cfg() },
        TrainConfig { momentum: -0.1, ..small_cfg() },
    ] {
        assert!(matches!(train(&mut m, &task, &cfg), Err(Error::InvalidConfig(_))));
    }
}

#[test]
fn ablation_subsets_in_table_order() {
    let names: Vec<String> = ablation_subsets().iter().map(|t| t.to_string()).collect();
    assert_eq!(names, ["IARC", "IAR", "IA", "IR"]);
    for t in ablation_subsets() {
        let cfg = TaskConfig::with_embed_dim(t.clone(), 20, 0).unwrap();
        assert_eq!(cfg.n_symbols + t.len(), 20);
    }
}
