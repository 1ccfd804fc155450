use iarc::attention::{apply, dpa, ea, ea_weight, ScoreMatrix};
use iarc::models::block_index;
use iarc::stream::sample_batch;
use iarc::{Arch, AttnKind, EncodedBatch, Model, ModelSpec, TaskConfig, TaskSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_scores(rng: &mut ChaCha8Rng) -> ScoreMatrix {
    let heads = rng.gen_range(1..5);
    let t = rng.gen_range(1..30);
    let scale = [0.01, 1.0, 10.0, 300.0][rng.gen_range(0..4)];
    let z = (0..heads * t * t).map(|_| rng.gen_range(-scale..scale)).collect();
    ScoreMatrix::from_raw(heads, t, z).unwrap()
}

#[test]
fn attention_rows_over_random_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let z = random_scores(&mut rng);
        let t = z.n_con;
        for kind in [AttnKind::Dpa, AttnKind::Ea] {
            let a = apply(kind, &z);
            for h in 0..z.heads {
                for i in 0..t {
                    let row = a.row(h, i);
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "{kind} row sum {s}");
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!(row[i + 1..].iter().all(|&v| v == 0.0), "{kind}: causal zeros");
                }
            }
        }
        assert_eq!(ea(&z), ea(&z.negated()), "EA evenness");
        let mut shifted = z.clone();
        for h in 0..z.heads {
            for i in 0..t {
                shifted.shift_row(h, i, rng.gen_range(-50.0..50.0));
            }
        }
        let (a, b) = (dpa(&z), dpa(&shifted));
        for (x, y) in a.a.iter().zip(&b.a) {
            assert!((x - y).abs() < 1e-12, "DPA shift invariance {x} vs {y}");
        }
    }
}

#[test]
fn softmax_rows_sum_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let z = random_scores(&mut rng);
        let a = dpa(&z);
        for h in 0..z.heads {
            for i in 0..z.n_con {
                let s: f64 = a.row(h, i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ea_hand_values() {
    // z = [0, 1, 2] on the last row: weights 0, 1/2, 4/5
    let z = ScoreMatrix::from_raw(1, 3, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0]).unwrap();
    let a = ea(&z);
    let s = 0.5 + 0.8;
    assert_eq!(a.row(0, 2), &[0.0, 0.5 / s, 0.8 / s]);
    // all-zero rows fall back to uniform over the causal prefix
    assert_eq!(a.row(0, 1), &[0.5, 0.5, 0.0]);
    assert_eq!(ea_weight(-3.0), 0.9);
}

fn layer_formula(d: usize) -> usize {
    11 * d * d + 4 * d
}

fn core_count(spec: &ModelSpec) -> usize {
    let shapes = spec.param_shapes();
    shapes[..shapes.len() - 1]
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum()
}

#[test]
fn attention_param_counts_over_sweep() {
    for d in [8, 20, 40] {
        for layers in [1, 12, 60] {
            for n_con in [6, 24] {
                let t = ModelSpec::new(Arch::Transformer, AttnKind::Ea, layers, d, n_con, d - 4);
                let c = ModelSpec::new(Arch::Cisformer, AttnKind::Dpa, layers, d, n_con, d - 4);
                assert_eq!(core_count(&t), layers * layer_formula(d));
                assert_eq!(core_count(&c), layers * n_con * layer_formula(d));
                assert_eq!(t.attention_layer_params(), Some(layer_formula(d)));
                assert_eq!(c.attention_layer_params(), Some(n_con * layer_formula(d)));
                assert_eq!(t.param_count(), core_count(&t) + d * (d - 4));
                assert_eq!(c.param_count(), core_count(&c) + n_con * d * (d - 4));
            }
        }
    }
}

#[test]
fn full_size_counts() {
    let t = ModelSpec::paper_transformer(AttnKind::Dpa, 16);
    assert_eq!(core_count(&t), 268_800);
    let c = ModelSpec::paper_cisformer(AttnKind::Ea, 16);
    assert_eq!(c.param_count(), 1_297_920);
    let m = ModelSpec::paper_mlp(16);
    assert_eq!(m.param_count(), 1_927_680);
    let l = ModelSpec::paper_lstm(16);
    assert_eq!(l.param_count(), 3_687_200);
    for spec in [t, c, m, l] {
        let stored: usize = Model::init(spec.clone(), 0).unwrap().params().iter().map(Tensor::len).sum();
        assert_eq!(stored, spec.param_count(), "{spec}");
    }
}

#[test]
fn mlp_blocks_are_lower_triangular() {
    let spec = ModelSpec::new(Arch::Mlp, AttnKind::Dpa, 3, 5, 7, 2);
    let shapes = spec.param_shapes();
    assert_eq!(shapes[0], vec![28, 5, 5]);
    let mut seen = [false; 28];
    for t in 0..7 {
        for tp in 0..=t {
            assert!(!seen[block_index(t, tp)]);
            seen[block_index(t, tp)] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));
}

fn iarc_batch(n_con: usize, count: usize, seed: u64) -> (TaskConfig, EncodedBatch) {
    let task = TaskConfig::with_embed_dim(TaskSet::iarc(), 20, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_batch(&task, n_con, count, &mut rng).unwrap();
    (task, batch)
}

fn randomized(spec: ModelSpec, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .param_shapes()
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.gen_range(-0.4..0.4)))
        .collect();
    Model::from_params(spec, params).unwrap()
}

fn arch_specs(n_con: usize) -> Vec<ModelSpec> {
    vec![
        ModelSpec::new(Arch::Transformer, AttnKind::Dpa, 2, 20, n_con, 16),
        ModelSpec::new(Arch::Transformer, AttnKind::Ea, 2, 20, n_con, 16),
        ModelSpec::new(Arch::Cisformer, AttnKind::Dpa, 2, 20, n_con, 16),
        ModelSpec::new(Arch::Cisformer, AttnKind::Ea, 2, 20, n_con, 16),
        ModelSpec::new(Arch::Mlp, AttnKind::Dpa, 3, 20, n_con, 16),
        ModelSpec::new(Arch::Lstm, AttnKind::Dpa, 2, 20, n_con, 16).with_hidden(12),
    ]
}

#[test]
fn causality_perturbation() {
    let n_con = 12;
    let (_, batch) = iarc_batch(n_con, 4, 3);
    let d = 20;
    for spec in arch_specs(n_con) {
        let model = randomized(spec.clone(), 7);
        let base = model.logits(&batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in 0..n_con - 1 {
            let mut pert = batch.clone();
            for b in 0..4 {
                for tt in t + 1..n_con {
                    for v in &mut pert.inputs[(b * n_con + tt) * d..(b * n_con + tt + 1) * d] {
                        *v = rng.gen_range(-2.0..2.0);
                    }
                }
            }
            let out = model.logits(&pert).unwrap();
            for b in 0..4 {
                let rows = (b * n_con) * 16..(b * n_con + t + 1) * 16;
                assert_eq!(&base.data()[rows.clone()], &out.data()[rows], "{spec} leaks into position {t}");
                let later = (b * n_con + t + 1) * 16..(b * n_con + n_con) * 16;
                assert_ne!(&base.data()[later.clone()], &out.data()[later], "{spec} ignores its inputs");
            }
        }
    }
}

#[test]
fn tied_cisformer_equals_transformer() {
    let n_con = 8;
    let (_, batch) = iarc_batch(n_con, 3, 5);
    for kind in [AttnKind::Dpa, AttnKind::Ea] {
        let tspec = ModelSpec::new(Arch::Transformer, kind, 2, 20, n_con, 16);
        let trans = randomized(tspec, 2);
        let cspec = ModelSpec::new(Arch::Cisformer, kind, 2, 20, n_con, 16);
        let tied: Vec<Tensor> = trans
            .params()
            .iter()
            .map(|p| {
                let mut shape = vec![n_con];
                shape.extend_from_slice(p.shape());
                Tensor::new(shape, p.data().repeat(n_con)).unwrap()
            })
            .collect();
        let cis = Model::from_params(cspec, tied).unwrap();
        assert_eq!(trans.logits(&batch).unwrap(), cis.logits(&batch).unwrap(), "{kind}");
    }
}

#[test]
fn zero_readouts_give_zero_logits() {
    let (_, batch) = iarc_batch(24, 2, 0);
    for spec in arch_specs(24) {
        let m = Model::init(spec.clone(), 4).unwrap();
        assert!(m.logits(&batch).unwrap().data().iter().all(|&v| v == 0.0), "{spec}");
    }
    let spec = ModelSpec::new(Arch::Lstm, AttnKind::Dpa, 2, 20, 24, 16).with_hidden(10);
    let zeros = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
    let m = Model::from_params(spec, zeros).unwrap();
    assert!(m.logits(&batch).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn init_is_seeded() {
    for spec in arch_specs(6) {
        let a = Model::init(spec.clone(), 1).unwrap();
        let b = Model::init(spec.clone(), 1).unwrap();
        let c = Model::init(spec.clone(), 2).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params(), "{spec}");
    }
}

#[test]
fn wrong_param_shapes_rejected() {
    let spec = ModelSpec::new(Arch::Transformer, AttnKind::Ea, 1, 8, 4, 4);
    let mut ps: Vec<Tensor> = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
    assert!(Model::from_params(spec.clone(), ps[1..].to_vec()).is_err());
    ps[0] = Tensor::zeros(&[8, 9]);
    assert!(Model::from_params(spec, ps).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let spec = ModelSpec::new(Arch::Cisformer, AttnKind::Ea, 2, 8, 5, 4);
    let m = randomized(spec.clone(), 3);
    m.save(&path).unwrap();
    let back = Model::load(spec.clone(), &path).unwrap();
    assert_eq!(back.params(), m.params());
    let other = ModelSpec::new(Arch::Transformer, AttnKind::Ea, 2, 8, 5, 4);
    assert!(Model::load(other, &path).is_err());
}

#[test]
fn spec_config_round_trip() {
    for spec in arch_specs(24) {
        let s = spec.to_config_string();
        assert_eq!(ModelSpec::from_config_str(&s).unwrap(), spec);
    }
    assert!(ModelSpec::from_config_str("arch=rnn").is_err());
    assert!(ModelSpec::from_config_str("layers=two").is_err());
    assert!(ModelSpec::from_config_str("heads=3\nd=20").is_err());
}
