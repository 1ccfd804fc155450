use iarc::stream::{
    generate_stream, oracle_next, sample_batch, slice_windows, validate_stream, Control, OracleState, TokenStream,
};
use iarc::{Error, TaskConfig, TaskSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use Control::{A, C, I, R};

fn tape_of(len: usize, marks: &[(usize, Control)]) -> Vec<Option<Control>> {
    let mut tape = vec![None; len];
    for &(i, c) in marks {
        tape[i] = Some(c);
    }
    tape
}

fn ten(tasks: &str) -> TaskConfig {
    TaskConfig::new(tasks.parse().unwrap(), 10, 0).unwrap()
}

// Hand transcriptions: a superscript token over a symbol means the token is
// taped on the symbol before it.

fn display_addition_increment() -> TokenStream {
    let symbols = vec![2, 3, 4, 7, 1, 8, 9, 7, 8, 9, 0, 1];
    TokenStream::new(symbols, tape_of(12, &[(2, A), (7, I)])).unwrap()
}

fn display_reverse() -> TokenStream {
    let symbols = vec![2, 3, 4, 7, 1, 8, 8, 1, 7, 4, 3, 3, 4, 7];
    TokenStream::new(symbols, tape_of(14, &[(2, A), (5, R), (10, R)])).unwrap()
}

fn display_context() -> TokenStream {
    let symbols = vec![1, 2, 3, 4, 6, 8, 0, 2, 4, 7, 0, 3];
    TokenStream::new(symbols, tape_of(12, &[(0, I), (3, C), (8, C)])).unwrap()
}

#[test]
fn displays_validate() {
    assert!(validate_stream(&display_addition_increment(), &ten("IA")));
    assert!(validate_stream(&display_reverse(), &ten("AR")));
    assert!(validate_stream(&display_context(), &ten("IC")));
    assert!(validate_stream(&display_context(), &ten("IARC")));
}

#[test]
fn displays_reject_single_flips() {
    for s in [display_addition_increment(), display_reverse(), display_context()] {
        let cfg = ten("IARC");
        let first = s.control_positions().next().unwrap();
        for i in first + 1..s.len() {
            let mut bad = s.clone();
            bad.symbols[i] = (bad.symbols[i] + 1) % 10;
            assert!(!validate_stream(&bad, &cfg), "flip at {i} accepted");
        }
    }
}

#[test]
fn display_tokens_outside_subset_rejected() {
    assert!(!validate_stream(&display_reverse(), &ten("IA")));
}

#[test]
fn tape_window_has_two_ones_on_control_positions() {
    let cfg = ten("IARC");
    let s = display_context();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = slice_windows(&s, &cfg, 11, 1, &mut rng).unwrap();
    let d = cfg.embed_dim();
    let x0 = batch.input(0, 0);
    let ones: Vec<usize> = (0..d).filter(|&i| x0[i] != 0.0).collect();
    assert_eq!(ones, vec![1, 10]);
    assert!(batch.input(0, 1).iter().filter(|&&v| v != 0.0).count() == 1);
    let x3 = batch.input(0, 3);
    assert_eq!(x3[4], 1.0);
    assert_eq!(x3[10 + 3], 1.0);
    assert_eq!(batch.targets, vec![2, 3, 4, 6, 8, 0, 2, 4, 7, 0, 3]);
}

#[test]
fn context_first_is_an_error() {
    let r = oracle_next(OracleState::default(), &[5], 0, Some(C), 10);
    assert!(matches!(r, Err(Error::ContextWithoutTask(0))));
    let r = oracle_next(OracleState::default(), &[5], 0, None, 10);
    assert!(matches!(r, Err(Error::NoActiveTask(0))));
}

#[test]
fn increment_wraps() {
    let s = OracleState::default().apply(I, 0).unwrap();
    assert_eq!(oracle_next(s, &[9], 0, None, 10).unwrap().0, 0);
}

#[test]
fn fresh_increment_resets_counter() {
    let s = OracleState::default().apply(I, 0).unwrap().apply(C, 3).unwrap().apply(C, 6).unwrap();
    assert_eq!(s.increment, 3);
    assert_eq!(s.apply(I, 9).unwrap().increment, 1);
}

#[test]
fn single_increment_task_steps_by_one() {
    let cfg = TaskConfig::new("I".parse().unwrap(), 7, 3).unwrap();
    let s = generate_stream(&cfg, 500).unwrap();
    for w in s.symbols.windows(2) {
        assert_eq!((w[1] + 7 - w[0]) % 7, 1);
    }
}

#[test]
fn opener_never_context() {
    for seed in 0..200 {
        let s = generate_stream(&TaskConfig::new(TaskSet::iarc(), 16, seed).unwrap(), 10).unwrap();
        assert!(matches!(s.tape[0], Some(I) | Some(A) | Some(R)));
    }
}

/// Checks the increment, Fibonacci and mirror laws segment by segment. The
/// active task and counter come from the tape alone.
fn check_laws(s: &TokenStream, n: u32) {
    let pos: Vec<usize> = s.control_positions().collect();
    let (mut task, mut k, mut anchor) = (None, 0u32, 0usize);
    for (i, &p) in pos.iter().enumerate() {
        match s.tape[p].unwrap() {
            I => (task, k) = (Some(I), 1),
            A => task = Some(A),
            R => (task, anchor) = (Some(R), p),
            C => match task {
                Some(I) => k += 1,
                Some(R) => anchor = p,
                _ => {}
            },
        }
        let end = pos.get(i + 1).copied().unwrap_or(s.len() - 1);
        let x = &s.symbols;
        for t in p..end {
            match task.unwrap() {
                I => assert_eq!((x[t + 1] + n - x[t]) % n, k % n, "increment law at {t}"),
                A => {
                    let prev = if t == 0 { 0 } else { x[t - 1] };
                    assert_eq!(x[t + 1], (x[t] + prev) % n, "fibonacci law at {t}");
                }
                R => {
                    let j = t + 1 - anchor;
                    assert_eq!(x[anchor + j], x[(anchor + 1).saturating_sub(j)], "mirror law at {t}");
                }
                C => unreachable!(),
            }
        }
    }
}

#[test]
fn fuzz_hundred_seeds() {
    for seed in 0..100 {
        let cfg = TaskConfig::new(TaskSet::iarc(), 16, seed).unwrap();
        let s = generate_stream(&cfg, 10_000).unwrap();
        assert!(validate_stream(&s, &cfg), "seed {seed}");
        assert!(s.symbols.iter().all(|&x| x < 16));
        check_laws(&s, 16);
        let pos: Vec<usize> = s.control_positions().collect();
        assert_eq!(pos[0], 0);
        assert!(pos.windows(2).all(|w| (3..=9).contains(&(w[1] - w[0]))));
        let frac = pos.len() as f64 / s.len() as f64;
        assert!((1.0 / 9.0..=1.0 / 3.0).contains(&frac), "sparsity {frac}");
    }
}

fn chi_square(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn control_token_and_gap_distributions() {
    for seed in 0..5 {
        let cfg = TaskConfig::new(TaskSet::iarc(), 16, seed).unwrap();
        let s = generate_stream(&cfg, 10_000).unwrap();
        let pos: Vec<usize> = s.control_positions().collect();
        let mut tokens = [0usize; 4];
        for &p in &pos[1..] {
            tokens[cfg.tasks.slot(s.tape[p].unwrap()).unwrap()] += 1;
        }
        let total: usize = tokens.iter().sum();
        for c in tokens {
            let f = c as f64 / total as f64;
            assert!((f - 0.25).abs() <= 0.03, "seed {seed}: token frequency {f}");
        }
        // 0.1% critical values: 16.27 (3 dof), 22.46 (6 dof)
        assert!(chi_square(&tokens) < 16.27, "seed {seed}: tokens {tokens:?}");
        let mut gaps = [0usize; 7];
        for w in pos.windows(2) {
            gaps[w[1] - w[0] - 3] += 1;
        }
        assert!(chi_square(&gaps) < 22.46, "seed {seed}: gaps {gaps:?}");
    }
}

#[test]
fn windows_decode_to_stream_slices() {
    let cfg = TaskConfig::new(TaskSet::iarc(), 16, 9).unwrap();
    let s = generate_stream(&cfg, 2000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n_con = 24;
    let batch = slice_windows(&s, &cfg, n_con, 1000, &mut rng).unwrap();
    for b in 0..1000 {
        let (sym, tape) = batch.decode_window(b);
        let start = (0..s.len() - n_con)
            .find(|&st| s.symbols[st..st + n_con] == sym[..] && s.tape[st..st + n_con] == tape[..])
            .expect("window not found in stream");
        for t in 0..n_con {
            assert_eq!(batch.target(b, t), s.symbols[start + t + 1]);
            let x = batch.input(b, t);
            let nz = x.iter().filter(|&&v| v != 0.0).count();
            assert_eq!(nz, 1 + tape[t].is_some() as usize);
            assert!(x[16..].iter().all(|&v| v == 0.0) || tape[t].is_some());
        }
    }
}

#[test]
fn short_stream_rejected() {
    let cfg = ten("IA");
    let s = generate_stream(&cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        slice_windows(&s, &cfg, 10, 1, &mut rng),
        Err(Error::StreamTooShort { len: 10, n_con: 10 })
    ));
}

#[test]
fn dump_round_trip() {
    let s = generate_stream(&TaskConfig::new(TaskSet::iarc(), 16, 4).unwrap(), 300).unwrap();
    let mut buf = Vec::new();
    s.write_dump(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("0\t"));
    assert_eq!(TokenStream::read_dump(&buf[..]).unwrap(), s);
    assert!(TokenStream::read_dump(&b"0\t3\tX\n"[..]).is_err());
    assert!(TokenStream::read_dump(&b"1\t3\t-\n"[..]).is_err());
}

#[test]
fn binary_export_layout() {
    let cfg = TaskConfig::new(TaskSet::iarc(), 16, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = sample_batch(&cfg, 24, 3, &mut rng).unwrap();
    let mut buf = Vec::new();
    batch.write_binary(&mut buf).unwrap();
    let word = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().unwrap());
    assert_eq!((word(0), word(1), word(2)), (3, 24, 20));
    assert_eq!(buf.len(), 12 + 4 * 3 * 24 * 20);
    for (i, &v) in batch.inputs.iter().enumerate() {
        let f = f32::from_le_bytes(buf[12 + 4 * i..16 + 4 * i].try_into().unwrap());
        assert_eq!(f as f64, v);
    }
}

fn subset() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["I", "A", "R", "IA", "IR", "AR", "IAR", "IARC", "IC", "RC", "IAC"])
        .prop_map(String::from)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), tasks in subset(), n in 2usize..40, len in 1usize..400) {
        let cfg = TaskConfig::new(tasks.parse().unwrap(), n, seed).unwrap();
        prop_assert_eq!(generate_stream(&cfg, len).unwrap(), generate_stream(&cfg, len).unwrap());
    }

    #[test]
    fn generated_streams_obey_laws(seed in any::<u64>(), tasks in subset(), n in 2u32..40, len in 2usize..600) {
        let cfg = TaskConfig::new(tasks.parse().unwrap(), n as usize, seed).unwrap();
        let s = generate_stream(&cfg, len).unwrap();
        prop_assert!(validate_stream(&s, &cfg));
        check_laws(&s, n);
        prop_assert!(s.tape.iter().flatten().all(|c| cfg.tasks.contains(*c)));
    }

    #[test]
    fn flipped_symbol_detected(seed in any::<u64>(), tasks in subset(), len in 2usize..300, at in any::<prop::sample::Index>()) {
        let cfg = TaskConfig::new(tasks.parse().unwrap(), 12, seed).unwrap();
        let mut s = generate_stream(&cfg, len).unwrap();
        let i = 1 + at.index(len - 1);
        s.symbols[i] = (s.symbols[i] + 5) % 12;
        prop_assert!(!validate_stream(&s, &cfg));
    }

    #[test]
    fn custom_spacing_respected(seed in any::<u64>(), lo in 1usize..6, extra in 0usize..6) {
        let cfg = TaskConfig::new(TaskSet::iarc(), 8, seed).unwrap().with_spacing(lo, lo + extra).unwrap();
        let s = generate_stream(&cfg, 400).unwrap();
        let pos: Vec<usize> = s.control_positions().collect();
        prop_assert!(pos.windows(2).all(|w| (lo..=lo + extra).contains(&(w[1] - w[0]))));
        prop_assert!(validate_stream(&s, &cfg));
    }
}
