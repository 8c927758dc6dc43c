mod common;

use std::path::Path;

use common::rng;
use moemamba::arch::{ArchKind, ModelSpec};
use moemamba::moe::MoeAux;
use moemamba::train::{
    check_finite, clip_grad_norm, decode, ema_update, encode, evaluate, model_from_checkpoint,
    read_manifest, sample_batch, sequential_windows, speedup_at, tokenize_bytes, train, AdamW,
    Checkpoint, LossCurve, RunLog, Schedule, TrainConfig, TrainOptions, Trainer, CHECKPOINT_FILE,
    CSV_HEADER, EMA_ALPHA, RUNLOG_FILE,
};
use moemamba::{DType, Element, Error, Graph, Module, Param, Tensor};
use proptest::prelude::*;

const TEXT: &str = "It was the best of times, it was the worst of times, it was the age of wisdom, \
                    it was the age of foolishness, it was the epoch of belief, it was the epoch of incredulity. ";

fn corpus() -> Vec<usize> {
    encode(TEXT.repeat(20).as_bytes())
}

fn config(kind: ArchKind, dtype: DType) -> TrainConfig {
    let mut spec = ModelSpec::new(kind, 16, 1);
    if spec.has_moe() {
        spec.n_experts = 3;
    }
    let mut c = TrainConfig::new(spec, "unused.txt");
    c.steps = 20;
    c.context_length = 16;
    c.batch_size = 4;
    c.dtype = dtype;
    c.seed = 7;
    c
}

fn run<T: Element>(c: &TrainConfig, steps: usize) -> Trainer<T> {
    let mut t = Trainer::<T>::new(c.clone(), corpus()).unwrap();
    t.record_wallclock = false;
    t.run_to(steps).unwrap();
    t
}

struct Pair {
    w: Param<f64>,
    bias: Param<f64>,
}

impl Module<f64> for Pair {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
        f(&self.w);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        f(&mut self.w);
        f(&mut self.bias);
    }
}

fn pair(w: f64, b: f64) -> Pair {
    Pair {
        w: Param::new("w", Tensor::full(vec![1], w), true),
        bias: Param::new("bias", Tensor::full(vec![1], b), false),
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn bytes_are_tokens() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        tokenize_bytes(write(dir.path(), "ab.txt", b"AB")).unwrap(),
        vec![65, 66]
    );
    assert!(matches!(
        tokenize_bytes(write(dir.path(), "e.txt", b"")),
        Err(Error::EmptyCorpus(_))
    ));
    assert!(matches!(
        tokenize_bytes(dir.path().join("missing")),
        Err(Error::Io(_))
    ));
}

#[test]
fn batches_shift_by_one_and_stay_in_bounds() {
    let toks: Vec<usize> = (0..50).collect();
    let b = sample_batch(&toks, 8, 5, &mut rng(1)).unwrap();
    assert_eq!(b.inputs.len(), 40);
    for w in 0..5 {
        for t in 0..8 {
            assert_eq!(b.targets[w * 8 + t], b.inputs[w * 8 + t] + 1);
        }
        // consecutive values, so the window is contiguous
        assert!(b.inputs[w * 8] + 8 < 50);
    }
    assert_eq!(b, sample_batch(&toks, 8, 5, &mut rng(1)).unwrap());
    assert_ne!(b, sample_batch(&toks, 8, 5, &mut rng(2)).unwrap());
}

#[test]
fn short_corpus_is_a_config_error() {
    let toks = vec![1usize; 8];
    assert!(matches!(
        sample_batch(&toks, 8, 1, &mut rng(0)),
        Err(Error::Config(_))
    ));
    assert!(sample_batch(&vec![1usize; 9], 8, 1, &mut rng(0)).is_ok());
}

#[test]
fn evaluation_windows_do_not_overlap() {
    let toks: Vec<usize> = (0..20).collect();
    let w = sequential_windows(&toks, 6);
    assert_eq!(w.len(), 3);
    assert_eq!(w[1].0, (6..12).collect::<Vec<_>>());
    assert_eq!(w[2].1, (13..19).collect::<Vec<_>>());
}

#[test]
fn schedule_landmarks() {
    let s = Schedule {
        steps: 1000,
        max_lr: 1e-3,
        warmup_fraction: 0.01,
        final_ratio: 0.1,
    };
    assert_eq!(s.warmup_steps(), 10);
    assert!((s.lr_at(1) - 1e-4).abs() < 1e-18);
    assert!((s.lr_at(10) - 1e-3).abs() < 1e-18);
    assert!((s.lr_at(1000) - 1e-4).abs() < 1e-15);
    // halfway through the decay
    assert!((s.lr_at(505) - 0.55e-3).abs() < 1e-15);
    let odd = Schedule { steps: 150, ..s };
    assert_eq!(odd.warmup_steps(), 2);
    let none = Schedule {
        warmup_fraction: 0.0,
        ..s
    };
    assert!((none.lr_at(1) - 1e-3).abs() < 1e-8);
}

#[test]
fn zero_gradients_without_decay_change_nothing() {
    let mut m = pair(0.7, -0.2);
    let mut opt = AdamW::new(&m, 0.0);
    opt.step(
        &mut m,
        &[Tensor::zeros(vec![1]), Tensor::zeros(vec![1])],
        0.1,
    )
    .unwrap();
    assert_eq!((m.w.value.item(), m.bias.value.item()), (0.7, -0.2));
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let mut m = pair(1.0, 1.0);
    let mut opt = AdamW::new(&m, 0.0);
    opt.step(
        &mut m,
        &[Tensor::full(vec![1], 1.0), Tensor::full(vec![1], -3.0)],
        0.1,
    )
    .unwrap();
    // m̂ = g and v̂ = g², so the update is lr · g / (|g| + eps)
    assert!((m.w.value.item() - 0.9).abs() < 1e-7);
    assert!((m.bias.value.item() - 1.1).abs() < 1e-7);
}

#[test]
fn weight_decay_skips_undecayed_params() {
    let mut m = pair(2.0, 2.0);
    let mut opt = AdamW::new(&m, 0.1);
    opt.step(
        &mut m,
        &[Tensor::zeros(vec![1]), Tensor::zeros(vec![1])],
        0.5,
    )
    .unwrap();
    assert!((m.w.value.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    assert_eq!(m.bias.value.item(), 2.0);
}

#[test]
fn optimizer_rejects_mismatched_gradients() {
    let mut m = pair(1.0, 1.0);
    let mut opt = AdamW::new(&m, 0.0);
    assert!(matches!(
        opt.step(&mut m, &[Tensor::zeros(vec![1])], 0.1),
        Err(Error::Usage(_))
    ));
}

#[test]
fn clipping_scales_to_the_threshold() {
    let mut g = vec![
        Tensor::from_f64(vec![1], &[3.0]).unwrap(),
        Tensor::<f64>::from_f64(vec![1], &[4.0]).unwrap(),
    ];
    assert_eq!(clip_grad_norm(&mut g, 0.5), 5.0);
    assert!((g[0].item() - 0.3).abs() < 1e-15 && (g[1].item() - 0.4).abs() < 1e-15);
    let mut small = vec![Tensor::<f64>::from_f64(vec![2], &[0.1, 0.1]).unwrap()];
    clip_grad_norm(&mut small, 0.5);
    assert_eq!(small[0].data(), &[0.1, 0.1]);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let m = pair(1.0, 1.0);
    let grads = [Tensor::zeros(vec![1]), Tensor::full(vec![1], f64::NAN)];
    let Err(Error::NonFiniteGradient { param }) = check_finite(&[&m.w, &m.bias], &grads) else {
        panic!("NaN accepted")
    };
    assert_eq!(param, "bias");
}

#[test]
fn ema_starts_at_the_first_loss() {
    assert_eq!(ema_update(None, 3.0, EMA_ALPHA), 3.0);
    assert!((ema_update(Some(3.0), 4.0, EMA_ALPHA) - 3.001).abs() < 1e-15);
}

#[test]
fn identical_curves_have_unit_speedup() {
    let a = LossCurve::new(vec![10.0, 20.0, 30.0, 40.0], vec![5.0, 4.0, 3.5, 3.2]).unwrap();
    for l in [5.0, 4.5, 4.0, 3.7, 3.2] {
        assert_eq!(speedup_at(&a, &a, l).unwrap(), 1.0);
    }
}

#[test]
fn twice_as_fast_curve_has_speedup_two() {
    let loss = vec![5.0, 4.0, 3.5, 3.2];
    let a = LossCurve::new(vec![10.0, 20.0, 30.0, 40.0], loss.clone()).unwrap();
    let b = LossCurve::new(vec![5.0, 10.0, 15.0, 20.0], loss).unwrap();
    for l in [4.8, 4.0, 3.6, 3.3, 3.2] {
        assert!((speedup_at(&a, &b, l).unwrap() - 2.0).abs() < 1e-12);
    }
    // linear interpolation between logged points
    assert!((a.tokens_to_reach(4.5).unwrap() - 15.0).abs() < 1e-12);
}

#[test]
fn unattained_level_is_an_error() {
    let a = LossCurve::new(vec![1.0, 2.0], vec![5.0, 4.0]).unwrap();
    let b = LossCurve::new(vec![1.0, 2.0], vec![5.0, 4.5]).unwrap();
    assert!(matches!(
        speedup_at(&a, &b, 4.2),
        Err(Error::UnattainedLevel { curve: "b", .. })
    ));
    assert!(LossCurve::new(vec![1.0, 1.0], vec![2.0, 1.0]).is_err());
    assert!(LossCurve::new(vec![], vec![]).is_err());
}

#[test]
fn untrained_model_is_near_uniform() {
    let t = Trainer::<f64>::new(config(ArchKind::Mamba, DType::F64), corpus()).unwrap();
    let loss = evaluate(&t.model, &corpus(), 16, 8).unwrap();
    assert!((loss - 256f64.ln()).abs() < 0.05, "{loss}");
}

#[test]
fn evaluation_matches_the_training_loss_and_repeats() {
    let t = Trainer::<f64>::new(config(ArchKind::MoeMamba, DType::F64), corpus()).unwrap();
    let toks = &corpus()[..3 * 16 + 1];
    let e = evaluate(&t.model, toks, 16, 3).unwrap();
    assert_eq!(e, evaluate(&t.model, toks, 16, 3).unwrap());

    let w = sequential_windows(toks, 16);
    let inputs: Vec<usize> = w.iter().flat_map(|p| p.0.clone()).collect();
    let targets: Vec<usize> = w.iter().flat_map(|p| p.1.clone()).collect();
    let mut g = Graph::new();
    let (ce, _) = t
        .model
        .loss(&mut g, &inputs, &targets, 3, 16, &mut MoeAux::default())
        .unwrap();
    assert!((g.value(ce).item() - e).abs() < 1e-12);
    assert!(evaluate(&t.model, &toks[..10], 16, 1).is_err());
}

#[test]
fn same_seed_same_log() {
    for kind in [ArchKind::Mamba, ArchKind::MoeMamba] {
        let c = config(kind, DType::F32);
        let (a, b) = (run::<f32>(&c, 20), run::<f32>(&c, 20));
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        let mut other = c.clone();
        other.seed = 8;
        assert_ne!(run::<f32>(&other, 20).log.to_csv(), a.log.to_csv());
    }
}

#[test]
fn resume_continues_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, dtype) in [
        (ArchKind::MoeMamba, DType::F64),
        (ArchKind::Transformer, DType::F32),
    ] {
        let c = config(kind, dtype);
        let path = dir.path().join("ckpt.bin");
        let straight_csv;
        let resumed_csv;
        match dtype {
            DType::F64 => {
                let straight = run::<f64>(&c, 20);
                run::<f64>(&c, 10).checkpoint().save(&path).unwrap();
                let mut r =
                    Trainer::resume(&Checkpoint::<f64>::load(&path).unwrap(), corpus()).unwrap();
                r.record_wallclock = false;
                r.run_to(20).unwrap();
                straight_csv = RunLog {
                    records: straight.log.records[10..].to_vec(),
                }
                .to_csv();
                resumed_csv = r.log.to_csv();
            }
            DType::F32 => {
                let straight = run::<f32>(&c, 20);
                run::<f32>(&c, 10).checkpoint().save(&path).unwrap();
                let mut r =
                    Trainer::resume(&Checkpoint::<f32>::load(&path).unwrap(), corpus()).unwrap();
                r.record_wallclock = false;
                r.run_to(20).unwrap();
                straight_csv = RunLog {
                    records: straight.log.records[10..].to_vec(),
                }
                .to_csv();
                resumed_csv = r.log.to_csv();
            }
        }
        assert_eq!(straight_csv, resumed_csv, "{kind:?}");
    }
}

#[test]
fn checkpoint_restores_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let t = run::<f64>(&config(ArchKind::ParallelMoeMamba, DType::F64), 5);
    let path = dir.path().join("c.bin");
    t.checkpoint().save(&path).unwrap();
    assert_eq!(read_manifest(&path).unwrap().state.step, 5);
    let ckpt = Checkpoint::<f64>::load(&path).unwrap();
    let m = model_from_checkpoint(&ckpt).unwrap();
    let toks = &corpus()[..32];
    assert_eq!(
        m.logits(toks, 2, 16).unwrap().data(),
        t.model.logits(toks, 2, 16).unwrap().data()
    );

    assert!(matches!(
        Checkpoint::<f32>::load(&path),
        Err(Error::Checkpoint(_))
    ));
    let mut broken = ckpt;
    broken.manifest.arrays[0].name = "param.nothing".into();
    assert!(matches!(
        model_from_checkpoint(&broken),
        Err(Error::Checkpoint(_))
    ));
    std::fs::write(&path, b"{\"format\":\"other\"}\n").unwrap();
    assert!(read_manifest(&path).is_err());
}

#[test]
fn aux_loss_is_zero_without_experts() {
    let dense = run::<f32>(&config(ArchKind::Mamba, DType::F32), 5);
    assert!(dense
        .log
        .records
        .iter()
        .all(|r| r.aux_loss == 0.0 && r.dropped_fraction == 0.0));
    let moe = run::<f32>(&config(ArchKind::MoeMamba, DType::F32), 5);
    assert!(moe.log.records.iter().all(|r| r.aux_loss > 0.0));
}

#[test]
fn log_records_are_well_formed() {
    let t = run::<f32>(&config(ArchKind::TransformerMoe, DType::F32), 20);
    let r = &t.log.records;
    assert_eq!(r.len(), 20);
    assert!(r.windows(2).all(|w| w[1].tokens_seen > w[0].tokens_seen));
    assert_eq!(r[0].tokens_seen, 64);
    assert!(r
        .iter()
        .all(|x| x.ema_loss.is_finite() && x.wallclock_s == 0.0));
    assert_eq!(r[0].ema_loss, r[0].raw_loss);
    assert_eq!(RunLog::parse_csv(&t.log.to_csv()).unwrap(), t.log);
    assert!(t.log.to_csv().starts_with(CSV_HEADER));
    assert!(RunLog::parse_csv("step,loss\n").is_err());
}

#[test]
fn training_reduces_loss() {
    let mut c = config(ArchKind::Mamba, DType::F32);
    c.steps = 60;
    let t = run::<f32>(&c, 60);
    let first: f64 = t.log.records[..5].iter().map(|r| r.raw_loss).sum::<f64>() / 5.0;
    let last: f64 = t.log.records[55..].iter().map(|r| r.raw_loss).sum::<f64>() / 5.0;
    assert!(last < first - 0.5, "{first} -> {last}");
}

#[test]
fn trainer_checks_its_inputs() {
    let c = config(ArchKind::Mamba, DType::F32);
    assert!(matches!(
        Trainer::<f64>::new(c.clone(), corpus()),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        Trainer::<f32>::new(c.clone(), vec![1, 2, 300]),
        Err(Error::Index { .. })
    ));
    let mut t = Trainer::<f32>::new(c, vec![1; 10]).unwrap();
    assert!(matches!(t.step(), Err(Error::Config(_))));
}

#[test]
fn runaway_loss_aborts_with_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "c.txt", TEXT.repeat(20).as_bytes());
    let mut c = config(ArchKind::Transformer, DType::F64);
    c.data = data;
    c.steps = 400;
    c.max_lr = 20.0;
    c.grad_clip = 1e6;
    c.weight_decay = 0.0;
    c.warmup_fraction = 0.0;
    let out = dir.path().join("run");
    let err = train(&c, &out, &TrainOptions::default()).unwrap_err();
    let Error::Diverged { step, initial, .. } = err else {
        panic!("{err}")
    };
    let log = RunLog::read_csv(out.join(RUNLOG_FILE)).unwrap();
    assert_eq!(log.records.len(), step);
    let tail = &log.records[step - 100..];
    assert!(tail.iter().all(|r| r.raw_loss > 2.0 * initial));
    assert!(out.join(CHECKPOINT_FILE).exists());
}

#[test]
fn train_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "c.txt", TEXT.repeat(20).as_bytes());
    let mut c = config(ArchKind::MoeMamba, DType::F32);
    c.data = data.clone();
    c.eval_data = Some(data);
    c.steps = 6;
    c.checkpoint_every = Some(4);
    let out = dir.path().join("run");
    let s = train(
        &c,
        &out,
        &TrainOptions {
            record_wallclock: true,
        },
    )
    .unwrap();
    assert_eq!(s.steps, 6);
    assert!(!s.diverged && s.eval_loss.is_some());
    assert!(out.join("checkpoint_step4.bin").exists());
    assert!(out.join("summary.json").exists());
    let log = RunLog::read_csv(out.join(RUNLOG_FILE)).unwrap();
    assert_eq!(log.records.len(), 6);
    assert!(log.records.iter().all(|r| r.wallclock_s > 0.0));
}

#[test]
fn config_json_round_trip_and_defaults() {
    let c = config(ArchKind::MoeMamba, DType::F64);
    assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);

    let minimal = r#"{"kind":"mamba","d_model":64,"n_blocks":2,"steps":100,"batch_size":4,"max_lr":0.001,"data":"x.txt"}"#;
    let m = TrainConfig::from_json(minimal).unwrap();
    assert_eq!(m.context_length, 1024);
    assert_eq!(
        (
            m.warmup_fraction,
            m.final_lr_ratio,
            m.weight_decay,
            m.grad_clip
        ),
        (0.01, 0.1, 0.1, 0.5)
    );
    assert_eq!(m.dtype, DType::F32);

    for bad in [
        minimal.replace("\"steps\":100", "\"steps\":0"),
        minimal.replace("\"max_lr\"", "\"final_lr_ratio\":0,\"max_lr\""),
        minimal.replace("\"max_lr\"", "\"warmup_fraction\":1.0,\"max_lr\""),
    ] {
        assert!(
            matches!(TrainConfig::from_json(&bad), Err(Error::Config(_))),
            "{bad}"
        );
    }
}

#[test]
fn config_paths_resolve_next_to_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(ArchKind::Mamba, DType::F32);
    let p = write(dir.path(), "cfg.json", c.to_json().as_bytes());
    assert_eq!(
        TrainConfig::load(&p).unwrap().data,
        dir.path().join("unused.txt")
    );
}

proptest! {
    #[test]
    fn bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        prop_assert_eq!(decode(&encode(&bytes)), bytes);
    }

    #[test]
    fn ema_moves_toward_the_sample(prev in -10.0f64..10.0, loss in -10.0f64..10.0, alpha in 0.0f64..1.0) {
        let s = ema_update(Some(prev), loss, alpha);
        prop_assert!((s - prev) * (loss - prev) >= 0.0);
        prop_assert!(s >= prev.min(loss) - 1e-12 && s <= prev.max(loss) + 1e-12);
    }

    #[test]
    fn clipped_norm_is_bounded(v in proptest::collection::vec(-100.0f64..100.0, 1..20), clip in 0.01f64..10.0) {
        let mut g = vec![Tensor::<f64>::from_f64(vec![v.len()], &v).unwrap()];
        clip_grad_norm(&mut g, clip);
        let n = g[0].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n <= clip + 1e-6);
    }

    #[test]
    fn decay_phase_is_non_increasing(steps in 2usize..5000, warm in 0.0f64..0.5) {
        let s = Schedule { steps, max_lr: 1.0, warmup_fraction: warm, final_ratio: 0.1 };
        let w = s.warmup_steps();
        for k in w.max(1)..steps {
            prop_assert!(s.lr_at(k + 1) <= s.lr_at(k) + 1e-15);
        }
        prop_assert!((s.lr_at(steps) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sampled_windows_are_corpus_slices(seed in 0u64..1000, len in 1usize..20) {
        let toks: Vec<usize> = (0..40).map(|i| (i * 7) % 256).collect();
        prop_assume!(toks.len() > len);
        let b = sample_batch(&toks, len, 3, &mut rng(seed)).unwrap();
        for w in 0..3 {
            let first = b.inputs[w * len];
            let start = toks.iter().position(|&t| t == first).unwrap();
            prop_assert_eq!(&b.inputs[w * len..(w + 1) * len], &toks[start..start + len]);
            prop_assert_eq!(&b.targets[w * len..(w + 1) * len], &toks[start + 1..start + len + 1]);
        }
    }
}
