use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainState};
use super::config::TrainConfig;
use super::data::{sample_batch, sequential_windows, tokenize_bytes};
use super::optim::{check_finite, clip_grad_norm, AdamW};
use super::runlog::{ema_update, LogRecord, RunLog, EMA_ALPHA};
use crate::arch::Model;
use crate::error::{Error, Result};
use crate::moe::MoeAux;
use crate::param::{Module, Param};
use crate::tensor::{DType, Element, Graph, Tensor};

pub const DIVERGE_FACTOR: f64 = 2.0;
pub const DIVERGE_WINDOW: usize = 100;
/// Stream id of the data sampler; initialization draws from stream 0.
const DATA_STREAM: u64 = 1;

pub struct Trainer<T: Element> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub log: RunLog,
    /// When false, the `wallclock_s` column is written as 0 so logs are
    /// byte-reproducible.
    pub record_wallclock: bool,
    tokens: Vec<usize>,
    data_rng: ChaCha8Rng,
    step: usize,
    ema: Option<f64>,
    initial_loss: Option<f64>,
    diverge_count: usize,
    started: Instant,
    elapsed_before: f64,
}

impl<T: Element> Trainer<T> {
    pub fn new(config: TrainConfig, tokens: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "config asks for {} but the trainer runs {}",
                config.dtype.name(),
                T::DTYPE.name()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= config.model.vocab_size) {
            return Err(Error::Index {
                op: "corpus",
                index: bad,
                bound: config.model.vocab_size,
            });
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Model::build(&config.model, &mut init_rng)?;
        model.set_scan_mode(config.scan_mode);
        let opt = AdamW::new(&model, config.weight_decay);
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
        data_rng.set_stream(DATA_STREAM);
        Ok(Trainer {
            config,
            model,
            opt,
            log: RunLog::default(),
            record_wallclock: true,
            tokens,
            data_rng,
            step: 0,
            ema: None,
            initial_loss: None,
            diverge_count: 0,
            started: Instant::now(),
            elapsed_before: 0.0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// One optimization step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<LogRecord> {
        let c = &self.config;
        let batch = sample_batch(
            &self.tokens,
            c.context_length,
            c.batch_size,
            &mut self.data_rng,
        )?;
        let (raw_loss, aux_loss, dropped, mut grads) = {
            let mut g = Graph::new();
            let mut aux = MoeAux::default();
            let (ce, extra) = self.model.loss(
                &mut g,
                &batch.inputs,
                &batch.targets,
                batch.batch,
                batch.len,
                &mut aux,
            )?;
            let total = match extra {
                Some(a) => g.add(ce, a)?,
                None => ce,
            };
            let raw = g.value(ce).item().f64();
            let aux_v = extra.map_or(0.0, |a| g.value(a).item().f64());
            let mut grads = g.backward(total)?;
            let mut list = Vec::new();
            self.model.visit(&mut |p| {
                list.push(
                    grads
                        .take_param(p.key())
                        .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())),
                )
            });
            (raw, aux_v, aux.dropped_fraction(), list)
        };
        let mut params: Vec<&Param<T>> = Vec::new();
        self.model.visit(&mut |p| params.push(p));
        check_finite(&params, &grads)?;
        clip_grad_norm(&mut grads, self.config.grad_clip);

        self.step += 1;
        let lr = self.config.schedule().lr_at(self.step);
        self.opt.step(&mut self.model, &grads, lr)?;

        let initial = *self.initial_loss.get_or_insert(raw_loss);
        self.ema = Some(ema_update(self.ema, raw_loss, EMA_ALPHA));
        if raw_loss > DIVERGE_FACTOR * initial {
            self.diverge_count += 1;
        } else {
            self.diverge_count = 0;
        }
        let record = LogRecord {
            step: self.step,
            tokens_seen: self.step as u64 * self.config.tokens_per_step(),
            lr,
            raw_loss,
            ema_loss: self.ema.expect("set above"),
            aux_loss,
            dropped_fraction: dropped,
            wallclock_s: if self.record_wallclock {
                self.elapsed_before + self.started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.log.push(record);
        if self.diverge_count >= DIVERGE_WINDOW {
            return Err(Error::Diverged {
                step: self.step,
                loss: raw_loss,
                initial,
                window: DIVERGE_WINDOW,
            });
        }
        Ok(record)
    }

    /// Steps until `last` (inclusive) or the configured total, whichever is first.
    pub fn run_to(&mut self, last: usize) -> Result<()> {
        while self.step < last.min(self.config.steps) {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut named = Vec::new();
        let mut names = Vec::new();
        self.model.visit(&mut |p| {
            names.push(p.name.clone());
            named.push((format!("param.{}", p.name), p.value.clone()));
        });
        for (n, m) in names.iter().zip(&self.opt.m) {
            named.push((format!("adam_m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&self.opt.v) {
            named.push((format!("adam_v.{n}"), v.clone()));
        }
        let state = TrainState {
            step: self.step,
            ema_loss: self.ema,
            initial_loss: self.initial_loss,
            diverge_count: self.diverge_count,
            data_rng_word_pos: self.data_rng.get_word_pos().to_string(),
            adam_t: self.opt.t,
        };
        Checkpoint::new(self.config.clone(), state, named)
    }

    /// Rebuilds a trainer from a checkpoint so the next steps match an
    /// uninterrupted run.
    pub fn resume(ckpt: &Checkpoint<T>, tokens: Vec<usize>) -> Result<Self> {
        let m = &ckpt.manifest;
        let mut t = Trainer::new(m.config.clone(), tokens)?;
        let fetch = |name: String, like: &Tensor<T>| -> Result<Tensor<T>> {
            let a = ckpt
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if a.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "array {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    like.shape()
                )));
            }
            Ok(a.clone())
        };
        let mut err = None;
        let mut i = 0;
        let (opt_m, opt_v) = (&mut t.opt.m, &mut t.opt.v);
        t.model.visit_mut(&mut |p| {
            let r = (|| {
                p.value = fetch(format!("param.{}", p.name), &p.value)?;
                opt_m[i] = fetch(format!("adam_m.{}", p.name), &p.value)?;
                opt_v[i] = fetch(format!("adam_v.{}", p.name), &p.value)?;
                Ok::<(), Error>(())
            })();
            if let Err(e) = r {
                err.get_or_insert(e);
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        let s = &m.state;
        t.opt.t = s.adam_t;
        t.step = s.step;
        t.ema = s.ema_loss;
        t.initial_loss = s.initial_loss;
        t.diverge_count = s.diverge_count;
        let pos: u128 = s.data_rng_word_pos.parse().map_err(|_| {
            Error::Checkpoint(format!("bad rng position {:?}", s.data_rng_word_pos))
        })?;
        t.data_rng.set_word_pos(pos);
        Ok(t)
    }
}

/// The model stored in a checkpoint, without optimizer state.
pub fn model_from_checkpoint<T: Element>(ckpt: &Checkpoint<T>) -> Result<Model<T>> {
    let config = &ckpt.manifest.config;
    let mut model = Model::build(&config.model, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    model.set_scan_mode(config.scan_mode);
    let mut err = None;
    model.visit_mut(&mut |p| {
        let name = format!("param.{}", p.name);
        match ckpt.get(&name) {
            Some(a) if a.shape() == p.value.shape() => p.value = a.clone(),
            Some(a) => {
                err.get_or_insert(Error::Checkpoint(format!(
                    "array {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    p.value.shape()
                )));
            }
            None => {
                err.get_or_insert(Error::Checkpoint(format!("missing array {name}")));
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

/// Mean next-token cross-entropy over consecutive non-overlapping windows,
/// evaluated `batch` windows at a time.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    tokens: &[usize],
    context_length: usize,
    batch: usize,
) -> Result<f64> {
    let windows = sequential_windows(tokens, context_length);
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "{} tokens do not fill one window of {}",
            tokens.len(),
            context_length
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for group in windows.chunks(batch.max(1)) {
        let inputs: Vec<usize> = group.iter().flat_map(|w| w.0.iter().copied()).collect();
        let targets: Vec<usize> = group.iter().flat_map(|w| w.1.iter().copied()).collect();
        let mut g = Graph::new();
        let mut aux = MoeAux::default();
        let logits = model.forward(&mut g, &inputs, group.len(), context_length, &mut aux)?;
        let ce = g.cross_entropy(logits, &targets)?;
        total += g.value(ce).item().f64() * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    pub record_wallclock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_ema_loss: f64,
    pub final_raw_loss: f64,
    pub eval_loss: Option<f64>,
    pub diverged: bool,
    pub runlog: PathBuf,
    pub checkpoint: PathBuf,
}

pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Full run: trains, writes `runlog.csv`, periodic and final checkpoints and
/// `summary.json` into `out_dir`. The run log is written even on divergence.
pub fn train(config: &TrainConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    match config.dtype {
        DType::F32 => train_typed::<f32>(config, out_dir, opts),
        DType::F64 => train_typed::<f64>(config, out_dir, opts),
    }
}

fn train_typed<T: Element>(
    config: &TrainConfig,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let tokens = tokenize_bytes(&config.data)?;
    let mut trainer = Trainer::<T>::new(config.clone(), tokens)?;
    trainer.record_wallclock = opts.record_wallclock;
    let runlog = out_dir.join(RUNLOG_FILE);
    let checkpoint = out_dir.join(CHECKPOINT_FILE);

    let mut outcome = Ok(());
    while trainer.step_count() < config.steps {
        if let Err(e) = trainer.step() {
            outcome = Err(e);
            break;
        }
        if let Some(every) = config.checkpoint_every {
            let s = trainer.step_count();
            if s % every == 0 && s < config.steps {
                trainer
                    .checkpoint()
                    .save(out_dir.join(format!("checkpoint_step{s}.bin")))?;
            }
        }
    }
    trainer.log.write_csv(&runlog)?;
    let diverged = matches!(outcome, Err(Error::Diverged { .. }));
    if let Err(e) = outcome {
        if !diverged {
            return Err(e);
        }
    }
    trainer.checkpoint().save(&checkpoint)?;

    let eval_loss = match &config.eval_data {
        Some(p) => Some(evaluate(
            &trainer.model,
            &tokenize_bytes(p)?,
            config.context_length,
            config.batch_size,
        )?),
        None => None,
    };
    let last = trainer.log.last().copied();
    let summary = TrainSummary {
        steps: trainer.step_count(),
        final_ema_loss: last.map_or(f64::NAN, |r| r.ema_loss),
        final_raw_loss: last.map_or(f64::NAN, |r| r.raw_loss),
        eval_loss,
        diverged,
        runlog,
        checkpoint,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    if diverged {
        let r = last.expect("diverged after at least one step");
        return Err(Error::Diverged {
            step: r.step,
            loss: r.raw_loss,
            initial: trainer.log.records[0].raw_loss,
            window: DIVERGE_WINDOW,
        });
    }
    Ok(summary)
}
