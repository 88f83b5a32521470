//! Training loop: uniform time sampling, multinomial noise, constrained corruption,
//! cross-entropy gradients, AdamW updates and an EMA shadow of the weights.
//!
//! Every random draw of step `s` comes from a stream derived from `(seed, s)`, and the
//! data order of each epoch from `(seed, epoch)`, so a run resumed from a checkpoint
//! replays exactly the trajectory of an uninterrupted one.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{Checkpoint, ADAM_M, ADAM_V, EMA, PARAMS};
use crate::codec::{write_atomic, CountVector};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::forward::{sample_forward, sample_forward_raw};
use crate::kernels::{sample_multinomial_noise, splitmix64, RngStream};
use crate::net::{Denoiser, DenoiserConfig, DenoiserInput, ParameterStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Checkpoint and EMA-loss cadence in steps; 0 disables periodic work.
    pub eval_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// When false the forward corruption skips greedy repair (the unconstrained ablation).
    pub fixed_sum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            ema_decay: 0.999,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 0,
            checkpoint_path: None,
            log_path: None,
            fixed_sum: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument(format!(
                "ema_decay {} outside [0, 1)",
                self.ema_decay
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Exponential moving average of the live parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<S> {
    pub shadow: ParameterStore<S>,
    pub decay: f64,
}

impl<S: Scalar> EmaState<S> {
    pub fn new(params: &ParameterStore<S>, decay: f64) -> Self {
        Self {
            shadow: params.clone(),
            decay,
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &ParameterStore<S>) {
        let d = S::of(self.decay);
        let keep = S::of(1.0 - self.decay);
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (a, &b) in s.data.iter_mut().zip(&p.data) {
                *a = d * *a + keep * b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: ParameterStore<S>,
    pub v: ParameterStore<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParameterStore<S>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One AdamW update with decoupled weight decay; `step` is 1-based.
    pub fn apply(&mut self, params: &mut ParameterStore<S>, grads: &ParameterStore<S>, step: u64, cfg: &TrainConfig) {
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let lr = S::of(cfg.learning_rate);
        let wd = S::of(cfg.weight_decay);
        let eps = S::of(cfg.adam_eps);
        let c1 = S::one() - S::of(cfg.beta1.powf(step as f64));
        let c2 = S::one() - S::of(cfg.beta2.powf(step as f64));
        let one = S::one();
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] = p.data[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * p.data[i]);
            }
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S> {
    pub model: Denoiser<S>,
    pub ema: EmaState<S>,
    pub adam: AdamState<S>,
    /// Completed steps.
    pub step: u64,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: Denoiser<S>, ema_decay: f64) -> Self {
        let ema = EmaState::new(&model.params, ema_decay);
        let adam = AdamState::new(&model.params);
        Self {
            model,
            ema,
            adam,
            step: 0,
        }
    }

    pub fn ema_model(&self) -> Denoiser<S> {
        Denoiser {
            config: self.model.config.clone(),
            params: self.ema.shadow.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.config.clone(), self.step);
        ck.push_group(PARAMS, &self.model.params);
        ck.push_group(EMA, &self.ema.shadow);
        ck.push_group(ADAM_M, &self.adam.m);
        ck.push_group(ADAM_V, &self.adam.v);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, ema_decay: f64) -> Result<Self> {
        let model = Denoiser::from_parts(ck.config.clone(), ck.group(PARAMS)?)?;
        let shadow = if ck.has_group(EMA) {
            ck.group(EMA)?
        } else {
            model.params.clone()
        };
        let adam = if ck.has_group(ADAM_M) {
            AdamState {
                m: ck.group(ADAM_M)?,
                v: ck.group(ADAM_V)?,
            }
        } else {
            AdamState::new(&model.params)
        };
        Ok(Self {
            model,
            ema: EmaState {
                shadow,
                decay: ema_decay,
            },
            adam,
            step: ck.step,
        })
    }
}

const STEP_STREAM: u64 = 0x5eed_0001;
const SHUFFLE_STREAM: u64 = 0x5eed_0002;

pub fn step_stream(seed: u64, step: u64) -> RngStream {
    RngStream::new(seed, splitmix64(STEP_STREAM ^ step))
}

/// A corrupted batch ready for the denoiser.
#[derive(Debug, Clone)]
pub struct CorruptedBatch {
    pub x_t: Vec<Vec<u32>>,
    pub t: Vec<f64>,
    pub labels: Vec<Option<usize>>,
}

/// Draws `t`, noise and the corrupted state for every batch element from per-element
/// streams derived from `rng`.
pub fn corrupt_batch<S: Scalar>(
    model: &Denoiser<S>,
    batch: &[&Example],
    rng: &RngStream,
    fixed_sum: bool,
) -> Result<CorruptedBatch> {
    let mut out = CorruptedBatch {
        x_t: Vec::with_capacity(batch.len()),
        t: Vec::with_capacity(batch.len()),
        labels: Vec::with_capacity(batch.len()),
    };
    for (i, ex) in batch.iter().enumerate() {
        let mut r = rng.derive(i as u64);
        let t: f64 = r.random();
        let x0 = &ex.x;
        let x1 = sample_multinomial_noise(x0.codebook_size(), x0.total(), &mut r)?;
        let x_t = if fixed_sum {
            sample_forward(x0, &x1, t, &mut r)?.x_t.into_counts()
        } else {
            sample_forward_raw(x0, &x1, t, &mut r)?.1
        };
        out.labels.push(model.drop_label(ex.label, &mut r));
        out.x_t.push(x_t);
        out.t.push(t);
    }
    Ok(out)
}

fn batch_hash(batch: &[&Example]) -> u64 {
    let mut h = DefaultHasher::new();
    for ex in batch {
        ex.x.counts().hash(&mut h);
        ex.label.hash(&mut h);
    }
    h.finish()
}

fn inputs(c: &CorruptedBatch) -> Vec<DenoiserInput<'_>> {
    c.x_t
        .iter()
        .zip(&c.t)
        .zip(&c.labels)
        .map(|((x, &t), &class_label)| DenoiserInput {
            counts: x,
            t,
            class_label,
        })
        .collect()
}

/// One optimization step on `batch`; returns the pre-update mean loss.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    batch: &[&Example],
    rng: &RngStream,
    config: &TrainConfig,
) -> Result<f64> {
    let corrupted = corrupt_batch(&state.model, batch, rng, config.fixed_sum)?;
    let targets: Vec<&CountVector> = batch.iter().map(|e| &e.x).collect();
    let (loss, grads) = state.model.loss_and_grad(&inputs(&corrupted), &targets)?;
    let loss = loss.to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            t_values: corrupted.t.clone(),
            batch_hash: batch_hash(batch),
        });
    }
    state.step += 1;
    state
        .adam
        .apply(&mut state.model.params, &grads, state.step, config);
    state.ema.update(&state.model.params);
    Ok(loss)
}

/// Dataset indices for step `step` (0-based): consecutive positions in the stream of
/// per-epoch shuffles.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|i| {
            let pos = step * batch_size as u64 + i;
            let epoch = pos / n as u64;
            let offset = (pos % n as u64) as usize;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut RngStream::new(seed, splitmix64(SHUFFLE_STREAM ^ epoch)));
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[offset]
        })
        .collect()
}

/// Trains a freshly initialized model; see [`fit_from`].
pub fn fit<S: Scalar>(
    dataset: &[Example],
    model_config: DenoiserConfig,
    config: &TrainConfig,
) -> Result<TrainState<S>> {
    let model = Denoiser::init(model_config, config.seed)?;
    fit_from(TrainState::new(model, config.ema_decay), dataset, config)
}

fn check_dataset(dataset: &[Example], cfg: &DenoiserConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    for (i, ex) in dataset.iter().enumerate() {
        if ex.x.codebook_size() != cfg.codebook_size || ex.x.total() != cfg.total {
            return Err(Error::Shape(format!(
                "example {i} has (C, M) = ({}, {}), model expects ({}, {})",
                ex.x.codebook_size(),
                ex.x.total(),
                cfg.codebook_size,
                cfg.total
            )));
        }
        if let Some(k) = ex.label {
            if k >= cfg.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has label {k} but the model has {} classes",
                    cfg.num_classes
                )));
            }
        }
    }
    Ok(())
}

/// Continues training from `state` up to `config.steps` total steps.
///
/// Writes a checkpoint every `eval_every` steps and at the end (when a path is set)
/// and appends `step,loss,ema_loss,wall_ms` rows to the log. `ema_loss` is only
/// filled on `eval_every` boundaries.
pub fn fit_from<S: Scalar>(
    mut state: TrainState<S>,
    dataset: &[Example],
    config: &TrainConfig,
) -> Result<TrainState<S>> {
    config.validate()?;
    check_dataset(dataset, &state.model.config)?;
    state.ema.decay = config.ema_decay;
    let started = Instant::now();
    let mut log = String::new();
    if state.step == 0 {
        log.push_str("step,loss,ema_loss,wall_ms\n");
    }
    if let Some(path) = &config.checkpoint_path {
        if state.step == 0 {
            state.to_checkpoint().save(path)?;
        }
    }
    while state.step < config.steps {
        let step = state.step;
        let idx = batch_indices(dataset.len(), config.batch_size, config.seed, step);
        let batch: Vec<&Example> = idx.iter().map(|&i| &dataset[i]).collect();
        let rng = step_stream(config.seed, step);
        let loss = train_step(&mut state, &batch, &rng, config)?;
        let boundary = config.eval_every > 0 && state.step % config.eval_every == 0;
        let mut ema_loss = String::new();
        if boundary || state.step == config.steps {
            let ema = state.ema_model();
            let corrupted = corrupt_batch(&ema, &batch, &rng, config.fixed_sum)?;
            let targets: Vec<&CountVector> = batch.iter().map(|e| &e.x).collect();
            let l = ema.loss(&inputs(&corrupted), &targets)?;
            write!(ema_loss, "{}", l.to_f64_lossy()).unwrap();
        }
        writeln!(
            log,
            "{},{},{},{}",
            state.step,
            loss,
            ema_loss,
            started.elapsed().as_millis()
        )
        .unwrap();
        if boundary && state.step != config.steps {
            if let Some(path) = &config.checkpoint_path {
                state.to_checkpoint().save(path)?;
            }
        }
    }
    if let Some(path) = &config.checkpoint_path {
        state.to_checkpoint().save(path)?;
    }
    if let Some(path) = &config.log_path {
        append_log(path, &log)?;
    }
    Ok(state)
}

fn append_log(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `state` as a checkpoint at `path`.
pub fn save_state<S: Scalar>(state: &TrainState<S>, path: &Path) -> Result<()> {
    write_atomic(path, &state.to_checkpoint().to_bytes())
}
