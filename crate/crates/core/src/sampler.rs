//! Constrained reverse process.
//!
//! Starting from multinomial noise `x1`, each step on the uniform grid
//! `t = 1, 1 - dt, .., dt` draws an `x0` candidate position-wise with nucleus sampling
//! from the (optionally guided) denoiser, repairs it to sum `M`, forms the posterior
//! `mu = (1 - dt/t) x_t + (dt/t) x0`, `sigma = |x1 - x0| / 4 * f(t - dt)`, samples the
//! discretized truncated Gaussian and repairs the sum again.

use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::codec::CountVector;
use crate::error::{Error, Result};
use crate::forward::{greedy_adjust, greedy_adjust_with, CategoricalTable, GainRule};
use crate::kernels::{sample_discretized_gaussian, sample_multinomial_noise, softmax, top_p_sample, GaussianParams, RngStream};
use crate::net::{Denoiser, DenoiserInput, DenoiserLogits};
use crate::scalar::Scalar;

/// Multiplier `f` on the posterior scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `f(t) = t`
    #[default]
    Linear,
    /// `f(t) = 1`
    Constant,
    /// `f(t) = 0`
    None,
}

impl Schedule {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::Constant => 1.0,
            Schedule::None => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Constant => "constant",
            Schedule::None => "none",
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "constant" => Ok(Schedule::Constant),
            "none" => Ok(Schedule::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule `{other}` (expected linear, constant or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub num_steps: usize,
    pub top_p: f64,
    pub guidance_scale: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub class_label: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            num_steps: 25,
            top_p: 1.0,
            guidance_scale: 0.0,
            schedule: Schedule::Linear,
            seed: 0,
            class_label: None,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument("num_steps must be >= 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {} must be finite and >= 0",
                self.guidance_scale
            )));
        }
        Ok(())
    }

    /// The times visited, `1 - k / num_steps` for `k = 0..num_steps`.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.num_steps;
        (0..n).map(|k| (n - k) as f64 / n as f64).collect()
    }
}

/// `(1 + w) cond - w uncond`, entry-wise.
pub fn guided_logits(cond: &DenoiserLogits, uncond: &DenoiserLogits, w: f64) -> Result<DenoiserLogits> {
    if cond.codebook_size != uncond.codebook_size || cond.width != uncond.width {
        return Err(Error::Shape("guidance inputs disagree in shape".into()));
    }
    Ok(DenoiserLogits {
        codebook_size: cond.codebook_size,
        width: cond.width,
        grid: cond
            .grid
            .iter()
            .zip(&uncond.grid)
            .map(|(&c, &u)| (1.0 + w) * c - w * u)
            .collect(),
    })
}

/// Draws an `x0` candidate position-wise; with `constrained` it is repaired to sum `M`
/// using the per-position categorical probabilities as the likelihood.
pub fn draw_candidate<R: Rng + ?Sized>(
    logits: &DenoiserLogits,
    top_p: f64,
    constrained: bool,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let raw: Vec<u32> = (0..logits.codebook_size)
        .map(|j| top_p_sample(logits.row(j), top_p, rng).map(|v| v as u32))
        .collect::<Result<_>>()?;
    if !constrained {
        return Ok(raw);
    }
    let mut probs = Vec::with_capacity(logits.grid.len());
    for j in 0..logits.codebook_size {
        probs.extend(softmax(logits.row(j)));
    }
    let table = CategoricalTable {
        probs,
        width: logits.width,
    };
    let total = (logits.width - 1) as u32;
    Ok(greedy_adjust_with(&raw, &table, total, GainRule::default())?.into_counts())
}

/// Posterior parameters for the move from `t` to `t - dt`.
pub fn posterior_params(
    x_t: &[u32],
    x0: &[u32],
    x1: &[u32],
    t: f64,
    dt: f64,
    schedule: Schedule,
) -> Result<GaussianParams> {
    if !(dt > 0.0 && dt <= t) {
        return Err(Error::InvalidArgument(format!("need 0 < dt <= t, got dt = {dt}, t = {t}")));
    }
    if x_t.len() != x0.len() || x0.len() != x1.len() {
        return Err(Error::Shape("x_t, x0 and x1 differ in length".into()));
    }
    let ratio = dt / t;
    let f = schedule.eval(t - dt);
    let mu = x_t
        .iter()
        .zip(x0)
        .map(|(&a, &b)| (1.0 - ratio) * a as f64 + ratio * b as f64)
        .collect();
    let sigma = x1
        .iter()
        .zip(x0)
        .map(|(&a, &b)| (a as f64 - b as f64).abs() / 4.0 * f)
        .collect();
    GaussianParams::new(mu, sigma)
}

/// Samples the posterior and, when `constrained`, repairs the sum.
#[allow(clippy::too_many_arguments)]
pub fn posterior_step<R: Rng + ?Sized>(
    x_t: &[u32],
    x0: &[u32],
    x1: &[u32],
    t: f64,
    dt: f64,
    schedule: Schedule,
    total: u32,
    constrained: bool,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let params = posterior_params(x_t, x0, x1, t, dt, schedule)?;
    let raw = sample_discretized_gaussian(&params, total, rng);
    if constrained {
        Ok(greedy_adjust(&raw, &params, total)?.into_counts())
    } else {
        Ok(raw)
    }
}

fn check_model<S: Scalar>(model: &Denoiser<S>, config: &SampleConfig) -> Result<()> {
    config.validate()?;
    if let Some(k) = config.class_label {
        if k >= model.config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {k} requested from a model with {} classes",
                model.config.num_classes
            )));
        }
    }
    Ok(())
}

fn uses_guidance<S: Scalar>(model: &Denoiser<S>, config: &SampleConfig) -> bool {
    config.guidance_scale != 0.0 && model.config.num_classes > 0 && config.class_label.is_some()
}

/// Batched guided logits for every state at time `t`.
fn step_logits<S: Scalar>(
    model: &Denoiser<S>,
    states: &[Vec<u32>],
    t: f64,
    config: &SampleConfig,
) -> Result<Vec<DenoiserLogits>> {
    let cond: Vec<DenoiserInput<'_>> = states
        .iter()
        .map(|x| DenoiserInput {
            counts: x,
            t,
            class_label: config.class_label,
        })
        .collect();
    if !uses_guidance(model, config) {
        return model.forward_batch(&cond);
    }
    let mut all = cond.clone();
    all.extend(cond.iter().map(|c| DenoiserInput {
        class_label: None,
        ..*c
    }));
    let logits = model.forward_batch(&all)?;
    let (c, u) = logits.split_at(states.len());
    c.iter()
        .zip(u)
        .map(|(c, u)| guided_logits(c, u, config.guidance_scale))
        .collect()
}

/// A single reverse transition for one chain.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<S: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<S>,
    x_t: &CountVector,
    x1: &CountVector,
    t: f64,
    dt: f64,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<CountVector> {
    check_model(model, config)?;
    let total = model.config.total;
    if x_t.total() != total || x_t.counts().iter().sum::<u32>() != total {
        return Err(Error::Constraint("reverse step input does not sum to M".into()));
    }
    let logits = step_logits(model, &[x_t.counts().to_vec()], t, config)?.remove(0);
    let x0 = draw_candidate(&logits, config.top_p, true, rng)?;
    let next = posterior_step(x_t.counts(), &x0, x1.counts(), t, dt, config.schedule, total, true, rng)?;
    CountVector::new(next, total)
}

/// One reverse chain's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub x1: Vec<u32>,
    /// States after each step; the last one is the sample.
    pub states: Vec<Vec<u32>>,
}

impl Chain {
    pub fn sample(&self) -> &[u32] {
        self.states.last().map(Vec::as_slice).unwrap_or(&self.x1)
    }
}

/// Runs `n` chains in lockstep; chain `i` draws only from `RngStream::new(seed, first + i)`.
///
/// With `constrained` false every greedy repair is skipped.
pub fn run_chains<S: Scalar>(
    model: &Denoiser<S>,
    config: &SampleConfig,
    first: u64,
    n: usize,
    constrained: bool,
) -> Result<Vec<Chain>> {
    check_model(model, config)?;
    let (c, total) = (model.config.codebook_size, model.config.total);
    let mut rngs: Vec<RngStream> = (0..n as u64).map(|i| RngStream::new(config.seed, first + i)).collect();
    let mut chains = Vec::with_capacity(n);
    for r in rngs.iter_mut() {
        let x1 = sample_multinomial_noise(c, total, r)?.into_counts();
        chains.push(Chain {
            x1,
            states: Vec::with_capacity(config.num_steps),
        });
    }
    let mut current: Vec<Vec<u32>> = chains.iter().map(|ch| ch.x1.clone()).collect();
    let dt = 1.0 / config.num_steps as f64;
    for t in config.time_grid() {
        let logits = step_logits(model, &current, t, config)?;
        for ((x, r), (l, ch)) in current
            .iter_mut()
            .zip(rngs.iter_mut())
            .zip(logits.iter().zip(chains.iter_mut()))
        {
            let x0 = draw_candidate(l, config.top_p, constrained, r)?;
            // The last step lands exactly on t = 0 regardless of float rounding in t - dt.
            let step_dt = dt.min(t);
            *x = posterior_step(x, &x0, &ch.x1, t, step_dt, config.schedule, total, constrained, r)?;
            ch.states.push(x.clone());
        }
    }
    Ok(chains)
}

/// One sample (chain 0 of the seed).
pub fn generate<S: Scalar>(model: &Denoiser<S>, config: &SampleConfig) -> Result<CountVector> {
    let chain = run_chains(model, config, 0, 1, true)?.remove(0);
    CountVector::new(chain.sample().to_vec(), model.config.total)
}

/// `n` samples; sample `i` equals what chain `i` of the seed would produce alone.
pub fn generate_batch<S: Scalar>(model: &Denoiser<S>, config: &SampleConfig, n: usize) -> Result<Vec<CountVector>> {
    run_chains(model, config, 0, n, true)?
        .into_iter()
        .map(|ch| CountVector::new(ch.sample().to_vec(), model.config.total))
        .collect()
}

/// Per-sample metadata written next to sample files as JSON lines.
#[derive(Debug, Clone, Serialize)]
pub struct SampleMeta {
    pub index: usize,
    pub seed: u64,
    pub class: Option<usize>,
    pub steps: usize,
    pub w: f64,
    pub p: f64,
    pub schedule: Schedule,
    pub kind: &'static str,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(c: usize, w: usize, grid: Vec<f64>) -> DenoiserLogits {
        DenoiserLogits {
            codebook_size: c,
            width: w,
            grid,
        }
    }

    #[test]
    fn guidance_arithmetic() {
        let u = logits(1, 3, vec![0.5, -1.0, 2.0]);
        let c = logits(1, 3, vec![1.0, -2.0, 4.0]);
        assert_eq!(guided_logits(&c, &u, 0.0).unwrap(), c);
        assert_eq!(guided_logits(&u, &u, 3.7).unwrap().grid, u.grid);
        assert_eq!(guided_logits(&c, &u, 1.0).unwrap().grid, vec![1.5, -3.0, 6.0]);
        assert!(guided_logits(&c, &logits(3, 1, vec![0.0; 3]), 1.0).is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!("linear".parse::<Schedule>().unwrap().eval(0.3), 0.3);
        assert_eq!("constant".parse::<Schedule>().unwrap().eval(0.3), 1.0);
        assert_eq!("none".parse::<Schedule>().unwrap().eval(0.3), 0.0);
        assert!("cosine".parse::<Schedule>().is_err());
    }

    #[test]
    fn grid_is_uniform() {
        let cfg = SampleConfig {
            num_steps: 4,
            ..SampleConfig::default()
        };
        assert_eq!(cfg.time_grid(), vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn zero_schedule_fixed_point() {
        let x = [3u32, 1, 0, 2];
        let x1 = [0u32, 0, 6, 0];
        let mut rng = RngStream::new(0, 0);
        for &(t, dt) in &[(1.0, 0.04), (0.5, 0.1), (0.2, 0.2)] {
            let out = posterior_step(&x, &x, &x1, t, dt, Schedule::None, 6, true, &mut rng).unwrap();
            assert_eq!(out, x);
        }
    }

    #[test]
    fn final_step_lands_on_candidate() {
        let x_t = [3u32, 1, 0, 2];
        let x0 = [0u32, 2, 2, 2];
        let x1 = [6u32, 0, 0, 0];
        let p = posterior_params(&x_t, &x0, &x1, 0.04, 0.04, Schedule::Linear).unwrap();
        assert_eq!(p.mu, vec![0.0, 2.0, 2.0, 2.0]);
        assert!(p.sigma.iter().all(|&s| s == 0.0));
        assert!(posterior_params(&x_t, &x0, &x1, 0.04, 0.05, Schedule::Linear).is_err());
    }

    #[test]
    fn candidate_repair() {
        // Confident rows: position 0 wants 2, position 1 wants 2 (sum 4 > M = 3).
        let mut grid = vec![-20.0; 8];
        grid[2] = 5.0;
        grid[1] = 4.0;
        grid[4 + 2] = 5.0;
        grid[4 + 1] = 1.0;
        let l = logits(2, 4, grid);
        let mut rng = RngStream::new(0, 0);
        let raw = draw_candidate(&l, 0.5, false, &mut rng).unwrap();
        assert_eq!(raw, vec![2, 2]);
        let fixed = draw_candidate(&l, 0.5, true, &mut rng).unwrap();
        // Decrementing position 0 costs e^{-1}; position 1 costs e^{-4}.
        assert_eq!(fixed, vec![1, 2]);
    }

    #[test]
    fn config_validation() {
        let bad = SampleConfig {
            num_steps: 0,
            ..SampleConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SampleConfig {
            top_p: 0.0,
            ..SampleConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SampleConfig {
            guidance_scale: -1.0,
            ..SampleConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
