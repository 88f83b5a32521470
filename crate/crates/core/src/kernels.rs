//! Probability kernels shared by the forward and reverse processes.
//!
//! All randomness flows through [`RngStream`], a ChaCha8 generator addressed by
//! `(seed, stream_id)`. ChaCha output is specified independently of platform, so a
//! replayed stream reproduces draws bit-exactly.

use std::f64::consts::SQRT_2;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::CountVector;
use crate::error::{Error, Result};

/// Deterministic random stream addressed by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream for sub-task `index`, independent of how far `self` has advanced.
    pub fn derive(&self, index: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(1))))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-coordinate mean and scale of the element-wise discretized Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Shape(format!(
                "mu has length {}, sigma has length {}",
                mu.len(),
                sigma.len()
            )));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma entry {s} is not finite and >= 0")));
        }
        if let Some(m) = mu.iter().find(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu entry {m} is not finite")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

fn std_normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// Standard normal mass of `[lo, hi]`, evaluated on whichever tail avoids cancellation.
fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        std_normal_sf(lo) - std_normal_sf(hi)
    } else if hi <= 0.0 {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    } else {
        1.0 - std_normal_cdf(lo) - std_normal_sf(hi)
    }
}

/// Untruncated mass of the unit-width bin centred on `v`.
pub fn discretized_gaussian_mass(mu: f64, sigma: f64, v: i64) -> f64 {
    if sigma == 0.0 {
        return if mu.round() as i64 == v { 1.0 } else { 0.0 };
    }
    let v = v as f64;
    interval_mass((v - 0.5 - mu) / sigma, (v + 0.5 - mu) / sigma)
}

fn point_mass_location(mu: f64, support_max: u32) -> u32 {
    mu.round().clamp(0.0, support_max as f64) as u32
}

/// Mass at `v` of the discretized Gaussian truncated to `{0..=support_max}` and renormalized.
///
/// `sigma == 0` is a point mass at `mu` rounded to the nearest integer.
pub fn discretized_gaussian_pmf(mu: f64, sigma: f64, v: u32, support_max: u32) -> Result<f64> {
    if v > support_max {
        return Err(Error::InvalidArgument(format!(
            "value {v} outside support {{0..{support_max}}}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be >= 0")));
    }
    Ok(pmf_unchecked(mu, sigma, v, support_max))
}

pub(crate) fn pmf_unchecked(mu: f64, sigma: f64, v: u32, support_max: u32) -> f64 {
    if sigma > 0.0 {
        let z = interval_mass(
            (-0.5 - mu) / sigma,
            (support_max as f64 + 0.5 - mu) / sigma,
        );
        if z > 0.0 {
            return discretized_gaussian_mass(mu, sigma, v as i64) / z;
        }
    }
    // sigma == 0, or a normalizer that underflowed: collapse to the nearest valid count.
    if point_mass_location(mu, support_max) == v {
        1.0
    } else {
        0.0
    }
}

/// Full truncated pmf over `{0..=support_max}`.
pub fn discretized_gaussian_table(mu: f64, sigma: f64, support_max: u32) -> Vec<f64> {
    (0..=support_max)
        .map(|v| pmf_unchecked(mu, sigma, v, support_max))
        .collect()
}

/// Beyond 40 standard deviations every bin mass underflows to zero.
const WINDOW_SIGMAS: f64 = 40.0;

fn sample_coordinate<R: Rng + ?Sized>(mu: f64, sigma: f64, support_max: u32, rng: &mut R) -> u32 {
    let point = point_mass_location(mu, support_max);
    if sigma == 0.0 {
        return point;
    }
    let lo = (mu - WINDOW_SIGMAS * sigma).floor().max(0.0) as u32;
    let hi = ((mu + WINDOW_SIGMAS * sigma).ceil().min(support_max as f64)) as u32;
    let masses: Vec<f64> = (lo..=hi)
        .map(|v| discretized_gaussian_mass(mu, sigma, v as i64))
        .collect();
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return point;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, m) in masses.iter().enumerate() {
        acc += m;
        if u < acc {
            return lo + k as u32;
        }
    }
    // u landed in the rounding gap at the top; take the last bin with mass.
    let last = masses.iter().rposition(|&m| m > 0.0).unwrap_or(0);
    lo + last as u32
}

/// Independent per-coordinate draws from the truncated discretized Gaussian.
pub fn sample_discretized_gaussian<R: Rng + ?Sized>(
    params: &GaussianParams,
    support_max: u32,
    rng: &mut R,
) -> Vec<u32> {
    params
        .mu
        .iter()
        .zip(&params.sigma)
        .map(|(&mu, &sigma)| sample_coordinate(mu, sigma, support_max, rng))
        .collect()
}

/// `M` uniform category draws tallied into a count vector.
pub fn sample_multinomial_noise<R: Rng + ?Sized>(
    codebook_size: usize,
    total: u32,
    rng: &mut R,
) -> Result<CountVector> {
    if codebook_size == 0 {
        return Err(Error::InvalidArgument("C must be >= 1".into()));
    }
    let mut counts = vec![0u32; codebook_size];
    for _ in 0..total {
        counts[rng.random_range(0..codebook_size)] += 1;
    }
    CountVector::new(counts, total)
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Slack when comparing the running nucleus mass against `p`.
const NUCLEUS_SLACK: f64 = 1e-12;

/// The nucleus of `probs`: outcomes in descending probability (ties to the lower index)
/// up to the first prefix whose mass reaches `p`, renormalized.
pub fn nucleus(probs: &[f64], p: f64) -> Result<Vec<(usize, f64)>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("top-p must lie in (0, 1], got {p}")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for j in order {
        kept.push((j, probs[j]));
        mass += probs[j];
        if mass >= p - NUCLEUS_SLACK {
            break;
        }
    }
    Ok(kept.into_iter().map(|(j, q)| (j, q / mass)).collect())
}

/// Top-p (nucleus) sampling from unnormalized log-scores.
pub fn top_p_sample<R: Rng + ?Sized>(scores: &[f64], p: f64, rng: &mut R) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty score vector".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s}")));
    }
    let kept = nucleus(&softmax(scores), p)?;
    Ok(sample_weighted(&kept, rng))
}

fn sample_weighted<R: Rng + ?Sized>(kept: &[(usize, f64)], rng: &mut R) -> usize {
    if kept.len() == 1 {
        return kept[0].0;
    }
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for &(j, q) in kept {
        acc += q;
        if u < acc {
            return j;
        }
    }
    kept[kept.len() - 1].0
}
