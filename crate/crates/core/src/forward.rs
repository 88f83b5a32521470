//! Constrained forward corruption and the greedy sum-repair step.
//!
//! A noisy state is drawn coordinate-wise from a discretized Gaussian whose mean
//! interpolates between data `x0` and noise `x1`. Its sum only matches `M` in
//! expectation, so [`greedy_adjust`] moves single units at the coordinates where the
//! likelihood suffers least until the sum is exact.

use std::cmp::Ordering;

use rand::Rng;

use crate::codec::CountVector;
use crate::error::{Error, Result};
use crate::kernels::{pmf_unchecked, sample_discretized_gaussian, GaussianParams};

/// A forward sample after sum repair.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x_t: CountVector,
    pub t: f64,
    pub params: GaussianParams,
    /// Sum of the draw before repair.
    pub raw_sum: u64,
}

/// Per-coordinate likelihood used to rank unit adjustments.
pub trait CoordinateLikelihood {
    fn len(&self) -> usize;

    /// Probability that coordinate `j` takes value `v`, for `v` in `0..=M`.
    fn mass(&self, j: usize, v: u32) -> f64;
}

/// Truncated discretized Gaussian over `{0..=support_max}`, one per coordinate.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedGaussian<'a> {
    pub params: &'a GaussianParams,
    pub support_max: u32,
}

impl CoordinateLikelihood for TruncatedGaussian<'_> {
    fn len(&self) -> usize {
        self.params.len()
    }

    fn mass(&self, j: usize, v: u32) -> f64 {
        pmf_unchecked(self.params.mu[j], self.params.sigma[j], v, self.support_max)
    }
}

/// Row-major `C x (M+1)` table of per-coordinate categorical probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalTable {
    pub probs: Vec<f64>,
    pub width: usize,
}

impl CoordinateLikelihood for CategoricalTable {
    fn len(&self) -> usize {
        self.probs.len() / self.width
    }

    fn mass(&self, j: usize, v: u32) -> f64 {
        self.probs[j * self.width + v as usize]
    }
}

/// How the gain of a unit adjustment at one coordinate is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainRule {
    /// `ln q(x_j - s) - ln q(x_j)`; ranking by it maximizes the product likelihood.
    #[default]
    LogRatio,
    /// `q(x_j - s) - q(x_j)`, the raw probability difference.
    Difference,
}

#[derive(Debug, Clone, Copy)]
struct Gain {
    /// Zero-probability factors removed (positive) or introduced (negative).
    zeros_removed: i32,
    value: f64,
}

impl Gain {
    fn score(rule: GainRule, before: f64, after: f64) -> Gain {
        match rule {
            GainRule::Difference => Gain {
                zeros_removed: 0,
                value: after - before,
            },
            GainRule::LogRatio => {
                let ln = |p: f64| if p > 0.0 { p.ln() } else { 0.0 };
                Gain {
                    zeros_removed: (before <= 0.0) as i32 - (after <= 0.0) as i32,
                    value: ln(after) - ln(before),
                }
            }
        }
    }

    fn cmp_desc(&self, other: &Gain) -> Ordering {
        other
            .zeros_removed
            .cmp(&self.zeros_removed)
            .then_with(|| other.value.total_cmp(&self.value))
    }
}

/// `mu = t x1 + (1 - t) x0`, `sigma = |x1 - x0| / 4`.
pub fn forward_params(x0: &CountVector, x1: &CountVector, t: f64) -> Result<GaussianParams> {
    check_pair(x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    let (mu, sigma) = x0
        .counts()
        .iter()
        .zip(x1.counts())
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            (t * b + (1.0 - t) * a, (b - a).abs() / 4.0)
        })
        .unzip();
    Ok(GaussianParams { mu, sigma })
}

fn check_pair(x0: &CountVector, x1: &CountVector) -> Result<()> {
    if x0.codebook_size() != x1.codebook_size() || x0.total() != x1.total() {
        return Err(Error::Shape(format!(
            "x0 has (C, M) = ({}, {}), x1 has ({}, {})",
            x0.codebook_size(),
            x0.total(),
            x1.codebook_size(),
            x1.total()
        )));
    }
    Ok(())
}

/// Repairs `x_tilde` to sum `M` under the truncated Gaussian `params`, using the default gain rule.
pub fn greedy_adjust(x_tilde: &[u32], params: &GaussianParams, total: u32) -> Result<CountVector> {
    if params.len() != x_tilde.len() {
        return Err(Error::Shape(format!(
            "sample has {} coordinates, params have {}",
            x_tilde.len(),
            params.len()
        )));
    }
    let lik = TruncatedGaussian {
        params,
        support_max: total,
    };
    greedy_adjust_with(x_tilde, &lik, total, GainRule::default())
}

/// Greedy sum repair against an arbitrary per-coordinate likelihood.
///
/// Each round computes `delta = sum - M`, scores a unit move of `-sign(delta)` at every
/// coordinate that stays inside `[0, M]`, and applies it at the `|delta|` best distinct
/// coordinates (ties to the lower index). Rounds repeat until `delta == 0`.
pub fn greedy_adjust_with<L: CoordinateLikelihood + ?Sized>(
    x_tilde: &[u32],
    likelihood: &L,
    total: u32,
    rule: GainRule,
) -> Result<CountVector> {
    if likelihood.len() != x_tilde.len() {
        return Err(Error::Shape(format!(
            "sample has {} coordinates, likelihood has {}",
            x_tilde.len(),
            likelihood.len()
        )));
    }
    if let Some(&v) = x_tilde.iter().find(|&&v| v > total) {
        return Err(Error::Constraint(format!("entry {v} exceeds M = {total}")));
    }
    let mut x = x_tilde.to_vec();
    let mut sum: i64 = x.iter().map(|&v| v as i64).sum();
    let mut candidates: Vec<(usize, Gain)> = Vec::with_capacity(x.len());
    loop {
        let delta = sum - total as i64;
        if delta == 0 {
            break;
        }
        let decrement = delta > 0;
        candidates.clear();
        for (j, &v) in x.iter().enumerate() {
            let moved = if decrement {
                if v == 0 {
                    continue;
                }
                v - 1
            } else {
                if v == total {
                    continue;
                }
                v + 1
            };
            let gain = Gain::score(rule, likelihood.mass(j, v), likelihood.mass(j, moved));
            candidates.push((j, gain));
        }
        if candidates.is_empty() {
            return Err(Error::Constraint(format!(
                "no adjustable coordinate while delta = {delta}"
            )));
        }
        candidates.sort_by(|a, b| a.1.cmp_desc(&b.1).then(a.0.cmp(&b.0)));
        let k = (delta.unsigned_abs() as usize).min(candidates.len());
        for &(j, _) in &candidates[..k] {
            if decrement {
                x[j] -= 1;
            } else {
                x[j] += 1;
            }
        }
        sum += if decrement { -(k as i64) } else { k as i64 };
    }
    CountVector::new(x, total)
}

/// Draws the unrepaired state; its sum equals `M` only in expectation.
pub fn sample_forward_raw<R: Rng + ?Sized>(
    x0: &CountVector,
    x1: &CountVector,
    t: f64,
    rng: &mut R,
) -> Result<(GaussianParams, Vec<u32>)> {
    let params = forward_params(x0, x1, t)?;
    let raw = sample_discretized_gaussian(&params, x0.total(), rng);
    Ok((params, raw))
}

/// Forward corruption followed by greedy repair; the result sums to `M` exactly.
pub fn sample_forward<R: Rng + ?Sized>(
    x0: &CountVector,
    x1: &CountVector,
    t: f64,
    rng: &mut R,
) -> Result<NoisySample> {
    let (params, raw) = sample_forward_raw(x0, x1, t, rng)?;
    let raw_sum = raw.iter().map(|&v| v as u64).sum();
    let x_t = greedy_adjust(&raw, &params, x0.total())?;
    Ok(NoisySample {
        x_t,
        t,
        params,
        raw_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{discretized_gaussian_pmf, RngStream};

    fn cv(v: &[u32], m: u32) -> CountVector {
        CountVector::new(v.to_vec(), m).unwrap()
    }

    #[test]
    fn params_midpoint() {
        let p = forward_params(&cv(&[4, 0], 4), &cv(&[0, 4], 4), 0.5).unwrap();
        assert_eq!(p.mu, vec![2.0, 2.0]);
        assert_eq!(p.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn params_endpoints_and_degenerate_path() {
        let x0 = cv(&[3, 1, 0], 4);
        let x1 = cv(&[0, 2, 2], 4);
        assert_eq!(forward_params(&x0, &x1, 0.0).unwrap().mu, vec![3.0, 1.0, 0.0]);
        for &t in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let p = forward_params(&x0, &x0, t).unwrap();
            assert_eq!(p.mu, vec![3.0, 1.0, 0.0]);
            assert!(p.sigma.iter().all(|&s| s == 0.0));
            let q = forward_params(&x0, &x1, t).unwrap();
            for j in 0..3 {
                let expect = t * x1[j] as f64 + (1.0 - t) * x0[j] as f64;
                assert!((q.mu[j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn params_reject_mismatch() {
        assert!(forward_params(&cv(&[1, 1], 2), &cv(&[1, 1, 0], 2), 0.5).is_err());
        assert!(forward_params(&cv(&[1, 1], 2), &cv(&[1, 2], 3), 0.5).is_err());
        assert!(forward_params(&cv(&[1, 1], 2), &cv(&[0, 2], 2), 1.5).is_err());
    }

    #[test]
    fn already_valid_is_unchanged() {
        let params = GaussianParams::new(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(greedy_adjust(&[1, 2], &params, 3).unwrap().counts(), &[1, 2]);
    }

    #[test]
    fn single_decrement_is_the_better_of_two() {
        let params = GaussianParams::new(vec![2.4, 0.6], vec![1.0, 1.0]).unwrap();
        let x = greedy_adjust(&[3, 1], &params, 3).unwrap();
        let lik = |v: &[u32]| -> f64 {
            v.iter()
                .enumerate()
                .map(|(j, &x)| discretized_gaussian_pmf(params.mu[j], params.sigma[j], x, 3).unwrap())
                .product()
        };
        let a = lik(&[2, 1]);
        let b = lik(&[3, 0]);
        let best: &[u32] = if a >= b { &[2, 1] } else { &[3, 0] };
        assert_eq!(x.counts(), best);
    }

    #[test]
    fn difference_rule_follows_probability_gaps() {
        // Coordinate 0: 0.5 -> 0.4 (diff -0.1, ratio 0.8); coordinate 1: 0.01 -> 0.001
        // (diff -0.009, ratio 0.1). The two rules disagree.
        let table = CategoricalTable {
            probs: vec![0.0, 0.4, 0.5, 0.1, 0.0, 0.001, 0.01, 0.989],
            width: 4,
        };
        let x = [2, 2];
        let by_diff = greedy_adjust_with(&x, &table, 3, GainRule::Difference).unwrap();
        assert_eq!(by_diff.counts(), &[2, 1]);
        let by_ratio = greedy_adjust_with(&x, &table, 3, GainRule::LogRatio).unwrap();
        assert_eq!(by_ratio.counts(), &[1, 2]);
    }

    #[test]
    fn boundaries_are_excluded_and_rounds_repeat() {
        // Sum 0 with M = 5 across 2 coordinates needs several increment rounds.
        let params = GaussianParams::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let x = greedy_adjust(&[0, 0], &params, 5).unwrap();
        assert_eq!(x.counts().iter().sum::<u32>(), 5);
        // Decrement cannot touch zero entries.
        let params = GaussianParams::new(vec![0.0, 3.0, 3.0], vec![1.0, 1.0, 1.0]).unwrap();
        let x = greedy_adjust(&[0, 3, 3], &params, 3).unwrap();
        assert_eq!(x[0], 0);
        assert_eq!(x.counts().iter().sum::<u32>(), 3);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let params = GaussianParams::new(vec![1.0; 4], vec![1.0; 4]).unwrap();
        let x = greedy_adjust(&[2, 2, 2, 2], &params, 6).unwrap();
        assert_eq!(x.counts(), &[1, 1, 2, 2]);
    }

    #[test]
    fn rejects_out_of_range_entries() {
        let params = GaussianParams::new(vec![1.0; 2], vec![1.0; 2]).unwrap();
        assert!(greedy_adjust(&[4, 0], &params, 3).is_err());
        assert!(greedy_adjust(&[1, 0, 0], &params, 3).is_err());
    }

    #[test]
    fn identity_path_is_fixed() {
        let x0 = cv(&[5, 0, 2, 1], 8);
        let mut rng = RngStream::new(3, 0);
        for &t in &[0.0, 0.3, 1.0] {
            let s = sample_forward(&x0, &x0, t, &mut rng).unwrap();
            assert_eq!(s.x_t, x0);
        }
    }

    #[test]
    fn forward_samples_sum_exactly() {
        let mut rng = RngStream::new(11, 0);
        for i in 0..2000 {
            let x0 = crate::kernels::sample_multinomial_noise(6, 10, &mut rng).unwrap();
            let x1 = crate::kernels::sample_multinomial_noise(6, 10, &mut rng).unwrap();
            let t = (i as f64 / 2000.0).min(1.0);
            let s = sample_forward(&x0, &x1, t, &mut rng).unwrap();
            assert_eq!(s.x_t.counts().iter().sum::<u32>(), 10);
        }
    }
}
