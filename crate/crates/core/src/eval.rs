//! Distribution distances, constraint-violation accounting and exhaustive enumeration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::codec::CountVector;
use crate::error::{Error, Result};

/// Upper bound on the size of an enumerated count-vector space.
pub const MAX_ENUMERATION: u128 = 1_000_000;

/// `binomial(M + C - 1, C - 1)`, or `None` on overflow.
pub fn count_vector_space_size(c: usize, m: u32) -> Option<u128> {
    if c == 0 {
        return Some(0);
    }
    let n = m as u128 + c as u128 - 1;
    let k = (c as u128 - 1).min(m as u128);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// Every length-`C` vector of non-negative integers summing to `M`, in descending
/// lexicographic order (`[M, 0, ..]` first).
pub fn enumerate_count_vectors(c: usize, m: u32) -> Result<Vec<CountVector>> {
    if c == 0 {
        return Err(Error::InvalidArgument("C must be >= 1".into()));
    }
    match count_vector_space_size(c, m) {
        Some(n) if n <= MAX_ENUMERATION => {}
        _ => {
            return Err(Error::InvalidArgument(format!(
                "binomial(M + C - 1, C - 1) for C = {c}, M = {m} exceeds {MAX_ENUMERATION}"
            )))
        }
    }
    let mut out = Vec::new();
    let mut current = vec![0u32; c];
    fill(&mut current, 0, m, &mut out);
    Ok(out)
}

fn fill(current: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<CountVector>) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        let total = current.iter().sum();
        out.push(CountVector::new(current.to_vec(), total).expect("composition is valid"));
        return;
    }
    for v in (0..=remaining).rev() {
        current[pos] = v;
        fill(current, pos + 1, remaining - v, out);
    }
    current[pos] = 0;
}

/// Empirical frequencies of integer vectors.
pub fn empirical(samples: &[Vec<u32>]) -> BTreeMap<&[u32], f64> {
    let mut counts: BTreeMap<&[u32], f64> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.as_slice()).or_default() += 1.0;
    }
    let n = samples.len() as f64;
    for v in counts.values_mut() {
        *v /= n;
    }
    counts
}

/// `(1/2) sum_x |p_hat(x) - p(x)|` over the union of supports.
pub fn tv_distance(samples: &[Vec<u32>], reference: &[(Vec<u32>, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut diff: BTreeMap<&[u32], f64> = empirical(samples);
    for (x, p) in reference {
        *diff.entry(x.as_slice()).or_default() -= p;
    }
    Ok((0.5 * diff.values().map(|d| d.abs()).sum::<f64>()).min(1.0))
}

/// Total variation between two empirical sample sets.
pub fn tv_between(a: &[Vec<u32>], b: &[Vec<u32>]) -> Result<f64> {
    if b.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let reference: Vec<(Vec<u32>, f64)> = empirical(b).into_iter().map(|(k, v)| (k.to_vec(), v)).collect();
    tv_distance(a, &reference)
}

/// Pearson statistic `sum (O - E)^2 / E` over the reference atoms.
///
/// Infinite when any sample falls outside the reference support.
pub fn chi_square_stat(samples: &[Vec<u32>], reference: &[(Vec<u32>, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let n = samples.len() as f64;
    let mut observed: BTreeMap<&[u32], f64> = BTreeMap::new();
    for s in samples {
        *observed.entry(s.as_slice()).or_default() += 1.0;
    }
    let mut stat = 0.0;
    for (x, p) in reference {
        let e = n * p;
        let o = observed.remove(x.as_slice()).unwrap_or(0.0);
        if e > 0.0 {
            stat += (o - e) * (o - e) / e;
        } else if o > 0.0 {
            return Ok(f64::INFINITY);
        }
    }
    if observed.is_empty() {
        Ok(stat)
    } else {
        Ok(f64::INFINITY)
    }
}

/// Fraction of samples whose sum differs from `M`, and the mean `|sum - M|`.
pub fn sum_violation(samples: &[Vec<u32>], total: u32) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut violations = 0usize;
    let mut abs_err = 0.0;
    for s in samples {
        let sum: i64 = s.iter().map(|&v| v as i64).sum();
        let err = (sum - total as i64).abs();
        if err != 0 {
            violations += 1;
        }
        abs_err += err as f64;
    }
    let n = samples.len() as f64;
    (violations as f64 / n, abs_err / n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassBreakdown {
    pub class: usize,
    pub n_samples: usize,
    pub tv_distance: f64,
    pub sum_violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tv_distance: f64,
    pub chi_square_stat: f64,
    pub sum_violation_rate: f64,
    pub mean_abs_sum_error: f64,
    pub n_samples: usize,
    /// Share of samples that fall on a reference atom.
    pub support_hit_rate: f64,
    pub per_class: Vec<ClassBreakdown>,
}

impl EvalReport {
    /// Scores `samples` against a reference pmf; `labels` (one per sample) add a per-class view
    /// using `class_reference(k)`.
    pub fn compute(
        samples: &[Vec<u32>],
        total: u32,
        reference: &[(Vec<u32>, f64)],
        labels: Option<(&[usize], &dyn Fn(usize) -> Result<Vec<(Vec<u32>, f64)>>)>,
    ) -> Result<Self> {
        let (rate, mae) = sum_violation(samples, total);
        let support: std::collections::BTreeSet<&[u32]> =
            reference.iter().filter(|(_, p)| *p > 0.0).map(|(x, _)| x.as_slice()).collect();
        let hits = samples.iter().filter(|s| support.contains(s.as_slice())).count();
        let mut per_class = Vec::new();
        if let Some((labels, class_ref)) = labels {
            if labels.len() != samples.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    samples.len()
                )));
            }
            let mut classes: Vec<usize> = labels.to_vec();
            classes.sort_unstable();
            classes.dedup();
            for k in classes {
                let subset: Vec<Vec<u32>> = samples
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == k)
                    .map(|(s, _)| s.clone())
                    .collect();
                per_class.push(ClassBreakdown {
                    class: k,
                    n_samples: subset.len(),
                    tv_distance: tv_distance(&subset, &class_ref(k)?)?,
                    sum_violation_rate: sum_violation(&subset, total).0,
                });
            }
        }
        Ok(Self {
            tv_distance: tv_distance(samples, reference)?,
            chi_square_stat: chi_square_stat(samples, reference)?,
            sum_violation_rate: rate,
            mean_abs_sum_error: mae,
            n_samples: samples.len(),
            support_hit_rate: hits as f64 / samples.len() as f64,
            per_class,
        })
    }

    pub fn csv_header() -> &'static str {
        "n_samples,tv_distance,chi_square_stat,sum_violation_rate,mean_abs_sum_error,support_hit_rate"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n_samples,
            self.tv_distance,
            self.chi_square_stat,
            self.sum_violation_rate,
            self.mean_abs_sum_error,
            self.support_hit_rate
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "samples             {}", self.n_samples).unwrap();
        writeln!(s, "tv_distance         {:.6}", self.tv_distance).unwrap();
        writeln!(s, "chi_square_stat     {:.6}", self.chi_square_stat).unwrap();
        writeln!(s, "sum_violation_rate  {:.6}", self.sum_violation_rate).unwrap();
        writeln!(s, "mean_abs_sum_error  {:.6}", self.mean_abs_sum_error).unwrap();
        writeln!(s, "support_hit_rate    {:.6}", self.support_hit_rate).unwrap();
        for c in &self.per_class {
            writeln!(
                s,
                "class {:<3} n={:<6} tv={:.6} violations={:.6}",
                c.class, c.n_samples, c.tv_distance, c.sum_violation_rate
            )
            .unwrap();
        }
        s
    }
}
