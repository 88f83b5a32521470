//! Synthetic fixed-sum distributions with exactly known probabilities, and loading
//! of externally produced token files.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::codec::{read_token_file, set_to_counts, CountVector, Header, TokenMultiset};
use crate::error::{Error, Result};
use crate::eval::enumerate_count_vectors;
use crate::kernels::{sample_multinomial_noise, RngStream};

/// One training / evaluation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub x: CountVector,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticKind {
    /// Mixture of two anchors; `weight` is the probability of the first.
    TwoPoint {
        anchors: Option<[CountVector; 2]>,
        weight: f64,
    },
    /// Symmetric Dirichlet(alpha) category probabilities, then `M` multinomial trials.
    DirichletMultinomial { alpha: f64 },
    /// A distinct anchor pair per class; classes are drawn uniformly.
    ClassConditionalTwoPoint {
        num_classes: usize,
        anchors: Option<Vec<[CountVector; 2]>>,
        weight: f64,
    },
}

impl SyntheticKind {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::TwoPoint { .. } => "two_point",
            SyntheticKind::DirichletMultinomial { .. } => "dirichlet_multinomial",
            SyntheticKind::ClassConditionalTwoPoint { .. } => "class_conditional_two_point",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub codebook_size: usize,
    pub total: u32,
    pub seed: u64,
}

const ANCHOR_STREAM: u64 = 0xa4c0;
const DATA_STREAM: u64 = 0xda7a;

/// Exact distribution over count vectors, as `(vector, probability)` pairs.
pub type ReferencePmf = Vec<(Vec<u32>, f64)>;

impl SyntheticSpec {
    pub fn two_point(codebook_size: usize, total: u32, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::TwoPoint {
                anchors: None,
                weight: 0.5,
            },
            codebook_size,
            total,
            seed,
        }
    }

    pub fn header(&self) -> Header {
        Header {
            codebook_size: self.codebook_size,
            total: self.total,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.kind {
            SyntheticKind::ClassConditionalTwoPoint { num_classes, .. } => *num_classes,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 {
            return Err(Error::InvalidArgument("C must be positive".into()));
        }
        let check_weight = |w: f64| {
            if (0.0..=1.0).contains(&w) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("mixture weight {w} outside [0, 1]")))
            }
        };
        let check_anchor = |a: &CountVector| {
            if a.codebook_size() != self.codebook_size || a.total() != self.total {
                Err(Error::InvalidArgument(format!(
                    "anchor {:?} does not match (C, M) = ({}, {})",
                    a.counts(),
                    self.codebook_size,
                    self.total
                )))
            } else {
                Ok(())
            }
        };
        match &self.kind {
            SyntheticKind::TwoPoint { anchors, weight } => {
                check_weight(*weight)?;
                if let Some(pair) = anchors {
                    pair.iter().try_for_each(check_anchor)?;
                }
            }
            SyntheticKind::DirichletMultinomial { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidArgument(format!("alpha {alpha} must be > 0")));
                }
            }
            SyntheticKind::ClassConditionalTwoPoint {
                num_classes,
                anchors,
                weight,
            } => {
                check_weight(*weight)?;
                if *num_classes == 0 {
                    return Err(Error::InvalidArgument("num_classes must be positive".into()));
                }
                if let Some(pairs) = anchors {
                    if pairs.len() != *num_classes {
                        return Err(Error::InvalidArgument(format!(
                            "{} anchor pairs for {num_classes} classes",
                            pairs.len()
                        )));
                    }
                    pairs.iter().flatten().try_for_each(check_anchor)?;
                }
            }
        }
        Ok(())
    }

    /// Anchor pairs (one per class, or a single pair), drawn from the seed when not given.
    ///
    /// Seed-drawn anchors are multinomial noise vectors, redrawn until all are distinct.
    pub fn anchors(&self) -> Result<Vec<[CountVector; 2]>> {
        self.validate()?;
        let pairs = match &self.kind {
            SyntheticKind::TwoPoint { anchors, .. } => anchors.clone().map(|p| vec![p]),
            SyntheticKind::ClassConditionalTwoPoint { anchors, .. } => anchors.clone(),
            SyntheticKind::DirichletMultinomial { .. } => return Ok(Vec::new()),
        };
        if let Some(p) = pairs {
            return Ok(p);
        }
        let wanted = 2 * self.num_classes().max(1);
        let distinct = crate::eval::count_vector_space_size(self.codebook_size, self.total);
        if distinct.is_some_and(|n| n < wanted as u128) {
            return Err(Error::InvalidArgument(format!(
                "C = {}, M = {} admit fewer than {wanted} distinct anchors",
                self.codebook_size, self.total
            )));
        }
        let mut rng = RngStream::new(self.seed, ANCHOR_STREAM);
        let mut drawn: Vec<CountVector> = Vec::with_capacity(wanted);
        while drawn.len() < wanted {
            let x = sample_multinomial_noise(self.codebook_size, self.total, &mut rng)?;
            if !drawn.contains(&x) {
                drawn.push(x);
            }
        }
        Ok(drawn
            .chunks(2)
            .map(|c| [c[0].clone(), c[1].clone()])
            .collect())
    }

    /// Exact ground-truth pmf; `class` restricts a class-conditional spec to one class.
    pub fn reference_pmf(&self, class: Option<usize>) -> Result<ReferencePmf> {
        let mut out: ReferencePmf = match &self.kind {
            SyntheticKind::TwoPoint { weight, .. } => {
                let pair = &self.anchors()?[0];
                vec![
                    (pair[0].counts().to_vec(), *weight),
                    (pair[1].counts().to_vec(), 1.0 - weight),
                ]
            }
            SyntheticKind::ClassConditionalTwoPoint {
                num_classes, weight, ..
            } => {
                let pairs = self.anchors()?;
                let classes: Vec<usize> = match class {
                    Some(k) if k < *num_classes => vec![k],
                    Some(k) => {
                        return Err(Error::InvalidArgument(format!(
                            "class {k} out of range for {num_classes} classes"
                        )))
                    }
                    None => (0..*num_classes).collect(),
                };
                let share = 1.0 / classes.len() as f64;
                classes
                    .iter()
                    .flat_map(|&k| {
                        [
                            (pairs[k][0].counts().to_vec(), share * weight),
                            (pairs[k][1].counts().to_vec(), share * (1.0 - weight)),
                        ]
                    })
                    .collect()
            }
            SyntheticKind::DirichletMultinomial { alpha } => {
                let all = enumerate_count_vectors(self.codebook_size, self.total)?;
                all.into_iter()
                    .map(|x| {
                        let p = dirichlet_multinomial_pmf(x.counts(), *alpha);
                        (x.into_counts(), p)
                    })
                    .collect()
            }
        };
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        out.retain(|(_, p)| *p > 0.0);
        Ok(out)
    }
}

/// Dirichlet-multinomial mass with symmetric concentration `alpha`.
pub fn dirichlet_multinomial_pmf(counts: &[u32], alpha: f64) -> f64 {
    let m: u32 = counts.iter().sum();
    let c = counts.len() as f64;
    let ln_gamma = |x: f64| libm::lgamma(x);
    let mut ln_p = ln_gamma(m as f64 + 1.0) + ln_gamma(c * alpha) - ln_gamma(m as f64 + c * alpha);
    for &x in counts {
        ln_p += ln_gamma(x as f64 + alpha) - ln_gamma(alpha) - ln_gamma(x as f64 + 1.0);
    }
    ln_p.exp()
}

fn sample_dirichlet_multinomial<R: Rng + ?Sized>(
    c: usize,
    m: u32,
    alpha: f64,
    rng: &mut R,
) -> Result<CountVector> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let weights: Vec<f64> = (0..c).map(|_| gamma.sample(rng)).collect();
    let z: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(c);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / z;
        cdf.push(acc);
    }
    let mut counts = vec![0u32; c];
    for _ in 0..m {
        let u = rng.random::<f64>() * acc;
        let j = cdf.partition_point(|&v| v <= u).min(c - 1);
        counts[j] += 1;
    }
    CountVector::new(counts, m)
}

/// `n` i.i.d. draws from the spec.
pub fn sample_dataset(spec: &SyntheticSpec, n: usize) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    spec.validate()?;
    let anchors = spec.anchors()?;
    let mut rng = RngStream::new(spec.seed, DATA_STREAM);
    (0..n)
        .map(|_| match &spec.kind {
            SyntheticKind::TwoPoint { weight, .. } => {
                let first = rng.random::<f64>() < *weight;
                Ok(Example {
                    x: anchors[0][if first { 0 } else { 1 }].clone(),
                    label: None,
                })
            }
            SyntheticKind::ClassConditionalTwoPoint {
                num_classes, weight, ..
            } => {
                let k = rng.random_range(0..*num_classes);
                let first = rng.random::<f64>() < *weight;
                Ok(Example {
                    x: anchors[k][if first { 0 } else { 1 }].clone(),
                    label: Some(k),
                })
            }
            SyntheticKind::DirichletMultinomial { alpha } => Ok(Example {
                x: sample_dirichlet_multinomial(spec.codebook_size, spec.total, *alpha, &mut rng)?,
                label: None,
            }),
        })
        .collect()
}

/// A multiset parsed from a token file, with its 1-based source line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub line: usize,
    pub set: TokenMultiset,
}

/// Loads a token-set file; every rejection names the offending line.
pub fn load_token_file(path: &Path) -> Result<(Header, Vec<TokenRecord>)> {
    let (header, sets) = read_token_file(path)?;
    Ok((
        header,
        sets.into_iter()
            .map(|(line, set)| TokenRecord { line, set })
            .collect(),
    ))
}

/// Token records converted to unlabeled training examples.
pub fn token_records_to_examples(header: Header, records: &[TokenRecord]) -> Vec<Example> {
    records
        .iter()
        .map(|r| {
            let x = set_to_counts(&r.set);
            debug_assert_eq!(x.total(), header.total);
            Example { x, label: None }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_samples_are_anchors() {
        let spec = SyntheticSpec::two_point(8, 16, 7);
        let pair = spec.anchors().unwrap();
        assert_ne!(pair[0][0], pair[0][1]);
        let data = sample_dataset(&spec, 10_000).unwrap();
        let first = data.iter().filter(|e| e.x == pair[0][0]).count();
        let second = data.iter().filter(|e| e.x == pair[0][1]).count();
        assert_eq!(first + second, 10_000);
        // Binomial(1e4, 0.5) has sd 50; [4500, 5500] is a 10-sigma band.
        assert!((4500..=5500).contains(&first), "{first}");
    }

    #[test]
    fn explicit_anchors_are_validated() {
        let a = CountVector::new(vec![2, 0], 2).unwrap();
        let b = CountVector::new(vec![1, 1, 0], 2).unwrap();
        let spec = SyntheticSpec {
            kind: SyntheticKind::TwoPoint {
                anchors: Some([a, b]),
                weight: 0.5,
            },
            codebook_size: 2,
            total: 2,
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut spec = SyntheticSpec::two_point(4, 4, 0);
        spec.kind = SyntheticKind::DirichletMultinomial { alpha: 0.0 };
        assert!(sample_dataset(&spec, 3).is_err());
        spec.kind = SyntheticKind::TwoPoint {
            anchors: None,
            weight: 1.5,
        };
        assert!(sample_dataset(&spec, 3).is_err());
        assert!(sample_dataset(&SyntheticSpec::two_point(4, 4, 0), 0).is_err());
        // C = 1 has a single valid vector, so two anchors cannot be distinct.
        assert!(SyntheticSpec::two_point(1, 4, 0).anchors().is_err());
    }

    #[test]
    fn dirichlet_multinomial_pmf_sums_to_one() {
        let all = enumerate_count_vectors(3, 4).unwrap();
        for alpha in [0.3, 1.0, 5.0] {
            let total: f64 = all.iter().map(|x| dirichlet_multinomial_pmf(x.counts(), alpha)).sum();
            assert!((total - 1.0).abs() < 1e-12, "alpha {alpha}: {total}");
        }
        // alpha = 1 is uniform over the 15 compositions.
        let p = dirichlet_multinomial_pmf(&[4, 0, 0], 1.0);
        assert!((p - 1.0 / 15.0).abs() < 1e-13);
    }

    #[test]
    fn class_conditional_labels_and_anchors() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::ClassConditionalTwoPoint {
                num_classes: 3,
                anchors: None,
                weight: 0.5,
            },
            codebook_size: 6,
            total: 8,
            seed: 2,
        };
        let pairs = spec.anchors().unwrap();
        assert_eq!(pairs.len(), 3);
        let data = sample_dataset(&spec, 600).unwrap();
        for e in &data {
            let k = e.label.unwrap();
            assert!(pairs[k].contains(&e.x));
        }
        let pmf = spec.reference_pmf(None).unwrap();
        assert_eq!(pmf.len(), 6);
        assert!((pmf.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(spec.reference_pmf(Some(1)).unwrap().len(), 2);
        assert!(spec.reference_pmf(Some(3)).is_err());
    }
}
