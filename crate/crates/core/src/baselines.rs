//! The unconstrained ablation: the same reverse loop and denoiser interface with every
//! greedy repair switched off, so sums drift away from `M`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::Denoiser;
use crate::sampler::{run_chains, SampleConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineKind {
    DiscreteNoFixedSum,
    #[default]
    Fsdd,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::DiscreteNoFixedSum => "discrete_no_fixed_sum",
            BaselineKind::Fsdd => "fsdd",
        }
    }

    /// Whether sampling (and training) applies greedy repair.
    pub fn fixed_sum(self) -> bool {
        matches!(self, BaselineKind::Fsdd)
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fsdd" => Ok(BaselineKind::Fsdd),
            "discrete_no_fixed_sum" => Ok(BaselineKind::DiscreteNoFixedSum),
            other => Err(Error::InvalidArgument(format!(
                "unknown kind `{other}` (expected fsdd or discrete_no_fixed_sum)"
            ))),
        }
    }
}

/// One raw sample; for [`BaselineKind::Fsdd`] identical to `sampler::generate`.
pub fn generate_baseline<S: Scalar>(model: &Denoiser<S>, config: &SampleConfig, kind: BaselineKind) -> Result<Vec<u32>> {
    Ok(generate_baseline_batch(model, config, kind, 1)?.remove(0))
}

/// `n` raw samples, chain `i` seeded as in `sampler::generate_batch`.
pub fn generate_baseline_batch<S: Scalar>(
    model: &Denoiser<S>,
    config: &SampleConfig,
    kind: BaselineKind,
    n: usize,
) -> Result<Vec<Vec<u32>>> {
    Ok(run_chains(model, config, 0, n, kind.fixed_sum())?
        .into_iter()
        .map(|ch| ch.sample().to_vec())
        .collect())
}
