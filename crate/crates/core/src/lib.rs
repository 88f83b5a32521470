//! Fixed-sum discrete diffusion over token multisets.
//!
//! A multiset of `M` codebook indices (codebook size `C`) is represented by its
//! length-`C` count vector, which always sums to `M`. The diffusion process in this
//! crate corrupts and denoises such vectors while keeping every intermediate state
//! on the fixed-sum set:
//!
//! * [`codec`]: multiset <-> count-vector transformation and text formats
//! * [`kernels`]: discretized Gaussians, multinomial noise, nucleus sampling, RNG streams
//! * [`forward`]: constrained forward corruption and greedy sum repair
//! * [`net`] / [`autodiff`]: the denoiser and the reverse-mode machinery that trains it
//! * [`trainer`], [`sampler`], [`baselines`]: training loop, reverse process, ablation
//! * [`data`], [`eval`]: synthetic ground truth and distribution metrics
//!
//! Network code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! common choices.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod forward;
pub mod kernels;
pub mod net;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use codec::{counts_to_set, set_to_counts, CountVector, TokenMultiset};
pub use error::{Error, Result};
pub use kernels::{GaussianParams, RngStream};
pub use scalar::Scalar;

pub type Denoiser64 = net::Denoiser<f64>;
pub type Denoiser32 = net::Denoiser<f32>;
pub type ParameterStore64 = net::ParameterStore<f64>;
pub type ParameterStore32 = net::ParameterStore<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
