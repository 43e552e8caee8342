//! Sparsely activated Gaussian-process layers built on the orthonormal
//! Laplace-kernel basis over a dyadic inducing grid.
//!
//! Every input scalar activates exactly `L + 2` of the `2^L + 1` basis
//! functions, so a variational layer costs `O(L)` per feature instead of
//! `O(2^L)`. Numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod data_io;
pub mod dyadic_grid;
pub mod error;
pub mod flops;
pub mod kernel_basis;
pub mod layer;
pub mod metrics;
pub mod scalar;
pub mod sparse_index;
pub mod vi;

pub use dyadic_grid::{build_grid, BasisIndex, DyadicGrid};
pub use error::{Result, SikaError};
pub use layer::{
    init_layer, LayerSpec, Likelihood, LikelihoodSpec, Mode, ModelSpec, Noise, Sampler, SikaModel, Squash,
    VariationalLayer,
};
pub use scalar::Scalar;
pub use vi::{PredictiveSummary, TrainConfig};

pub type Layer = VariationalLayer<f64>;
pub type Layer32 = VariationalLayer<f32>;
pub type Model = SikaModel<f64>;
pub type Model32 = SikaModel<f32>;
