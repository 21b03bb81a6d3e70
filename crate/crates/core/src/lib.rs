//! Likelihood-free Bayesian inference for directed graphical models.
//!
//! The engine trains per-factor adversarial discriminators to minimize local
//! divergences over a generative DAG and its derived inverse factorization,
//! alongside explicit-likelihood (ELBO) and global-adversary baselines, with
//! closed-form and brute-force oracles for verification.

pub mod adversary;
pub mod checkpoint;
pub mod data;
pub mod densities;
pub mod error;
pub mod graph;
pub mod model;
pub mod modelspec;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

/// Scalar type of the modeling layers. The numeric core is generic; everything
/// above it runs in double precision.
pub type Real = f64;

/// Concrete aliases over [`Real`].
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tape::Tape<Real>;
pub type Mlp = nn::Mlp<Real>;
pub type AdamState = optim::AdamState<Real>;

/// Deterministic RNG used everywhere; its state round-trips in checkpoints.
pub type Rng = rand_chacha::ChaCha8Rng;

pub use error::{DensityError, GraphError, TensorError, TrainError};
