//! Deterministic federated-learning simulator for performance-equitable
//! fairness methods.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] differentiable toy models (multinomial logistic regression, a
//!   one-hidden-layer MLP and convex quadratics) with analytic gradients and
//!   Hessian-vector products.
//! * [`data`] MNIST IDX ingestion, synthetic generators and Dirichlet
//!   non-IID partitioning.
//! * [`objectives`] the global risk `F`, the loss-variance objective `L_λ`,
//!   the gradient-variance objective `J_γ`, the q-FFL objective `H_q`, and the
//!   stale-average surrogates used by the approximate algorithms.
//! * [`federation`] round engines for FedAvg, FairLoss, FairLoss*, FairGrad,
//!   FairGrad* and q-FFL, plus the outer training loop and checkpoints.
//! * [`metrics`] per-client accuracy, fairness variance, best-round selection
//!   and the sweep selection criterion.
//! * [`theory`] executable checks of the surrogate identities, the q-FFL
//!   inequality, the offset counterexample and variance reduction.

pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod reduce;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use model::{Example, ModelSpec, ParamVector};
