//! Nonlinear structured latent factor analysis.
//!
//! Each observed item `j` is modelled as `Y_ij = f_j(a_jᵀ x_i) + ε_ij` with an
//! unknown link `f_j` under a squared-exponential Gaussian-process prior and a
//! binary design matrix `Q` forcing `a_jk = 0` wherever `q_jk = 0`. The crate
//! provides
//!
//! * a per-factor structural identifiability check on `Q` ([`identifiability`]),
//! * joint MAP and iterative two-step estimators of scores, loadings,
//!   hyperparameters and links ([`estimator`]),
//! * the comparison methods, evaluation metrics and a seeded simulation
//!   harness ([`baselines`], [`metrics`], [`simulation`]).

pub mod baselines;
pub mod error;
pub mod estimator;
pub mod identifiability;
pub mod inference;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod oil;
pub mod optim;
pub mod serde_rows;
pub mod simulation;

pub use error::{Error, Result};
pub use nalgebra;
pub use estimator::{fit, fit_iterative, fit_joint_map, initialize, pca_init, predict_links, FitConfig, Init, Method};
pub use identifiability::{identifiability_report, IdentifiabilityReport};
pub use model::{
    apply_zero_pattern, validate_design, Convergence, Dataset, DesignMatrix, FactorScores, FitResult,
    Hyperparams, LabelColumn, Loadings,
};
