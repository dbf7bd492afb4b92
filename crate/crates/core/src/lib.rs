#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Penalized least squares for linear regression with sparse incidental
//! intercepts: one nuisance shift per observation, most of them zero.

pub mod error;
pub mod estimator;
pub mod inference;
pub mod io;
pub mod lambda;
pub mod linalg;
pub mod simulation;
pub mod stats;

pub use error::{Error, Result};
pub use estimator::{
    fit, hard_threshold, huber_rho, kkt_check, objective, profiled_loss, soft_threshold, update_beta, update_mu,
    z_function, FitResult, KktReport, Penalty, PenaltyKind, SolverConfig,
};
pub use linalg::{ols_solve, sample_gram, subset_ols, Dataset, IndexSet, Matrix, Vector};
