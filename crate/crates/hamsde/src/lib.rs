//! # hamsde
//!
//! Numerical tools for Hamiltonian systems driven by Brownian noise in the
//! Stratonovich sense: a structure-preserving implicit midpoint integrator
//! with exact tangent maps, pathwise action accumulation and its boundary
//! differential identity, Newton shooting of Lagrangian sections with the
//! projected-action residual check, a Feynman-Kac Monte Carlo estimator
//! cross-checked against a Crank-Nicolson reference, and generating-function
//! canonical transforms with equilibrium and commutation diagnostics.
//!
//! The primary interface is the library together with the runnable programs
//! in `examples/` (one per capability); a thin `hamsde` binary exposes the
//! same experiment runners behind a subcommand CLI for scripted use.

// Indexed kernels here sweep several arrays with one loop variable, and
// validations use `!(x > 0.0)` so NaN fails closed; both read better than
// the clippy-preferred forms.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;

pub mod action;
pub mod catalog;
pub mod config;
pub mod dsl;
pub mod experiment;
pub mod feynman_kac;
pub mod field;
pub mod geometry;
pub mod hamilton_jacobi;
pub mod integrator;
pub mod noise;
pub mod transform;

pub use action::{
    accumulate_action, action_gradient, fd_action_gradient, hat_r_gradient_check, ActionPath,
};
pub use config::{ExperimentKind, RunConfig, SystemSpec, Tolerances};
pub use dsl::compile_str;
pub use error::{Error, Result};
pub use experiment::{run, RunOutcome, Verdict};
pub use feynman_kac::{fk_compare, fk_estimate, pde_reference, FkConfig, FkReport, FkRow, PdeField};
pub use field::{FieldJet, ScalarField, VarSpace};
pub use geometry::{
    hamiltonian_vector_field, liouville_pairing, poisson_bracket, symplectic_defect,
    CotangentVector, HamiltonianSystem, PhaseState, TangentVector,
};
pub use hamilton_jacobi::{
    d_s_tilde, d_s_tilde_profile, hj_residual, projected_action, shoot, DsMode,
    LagrangianSection, ShootingConfig, ShootingPath,
};
pub use integrator::{
    integrate_flow, inverse_flow_point, step_midpoint, Scheme, SchemeConfig, SolverStats,
    Trajectory,
};
pub use noise::{NoisePath, TimeGrid};
pub use transform::{
    apply_psi, apply_psi_inverse, bracket_conditions, equilibrium_check, probe_states,
    psi_jacobian_fd, transform_hamiltonians, BracketReport, EquilibriumReport,
    GeneratingFunction, ProbeGrid, TransformConfig, TransformedSystem,
};
