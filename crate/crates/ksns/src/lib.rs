//! Structured-grid solver for a chemotaxis–fluid system with nonlinear
//! (porous-medium type) cell diffusion, coupled to incompressible
//! Navier–Stokes flow, plus a verification harness that monitors the
//! conservation laws, energy functionals, and weak-formulation residuals
//! the scheme is supposed to honor.
//!
//! The crate is organized as a library; see `examples/` for runnable
//! entry points per capability and `src/bin/ksns.rs` for the CLI.

pub mod diagnostics;
pub mod dynamics;
pub mod elliptic;
pub mod error;
pub mod mesh;
pub mod operators;
pub mod reduce;

pub use diagnostics::{
    check_apriori, record, weak_residual_c, weak_residual_n, weak_residual_u, AprioriConfig,
    AprioriReport, DiagnosticsRecord, ScalarTestFn, SolenoidalTestFn, TemporalProfile,
};
pub use dynamics::{
    compute_dt, run, step, Hooks, ModelParams, Potential, State, StepContext, StepControl,
};

pub use elliptic::{
    project_divergence_free, solve_helmholtz, solve_poisson_neumann, yosida_resolvent, Method,
    SolverContext, SolverSettings,
};
pub use error::{Error, Result};
pub use mesh::{integrate, lp_norm, make_grid, Boundary, Grid, ScalarField, VectorField};
pub use operators::{
    advect_scalar, advect_velocity, chemotaxis_flux, divergence, gradient, laplacian,
    porous_medium_flux, velocity_divergence, FaceFlux,
};
