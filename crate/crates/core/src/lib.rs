//! Malliavin calculus on marked Poisson configurations via the lent particle
//! method: carré du champ and gradient of configuration functionals, the
//! Euler flow of jump-driven SDEs, and density diagnostics.

pub mod cli_runner;
pub mod config_space;
pub mod density_analysis;
pub mod error;
pub mod lent_particle;
pub mod linalg;
pub mod mark_dirichlet;
pub mod rng;
pub mod sde_flow;
pub mod stats;

pub use config_space::{
    simulate_base, simulate_configuration, AttributeSampler, BasePoint, Configuration, LevyMeasure,
    MarkedPoint, ProcessSpec,
};
pub use error::{LentError, Result};
pub use lent_particle::{
    gamma_total, gamma_total_oracle, isotropic_functional, make_exp, make_jump_sum, make_linear,
    sharp_sample, Functional, GammaMatrix, PointFn, PolarJump,
};
pub use mark_dirichlet::{CircleMarkSpace, Mark, MarkFunction, MarkSpace};
pub use sde_flow::{
    euler_solve, flat_sde_sample, gamma_sde, lemma3_moment_check, CoefficientPreset, DriverPath,
    FlowState, SdeCoefficients, WienerMarkSpace,
};
