//! Optimizers with exponentially decaying memory, their memoryless
//! approximations, and the memory-correction terms that connect the two.

pub mod config;
pub mod correction;
pub mod error;
pub mod harness;
pub mod loss;
pub mod memoryful;
pub mod memoryless;
pub mod minibatch;
mod momentum;
pub mod ode;
pub mod rng;
pub mod spec;
pub mod trajectory;
pub mod vector;

pub use error::{Error, Result};
pub use loss::{LossModel, MiniBatchFamily};
pub use nalgebra::DMatrix;
pub use spec::{KSpec, OptimizerKind, OptimizerSpec};
pub use vector::{linf_distance, smoothed_one_norm, softsign, ParamVector};
pub use config::{step_count, InitialTheta, LossSpec, RunConfig};
pub use memoryful::{eval_f_history, run_memoryful, step_state, HistoryBuffer, MomentumState};
pub use trajectory::Trajectory;
pub use correction::{CorrectionMethod, CorrectionTerm, Regime};
pub use memoryless::{run_memoryless, step_memoryless, CorrectionVariant, MemorylessKind};
pub use harness::{fit_loglog, LogLogFit, SlopeGate, SweepReport};
pub use ode::{build_modified_ode, integrate_rk4, ModifiedOde, OdeTerms};
pub use minibatch::{perm_coefficients, PermutationCoefficients};
