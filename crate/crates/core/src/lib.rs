//! Distributional multi-agent reinforcement learning with a barrier-function
//! safety loss and scenario-based certification.
//!
//! Modules, bottom-up:
//!
//! * [`diffcore`]: reverse-mode autodiff over dense `f64` matrices.
//! * [`battlegrid`]: the grid battle and hazard corridor environments.
//! * [`policynet`]: per-agent quantile network with a hypernetwork input layer.
//! * [`mixnet`]: mean-shape mixer and barrier head.
//! * [`losses`]: quantile, barrier and invariance losses, gradient surgery.
//! * [`trainloop`]: replay, targets, updates and evaluation.
//! * [`certify`]: the sample-removal risk bound.
//! * [`harness`]: configs, commands and metrics files.

pub mod battlegrid;
pub mod certify;
pub mod diffcore;
pub mod harness;
pub mod losses;
pub mod mixnet;
pub mod policynet;
pub mod trainloop;

pub use battlegrid::{EnvConfig, EnvError, EnvState, Environment, Observation, Scenario, StepResult};
pub use certify::{certify_policy, epsilon_bound, CertifyError, SafetyCertificate, SafetyQuery};
pub use diffcore::{DiffError, GradientVector, ParamId, ParamStore, Tape, Tensor, Var};
pub use harness::{run_command, Command, ConfigError, HarnessError, RunConfig, RunReport, RunSpec};
pub use losses::{pcgrad_combine, CombineWeights, GradientPair, LossError, LossReport};
pub use mixnet::{JointQuantileBatch, MixError, MixerConfig, MixerNet};
pub use policynet::{HiddenState, PolicyConfig, PolicyError, PolicyNet, QuantileBatch};
pub use trainloop::{run_training, Episode, MetricsRow, ReplayBuffer, TrainConfig, TrainError, Trainer, Transition};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
