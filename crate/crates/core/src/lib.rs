pub mod agent;
pub mod core_rl;
pub mod diagnostics;
pub mod environments;
pub mod harness;
pub mod priors;
pub mod rng;
pub mod robust_control;
mod scalar;

pub use scalar::{clamp, Scalar};
pub mod stability;

pub type Agent = agent::Agent<f64>;
pub type Transition = agent::Transition<f64>;
pub type ActionBounds = environments::ActionBounds<f64>;
pub type CartPoleEnv = environments::CartPoleEnv<f64>;
pub type CartPoleParams = environments::CartPoleParams<f64>;
pub type CarFollowEnv = environments::CarFollowEnv<f64>;
pub type CarFollowParams = environments::CarFollowParams<f64>;
pub type LinearPlant = robust_control::LinearPlant<f64>;
pub type HInfController = robust_control::HInfController<f64>;
pub type RiccatiSolution = robust_control::RiccatiSolution<f64>;
pub type ControlPrior = priors::ControlPrior<f64>;
pub type EpisodeStats = core_rl::EpisodeStats<f64>;
pub type TrainOutput = core_rl::TrainOutput<f64>;
pub type StabilityCertificate = stability::StabilityCertificate<f64>;
