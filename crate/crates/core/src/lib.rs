//! Numeric core shared by the runtime and the simulator: dense containers,
//! deterministic RNG, the toy reach-the-target environment, the Gaussian MLP
//! policy, the GRPO learner, arena pools and placement plans.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`). Everything
//! outside of tests uses the `f32` aliases below.

pub mod batch;
pub mod config;
pub mod env;
pub mod grpo;
pub mod placement;
pub mod policy;
pub mod pool;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod tensor;

pub use batch::{GroupBatch, Trajectory};
pub use config::{ExperimentConfig, RunMode};
pub use rng::Rng;
pub use scalar::Scalar;

pub type DenseVec = tensor::Vector<f32>;
pub type DenseMat = tensor::Matrix<f32>;
pub type ParamSnapshot = tensor::Snapshot<f32>;
pub type PolicyParams = policy::Params<f32>;
pub type ActionChunk = policy::ActionChunk<f32>;
pub type GrpoLearner = grpo::Learner<f32>;
