//! Learnable networks: the vector-field estimator and the discriminators.

mod discriminator;
mod estimator;
mod layers;
mod params;

pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorEnsemble, DiscriminatorOutput};
pub use estimator::{EstimatorConfig, ModelScale, VectorFieldEstimator, DEFAULT_PERIODS};
pub use layers::{leaky_relu, repeat_last, Conv1d, Conv2d, Linear};
pub use params::{HostArray, ParamStore};
