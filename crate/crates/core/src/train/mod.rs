//! Toy-scale end-to-end training on synthetic triplets.

pub mod adam;
pub mod loss;
pub mod synthetic;
pub mod trainer;

pub use adam::{Adam, AdamConfig};
pub use synthetic::{SceneKind, SyntheticScene, Texture, Triplet};
pub use trainer::{train_toy, LossRecord, TrainConfig, TrainOutcome};
