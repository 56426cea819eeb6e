//! Missing-modality audio-visual question answering on a synthetic trimodal
//! world: a slot-bank recall generator, a feature-space diffusion enhancer,
//! a fusion QA head, and the training and experiment harness around them.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod feature;
pub mod model;
pub mod nn;
pub mod par;
pub mod qa_head;
pub mod rmm;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use feature::{Dims, FeatureVec, ModalityMask, Rng, TrimodalSample, VisualFeatureMap};
pub use model::{Group, ModelShape, Models};
pub use train::{Arm, TrainConfig, Trainer};
pub use world::{Dataset, Scenario, WorldConfig};
