//! Channel-level dilation search for bottleneck convolutional networks.
//!
//! A supernet mixes several dilated 3×3 candidates per channel group; after search each
//! group keeps its strongest candidate, and the layer is rewritten as a few dilated
//! sub-convolutions whose weights are sliced from the pretrained baseline.

pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod decoder;
pub mod erf;
pub mod error;
pub mod genotype;
pub mod mixed;
pub mod nn;
pub mod optim;
pub mod run;
pub mod search;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use backbone::{apply_plan, build_supernet, BackboneSpec, Network, NetworkKind, TransformPlan};
pub use error::{Error, Result};
pub use genotype::{Genotype, GroupingMode, SearchSpaceConfig, Setting, StageSpace};
pub use tensor::{Scalar, Tensor};
