//! ExtendNLNet and the CsiNet-style baseline as explicit forward/backward
//! computations over `2 × H × W` CSI images.

pub mod audit;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod net;

pub use audit::{closed_form_fc, count_parameters, reference_non_fc, reference_total, LayerCount, ParameterAudit};
pub use blocks::{NonLocalBlock, RefineBlock};
pub use checkpoint::{Checkpoint, TrainingState};
pub use config::{Architecture, ModelConfig};
pub use layers::{Param, Parametric, Scalar};
pub use net::{Autoencoder, Decoder, Encoder};
