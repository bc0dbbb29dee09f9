//! The dual-decoder brain extraction network: shared encoder, bottleneck
//! self-attention, a signed-distance decoder and a reconstruction decoder
//! joined by mask-guided attention. Also the loss, the training loop,
//! checkpoints and inference.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod infer;
pub mod loss;
pub mod net;
pub mod optim;
pub mod train;

pub use config::ModelConfig;
pub use error::{ModelError, Result};
pub use infer::{infer, infer_prepared, Inference};
pub use loss::{total_loss, LossBreakdown};
pub use net::{shape_infer, MgaNet, ShapeTable};
pub use train::{train_loop, StepRecord, TrainConfig, TrainSample};
