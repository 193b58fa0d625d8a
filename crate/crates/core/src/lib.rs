pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gca;
pub mod model;
pub mod numerics;
pub mod stlstm;
pub mod trainer;
pub mod twostream;

pub use error::{Error, Result};
pub use gca::{AttentionConfig, AttentionMap, AttentionMode, GlobalContext, InitMode, ModelDims};
pub use model::{Model, ModelSpec, StreamSelection, Variant};
pub use trainer::{Optimizer, TrainConfig, TrainReport};
