//! Wide residual network classifier for spectrogram images, with hand-written
//! forward and backward passes, momentum SGD and softmax-averaging
//! ensembles.

pub mod ensemble;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod train;

pub use ensemble::Ensemble;
pub use model::{softmax, Mode, WrnConfig, WrnModel};
pub use train::{train, train_model, FeatureSet, History, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum WrnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
}
