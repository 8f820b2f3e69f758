//! Copy-action encoder-decoder parser on a small reverse-mode tape.

mod checkpoint;
mod params;
mod parser;
pub mod tape;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{NamedTensor, ParamStore};
pub use parser::{HeadInit, LossGradients, MaskedExample, ParserConfig, ParserModel, Prediction, Vocab, UNK};
pub use train::{train, train_streams, Adam, TrainLog, TrainOptions};
pub(crate) use train::BatchStream;

pub(crate) use params::Binder;
pub(crate) use parser::{encode, init_linear, EncoderInput};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("label {0} is not in the model vocabulary")]
    UnknownLabel(String),
    #[error("no head named {0}")]
    UnknownHead(String),
    #[error("a head named {0} already exists")]
    DuplicateHead(String),
    #[error("example {id}: loss mask has {mask} entries for {actions} actions")]
    MaskLength { id: String, mask: usize, actions: usize },
    #[error("example {id}: copy index {index} is outside the query")]
    CopyOutOfRange { id: String, index: usize },
    #[error("no training data")]
    EmptyData,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
