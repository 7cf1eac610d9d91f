use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no image contains any of the classes {classes:?}")]
    Exhausted { classes: Vec<u32> },
    #[error("load error: {0}")]
    Load(String),
    #[error("parameter mismatch: {}", .0.join("; "))]
    ParamMismatch(Vec<String>),
    #[error("non-finite loss at iteration {iteration} (episodes {episodes:?})")]
    NonFiniteLoss { iteration: u64, episodes: Vec<String> },
    #[error("dataset error: {0}")]
    Dataset(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
