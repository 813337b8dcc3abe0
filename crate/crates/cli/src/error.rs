use std::fmt;

use veco::bleu::BleuError;
use veco::checkpoint::CheckpointError;
use veco::data::DataError;
use veco::model::ModelError;
use veco::tensor::TensorError;
use veco::training::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Data,
            message: message.into(),
        }
    }
}

/// `error kind=<k> code=<n> msg="<escaped>"` on a single line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "error kind={} code={} msg={:?}",
            self.kind.name(),
            self.kind.code(),
            self.message
        )
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::Tensor(TensorError::NonFinite { .. }) => Kind::Numeric,
        ModelError::Config(_)
        | ModelError::InvalidStream(_)
        | ModelError::DecoderTooDeep { .. } => Kind::Usage,
        ModelError::LayerOutOfRange { .. } | ModelError::NoCrossAttention => Kind::Usage,
        _ => Kind::Data,
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError {
            kind: model_kind(&e),
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            _ if e.is_numeric() => Kind::Numeric,
            TrainError::Config(_) => Kind::Usage,
            TrainError::Model(m) => model_kind(m),
            _ => Kind::Data,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<BleuError> for CliError {
    fn from(e: BleuError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}
