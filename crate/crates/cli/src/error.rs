//! Exit-code mapping. Stable codes: 0 success, 2 config, 3 I/O, 4 numeric,
//! 5 shape, 6 contract.

use neurovol::explain::ExplainError;
use neurovol::nets::NetError;
use neurovol::stats::StatsError;
use neurovol::tensor::TensorError;
use neurovol::training::TrainError;
use neurovol::volume::VolumeError;

pub const CODE_CONFIG: i32 = 2;
pub const CODE_IO: i32 = 3;
pub const CODE_NUMERIC: i32 = 4;
pub const CODE_SHAPE: i32 = 5;
pub const CODE_CONTRACT: i32 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(CODE_IO, format!("I/O error: {e}"))
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        let code = match &e {
            TensorError::DimensionMismatch { .. } | TensorError::Geometry { .. } => CODE_SHAPE,
            TensorError::NonFinite { .. } => CODE_NUMERIC,
            TensorError::Contract(_) => CODE_CONTRACT,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Tensor(t) => t.into(),
            NetError::Geometry(_) | NetError::Config(_) => CliError::new(CODE_SHAPE, e.to_string()),
            NetError::ParamMismatch(_) => CliError::new(CODE_CONTRACT, e.to_string()),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        let code = match &e {
            VolumeError::Io(_) => CODE_IO,
            VolumeError::Format(_) | VolumeError::Unsupported(_) | VolumeError::Manifest(_) => CODE_IO,
            VolumeError::Degenerate(_) => CODE_NUMERIC,
            VolumeError::Invalid(_) => CODE_SHAPE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::new(CODE_NUMERIC, e.to_string()),
            TrainError::Config(_) => CliError::new(CODE_CONFIG, e.to_string()),
            TrainError::Checkpoint(_) => CliError::new(CODE_CONTRACT, e.to_string()),
            TrainError::Net(n) => n.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Volume(v) => v.into(),
            TrainError::Io(i) => i.into(),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        let code = match &e {
            StatsError::Io(_) | StatsError::Predictions(_) => CODE_IO,
            StatsError::Contract(_) => CODE_CONTRACT,
            StatsError::UndefinedMetric(_) | StatsError::Degenerate(_) => CODE_NUMERIC,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Contract(_) => CliError::new(CODE_CONTRACT, e.to_string()),
            ExplainError::RegionTable(_) => CliError::new(CODE_IO, e.to_string()),
            ExplainError::Net(n) => n.into(),
            ExplainError::Tensor(t) => t.into(),
            ExplainError::Stats(s) => s.into(),
            ExplainError::Volume(v) => v.into(),
            ExplainError::Io(i) => i.into(),
        }
    }
}
