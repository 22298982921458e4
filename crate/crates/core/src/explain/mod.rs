//! Gradient-based explainability: input×gradient saliency maps, top-k
//! averaging over the most confidently predicted subjects, thresholded
//! slice-mosaic exports, and region-volume correlation analysis.

mod regions;
mod saliency;

pub use regions::{
    load_region_mapping, read_region_volumes, region_correlations, write_region_volumes, Lobe, RegionCorrelation,
    RegionDef, RegionMapping, RegionVolumes, LOBE_ORDER,
};
pub use saliency::{
    rank_by_confidence, saliency, saliency_from_gradient, threshold_overlay, top_k_average, write_mosaic_pgm,
    SaliencyMap, DEFAULT_SALIENCY_THRESHOLD,
};

use crate::nets::NetError;
use crate::stats::StatsError;
use crate::tensor::TensorError;
use crate::volume::VolumeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("explain contract violation: {0}")]
    Contract(String),
    #[error("region table error: {0}")]
    RegionTable(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExplainError>;
