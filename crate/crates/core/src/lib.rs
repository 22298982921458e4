//! Toolkit for predicting demographic variables from volumetric brain
//! images: a from-scratch tensor engine with reverse-mode autodiff, three
//! 3D network architectures, NIfTI-1 I/O with preprocessing and synthetic
//! phantom cohorts, a training loop with early stopping, paired statistical
//! comparison of models, and gradient-based saliency.

pub mod explain;
pub mod nets;
pub mod oracles;
pub mod stats;
pub mod tensor;
pub mod training;
pub mod volume;
