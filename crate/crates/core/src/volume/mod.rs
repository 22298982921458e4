//! Volumetric data: NIfTI-1 file I/O, the preprocessing transforms applied
//! before training, and a synthetic phantom cohort generator that provides
//! learnable age and sex signal at desk scale.
//!
//! A [`Volume`] stores its scalar field in (D, H, W) row-major order with W
//! varying fastest, which is exactly the on-disk NIfTI order (x fastest):
//! voxel x-index = W index, y = H, z = D. The affine maps homogeneous voxel
//! coordinates (x, y, z, 1) to world millimetres.

mod cohort;
mod nifti;
mod phantom;
mod preprocess;

pub use cohort::{make_cohort, read_manifest, write_manifest, AgeDistribution, CohortManifest, CohortRow};
pub use nifti::{read_nifti, write_nifti};
pub use phantom::{
    generate_phantom, linear_probe_age_r, linear_probe_sex_accuracy, phantom_features, phantom_region_volumes,
    PhantomSpec, SubjectParams, PHANTOM_REGION_NAMES,
};
pub use preprocess::{center_crop, preprocess_volume, znormalize};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("not a NIfTI-1 file: {0}")]
    Format(String),
    #[error("unsupported NIfTI feature: {0}")]
    Unsupported(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// A 3D scalar field with spatial metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Extents in (D, H, W) order; W varies fastest in `data`.
    pub dims: (usize, usize, usize),
    /// Voxel size in mm, (D, H, W) order.
    pub spacing: (f32, f32, f32),
    /// Voxel-to-world transform over (x, y, z, 1) = (W, H, D, 1) indices.
    pub affine: [[f32; 4]; 4],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32), data: Vec<f32>) -> Result<Self> {
        let mut affine = [[0.0f32; 4]; 4];
        affine[0][0] = spacing.2;
        affine[1][1] = spacing.1;
        affine[2][2] = spacing.0;
        affine[3][3] = 1.0;
        Self::with_affine(dims, spacing, affine, data)
    }

    pub fn with_affine(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        affine: [[f32; 4]; 4],
        data: Vec<f32>,
    ) -> Result<Self> {
        let (d, h, w) = dims;
        if d < 1 || h < 1 || w < 1 {
            return Err(VolumeError::Invalid(format!("dims must be >= 1, got {dims:?}")));
        }
        if data.len() != d * h * w {
            return Err(VolumeError::Invalid(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(VolumeError::Invalid("affine last row must be (0,0,0,1)".into()));
        }
        Ok(Self { dims, spacing, affine, data })
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    /// Index of voxel (d, h, w) in the data buffer.
    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims.1 + h) * self.dims.2 + w
    }

    /// Training-layout tensor `[1, 1, D, H, W]` in the requested precision.
    pub fn to_tensor<E: crate::tensor::Element>(&self) -> crate::tensor::Tensor<E> {
        let (d, h, w) = self.dims;
        let data: Vec<E> = self.data.iter().map(|&v| E::from_f64(v as f64)).collect();
        crate::tensor::Tensor::from_vec(vec![1, 1, d, h, w], data).expect("volume dims")
    }
}
