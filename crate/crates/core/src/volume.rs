use ndarray::Array3;

use crate::error::{Error, Result};

/// Opaque spatial metadata carried from an input file to any output derived
/// from it (voxel spacing, orientation, affine).
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMeta(pub(crate) Box<nifti::NiftiHeader>);

/// A single-channel scalar field over a `D×H×W` grid.
///
/// Axis 0 is depth (slice axis), axis 1 height, axis 2 width. Files on disk
/// store the reversed order (x fastest); the I/O adapter takes care of that.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub data: Array3<f32>,
    pub meta: Option<SpatialMeta>,
}

impl Volume3D {
    pub fn new(data: Array3<f32>) -> Self {
        Self { data, meta: None }
    }

    pub fn with_meta(data: Array3<f32>, meta: Option<SpatialMeta>) -> Self {
        Self { data, meta }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::new(Array3::zeros(shape))
    }

    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w) = self.data.dim();
        [d, h, w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Errors unless both volumes share a shape.
    pub fn check_same_shape(&self, other: &Volume3D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "volume shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn clamp(mut self, lo: f32, hi: f32) -> Self {
        self.data.mapv_inplace(|v| v.clamp(lo, hi));
        self
    }
}
