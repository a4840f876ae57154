//! The one place that knows about volume file formats.
//!
//! `.nii` / `.nii.gz` go through the NIfTI reader and writer; headers are kept
//! as opaque [`SpatialMeta`] and reused as the reference header on write.
//! `.npy` is a metadata-free fallback used mostly by tests.

use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{SpatialMeta, Volume3D};

fn is_npy(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "npy")
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "volume file not found"),
        ));
    }
    if is_npy(path) {
        let data: Array3<f32> =
            ndarray_npy::read_npy(path).map_err(|e| Error::format(path, e))?;
        return Ok(Volume3D::new(data.as_standard_layout().into_owned()));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::format(path, e))?;
    let header = obj.header().clone();
    let mut data = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::format(path, e))?;
    while data.ndim() > 3 && data.shape()[data.ndim() - 1] == 1 {
        let last = data.ndim() - 1;
        data = data.index_axis_move(ndarray::Axis(last), 0);
    }
    let xyz = data
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::format(path, "expected a 3D volume"))?;
    // file order is (x, y, z); volumes are (depth, height, width) = (z, y, x)
    let dhw = xyz.reversed_axes().as_standard_layout().into_owned();
    Ok(Volume3D::with_meta(dhw, Some(SpatialMeta(Box::new(header)))))
}

/// Writes float32 data. Parent directories are created as needed.
pub fn write_volume(path: &Path, volume: &Volume3D) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if is_npy(path) {
        let data = volume.data.as_standard_layout();
        return ndarray_npy::write_npy(path, &data).map_err(|e| Error::format(path, e));
    }
    let header = match &volume.meta {
        Some(SpatialMeta(h)) => (**h).clone(),
        None => nifti::NiftiHeader::default(),
    };
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&volume.data.t())
        .map_err(|e| Error::format(path, e))
}
