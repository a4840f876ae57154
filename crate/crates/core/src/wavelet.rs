//! Single-level separable 3D Haar transform.
//!
//! Each `2×2×2` block of the input maps to one coefficient in each of eight
//! subbands. Subband channel `c` has bit 2 = depth, bit 1 = height,
//! bit 0 = width, where a set bit means the high-pass filter was applied on
//! that axis: channel 0 is LLL, 1 is LLH, 2 is LHL, ... 7 is HHH.
//!
//! Filters are orthonormal, `(1, 1)/√2` and `(1, -1)/√2`, so the transform of
//! a block is a normalized 8-point Walsh-Hadamard transform and the inverse
//! is the same butterfly.

use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

pub const SUBBANDS: usize = 8;

pub const SUBBAND_NAMES: [&str; SUBBANDS] =
    ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

/// A stack of wavelet subbands, `channels × D/2 × H/2 × W/2`.
///
/// A single volume has exactly 8 channels; concatenated condition stacks are
/// multiples of 8.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletCoefficients {
    pub data: Array4<f32>,
}

impl WaveletCoefficients {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if data.len_of(Axis(0)) == 0 || data.len_of(Axis(0)) % SUBBANDS != 0 {
            return Err(Error::Shape(format!(
                "coefficient channel count {} is not a positive multiple of {SUBBANDS}",
                data.len_of(Axis(0))
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, spatial: [usize; 3]) -> Self {
        Self {
            data: Array4::zeros((channels, spatial[0], spatial[1], spatial[2])),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let (_, d, h, w) = self.data.dim();
        [d, h, w]
    }

    pub fn shape(&self) -> [usize; 4] {
        let (c, d, h, w) = self.data.dim();
        [c, d, h, w]
    }

    /// Number of 8-channel volumes in this stack.
    pub fn volume_count(&self) -> usize {
        self.channels() / SUBBANDS
    }

    /// The `index`-th 8-channel group of a concatenated stack.
    pub fn volume(&self, index: usize) -> Result<WaveletCoefficients> {
        if index >= self.volume_count() {
            return Err(Error::Shape(format!(
                "stack holds {} volumes, requested index {index}",
                self.volume_count()
            )));
        }
        let lo = index * SUBBANDS;
        Ok(Self {
            data: self.data.slice(s![lo..lo + SUBBANDS, .., .., ..]).to_owned(),
        })
    }

    /// Channel-wise concatenation, in argument order.
    pub fn concat(parts: &[&WaveletCoefficients]) -> Result<WaveletCoefficients> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate an empty list".into()))?;
        let spatial = first.spatial_shape();
        if let Some(bad) = parts.iter().find(|p| p.spatial_shape() != spatial) {
            return Err(Error::Shape(format!(
                "cannot concatenate spatial shapes {:?} and {:?}",
                spatial,
                bad.spatial_shape()
            )));
        }
        let views: Vec<ArrayView4<f32>> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { data })
    }

    pub fn check_same_shape(&self, other: &WaveletCoefficients) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "coefficient shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Records how a volume was padded so the padding can be undone exactly.
/// Padding is always appended at the high end of each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PaddingRecord {
    pub original_shape: [usize; 3],
    pub padded_shape: [usize; 3],
}

impl PaddingRecord {
    pub fn pad_amounts(&self) -> [usize; 3] {
        [
            self.padded_shape[0] - self.original_shape[0],
            self.padded_shape[1] - self.original_shape[1],
            self.padded_shape[2] - self.original_shape[2],
        ]
    }

    pub fn is_identity(&self) -> bool {
        self.original_shape == self.padded_shape
    }
}

#[inline]
fn butterfly<T: Float>(v: &mut [T; 8], scale: T) {
    for bit in [1usize, 2, 4] {
        for i in 0..8 {
            if i & bit == 0 {
                let (a, b) = (v[i], v[i | bit]);
                v[i] = (a + b) * scale;
                v[i | bit] = (a - b) * scale;
            }
        }
    }
}

fn check_even(shape: [usize; 3]) -> Result<()> {
    if shape.iter().any(|&n| n == 0 || n % 2 != 0) {
        return Err(Error::PaddingRequired { shape });
    }
    Ok(())
}

/// Forward transform over any float type. Returns `8 × D/2 × H/2 × W/2`.
pub fn haar_forward<T: Float>(volume: ArrayView3<T>) -> Result<Array4<T>> {
    let (d, h, w) = volume.dim();
    check_even([d, h, w])?;
    let (hd, hh, hw) = (d / 2, h / 2, w / 2);
    let scale = T::from(std::f64::consts::FRAC_1_SQRT_2).unwrap();
    let mut out = Array4::zeros((SUBBANDS, hd, hh, hw));
    let mut block = [T::zero(); 8];
    for z in 0..hd {
        for y in 0..hh {
            for x in 0..hw {
                for (i, v) in block.iter_mut().enumerate() {
                    *v = volume[[2 * z + (i >> 2), 2 * y + ((i >> 1) & 1), 2 * x + (i & 1)]];
                }
                butterfly(&mut block, scale);
                for (c, v) in block.iter().enumerate() {
                    out[[c, z, y, x]] = *v;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse transform over any float type. Expects exactly 8 channels.
pub fn haar_inverse<T: Float>(coeffs: ArrayView4<T>) -> Result<Array3<T>> {
    let (c, hd, hh, hw) = coeffs.dim();
    if c != SUBBANDS {
        return Err(Error::Shape(format!(
            "inverse DWT needs exactly {SUBBANDS} channels, got {c}; slice the stack first"
        )));
    }
    let scale = T::from(std::f64::consts::FRAC_1_SQRT_2).unwrap();
    let mut out = Array3::zeros((2 * hd, 2 * hh, 2 * hw));
    let mut block = [T::zero(); 8];
    for z in 0..hd {
        for y in 0..hh {
            for x in 0..hw {
                for (i, v) in block.iter_mut().enumerate() {
                    *v = coeffs[[i, z, y, x]];
                }
                butterfly(&mut block, scale);
                for (i, v) in block.iter().enumerate() {
                    out[[2 * z + (i >> 2), 2 * y + ((i >> 1) & 1), 2 * x + (i & 1)]] = *v;
                }
            }
        }
    }
    Ok(out)
}

/// DWT of an even-shaped volume.
pub fn dwt3d(volume: &Volume3D) -> Result<WaveletCoefficients> {
    Ok(WaveletCoefficients {
        data: haar_forward(volume.data.view())?,
    })
}

/// Inverse DWT of an 8-channel coefficient block. The result carries no
/// spatial metadata.
pub fn idwt3d(coeffs: &WaveletCoefficients) -> Result<Volume3D> {
    Ok(Volume3D::new(haar_inverse(coeffs.data.view())?))
}

/// Zero-pads the high end of each axis up to the next multiple of `multiple`.
pub fn pad_to_multiple(volume: &Volume3D, multiple: usize) -> (Volume3D, PaddingRecord) {
    let multiple = multiple.max(1);
    let original_shape = volume.shape();
    let padded_shape = original_shape.map(|n| n.div_ceil(multiple) * multiple);
    let record = PaddingRecord {
        original_shape,
        padded_shape,
    };
    if record.is_identity() {
        return (volume.clone(), record);
    }
    let mut data = Array3::zeros(padded_shape);
    data.slice_mut(s![
        ..original_shape[0],
        ..original_shape[1],
        ..original_shape[2]
    ])
    .assign(&volume.data);
    (Volume3D::with_meta(data, volume.meta.clone()), record)
}

/// Minimal padding that makes every dimension even.
pub fn pad_to_even(volume: &Volume3D) -> (Volume3D, PaddingRecord) {
    pad_to_multiple(volume, 2)
}

/// Undoes [`pad_to_multiple`].
pub fn crop_with_record(volume: &Volume3D, record: &PaddingRecord) -> Result<Volume3D> {
    if volume.shape() != record.padded_shape {
        return Err(Error::Shape(format!(
            "volume shape {:?} does not match padded shape {:?} of the record",
            volume.shape(),
            record.padded_shape
        )));
    }
    let [d, h, w] = record.original_shape;
    Ok(Volume3D::with_meta(
        volume.data.slice(s![..d, ..h, ..w]).to_owned(),
        volume.meta.clone(),
    ))
}
