use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Percentile clipping followed by an affine map onto `normalize_to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSpec {
    /// Percent of the intensity distribution clipped at the low end.
    pub clip_lower_pct: f64,
    /// Percent clipped at the high end.
    pub clip_upper_pct: f64,
    pub normalize_to: [f64; 2],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            clip_lower_pct: 0.1,
            clip_upper_pct: 0.1,
            normalize_to: [0.0, 1.0],
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        for p in [self.clip_lower_pct, self.clip_upper_pct] {
            if !(0.0..50.0).contains(&p) {
                return Err(Error::Config(format!(
                    "clip percentile {p} outside [0, 50)"
                )));
            }
        }
        if !(self.normalize_to[0] < self.normalize_to[1]) {
            return Err(Error::Config(format!(
                "normalization range {:?} is not increasing",
                self.normalize_to
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizationStatus {
    Normalized,
    /// The clip band collapsed to a point; output is constant at the low end.
    Degenerate,
}

/// Linearly interpolated percentile (`pct` in `[0, 100]`) over all values,
/// the same definition as NumPy's default. Reorders `values`.
pub fn percentile(values: &mut [f32], pct: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let pos = pct / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_val, tail) = values.select_nth_unstable_by(lo, f32::total_cmp);
    let lo_val = lo_val as f64;
    if frac == 0.0 || tail.is_empty() {
        return lo_val;
    }
    let hi_val = tail.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    lo_val + (hi_val - lo_val) * frac
}

pub fn preprocess_volume_with_status(
    raw: &Volume3D,
    spec: &PreprocessSpec,
) -> Result<(Volume3D, NormalizationStatus)> {
    spec.validate()?;
    if raw.is_empty() {
        return Err(Error::Data("cannot preprocess an empty volume".into()));
    }
    let mut scratch: Vec<f32> = raw.data.iter().copied().collect();
    let lo = percentile(&mut scratch, spec.clip_lower_pct);
    let hi = percentile(&mut scratch, 100.0 - spec.clip_upper_pct);
    let [out_lo, out_hi] = spec.normalize_to;

    let mut out = raw.clone();
    let width = hi - lo;
    if !(width > 0.0) || !width.is_finite() {
        out.data.fill(out_lo as f32);
        return Ok((out, NormalizationStatus::Degenerate));
    }
    let scale = (out_hi - out_lo) / width;
    out.data
        .mapv_inplace(|v| (out_lo + ((v as f64).clamp(lo, hi) - lo) * scale) as f32);
    Ok((out, NormalizationStatus::Normalized))
}

/// Clips to the configured percentile band and rescales it to
/// `normalize_to`. A constant volume yields the low end of the range and a
/// warning.
pub fn preprocess_volume(raw: &Volume3D, spec: &PreprocessSpec) -> Result<Volume3D> {
    let (v, status) = preprocess_volume_with_status(raw, spec)?;
    if status == NormalizationStatus::Degenerate {
        tracing::warn!(shape = ?raw.shape(), "degenerate intensity range; volume set to zeros");
    }
    Ok(v)
}
