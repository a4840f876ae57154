//! Synthetic four-contrast phantoms for desk-scale runs.
//!
//! A subject is a smooth random field `p ∈ [0, 1]` inside an ellipsoidal
//! head mask. Each "modality" is a different fixed intensity curve applied to
//! `p`, so all four are co-registered, share the mask, and any one is a
//! deterministic function of the others.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;

use super::{scan_dataset, write_volume, SubjectRecord};
use crate::error::{Error, Result};
use crate::modality::{Modality, NamingProfile};
use crate::rng::{stream_rng, Stream};
use crate::volume::Volume3D;

const BLOBS: usize = 6;
const MASK_RADIUS: f64 = 0.42;
const BASE_LEVEL: f64 = 0.2;

/// Intensity inside the mask for a phantom value `p ∈ [0, 1]`.
pub fn toy_intensity(m: Modality, p: f32) -> f32 {
    let shaped = match m {
        Modality::T1 => p,
        Modality::T1ce => p * p,
        Modality::T2 => 1.0 - p,
        Modality::Flair => (std::f32::consts::PI * p).sin().powi(2),
    };
    0.1 + 0.9 * shaped
}

/// Smooth phantom in `[0, 1]`; zero outside the head mask.
pub fn toy_phantom<R: Rng>(shape: [usize; 3], rng: &mut R) -> Array3<f32> {
    let dims = shape.map(|n| n as f64);
    let mean_dim = dims.iter().sum::<f64>() / 3.0;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..BLOBS)
        .map(|_| {
            let center = dims.map(|n| n * rng.random_range(0.25..0.75));
            let sigma = mean_dim * rng.random_range(0.08..0.2);
            let amp = rng.random_range(0.4..1.0);
            (center, sigma, amp)
        })
        .collect();
    let inside = |z: usize, y: usize, x: usize| {
        let r: f64 = [z, y, x]
            .iter()
            .zip(dims.iter())
            .map(|(&i, &n)| ((i as f64 + 0.5 - n / 2.0) / (MASK_RADIUS * n)).powi(2))
            .sum();
        r <= 1.0
    };
    let mut field = Array3::from_shape_fn(shape, |(z, y, x)| {
        if !inside(z, y, x) {
            return 0.0;
        }
        let pos = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
        BASE_LEVEL
            + blobs
                .iter()
                .map(|(c, s, a)| {
                    let d2: f64 = pos.iter().zip(c).map(|(p, c)| (p - c).powi(2)).sum();
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum::<f64>()
    });
    let max = field.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        field.mapv_inplace(|v| v / max);
    }
    field.mapv(|v| v as f32)
}

/// Writes `n_subjects` cases named `toy-0000`, `toy-0001`, ... under
/// `out_dir` and returns their records.
pub fn generate_toy_dataset(
    n_subjects: usize,
    shape: [usize; 3],
    seed: u64,
    out_dir: &Path,
    profile: &NamingProfile,
) -> Result<Vec<SubjectRecord>> {
    profile.validate()?;
    if shape.contains(&0) {
        return Err(Error::Config(format!("toy volume shape {shape:?} has a zero extent")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for i in 0..n_subjects {
        let case_id = format!("toy-{i:04}");
        let mut rng = stream_rng(seed, Stream::Toy, i as u64);
        let phantom = toy_phantom(shape, &mut rng);
        for m in Modality::ALL {
            let data = phantom.mapv(|p| if p > 0.0 { toy_intensity(m, p) } else { 0.0 });
            let path = out_dir.join(&case_id).join(profile.file_name(&case_id, m));
            write_volume(&path, &Volume3D::new(data))?;
        }
    }
    let records = scan_dataset(out_dir, profile)?;
    Ok(records
        .into_iter()
        .filter(|r| {
            r.subject_id
                .strip_prefix("toy-")
                .and_then(|n| n.parse::<usize>().ok())
                .is_some_and(|n| n < n_subjects)
        })
        .collect())
}
