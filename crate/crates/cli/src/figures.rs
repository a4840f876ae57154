//! Middle-slice comparison panels.
//!
//! One PNG per (case, synthesized modality): the real volume on the top row,
//! the synthetic one below, with axial, sagittal and coronal middle slices
//! left to right. Intensities map as `round(clamp(v, 0, 1) * 255)` with no
//! per-slice rescaling. Panels sit top-left in equally sized cells padded
//! with black.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use cwdm::data::read_volume;
use cwdm::{Error, Modality, Result, Volume3D};
use image::GrayImage;
use ndarray::{Array2, Axis};

use crate::commands::{create_dir, require_dir, Flags};
use crate::{ConfigArgs, Outcome};

#[derive(Debug, Args)]
pub struct FiguresArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset root with the real volumes, one directory per case.
    #[arg(long)]
    pub real: PathBuf,
    /// Synthesis output root, one directory per case.
    #[arg(long)]
    pub synth: PathBuf,
    /// `output_dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Sagittal,
    Coronal,
}

impl Plane {
    pub const ORDER: [Plane; 3] = [Plane::Axial, Plane::Sagittal, Plane::Coronal];

    /// Volume axis the plane cuts across, for a `D×H×W` array.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }
}

/// The middle slice (floor of half the extent) mapped to 8-bit gray.
pub fn middle_slice(v: &Volume3D, plane: Plane) -> Array2<u8> {
    let ax = plane.axis();
    let idx = v.data.len_of(Axis(ax)) / 2;
    v.data.index_axis(Axis(ax), idx).mapv(to_gray)
}

pub fn to_gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Real row above synthetic row; columns follow [`Plane::ORDER`].
pub fn compose(real: &Volume3D, synth: &Volume3D) -> GrayImage {
    let rows: Vec<Vec<Array2<u8>>> = [real, synth]
        .iter()
        .map(|v| Plane::ORDER.iter().map(|&p| middle_slice(v, p)).collect())
        .collect();
    let cell_h = rows.iter().flatten().map(|s| s.nrows()).max().unwrap_or(0);
    let cell_w = rows.iter().flatten().map(|s| s.ncols()).max().unwrap_or(0);
    let mut img = GrayImage::new((3 * cell_w) as u32, (2 * cell_h) as u32);
    for (r, row) in rows.iter().enumerate() {
        for (c, s) in row.iter().enumerate() {
            for ((y, x), &g) in s.indexed_iter() {
                img.put_pixel((c * cell_w + x) as u32, (r * cell_h + y) as u32, image::Luma([g]));
            }
        }
    }
    img
}

fn subdirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn figures(a: FiguresArgs) -> Result<Outcome> {
    let cfg = Flags::default().path("output_dir", &a.out).resolve(&a.cfg)?;
    require_dir(&a.real, "real-volume root")?;
    require_dir(&a.synth, "synthesis root")?;
    cfg.naming.validate()?;

    // (case, modality, real, synthetic)
    let mut pairs: Vec<(String, Modality, PathBuf, PathBuf)> = Vec::new();
    for dir in subdirs(&a.synth)? {
        let case = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for m in Modality::ALL {
            let name = cfg.naming.file_name(&case, m);
            let synth = dir.join(&name);
            let real = a.real.join(&case).join(&name);
            if synth.is_file() && real.is_file() {
                pairs.push((case.clone(), m, real, synth));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no synthetic volume in {} has a real counterpart in {}",
            a.synth.display(),
            a.real.display()
        )));
    }

    let out = &cfg.output_dir;
    create_dir(out)?;
    cfg.echo_into(out)?;
    for (case, m, real, synth) in pairs {
        let r = read_volume(&real)?;
        let s = read_volume(&synth)?;
        r.check_same_shape(&s)?;
        let path = out.join(format!("{case}-{}.png", m.code()));
        compose(&r, &s)
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::format(&path, e))?;
        println!("{}", path.display());
    }
    Ok(Outcome::Complete)
}
