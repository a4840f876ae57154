//! Whole-volume image quality metrics and report tables.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array3, ArrayBase, ArrayView3, Axis, Data, Ix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_volume, ManifestRow};
use crate::modality::{Modality, NamingProfile};
use crate::{Error, Result, Volume3D};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const CROP_224: [usize; 3] = [155, 224, 224];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.window >= 1
            && self.window % 2 == 1
            && self.sigma > 0.0
            && self.k1 > 0.0
            && self.k2 > 0.0
            && self.data_range > 0.0
            && [self.sigma, self.k1, self.k2, self.data_range].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid SSIM parameters ({self}); window must be odd and the rest positive"
            )))
        }
    }
}

impl fmt::Display for SsimParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SSIM: gaussian window {}^3, sigma {}, K1 {}, K2 {}, data range {}",
            self.window, self.sigma, self.k1, self.k2, self.data_range
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Full,
    #[serde(rename = "cropped_224")]
    Cropped224,
}

impl fmt::Display for CropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CropMode::Full => "full",
            CropMode::Cropped224 => "cropped_224",
        })
    }
}

impl FromStr for CropMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CropMode::Full),
            "cropped_224" | "cropped-224" | "crop" => Ok(CropMode::Cropped224),
            _ => Err(Error::Config(format!("unknown crop mode {s:?} (full, cropped_224)"))),
        }
    }
}

impl CropMode {
    /// Centered crop to at most 155×224×224; smaller axes are kept whole.
    pub fn apply<'a, S: Data<Elem = f32>>(&self, v: &'a ArrayBase<S, Ix3>) -> ArrayView3<'a, f32> {
        match self {
            CropMode::Full => v.view(),
            CropMode::Cropped224 => {
                let (d, h, w) = v.dim();
                let [cd, ch, cw] = [d.min(CROP_224[0]), h.min(CROP_224[1]), w.min(CROP_224[2])];
                let (od, oh, ow) = ((d - cd) / 2, (h - ch) / 2, (w - cw) / 2);
                v.slice(s![od..od + cd, oh..oh + ch, ow..ow + cw])
            }
        }
    }
}

fn check_pair<S1, S2, A>(a: &ArrayBase<S1, Ix3>, b: &ArrayBase<S2, Ix3>) -> Result<()>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
{
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("metric inputs differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::Shape("metric inputs are empty".into()));
    }
    Ok(())
}

pub fn mse<S1, S2, A>(a: &ArrayBase<S1, Ix3>, b: &ArrayBase<S2, Ix3>) -> Result<f64>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    check_pair(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// PSNR from an MSE value; zero error maps to [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        -10.0 * (mse / (data_range * data_range)).log10()
    }
}

pub fn psnr<S1, S2, A>(a: &ArrayBase<S1, Ix3>, b: &ArrayBase<S2, Ix3>, data_range: f64) -> Result<f64>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    Ok(psnr_from_mse(mse(a, b)?, data_range))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Array1<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k = Array1::from_shape_fn(size, |i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp());
    let total = k.sum();
    k / total
}

/// 'valid' correlation with `k` along `axis`.
fn filter_valid(x: &Array3<f64>, k: &Array1<f64>, axis: usize) -> Array3<f64> {
    let n = x.len_of(Axis(axis));
    let m = n + 1 - k.len();
    let mut shape = [x.dim().0, x.dim().1, x.dim().2];
    shape[axis] = m;
    let mut out = Array3::zeros(shape);
    for (j, &kv) in k.iter().enumerate() {
        let src = x.slice_axis(Axis(axis), (j..j + m).into());
        out.scaled_add(kv, &src);
    }
    out
}

fn smooth(x: &Array3<f64>, k: &Array1<f64>) -> Array3<f64> {
    let a = filter_valid(x, k, 0);
    let b = filter_valid(&a, k, 1);
    filter_valid(&b, k, 2)
}

/// Window side actually used for a volume: at most `params.window`, odd, and
/// no larger than the smallest extent.
pub fn effective_window(params: &SsimParams, shape: [usize; 3]) -> usize {
    let mut w = params.window.min(*shape.iter().min().unwrap_or(&1));
    if w % 2 == 0 {
        w -= 1;
    }
    w.max(1)
}

/// Mean SSIM over all fully-contained 3D Gaussian windows.
pub fn ssim_with<S1, S2, A>(a: &ArrayBase<S1, Ix3>, b: &ArrayBase<S2, Ix3>, params: &SsimParams) -> Result<f64>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    check_pair(a, b)?;
    let (d, h, w) = a.dim();
    let win = effective_window(params, [d, h, w]);
    let k = gaussian_kernel(win, params.sigma);
    let af = a.mapv(|v| v.into());
    let bf = b.mapv(|v| v.into());
    let mu_a = smooth(&af, &k);
    let mu_b = smooth(&bf, &k);
    let e_aa = smooth(&(&af * &af), &k);
    let e_bb = smooth(&(&bf * &bf), &k);
    let e_ab = smooth(&(&af * &bf), &k);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let mut total = 0.0;
    ndarray::Zip::from(&mu_a)
        .and(&mu_b)
        .and(&e_aa)
        .and(&e_bb)
        .and(&e_ab)
        .for_each(|&ma, &mb, &aa, &bb, &ab| {
            let va = aa - ma * ma;
            let vb = bb - mb * mb;
            let cov = ab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
        });
    Ok(total / mu_a.len() as f64)
}

pub fn ssim<S1, S2, A>(a: &ArrayBase<S1, Ix3>, b: &ArrayBase<S2, Ix3>) -> Result<f64>
where
    S1: Data<Elem = A>,
    S2: Data<Elem = A>,
    A: Copy + Into<f64>,
{
    ssim_with(a, b, &SsimParams::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn score_volumes(pred: &Volume3D, truth: &Volume3D, crop: CropMode, params: &SsimParams) -> Result<Scores> {
    pred.check_same_shape(truth)?;
    let p = crop.apply(&pred.data);
    let t = crop.apply(&truth.data);
    let m = mse(&p, &t)?;
    Ok(Scores {
        mse: m,
        psnr: psnr_from_mse(m, params.data_range),
        ssim: ssim_with(&p, &t, params)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub target: Modality,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub label: String,
    pub count: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn mean_of<'a>(label: &str, rows: impl Iterator<Item = &'a CaseMetrics>) -> Option<GroupMean> {
    let rows: Vec<_> = rows.collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(GroupMean {
        label: label.to_string(),
        count: rows.len(),
        mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub crop_mode: CropMode,
    pub ssim_params: SsimParams,
    pub per_case: Vec<CaseMetrics>,
    pub per_modality: Vec<GroupMean>,
    pub overall: Option<GroupMean>,
    /// Cases without a readable prediction.
    pub missing: Vec<String>,
}

impl MetricsReport {
    pub fn new(crop_mode: CropMode, ssim_params: SsimParams, per_case: Vec<CaseMetrics>, missing: Vec<String>) -> Self {
        let per_modality = Modality::ALL
            .iter()
            .filter_map(|m| mean_of(m.code(), per_case.iter().filter(|r| r.target == *m)))
            .collect();
        let overall = mean_of("Random", per_case.iter());
        Self {
            crop_mode,
            ssim_params,
            per_case,
            per_modality,
            overall,
            missing,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    /// Aligned table: one row per target modality plus the overall mean.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# crop: {}; {}; PSNR cap {} dB", self.crop_mode, self.ssim_params, PSNR_CAP_DB);
        let _ = writeln!(out, "{:<18} {:>5} {:>12} {:>8} {:>7}", "Missing Modality", "n", "MSE", "PSNR", "SSIM");
        let line = "-".repeat(54);
        let _ = writeln!(out, "{line}");
        let row = |out: &mut String, g: &GroupMean| {
            let _ = writeln!(out, "{:<18} {:>5} {:>12.3e} {:>8.2} {:>7.3}", g.label, g.count, g.mse, g.psnr, g.ssim);
        };
        for g in &self.per_modality {
            row(&mut out, g);
        }
        let _ = writeln!(out, "{line}");
        if let Some(g) = &self.overall {
            row(&mut out, g);
        }
        if !self.missing.is_empty() {
            let _ = writeln!(out, "missing predictions: {}", self.missing.join(", "));
        }
        out
    }

    /// Per-case rows as CSV: `case_id,target,mse,psnr,ssim`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["case_id", "target", "mse", "psnr", "ssim"])
            .map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.per_case {
            w.write_record([
                r.case_id.clone(),
                r.target.code().to_string(),
                format!("{:e}", r.mse),
                format!("{}", r.psnr),
                format!("{}", r.ssim),
            ])
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<CaseMetrics>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad number in column {i}")))
            };
            rows.push(CaseMetrics {
                case_id: rec.get(0).unwrap_or_default().to_string(),
                target: rec.get(1).unwrap_or_default().parse()?,
                mse: num(2)?,
                psnr: num(3)?,
                ssim: num(4)?,
            });
        }
        Ok(rows)
    }
}

/// Where a prediction for a manifest row is expected:
/// `<pred_dir>/<case>/<case>-<suffix><ext>`.
pub fn prediction_path(pred_dir: &Path, row: &ManifestRow, profile: &NamingProfile) -> PathBuf {
    pred_dir.join(&row.case_id).join(profile.file_name(&row.case_id, row.dropped))
}

/// Scores every manifest case that has a prediction. Cases without one are
/// listed in `missing` and left out of the aggregates.
pub fn evaluate_split(
    pred_dir: &Path,
    manifest: &[ManifestRow],
    profile: &NamingProfile,
    crop: CropMode,
    params: &SsimParams,
) -> Result<MetricsReport> {
    let results: Vec<(String, Result<Option<CaseMetrics>>)> = manifest
        .par_iter()
        .map(|row| {
            let path = prediction_path(pred_dir, row, profile);
            let res = (|| {
                if !path.is_file() {
                    return Ok(None);
                }
                let pred = read_volume(&path)?;
                let truth = read_volume(&row.ground_truth)?;
                let s = score_volumes(&pred, &truth, crop, params)?;
                Ok(Some(CaseMetrics {
                    case_id: row.case_id.clone(),
                    target: row.dropped,
                    mse: s.mse,
                    psnr: s.psnr,
                    ssim: s.ssim,
                }))
            })();
            (row.case_id.clone(), res)
        })
        .collect();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (case, res) in results {
        match res? {
            Some(r) => rows.push(r),
            None => {
                tracing::warn!(case = %case, "no prediction found");
                missing.push(case);
            }
        }
    }
    Ok(MetricsReport::new(crop, *params, rows, missing))
}

/// Groups rows by target modality, e.g. for ablation summaries.
pub fn by_target(rows: &[CaseMetrics]) -> BTreeMap<Modality, Vec<&CaseMetrics>> {
    let mut out: BTreeMap<Modality, Vec<&CaseMetrics>> = BTreeMap::new();
    for r in rows {
        out.entry(r.target).or_default().push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rand_vol(shape: (usize, usize, usize), seed: u64) -> Array3<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.random::<f32>())
    }

    /// Brute-force SSIM: explicit weighted sums per window position.
    fn ssim_oracle(a: &Array3<f64>, b: &Array3<f64>, win: usize) -> f64 {
        let p = SsimParams::default();
        let c = (win as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..win).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * p.sigma * p.sigma)).exp()).collect();
        let gs: f64 = g.iter().sum();
        let (d, h, w) = a.dim();
        let (c1, c2) = ((p.k1).powi(2), (p.k2).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for z in 0..=d - win {
            for y in 0..=h - win {
                for x in 0..=w - win {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..win {
                        for j in 0..win {
                            for k in 0..win {
                                let wt = g[i] * g[j] * g[k] / (gs * gs * gs);
                                let (va, vb) = (a[[z + i, y + j, x + k]], b[[z + i, y + j, x + k]]);
                                ma += wt * va;
                                mb += wt * vb;
                                aa += wt * va * va;
                                bb += wt * vb * vb;
                                ab += wt * va * vb;
                            }
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_volumes() {
        let a = rand_vol((9, 10, 11), 1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn psnr_of_known_mse() {
        assert!((psnr_from_mse(1e-3, 1.0) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_pair() {
        let a = Array3::<f64>::from_elem((8, 8, 8), 0.5);
        let b = Array3::<f64>::from_elem((8, 8, 8), 0.6);
        let m = mse(&a, &b).unwrap();
        assert!((m - 0.01).abs() < 1e-15);
        assert!((psnr_from_mse(m, 1.0) - 20.0).abs() < 1e-12);
        // closed form with zero variance: (2*0.3 + C1) / (0.25 + 0.36 + C1)
        let expected = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.983609).abs() < 1e-6);
    }

    #[test]
    fn ssim_matches_brute_force() {
        let a = rand_vol((9, 8, 10), 2).mapv(f64::from);
        let b = (&a * 0.7 + rand_vol((9, 8, 10), 3).mapv(f64::from) * 0.3).mapv(|v| v);
        let ours = ssim(&a, &b).unwrap();
        let oracle = ssim_oracle(&a, &b, 7);
        assert!((ours - oracle).abs() < 1e-12, "{ours} vs {oracle}");
    }

    #[test]
    fn small_volumes_shrink_the_window() {
        let p = SsimParams::default();
        assert_eq!(effective_window(&p, [4, 8, 8]), 3);
        assert_eq!(effective_window(&p, [5, 8, 8]), 5);
        assert_eq!(effective_window(&p, [64, 64, 64]), 7);
        let a = rand_vol((4, 6, 6), 4).mapv(f64::from);
        let b = rand_vol((4, 6, 6), 5).mapv(f64::from);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b, 3)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_and_empty_rejected() {
        let a = Array3::<f32>::zeros((2, 2, 2));
        let b = Array3::<f32>::zeros((2, 2, 3));
        assert!(mse(&a, &b).is_err());
        let e = Array3::<f32>::zeros((0, 2, 2));
        assert!(ssim(&e, &e).is_err());
    }

    #[test]
    fn cropped_mode_takes_centered_region() {
        let v = Array3::from_shape_fn((155, 240, 240), |(z, y, x)| (z * 1_000_000 + y * 1000 + x) as f32);
        let c = CropMode::Cropped224.apply(&v);
        assert_eq!(c.dim(), (155, 224, 224));
        assert_eq!(c[[0, 0, 0]], v[[0, 8, 8]]);
        assert_eq!(c[[154, 223, 223]], v[[154, 231, 231]]);
        let small = Array3::<f32>::zeros((8, 8, 8));
        assert_eq!(CropMode::Cropped224.apply(&small).dim(), (8, 8, 8));
        assert_eq!(CropMode::Full.apply(&v).dim(), (155, 240, 240));
    }

    #[test]
    fn report_aggregates_are_group_means() {
        let rows = vec![
            CaseMetrics { case_id: "a".into(), target: Modality::T1, mse: 1e-3, psnr: 30.0, ssim: 0.9 },
            CaseMetrics { case_id: "b".into(), target: Modality::T1, mse: 3e-3, psnr: 25.0, ssim: 0.8 },
            CaseMetrics { case_id: "c".into(), target: Modality::Flair, mse: 2e-3, psnr: 27.0, ssim: 0.7 },
        ];
        let r = MetricsReport::new(CropMode::Full, SsimParams::default(), rows, vec![]);
        assert_eq!(r.per_modality.len(), 2);
        assert_eq!(r.per_modality[0].label, "T1");
        assert!((r.per_modality[0].mse - 2e-3).abs() < 1e-15);
        assert!((r.overall.as_ref().unwrap().ssim - 0.8).abs() < 1e-12);
        let table = r.render_table();
        assert!(table.contains("FLAIR") && table.contains("Random") && table.contains("window 7^3"));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![CaseMetrics { case_id: "a".into(), target: Modality::T2, mse: 1.25e-3, psnr: 29.03, ssim: 0.91 }];
        let r = MetricsReport::new(CropMode::Full, SsimParams::default(), rows.clone(), vec![]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        r.write_csv(&p).unwrap();
        assert_eq!(MetricsReport::read_csv(&p).unwrap(), rows);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn psnr_consistent_with_mse(seed in any::<u64>()) {
            let a = rand_vol((6, 7, 8), seed);
            let b = rand_vol((6, 7, 8), seed.wrapping_add(1));
            let m = mse(&a, &b).unwrap();
            prop_assert!((psnr(&a, &b, 1.0).unwrap() + 10.0 * m.log10()).abs() < 1e-9);
        }

        #[test]
        fn metrics_are_symmetric(seed in any::<u64>()) {
            let a = rand_vol((8, 8, 9), seed);
            let b = rand_vol((8, 8, 9), seed ^ 0xabc);
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        }

        #[test]
        fn ssim_is_bounded(seed in any::<u64>(), scale in 0.0f32..1.0) {
            let a = rand_vol((7, 8, 8), seed);
            let b = a.mapv(|v| 1.0 - v * scale);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }
}
