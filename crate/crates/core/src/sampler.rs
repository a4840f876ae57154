//! Conditional generation of a missing modality.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_registered, CheckpointMeta, Registry};
use crate::data::{preprocess_volume, read_volume, scan_case, write_volume};
use crate::denoiser::{Denoise, Denoiser};
use crate::diffusion::reverse_step;
use crate::modality::{Modality, NamingProfile};
use crate::rng::{stable_hash, standard_normal_vec, stream_rng, Stream};
use crate::schedule::NoiseSchedule;
use crate::wavelet::{crop_with_record, dwt3d, idwt3d, pad_to_multiple, PaddingRecord, WaveletCoefficients, SUBBANDS};
use crate::{Error, Result, Volume3D};

/// The three available volumes of a sampling request.
#[derive(Clone, Debug)]
pub struct ModalitySet {
    volumes: BTreeMap<Modality, Volume3D>,
}

impl ModalitySet {
    pub fn new(volumes: BTreeMap<Modality, Volume3D>) -> Result<Self> {
        let mut it = volumes.iter();
        if let Some((_, first)) = it.next() {
            for (m, v) in it {
                if v.shape() != first.shape() {
                    return Err(Error::Shape(format!(
                        "{m} has shape {:?}, other inputs {:?}",
                        v.shape(),
                        first.shape()
                    )));
                }
            }
        }
        Ok(Self { volumes })
    }

    pub fn available(&self) -> Vec<Modality> {
        self.volumes.keys().copied().collect()
    }

    pub fn missing(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| !self.volumes.contains_key(m)).collect()
    }

    pub fn get(&self, m: Modality) -> Result<&Volume3D> {
        self.volumes
            .get(&m)
            .ok_or_else(|| Error::Request(format!("{m} is not among the available inputs")))
    }

    /// The single absent modality.
    pub fn target(&self) -> Result<Modality> {
        match self.missing().as_slice() {
            [m] => Ok(*m),
            [] => Err(Error::Request("nothing to synthesize: all four modalities are present".into())),
            more => Err(Error::Request(format!(
                "exactly one modality may be missing, found {} missing ({})",
                more.len(),
                more.iter().map(|m| m.code()).collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

/// Detects the missing modality and returns the checkpoint trained for it.
pub fn select_model(set: &ModalitySet, registry: &Registry) -> Result<(Modality, PathBuf)> {
    let target = set.target()?;
    Ok((target, registry.checkpoint_for(target)?))
}

/// Observer called with `(t, x_t)` before each denoising step.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &WaveletCoefficients);

/// Runs the reverse chain from pure noise conditioned on `conditions`, in the
/// order the model was trained with. The result has the input shape and is
/// clamped to `[0, 1]`.
pub fn conditional_sample<M: Denoise + ?Sized>(
    model: &M,
    conditions: &[&Volume3D],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Volume3D> {
    let shape = conditions.first().map(|v| v.shape()).unwrap_or_default();
    conditional_sample_with(model, conditions, schedule, rng, shape, None)
}

/// As [`conditional_sample`], cropping the result to `original_shape` (the
/// shape before any caller-side padding) and optionally observing each step.
pub fn conditional_sample_with<M: Denoise + ?Sized>(
    model: &M,
    conditions: &[&Volume3D],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    original_shape: [usize; 3],
    mut observer: Option<StepObserver<'_>>,
) -> Result<Volume3D> {
    let Some(first) = conditions.first() else {
        return Err(Error::Request("no condition volumes given".into()));
    };
    for c in &conditions[1..] {
        first.check_same_shape(c)?;
    }
    let in_shape = first.shape();
    if (0..3).any(|i| original_shape[i] > in_shape[i] || original_shape[i] == 0) {
        return Err(Error::Shape(format!(
            "cannot crop {in_shape:?} to {original_shape:?}"
        )));
    }
    if let Some(t) = model.timesteps() {
        if t != schedule.timesteps() {
            return Err(Error::Checkpoint(format!(
                "model expects {t} timesteps, schedule has {}",
                schedule.timesteps()
            )));
        }
    }
    let multiple = 2 * model.spatial_multiple();
    let padded: Vec<(Volume3D, PaddingRecord)> = conditions.iter().map(|v| pad_to_multiple(v, multiple)).collect();
    let parts = padded.iter().map(|(v, _)| dwt3d(v)).collect::<Result<Vec<_>>>()?;
    let cond = WaveletCoefficients::concat(&parts.iter().collect::<Vec<_>>())?;
    let spatial = cond.spatial_shape();
    let n = SUBBANDS * spatial.iter().product::<usize>();
    let dims = (SUBBANDS, spatial[0], spatial[1], spatial[2]);
    let gaussian = |rng: &mut ChaCha8Rng| {
        WaveletCoefficients::new(Array4::from_shape_vec(dims, standard_normal_vec(rng, n)).expect("shape"))
    };

    let mut x = gaussian(rng)?;
    let zeros = WaveletCoefficients::zeros(SUBBANDS, spatial);
    for t in (1..=schedule.timesteps()).rev() {
        if let Some(obs) = observer.as_mut() {
            obs(t, &x);
        }
        let input = WaveletCoefficients::concat(&[&x, &cond])?;
        let x0 = model.predict_x0(&input, t)?;
        if x0.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "model returned {:?}, expected {:?}",
                x0.shape(),
                x.shape()
            )));
        }
        let noise = if t > 1 { gaussian(rng)? } else { zeros.clone() };
        x = reverse_step(&x, &x0, t, schedule, &noise)?;
    }

    let full = idwt3d(&x)?;
    let [d, h, w] = original_shape;
    let record = PaddingRecord {
        original_shape: [d, h, w],
        padded_shape: full.shape(),
    };
    let mut out = crop_with_record(&full, &record)?.clamp(0.0, 1.0);
    out.meta = first.meta.clone();
    Ok(out)
}

pub struct LoadedModel {
    pub path: PathBuf,
    pub meta: CheckpointMeta,
    pub denoiser: Denoiser<f32>,
    pub schedule: NoiseSchedule,
}

/// Lazily loaded, shared read-only models keyed by target modality.
pub struct ModelStore {
    registry: Registry,
    loaded: Mutex<HashMap<Modality, Arc<LoadedModel>>>,
}

impl ModelStore {
    pub fn new(registry: Registry) -> Self {
        Self {
            registry,
            loaded: Mutex::new(HashMap::new()),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn get(&self, target: Modality) -> Result<Arc<LoadedModel>> {
        if let Some(m) = self.loaded.lock().expect("model cache poisoned").get(&target) {
            return Ok(m.clone());
        }
        let (path, ckpt) = load_registered(&self.registry, target)?;
        let model = Arc::new(LoadedModel {
            denoiser: ckpt.denoiser()?,
            schedule: NoiseSchedule::new(ckpt.meta.schedule)?,
            meta: ckpt.meta,
            path,
        });
        self.loaded.lock().expect("model cache poisoned").insert(target, model.clone());
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub seed: u64,
    pub naming: NamingProfile,
    /// Write `x_t` (as an image) every this many steps.
    pub snapshot_stride: Option<usize>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            naming: NamingProfile::default(),
            snapshot_stride: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseLog {
    pub case_id: String,
    pub target: Modality,
    pub seed: u64,
    pub wall_seconds: f64,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

pub const CASE_LOG: &str = "synthesis_log.json";

/// Per-case seed: the run seed mixed with a stable hash of the case id, so
/// results do not depend on processing order.
pub fn case_seed(run_seed: u64, case_id: &str) -> u64 {
    run_seed ^ stable_hash(case_id)
}

/// Synthesizes the missing modality of one case directory into
/// `<out_dir>/<case>/<case>-<suffix><ext>`.
///
/// `withhold` hides a present modality, as for pseudo-validation cases that
/// still have the dropped file on disk.
pub fn process_case(
    case_dir: &Path,
    withhold: Option<Modality>,
    store: &ModelStore,
    out_dir: &Path,
    config: &SynthesisConfig,
) -> Result<CaseLog> {
    let clock = Instant::now();
    let record = scan_case(case_dir, &config.naming)?;
    let case_id = record.subject_id.clone();
    let mut paths = record.modality_paths.clone();
    if let Some(m) = withhold {
        paths.remove(&m);
    }
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no recognized modality files in {}; expected names like {}",
            case_dir.display(),
            config.naming.expected_patterns(&case_id)
        )));
    }
    let mut raw = BTreeMap::new();
    for (&m, p) in &paths {
        raw.insert(m, read_volume(p)?);
    }
    let set = ModalitySet::new(raw)?;
    let target = set.target()?;
    let model = store.get(target)?;
    let conditions = model
        .meta
        .condition_order
        .iter()
        .map(|&m| {
            let v = set.get(m)?;
            match &model.meta.preprocess {
                Some(spec) => preprocess_volume(v, spec),
                None => Ok(v.clone()),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Volume3D> = conditions.iter().collect();

    let seed = case_seed(config.seed, &case_id);
    let mut rng = stream_rng(seed, Stream::Sampling, 0);
    let case_out = out_dir.join(&case_id);
    fs::create_dir_all(&case_out).map_err(|e| Error::io(&case_out, e))?;

    let shape = refs[0].shape();
    let snap_dir = case_out.join("snapshots");
    let mut snap_err = None;
    let mut write_snapshot = |t: usize, x: &WaveletCoefficients| {
        let stride = config.snapshot_stride.unwrap_or(usize::MAX).max(1);
        if t % stride != 0 && t != 1 {
            return;
        }
        let res = idwt3d(x).and_then(|v| {
            let rec = PaddingRecord {
                original_shape: shape,
                padded_shape: v.shape(),
            };
            let v = crop_with_record(&v, &rec)?;
            write_volume(&snap_dir.join(format!("t{t:04}{}", config.naming.extension)), &v)
        });
        if let Err(e) = res {
            snap_err.get_or_insert(e);
        }
    };
    let observer: Option<StepObserver<'_>> = if config.snapshot_stride.is_some() {
        Some(&mut write_snapshot)
    } else {
        None
    };
    let out = conditional_sample_with(&model.denoiser, &refs, &model.schedule, &mut rng, shape, observer)?;
    if let Some(e) = snap_err {
        return Err(e);
    }

    let out_path = case_out.join(config.naming.file_name(&case_id, target));
    write_volume(&out_path, &out)?;
    let log = CaseLog {
        case_id,
        target,
        seed,
        wall_seconds: clock.elapsed().as_secs_f64(),
        checkpoint: model.path.clone(),
        output: out_path,
    };
    let line = serde_json::to_string(&log).map_err(|e| Error::Data(e.to_string()))?;
    let log_path = case_out.join(CASE_LOG);
    fs::write(&log_path, line + "\n").map_err(|e| Error::io(&log_path, e))?;
    tracing::info!(case = %log.case_id, target = %target, seed, seconds = log.wall_seconds, "synthesized");
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleParams;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use std::cell::{Cell, RefCell};

    fn vol(shape: [usize; 3], seed: u64) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::new(Array3::from_shape_fn(shape, |_| rng.random::<f32>()))
    }

    fn schedule(t: usize) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleParams {
            timesteps: t,
            ..Default::default()
        })
        .unwrap()
    }

    /// Always predicts the same coefficients; records what it was fed.
    struct Fixed {
        x0: WaveletCoefficients,
        calls: Cell<usize>,
        seen: RefCell<Vec<(usize, WaveletCoefficients)>>,
    }

    impl Denoise for Fixed {
        fn predict_x0(&self, x: &WaveletCoefficients, t: usize) -> Result<WaveletCoefficients> {
            self.calls.set(self.calls.get() + 1);
            if self.seen.borrow().len() < 2 {
                self.seen.borrow_mut().push((t, x.clone()));
            }
            Ok(self.x0.clone())
        }
    }

    fn fixed(target: &Volume3D) -> Fixed {
        Fixed {
            x0: dwt3d(target).unwrap(),
            calls: Cell::new(0),
            seen: RefCell::new(Vec::new()),
        }
    }

    #[test]
    fn select_model_examples() {
        let mut reg = Registry::new("/r");
        reg.entries.insert(
            Modality::Flair,
            crate::checkpoint::RegistryEntry {
                modality: Modality::Flair,
                status: crate::checkpoint::EntryStatus::Ok,
                checkpoint: "FLAIR/final.ckpt".into(),
                sha256: String::new(),
            },
        );
        let set = |ms: &[Modality]| ModalitySet::new(ms.iter().map(|&m| (m, vol([2, 2, 2], 0))).collect()).unwrap();
        let (t, p) = select_model(&set(&[Modality::T1, Modality::T1ce, Modality::T2]), &reg).unwrap();
        assert_eq!(t, Modality::Flair);
        assert_eq!(p, PathBuf::from("/r/FLAIR/final.ckpt"));
        let all = select_model(&set(&Modality::ALL), &reg).unwrap_err().to_string();
        assert!(all.contains("nothing to synthesize"));
        let two = select_model(&set(&[Modality::T1, Modality::T2]), &reg).unwrap_err().to_string();
        assert!(two.contains("exactly one modality may be missing"));
        let unreg = select_model(&set(&[Modality::Flair, Modality::T1ce, Modality::T2]), &reg).unwrap_err();
        assert!(matches!(unreg, Error::Registry(_)));
    }

    #[test]
    fn mismatched_condition_shapes_rejected() {
        let m = fixed(&vol([4, 4, 4], 1));
        let (a, b) = (vol([4, 4, 4], 2), vol([4, 4, 6], 3));
        let mut rng = stream_rng(0, Stream::Sampling, 0);
        assert!(conditional_sample(&m, &[&a, &b, &a], &schedule(5), &mut rng).is_err());
        assert!(ModalitySet::new([(Modality::T1, a), (Modality::T2, b)].into_iter().collect()).is_err());
    }

    #[test]
    fn fixed_prediction_is_reached_exactly() {
        let target = vol([6, 8, 4], 10);
        let conds = [vol([6, 8, 4], 11), vol([6, 8, 4], 12), vol([6, 8, 4], 13)];
        let refs: Vec<&Volume3D> = conds.iter().collect();
        for t in [1, 10, 1000] {
            let s = schedule(t);
            for seed in 0..3 {
                let m = fixed(&target);
                let mut rng = stream_rng(seed, Stream::Sampling, 0);
                let out = conditional_sample(&m, &refs, &s, &mut rng).unwrap();
                assert_eq!(m.calls.get(), t);
                let err = (&out.data - &target.data).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
                assert!(err < 1e-5, "T={t} seed={seed}: {err}");
            }
        }
    }

    #[test]
    fn condition_channels_constant_across_steps() {
        let target = vol([4, 4, 4], 1);
        let conds = [vol([4, 4, 4], 2), vol([4, 4, 4], 3), vol([4, 4, 4], 4)];
        let m = fixed(&target);
        let mut rng = stream_rng(5, Stream::Sampling, 0);
        conditional_sample(&m, &conds.iter().collect::<Vec<_>>(), &schedule(20), &mut rng).unwrap();
        let seen = m.seen.borrow();
        assert_eq!(seen[0].0, 20);
        assert_eq!(seen[1].0, 19);
        let c0 = seen[0].1.data.slice(ndarray::s![8.., .., .., ..]).to_owned();
        let c1 = seen[1].1.data.slice(ndarray::s![8.., .., .., ..]).to_owned();
        assert_eq!(c0, c1);
        let expected = dwt3d(&conds[1]).unwrap();
        assert_eq!(seen[0].1.data.slice(ndarray::s![16..24, .., .., ..]), expected.data);
        assert_ne!(seen[0].1.data.slice(ndarray::s![..8, .., .., ..]), seen[1].1.data.slice(ndarray::s![..8, .., .., ..]));
    }

    #[test]
    fn padded_inputs_are_cropped_back() {
        let target = Volume3D::new(Array3::from_elem((6, 6, 6), 0.25));
        let conds = [vol([6, 6, 6], 2), vol([6, 6, 6], 3), vol([6, 6, 6], 4)];
        let (padded, rec) = pad_to_multiple(&target, 4);
        let m = fixed(&padded);
        struct Mult(Fixed);
        impl Denoise for Mult {
            fn predict_x0(&self, x: &WaveletCoefficients, t: usize) -> Result<WaveletCoefficients> {
                self.0.predict_x0(x, t)
            }
            fn spatial_multiple(&self) -> usize {
                2
            }
        }
        let mut rng = stream_rng(0, Stream::Sampling, 0);
        let refs: Vec<&Volume3D> = conds.iter().collect();
        let out = conditional_sample(&Mult(m), &refs, &schedule(3), &mut rng).unwrap();
        assert_eq!(out.shape(), rec.original_shape);
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn caller_padding_crops_to_original() {
        let target = vol([156, 24, 24], 1);
        let m = fixed(&target);
        let conds = [vol([156, 24, 24], 2), vol([156, 24, 24], 3), vol([156, 24, 24], 4)];
        let refs: Vec<&Volume3D> = conds.iter().collect();
        let mut rng = stream_rng(0, Stream::Sampling, 0);
        let out = conditional_sample_with(&m, &refs, &schedule(2), &mut rng, [155, 24, 24], None).unwrap();
        assert_eq!(out.shape(), [155, 24, 24]);
    }

    #[test]
    fn output_is_clamped_and_deterministic() {
        let conds = [vol([4, 4, 4], 2), vol([4, 4, 4], 3), vol([4, 4, 4], 4)];
        let refs: Vec<&Volume3D> = conds.iter().collect();
        struct Zero;
        impl Denoise for Zero {
            fn predict_x0(&self, x: &WaveletCoefficients, _: usize) -> Result<WaveletCoefficients> {
                Ok(WaveletCoefficients::new(x.data.slice(ndarray::s![..8, .., .., ..]).mapv(|v| v * 3.0)).unwrap())
            }
        }
        let s = schedule(10);
        let run = |seed| conditional_sample(&Zero, &refs, &s, &mut stream_rng(seed, Stream::Sampling, 0)).unwrap();
        let (a, b, c) = (run(1), run(1), run(2));
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn model_and_schedule_lengths_must_agree() {
        let cfg = crate::denoiser::DenoiserConfig {
            base_channels: 4,
            norm_groups: 4,
            depth_levels: 1,
            channel_multipliers: vec![1],
            num_res_blocks: 1,
            num_timesteps: 10,
            ..Default::default()
        };
        let m = Denoiser::<f32>::build(cfg, 0).unwrap();
        let conds = [vol([4, 4, 4], 2), vol([4, 4, 4], 3), vol([4, 4, 4], 4)];
        let refs: Vec<&Volume3D> = conds.iter().collect();
        let mut rng = stream_rng(0, Stream::Sampling, 0);
        assert!(matches!(conditional_sample(&m, &refs, &schedule(20), &mut rng), Err(Error::Checkpoint(_))));
        assert!(conditional_sample(&m, &refs, &schedule(10), &mut rng).is_ok());
    }

    #[test]
    fn empty_case_lists_expected_names() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("case-1");
        fs::create_dir_all(&case).unwrap();
        let store = ModelStore::new(Registry::new(dir.path()));
        let err = process_case(&case, None, &store, dir.path(), &SynthesisConfig::default()).unwrap_err().to_string();
        assert!(err.contains("case-1-t2f") && err.contains("case-1-t1n"), "{err}");
    }
}
