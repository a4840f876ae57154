use cwdm::data::{
    generate_toy_dataset, make_pseudo_validation, preprocess_volume, read_volume, scan_dataset, PreprocessSpec,
};
use cwdm::{Error, Modality, NamingProfile, Volume3D};
use ndarray::Array3;

#[test]
fn scan_recovers_generated_toy_tree() {
    let dir = tempfile::tempdir().unwrap();
    let profile = NamingProfile::default();
    let written = generate_toy_dataset(3, [8, 10, 12], 5, dir.path(), &profile).unwrap();
    let scanned = scan_dataset(dir.path(), &profile).unwrap();
    assert_eq!(scanned, written);
    for rec in &scanned {
        assert!(rec.is_complete());
        let loaded = rec.load(None).unwrap();
        for m in Modality::ALL {
            let on_disk = read_volume(&rec.modality_paths[&m]).unwrap();
            let v = loaded.get(m).unwrap();
            assert_eq!(v.data, on_disk.data);
            assert_eq!(v.shape(), [8, 10, 12]);
            assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}

#[test]
fn preprocessing_is_idempotent_inside_the_band() {
    // 0.5% of voxels sit at each end, so 0.1% clipping removes nothing
    let mut v = Array3::from_shape_fn([10, 10, 10], |(d, h, w)| 0.1 + 0.8 * ((d * 100 + h * 10 + w) as f32 / 999.0));
    for i in 0..5 {
        v[[0, 0, i]] = 0.0;
        v[[9, 9, i]] = 1.0;
    }
    let spec = PreprocessSpec::default();
    let once = preprocess_volume(&Volume3D::new(v.clone()), &spec).unwrap();
    let twice = preprocess_volume(&once, &spec).unwrap();
    let d1 = (&once.data - &v).iter().fold(0f32, |m, x| m.max(x.abs()));
    let d2 = (&twice.data - &once.data).iter().fold(0f32, |m, x| m.max(x.abs()));
    assert!(d1 < 1e-6 && d2 < 1e-6, "{d1} {d2}");
}

#[test]
fn pseudo_validation_refuses_incomplete_cases() {
    let dir = tempfile::tempdir().unwrap();
    let profile = NamingProfile::default();
    let mut records = generate_toy_dataset(2, [4, 4, 4], 1, dir.path(), &profile).unwrap();
    records[1].modality_paths.remove(&Modality::T2);
    records[1].missing = Some(Modality::T2);
    let err = make_pseudo_validation(&records, 0).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains(&records[1].subject_id), "{err}");
}
