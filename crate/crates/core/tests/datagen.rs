use depthuq::datagen::{render_sample, train_count, write_dataset, Dataset, SceneSpec};
use depthuq::geometry::warp;
use depthuq::photometric::{photometric_error, LossConfig};

fn masked_mean(err: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    let (s, n) = err
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .fold((0.0, 0usize), |(s, n), (_, e)| (s + e, n + 1));
    s / n as f64
}

#[test]
fn gt_warped_right_matches_left_on_visible_pixels() {
    let spec = SceneSpec::default();
    let cfg = LossConfig::default();
    for index in 0..8 {
        let s = render_sample(&spec, index).unwrap();
        let k = s.left.intrinsics;
        let (warped, valid) = warp(&s.right, &s.depth, &s.poses.right, &k, &k).unwrap();
        let err = photometric_error(&warped, &s.left, &cfg).unwrap();
        let m = masked_mean(&err, |i| valid[i] && !s.occluded[i]);
        assert!(m < 0.01, "sample {index}: mean photometric error {m}");
    }
}

#[test]
fn gt_warped_temporal_frames_match_left() {
    let spec = SceneSpec::default();
    let cfg = LossConfig::default();
    let s = render_sample(&spec, 2).unwrap();
    let k = s.left.intrinsics;
    for (src, pose) in [(&s.prev, s.poses.prev), (&s.next, s.poses.next)] {
        let (warped, valid) = warp(src, &s.depth, &pose, &k, &k).unwrap();
        let err = photometric_error(&warped, &s.left, &cfg).unwrap();
        let m = masked_mean(&err, |i| valid[i]);
        assert!(m < 0.02, "temporal error {m}");
    }
}

#[test]
fn dataset_files_split_and_determinism() {
    let spec = SceneSpec {
        width: 16,
        height: 16,
        ..SceneSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = write_dataset(&spec, 10, a.path()).unwrap();
    let mb = write_dataset(&spec, 10, b.path()).unwrap();
    assert_eq!((ma.train.len(), ma.test.len()), (8, 2));
    assert_eq!(train_count(10), 8);
    assert_eq!(ma, mb);
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );

    // every file on disk appears exactly once in the manifest
    let mut listed: Vec<&str> = ma.files.iter().map(|f| f.path.as_str()).collect();
    listed.sort();
    let before = listed.len();
    listed.dedup();
    assert_eq!(before, listed.len());
    let mut on_disk = Vec::new();
    for dir in std::fs::read_dir(a.path()).unwrap() {
        let dir = dir.unwrap().path();
        if dir.is_dir() {
            for f in std::fs::read_dir(&dir).unwrap() {
                let f = f.unwrap().path();
                on_disk.push(f.strip_prefix(a.path()).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    on_disk.sort();
    assert_eq!(on_disk, listed);

    let ds = Dataset::open(a.path()).unwrap();
    ds.verify().unwrap();
    let sample = ds.load(&ds.manifest.test[0]).unwrap();
    let direct = render_sample(&spec, 8).unwrap();
    assert_eq!(sample.depth.values(), direct.depth.values());
    assert_eq!(sample.occluded, direct.occluded);

    std::fs::write(a.path().join(&ma.train[0].left), b"junk").unwrap();
    assert!(ds.verify().is_err());
}
