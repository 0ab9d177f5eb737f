use gain_core::data::{bias_broken_splits, generate_dataset, Dataset, SceneSpec, SplitKind};
use gain_core::error::Error;
use gain_core::experiments::components;

#[test]
fn half_bias_co_occurrence() {
    let spec = SceneSpec { bias: vec![0.5; 3], negative_fraction: 0.0, ..SceneSpec::toy() };
    let samples = spec.split(SplitKind::Train, 1000, 11).unwrap();
    let (mut on, mut total) = (0, 0);
    for s in &samples {
        for c in s.positive_classes() {
            total += 1;
            if s.background == spec.classes[c].correlated_background {
                on += 1;
            }
        }
    }
    let rate = on as f64 / total as f64;
    assert!((rate - 0.5).abs() <= 0.05, "co-occurrence {rate}");
}

#[test]
fn full_bias_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::toy();
    let paths = generate_dataset(dir.path(), &spec, &[(SplitKind::Train, 10)], 7).unwrap();
    let ds = Dataset::load(&paths[0]).unwrap();
    assert_eq!(ds.len(), 10);
    for s in ds.samples().unwrap() {
        for c in s.positive_classes() {
            assert_eq!(s.background, spec.classes[c].correlated_background);
        }
    }
}

fn min_gap(a: &[usize], b: &[usize], w: usize) -> usize {
    let mut best = usize::MAX;
    for &p in a {
        for &q in b {
            let (px, py, qx, qy) = (p % w, p / w, q % w, q / w);
            let d = px.abs_diff(qx).max(py.abs_diff(qy));
            best = best.min(d - 1);
        }
    }
    best
}

#[test]
fn two_blob_masks_have_two_separated_parts() {
    let spec = SceneSpec::toy();
    let pair = spec.classes.iter().position(|c| c.name == "pair").unwrap();
    let mut seen = 0;
    for s in spec.split(SplitKind::Val, 60, 3).unwrap() {
        if s.labels[pair] != 1.0 {
            continue;
        }
        seen += 1;
        let m = s.class_mask(pair).unwrap();
        let cells: Vec<bool> = m.data().iter().map(|&v| v > 0.0).collect();
        let comps = components(&cells, s.height(), s.width());
        assert_eq!(comps.len(), 2, "sample {}", s.id);
        assert!(min_gap(&comps[0], &comps[1], s.width()) >= 4, "sample {}", s.id);
        let (a, b) = (comps[0].len() as f64, comps[1].len() as f64);
        assert!(a.max(b) <= 2.0 * a.min(b), "areas {a} and {b}");
    }
    assert!(seen >= 10);
}

#[test]
fn bias_broken_splits_decouple_foreground_and_background() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::toy();
    let (a, b) = bias_broken_splits(dir.path(), &spec, (9, 9), 5).unwrap();
    for s in Dataset::load(&a).unwrap().samples().unwrap() {
        let f = s.focus.unwrap();
        assert_eq!(s.background, spec.neutral_background);
        assert_eq!(s.labels[f], 1.0);
        assert!(s.class_mask(f).unwrap().sum() > 0.0);
    }
    let fg_split = Dataset::load(&a).unwrap().samples().unwrap();
    for s in Dataset::load(&b).unwrap().samples().unwrap() {
        let f = s.focus.unwrap();
        assert_eq!(s.background, spec.classes[f].correlated_background);
        assert!(s.labels.iter().all(|&y| y == 0.0));
        // no foreground pixel anywhere in the image
        assert!(s.mask.as_ref().unwrap().iter().all(|&v| v == 0));
        // and the correlated background never appears under a foreground split
        assert!(fg_split.iter().all(|t| t.background != s.background));
    }
}

#[test]
fn manifest_round_trip_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::toy();
    let paths = generate_dataset(dir.path(), &spec, &[(SplitKind::Val, 6)], 2).unwrap();
    let loaded = Dataset::load(&paths[0]).unwrap().samples().unwrap();
    let generated = spec.split(SplitKind::Val, 6, 2).unwrap();
    for (l, g) in loaded.iter().zip(&generated) {
        assert_eq!(l.labels, g.labels);
        assert_eq!(l.mask, g.mask);
        assert_eq!(l.bbox, g.bbox);
        // images go through 8-bit quantization
        assert!(l.image.max_abs_diff(&g.image) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(dir.path().join("nope.json")), Err(Error::Io { .. })));
}

#[test]
fn unsatisfiable_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { object_size: [40, 44], ..SceneSpec::toy() };
    assert!(generate_dataset(dir.path(), &spec, &[(SplitKind::Train, 2)], 0).is_err());
    let spec = SceneSpec { bias: vec![1.5; 3], ..SceneSpec::toy() };
    assert!(generate_dataset(dir.path(), &spec, &[(SplitKind::Train, 2)], 0).is_err());
}
