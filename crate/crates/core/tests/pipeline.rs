use bdefs::pipeline::data::{load_features, load_images, save_features, save_images};
use bdefs::pipeline::report::{emit_reports, load_summary, verify_report};
use bdefs::pipeline::synth::{FeatureSynth, ImageSynth};
use bdefs::pipeline::{run_pipeline, Method, PipelineConfig, SplitName};

fn small_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        runs: 3,
        pop_size: 6,
        generations: 5,
        ..Default::default()
    }
}

#[test]
fn feature_csv_round_trip_is_exact() {
    let ds = FeatureSynth {
        samples: 40,
        dim: 5,
        informative: 2,
        seed: 11,
        ..Default::default()
    }
    .generate()
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("f.csv");
    save_features(&ds, &path).unwrap();
    let back = load_features(&path, None).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.features(), ds.features());
}

#[test]
fn image_directory_round_trip() {
    let ds = ImageSynth {
        samples: 12,
        height: 10,
        width: 9,
        seed: 5,
        ..Default::default()
    }
    .generate()
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_images(&ds, tmp.path()).unwrap();
    let back = load_images(tmp.path()).unwrap();
    assert_eq!(back.class_counts(), ds.class_counts());
    assert_eq!(back.class_names, ds.class_names);
    let img = &back.images().unwrap()[0];
    assert_eq!((img.height(), img.width(), img.channels()), (10, 9, 1));
    // 8-bit storage: within half a grey level of the original.
    let orig = ds
        .images()
        .unwrap()
        .iter()
        .zip(&ds.labels)
        .find(|(_, &l)| l == back.labels[0])
        .unwrap()
        .0;
    for (a, b) in img.data().iter().zip(orig.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn pipeline_is_deterministic_and_reports_verify() {
    let ds = FeatureSynth {
        samples: 80,
        dim: 8,
        informative: 3,
        seed: 3,
        ..Default::default()
    }
    .generate()
    .unwrap();
    let a = run_pipeline(&small_config(3), &ds).unwrap();
    let b = run_pipeline(&small_config(3), &ds).unwrap();
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.summary.runs.len(), 3);
    assert!(a.summary.failures.is_empty());
    for split in SplitName::ALL {
        for method in Method::ALL {
            assert!(
                a.summary.result(split, method).is_some(),
                "{split} {method}"
            );
        }
    }

    let tmp = tempfile::tempdir().unwrap();
    emit_reports(&a, tmp.path()).unwrap();
    assert_eq!(
        load_summary(&tmp.path().join("summary.json")).unwrap(),
        a.summary
    );
    let v = verify_report(tmp.path()).unwrap();
    assert!(v.is_ok(), "{:?}", v.mismatches);
    for r in 1..=3 {
        assert!(tmp.path().join(format!("de_history_run{r}.csv")).exists());
    }
}

#[test]
fn different_seeds_give_different_runs() {
    let ds = FeatureSynth {
        samples: 80,
        dim: 8,
        informative: 3,
        seed: 3,
        ..Default::default()
    }
    .generate()
    .unwrap();
    let a = run_pipeline(&small_config(1), &ds).unwrap();
    let b = run_pipeline(&small_config(2), &ds).unwrap();
    let seeds = |s: &bdefs::pipeline::Summary| s.runs.iter().map(|r| r.seed).collect::<Vec<_>>();
    assert_ne!(seeds(&a.summary), seeds(&b.summary));
}
