use std::collections::BTreeSet;
use std::path::Path;

use eimcil::harness::data::{parse_idx_images, parse_idx_labels, IDX_IMAGES_GRAY, IDX_LABELS};
use eimcil::harness::{
    cli, encode_idx_images, encode_idx_labels, load_idx_dataset, run_incremental, run_initial_stage,
    split_class_incremental, Dataset, ExperimentConfig, ExperimentData, METRICS_HEADER,
};
use eimcil::{Error, IdxError};
use proptest::prelude::*;

fn be(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_be_bytes()).collect()
}

/// Four 2×3 grayscale images with labels 0, 2, 1, 2.
fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut images = be(&[IDX_IMAGES_GRAY, 4, 2, 3]);
    images.extend((0..24u8).map(|v| v * 10));
    let mut labels = be(&[IDX_LABELS, 4]);
    labels.extend([0u8, 2, 1, 2]);
    let (ip, lp) = (dir.join("img.idx"), dir.join("lbl.idx"));
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    (ip, lp)
}

#[test]
fn idx_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = fixture(dir.path());
    let ds = load_idx_dataset(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.shape(), [1, 2, 3]);
    assert_eq!(ds.labels(), &[0, 2, 1, 2]);
    assert_eq!(ds.class_count(), 3);
    assert_eq!(ds.pixels(2), &[120, 130, 140, 150, 160, 170]);
    let x = ds.image(0);
    assert_eq!(x.shape(), &[1, 2, 3]);
    assert_eq!(x.data()[0], -1.0);
    assert!((x.data()[5] - (50.0 / 127.5 - 1.0)).abs() < 1e-15);
}

#[test]
fn idx_label_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = fixture(dir.path());
    let mut labels = be(&[IDX_LABELS, 3]);
    labels.extend([0u8, 1, 1]);
    std::fs::write(&lp, labels).unwrap();
    match load_idx_dataset(&ip, &lp) {
        Err(Error::Idx { source, .. }) => {
            assert_eq!(source, IdxError::CountMismatch { images: 4, labels: 3 })
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn idx_malformed_files() {
    assert_eq!(parse_idx_images(&[]).unwrap_err(), IdxError::Empty);
    assert_eq!(parse_idx_labels(&[]).unwrap_err(), IdxError::Empty);
    assert!(matches!(
        parse_idx_images(&be(&[0x0000_0802, 1, 1, 1])).unwrap_err(),
        IdxError::BadMagic { found: 0x802, .. }
    ));
    assert!(matches!(
        parse_idx_labels(&be(&[IDX_IMAGES_GRAY, 1])).unwrap_err(),
        IdxError::BadMagic { .. }
    ));
    let mut short = be(&[IDX_IMAGES_GRAY, 2, 2, 2]);
    short.extend([1u8; 7]);
    assert_eq!(
        parse_idx_images(&short).unwrap_err(),
        IdxError::Truncated {
            expected: 24,
            found: 23
        }
    );
    assert!(matches!(
        parse_idx_images(&be(&[IDX_IMAGES_GRAY, 2])).unwrap_err(),
        IdxError::Truncated { .. }
    ));
    assert_eq!(
        parse_idx_images(&be(&[IDX_IMAGES_GRAY, 1, 0, 2])).unwrap_err(),
        IdxError::ZeroDimension(1)
    );
    let mut extra = be(&[IDX_LABELS, 1]);
    extra.extend([1u8, 2]);
    assert!(matches!(
        parse_idx_labels(&extra).unwrap_err(),
        IdxError::Truncated { .. }
    ));

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::write(&empty, []).unwrap();
    let (_, lp) = fixture(dir.path());
    assert!(matches!(
        load_idx_dataset(&empty, &lp),
        Err(Error::Idx {
            source: IdxError::Empty,
            ..
        })
    ));
    assert!(matches!(
        load_idx_dataset(dir.path().join("nope"), &lp),
        Err(Error::Io(_))
    ));
}

#[test]
fn colour_idx_round_trip() {
    let pixels: Vec<u8> = (0..2 * 3 * 2 * 2).map(|v| (v * 7 % 256) as u8).collect();
    let ds = Dataset::new(pixels, [3, 2, 2], vec![1, 0], 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, encode_idx_images(&ds)).unwrap();
    std::fs::write(&lp, encode_idx_labels(&ds).unwrap()).unwrap();
    assert_eq!(load_idx_dataset(&ip, &lp).unwrap(), ds);
}

proptest! {
    #[test]
    fn phase_split_partitions_classes(classes in 2usize..60, phases in 1usize..10, seed in any::<u64>()) {
        match split_class_incremental(classes, phases, seed) {
            Ok(plan) => {
                prop_assert_eq!(plan.initial_classes.len(), classes / 2);
                prop_assert_eq!(plan.phases.len(), phases);
                prop_assert!(plan.phases.iter().all(|p| !p.is_empty()));
                let order = plan.order();
                let set: BTreeSet<usize> = order.iter().copied().collect();
                prop_assert_eq!(order.len(), classes);
                prop_assert_eq!(set, (0..classes).collect::<BTreeSet<_>>());
            }
            Err(e) => prop_assert!(classes - classes / 2 < phases, "{}", e),
        }
    }
}

fn tiny_overrides() -> Vec<String> {
    [
        "synthetic.classes=4",
        "synthetic.train_per_class=6",
        "synthetic.test_per_class=4",
        "synthetic.size=8",
        "model.stage_channels=4,8",
        "model.blocks_per_stage=1,1",
        "model.feature_dim=8",
        "initial_epochs=2",
        "incremental_epochs=2",
        "prune_at_epoch=1",
        "batch_size=4",
        "phases=2",
        "probe_size=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli(
        std::iter::once("eimcil").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

#[test]
fn cli_count_reports_halved_budget() {
    let (code, out, _) = run_cli(&["count"]);
    assert_eq!(code, 0);
    for line in out.lines() {
        let ratio: f64 = line.rsplit("ratio=").next().unwrap().parse().unwrap();
        assert!(ratio < 0.55 && ratio > 0.45, "{line}");
    }
    assert_eq!(out.lines().count(), 2);
}

#[test]
fn cli_exit_codes() {
    assert_eq!(run_cli(&["--help"]).0, 0);
    assert_eq!(run_cli(&["frobnicate"]).0, 1);
    let (code, _, err) = run_cli(&["count", "--set", "kep_ratio=0.5"]);
    assert_eq!(code, 1);
    assert!(err.contains("keep_ratio"), "{err}");
    assert_eq!(run_cli(&["count", "--set", "keep_ratio=1.5"]).0, 1);
    let (code, _, err) = run_cli(&["count", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn cli_incremental_run_echoes_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec![
        "incr-run".into(),
        "--out".into(),
        dir.path().display().to_string(),
    ];
    for s in tiny_overrides().into_iter().chain(["keep_ratio=0.7".to_string()]) {
        args.push("--set".into());
        args.push(s);
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, out, err) = run_cli(&refs);
    assert_eq!(code, 0, "{err}");
    assert!(out.lines().any(|l| l == "# keep_ratio = 0.7"), "{out}");
    let csv: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(csv[0], METRICS_HEADER);
    assert_eq!(csv.len(), 1 + 3);
    let on_disk = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(on_disk.lines().collect::<Vec<_>>(), csv);
    for f in [
        "timing.csv",
        "config.txt",
        "train_log.csv",
        "final.ckpt",
        "prototypes.lpro",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn untrained_phase_leaves_old_heads_alone() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    for s in tiny_overrides() {
        cfg.apply_override(&s).unwrap();
    }
    cfg.apply_override("phases=1").unwrap();
    cfg.apply_override("incremental_epochs=0").unwrap();
    cfg.apply_override("prune_at_epoch=0").unwrap();
    cfg.apply_override("keep_ratio=1").unwrap();
    cfg.out_dir = dir.path().to_path_buf();
    cfg.validate().unwrap();
    let data = ExperimentData::load(&cfg).unwrap();
    let plan = split_class_incremental(data.class_count(), cfg.phases, cfg.seed).unwrap();
    let initial = run_initial_stage(&cfg, &data, &plan).unwrap();
    let before = initial.model.clone();
    let report = run_incremental(&cfg, &data, &plan, initial).unwrap();
    assert_eq!(report.phases.len(), 2);
    assert_eq!(report.metrics_csv.lines().count(), 3);
    let k0 = before.num_classes();
    for i in 0..data.test.len() {
        let x = data.test.image(i);
        let old = before.classify(&x).unwrap();
        let new = report.final_model.classify(&x).unwrap();
        assert_eq!(&new.data()[..k0], old.data());
    }
    let id = report.phases[1].identity.unwrap();
    assert_eq!(id.max_kd, 0.0);
    assert!(id.old_logits_bit_equal);
    assert_eq!(report.phases[1].retained_samples, 2 * 6);
    assert!(report.metrics_csv.lines().skip(1).all(|l| l.ends_with(",NA")));
}
