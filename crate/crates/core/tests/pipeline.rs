use std::fs;
use std::path::Path;

use uap_core::dataset::{ingest, SplitOptions, SyntheticSpec};
use uap_core::pipeline::{
    run_pipeline, ErrorReport, PipelineReport, PipelineStage, RunOptions, ATTN_FILE, ERROR_FILE,
    FIN_FILE, MID_FILE, REPORT_FILE,
};
use uap_core::registry::{train_classifier, ModelSpec, Registry};
use uap_core::{Perturbation32, RunConfig, Stage};

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 3,
        per_class: 10,
        size: 8,
        ..SyntheticSpec::new(5)
    }
}

/// Writes a dataset manifest and a registry with one small CNN; returns the manifest path.
fn setup(root: &Path) -> std::path::PathBuf {
    let images = root.join("images");
    tiny_spec().write_folder(&images).unwrap();
    let manifest = ingest(&images, &SplitOptions::new(1, 4)).unwrap();
    let manifest_path = root.join("data.json");
    manifest.save(&manifest_path).unwrap();
    let data = manifest.load_dataset::<f32>().unwrap();
    let mut spec = ModelSpec::small_cnn("cnn", 3, data.image_shape(), 2, 0);
    spec.training.epochs = 2;
    let trained = train_classifier::<f32>(&spec, &data).unwrap();
    let mut reg = Registry::open(&root.join("registry")).unwrap();
    reg.register(&spec, &trained.classifier, Some(trained.clean_accuracy))
        .unwrap();
    manifest_path
}

fn config(root: &Path, manifest: &Path, model: &str) -> RunConfig {
    let text = format!(
        r#"
        model = "{model}"
        registry = "{registry}"
        out_dir = "{out}"
        created_unix = 1700000000
        [dataset]
        manifest = "{manifest}"
        [generator]
        depth = 1
        base_channels = 4
        noise_seed = 3
        init_seed = 4
        [train]
        epochs = 2
        shuffle_seed = 5
        [eval]
        noise_seeds = [0, 1]
        sweep_norms = [1.0, 50.0]
        transfer_models = ["cnn"]
        "#,
        registry = root.join("registry").display(),
        out = root.join("run").display(),
        manifest = manifest.display(),
    );
    RunConfig::from_toml(&text).unwrap()
}

#[test]
fn full_run_writes_every_artifact_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let cfg = config(dir.path(), &manifest, "cnn");
    let out = dir.path().join("run");

    let first = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert_eq!(
        first.ran,
        vec![
            PipelineStage::Train,
            PipelineStage::Saliency,
            PipelineStage::Refine,
            PipelineStage::Eval
        ]
    );
    for f in [MID_FILE, ATTN_FILE, FIN_FILE, REPORT_FILE, "attn.png", "train_log.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: PipelineReport =
        serde_json::from_slice(&fs::read(out.join(REPORT_FILE)).unwrap()).unwrap();
    let stages: Vec<&str> = report.reports.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, ["mid", "fin"]);
    assert_eq!(report.config_snapshot, cfg.snapshot());
    assert_eq!(report.sweep.len(), 2);
    assert_eq!(report.transfer.as_ref().unwrap().asr.len(), 2);
    let total: f64 = report.selectivity.fractions.iter().sum();
    assert!((total - 1.0).abs() < 1e-9);

    let fin = Perturbation32::load(&out.join(FIN_FILE)).unwrap();
    assert_eq!(fin.stage, Stage::Fin);
    assert!(fin.linf() <= 10.0);

    // a run interrupted after refinement resumes at evaluation
    let mid_bytes = fs::read(out.join(MID_FILE)).unwrap();
    fs::remove_file(out.join(REPORT_FILE)).unwrap();
    let second = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert_eq!(second.ran, vec![PipelineStage::Eval]);
    assert_eq!(second.report, first.report);
    assert_eq!(fs::read(out.join(MID_FILE)).unwrap(), mid_bytes);

    // forcing recomputes and, with fixed seeds, reproduces the bytes
    let third = run_pipeline(&cfg, RunOptions { force: true }).unwrap();
    assert_eq!(third.ran.len(), 4);
    assert_eq!(fs::read(out.join(MID_FILE)).unwrap(), mid_bytes);
}

#[test]
fn unknown_model_fails_at_startup_with_error_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let cfg = config(dir.path(), &manifest, "missing");
    let err = run_pipeline(&cfg, RunOptions::default()).unwrap_err();
    assert_eq!(err.stage, PipelineStage::Startup);
    let out = dir.path().join("run");
    let report: ErrorReport =
        serde_json::from_slice(&fs::read(out.join(ERROR_FILE)).unwrap()).unwrap();
    assert_eq!(report.stage, PipelineStage::Startup);
    assert!(report.message.contains("missing"));
    assert!(!out.join(MID_FILE).exists());
}

#[test]
fn foreign_artifact_is_rejected_instead_of_reused() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let cfg = config(dir.path(), &manifest, "cnn");
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let other = Perturbation32::new(
        vec![0.0; 8 * 8 * 3],
        uap_core::ImageShape::new(8, 8, 3),
        10.0,
        Stage::Mid,
        "other",
    )
    .unwrap();
    other.save(&out.join(MID_FILE), Default::default()).unwrap();
    let err = run_pipeline(&cfg, RunOptions::default()).unwrap_err();
    assert_eq!(err.stage, PipelineStage::Train);
    assert!(out.join(ERROR_FILE).exists());
}
