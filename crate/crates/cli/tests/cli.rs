use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn uap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uap"))
        .args(args)
        .output()
        .expect("spawn uap")
}

fn ok(args: &[&str]) -> String {
    let out = uap(args);
    assert!(
        out.status.success(),
        "uap {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Synthesizes a tiny dataset, ingests it and trains one small CNN.
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let images = ws.path("images");
        ok(&[
            "dataset", "synth", "--out", s(&images), "--seed", "3", "--classes", "3",
            "--per-class", "8", "--size", "8",
        ]);
        ok(&[
            "dataset", "ingest", "--root", s(&images), "--out", s(&ws.path("data.json")),
            "--train-per-class", "4", "--split-seed", "1",
        ]);
        let out = ok(&[
            "model", "train", "--registry", s(&ws.path("reg")), "--data", s(&ws.path("data.json")),
            "--id", "cnn", "--width", "2", "--epochs", "2",
        ]);
        assert!(out.starts_with("cnn: clean accuracy"), "{out}");
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, extra: &str) -> PathBuf {
        let text = format!(
            r#"
            created_unix = 1700000000
            {extra}
            [dataset]
            manifest = "{data}"
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
            sweep_norms = [1.0, 40.0]
            "#,
            data = self.path("data.json").display()
        );
        let path = self.path("run.toml");
        fs::write(&path, text).unwrap();
        path
    }

    fn run_pipeline(&self) -> PathBuf {
        let cfg = self.config("");
        let out = self.path("run");
        ok(&[
            "pipeline", "run", "--config", s(&cfg), "--model", "cnn", "--registry",
            s(&self.path("reg")), "--out", s(&out),
        ]);
        out
    }

    fn target<'a>(&'a self, reg: &'a Path, data: &'a Path) -> [&'a str; 6] {
        ["--registry", s(reg), "--model", "cnn", "--data", s(data)]
    }
}

#[test]
fn pipeline_run_writes_reports_and_model_list_shows_model() {
    let ws = Workspace::new();
    let listing = ok(&["model", "list", "--registry", s(&ws.path("reg"))]);
    assert!(listing.starts_with("cnn\tSmallCnn"), "{listing}");

    let out = ws.run_pipeline();
    for f in ["mid.uapf", "attn.uapf", "fin.uapf", "report.json", "report.csv", "sweep.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["model_id"], "cnn");
    assert_eq!(report["reports"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn flag_conflicting_with_config_is_rejected() {
    let ws = Workspace::new();
    let cfg = ws.config(r#"model = "cnn""#);
    let out = uap(&["pipeline", "run", "--config", s(&cfg), "--model", "other"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model"), "{err}");

    let same = uap(&[
        "pipeline", "run", "--config", s(&cfg), "--model", "cnn", "--registry",
        s(&ws.path("reg")), "--out", s(&ws.path("run")),
    ]);
    assert!(same.status.success(), "{}", String::from_utf8_lossy(&same.stderr));
}

#[test]
fn missing_model_exits_nonzero_with_error_report() {
    let ws = Workspace::new();
    let cfg = ws.config("");
    let out_dir = ws.path("run");
    let out = uap(&[
        "pipeline", "run", "--config", s(&cfg), "--model", "ghost", "--registry",
        s(&ws.path("reg")), "--out", s(&out_dir),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out_dir.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["stage"], "startup");
}

#[test]
fn stage_commands_work_on_pipeline_artifacts() {
    let ws = Workspace::new();
    let run = ws.run_pipeline();
    let (reg, data) = (ws.path("reg"), ws.path("data.json"));
    let t = ws.target(&reg, &data);
    let mid = run.join("mid.uapf");

    let attn = ws.path("attn.uapf");
    let png = ws.path("attn.png");
    let mut args = vec!["saliency"];
    args.extend(t);
    args.extend(["--out", s(&attn), "--png", s(&png)]);
    ok(&args);
    assert!(png.exists());

    // T = 0 puts every pixel in the amplified set
    let fin = ws.path("fin.uapf");
    let refined = ok(&["refine", "--in", s(&mid), "--attn", s(&attn), "--T", "0", "--out", s(&fin)]);
    assert!(refined.contains("linf"));
    assert_eq!(&fs::read(&fin).unwrap()[..4], b"UAPF");

    let mut args = vec!["eval"];
    args.extend(t);
    let eval_csv = ws.path("eval.csv");
    args.extend(["--perturbation", s(&fin), "--csv", s(&eval_csv)]);
    let report: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(report["stage"], "fin");
    assert!(fs::read_to_string(&eval_csv).unwrap().starts_with("model_id,"));

    let mut args = vec!["selectivity"];
    args.extend(t);
    args.extend(["--perturbation", s(&mid)]);
    assert!(ok(&args).contains("top_3_mass = "));

    let mut args = vec!["sweep"];
    args.extend(t);
    let sweep_csv = ws.path("sweep.csv");
    args.extend(["--perturbation", s(&mid), "--norms", "1,10,100", "--csv", s(&sweep_csv)]);
    assert_eq!(ok(&args).lines().count(), 3);
    assert_eq!(fs::read_to_string(&sweep_csv).unwrap().lines().count(), 4);

    let perts = format!("{},{}", s(&mid), s(&fin));
    let m: serde_json::Value = serde_json::from_str(&ok(&[
        "transfer", "--registry", s(&reg), "--data", s(&data), "--models", "cnn",
        "--perturbations", &perts,
    ]))
    .unwrap();
    assert_eq!(m["asr"].as_array().unwrap().len(), 2);
}

#[test]
fn dataset_split_rewrites_manifest() {
    let ws = Workspace::new();
    let out = ws.path("resplit.json");
    let msg = ok(&[
        "dataset", "split", "--manifest", s(&ws.path("data.json")), "--out", s(&out),
        "--train-per-class", "2", "--split-seed", "9",
    ]);
    assert!(msg.starts_with("6 train / 18 validation"), "{msg}");
}

#[test]
fn invalid_refine_parameters_fail_cleanly() {
    let ws = Workspace::new();
    let run = ws.run_pipeline();
    let out = uap(&[
        "refine", "--in", s(&run.join("mid.uapf")), "--attn", s(&run.join("attn.uapf")),
        "--alpha", "0.5", "--out", s(&ws.path("x.uapf")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}
