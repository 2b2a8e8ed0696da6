use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use uap_core::classifier::ClassifierAdapter;
use uap_core::dataset::{ingest, DatasetManifest, SplitOptions, SyntheticSpec};
use uap_core::eval::{
    evaluate, norm_sweep, selectivity, transfer_matrix, write_json, write_reports_csv,
    write_sweep_csv, DEFAULT_EVAL_BATCH,
};
use uap_core::pipeline::{run_train_stage, RunOptions};
use uap_core::registry::{train_classifier, Architecture, ModelSpec, Registry, DEFAULT_CNN_WIDTH};
use uap_core::saliency::{attention_image, WeightedAttentionImage, DEFAULT_BINARIZE_FRACTION};
use uap_core::{run_pipeline, Dataset32, Perturbation32, RefineConfig, RunConfig};

#[derive(Parser)]
#[command(name = "uap", version, about = "Universal adversarial perturbations with saliency refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, split and synthesize image datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train and list registry models.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Train a generator against a target and write `mid.uapf`.
    Train(TrainArgs),
    /// Aggregate binarized saliency maps into an attention image.
    Saliency(SaliencyArgs),
    /// Rescale a perturbation by an attention image.
    Refine(RefineArgs),
    /// Evaluate ASR and PM of a perturbation on one model.
    Eval(EvalArgs),
    /// Cross-model ASR matrix.
    Transfer(TransferArgs),
    /// Distribution of adversarial predictions over classes.
    Selectivity(SelectivityArgs),
    /// ASR as a function of the rescaled perturbation norm.
    Sweep(SweepArgs),
    /// Run train, saliency, refine and eval from one config.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long)]
    validation_cap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    validation_seed: u64,
}

impl SplitArgs {
    fn options(&self) -> SplitOptions {
        SplitOptions {
            split_seed: self.split_seed,
            train_per_class: self.train_per_class,
            validation_cap: self.validation_cap,
            validation_seed: self.validation_seed,
        }
    }
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Scan a folder-per-class root and write a split manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Re-split an existing manifest with new options.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Write the procedural desk dataset as PNG folders.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    ToyLinear,
    SmallCnn,
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Train a built-in architecture and register it.
    Train {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, value_enum, default_value_t = Arch::SmallCnn)]
        arch: Arch,
        #[arg(long, default_value_t = DEFAULT_CNN_WIDTH)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        saliency_layer: Option<String>,
    },
    /// Register externally trained weights described by a model spec (JSON).
    Add {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        spec: PathBuf,
    },
    /// List registered models.
    List {
        #[arg(long)]
        registry: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: Option<String>,
    /// Dataset manifest written by `uap dataset ingest`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct SaliencyArgs {
    #[command(flatten)]
    target: TargetArgs,
    /// Layer name; defaults to the model's saliency layer.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = DEFAULT_BINARIZE_FRACTION)]
    fraction: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write a grayscale PNG of the attention image.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    attn: PathBuf,
    #[arg(long, default_value_t = 1.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Attention threshold; the median attention value when omitted.
    #[arg(long = "T")]
    threshold: Option<f64>,
    #[arg(long)]
    no_reproject: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    perturbation: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EVAL_BATCH)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Target model ids.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<String>,
    /// Perturbation files, one row each.
    #[arg(long, value_delimiter = ',', required = true)]
    perturbations: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SelectivityArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    perturbation: PathBuf,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    perturbation: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    norms: Vec<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Recompute stages whose artifacts already exist.
        #[arg(long)]
        force: bool,
    },
}

fn load_data(path: &Path) -> Result<Dataset32> {
    let manifest = DatasetManifest::load(path)
        .with_context(|| format!("reading dataset manifest {}", path.display()))?;
    Ok(manifest.load_dataset()?)
}

fn load_target(t: &TargetArgs) -> Result<(uap_core::Classifier32, Dataset32)> {
    let registry = Registry::open(&t.registry)?;
    let model = registry.load::<f32>(&t.model)?;
    Ok((model, load_data(&t.data)?))
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn merge_config(
    config: &Path,
    model: Option<&String>,
    registry: Option<&PathBuf>,
    out: Option<&PathBuf>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)
        .with_context(|| format!("loading config {}", config.display()))?;
    RunConfig::merge_flag(&mut cfg.model, model, "model")?;
    RunConfig::merge_flag(&mut cfg.registry, registry, "registry")?;
    RunConfig::merge_flag(&mut cfg.out_dir, out, "out")?;
    Ok(cfg)
}

fn dataset(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Ingest { root, out, split } => {
            let m = ingest(&root, &split.options())?;
            m.save(&out)?;
            println!(
                "{} classes, {} train / {} validation images -> {}",
                m.class_names.len(),
                m.train_len(),
                m.validation_len(),
                out.display()
            );
        }
        DatasetCmd::Split {
            manifest,
            out,
            split,
        } => {
            let m = DatasetManifest::load(&manifest)?.resplit(&split.options())?;
            m.save(&out)?;
            println!(
                "{} train / {} validation images -> {}",
                m.train_len(),
                m.validation_len(),
                out.display()
            );
        }
        DatasetCmd::Synth {
            out,
            seed,
            classes,
            per_class,
            size,
        } => {
            let mut spec = SyntheticSpec::new(seed);
            spec.classes = classes.unwrap_or(spec.classes);
            spec.per_class = per_class.unwrap_or(spec.per_class);
            spec.size = size.unwrap_or(spec.size);
            spec.write_folder(&out)?;
            println!(
                "wrote {} images of {} to {}",
                spec.classes * spec.per_class,
                spec.shape(),
                out.display()
            );
        }
    }
    Ok(())
}

fn model(cmd: ModelCmd) -> Result<()> {
    match cmd {
        ModelCmd::Train {
            registry,
            data,
            id,
            arch,
            width,
            seed,
            epochs,
            learning_rate,
            saliency_layer,
        } => {
            let data = load_data(&data)?;
            let mut spec = match arch {
                Arch::SmallCnn => {
                    ModelSpec::small_cnn(&id, data.num_classes(), data.image_shape(), width, seed)
                }
                Arch::ToyLinear => {
                    ModelSpec::toy_linear(&id, data.num_classes(), data.image_shape(), seed)
                }
            };
            spec.saliency_layer = saliency_layer;
            if let Some(e) = epochs {
                spec.training.epochs = e;
            }
            if let Some(lr) = learning_rate {
                spec.training.learning_rate = lr;
            }
            let trained = train_classifier::<f32>(&spec, &data)?;
            let mut reg = Registry::open(&registry)?;
            reg.register(&spec, &trained.classifier, Some(trained.clean_accuracy))?;
            println!("{id}: clean accuracy {:.4}", trained.clean_accuracy);
        }
        ModelCmd::Add { registry, spec } => {
            let text = std::fs::read(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: ModelSpec = serde_json::from_slice(&text)?;
            if spec.architecture != Architecture::External {
                bail!("`model add` registers external weights; use `model train` for built-in architectures");
            }
            let mut reg = Registry::open(&registry)?;
            reg.register_external::<f32>(&spec)?;
            println!("registered {}", spec.model_id);
        }
        ModelCmd::List { registry } => {
            let reg = Registry::open(&registry)?;
            for (id, e) in &reg.manifest().models {
                let acc = e
                    .clean_accuracy
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{id}\t{:?}\t{}\tclean_acc={acc}\t{}",
                    e.spec.architecture,
                    e.spec.input_shape,
                    &e.parameter_hash[..12]
                );
            }
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = merge_config(&a.config, a.model.as_ref(), a.registry.as_ref(), a.out.as_ref())?;
    if a.data.is_some() && cfg.dataset.root.is_some() {
        bail!("--data conflicts with dataset.root in the config");
    }
    RunConfig::merge_flag(&mut cfg.dataset.manifest, a.data.as_ref(), "data")?;
    let path = run_train_stage(&cfg)?;
    println!("{}", path.display());
    Ok(())
}

fn saliency(a: SaliencyArgs) -> Result<()> {
    let (model, data) = load_target(&a.target)?;
    let attn = attention_image(&model, &data.train, a.layer.as_deref(), a.fraction)?;
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    attn.save(&a.out, &a.target.model, created)?;
    if let Some(png) = &a.png {
        attn.save_png(png)?;
    }
    println!(
        "attention over {} images ({}x{}) -> {}",
        attn.num_sources,
        attn.height,
        attn.width,
        a.out.display()
    );
    Ok(())
}

fn refine_cmd(a: RefineArgs) -> Result<()> {
    let mid = Perturbation32::load(&a.input)?;
    let container = uap_core::uapf::UapfContainer::read(&a.input)?;
    let attn = WeightedAttentionImage::<f32>::load(&a.attn)?;
    let cfg = RefineConfig {
        threshold: a.threshold,
        alpha: a.alpha,
        beta: a.beta,
        reproject: !a.no_reproject,
    };
    let fin = uap_core::refine(&mid, &attn, &cfg)?;
    let range = uap_core::PixelRange::new(
        container.header.pixel_lo as f32,
        container.header.pixel_hi as f32,
    )?;
    fin.save(&a.out, range)?;
    println!("{} (linf {:.4})", a.out.display(), fin.linf());
    Ok(())
}

fn perturbation_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (model, data) = load_target(&a.target)?;
    let p = Perturbation32::load(&a.perturbation)?;
    let snapshot = serde_json::json!({
        "registry": a.target.registry,
        "model": a.target.model,
        "data": a.target.data,
        "perturbation": a.perturbation,
        "batch_size": a.batch_size,
    });
    let report = evaluate(
        &model,
        &data.validation,
        &p,
        &perturbation_id(&a.perturbation),
        a.batch_size,
        snapshot,
    )?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if let Some(csv) = &a.csv {
        write_reports_csv(std::slice::from_ref(&report), csv)?;
    }
    print_json(&report)
}

fn transfer(a: TransferArgs) -> Result<()> {
    let registry = Registry::open(&a.registry)?;
    let data = load_data(&a.data)?;
    let models = a
        .models
        .iter()
        .map(|m| registry.load::<f32>(m))
        .collect::<uap_core::Result<Vec<_>>>()?;
    let targets: Vec<&dyn ClassifierAdapter<f32>> =
        models.iter().map(|m| m as &dyn ClassifierAdapter<f32>).collect();
    let sources = a
        .perturbations
        .iter()
        .map(|p| {
            let pert = Perturbation32::load(p)?;
            Ok((format!("{}:{}", pert.source_model_id, perturbation_id(p)), pert))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = transfer_matrix(&sources, &targets, &data.validation)?;
    if let Some(out) = &a.out {
        write_json(out, &m)?;
    }
    if let Some(csv) = &a.csv {
        m.write_csv(csv)?;
    }
    print_json(&m)
}

fn selectivity_cmd(a: SelectivityArgs) -> Result<()> {
    let (model, data) = load_target(&a.target)?;
    let p = Perturbation32::load(&a.perturbation)?;
    let dist = selectivity(&model, &data.validation, &p, &data.class_names)?;
    if let Some(out) = &a.out {
        write_json(out, &dist)?;
    }
    if let Some(csv) = &a.csv {
        dist.write_csv(csv)?;
    }
    print_json(&dist)?;
    println!("top_{}_mass = {:.4}", a.top_k, dist.top_k_mass(a.top_k));
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (model, data) = load_target(&a.target)?;
    let p = Perturbation32::load(&a.perturbation)?;
    let points = norm_sweep(&model, &data.validation, &p, &a.norms)?;
    if let Some(csv) = &a.csv {
        write_sweep_csv(&points, csv)?;
    }
    for pt in &points {
        println!("{:.3}\t{:.6}\t{:.4}", pt.norm, pt.scale, pt.asr);
    }
    Ok(())
}

fn pipeline(cmd: PipelineCmd) -> Result<()> {
    let PipelineCmd::Run {
        config,
        model,
        registry,
        out,
        force,
    } = cmd;
    let cfg = merge_config(&config, model.as_ref(), registry.as_ref(), out.as_ref())?;
    let outcome = run_pipeline(&cfg, RunOptions { force })?;
    for r in &outcome.report.reports {
        println!(
            "{}\t{}\tasr={:.4}\tpm={:.2}\tclean_acc={:.4}",
            r.model_id, r.stage, r.asr, r.pm, r.clean_accuracy
        );
    }
    println!(
        "noise baseline asr={:.4}; report in {}",
        outcome.report.noise_baseline.mean_asr,
        outcome.out_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(c) => dataset(c),
        Command::Model(c) => model(c),
        Command::Train(a) => train(a),
        Command::Saliency(a) => saliency(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Transfer(a) => transfer(a),
        Command::Selectivity(a) => selectivity_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Pipeline(c) => pipeline(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn comma_separated_lists_parse() {
        let cli = Cli::try_parse_from([
            "uap", "sweep", "--registry", "r", "--model", "m", "--data", "d", "--perturbation",
            "p.uapf", "--norms", "1,2.5,10",
        ])
        .unwrap();
        let Command::Sweep(a) = cli.command else {
            panic!("expected sweep");
        };
        assert_eq!(a.norms, [1.0, 2.5, 10.0]);
    }
}
