//! End-to-end run: train → saliency → refine → evaluate, with one artifact per
//! stage in the output directory. Existing artifacts are reused, so a run that
//! stopped after refinement resumes at evaluation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierAdapter, NetworkClassifier};
use crate::config::{DatasetSection, RunConfig};
use crate::data::{LabeledDataset, Perturbation, Stage};
use crate::dataset::{ingest, DatasetManifest};
use crate::error::{Result, UapError};
use crate::eval::{
    evaluate, norm_sweep, random_noise_baseline, selectivity, transfer_matrix, write_json,
    write_reports_csv, write_sweep_csv, EvaluationReport, SelectivityDistribution, SweepPoint,
    TransferMatrix,
};
use crate::generator::build_generator;
use crate::refine::{choose_threshold, refine};
use crate::registry::Registry;
use crate::saliency::{attention_image, WeightedAttentionImage};
use crate::trainer::train_uap;

pub const MID_FILE: &str = "mid.uapf";
pub const ATTN_FILE: &str = "attn.uapf";
pub const ATTN_PNG: &str = "attn.png";
pub const FIN_FILE: &str = "fin.uapf";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const CHECKPOINT_FILE: &str = "generator.weights.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SELECTIVITY_CSV: &str = "selectivity.csv";
pub const TRANSFER_CSV: &str = "transfer.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const ERROR_FILE: &str = "error.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Startup,
    Train,
    Saliency,
    Refine,
    Eval,
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PipelineStage::Startup => "startup",
            PipelineStage::Train => "train",
            PipelineStage::Saliency => "saliency",
            PipelineStage::Refine => "refine",
            PipelineStage::Eval => "eval",
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: PipelineStage,
    pub source: UapError,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Contents of `error.json` written when a run fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub stage: PipelineStage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBaseline {
    pub epsilon: f64,
    pub seeds: Vec<u64>,
    pub mean_asr: f64,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub model_id: String,
    /// Evaluation of the `mid` and `fin` perturbations, in that order.
    pub reports: Vec<EvaluationReport>,
    pub threshold: f64,
    pub noise_baseline: NoiseBaseline,
    pub selectivity: SelectivityDistribution,
    pub transfer: Option<TransferMatrix>,
    pub sweep: Vec<SweepPoint>,
    pub config_snapshot: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub report: PipelineReport,
    pub ran: Vec<PipelineStage>,
    pub reused: Vec<PipelineStage>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Recompute every stage even when its artifact exists.
    pub force: bool,
}

/// Loads the dataset described by a config section.
pub fn load_dataset(section: &DatasetSection) -> Result<LabeledDataset<f32>> {
    let manifest = match (&section.manifest, &section.root) {
        (Some(m), _) => DatasetManifest::load(m)?,
        (None, Some(root)) => ingest(root, &section.split_options())?,
        (None, None) => {
            return Err(UapError::InvalidConfig(
                "dataset.root or dataset.manifest is required".into(),
            ))
        }
    };
    manifest.load_dataset()
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Context {
    cfg: RunConfig,
    model_id: String,
    out: PathBuf,
    registry: Registry,
    target: NetworkClassifier<f32>,
    data: LabeledDataset<f32>,
    created_unix: u64,
}

fn startup(cfg: &RunConfig) -> Result<Context> {
    cfg.validate()?;
    let model_id = cfg
        .model
        .clone()
        .ok_or_else(|| UapError::InvalidConfig("no target model id given".into()))?;
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| UapError::InvalidConfig("no output directory given".into()))?;
    let registry_root = cfg
        .registry
        .clone()
        .ok_or_else(|| UapError::InvalidConfig("no registry directory given".into()))?;
    let registry = Registry::open(&registry_root)?;
    registry.entry(&model_id)?;
    for m in &cfg.eval.transfer_models {
        registry.entry(m)?;
    }
    let target = registry.load::<f32>(&model_id)?;
    if !target.supports_input_gradient() {
        return Err(UapError::NoInputGradient(model_id));
    }
    let data = load_dataset(&cfg.dataset)?;
    if data.image_shape() != target.input_shape() {
        return Err(UapError::shape(target.input_shape(), data.image_shape()));
    }
    if data.num_classes() != target.num_classes() {
        return Err(UapError::shape(
            format!("{} classes", target.num_classes()),
            format!("{} classes", data.num_classes()),
        ));
    }
    Ok(Context {
        cfg: cfg.clone(),
        model_id,
        out,
        registry,
        target,
        data,
        created_unix: cfg.created_unix.unwrap_or_else(now_unix),
    })
}

/// Runs every stage, writing `error.json` in the output directory on failure.
pub fn run_pipeline(
    cfg: &RunConfig,
    options: RunOptions,
) -> std::result::Result<PipelineOutcome, PipelineError> {
    let result = startup(cfg)
        .map_err(|source| PipelineError {
            stage: PipelineStage::Startup,
            source,
        })
        .and_then(|ctx| {
            std::fs::create_dir_all(&ctx.out)
                .map_err(|e| PipelineError {
                    stage: PipelineStage::Startup,
                    source: UapError::io(&ctx.out, e),
                })
                .and_then(|_| run_stages(&ctx, options))
        });
    if let Err(e) = &result {
        if let Some(dir) = &cfg.out_dir {
            let report = ErrorReport {
                stage: e.stage,
                message: e.source.to_string(),
            };
            if std::fs::create_dir_all(dir).is_ok() {
                if let Err(w) = write_json(&dir.join(ERROR_FILE), &report) {
                    log::error!("could not write error report: {w}");
                }
            }
        }
    }
    result
}

/// Runs only the training stage, always retraining, and returns the path of
/// the written `mid` perturbation.
pub fn run_train_stage(cfg: &RunConfig) -> Result<PathBuf> {
    let ctx = startup(cfg)?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| UapError::io(&ctx.out, e))?;
    train_stage(&ctx, true)?;
    Ok(ctx.out.join(MID_FILE))
}

fn at<T>(stage: PipelineStage, r: Result<T>) -> std::result::Result<T, PipelineError> {
    r.map_err(|source| PipelineError { stage, source })
}

fn run_stages(
    ctx: &Context,
    options: RunOptions,
) -> std::result::Result<PipelineOutcome, PipelineError> {
    let mut ran = Vec::new();
    let mut reused = Vec::new();
    let mut track = |stage: PipelineStage, fresh: bool| {
        if fresh {
            ran.push(stage)
        } else {
            reused.push(stage)
        }
    };
    let stale_error = ctx.out.join(ERROR_FILE);
    if stale_error.exists() {
        let _ = std::fs::remove_file(&stale_error);
    }

    let reuse = |name: &str| !options.force && ctx.out.join(name).exists();

    let fresh = !reuse(MID_FILE);
    let mid = at(PipelineStage::Train, train_stage(ctx, fresh))?;
    track(PipelineStage::Train, fresh);

    let fresh = !reuse(ATTN_FILE);
    let attn = at(PipelineStage::Saliency, saliency_stage(ctx, fresh))?;
    track(PipelineStage::Saliency, fresh);

    let fresh = !reuse(FIN_FILE);
    let fin = at(PipelineStage::Refine, refine_stage(ctx, &mid, &attn, fresh))?;
    track(PipelineStage::Refine, fresh);

    let threshold = ctx
        .cfg
        .refine
        .threshold
        .unwrap_or_else(|| choose_threshold(&attn));
    let report = at(PipelineStage::Eval, eval_stage(ctx, &mid, &fin, threshold))?;
    track(PipelineStage::Eval, true);

    Ok(PipelineOutcome {
        out_dir: ctx.out.clone(),
        report,
        ran,
        reused,
    })
}

fn check_artifact(p: &Perturbation<f32>, ctx: &Context, stage: Stage, path: &Path) -> Result<()> {
    if p.stage != stage || p.source_model_id != ctx.model_id || p.shape != ctx.data.image_shape() {
        return Err(UapError::Format(format!(
            "{} holds a {} perturbation for `{}` ({}); expected {stage} for `{}` ({}). \
             Use a fresh output directory or force a rerun",
            path.display(),
            p.stage,
            p.source_model_id,
            p.shape,
            ctx.model_id,
            ctx.data.image_shape()
        )));
    }
    Ok(())
}

fn train_stage(ctx: &Context, fresh: bool) -> Result<Perturbation<f32>> {
    let path = ctx.out.join(MID_FILE);
    if !fresh {
        log::info!("reusing {}", path.display());
        let p = Perturbation::load(&path)?;
        check_artifact(&p, ctx, Stage::Mid, &path)?;
        return Ok(p);
    }
    let gcfg = ctx.cfg.generator_config(ctx.data.image_shape());
    let mut gen = build_generator::<f32>(&gcfg)?;
    let (mid, log) = train_uap(&mut gen, &ctx.target, &ctx.data.train, &ctx.cfg.train)?;
    let mid = mid.with_created_unix(ctx.created_unix);
    gen.save_checkpoint(&ctx.out.join(CHECKPOINT_FILE), ctx.cfg.train.epochs)?;
    write_json(&ctx.out.join(TRAIN_LOG_FILE), &log)?;
    mid.save(&path, ctx.data.train.images.range())?;
    Ok(mid)
}

fn saliency_stage(ctx: &Context, fresh: bool) -> Result<WeightedAttentionImage<f32>> {
    let path = ctx.out.join(ATTN_FILE);
    if !fresh {
        log::info!("reusing {}", path.display());
        return WeightedAttentionImage::load(&path);
    }
    let attn = attention_image(
        &ctx.target,
        &ctx.data.train,
        ctx.cfg.saliency.layer.as_deref(),
        ctx.cfg.saliency.fraction,
    )?;
    attn.save(&path, &ctx.model_id, ctx.created_unix)?;
    attn.save_png(&ctx.out.join(ATTN_PNG))?;
    Ok(attn)
}

fn refine_stage(
    ctx: &Context,
    mid: &Perturbation<f32>,
    attn: &WeightedAttentionImage<f32>,
    fresh: bool,
) -> Result<Perturbation<f32>> {
    let path = ctx.out.join(FIN_FILE);
    if !fresh {
        log::info!("reusing {}", path.display());
        let p = Perturbation::load(&path)?;
        check_artifact(&p, ctx, Stage::Fin, &path)?;
        return Ok(p);
    }
    let fin = refine(mid, attn, &ctx.cfg.refine)?;
    fin.save(&path, ctx.data.train.images.range())?;
    Ok(fin)
}

fn eval_stage(
    ctx: &Context,
    mid: &Perturbation<f32>,
    fin: &Perturbation<f32>,
    threshold: f64,
) -> Result<PipelineReport> {
    let val = &ctx.data.validation;
    let snapshot = ctx.cfg.snapshot();
    let batch = ctx.cfg.eval.batch_size;
    let reports = vec![
        evaluate(&ctx.target, val, mid, MID_FILE, batch, snapshot.clone())?,
        evaluate(&ctx.target, val, fin, FIN_FILE, batch, snapshot.clone())?,
    ];
    let noise_baseline = NoiseBaseline {
        epsilon: ctx.cfg.train.epsilon,
        seeds: ctx.cfg.eval.noise_seeds.clone(),
        mean_asr: random_noise_baseline(
            &ctx.target,
            val,
            ctx.cfg.train.epsilon,
            &ctx.cfg.eval.noise_seeds,
        )?,
    };
    let sel = selectivity(&ctx.target, val, fin, &ctx.data.class_names)?;
    sel.write_csv(&ctx.out.join(SELECTIVITY_CSV))?;

    let transfer = if ctx.cfg.eval.transfer_models.is_empty() {
        None
    } else {
        let others = ctx
            .cfg
            .eval
            .transfer_models
            .iter()
            .map(|m| ctx.registry.load::<f32>(m))
            .collect::<Result<Vec<_>>>()?;
        let mut targets: Vec<&dyn ClassifierAdapter<f32>> = vec![&ctx.target];
        targets.extend(others.iter().map(|c| c as &dyn ClassifierAdapter<f32>));
        let sources = vec![
            (format!("{}/{MID_FILE}", ctx.model_id), mid.clone()),
            (format!("{}/{FIN_FILE}", ctx.model_id), fin.clone()),
        ];
        let m = transfer_matrix(&sources, &targets, val)?;
        m.write_csv(&ctx.out.join(TRANSFER_CSV))?;
        Some(m)
    };

    let sweep = if ctx.cfg.eval.sweep_norms.is_empty() {
        Vec::new()
    } else {
        let points = norm_sweep(&ctx.target, val, fin, &ctx.cfg.eval.sweep_norms)?;
        write_sweep_csv(&points, &ctx.out.join(SWEEP_CSV))?;
        points
    };

    write_reports_csv(&reports, &ctx.out.join(REPORT_CSV))?;
    let report = PipelineReport {
        model_id: ctx.model_id.clone(),
        reports,
        threshold,
        noise_baseline,
        selectivity: sel,
        transfer,
        sweep,
        config_snapshot: snapshot,
    };
    write_json(&ctx.out.join(REPORT_FILE), &report)?;
    Ok(report)
}
