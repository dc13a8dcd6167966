//! The five commands behind the binary, usable in-process by tests.
//!
//! Exit-code contract: 0 ok, 2 config or input error, 3 generation error,
//! 4 numeric failure. Every artifact embeds the resolved config digest;
//! wall-clock time appears only in manifests.

use std::path::{Path, PathBuf};

use dsaa_core::analysis::{
    separation_stats, suppression_metric, PromptGroupSpec, SeparationStats, SuppressionReport,
};
use dsaa_core::dsaa::{ApaWeights, DsaaWeights, ModulatorWeights};
use dsaa_core::encoder::EncoderWeights;
use dsaa_core::eval::{run_protocol, EvalReport};
use dsaa_core::pipeline::DsaaPipeline;
use dsaa_core::rng::stream;
use dsaa_core::text::{match_spans, tokenize, AttrSpan};
use dsaa_core::train::{StepRecord, TrainError, Trainer};
use dsaa_core::world::{gen_benchmark, SceneRecord, SyntheticWorld, CATEGORY_NAMES};

use crate::ckpt::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{self, DatasetHeader};
use crate::remote;
use crate::report;
use crate::sha256_hex;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const FINAL_CKPT: &str = "ckpt_final.dsaa";
pub const LASTGOOD_CKPT: &str = "ckpt_lastgood.dsaa";
pub const STEP_LOG: &str = "steps.jsonl";

#[derive(Debug)]
pub enum CmdError {
    Config(String),
    Generation(String),
    Numeric(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Generation(_) => 3,
            CmdError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Config(d) => write!(f, "config error: {d}"),
            CmdError::Generation(d) => write!(f, "generation error: {d}"),
            CmdError::Numeric(d) => write!(f, "numeric failure: {d}"),
        }
    }
}

impl std::error::Error for CmdError {}

fn config_err(e: impl std::fmt::Display) -> CmdError {
    CmdError::Config(e.to_string())
}

impl From<crate::config::ConfigError> for CmdError {
    fn from(e: crate::config::ConfigError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<crate::ckpt::CkptError> for CmdError {
    fn from(e: crate::ckpt::CkptError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<crate::dataset::DatasetError> for CmdError {
    fn from(e: crate::dataset::DatasetError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<report::ReportError> for CmdError {
    fn from(e: report::ReportError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Numerics(_) | TrainError::Objective(_) => {
                CmdError::Numeric(e.to_string())
            }
            _ => CmdError::Config(e.to_string()),
        }
    }
}

fn build_world(cfg: &RunConfig) -> Result<SyntheticWorld, CmdError> {
    SyntheticWorld::standard(cfg.world.to_core(), cfg.seed).map_err(|e| match e {
        dsaa_core::world::GenError::BadParams { .. } => CmdError::Config(e.to_string()),
        other => CmdError::Generation(other.to_string()),
    })
}

/// Adapter weights drawn from the same labeled stream regardless of shape
/// overrides, so default configs match the core initialization bitwise.
fn build_dsaa(cfg: &RunConfig) -> DsaaWeights {
    let dim = cfg.encoder.dim;
    let mut rng = stream(cfg.seed, "pipeline.dsaa");
    let mut apa = ApaWeights::init(dim, cfg.dsaa.apa_bottleneck, &mut rng);
    apa.ln_eps = cfg.dsaa.ln_eps;
    let modulator = ModulatorWeights::init(
        dim,
        cfg.dsaa.mod_bottleneck,
        cfg.dsaa.gamma_k,
        cfg.dsaa.gamma_v,
        &mut rng,
    );
    DsaaWeights { apa, modulator }
}

/// Fresh pipeline at initialization for the given config.
pub fn build_pipeline(cfg: &RunConfig) -> Result<DsaaPipeline, CmdError> {
    let world = build_world(cfg)?;
    let encoder_cfg = cfg.encoder_cfg(0);
    let mut pipe =
        DsaaPipeline::from_world(&world, encoder_cfg, cfg.seed).map_err(config_err)?;
    pipe.dsaa = build_dsaa(cfg);
    pipe.dsaa.validate().map_err(config_err)?;
    Ok(pipe.variant(cfg.dsaa.enable_apa, cfg.dsaa.enable_modulator))
}

/// Pipeline reconstructed from a checkpoint's own config and parameters.
pub fn pipeline_from_checkpoint(ck: &Checkpoint) -> Result<DsaaPipeline, CmdError> {
    let cfg = &ck.config;
    let world = build_world(cfg)?;
    let vocab = world.vocabulary();
    let encoder_cfg = cfg.encoder_cfg(vocab.len());
    encoder_cfg.validate().map_err(config_err)?;
    let encoder =
        EncoderWeights::from_named(&encoder_cfg, |n| ck.lookup(n)).map_err(config_err)?;
    let dsaa = DsaaWeights::from_named(cfg.dsaa.gamma_k, cfg.dsaa.gamma_v, cfg.dsaa.ln_eps, |n| {
        ck.lookup(n)
    })
    .map_err(config_err)?;
    let pipe = DsaaPipeline {
        vocab,
        lexicon: world.lexicon(),
        encoder_cfg,
        encoder,
        dsaa,
        projection: world.w_proj.clone(),
        enable_apa: cfg.dsaa.enable_apa,
        enable_modulator: cfg.dsaa.enable_modulator,
    };
    Ok(pipe)
}

fn named_params(pipe: &DsaaPipeline) -> Vec<(String, dsaa_core::Tensor)> {
    let mut named = pipe.encoder.to_named();
    named.extend(pipe.dsaa.to_named());
    named
}

/// A checkpoint is only usable against data from the same seed and world
/// geometry; anything else silently mismatches latents or dimensions.
fn check_compat(cfg: &RunConfig, ck: &Checkpoint, path: &Path) -> Result<(), CmdError> {
    if ck.config.seed != cfg.seed || ck.config.world != cfg.world {
        return Err(CmdError::Config(format!(
            "checkpoint {} was built for a different world: checkpoint config digest {}, \
             run config digest {}",
            path.display(),
            ck.config.digest(),
            cfg.digest()
        )));
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, file: &str) -> Result<Vec<SceneRecord>, CmdError> {
    let path = cfg.data_dir().join(file);
    if !path.exists() {
        return Err(CmdError::Config(format!(
            "no dataset at {}; generate one with gen-data",
            path.display()
        )));
    }
    let ds = dataset::load(&path)?;
    if ds.header.data_digest != cfg.data_digest() {
        return Err(CmdError::Config(format!(
            "dataset {} does not match this config: dataset data digest {}, config data \
             digest {}; regenerate with gen-data",
            path.display(),
            ds.header.data_digest,
            cfg.data_digest()
        )));
    }
    Ok(ds.records)
}

fn ckpt_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| String::from("checkpoint"))
}

fn file_sha256(path: &Path) -> Result<String, CmdError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CmdError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug)]
pub struct GenOutcome {
    pub train_path: PathBuf,
    pub eval_path: PathBuf,
    pub manifest_path: PathBuf,
    pub train_records: usize,
    pub eval_records: usize,
    pub config_digest: String,
    pub data_digest: String,
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenOutcome, CmdError> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let bench = gen_benchmark(&world, &cfg.data.to_core(), cfg.seed).map_err(|e| match e {
        dsaa_core::world::GenError::BadParams { .. } => CmdError::Config(e.to_string()),
        other => CmdError::Generation(other.to_string()),
    })?;
    let header = |split: &str, n: usize| DatasetHeader {
        format: dataset::FORMAT.into(),
        version: dataset::VERSION,
        split: split.into(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        data_digest: cfg.data_digest(),
        records: n,
    };
    let train_path = cfg.data_dir().join(TRAIN_FILE);
    let eval_path = cfg.data_dir().join(EVAL_FILE);
    dataset::save(&train_path, &header("train", bench.train.len()), &bench.train)?;
    dataset::save(&eval_path, &header("eval", bench.eval.len()), &bench.eval)?;
    let files = serde_json::json!([
        { "path": TRAIN_FILE, "sha256": file_sha256(&train_path)?, "records": bench.train.len() },
        { "path": EVAL_FILE, "sha256": file_sha256(&eval_path)?, "records": bench.eval.len() },
    ]);
    let manifest = serde_json::json!({
        "created_unix": report::unix_now(),
        "command": "gen-data",
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "data_digest": cfg.data_digest(),
        "files": files,
    });
    let manifest_path = cfg.data_dir().join("manifest.json");
    report::write_text(&manifest_path, &format!("{manifest:#}\n"))?;
    Ok(GenOutcome {
        train_path,
        eval_path,
        manifest_path,
        train_records: bench.train.len(),
        eval_records: bench.eval.len(),
        config_digest: cfg.digest(),
        data_digest: cfg.data_digest(),
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_ckpt: PathBuf,
    pub step_log: PathBuf,
    pub manifest_path: PathBuf,
    pub steps: Vec<StepRecord>,
    /// Set when training aborted on a non-finite loss; the checkpoint then
    /// holds the last consistent weights.
    pub aborted: bool,
}

fn write_step_log(path: &Path, cfg: &RunConfig, steps: &[StepRecord]) -> Result<(), CmdError> {
    let mut out = String::new();
    let header = serde_json::json!({
        "format": "dsaa-steps",
        "version": 1,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "records": steps.len(),
    });
    out.push_str(&header.to_string());
    out.push('\n');
    for s in steps {
        out.push_str(&serde_json::to_string(s).expect("step serializes"));
        out.push('\n');
    }
    report::write_text(path, &out)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CmdError> {
    cfg.validate()?;
    let records = load_split(cfg, TRAIN_FILE)?;
    let pipe = build_pipeline(cfg)?;
    let mut trainer = Trainer::new(pipe, records, cfg.train_config())?;
    let out_dir = cfg.out_dir();
    let stored = cfg.portable();
    let mut steps: Vec<StepRecord> = Vec::with_capacity(cfg.training.steps);
    let mut ckpt_hashes: Vec<(String, String)> = Vec::new();
    let mut aborted = false;
    for step in 1..=cfg.training.steps {
        match trainer.step() {
            Ok(rec) => {
                if step % 50 == 0 || step == cfg.training.steps {
                    log::info!(
                        "step {step}: total {:.4} cls {:.4} attr {:.4}",
                        rec.total,
                        rec.cls,
                        rec.attr
                    );
                }
                steps.push(rec);
            }
            Err(TrainError::NonFinite { step }) => {
                log::error!("non-finite loss at step {step}; keeping last consistent weights");
                aborted = true;
                break;
            }
            Err(other) => return Err(other.into()),
        }
        if step % cfg.training.checkpoint_interval == 0 && step != cfg.training.steps {
            let name = format!("ckpt_step_{step:06}.dsaa");
            let path = out_dir.join(&name);
            ckpt::save(&path, &stored, &named_params(trainer.pipeline()))?;
            ckpt_hashes.push((name, file_sha256(&path)?));
        }
    }
    let final_name = if aborted { LASTGOOD_CKPT } else { FINAL_CKPT };
    let final_ckpt = out_dir.join(final_name);
    ckpt::save(&final_ckpt, &stored, &named_params(trainer.pipeline()))?;
    ckpt_hashes.push((final_name.to_string(), file_sha256(&final_ckpt)?));
    let step_log = out_dir.join(STEP_LOG);
    write_step_log(&step_log, cfg, &steps)?;
    let manifest = report::manifest_json(
        "train",
        cfg.seed,
        &cfg.digest(),
        &ckpt_hashes,
        &[final_name.to_string(), STEP_LOG.to_string()],
    );
    let manifest_path = out_dir.join("manifest_train.json");
    report::write_text(&manifest_path, &manifest)?;
    let outcome = TrainOutcome {
        final_ckpt,
        step_log,
        manifest_path,
        steps,
        aborted,
    };
    if aborted {
        return Err(CmdError::Numeric(format!(
            "training aborted on a non-finite loss; last consistent weights are at {}",
            outcome.final_ckpt.display()
        )));
    }
    Ok(outcome)
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub manifest_path: PathBuf,
    pub table_text: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    /// Restrict to one table column by its label.
    pub subset: Option<&'a str>,
    /// Truncate each record's negative captions.
    pub max_negatives: Option<usize>,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt_path: &Path,
    opts: EvalOptions<'_>,
) -> Result<EvalOutcome, CmdError> {
    cfg.validate()?;
    let ck = ckpt::load(ckpt_path)?;
    check_compat(cfg, &ck, ckpt_path)?;
    let pipe = pipeline_from_checkpoint(&ck)?;
    let mut records = load_split(cfg, EVAL_FILE)?;
    if let Some(cap) = opts.max_negatives {
        for r in &mut records {
            r.caption.negatives.truncate(cap);
        }
    }
    let mut report_data =
        run_protocol(&pipe, &records, cfg.eval.nms_iou).map_err(config_err)?;
    if let Some(label) = opts.subset {
        if !report_data.columns.iter().any(|c| c.label() == label) {
            let known: Vec<&str> = report_data.columns.iter().map(|c| c.label()).collect();
            return Err(CmdError::Config(format!(
                "unknown subset {label:?}; expected one of {known:?}"
            )));
        }
        report_data.columns.retain(|c| c.label() == label);
        report_data.average = report_data.columns[0].map;
    }
    let stem = ckpt_stem(ckpt_path);
    let out_dir = cfg.out_dir();
    let csv_path = out_dir.join(format!("eval_{stem}.csv"));
    report::write_text(&csv_path, &report::eval_csv(&report_data))?;
    let ckpt_hash = file_sha256(ckpt_path)?;
    let doc = serde_json::json!({
        "report": report_data,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "checkpoint": stem,
        "checkpoint_sha256": ckpt_hash,
        "checkpoint_config_digest": ck.config.digest(),
    });
    let json_path = out_dir.join(format!("eval_{stem}.json"));
    report::write_text(&json_path, &format!("{doc:#}\n"))?;
    let manifest = report::manifest_json(
        "eval",
        cfg.seed,
        &cfg.digest(),
        &[(stem.clone(), ckpt_hash)],
        &[
            csv_path.display().to_string(),
            json_path.display().to_string(),
        ],
    );
    let manifest_path = out_dir.join(format!("manifest_eval_{stem}.json"));
    report::write_text(&manifest_path, &manifest)?;
    let table_text = report::eval_table_text(&report_data);
    Ok(EvalOutcome {
        report: report_data,
        csv_path,
        json_path,
        manifest_path,
        table_text,
    })
}

#[derive(Debug)]
pub struct AnalyzeOutcome {
    pub names: Vec<String>,
    pub suppression: Vec<SuppressionReport>,
    pub separation: Vec<SeparationStats>,
    pub suppression_csv: PathBuf,
    pub json_path: PathBuf,
    pub manifest_path: PathBuf,
}

pub fn cmd_analyze(cfg: &RunConfig, ckpt_paths: &[PathBuf]) -> Result<AnalyzeOutcome, CmdError> {
    cfg.validate()?;
    if ckpt_paths.is_empty() {
        return Err(CmdError::Config("no checkpoints given".into()));
    }
    let records = load_split(cfg, EVAL_FILE)?;
    let spec = PromptGroupSpec::with_explicit_nouns(&CATEGORY_NAMES);
    let mut names = Vec::new();
    let mut suppression = Vec::new();
    let mut separation = Vec::new();
    let mut hashes = Vec::new();
    for path in ckpt_paths {
        let ck = ckpt::load(path)?;
        check_compat(cfg, &ck, path)?;
        let pipe = pipeline_from_checkpoint(&ck)?;
        suppression.push(suppression_metric(&pipe, &spec).map_err(config_err)?);
        separation.push(separation_stats(&pipe, &records).map_err(config_err)?);
        let stem = ckpt_stem(path);
        // Checkpoints from different runs often share a stem; suffix repeats
        // so report columns and sidecar files stay distinct.
        let mut name = stem;
        let mut n = 1usize;
        while names.contains(&name) {
            n += 1;
            name = format!("{}_{n}", ckpt_stem(path));
        }
        hashes.push((name.clone(), file_sha256(path)?));
        names.push(name);
    }
    let out_dir = cfg.out_dir();
    let suppression_path = out_dir.join("suppression.csv");
    report::write_text(
        &suppression_path,
        &report::suppression_csv(&names, &suppression),
    )?;
    let mut outputs = vec![suppression_path.display().to_string()];
    for (name, stats) in names.iter().zip(&separation) {
        let svg_path = out_dir.join(format!("separation_{name}.svg"));
        let side_path = out_dir.join(format!("separation_{name}.csv"));
        report::write_text(
            &svg_path,
            &report::separation_svg(&format!("separation: {name}"), stats),
        )?;
        report::write_text(&side_path, &report::separation_sidecar_csv(stats))?;
        outputs.push(svg_path.display().to_string());
        outputs.push(side_path.display().to_string());
    }
    let doc = serde_json::json!({
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "checkpoints": names,
        "suppression": suppression,
        "separation": separation
            .iter()
            .map(|s| serde_json::json!({
                "pos_mean": s.pos_mean,
                "neg_mean": s.neg_mean,
                "gap": s.gap,
                "pos_hist": s.pos_hist,
                "neg_hist": s.neg_hist,
            }))
            .collect::<Vec<_>>(),
    });
    let json_path = out_dir.join("analysis.json");
    report::write_text(&json_path, &format!("{doc:#}\n"))?;
    outputs.push(json_path.display().to_string());
    let manifest = report::manifest_json("analyze", cfg.seed, &cfg.digest(), &hashes, &outputs);
    let manifest_path = out_dir.join("manifest_analyze.json");
    report::write_text(&manifest_path, &manifest)?;
    Ok(AnalyzeOutcome {
        names,
        suppression,
        separation,
        suppression_csv: suppression_path,
        json_path,
        manifest_path,
    })
}

#[derive(Debug)]
pub struct ExtractOutcome {
    pub output: PathBuf,
    pub captions: usize,
    pub fallbacks: usize,
}

#[derive(serde::Serialize)]
struct Annotation<'a> {
    caption: &'a str,
    phrases: &'a [String],
    spans: &'a [AttrSpan],
    unmatched: &'a [String],
    fallback: bool,
}

pub fn cmd_extract(
    cfg: &RunConfig,
    captions_path: &Path,
    output: Option<&Path>,
) -> Result<ExtractOutcome, CmdError> {
    cfg.validate()?;
    let text = std::fs::read_to_string(captions_path).map_err(|e| {
        CmdError::Config(format!("cannot read {}: {e}", captions_path.display()))
    })?;
    let extraction = cfg.extraction_config()?;
    let world = build_world(cfg)?;
    let vocab = world.vocabulary();
    let max_len = cfg.encoder.max_len;
    let mut out = String::new();
    let mut captions = 0usize;
    let mut fallbacks = 0usize;
    for line in text.lines() {
        let caption = line.trim();
        if caption.is_empty() {
            continue;
        }
        captions += 1;
        let got = remote::extract(&extraction, caption);
        if got.fallback {
            fallbacks += 1;
        }
        let record = match tokenize(&vocab, caption, max_len) {
            Ok(tokens) => {
                let spans = match_spans(&vocab, &tokens, &got.phrases);
                serde_json::json!(Annotation {
                    caption,
                    phrases: &got.phrases,
                    spans: &spans.spans,
                    unmatched: &spans.unmatched,
                    fallback: got.fallback,
                })
            }
            Err(e) => {
                log::warn!("cannot tokenize {caption:?}: {e}");
                serde_json::json!({ "caption": caption, "error": e.to_string() })
            }
        };
        out.push_str(&record.to_string());
        out.push('\n');
    }
    if fallbacks > 0 {
        log::warn!("remote extraction fell back to the lexicon for {fallbacks} of {captions} captions");
    }
    let output = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir().join("annotations.jsonl"));
    report::write_text(&output, &out)?;
    Ok(ExtractOutcome {
        output,
        captions,
        fallbacks,
    })
}
