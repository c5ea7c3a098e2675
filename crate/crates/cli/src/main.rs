//! Command-line driver: synthetic data generation, training with an epoch
//! log, retrieval evaluation, whole-model gradient checking, and embedding
//! export. Exit codes: 0 success, 1 validation, 2 numerical failure, 3 IO.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use xreid_core::backbone::BackboneConfig;
use xreid_core::config::{Ablation, RunConfig};
use xreid_core::data::{generate, load_dataset, pk_sample, save_dataset, split, SynthSpec};
use xreid_core::metrics::{self, EmbeddingSet, Role};
use xreid_core::tensor::Tensor;
use xreid_core::train::{
    evaluate_sets, extract_embeddings, load_checkpoint, model_grad_check, run_training,
    save_checkpoint, step_fd_config, InferencePass, ModelParams, TrainConfig,
};
use xreid_core::{CoreError, Rng};

/// Gradient tolerance shared by the gradcheck verb and its tests.
const GRAD_TOL: f64 = 5e-3;

#[derive(Parser)]
#[command(name = "xreid", version, about = "Person re-identification trainer with cross-attention identity fusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic identity dataset and write the train, query,
    /// and gallery splits plus a manifest.
    GenData {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split, writing a JSON-lines epoch log and a
    /// checkpoint after every epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for log.jsonl, checkpoint.xrid, config.json.
        #[arg(long)]
        out: PathBuf,
        /// Which loss terms to enable: baseline, ema, intrax, interx, full.
        #[arg(long, default_value = "full")]
        ablation: String,
    },
    /// Score a checkpoint's retrieval quality on the query/gallery splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare every parameter group's analytic gradient against central
    /// finite differences on a micro model.
    Gradcheck {
        /// JSON run configuration; a micro geometry is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write query+gallery embeddings with labels to a file.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// bin (container) or csv.
        #[arg(long, default_value = "bin")]
        format: String,
    },
}

enum CliError {
    Core(CoreError),
    Gradcheck { name: String, max_rel_err: f64 },
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Gradcheck { name, max_rel_err } => write!(
                f,
                "gradient check failed: worst parameter {name} at relative error {max_rel_err:.3e}"
            ),
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Gradcheck { .. } => 2,
        CliError::Core(CoreError::NonFiniteLoss { .. }) => 2,
        CliError::Core(CoreError::Io { .. }) | CliError::Core(CoreError::Container(_)) => 3,
        CliError::Core(_) => 1,
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::GenData { config, out } => cmd_gen_data(config.as_deref(), &out),
        Cmd::Train { config, data, out, ablation } => {
            cmd_train(config.as_deref(), &data, &out, &ablation)
        }
        Cmd::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Cmd::Gradcheck { config, corrupt } => cmd_gradcheck(config.as_deref(), corrupt.as_deref()),
        Cmd::ExportEmbeddings { checkpoint, data, out, format } => {
            cmd_export(&checkpoint, &data, &out, &format)
        }
    }
}

// ── Configuration plumbing ──────────────────────────────────────────────

fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var("XREID_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CoreError::Config(format!("XREID_SEED {text:?} is not a u64")).into()),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CoreError::Config(format!("XREID_SEED: {e}")).into()),
    }
}

/// Loads the run configuration (or the given fallback), then applies the
/// XREID_SEED override to both the data and training seeds.
fn load_config(path: Option<&Path>, fallback: RunConfig) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?;
            RunConfig::from_json(&text)?
        }
        None => fallback,
    };
    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Geometry small enough that finite differences over every parameter run
/// in seconds.
fn micro_config() -> RunConfig {
    RunConfig {
        backbone: BackboneConfig {
            image_h: 8,
            image_w: 8,
            patch_size: 8,
            channels: 1,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            num_classes: 0,
        },
        train: TrainConfig {
            batch_size: 4,
            num_ids_per_batch: 2,
            instances_per_id: 2,
            ..TrainConfig::default()
        },
        data: SynthSpec { num_ids: 4, views_per_id: 2, image_h: 8, image_w: 8, channels: 1, ..SynthSpec::default() },
        eval: Default::default(),
    }
}

fn classifier_width(images: &[xreid_core::data::LabeledImage]) -> usize {
    images.iter().map(|i| i.identity).max().map_or(0, |m| m + 1)
}

// ── Commands ────────────────────────────────────────────────────────────

fn cmd_gen_data(config: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(config, RunConfig::default())?;
    let dataset = generate(&cfg.data)?;
    let (train, query, gallery) = split(&dataset, cfg.eval.train_frac)?;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    save_dataset(&train, &out.join("train.xrid"))?;
    save_dataset(&query, &out.join("query.xrid"))?;
    save_dataset(&gallery, &out.join("gallery.xrid"))?;
    let manifest = serde_json::json!({
        "config": cfg,
        "files": { "train": "train.xrid", "query": "query.xrid", "gallery": "gallery.xrid" },
        "counts": { "train": train.len(), "query": query.len(), "gallery": gallery.len() },
    });
    let path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    eprintln!(
        "wrote {} train, {} query, {} gallery images to {}",
        train.len(),
        query.len(),
        gallery.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: Option<&Path>, data_dir: &Path, out: &Path, ablation: &str) -> CliResult {
    let mut cfg = load_config(config, RunConfig::default())?;
    let mode: Ablation = ablation.parse()?;
    mode.apply(&mut cfg.train);
    cfg.validate()?;

    let train_set = load_dataset(&data_dir.join("train.xrid"))?;
    let bb = cfg.backbone_for(classifier_width(&train_set))?;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let echo_path = out.join("config.json");
    fs::write(&echo_path, cfg.to_canonical_json()).map_err(|e| CoreError::io(&echo_path, e))?;

    let mut model = ModelParams::init(&bb, cfg.train.seed, cfg.train.interx_copy_init)?;
    let ckpt_path = out.join("checkpoint.xrid");
    save_checkpoint(&model, &bb, &ckpt_path)?;
    let log_path = out.join("log.jsonl");
    let log_file = File::create(&log_path).map_err(|e| CoreError::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    run_training(&mut model, &train_set, &bb, &cfg.train, |record, m| {
        let line = serde_json::to_string(record)
            .map_err(|e| CoreError::Config(format!("log record: {e}")))?;
        writeln!(log, "{line}").map_err(|e| CoreError::io(&log_path, e))?;
        log.flush().map_err(|e| CoreError::io(&log_path, e))?;
        println!("{line}");
        save_checkpoint(m, &bb, &ckpt_path)
    })?;
    eprintln!("trained {} epochs ({mode}); checkpoint at {}", cfg.train.epochs, ckpt_path.display());
    Ok(())
}

/// The inference contract: embedding extraction may only read the instance
/// backbone, never the teacher or fusion weights.
fn audit_inference(pass: &InferencePass) -> CliResult {
    if let Some(name) = pass.touched_params.iter().find(|n| !n.starts_with("backbone.")) {
        return Err(CoreError::Config(format!("inference touched non-backbone parameter {name}")).into());
    }
    Ok(())
}

fn load_query_gallery(
    model: &ModelParams,
    bb: &BackboneConfig,
    data_dir: &Path,
) -> CliResult<(EmbeddingSet, EmbeddingSet)> {
    let query_imgs = load_dataset(&data_dir.join("query.xrid"))?;
    let gallery_imgs = load_dataset(&data_dir.join("gallery.xrid"))?;
    let q = extract_embeddings(model, bb, &query_imgs, Role::Query)?;
    let g = extract_embeddings(model, bb, &gallery_imgs, Role::Gallery)?;
    audit_inference(&q)?;
    audit_inference(&g)?;
    Ok((q.embeddings, g.embeddings))
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path) -> CliResult {
    let (model, bb) = load_checkpoint(checkpoint)?;
    let (query, gallery) = load_query_gallery(&model, &bb, data_dir)?;
    let report = evaluate_sets(&query, &gallery, 0)?;
    let line = serde_json::to_string(&report)
        .map_err(|e| CoreError::Config(format!("metrics report: {e}")))?;
    println!("{line}");
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, corrupt: Option<&str>) -> CliResult {
    let cfg = load_config(config, micro_config())?;
    let data = generate(&cfg.data)?;
    let bb = cfg.backbone_for(classifier_width(&data))?;
    let model = ModelParams::init(&bb, cfg.train.seed, cfg.train.interx_copy_init)?;
    let mut sampler = Rng::seed_from_u64(cfg.train.seed).derive(1);
    let batch = pk_sample(&data, cfg.train.num_ids_per_batch, cfg.train.instances_per_id, &mut sampler)?;
    let reports = model_grad_check(&model, &batch, &bb, &cfg.train, step_fd_config(), corrupt)?;

    let mut worst: Option<(&str, f64)> = None;
    for r in &reports {
        let ok = r.max_rel_err < GRAD_TOL;
        println!(
            "{} {:<28} {:>5} coords  max rel err {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.coords,
            r.max_rel_err
        );
        if worst.is_none_or(|(_, e)| r.max_rel_err > e) {
            worst = Some((&r.name, r.max_rel_err));
        }
    }
    let (name, max_rel_err) = worst.ok_or_else(|| CoreError::Config("no parameter groups checked".into()))?;
    println!("worst: {name} at {max_rel_err:.3e} over {} groups", reports.len());
    if max_rel_err < GRAD_TOL {
        Ok(())
    } else {
        Err(CliError::Gradcheck { name: name.to_string(), max_rel_err })
    }
}

fn cmd_export(checkpoint: &Path, data_dir: &Path, out: &Path, format: &str) -> CliResult {
    let (model, bb) = load_checkpoint(checkpoint)?;
    let (query, gallery) = load_query_gallery(&model, &bb, data_dir)?;
    let mut data = query.vectors.data().to_vec();
    data.extend_from_slice(gallery.vectors.data());
    let mut labels = query.labels.clone();
    labels.extend_from_slice(&gallery.labels);
    let mut views = query.views.clone();
    views.extend_from_slice(&gallery.views);
    let combined = EmbeddingSet::with_views(
        Tensor::from_vec(vec![labels.len(), query.dim()], data)?,
        labels,
        views,
        Role::Gallery,
    )?;
    match format {
        "bin" => metrics::save_container(&combined, out)?,
        "csv" => fs::write(out, metrics::to_csv(&combined)).map_err(|e| CoreError::io(out, e))?,
        other => {
            return Err(CoreError::Config(format!("unknown format {other:?}; expected bin or csv")).into())
        }
    }
    eprintln!("exported {} embeddings to {}", combined.len(), out.display());
    Ok(())
}
