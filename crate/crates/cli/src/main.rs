//! `vcp`: command-line driver for the video cloze pipeline.
//!
//! The commands compose into the full experiment through file handoffs:
//! `generate` renders a labeled synthetic corpus, `pretrain` learns a
//! backbone by classifying clip operations (no labels consumed),
//! `finetune` trains action recognition from a random or pretrained
//! backbone, `probe` trains a linear head on a frozen backbone and emits
//! the per-operation assessment CSV, `retrieve` scores top-k hit rates on
//! conv features, and `gradcheck` verifies the analytic gradients.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use vcp_core::cloze::ClozeError;
use vcp_core::eval::{
    assessment_csv, assessment_from_log, build_index, retrieval_csv, video_features, EvalError,
    RetrievalHit,
};
use vcp_core::model::{
    gradcheck_network, load_checkpoint, CheckpointError, ClozeNetwork, ModelError,
};
use vcp_core::train::{
    final_checkpoint_path, finetune_action, pretrain_vcp, probe_train, write_train_log,
    InitSource, TrainError, TrainMode, TrainOutput,
};
use vcp_core::video::{generate_synthetic, Dataset, VideoError};

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Config { message: String },
    #[error("{message}")]
    Data { message: String },
    #[error("{message}")]
    Numeric { message: String },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cloze(#[from] ClozeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// 2 for configuration mistakes, 3 for unusable data or files, 4 for
/// numeric failures.
fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Config { .. } => 2,
        CliError::Data { .. } | CliError::Io { .. } => 3,
        CliError::Numeric { .. } => 4,
        CliError::Train(e) => train_code(e),
        CliError::Eval(e) => eval_code(e),
        CliError::Video(e) => video_code(e),
        CliError::Model(e) => model_code(e),
        CliError::Cloze(e) => cloze_code(e),
        CliError::Checkpoint(e) => checkpoint_code(e),
    }
}

fn train_code(err: &TrainError) -> i32 {
    match err {
        TrainError::Config { .. } => 2,
        TrainError::Data { .. } => 3,
        TrainError::Numeric { .. } => 4,
        TrainError::Io { .. } | TrainError::LogFormat { .. } => 3,
        TrainError::Cloze(e) => cloze_code(e),
        TrainError::Model(e) => model_code(e),
        TrainError::Checkpoint(e) => checkpoint_code(e),
        TrainError::Video(e) => video_code(e),
        TrainError::Tensor(_) => 4,
    }
}

fn eval_code(err: &EvalError) -> i32 {
    match err {
        EvalError::Validation { .. } | EvalError::Index { .. } => 3,
        EvalError::Cloze(e) => cloze_code(e),
        EvalError::Model(e) => model_code(e),
        EvalError::Video(e) => video_code(e),
        EvalError::Tensor(_) => 4,
    }
}

fn model_code(err: &ModelError) -> i32 {
    match err {
        ModelError::InvalidConfig { .. } => 2,
        ModelError::Tensor(_) => 4,
        ModelError::Checkpoint(e) => checkpoint_code(e),
    }
}

fn checkpoint_code(err: &CheckpointError) -> i32 {
    match err {
        CheckpointError::ConfigMismatch { .. } => 2,
        _ => 3,
    }
}

fn cloze_code(err: &ClozeError) -> i32 {
    match err {
        ClozeError::InvalidConfig { .. } => 2,
        _ => 3,
    }
}

fn video_code(err: &VideoError) -> i32 {
    match err {
        VideoError::SpecValidation { .. } => 2,
        _ => 3,
    }
}

#[derive(Parser)]
#[command(
    name = "vcp",
    version,
    about = "Video cloze: synthetic corpus, self-supervised pre-training, \
             fine-tuning, probing and retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic video corpus and its manifest.
    Generate(GenerateArgs),
    /// Pre-train backbone and operation head on cloze items (no labels).
    Pretrain(TrainCmdArgs),
    /// Train action recognition, optionally from a pretrained backbone.
    Finetune(TrainCmdArgs),
    /// Train a linear probe on a frozen backbone; emit the assessment CSV.
    Probe(ProbeArgs),
    /// Build a feature gallery and score top-k retrieval hit rates.
    Retrieve(RetrieveArgs),
    /// Verify analytic gradients against f64 central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment file; flags override file values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; every random draw is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for item assembly (1 = fully serial).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory receiving the video files and manifest.jsonl.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of action classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Videos rendered per class.
    #[arg(long)]
    videos_per_class: Option<usize>,
    /// Of those, how many form the test split.
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Frames per video.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct TrainCmdArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset manifest (JSONL).
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Directory receiving checkpoints and train_log.jsonl.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Pretrain: checkpoint to resume from. Finetune: pretrained backbone
    /// to start from (heads start fresh either way).
    #[arg(long, value_name = "CHECKPOINT")]
    init: Option<PathBuf>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Also write a checkpoint every N epochs (0: only at the end).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Directory receiving probe_log.jsonl and assessment.csv.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Pretrained checkpoint whose frozen backbone is probed.
    #[arg(long, value_name = "CHECKPOINT")]
    init: Option<PathBuf>,
    /// Probe epochs; must be a multiple of 5 (the assessment cadence).
    #[arg(long)]
    epochs: Option<usize>,
    /// Method name recorded in the assessment report.
    #[arg(long, default_value = "probe")]
    method: String,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Directory receiving retrieval.csv and hit_rates.csv.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Checkpoint providing the feature extractor.
    #[arg(long, value_name = "CHECKPOINT")]
    init: Option<PathBuf>,
    /// Retrieval depths to score.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 12)]
    samples: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Pretrain(args) => cmd_train(TrainMode::PretrainVcp, args),
        Command::Finetune(args) => cmd_train(TrainMode::FinetuneAction, args),
        Command::Probe(args) => cmd_probe(args),
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        let mut source = std::error::Error::source(&err);
        while let Some(cause) = source {
            eprintln!("  caused by: {cause}");
            source = cause.source();
        }
        std::process::exit(exit_code(&err));
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn create_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let run = RunConfig::load(args.common.config.as_deref())?;
    let mut spec = run.synthetic_spec(args.common.seed);
    if let Some(v) = args.classes {
        spec.num_classes = v;
    }
    if let Some(v) = args.videos_per_class {
        spec.videos_per_class = v;
    }
    if let Some(v) = args.test_per_class {
        spec.test_per_class = v;
    }
    if let Some(v) = args.frames {
        spec.frame_count = v;
    }
    let out = run.out_dir(args.out.as_deref())?;
    let manifest = generate_synthetic(&spec, &out)?;
    let snapshot = serde_json::to_string_pretty(&spec).expect("spec serializes");
    write_file(&out.join("spec.json"), &snapshot)?;
    println!(
        "wrote {} videos ({} classes, {} frames each) to {}",
        manifest.entries.len(),
        spec.num_classes,
        spec.frame_count,
        out.display()
    );
    Ok(())
}

fn report_last_epoch(what: &str, output: &TrainOutput) {
    if let Some(last) = output.log.records.last() {
        let test = last
            .test_accuracy
            .map(|a| format!(", test accuracy {a:.3}"))
            .unwrap_or_default();
        println!(
            "{what}: {} epochs, final train loss {:.4}, train accuracy {:.3}{test}",
            last.epoch, last.train_loss, last.train_accuracy
        );
    }
}

fn cmd_train(mode: TrainMode, args: TrainCmdArgs) -> Result<(), CliError> {
    let run = RunConfig::load(args.common.config.as_deref())?;
    let cloze = run.cloze_config();
    let backbone = run.backbone_config();
    let mut train = run.train_config(mode, args.common.seed, args.common.threads);
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.checkpoint_every {
        train.checkpoint_every = v;
    }
    if let Some(init) = run.init_path(args.init.as_deref()) {
        train.init = InitSource::Checkpoint(init);
    }
    let manifest = run.manifest_path(args.manifest.as_deref())?;
    let out = run.out_dir(args.out.as_deref())?;
    create_out_dir(&out)?;
    let dataset = Dataset::load(&manifest)?;

    let output = match mode {
        TrainMode::PretrainVcp => pretrain_vcp(&dataset, &cloze, &backbone, &train, Some(&out))?,
        TrainMode::FinetuneAction => {
            finetune_action(&dataset, &cloze, &backbone, &train, Some(&out))?
        }
        TrainMode::Probe => unreachable!("probe has its own command"),
    };
    let log_path = out.join("train_log.jsonl");
    write_train_log(&log_path, &output.log)?;
    report_last_epoch(
        if mode == TrainMode::PretrainVcp { "pretrain" } else { "finetune" },
        &output,
    );
    println!("checkpoint: {}", final_checkpoint_path(&out).display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<(), CliError> {
    let run = RunConfig::load(args.common.config.as_deref())?;
    let cloze = run.cloze_config();
    let backbone = run.backbone_config();
    let mut train = run.train_config(TrainMode::Probe, args.common.seed, args.common.threads);
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    // The assessment protocol scores every 5 epochs; anything else cannot
    // produce the report.
    train.eval_every = 5;
    if train.epochs % 5 != 0 {
        return Err(CliError::Config {
            message: format!(
                "probe epochs must be a multiple of 5 (assessment cadence), got {}",
                train.epochs
            ),
        });
    }
    let init = run.required_init(args.init.as_deref(), "probe needs a pretrained checkpoint")?;
    train.init = InitSource::Checkpoint(init.clone());
    let manifest = run.manifest_path(args.manifest.as_deref())?;
    let out = run.out_dir(args.out.as_deref())?;
    create_out_dir(&out)?;
    let dataset = Dataset::load(&manifest)?;

    let log = probe_train(&dataset, &cloze, &backbone, &train)?;
    let log_path = out.join("probe_log.jsonl");
    write_train_log(&log_path, &log)?;
    let report = assessment_from_log(&args.method, &log)?;
    let snapshot = json!({
        "method": args.method,
        "seed": train.seed,
        "init": init,
        "cloze": cloze,
        "backbone": backbone,
    });
    let csv_path = out.join("assessment.csv");
    write_file(&csv_path, &format!("# config: {snapshot}\n{}", assessment_csv(&report)))?;

    let last = report.epochs.len() - 1;
    let per_op: Vec<String> = report
        .per_operation
        .iter()
        .map(|(kind, series)| format!("{} {:.3}", kind.short_label(), series[last]))
        .collect();
    println!(
        "probe ({}): epoch {} overall {:.3} | {}",
        args.method,
        report.epochs[last],
        report.overall[last],
        per_op.join(" ")
    );
    println!("assessment: {}", csv_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<(), CliError> {
    let run = RunConfig::load(args.common.config.as_deref())?;
    let cloze = run.cloze_config();
    let init = run.required_init(args.init.as_deref(), "retrieval needs a checkpoint")?;
    let manifest = run.manifest_path(args.manifest.as_deref())?;
    let out = run.out_dir(args.out.as_deref())?;
    create_out_dir(&out)?;

    let net = ClozeNetwork::<f32>::from_checkpoint(&load_checkpoint(&init)?)?;
    let (_, t, h, w) = net.config().input;
    if t != cloze.clip_len || (h, w) != cloze.crop {
        return Err(CliError::Config {
            message: format!(
                "checkpoint expects clips of ({t}, {h}, {w}) but the cloze config yields ({}, {}, {})",
                cloze.clip_len, cloze.crop.0, cloze.crop.1
            ),
        });
    }
    let dataset = Dataset::load(&manifest)?;
    let index = build_index(&dataset, &net, &cloze)?;
    let gallery_size = index.gallery.len();
    if args.k.is_empty() {
        return Err(CliError::Config { message: "no retrieval depths given".into() });
    }
    for &k in &args.k {
        if k == 0 || k > gallery_size {
            return Err(CliError::Config {
                message: format!("retrieval depth {k} outside [1, {gallery_size}]"),
            });
        }
    }
    let deepest = *args.k.iter().max().expect("non-empty");

    let queries = dataset.test_indices();
    if queries.is_empty() {
        return Err(CliError::Data { message: "test split is empty".into() });
    }
    let mut rows: Vec<(String, Vec<RetrievalHit>)> = Vec::with_capacity(queries.len());
    let mut first_match_ranks = Vec::with_capacity(queries.len());
    for &q in &queries {
        let video = dataset.video(q);
        let Some(label) = video.class_label() else {
            return Err(CliError::Data {
                message: format!("test video {} has no class label", video.video_id()),
            });
        };
        let ranked = index.query(&video_features(video, &net, &cloze)?, deepest)?;
        first_match_ranks
            .push(ranked.iter().position(|hit| hit.class_label == Some(label)).map(|p| p + 1));
        rows.push((video.video_id().to_string(), ranked));
    }

    let snapshot = json!({
        "init": init,
        "k": args.k,
        "cloze": cloze,
        "backbone": net.config(),
    });
    let retrieval_path = out.join("retrieval.csv");
    write_file(&retrieval_path, &format!("# config: {snapshot}\n{}", retrieval_csv(&rows)))?;

    let mut rates_body = String::from("k,hit_rate\n");
    for &k in &args.k {
        let hits =
            first_match_ranks.iter().filter(|rank| rank.is_some_and(|r| r <= k)).count();
        let rate = hits as f64 / queries.len() as f64;
        rates_body.push_str(&format!("{k},{rate:.4}\n"));
        println!("top-{k} hit rate: {rate:.4} ({hits}/{} queries)", queries.len());
    }
    let rates_path = out.join("hit_rates.csv");
    write_file(&rates_path, &format!("# config: {snapshot}\n{rates_body}"))?;
    println!("rankings: {}", retrieval_path.display());
    println!("hit rates: {}", rates_path.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    const TOLERANCE: f64 = 1e-4;
    let run = RunConfig::load(args.common.config.as_deref())?;
    let backbone = run.backbone_config();
    let cloze = run.cloze_config();
    let seed = args.common.seed.or(run.seed).unwrap_or(42);
    println!(
        "checking analytic gradients against f64 central finite differences \
         ({} samples per parameter, seed {seed})",
        args.samples
    );
    let report = gradcheck_network(backbone, cloze.clips_per_item, seed, args.samples)?;
    for (name, err) in &report.per_param {
        println!("{name:<28} max relative error {err:.3e}");
    }
    if report.worst <= TOLERANCE {
        println!("PASS: worst relative error {:.3e} <= {TOLERANCE:e}", report.worst);
        Ok(())
    } else {
        println!("FAIL: worst relative error {:.3e} > {TOLERANCE:e}", report.worst);
        Err(CliError::Numeric {
            message: format!("gradient check failed with worst relative error {:.3e}", report.worst),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_the_failure_modes() {
        assert_eq!(exit_code(&CliError::Config { message: "x".into() }), 2);
        assert_eq!(exit_code(&CliError::Data { message: "x".into() }), 3);
        assert_eq!(exit_code(&CliError::Numeric { message: "x".into() }), 4);
        assert_eq!(
            exit_code(&CliError::Train(TrainError::Config { reason: "x".into() })),
            2
        );
        assert_eq!(
            exit_code(&CliError::Train(TrainError::Numeric { reason: "x".into() })),
            4
        );
        assert_eq!(
            exit_code(&CliError::Checkpoint(CheckpointError::ConfigMismatch {
                reason: "x".into()
            })),
            2
        );
        assert_eq!(
            exit_code(&CliError::Eval(EvalError::Validation { reason: "x".into() })),
            3
        );
        assert_eq!(
            exit_code(&CliError::Video(VideoError::SpecValidation { reason: "x".into() })),
            2
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
