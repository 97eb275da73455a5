use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};

use audiotag_core::baselines::GmmTagModel;
use audiotag_core::container::read_features;
use audiotag_core::dae::{DaeModel, DaeVariant};
use audiotag_core::dataset::{ChunkList, ChunkRecord, FoldId};
use audiotag_core::error::ErrorClass;
use audiotag_core::eval::{aggregate_folds, compare_runs, ReportTable, DEFAULT_THRESHOLD};
use audiotag_core::experiment::{
    self, evaluate_scores, extract_features, fold_seed, load_features, read_scores, run_experiment, train_chunksvm,
    train_dae_model, train_dnn, train_gmm, train_misvm, write_feature_set, write_report, write_scores, DataConfig,
    ExperimentConfig, TagModel,
};
use audiotag_core::features::{FeatureKind, FeatureMatrix};
use audiotag_core::tagger::TaggerConfig;
use audiotag_core::tags::{Tag, TagSet};
use audiotag_core::Error;

#[derive(Parser)]
#[command(name = "audiotag", version, about = "Environmental audio tagging: features, models, evaluation")]
struct Cli {
    /// Log more (-v debug, -vv trace); RUST_LOG overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute MBK or MFCC features for every chunk in a list.
    ExtractFeatures(ExtractArgs),
    /// Train the DNN tagger on one fold's training chunks.
    TrainDnn(TrainArgs),
    /// Train a denoising auto-encoder on one fold's training chunks.
    TrainDae(TrainDaeArgs),
    /// Turn a feature cache into bottleneck-code features.
    EncodeDae(EncodeArgs),
    /// Train per-tag GMM pairs, or merge per-tag GMM model files.
    TrainGmm(TrainGmmArgs),
    /// Train frame-level MI-SVMs, one per tag.
    TrainMisvm(TrainArgs),
    /// Train chunk-statistics SVMs, one per tag.
    TrainChunksvm(TrainArgs),
    /// Score chunks with a trained model into a score CSV.
    Predict(PredictArgs),
    /// Evaluate score CSVs (one per fold) into EER and F-score reports.
    Evaluate(EvaluateArgs),
    /// Put several report.csv files side by side with deltas.
    Compare(CompareArgs),
    /// Run a whole experiment from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Chunk list CSV with columns chunk_id,labels[,fold].
    #[arg(long)]
    chunks: PathBuf,
    /// CSV of chunk_id,fold overriding the list's fold column.
    #[arg(long)]
    fold_spec: Option<PathBuf>,
    /// Directory with <chunk_id>.wav files (default: the list's directory).
    #[arg(long)]
    audio_dir: Option<PathBuf>,
    /// Keep raw-only chunks out of training sets.
    #[arg(long)]
    no_weak: bool,
}

impl DataArgs {
    fn config(&self) -> DataConfig {
        DataConfig {
            chunk_list: self.chunks.clone(),
            fold_spec: self.fold_spec.clone(),
            audio_dir: self.audio_dir.clone(),
            include_weak: !self.no_weak,
        }
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    data: DataArgs,
    /// mbk or mfcc.
    #[arg(long, default_value = "mbk")]
    kind: String,
    /// Output directory for <chunk_id>.atfc files.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Feature cache directory.
    #[arg(long)]
    features: PathBuf,
    /// Test fold to hold out of training: 0-4, or eval to train on all development folds.
    #[arg(long)]
    fold: String,
    /// Experiment config supplying module settings and the master seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output model file.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDaeArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// adae or sdae, overriding the config.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct EncodeArgs {
    /// DAE model file.
    #[arg(long)]
    model: PathBuf,
    /// Input feature cache directory.
    #[arg(long)]
    features: PathBuf,
    /// Output directory for code features.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainGmmArgs {
    /// Chunk list CSV with columns chunk_id,labels[,fold].
    #[arg(long, required_unless_present = "merge")]
    chunks: Option<PathBuf>,
    /// CSV of chunk_id,fold overriding the list's fold column.
    #[arg(long)]
    fold_spec: Option<PathBuf>,
    /// Keep raw-only chunks out of training sets.
    #[arg(long)]
    no_weak: bool,
    /// Feature cache directory.
    #[arg(long, required_unless_present = "merge")]
    features: Option<PathBuf>,
    /// Test fold to hold out of training.
    #[arg(long, required_unless_present = "merge")]
    fold: Option<String>,
    /// Experiment config whose [gmm] section supplies the EM settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Train only these tags (letters, repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    tag: Vec<String>,
    /// Merge per-tag model files instead of training.
    #[arg(long, num_args = 1.., conflicts_with_all = ["chunks", "features", "fold", "tag"])]
    merge: Vec<PathBuf>,
    /// Output model file.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Tagger, GMM or SVM model file.
    #[arg(long)]
    model: PathBuf,
    /// Feature cache directory matching the model's feature kind.
    #[arg(long)]
    features: PathBuf,
    /// Chunk list; without it every cached chunk is scored.
    #[arg(long)]
    chunks: Option<PathBuf>,
    /// CSV of chunk_id,fold overriding the list's fold column.
    #[arg(long, requires = "chunks")]
    fold_spec: Option<PathBuf>,
    /// Score only this fold's test chunks.
    #[arg(long, requires = "chunks")]
    fold: Option<String>,
    /// Output score CSV.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Chunk list with reference tags.
    #[arg(long)]
    chunks: PathBuf,
    /// CSV of chunk_id,fold overriding the list's fold column.
    #[arg(long)]
    fold_spec: Option<PathBuf>,
    /// Score CSVs; each file is one fold, named after its file stem.
    #[arg(required = true)]
    scores: Vec<PathBuf>,
    /// Decision threshold for precision, recall and F-score.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// System name for the markdown report.
    #[arg(long, default_value = "system")]
    name: String,
    /// Directory for report.csv, report_folds.csv and report.md.
    #[arg(long, short)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// report.csv files; the first is the reference for deltas.
    #[arg(num_args = 2.., required = true)]
    reports: Vec<PathBuf>,
    /// Column names, one per report (default: the report's directory name).
    #[arg(long, value_delimiter = ',')]
    names: Vec<String>,
    /// Also write the table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn config_error(message: impl Into<String>) -> anyhow::Error {
    Error::Config(message.into()).into()
}

fn parse_fold(text: &str) -> Result<FoldId> {
    FoldId::parse(text).ok_or_else(|| config_error(format!("unknown fold {text:?}; expected 0-4 or eval")))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut c = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

/// Training records of `fold` with their cached features.
fn training_set(data: &DataConfig, features: &Path, fold: FoldId) -> Result<Vec<(FeatureMatrix, TagSet)>> {
    let list = experiment::load_chunks(data)?;
    let split = list.split(fold, data.include_weak);
    if split.train.is_empty() {
        return Err(config_error(format!("fold {fold} leaves no training chunks")));
    }
    let feats = load_features(&split.train, features)?;
    log::info!("{} training chunks for test fold {fold}", feats.len());
    Ok(feats.into_iter().zip(&split.train).map(|(m, r)| (m, r.tags)).collect())
}

/// Every `*.atfc` file in `dir`, sorted by file name.
fn cached_features(dir: &Path) -> Result<Vec<FeatureMatrix>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "atfc"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Degenerate(format!("no .atfc files in {}", dir.display())).into());
    }
    Ok(paths.iter().map(|p| read_features(p)).collect::<audiotag_core::Result<_>>()?)
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let kind = match FeatureKind::parse(&a.kind) {
        Some(k @ (FeatureKind::Mbk | FeatureKind::Mfcc)) => k,
        _ => return Err(config_error(format!("--kind must be mbk or mfcc, got {:?}", a.kind))),
    };
    let list = experiment::load_chunks(&a.data.config())?;
    let records: Vec<&ChunkRecord> = list.records().iter().collect();
    extract_features(&records, kind, &a.out)?;
    log::info!("wrote {} {} feature files to {}", records.len(), kind.name(), a.out.display());
    Ok(())
}

fn cmd_train_dnn(a: TrainArgs) -> Result<()> {
    let config = load_config(a.config.as_deref(), a.seed)?;
    let fold = parse_fold(&a.fold)?;
    let train = training_set(&a.data.config(), &a.features, fold)?;
    let kind = train[0].0.kind;
    let base = if kind == FeatureKind::DaeCode {
        config.code_tagger_config()
    } else {
        config.dnn.clone()
    };
    let cfg = TaggerConfig {
        feature_kind: kind,
        seed: fold_seed(config.seed, fold, "dnn"),
        ..base
    };
    let tagger = train_dnn(&train, &cfg)?;
    tagger.save(&a.out)?;
    Ok(())
}

fn cmd_train_dae(a: TrainDaeArgs) -> Result<()> {
    let t = a.train;
    let mut config = load_config(t.config.as_deref(), t.seed)?;
    if let Some(v) = &a.variant {
        let variant = DaeVariant::parse(v).ok_or_else(|| config_error(format!("unknown DAE variant {v:?}")))?;
        if variant != config.dae.variant {
            config.dae.variant = variant;
            config.dae.bottleneck = variant.default_bottleneck();
        }
    }
    let fold = parse_fold(&t.fold)?;
    let train: Vec<FeatureMatrix> = training_set(&t.data.config(), &t.features, fold)?
        .into_iter()
        .map(|(m, _)| m)
        .collect();
    let mut cfg = config.dae.clone();
    cfg.seed = fold_seed(config.seed, fold, "dae");
    let model = train_dae_model(&train, &cfg)?;
    model.save(&t.out)?;
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let model = DaeModel::load(&a.model)?;
    let feats = cached_features(&a.features)?;
    let codes = model.encode_corpus(&feats)?;
    let norm_id = model.norm.as_ref().map(|n| n.id());
    write_feature_set(&a.out, &codes, norm_id.as_deref())?;
    log::info!("wrote {} code files ({} dims) to {}", codes.len(), model.code_dim(), a.out.display());
    Ok(())
}

fn cmd_train_gmm(a: TrainGmmArgs) -> Result<()> {
    if !a.merge.is_empty() {
        let parts = a.merge.iter().map(|p| GmmTagModel::load(p)).collect::<audiotag_core::Result<Vec<_>>>()?;
        GmmTagModel::merge(parts)?.save(&a.out)?;
        return Ok(());
    }
    let config = load_config(a.config.as_deref(), a.seed)?;
    let fold = parse_fold(a.fold.as_deref().expect("required by clap"))?;
    let tags: Vec<Tag> = if a.tag.is_empty() {
        Tag::ALL.to_vec()
    } else {
        a.tag
            .iter()
            .flat_map(|s| s.chars())
            .map(|c| Tag::from_letter(c).ok_or_else(|| config_error(format!("unknown tag {c:?}"))))
            .collect::<Result<_>>()?
    };
    let data = DataConfig {
        chunk_list: a.chunks.expect("required by clap"),
        fold_spec: a.fold_spec,
        audio_dir: None,
        include_weak: !a.no_weak,
    };
    let train = training_set(&data, a.features.as_deref().expect("required by clap"), fold)?;
    let mut cfg = config.gmm;
    cfg.seed = fold_seed(config.seed, fold, "gmm");
    train_gmm(&train, &tags, &cfg)?.save(&a.out)?;
    Ok(())
}

fn cmd_train_misvm(a: TrainArgs) -> Result<()> {
    let config = load_config(a.config.as_deref(), a.seed)?;
    let fold = parse_fold(&a.fold)?;
    let train = training_set(&a.data.config(), &a.features, fold)?;
    let mut cfg = config.misvm;
    cfg.svm.seed = fold_seed(config.seed, fold, "misvm");
    train_misvm(&train, &cfg)?.save(&a.out)?;
    Ok(())
}

fn cmd_train_chunksvm(a: TrainArgs) -> Result<()> {
    let config = load_config(a.config.as_deref(), a.seed)?;
    let fold = parse_fold(&a.fold)?;
    let train = training_set(&a.data.config(), &a.features, fold)?;
    let mut cfg = config.chunksvm;
    cfg.seed = fold_seed(config.seed, fold, "chunksvm");
    train_chunksvm(&train, &cfg)?.save(&a.out)?;
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = TagModel::load(&a.model)?;
    let feats = match &a.chunks {
        Some(chunks) => {
            let list = experiment::load_chunks(&DataConfig {
                chunk_list: chunks.clone(),
                fold_spec: a.fold_spec.clone(),
                audio_dir: None,
                include_weak: true,
            })?;
            let records: Vec<&ChunkRecord> = match &a.fold {
                Some(f) => list.split(parse_fold(f)?, false).test,
                None => list.records().iter().collect(),
            };
            if records.is_empty() {
                return Err(config_error("no chunks selected for scoring"));
            }
            load_features(&records, &a.features)?
        }
        None => cached_features(&a.features)?,
    };
    let rows = model.score_all(&feats)?;
    write_scores(&a.out, &rows)?;
    log::info!("scored {} chunks into {}", rows.len(), a.out.display());
    Ok(())
}

fn fold_name(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| config_error(format!("cannot name a fold after {}", path.display())))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let list: ChunkList = experiment::load_chunks(&DataConfig {
        chunk_list: a.chunks.clone(),
        fold_spec: a.fold_spec.clone(),
        audio_dir: None,
        include_weak: true,
    })?;
    let mut folds = Vec::with_capacity(a.scores.len());
    for p in &a.scores {
        let name = fold_name(p)?;
        let rows = read_scores(p)?;
        folds.push((name.clone(), Some(evaluate_scores(&list, &name, &rows, a.threshold)?)));
    }
    let report = aggregate_folds(folds)?;
    write_report(&a.out_dir, &report, &a.name)?;
    print!("{}", report.to_markdown(&a.name));
    Ok(())
}

fn report_name(path: &Path) -> String {
    path.parent()
        .and_then(|d| d.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    if !a.names.is_empty() && a.names.len() != a.reports.len() {
        return Err(config_error(format!(
            "{} names given for {} reports",
            a.names.len(),
            a.reports.len()
        )));
    }
    let mut tables = Vec::with_capacity(a.reports.len());
    for (i, p) in a.reports.iter().enumerate() {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        let name = a.names.get(i).cloned().unwrap_or_else(|| report_name(p));
        tables.push(ReportTable::parse(&name, &text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: p.clone(),
                line,
                message,
            },
            other => other,
        })?);
    }
    let cmp = compare_runs(&tables)?;
    if let Some(out) = &a.csv {
        std::fs::write(out, cmp.to_csv()).map_err(|e| Error::io(format!("writing {}", out.display()), e))?;
    }
    print!("{}", cmp.to_markdown());
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&a.config)?;
    if let Some(dir) = a.output_dir {
        config.output_dir = dir;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let outcome = run_experiment(&config)?;
    print!("{}", outcome.report.to_markdown(&outcome.manifest.system));
    log::info!("artifacts in {}", config.output_dir.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::ExtractFeatures(a) => cmd_extract(a),
        Command::TrainDnn(a) => cmd_train_dnn(a),
        Command::TrainDae(a) => cmd_train_dae(a),
        Command::EncodeDae(a) => cmd_encode(a),
        Command::TrainGmm(a) => cmd_train_gmm(a),
        Command::TrainMisvm(a) => cmd_train_misvm(a),
        Command::TrainChunksvm(a) => cmd_train_chunksvm(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Run(a) => cmd_run(a),
    }
}

/// 2 config, 3 data, 4 numeric; anything not raised by the library is data.
fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err
        .chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(ErrorClass::Data, Error::class);
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

/// Joins the error chain, skipping causes whose text an outer message already includes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
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
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&config_error("x")), 2);
        assert_eq!(exit_code(&Error::Numeric("nan".into()).into()), 4);
        assert_eq!(exit_code(&Error::Degenerate("empty".into()).in_stage("s").into()), 3);
        let wrapped = anyhow::Error::from(Error::Numeric("nan".into())).context("training");
        assert_eq!(exit_code(&wrapped), 4);
    }

    #[test]
    fn error_chain_is_printed_once() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let err = anyhow::Error::from(Error::io("reading a.csv", io).in_stage("load")).context("run");
        assert_eq!(describe(&err), "run: [load] reading a.csv: gone");
    }
}
