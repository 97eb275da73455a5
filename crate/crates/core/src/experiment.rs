//! Config-driven experiment runs.
//!
//! A run extracts a feature cache, trains one model per selected fold, writes
//! `scores/<fold>.csv`, evaluates them into `report.csv`, `report_folds.csv`
//! and `report.md`, and records everything in `manifest.json`. The stage
//! functions are public so the command-line front end can run them one at a
//! time.
//!
//! Seeds: every stage seed is `derive_seed(master, label)`, the first eight
//! bytes (little endian) of `SHA-256(master as u64 LE || label)`, with labels
//! such as `fold0/dnn` or `fold2/dae`. The `seed` fields inside the module
//! sections are replaced by these derived seeds.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    gmm_tag_score, train_chunk_svm_tagger, train_gmm_tagger, train_misvm_tagger, EmConfig, GmmTagModel, MisvmConfig,
    SvmConfig, SvmTagModel, CHUNKSVM_FAMILY, GMM_FAMILY, MISVM_FAMILY,
};
use crate::container::{read_features, write_features, ModelFile};
use crate::dae::{self, train_dae, DaeConfig, DaeModel, DaeVariant};
use crate::dataset::{load_chunk_list, read_chunk, ChunkList, ChunkRecord, FoldId};
use crate::error::{Error, Result};
use crate::eval::{aggregate_folds, evaluate_fold, EvalReport, FoldReport, ScoredSet};
use crate::features::{FeatureExtractor, FeatureKind, FeatureMatrix, NormStats};
use crate::tagger::{self, train_tagger, Tagger, TaggerConfig};
use crate::tags::{Tag, TagSet, NUM_TAGS};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Model family of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Dnn,
    #[serde(rename = "dae+dnn")]
    DaeDnn,
    Gmm,
    Misvm,
    Chunksvm,
}

impl Family {
    pub fn parse(text: &str) -> Option<Family> {
        match text.trim().to_ascii_lowercase().as_str() {
            "dnn" => Some(Family::Dnn),
            "dae+dnn" | "dae-dnn" => Some(Family::DaeDnn),
            "gmm" => Some(Family::Gmm),
            "misvm" => Some(Family::Misvm),
            "chunksvm" => Some(Family::Chunksvm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Dnn => "dnn",
            Family::DaeDnn => "dae+dnn",
            Family::Gmm => "gmm",
            Family::Misvm => "misvm",
            Family::Chunksvm => "chunksvm",
        }
    }

    /// Frame features the family consumes unless configured otherwise.
    pub fn default_features(self) -> FeatureKind {
        match self {
            Family::Dnn | Family::DaeDnn => FeatureKind::Mbk,
            Family::Gmm | Family::Misvm | Family::Chunksvm => FeatureKind::Mfcc,
        }
    }

    /// Decision threshold for precision/recall. DNN outputs are posteriors;
    /// the baselines emit log-likelihood ratios or margins centred on zero.
    pub fn default_threshold(self) -> f64 {
        match self {
            Family::Dnn | Family::DaeDnn => tagger::DEFAULT_THRESHOLD,
            Family::Gmm | Family::Misvm | Family::Chunksvm => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `chunk_id,labels[,fold]` CSV.
    pub chunk_list: PathBuf,
    /// Optional `chunk_id,fold` override file.
    pub fold_spec: Option<PathBuf>,
    /// Directory holding `<chunk_id>.wav`; defaults to the list's directory.
    pub audio_dir: Option<PathBuf>,
    /// Add raw-only chunks to every training set.
    pub include_weak: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            chunk_list: PathBuf::from("chunks.csv"),
            fold_spec: None,
            audio_dir: None,
            include_weak: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// System name used in reports; derived from family and features if unset.
    pub name: Option<String>,
    pub family: Family,
    /// Frame features (for `dae+dnn`, the DAE input). Family default if unset.
    pub features: Option<FeatureKind>,
    /// Test folds to run: `"0"`..`"4"` or `"eval"`.
    pub folds: Vec<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Precision/recall threshold. Family default if unset.
    pub threshold: Option<f64>,
    /// Frame spacing between stacked DAE codes in the tagger context (the
    /// window still spans `dnn.half_width` frames each side). Defaults to 1
    /// for asymmetric codes (same layout as MBKs) and to the DAE window
    /// length for the wide symmetric codes.
    pub code_dilation: Option<usize>,
    pub data: DataConfig,
    pub dnn: TaggerConfig,
    pub dae: DaeConfig,
    pub gmm: EmConfig,
    pub misvm: MisvmConfig,
    pub chunksvm: SvmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: None,
            family: Family::Dnn,
            features: None,
            folds: (0..crate::dataset::NUM_DEV_FOLDS).map(|k| k.to_string()).collect(),
            seed: 1,
            output_dir: PathBuf::from("run"),
            threshold: None,
            code_dilation: None,
            data: DataConfig::default(),
            dnn: TaggerConfig::default(),
            dae: DaeConfig::default(),
            gmm: EmConfig::default(),
            misvm: MisvmConfig::default(),
            chunksvm: SvmConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parses a TOML document. A symmetric DAE section without an explicit
    /// bottleneck gets the symmetric default width.
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let mut doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        if let Some(toml::Value::Table(dae)) = doc.get_mut("dae") {
            let variant = match dae.get("variant") {
                Some(toml::Value::String(v)) => {
                    DaeVariant::parse(v).ok_or_else(|| Error::Config(format!("unknown DAE variant {v:?}")))?
                }
                Some(_) => return Err(Error::Config("dae.variant must be a string".into())),
                None => DaeVariant::Asymmetric,
            };
            if !dae.contains_key("bottleneck") {
                dae.insert("bottleneck".into(), toml::Value::Integer(variant.default_bottleneck() as i64));
            }
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid experiment config: {e}")))
    }

    /// Reads a config file and resolves its paths against the file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut config = Self::from_toml_str(&text)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.output_dir = resolve(base, &self.output_dir);
        self.data.chunk_list = resolve(base, &self.data.chunk_list);
        self.data.fold_spec = self.data.fold_spec.as_deref().map(|p| resolve(base, p));
        self.data.audio_dir = self.data.audio_dir.as_deref().map(|p| resolve(base, p));
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }

    pub fn base_features(&self) -> FeatureKind {
        self.features.unwrap_or_else(|| self.family.default_features())
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or_else(|| self.family.default_threshold())
    }

    pub fn fold_ids(&self) -> Result<Vec<FoldId>> {
        if self.folds.is_empty() {
            return Err(Error::Config("no folds selected".into()));
        }
        let mut out = Vec::with_capacity(self.folds.len());
        for f in &self.folds {
            let id = FoldId::parse(f).ok_or_else(|| Error::Config(format!("unknown fold {f:?}")))?;
            if out.contains(&id) {
                return Err(Error::Config(format!("fold {f} selected twice")));
            }
            out.push(id);
        }
        Ok(out)
    }

    pub fn system_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let feat = self.base_features().name().to_ascii_uppercase();
        match self.family {
            Family::Dnn => format!("{feat}-DNN"),
            Family::DaeDnn => {
                let v = match self.dae.variant {
                    DaeVariant::Asymmetric => "aDAE",
                    DaeVariant::Symmetric => "sDAE",
                };
                format!("{v}-DNN")
            }
            Family::Gmm => format!("{feat}-GMM"),
            Family::Misvm => format!("{feat}-MISVM"),
            Family::Chunksvm => format!("{feat}-ChunkSVM"),
        }
    }

    /// Tagger settings for DAE codes.
    pub fn code_tagger_config(&self) -> TaggerConfig {
        let default = match self.dae.variant {
            DaeVariant::Asymmetric => 1,
            DaeVariant::Symmetric => self.dae.context_frames,
        };
        let dilation = self.code_dilation.unwrap_or(default).max(1);
        TaggerConfig {
            feature_kind: FeatureKind::DaeCode,
            dilation,
            ..self.dnn.clone()
        }
    }

    /// Checks everything the selected family needs before any compute.
    pub fn validate(&self) -> Result<()> {
        self.fold_ids()?;
        if self.base_features() == FeatureKind::DaeCode {
            return Err(Error::Config(
                "features must be mbk or mfcc; DAE codes are produced by the dae+dnn family".into(),
            ));
        }
        if !self.threshold().is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        match self.family {
            Family::Dnn => self.dnn.validate()?,
            Family::DaeDnn => {
                self.dae.validate()?;
                if self.code_dilation == Some(0) {
                    return Err(Error::Config("code_dilation must be at least 1".into()));
                }
                self.code_tagger_config().validate()?;
            }
            Family::Gmm => validate_em(&self.gmm)?,
            Family::Misvm => {
                validate_svm(&self.misvm.svm)?;
                if self.misvm.max_outer_iterations == 0 {
                    return Err(Error::Config("misvm.max_outer_iterations must be positive".into()));
                }
            }
            Family::Chunksvm => validate_svm(&self.chunksvm)?,
        }
        Ok(())
    }

    /// SHA-256 of the config with the output directory blanked, so a rerun
    /// into another directory hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn validate_em(c: &EmConfig) -> Result<()> {
    if c.components == 0 || c.iterations == 0 {
        return Err(Error::Config("gmm.components and gmm.iterations must be positive".into()));
    }
    if !(c.variance_floor > 0.0) {
        return Err(Error::Config("gmm.variance_floor must be positive".into()));
    }
    Ok(())
}

fn validate_svm(c: &SvmConfig) -> Result<()> {
    if !(c.regularization > 0.0 && c.regularization.is_finite()) {
        return Err(Error::Config("SVM regularization must be positive and finite".into()));
    }
    if c.epochs == 0 {
        return Err(Error::Config("SVM epochs must be positive".into()));
    }
    Ok(())
}

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

pub fn fold_label(fold: FoldId) -> String {
    match fold {
        FoldId::Dev(k) => format!("fold{k}"),
        FoldId::Evaluation => "eval".into(),
    }
}

/// Seed of one training stage for one test fold, e.g. `fold0/dnn`.
pub fn fold_seed(master: u64, fold: FoldId, stage: &str) -> u64 {
    derive_seed(master, &format!("{}/{stage}", fold_label(fold)))
}

// ---------------------------------------------------------------- data

pub fn load_chunks(data: &DataConfig) -> Result<ChunkList> {
    let mut list = load_chunk_list(&data.chunk_list, data.fold_spec.as_deref())?;
    if let Some(dir) = &data.audio_dir {
        list.set_audio_dir(dir);
    }
    Ok(list)
}

pub fn feature_path(dir: &Path, chunk_id: &str) -> PathBuf {
    dir.join(format!("{chunk_id}.atfc"))
}

/// Reads audio and writes one feature file per chunk into `out_dir`.
pub fn extract_features(records: &[&ChunkRecord], kind: FeatureKind, out_dir: &Path) -> Result<()> {
    if kind == FeatureKind::DaeCode {
        return Err(Error::Config("DAE codes come from encode-dae, not from audio".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let extractor = FeatureExtractor::new();
    records.par_iter().try_for_each(|r| {
        let audio = read_chunk(&r.audio_path)?;
        let m = extractor.extract(&r.chunk_id, &audio, kind)?;
        write_features(&feature_path(out_dir, &r.chunk_id), &m, None)
    })
}

/// Loads cached features for `records`, in order.
pub fn load_features(records: &[&ChunkRecord], dir: &Path) -> Result<Vec<FeatureMatrix>> {
    records
        .par_iter()
        .map(|r| {
            let m = read_features(&feature_path(dir, &r.chunk_id))?;
            if m.chunk_id != r.chunk_id {
                return Err(Error::Container {
                    path: feature_path(dir, &r.chunk_id),
                    message: format!("holds chunk {} instead of {}", m.chunk_id, r.chunk_id),
                });
            }
            Ok(m)
        })
        .collect()
}

pub fn write_feature_set(dir: &Path, matrices: &[FeatureMatrix], norm_stats_id: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    matrices
        .par_iter()
        .try_for_each(|m| write_features(&feature_path(dir, &m.chunk_id), m, norm_stats_id))
}

fn labeled(records: &[&ChunkRecord], features: Vec<FeatureMatrix>) -> Vec<(FeatureMatrix, TagSet)> {
    features.into_iter().zip(records).map(|(m, r)| (m, r.tags)).collect()
}

// ---------------------------------------------------------------- training

/// Normalization fitted on the training features, then the tagger.
pub fn train_dnn(train: &[(FeatureMatrix, TagSet)], config: &TaggerConfig) -> Result<Tagger> {
    let norm = NormStats::fit(train.iter().map(|(m, _)| m))?;
    train_tagger(train, config, &norm)
}

/// Normalizes with statistics of `train`, trains, and stores the statistics
/// in the model so encoding applies them.
pub fn train_dae_model(train: &[FeatureMatrix], config: &DaeConfig) -> Result<DaeModel> {
    let norm = NormStats::fit(train)?;
    let normalized: Vec<FeatureMatrix> = train.iter().map(|m| norm.apply(m)).collect::<Result<_>>()?;
    let refs: Vec<&FeatureMatrix> = normalized.iter().collect();
    let mut model = train_dae(&refs, config)?;
    model.norm = Some(norm);
    if let Some(e) = model.final_cv_error_per_dim() {
        log::info!("DAE held-out reconstruction error per output dim: {e:.5}");
    }
    Ok(model)
}

pub fn train_gmm(train: &[(FeatureMatrix, TagSet)], tags: &[Tag], config: &EmConfig) -> Result<GmmTagModel> {
    train_gmm_tagger(train, tags, config)
}

/// Standardizes frames with statistics of `train`, then MI-SVM per tag.
pub fn train_misvm(train: &[(FeatureMatrix, TagSet)], config: &MisvmConfig) -> Result<SvmTagModel> {
    let norm = NormStats::fit(train.iter().map(|(m, _)| m))?;
    train_misvm_tagger(train, &norm, config)
}

pub fn train_chunksvm(train: &[(FeatureMatrix, TagSet)], config: &SvmConfig) -> Result<SvmTagModel> {
    train_chunk_svm_tagger(train, config)
}

// ---------------------------------------------------------------- scoring

/// Any trained chunk scorer.
#[derive(Debug, Clone, PartialEq)]
pub enum TagModel {
    Dnn(Tagger),
    Gmm(GmmTagModel),
    Svm(SvmTagModel),
}

impl TagModel {
    pub fn from_model_file(file: &ModelFile) -> Result<TagModel> {
        match file.family.as_str() {
            tagger::MODEL_FAMILY => Ok(TagModel::Dnn(Tagger::from_model_file(file)?)),
            GMM_FAMILY => Ok(TagModel::Gmm(GmmTagModel::from_model_file(file)?)),
            MISVM_FAMILY | CHUNKSVM_FAMILY => Ok(TagModel::Svm(SvmTagModel::from_model_file(file)?)),
            dae::MODEL_FAMILY => Err(Error::Config(
                "this is a DAE model; use it to encode features, not to score chunks".into(),
            )),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }

    pub fn load(path: &Path) -> Result<TagModel> {
        Self::from_model_file(&ModelFile::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TagModel::Dnn(m) => m.save(path),
            TagModel::Gmm(m) => m.save(path),
            TagModel::Svm(m) => m.save(path),
        }
    }

    pub fn feature_kind(&self) -> FeatureKind {
        match self {
            TagModel::Dnn(m) => m.config.feature_kind,
            TagModel::Gmm(m) => m.feature_kind,
            TagModel::Svm(m) => m.feature_kind,
        }
    }

    pub fn score(&self, chunk: &FeatureMatrix) -> Result<[f64; NUM_TAGS]> {
        if chunk.kind != self.feature_kind() {
            return Err(Error::Shape(format!(
                "model expects {} features, chunk {} has {}",
                self.feature_kind().name(),
                chunk.chunk_id,
                chunk.kind.name()
            )));
        }
        match self {
            TagModel::Dnn(m) => Ok(m.predict(chunk)?.posteriors),
            TagModel::Gmm(m) => gmm_tag_score(m, chunk),
            TagModel::Svm(m) => m.score(chunk),
        }
    }

    pub fn score_all(&self, chunks: &[FeatureMatrix]) -> Result<Vec<ChunkScores>> {
        chunks
            .par_iter()
            .map(|m| {
                Ok(ChunkScores {
                    chunk_id: m.chunk_id.clone(),
                    scores: self.score(m)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkScores {
    pub chunk_id: String,
    pub scores: [f64; NUM_TAGS],
}

fn score_header() -> String {
    let mut h = String::from("chunk_id");
    for t in Tag::ALL {
        let _ = write!(h, ",score_{t}");
    }
    h
}

/// `chunk_id,score_b,...,score_v`, shortest round-trip float formatting.
pub fn scores_to_csv(rows: &[ChunkScores]) -> String {
    let mut out = score_header();
    out.push('\n');
    for r in rows {
        out.push_str(&r.chunk_id);
        for s in r.scores {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
    }
    out
}

pub fn write_scores(path: &Path, rows: &[ChunkScores]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, scores_to_csv(rows)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ChunkScores>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == score_header() => {}
        Some((i, h)) => return Err(parse_err(i + 1, format!("expected header {:?}, got {h:?}", score_header()))),
        None => return Err(parse_err(1, "empty score file".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != NUM_TAGS + 1 {
            return Err(parse_err(i + 1, format!("expected {} fields, got {}", NUM_TAGS + 1, fields.len())));
        }
        let mut scores = [0.0; NUM_TAGS];
        for (s, f) in scores.iter_mut().zip(&fields[1..]) {
            *s = f.parse().map_err(|_| parse_err(i + 1, format!("bad score {f:?}")))?;
        }
        out.push(ChunkScores {
            chunk_id: fields[0].to_string(),
            scores,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- evaluation

/// Scores one fold against the reference tags in `list`.
pub fn evaluate_scores(list: &ChunkList, fold: &str, rows: &[ChunkScores], threshold: f64) -> Result<FoldReport> {
    let mut truth = Vec::with_capacity(rows.len());
    for r in rows {
        let rec = list
            .get(&r.chunk_id)
            .ok_or_else(|| Error::Degenerate(format!("scored chunk {} is not in the chunk list", r.chunk_id)))?;
        truth.push(rec.tags);
    }
    let set = ScoredSet::from_chunks(rows.iter().zip(truth).map(|(r, t)| (r.chunk_id.as_str(), r.scores, t)))?;
    evaluate_fold(fold, &set, threshold)
}

pub fn write_report(dir: &Path, report: &EvalReport, system: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (name, body) in [
        ("report.csv", report.to_csv()),
        ("report_folds.csv", report.fold_csv()),
        ("report.md", report.to_markdown(system)),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub system: String,
    pub family: String,
    pub config_sha256: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    /// Path relative to the output directory, with `/` separators → SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Container {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let p = entry.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 of every file under `dir` except the manifest itself.
pub fn checksum_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files
        .par_iter()
        .filter_map(|p| {
            let rel = p.strip_prefix(dir).ok()?;
            if rel == Path::new(MANIFEST_FILE) {
                return None;
            }
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Some(
                fs::read(p)
                    .map(|bytes| (key, hex::encode(Sha256::digest(bytes))))
                    .map_err(|e| Error::io(format!("reading {}", p.display()), e)),
            )
        })
        .collect()
}

// ---------------------------------------------------------------- orchestration

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub manifest: Manifest,
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}


/// Runs the whole pipeline described by `config`.
///
/// Artifacts already written stay in place when a stage fails.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    staged("validate", config.validate())?;
    let out = &config.output_dir;
    staged(
        "setup",
        fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e)),
    )?;
    let list = staged("load-chunks", load_chunks(&config.data))?;
    let folds = config.fold_ids()?;
    for &f in &folds {
        if list.count_in_fold(f) == 0 {
            return Err(Error::Config(format!("fold {f} has no chunks")).in_stage("load-chunks"));
        }
    }

    let kind = config.base_features();
    let records: Vec<&ChunkRecord> = list.records().iter().collect();
    let feat_dir = out.join("features").join(kind.name());
    log::info!("extracting {} features for {} chunks", kind.name(), records.len());
    staged("extract-features", extract_features(&records, kind, &feat_dir))?;
    let all = staged("extract-features", load_features(&records, &feat_dir))?;
    let index: HashMap<&str, usize> = records.iter().enumerate().map(|(i, r)| (r.chunk_id.as_str(), i)).collect();
    let gather = |rs: &[&ChunkRecord], pool: &[FeatureMatrix]| -> Vec<FeatureMatrix> {
        rs.iter().map(|r| pool[index[r.chunk_id.as_str()]].clone()).collect()
    };

    let mut seeds = BTreeMap::new();
    let mut fold_reports = Vec::with_capacity(folds.len());
    let threshold = config.threshold();
    for fold in folds {
        let label = fold_label(fold);
        let split = list.split(fold, config.data.include_weak);
        log::info!("{label}: {} training / {} test chunks", split.train.len(), split.test.len());
        let fold_dir = out.join(format!("fold-{fold}"));
        let model_path = fold_dir.join("model.atmd");
        let mut seed_for = |stage: &str| {
            let s = fold_seed(config.seed, fold, stage);
            seeds.insert(format!("{label}/{stage}"), s);
            s
        };
        let stage = |name: &str| format!("{label}: {name}");

        let (model, test_features) = match config.family {
            Family::Dnn => {
                let cfg = TaggerConfig {
                    feature_kind: kind,
                    seed: seed_for("dnn"),
                    ..config.dnn.clone()
                };
                let train = labeled(&split.train, gather(&split.train, &all));
                let m = staged(&stage("train-dnn"), train_dnn(&train, &cfg))?;
                (TagModel::Dnn(m), gather(&split.test, &all))
            }
            Family::DaeDnn => {
                let dae_cfg = DaeConfig {
                    seed: seed_for("dae"),
                    ..config.dae.clone()
                };
                let train_frames = gather(&split.train, &all);
                let dae = staged(&stage("train-dae"), train_dae_model(&train_frames, &dae_cfg))?;
                staged(&stage("train-dae"), dae.save(&fold_dir.join("dae.atmd")))?;
                drop(train_frames);
                let codes = staged(&stage("encode-dae"), dae.encode_corpus(&all))?;
                let code_dir = fold_dir.join("features").join(FeatureKind::DaeCode.name());
                let norm_id = dae.norm.as_ref().map(NormStats::id);
                staged(&stage("encode-dae"), write_feature_set(&code_dir, &codes, norm_id.as_deref()))?;
                let cfg = TaggerConfig {
                    seed: seed_for("dnn"),
                    ..config.code_tagger_config()
                };
                let train = labeled(&split.train, gather(&split.train, &codes));
                let m = staged(&stage("train-dnn"), train_dnn(&train, &cfg))?;
                (TagModel::Dnn(m), gather(&split.test, &codes))
            }
            Family::Gmm => {
                let cfg = EmConfig {
                    seed: seed_for("gmm"),
                    ..config.gmm
                };
                let train = labeled(&split.train, gather(&split.train, &all));
                let m = staged(&stage("train-gmm"), train_gmm(&train, &Tag::ALL, &cfg))?;
                (TagModel::Gmm(m), gather(&split.test, &all))
            }
            Family::Misvm => {
                let mut cfg = config.misvm;
                cfg.svm.seed = seed_for("misvm");
                let train = labeled(&split.train, gather(&split.train, &all));
                let m = staged(&stage("train-misvm"), train_misvm(&train, &cfg))?;
                (TagModel::Svm(m), gather(&split.test, &all))
            }
            Family::Chunksvm => {
                let cfg = SvmConfig {
                    seed: seed_for("chunksvm"),
                    ..config.chunksvm
                };
                let train = labeled(&split.train, gather(&split.train, &all));
                let m = staged(&stage("train-chunksvm"), train_chunksvm(&train, &cfg))?;
                (TagModel::Svm(m), gather(&split.test, &all))
            }
        };
        staged(&stage("save-model"), model.save(&model_path))?;

        let rows = staged(&stage("predict"), model.score_all(&test_features))?;
        staged(
            &stage("predict"),
            write_scores(&out.join("scores").join(format!("{fold}.csv")), &rows),
        )?;
        let report = staged(&stage("evaluate"), evaluate_scores(&list, &fold.to_string(), &rows, threshold))?;
        if let Some(avg) = report.average_eer() {
            log::info!("{label}: average EER {avg:.4}");
        }
        fold_reports.push((fold.to_string(), Some(report)));
    }

    let system = config.system_name();
    let report = staged("evaluate", aggregate_folds(fold_reports))?;
    staged("evaluate", write_report(out, &report, &system))?;
    // The copy points at its own directory so reruns elsewhere stay byte-equal.
    let config_path = out.join("config.toml");
    let stored = ExperimentConfig {
        output_dir: PathBuf::from("."),
        ..config.clone()
    };
    staged(
        "manifest",
        fs::write(&config_path, stored.to_toml_string())
            .map_err(|e| Error::io(format!("writing {}", config_path.display()), e)),
    )?;
    let manifest = Manifest {
        system,
        family: config.family.name().into(),
        config_sha256: config.hash(),
        master_seed: config.seed,
        seeds,
        artifacts: staged("manifest", checksum_tree(out))?,
    };
    let manifest_path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    staged(
        "manifest",
        fs::write(&manifest_path, json).map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e)),
    )?;
    Ok(RunOutcome { report, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_config_has_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.dnn.hidden, vec![1000, 500]);
        assert_eq!(c.base_features(), FeatureKind::Mbk);
        assert_eq!(c.threshold(), 0.4);
        c.validate().unwrap();
    }

    #[test]
    fn symmetric_dae_gets_wide_bottleneck() {
        let c = ExperimentConfig::from_toml_str("family = \"dae+dnn\"\n[dae]\nvariant = \"sdae\"\n").unwrap();
        assert_eq!(c.family, Family::DaeDnn);
        assert_eq!(c.dae.variant, DaeVariant::Symmetric);
        assert_eq!(c.dae.bottleneck, 200);
        let explicit = ExperimentConfig::from_toml_str("[dae]\nvariant = \"symmetric\"\nbottleneck = 64\n").unwrap();
        assert_eq!(explicit.dae.bottleneck, 64);
        assert_eq!(ExperimentConfig::from_toml_str("[dae]\n").unwrap().dae.bottleneck, 50);
    }

    #[test]
    fn code_context_layout() {
        let c = ExperimentConfig::default();
        let t = c.code_tagger_config();
        assert_eq!((t.half_width, t.dilation), (45, 1));
        assert_eq!(t.feature_kind, FeatureKind::DaeCode);
        assert_eq!(t.context().input_dim(c.dae.bottleneck), 4600);

        let s = ExperimentConfig::from_toml_str("[dae]\nvariant = \"sdae\"\n").unwrap();
        let t = s.code_tagger_config();
        assert_eq!((t.half_width, t.dilation), (45, 7));
        assert_eq!(t.context().input_dim(200), 14 * 200);
    }

    #[test]
    fn unknown_keys_and_folds_are_config_errors() {
        let e = ExperimentConfig::from_toml_str("famly = \"gmm\"").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let c = ExperimentConfig::from_toml_str("folds = [\"7\"]").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ExperimentConfig::from_toml_str("[dnn]\nhidden = [100, 200]").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_depend_on_label_and_master() {
        let a = derive_seed(1, "fold0/dnn");
        assert_eq!(a, derive_seed(1, "fold0/dnn"));
        assert_ne!(a, derive_seed(2, "fold0/dnn"));
        assert_ne!(a, derive_seed(1, "fold1/dnn"));
        let mut h = Sha256::new();
        h.update(1u64.to_le_bytes());
        h.update(b"fold0/dnn");
        let d = h.finalize();
        assert_eq!(a, u64::from_le_bytes(d[..8].try_into().unwrap()));
    }

    #[test]
    fn score_csv_round_trips() {
        let rows = vec![
            ChunkScores {
                chunk_id: "a".into(),
                scores: [0.1, 0.2, 1.0 / 3.0, -4.5, 0.0, 1e-12, 0.9],
            },
            ChunkScores {
                chunk_id: "b".into(),
                scores: [0.5; NUM_TAGS],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&p, &rows).unwrap();
        assert_eq!(read_scores(&p).unwrap(), rows);
        fs::write(&p, "chunk,x\n").unwrap();
        assert!(matches!(read_scores(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn stage_errors_keep_their_class() {
        let e = Error::Numeric("nan".into()).in_stage("fold0: train-dnn");
        assert_eq!(e.class(), crate::error::ErrorClass::Numeric);
        assert!(e.to_string().starts_with("[fold0: train-dnn]"));
    }
}
