//! Chunk lists, fold assignments and 16 kHz mono WAV ingestion.
//!
//! Label CSV rows are `chunk_id,labels[,fold]`. The optional fold column holds
//! a development fold `0`..`4`, `eval` for the held-out evaluation set, or
//! `raw` for weakly labelled chunks that only ever join training sets. An
//! optional second file (`chunk_id,fold`) overrides the fold column.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tags::TagSet;

pub const SAMPLE_RATE: u32 = 16_000;
/// Nominal chunk length: 4 s at 16 kHz.
pub const CHUNK_SAMPLES: usize = 64_000;
pub const NUM_DEV_FOLDS: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Refinement {
    Refined,
    RawOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FoldId {
    Dev(u8),
    Evaluation,
}

impl FoldId {
    pub fn parse(text: &str) -> Option<FoldId> {
        let t = text.trim();
        if t.eq_ignore_ascii_case("eval") || t.eq_ignore_ascii_case("evaluation") {
            return Some(FoldId::Evaluation);
        }
        match t.parse::<u8>() {
            Ok(k) if k < NUM_DEV_FOLDS => Some(FoldId::Dev(k)),
            _ => None,
        }
    }
}

impl fmt::Display for FoldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldId::Dev(k) => write!(f, "{k}"),
            FoldId::Evaluation => write!(f, "eval"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: String,
    pub audio_path: PathBuf,
    pub tags: TagSet,
    pub refinement: Refinement,
    /// `None` only for raw-only chunks.
    pub fold: Option<FoldId>,
}

/// Loaded chunk list. Fold assignments are fixed once loaded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChunkList {
    records: Vec<ChunkRecord>,
}

impl ChunkList {
    pub fn new(records: Vec<ChunkRecord>) -> Self {
        ChunkList { records }
    }

    pub fn records(&self) -> &[ChunkRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, chunk_id: &str) -> Option<&ChunkRecord> {
        self.records.iter().find(|r| r.chunk_id == chunk_id)
    }

    /// Distinct folds present, in order.
    pub fn folds(&self) -> Vec<FoldId> {
        let mut folds: Vec<FoldId> = self.records.iter().filter_map(|r| r.fold).collect();
        folds.sort();
        folds.dedup();
        folds
    }

    pub fn count_in_fold(&self, fold: FoldId) -> usize {
        self.records.iter().filter(|r| r.fold == Some(fold)).count()
    }

    /// Points every record at `<dir>/<chunk_id>.wav`.
    pub fn set_audio_dir(&mut self, dir: &Path) {
        for r in &mut self.records {
            r.audio_path = dir.join(format!("{}.wav", r.chunk_id));
        }
    }

    /// Train/test partition for one test fold.
    ///
    /// Development folds train on every other development chunk; the evaluation
    /// fold trains on all development chunks. Raw-only chunks join every
    /// training set when `include_weak` is set and never appear in a test set.
    pub fn split(&self, test_fold: FoldId, include_weak: bool) -> Split<'_> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for r in &self.records {
            match (r.fold, test_fold) {
                (Some(f), t) if f == t => test.push(r),
                (Some(FoldId::Dev(_)), _) => train.push(r),
                (Some(FoldId::Evaluation), _) => {}
                (None, _) => {
                    if include_weak {
                        train.push(r)
                    }
                }
            }
        }
        Split { train, test }
    }
}

#[derive(Debug, Clone)]
pub struct Split<'a> {
    pub train: Vec<&'a ChunkRecord>,
    pub test: Vec<&'a ChunkRecord>,
}

fn parse_fold_field(value: &str, path: &Path, line: usize) -> Result<(Option<FoldId>, Refinement)> {
    let v = value.trim();
    if v.is_empty() {
        return Ok((None, Refinement::Refined));
    }
    if v.eq_ignore_ascii_case("raw") {
        return Ok((None, Refinement::RawOnly));
    }
    FoldId::parse(v)
        .map(|f| (Some(f), Refinement::Refined))
        .ok_or_else(|| {
            Error::Config(format!(
                "{}:{line}: unknown fold id {v:?} (expected 0-4, eval or raw)",
                path.display()
            ))
        })
}

fn read_csv_rows(path: &Path) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("chunk_id")) {
            continue;
        }
        rows.push((line, rec));
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("reading {}", path.display()), io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Loads a label CSV and an optional fold override file.
///
/// Audio paths default to `<csv dir>/<chunk_id>.wav`; use
/// [`ChunkList::set_audio_dir`] to point elsewhere.
pub fn load_chunk_list(csv_path: &Path, fold_spec: Option<&Path>) -> Result<ChunkList> {
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let overrides = match fold_spec {
        Some(p) => load_fold_spec(p)?,
        None => HashMap::new(),
    };

    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (line, row) in read_csv_rows(csv_path)? {
        let parse_err = |message: String| Error::Parse {
            path: csv_path.to_path_buf(),
            line,
            message,
        };
        if row.len() < 2 || row.len() > 3 {
            return Err(parse_err(format!(
                "expected `chunk_id,labels[,fold]`, found {} fields",
                row.len()
            )));
        }
        let chunk_id = row[0].to_string();
        if chunk_id.is_empty() {
            return Err(parse_err("empty chunk id".into()));
        }
        if let Some(prev) = seen.insert(chunk_id.clone(), line) {
            return Err(parse_err(format!(
                "duplicate chunk id {chunk_id:?} (first seen on line {prev})"
            )));
        }
        let (tags, ignored) = TagSet::parse_labels(&row[1]);
        if !ignored.is_empty() {
            log::warn!(
                "{}:{line}: ignoring annotation letters {:?} for chunk {chunk_id}",
                csv_path.display(),
                ignored.iter().collect::<String>()
            );
        }
        let (mut fold, mut refinement) = match row.get(2) {
            Some(f) => parse_fold_field(f, csv_path, line)?,
            None => (None, Refinement::Refined),
        };
        if let Some(&(f, r)) = overrides.get(&chunk_id) {
            fold = f;
            refinement = r;
        }
        if tags.is_empty() && refinement == Refinement::Refined {
            return Err(parse_err(format!(
                "chunk {chunk_id} has no tags; only raw-only chunks may be unlabeled"
            )));
        }
        records.push(ChunkRecord {
            audio_path: base.join(format!("{chunk_id}.wav")),
            chunk_id,
            tags,
            refinement,
            fold,
        });
    }
    Ok(ChunkList { records })
}

fn load_fold_spec(path: &Path) -> Result<HashMap<String, (Option<FoldId>, Refinement)>> {
    let mut out = HashMap::new();
    for (line, row) in read_csv_rows(path)? {
        if row.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected `chunk_id,fold`, found {} fields", row.len()),
            });
        }
        out.insert(row[0].to_string(), parse_fold_field(&row[1], path, line)?);
    }
    Ok(out)
}

/// Per-fold record counts, keyed by fold.
pub fn fold_counts(list: &ChunkList) -> BTreeMap<FoldId, usize> {
    let mut counts = BTreeMap::new();
    for r in list.records() {
        if let Some(f) = r.fold {
            *counts.entry(f).or_insert(0) += 1;
        }
    }
    counts
}

/// Mono PCM samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioChunk {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioChunk {
    pub fn new(samples: Vec<f64>) -> Self {
        AudioChunk {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Zero-pads or truncates to exactly 64000 samples.
    pub fn fit_to_nominal_length(mut self) -> Self {
        self.samples.resize(CHUNK_SAMPLES, 0.0);
        self
    }
}

/// Reads a 16-bit, 16 kHz, mono PCM WAV file. No resampling or downmixing is
/// attempted; anything else is a format error.
pub fn read_wav(path: &Path) -> Result<AudioChunk> {
    let format_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(format!("opening {}", path.display()), io),
        other => format_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_err(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format_err(format!(
            "expected {SAMPLE_RATE} Hz, found {} Hz",
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_err(e.to_string()))?;
    Ok(AudioChunk::new(samples))
}

/// Reads a chunk and forces it to the nominal 4 s length.
pub fn read_chunk(path: &Path) -> Result<AudioChunk> {
    Ok(read_wav(path)?.fit_to_nominal_length())
}

/// Writes 16-bit mono PCM at 16 kHz; samples are clipped to `[-1, 1)`.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}
