//! Shrinking multi-label DNN tagger over context-expanded features.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::ModelFile;
use crate::error::{Error, Result};
use crate::features::{noise_estimate, write_context_input, ContextSpec, FeatureKind, FeatureMatrix, NormStats};
use crate::nn::{self, Activation, BatchSource, LayerSpec, LossKind, MlpModel, TrainConfig, TrainHistory};
use crate::tags::{Tag, TagSet, NUM_TAGS};

pub const DEFAULT_THRESHOLD: f64 = 0.4;
pub const MODEL_FAMILY: &str = "dnn";

/// How window posteriors are pooled into one chunk score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggerConfig {
    pub feature_kind: FeatureKind,
    /// Half-width of the context window in frames.
    pub half_width: usize,
    /// Leading frames averaged into the noise block.
    pub noise_frames: usize,
    /// Spacing between stacked context frames.
    pub dilation: usize,
    /// Spacing between training window centres. Prediction always uses 1.
    pub train_stride: usize,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    pub loss: LossKind,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs; `None` disables early stopping.
    pub patience: Option<usize>,
    /// Fraction of training chunks held out for early stopping.
    pub validation_fraction: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            feature_kind: FeatureKind::Mbk,
            half_width: 45,
            noise_frames: 6,
            dilation: 1,
            train_stride: 5,
            hidden: vec![1000, 500],
            hidden_activation: Activation::Relu,
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 100,
            input_dropout: 0.1,
            hidden_dropout: 0.2,
            loss: LossKind::Bce,
            max_epochs: 100,
            patience: Some(10),
            validation_fraction: 0.1,
            aggregation: Aggregation::Mean,
            seed: 1,
        }
    }
}

impl TaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("tagger needs at least one hidden layer".into()));
        }
        if self.hidden.windows(2).any(|w| w[1] >= w[0]) || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "hidden sizes {:?} must be positive and strictly decreasing",
                self.hidden
            )));
        }
        for (name, rate) in [("input_dropout", self.input_dropout), ("hidden_dropout", self.hidden_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {rate}")));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.train_stride == 0 {
            return Err(Error::Config("batch_size and train_stride must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning_rate must be > 0 and momentum in [0, 1)".into()));
        }
        self.context().validate()
    }

    /// Layout used for prediction (stride 1).
    pub fn context(&self) -> ContextSpec {
        ContextSpec::new(self.half_width, self.noise_frames).with_dilation(self.dilation)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs: Vec<LayerSpec> = self
            .hidden
            .iter()
            .enumerate()
            .map(|(i, &units)| {
                let rate = if i == 0 { self.input_dropout } else { self.hidden_dropout };
                LayerSpec::new(units, self.hidden_activation, rate)
            })
            .collect();
        let out_rate = if self.hidden.is_empty() { self.input_dropout } else { self.hidden_dropout };
        specs.push(LayerSpec::new(NUM_TAGS, Activation::Sigmoid, out_rate));
        specs
    }

    pub fn build_model(&self, feature_dim: usize) -> Result<MlpModel> {
        self.validate()?;
        MlpModel::new(self.context().input_dim(feature_dim), &self.layer_specs(), self.seed)
    }
}

/// Chunk-level tag posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkScore {
    pub chunk_id: String,
    pub posteriors: [f64; NUM_TAGS],
}

impl ChunkScore {
    pub fn get(&self, tag: Tag) -> f64 {
        self.posteriors[tag.index()]
    }
}

struct Chunk<'a> {
    matrix: &'a FeatureMatrix,
    noise: Array1<f64>,
    target: [f64; NUM_TAGS],
}

/// Context windows drawn lazily from a set of normalized chunks; every window
/// carries its chunk's tag vector as target.
pub struct WindowSource<'a> {
    chunks: Vec<Chunk<'a>>,
    index: Vec<(usize, usize)>,
    offsets: Vec<isize>,
    feature_dim: usize,
    input_dim: usize,
}

impl<'a> WindowSource<'a> {
    pub fn new(chunks: &[(&'a FeatureMatrix, TagSet)], spec: &ContextSpec) -> Result<Self> {
        spec.validate()?;
        let feature_dim = chunks.first().map_or(0, |(m, _)| m.dims());
        let mut built = Vec::with_capacity(chunks.len());
        let mut index = Vec::new();
        for (ci, (m, tags)) in chunks.iter().enumerate() {
            if m.dims() != feature_dim {
                return Err(Error::Shape(format!(
                    "chunk {} has {} dims, expected {feature_dim}",
                    m.chunk_id,
                    m.dims()
                )));
            }
            let noise = noise_estimate(m, spec.noise_frames)?;
            index.extend(spec.centers(m.frames()).map(|c| (ci, c)));
            built.push(Chunk {
                matrix: m,
                noise,
                target: tags.to_target(),
            });
        }
        Ok(WindowSource {
            chunks: built,
            index,
            offsets: spec.offsets(),
            feature_dim,
            input_dim: spec.input_dim(feature_dim),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
}

impl BatchSource for WindowSource<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn target_dim(&self) -> usize {
        NUM_TAGS
    }

    fn fill(&self, indices: &[usize], inputs: &mut Array2<f64>, targets: &mut Array2<f64>) {
        for (r, &i) in indices.iter().enumerate() {
            let (ci, center) = self.index[i];
            let chunk = &self.chunks[ci];
            let mut row = inputs.row_mut(r);
            let out = row.as_slice_mut().expect("batch rows are contiguous");
            write_context_input(chunk.matrix, center, &self.offsets, chunk.noise.view(), out);
            for (t, v) in targets.row_mut(r).iter_mut().zip(chunk.target) {
                *t = v;
            }
        }
    }
}

/// A trained tagger with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub config: TaggerConfig,
    pub model: MlpModel,
    pub norm: NormStats,
    pub history: TrainHistory,
}

/// Trains on raw (unnormalized) chunk features; `norm` is applied first.
pub fn train_tagger(train: &[(FeatureMatrix, TagSet)], config: &TaggerConfig, norm: &NormStats) -> Result<Tagger> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Degenerate("no training chunks".into()));
    }
    let normalized: Vec<(FeatureMatrix, TagSet)> = train
        .iter()
        .map(|(m, t)| Ok((norm.apply(m)?, *t)))
        .collect::<Result<_>>()?;
    let feature_dim = norm.dims();
    let mut model = config.build_model(feature_dim)?;

    // Chunk-level hold-out so windows of one chunk never straddle the split.
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ca11));
    let n_valid = if config.patience.is_some() && normalized.len() >= 2 {
        ((normalized.len() as f64 * config.validation_fraction).round() as usize).clamp(1, normalized.len() - 1)
    } else {
        0
    };
    let (valid_idx, train_idx) = order.split_at(if config.validation_fraction > 0.0 { n_valid } else { 0 });
    let pick = |idx: &[usize]| -> Vec<(&FeatureMatrix, TagSet)> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| (&normalized[i].0, normalized[i].1)).collect()
    };
    let train_chunks = pick(train_idx);
    let valid_chunks = pick(valid_idx);

    let train_spec = config.context().with_stride(config.train_stride);
    let train_src = WindowSource::new(&train_chunks, &train_spec)?;
    let valid_src = if valid_chunks.is_empty() {
        None
    } else {
        Some(WindowSource::new(&valid_chunks, &train_spec)?)
    };
    log::info!(
        "training tagger on {} windows ({} held out), input dim {}",
        train_src.len(),
        valid_src.as_ref().map_or(0, |v| v.len()),
        train_src.input_dim()
    );
    let history = nn::train(
        &mut model,
        &train_src,
        valid_src.as_ref().map(|v| v as &dyn BatchSource),
        &TrainConfig {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            batch_size: config.batch_size,
            max_epochs: config.max_epochs,
            patience: config.patience,
            loss: config.loss,
            seed: config.seed.wrapping_add(1),
        },
    )?;
    Ok(Tagger {
        config: config.clone(),
        model,
        norm: norm.clone(),
        history,
    })
}

/// Pools a `windows × tags` posterior matrix into one score per tag.
pub fn aggregate_windows(outputs: ArrayView2<'_, f64>, aggregation: Aggregation) -> Result<[f64; NUM_TAGS]> {
    if outputs.nrows() == 0 || outputs.ncols() != NUM_TAGS {
        return Err(Error::Shape(format!(
            "expected a non-empty windows × {NUM_TAGS} matrix, got {:?}",
            outputs.dim()
        )));
    }
    let pooled = match aggregation {
        Aggregation::Mean => outputs.mean_axis(Axis(0)).expect("non-empty"),
        Aggregation::Max => outputs.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b)),
    };
    let mut out = [0.0; NUM_TAGS];
    out.iter_mut().zip(pooled.iter()).for_each(|(o, v)| *o = *v);
    Ok(out)
}

/// Scores one already-normalized chunk with every stride-1 window.
pub fn predict_chunk(model: &MlpModel, features: &FeatureMatrix, config: &TaggerConfig) -> Result<ChunkScore> {
    let spec = config.context();
    let expected = spec.input_dim(features.dims());
    if model.input_dim() != expected || model.output_dim() != NUM_TAGS {
        return Err(Error::Shape(format!(
            "model is {}→{} but chunk {} needs {expected}→{NUM_TAGS}",
            model.input_dim(),
            model.output_dim(),
            features.chunk_id
        )));
    }
    let source = WindowSource::new(&[(features, TagSet::empty())], &spec)?;
    let n = source.len();
    let indices: Vec<usize> = (0..n).collect();
    let mut outputs = Array2::zeros((n, NUM_TAGS));
    let batch = 128;
    for (b, idx) in indices.chunks(batch).enumerate() {
        let mut x = Array2::zeros((idx.len(), expected));
        let mut t = Array2::zeros((idx.len(), NUM_TAGS));
        source.fill(idx, &mut x, &mut t);
        let y = model.predict(x.view())?;
        outputs
            .slice_mut(ndarray::s![b * batch..b * batch + idx.len(), ..])
            .assign(&y);
    }
    Ok(ChunkScore {
        chunk_id: features.chunk_id.clone(),
        posteriors: aggregate_windows(outputs.view(), config.aggregation)?,
    })
}

/// Tag present iff its posterior is strictly above `threshold`.
pub fn decide_tags(score: &ChunkScore, threshold: f64) -> TagSet {
    let mut set = TagSet::empty();
    for tag in Tag::ALL {
        if score.get(tag) > threshold {
            set.insert(tag);
        }
    }
    set
}

impl Tagger {
    /// Scores a raw chunk (normalization applied here).
    pub fn predict(&self, raw: &FeatureMatrix) -> Result<ChunkScore> {
        predict_chunk(&self.model, &self.norm.apply(raw)?, &self.config)
    }

    pub fn predict_all(&self, raw: &[FeatureMatrix]) -> Result<Vec<ChunkScore>> {
        raw.par_iter().map(|m| self.predict(m)).collect()
    }

    pub fn to_model_file(&self) -> ModelFile {
        let meta = serde_json::json!({
            "config": self.config,
            "history": self.history,
        });
        let mut file = ModelFile::new(MODEL_FAMILY, self.config.seed, meta);
        file.push_mlp("net", &self.model);
        file.push_norm(&self.norm);
        file
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Tagger> {
        if file.family != MODEL_FAMILY {
            return Err(Error::Config(format!("expected a {MODEL_FAMILY} model, found {}", file.family)));
        }
        let config: TaggerConfig = serde_json::from_value(file.meta["config"].clone())
            .map_err(|e| Error::Shape(format!("tagger config in model file: {e}")))?;
        let history = serde_json::from_value(file.meta["history"].clone()).unwrap_or_default();
        Ok(Tagger {
            config,
            model: file.mlp("net")?,
            norm: file.norm()?,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Tagger> {
        Tagger::from_model_file(&ModelFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_config() -> TaggerConfig {
        TaggerConfig {
            half_width: 2,
            noise_frames: 2,
            hidden: vec![6, 4],
            max_epochs: 0,
            ..TaggerConfig::default()
        }
    }

    #[test]
    fn default_layers_shrink() {
        let c = TaggerConfig::default();
        c.validate().unwrap();
        assert_eq!(c.context().input_dim(40), 3680);
        let specs = c.layer_specs();
        assert_eq!(specs.iter().map(|s| s.units).collect::<Vec<_>>(), vec![1000, 500, 7]);
        assert_eq!(specs[0].dropout_rate, 0.1);
        assert_eq!(specs[1].dropout_rate, 0.2);
    }

    #[test]
    fn growing_hidden_sizes_rejected() {
        let c = TaggerConfig {
            hidden: vec![500, 1000],
            ..TaggerConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weight_model_scores_half() {
        let c = toy_config();
        let mut m = c.build_model(3).unwrap();
        for l in &mut m.layers {
            l.weights.fill(0.0);
        }
        let f = FeatureMatrix::new("c", FeatureKind::Mbk, Array2::from_elem((9, 3), 0.3));
        let s = predict_chunk(&m, &f, &c).unwrap();
        assert!(s.posteriors.iter().all(|&p| (p - 0.5).abs() < 1e-15));
        assert_eq!(decide_tags(&s, DEFAULT_THRESHOLD).len(), NUM_TAGS);
    }

    #[test]
    fn mean_of_three_windows() {
        let mut out = Array2::zeros((3, NUM_TAGS));
        out.column_mut(0).assign(&array![0.2, 0.4, 0.9]);
        let s = aggregate_windows(out.view(), Aggregation::Mean).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        let s = aggregate_windows(out.view(), Aggregation::Max).unwrap();
        assert_eq!(s[0], 0.9);
    }

    #[test]
    fn threshold_is_strict() {
        let mut p = [0.0; NUM_TAGS];
        p[0] = 0.4;
        p[1] = 0.41;
        p[2] = 0.39;
        let s = ChunkScore {
            chunk_id: "x".into(),
            posteriors: p,
        };
        let d = decide_tags(&s, 0.4);
        assert!(!d.contains(Tag::B));
        assert!(d.contains(Tag::C));
        assert!(!d.contains(Tag::F));
    }

    #[test]
    fn wrong_input_dim_is_shape_error() {
        let c = toy_config();
        let m = c.build_model(3).unwrap();
        let f = FeatureMatrix::new("c", FeatureKind::Mbk, Array2::zeros((9, 4)));
        assert!(matches!(predict_chunk(&m, &f, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let c = toy_config();
        let f = FeatureMatrix::new("c", FeatureKind::Mbk, Array2::from_shape_fn((12, 3), |(i, j)| (i * j) as f64));
        let norm = NormStats::fit([&f]).unwrap();
        let t = train_tagger(&[(f, TagSet::empty())], &c, &norm).unwrap();
        assert_eq!(t.model, c.build_model(3).unwrap());
        assert_eq!(t.history.kept_epoch, 0);
    }

    #[test]
    fn model_file_round_trip() {
        let c = toy_config();
        let t = Tagger {
            model: c.build_model(3).unwrap(),
            config: c,
            norm: NormStats {
                mean: vec![1.0, 2.0, 3.0],
                std: vec![1.0, 1.0, 2.0],
            },
            history: TrainHistory::default(),
        };
        let f = t.to_model_file();
        let back = Tagger::from_model_file(&ModelFile::decode(Path::new("m"), &f.encode()).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
