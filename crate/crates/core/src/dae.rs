//! Deep denoising auto-encoders with untied encoder/decoder weights.
//!
//! The network is `input → hidden → bottleneck → hidden → output`. Corruption
//! is dropout on the input layer, so it only happens while training.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::ModelFile;
use crate::error::{Error, Result};
use crate::features::{stack_frames, ContextSpec, FeatureKind, FeatureMatrix, NormStats};
use crate::nn::{self, evaluate_loss, Activation, BatchSource, LayerSpec, LossKind, MlpModel, Mode, TrainConfig};

pub const MODEL_FAMILY: &str = "dae";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DaeVariant {
    /// Reconstructs only the middle frame of the window.
    #[serde(alias = "adae")]
    Asymmetric,
    /// Reconstructs every frame of the window.
    #[serde(alias = "sdae")]
    Symmetric,
}

impl DaeVariant {
    pub fn parse(text: &str) -> Option<DaeVariant> {
        match text.trim().to_ascii_lowercase().as_str() {
            "asymmetric" | "adae" => Some(DaeVariant::Asymmetric),
            "symmetric" | "sdae" => Some(DaeVariant::Symmetric),
            _ => None,
        }
    }

    pub fn default_bottleneck(self) -> usize {
        match self {
            DaeVariant::Asymmetric => 50,
            DaeVariant::Symmetric => 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaeConfig {
    pub variant: DaeVariant,
    /// Odd number of stacked input frames.
    pub context_frames: usize,
    pub encoder_hidden: usize,
    pub bottleneck: usize,
    pub bottleneck_activation: Activation,
    pub decoder_hidden: usize,
    /// Activation of the two non-bottleneck hidden layers.
    pub hidden_activation: Activation,
    /// Probability of zeroing each input unit during training.
    pub corruption: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Fraction of windows held out for the reconstruction-error curve.
    pub cv_fraction: f64,
    pub seed: u64,
}

impl Default for DaeConfig {
    fn default() -> Self {
        DaeConfig::new(DaeVariant::Asymmetric)
    }
}

impl DaeConfig {
    pub fn new(variant: DaeVariant) -> Self {
        DaeConfig {
            variant,
            context_frames: 7,
            encoder_hidden: 500,
            bottleneck: variant.default_bottleneck(),
            bottleneck_activation: Activation::Relu,
            decoder_hidden: 500,
            hidden_activation: Activation::Relu,
            corruption: 0.1,
            epochs: 100,
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 100,
            cv_fraction: 0.1,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_frames == 0 || self.context_frames % 2 == 0 {
            return Err(Error::Config(format!(
                "DAE context must be an odd number of frames, got {}",
                self.context_frames
            )));
        }
        if self.encoder_hidden == 0 || self.bottleneck == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("DAE layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.corruption) {
            return Err(Error::Config(format!("corruption must lie in [0, 1), got {}", self.corruption)));
        }
        if !(0.0..1.0).contains(&self.cv_fraction) {
            return Err(Error::Config("cv_fraction must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("DAE needs batch_size >= 1, learning_rate > 0, momentum in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn context(&self) -> ContextSpec {
        ContextSpec::new(self.context_frames / 2, 1)
    }

    pub fn input_dim(&self, feature_dim: usize) -> usize {
        self.context_frames * feature_dim
    }

    pub fn output_dim(&self, feature_dim: usize) -> usize {
        match self.variant {
            DaeVariant::Asymmetric => feature_dim,
            DaeVariant::Symmetric => self.context_frames * feature_dim,
        }
    }

    pub fn layer_specs(&self, feature_dim: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(self.encoder_hidden, self.hidden_activation, self.corruption),
            LayerSpec::new(self.bottleneck, self.bottleneck_activation, 0.0),
            LayerSpec::new(self.decoder_hidden, self.hidden_activation, 0.0),
            LayerSpec::new(self.output_dim(feature_dim), Activation::Linear, 0.0),
        ]
    }

    pub fn build_model(&self, feature_dim: usize) -> Result<MlpModel> {
        self.validate()?;
        MlpModel::new(self.input_dim(feature_dim), &self.layer_specs(feature_dim), self.seed)
    }
}

/// Stacked-frame windows with reconstruction targets, built on demand.
pub struct DaeWindows<'a> {
    chunks: Vec<&'a FeatureMatrix>,
    index: Vec<(usize, usize)>,
    offsets: Vec<isize>,
    variant: DaeVariant,
    feature_dim: usize,
}

impl<'a> DaeWindows<'a> {
    /// Every frame of every chunk is a window centre.
    pub fn new(chunks: &[&'a FeatureMatrix], config: &DaeConfig) -> Result<Self> {
        let feature_dim = chunks.first().map_or(0, |m| m.dims());
        let mut index = Vec::new();
        for (ci, m) in chunks.iter().enumerate() {
            if m.dims() != feature_dim {
                return Err(Error::Shape(format!(
                    "chunk {} has {} dims, expected {feature_dim}",
                    m.chunk_id,
                    m.dims()
                )));
            }
            index.extend((0..m.frames()).map(|c| (ci, c)));
        }
        Ok(DaeWindows {
            chunks: chunks.to_vec(),
            index,
            offsets: config.context().offsets(),
            variant: config.variant,
            feature_dim,
        })
    }

    /// Splits the windows into (train, held-out) with a seeded shuffle.
    pub fn split(self, fraction: f64, seed: u64) -> (DaeWindows<'a>, DaeWindows<'a>) {
        let mut index = self.index;
        index.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_cv = if fraction > 0.0 && index.len() >= 2 {
            ((index.len() as f64 * fraction).round() as usize).clamp(1, index.len() - 1)
        } else {
            0
        };
        let train = index.split_off(n_cv);
        let make = |index| DaeWindows {
            chunks: self.chunks.clone(),
            index,
            offsets: self.offsets.clone(),
            variant: self.variant,
            feature_dim: self.feature_dim,
        };
        (make(train), make(index))
    }
}

impl BatchSource for DaeWindows<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn input_dim(&self) -> usize {
        self.offsets.len() * self.feature_dim
    }

    fn target_dim(&self) -> usize {
        match self.variant {
            DaeVariant::Asymmetric => self.feature_dim,
            DaeVariant::Symmetric => self.offsets.len() * self.feature_dim,
        }
    }

    fn fill(&self, indices: &[usize], inputs: &mut Array2<f64>, targets: &mut Array2<f64>) {
        for (r, &i) in indices.iter().enumerate() {
            let (ci, center) = self.index[i];
            let m = self.chunks[ci];
            let mut row = inputs.row_mut(r);
            let x = row.as_slice_mut().expect("batch rows are contiguous");
            stack_frames(m, center, &self.offsets, x);
            match self.variant {
                DaeVariant::Asymmetric => targets.row_mut(r).assign(&m.values.row(center)),
                DaeVariant::Symmetric => targets.row_mut(r).assign(&ArrayView1::from(&*x)),
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DaeHistory {
    /// Mean training reconstruction error per epoch (with corruption).
    pub train_error: Vec<f64>,
    /// Mean held-out reconstruction error per epoch.
    pub cv_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaeModel {
    pub config: DaeConfig,
    pub network: MlpModel,
    pub feature_dim: usize,
    pub norm: Option<NormStats>,
    pub history: DaeHistory,
}

/// Trains on already-normalized feature matrices, holding out
/// `config.cv_fraction` of the windows for the error curve.
pub fn train_dae(corpus: &[&FeatureMatrix], config: &DaeConfig) -> Result<DaeModel> {
    config.validate()?;
    let feature_dim = corpus
        .first()
        .map(|m| m.dims())
        .ok_or_else(|| Error::Degenerate("no chunks to train the DAE on".into()))?;
    let windows = DaeWindows::new(corpus, config)?;
    let (train, cv) = windows.split(config.cv_fraction, config.seed ^ 0xda_e5_ee_d0);
    let cv_src = if cv.is_empty() { None } else { Some(&cv as &dyn BatchSource) };
    train_dae_windows(&train, cv_src, config, feature_dim)
}

/// Trains on any window source whose inputs and targets match the variant's
/// layout for `feature_dim`-dimensional frames.
pub fn train_dae_windows(
    train: &dyn BatchSource,
    cv: Option<&dyn BatchSource>,
    config: &DaeConfig,
    feature_dim: usize,
) -> Result<DaeModel> {
    let mut network = config.build_model(feature_dim)?;
    log::info!(
        "training {:?} DAE on {} windows ({} held out)",
        config.variant,
        train.len(),
        cv.map_or(0, |c| c.len())
    );
    let hist = nn::train(
        &mut network,
        train,
        cv,
        &TrainConfig {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            batch_size: config.batch_size,
            max_epochs: config.epochs,
            patience: None,
            loss: LossKind::Mse,
            seed: config.seed.wrapping_add(1),
        },
    )?;
    Ok(DaeModel {
        config: config.clone(),
        network,
        feature_dim,
        norm: None,
        history: DaeHistory {
            train_error: hist.train_loss,
            cv_error: hist.valid_loss,
        },
    })
}

/// Mean squared reconstruction error per window over `windows`.
pub fn reconstruction_error(model: &DaeModel, windows: &dyn BatchSource) -> Result<f64> {
    evaluate_loss(&model.network, windows, LossKind::Mse, 256)
}

impl DaeModel {
    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.network.layers[1].output_dim()
    }

    /// Encoder half (input → bottleneck) as a standalone network.
    pub fn encoder(&self) -> MlpModel {
        MlpModel {
            layers: self.network.layers[..2].to_vec(),
            seed: self.network.seed,
        }
    }

    /// Decoder half (bottleneck → output) as a standalone network.
    pub fn decoder(&self) -> MlpModel {
        MlpModel {
            layers: self.network.layers[2..].to_vec(),
            seed: self.network.seed,
        }
    }

    /// Clean (uncorrupted) bottleneck code of one stacked window.
    pub fn encode(&self, window: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let acts = self.network.forward(window, Mode::Infer)?;
        Ok(acts[1].clone())
    }

    pub fn encode_batch(&self, windows: ndarray::ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.encoder().predict(windows)
    }

    pub fn decode(&self, code: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let out = self.decoder().predict(code.insert_axis(ndarray::Axis(0)))?;
        Ok(out.row(0).to_owned())
    }

    pub fn reconstruct(&self, window: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let acts = self.network.forward(window, Mode::Infer)?;
        Ok(acts.last().expect("non-empty").clone())
    }

    /// Mean held-out error divided by the number of output dimensions.
    pub fn final_cv_error_per_dim(&self) -> Option<f64> {
        self.history.cv_error.last().map(|e| e / self.output_dim() as f64)
    }

    /// Code matrix (frames × bottleneck) of one normalized chunk.
    pub fn encode_matrix(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.config.input_dim(features.dims()) != self.input_dim() {
            return Err(Error::Shape(format!(
                "chunk {} has {} dims but the DAE expects {}-dim frames",
                features.chunk_id,
                features.dims(),
                self.feature_dim
            )));
        }
        let offsets = self.config.context().offsets();
        let n = features.frames();
        let mut windows = Array2::zeros((n, self.input_dim()));
        for (t, mut row) in windows.rows_mut().into_iter().enumerate() {
            stack_frames(features, t, &offsets, row.as_slice_mut().expect("contiguous"));
        }
        let codes = self.encode_batch(windows.view())?;
        Ok(FeatureMatrix::new(features.chunk_id.clone(), FeatureKind::DaeCode, codes))
    }

    /// Encodes raw chunks, applying the stored normalization first if present.
    pub fn encode_corpus(&self, chunks: &[FeatureMatrix]) -> Result<Vec<FeatureMatrix>> {
        chunks
            .par_iter()
            .map(|m| match &self.norm {
                Some(norm) => self.encode_matrix(&norm.apply(m)?),
                None => self.encode_matrix(m),
            })
            .collect()
    }

    pub fn to_model_file(&self) -> ModelFile {
        let meta = serde_json::json!({
            "config": self.config,
            "feature_dim": self.feature_dim,
            "history": self.history,
        });
        let mut file = ModelFile::new(MODEL_FAMILY, self.config.seed, meta);
        file.push_mlp("net", &self.network);
        if let Some(norm) = &self.norm {
            file.push_norm(norm);
        }
        file
    }

    pub fn from_model_file(file: &ModelFile) -> Result<DaeModel> {
        if file.family != MODEL_FAMILY {
            return Err(Error::Config(format!("expected a {MODEL_FAMILY} model, found {}", file.family)));
        }
        let config: DaeConfig = serde_json::from_value(file.meta["config"].clone())
            .map_err(|e| Error::Shape(format!("DAE config in model file: {e}")))?;
        let feature_dim = file.meta["feature_dim"]
            .as_u64()
            .ok_or_else(|| Error::Shape("DAE model file lacks feature_dim".into()))? as usize;
        let network = file.mlp("net")?;
        if network.layers.len() != 4 {
            return Err(Error::Shape(format!("DAE has {} layers, expected 4", network.layers.len())));
        }
        let norm = if file.tensor("norm.mean").is_ok() {
            Some(file.norm()?)
        } else {
            None
        };
        Ok(DaeModel {
            config,
            network,
            feature_dim,
            norm,
            history: serde_json::from_value(file.meta["history"].clone()).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().write(path)
    }

    pub fn load(path: &Path) -> Result<DaeModel> {
        DaeModel::from_model_file(&ModelFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn middle_frame(window: ArrayView1<'_, f64>, frames: usize) -> ArrayView1<'_, f64> {
        let d = window.len() / frames;
        window.slice_move(s![(frames / 2) * d..(frames / 2 + 1) * d])
    }

    fn tiny(variant: DaeVariant) -> DaeConfig {
        DaeConfig {
            encoder_hidden: 8,
            bottleneck: 3,
            decoder_hidden: 8,
            epochs: 0,
            ..DaeConfig::new(variant)
        }
    }

    #[test]
    fn layer_shapes_follow_variant() {
        let a = DaeConfig::new(DaeVariant::Asymmetric).build_model(40).unwrap();
        let dims: Vec<_> = a.layers.iter().map(|l| l.output_dim()).collect();
        assert_eq!(a.input_dim(), 280);
        assert_eq!(dims, vec![500, 50, 500, 40]);
        let s = DaeConfig::new(DaeVariant::Symmetric).build_model(40).unwrap();
        let dims: Vec<_> = s.layers.iter().map(|l| l.output_dim()).collect();
        assert_eq!(dims, vec![500, 200, 500, 280]);
        assert_eq!(s.layers[0].dropout_rate, 0.1);
        assert_eq!(s.layers[3].activation, Activation::Linear);
    }

    #[test]
    fn even_context_rejected() {
        let c = DaeConfig {
            context_frames: 6,
            ..DaeConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stride_one_conserves_frames_and_constant_rows() {
        let f = FeatureMatrix::new("c", FeatureKind::Mbk, Array2::from_elem((399, 4), 0.7));
        let m = train_dae(&[&f], &tiny(DaeVariant::Asymmetric)).unwrap();
        let codes = m.encode_matrix(&f).unwrap();
        assert_eq!(codes.frames(), 399);
        assert_eq!(codes.dims(), 3);
        assert_eq!(codes.kind, FeatureKind::DaeCode);
        for row in codes.values.rows() {
            assert_eq!(row, codes.values.row(0));
        }
    }

    #[test]
    fn symmetric_targets_equal_inputs() {
        let f = FeatureMatrix::new("c", FeatureKind::Mbk, Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64));
        let c = tiny(DaeVariant::Symmetric);
        let w = DaeWindows::new(&[&f], &c).unwrap();
        let mut x = Array2::zeros((2, 14));
        let mut t = Array2::zeros((2, 14));
        w.fill(&[0, 5], &mut x, &mut t);
        assert_eq!(x, t);
        let c = tiny(DaeVariant::Asymmetric);
        let w = DaeWindows::new(&[&f], &c).unwrap();
        let mut t = Array2::zeros((2, 2));
        w.fill(&[0, 5], &mut x, &mut t);
        assert_eq!(t.row(1), f.values.row(5));
        assert_eq!(middle_frame(x.row(1), 7), f.values.row(5));
    }

    #[test]
    fn model_file_round_trip() {
        let c = tiny(DaeVariant::Symmetric);
        let m = DaeModel {
            network: c.build_model(4).unwrap(),
            config: c,
            feature_dim: 4,
            norm: None,
            history: DaeHistory::default(),
        };
        let back = DaeModel::from_model_file(&ModelFile::decode(Path::new("m"), &m.to_model_file().encode()).unwrap())
            .unwrap();
        assert_eq!(back, m);
    }
}
