//! Baseline taggers: per-tag GMM likelihood ratio, MI-SVM over frame bags and
//! a chunk-level linear SVM over mean+covariance statistics.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::ModelFile;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMatrix, NormStats};
use crate::tags::{Tag, TagSet, NUM_TAGS};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    pub weights: Array1<f64>,
    /// `components × dims`.
    pub means: Array2<f64>,
    /// `components × dims`, each entry at least the variance floor.
    pub variances: Array2<f64>,
}

impl DiagGmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> usize {
        self.means.ncols()
    }

    fn component_log_densities(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let w = self.weights[m];
            if w <= 0.0 {
                *o = f64::NEG_INFINITY;
                continue;
            }
            let mut acc = 0.0;
            for ((xi, mu), var) in x.iter().zip(self.means.row(m)).zip(self.variances.row(m)) {
                let d = xi - mu;
                acc += d * d / var + var.ln();
            }
            *o = w.ln() - 0.5 * (acc + self.dims() as f64 * LN_2PI);
        }
    }

    /// `ln f(x)`, evaluated with log-sum-exp.
    pub fn log_density(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut buf = vec![0.0; self.components()];
        self.component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// Sum of `ln f(x)` over the rows of `data`.
    pub fn log_likelihood(&self, data: ArrayView2<'_, f64>) -> f64 {
        let mut buf = vec![0.0; self.components()];
        data.rows()
            .into_iter()
            .map(|x| {
                self.component_log_densities(x, &mut buf);
                log_sum_exp(&buf)
            })
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let (m, d) = self.means.dim();
        if self.weights.len() != m || self.variances.dim() != (m, d) {
            return Err(Error::Shape("GMM parameter shapes disagree".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub components: usize,
    pub iterations: usize,
    pub variance_floor: f64,
    /// Lloyd iterations run after k-means++ seeding.
    pub kmeans_iterations: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            components: 8,
            iterations: 20,
            variance_floor: 1e-6,
            kmeans_iterations: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub gmm: DiagGmm,
    /// Total log-likelihood before the first and after every EM iteration.
    pub log_likelihood: Vec<f64>,
}

impl EmFit {
    /// True when no iteration lowered the log-likelihood beyond `slack`
    /// (relative to its magnitude).
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.log_likelihood
            .windows(2)
            .all(|w| w[1] >= w[0] - slack * w[0].abs().max(1.0))
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations; returns the
/// mixture implied by the final hard clusters.
pub fn kmeans_init(data: ArrayView2<'_, f64>, config: &EmConfig) -> Result<DiagGmm> {
    let (n, d) = data.dim();
    let k = config.components;
    if k == 0 {
        return Err(Error::Config("a mixture needs at least one component".into()));
    }
    if n < k {
        return Err(Error::Degenerate(format!("{n} frames cannot seed {k} components")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centers = Array2::zeros((k, d));
    centers.row_mut(0).assign(&data.row(rng.gen_range(0..n)));
    let mut nearest: Vec<f64> = data.rows().into_iter().map(|x| sq_dist(x, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&data.row(pick));
        for (i, x) in data.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(x, centers.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    for it in 0..=config.kmeans_iterations {
        for (i, x) in data.rows().into_iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist = sq_dist(x, centers.row(c));
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            assign[i] = best.1;
        }
        if it == config.kmeans_iterations {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, x) in data.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &x);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }

    let mut weights = Array1::<f64>::zeros(k);
    let mut means = Array2::<f64>::zeros((k, d));
    let mut variances = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, x) in data.rows().into_iter().enumerate() {
        means.row_mut(assign[i]).scaled_add(1.0, &x);
        counts[assign[i]] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            means.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
        } else {
            means.row_mut(c).assign(&centers.row(c));
        }
        weights[c] = counts[c] as f64 / n as f64;
    }
    for (i, x) in data.rows().into_iter().enumerate() {
        let c = assign[i];
        for j in 0..d {
            let dv = x[j] - means[[c, j]];
            variances[[c, j]] += dv * dv;
        }
    }
    for c in 0..k {
        let denom = counts[c].max(1) as f64;
        variances.row_mut(c).mapv_inplace(|v| (v / denom).max(config.variance_floor));
    }
    Ok(DiagGmm {
        weights,
        means,
        variances,
    })
}

/// Maximum-likelihood diagonal GMM by EM from a k-means start.
pub fn em_fit(data: ArrayView2<'_, f64>, config: &EmConfig) -> Result<EmFit> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in GMM training data".into()));
    }
    let mut gmm = kmeans_init(data, config)?;
    let (n, d) = data.dim();
    let k = config.components;
    let mut resp = Array2::<f64>::zeros((n, k));
    let mut buf = vec![0.0; k];
    let mut history = Vec::with_capacity(config.iterations + 1);

    let e_step = |gmm: &DiagGmm, resp: &mut Array2<f64>, buf: &mut [f64]| -> f64 {
        let mut total = 0.0;
        for (i, x) in data.rows().into_iter().enumerate() {
            gmm.component_log_densities(x, buf);
            let lse = log_sum_exp(buf);
            total += lse;
            for c in 0..k {
                resp[[i, c]] = (buf[c] - lse).exp();
            }
        }
        total
    };

    history.push(e_step(&gmm, &mut resp, &mut buf));
    for it in 0..config.iterations {
        let nk = resp.sum_axis(Axis(0));
        let mut means = Array2::<f64>::zeros((k, d));
        let mut variances = Array2::<f64>::zeros((k, d));
        for (i, x) in data.rows().into_iter().enumerate() {
            for c in 0..k {
                let r = resp[[i, c]];
                if r > 0.0 {
                    means.row_mut(c).scaled_add(r, &x);
                }
            }
        }
        for c in 0..k {
            if nk[c] > 0.0 {
                means.row_mut(c).mapv_inplace(|v| v / nk[c]);
            } else {
                // An empty component keeps its old location; its weight is zero.
                means.row_mut(c).assign(&gmm.means.row(c));
            }
        }
        for (i, x) in data.rows().into_iter().enumerate() {
            for c in 0..k {
                let r = resp[[i, c]];
                if r > 0.0 {
                    for j in 0..d {
                        let dv = x[j] - means[[c, j]];
                        variances[[c, j]] += r * dv * dv;
                    }
                }
            }
        }
        for c in 0..k {
            for j in 0..d {
                variances[[c, j]] = if nk[c] > 0.0 {
                    (variances[[c, j]] / nk[c]).max(config.variance_floor)
                } else {
                    gmm.variances[[c, j]]
                };
            }
        }
        let total: f64 = nk.sum();
        gmm = DiagGmm {
            weights: nk.mapv(|v| v / total),
            means,
            variances,
        };
        let ll = e_step(&gmm, &mut resp, &mut buf);
        if !ll.is_finite() {
            return Err(Error::Numeric(format!("EM log-likelihood became {ll} at iteration {}", it + 1)));
        }
        history.push(ll);
    }
    Ok(EmFit {
        gmm,
        log_likelihood: history,
    })
}

fn stack_rows<'a>(matrices: impl Iterator<Item = &'a FeatureMatrix>, dims: usize) -> Array2<f64> {
    let parts: Vec<ArrayView2<'_, f64>> = matrices.map(|m| m.values.view()).collect();
    if parts.is_empty() {
        return Array2::zeros((0, dims));
    }
    ndarray::concatenate(Axis(0), &parts).expect("equal widths")
}

fn check_dims(chunks: &[(FeatureMatrix, TagSet)]) -> Result<usize> {
    let dims = chunks
        .first()
        .map(|(m, _)| m.dims())
        .ok_or_else(|| Error::Degenerate("no training chunks".into()))?;
    if let Some((m, _)) = chunks.iter().find(|(m, _)| m.dims() != dims) {
        return Err(Error::Shape(format!("chunk {} has {} dims, expected {dims}", m.chunk_id, m.dims())));
    }
    Ok(dims)
}

fn split_by_tag(chunks: &[(FeatureMatrix, TagSet)], tag: Tag) -> Result<(Vec<&FeatureMatrix>, Vec<&FeatureMatrix>)> {
    let (pos, neg): (Vec<_>, Vec<_>) = chunks.iter().partition(|(_, t)| t.contains(tag));
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate(format!(
            "tag {tag} needs positive and negative training chunks (have {} and {})",
            pos.len(),
            neg.len()
        )));
    }
    Ok((pos.into_iter().map(|(m, _)| m).collect(), neg.into_iter().map(|(m, _)| m).collect()))
}

/// Positive and negative mixtures for one tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TagGmm {
    pub tag: Tag,
    pub positive: DiagGmm,
    pub negative: DiagGmm,
}

impl TagGmm {
    /// `Σ ln f(x|pos) − Σ ln f(x|neg)` over the chunk's frames.
    pub fn score(&self, frames: &FeatureMatrix) -> Result<f64> {
        if self.positive.dims() != frames.dims() || self.negative.dims() != frames.dims() {
            return Err(Error::Shape(format!(
                "GMM expects {}-dim frames, chunk {} has {}",
                self.positive.dims(),
                frames.chunk_id,
                frames.dims()
            )));
        }
        Ok(frames
            .values
            .rows()
            .into_iter()
            .map(|x| self.positive.log_density(x) - self.negative.log_density(x))
            .sum())
    }
}

/// Per-tag GMM pairs; may cover a subset of tags until merged.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmTagModel {
    pub feature_kind: FeatureKind,
    pub tags: Vec<TagGmm>,
    pub config: EmConfig,
}

pub const GMM_FAMILY: &str = "gmm";

/// Fits mixtures on all frames of chunks with / without each tag in `tags`.
pub fn train_gmm_tagger(chunks: &[(FeatureMatrix, TagSet)], tags: &[Tag], config: &EmConfig) -> Result<GmmTagModel> {
    let dims = check_dims(chunks)?;
    let mut out = Vec::with_capacity(tags.len());
    for &tag in tags {
        let (pos, neg) = split_by_tag(chunks, tag)?;
        let pos = stack_rows(pos.into_iter(), dims);
        let neg = stack_rows(neg.into_iter(), dims);
        let cfg = |salt: u64| EmConfig {
            seed: config.seed.wrapping_add(salt),
            ..*config
        };
        let salt = 2 * tag.index() as u64;
        let (p, n) = rayon::join(|| em_fit(pos.view(), &cfg(salt)), || em_fit(neg.view(), &cfg(salt + 1)));
        let (p, n) = (p?, n?);
        log::info!(
            "GMM tag {tag}: {} positive / {} negative frames, final log-likelihood {:.1} / {:.1}",
            pos.nrows(),
            neg.nrows(),
            p.log_likelihood.last().unwrap(),
            n.log_likelihood.last().unwrap()
        );
        out.push(TagGmm {
            tag,
            positive: p.gmm,
            negative: n.gmm,
        });
    }
    Ok(GmmTagModel {
        feature_kind: chunks[0].0.kind,
        tags: out,
        config: *config,
    })
}

/// Log-likelihood-ratio score for every tag; the model must cover all tags.
pub fn gmm_tag_score(model: &GmmTagModel, frames: &FeatureMatrix) -> Result<[f64; NUM_TAGS]> {
    let mut out = [0.0; NUM_TAGS];
    for tag in Tag::ALL {
        let pair = model.get(tag).ok_or_else(|| {
            Error::Config(format!("GMM model has no mixtures for tag {tag}; train or merge the missing tags"))
        })?;
        out[tag.index()] = pair.score(frames)?;
    }
    Ok(out)
}

fn push_gmm(file: &mut ModelFile, prefix: &str, gmm: &DiagGmm) {
    let (m, d) = gmm.means.dim();
    file.push(format!("{prefix}.weights"), vec![m], gmm.weights.to_vec());
    file.push(format!("{prefix}.means"), vec![m, d], gmm.means.iter().copied().collect());
    file.push(format!("{prefix}.variances"), vec![m, d], gmm.variances.iter().copied().collect());
}

fn read_gmm(file: &ModelFile, prefix: &str) -> Result<DiagGmm> {
    let gmm = DiagGmm {
        weights: file.vector(&format!("{prefix}.weights"))?,
        means: file.matrix(&format!("{prefix}.means"))?,
        variances: file.matrix(&format!("{prefix}.variances"))?,
    };
    gmm.validate()?;
    Ok(gmm)
}

fn feature_kind_meta(file: &ModelFile) -> Result<FeatureKind> {
    serde_json::from_value(file.meta["feature_kind"].clone())
        .map_err(|e| Error::Shape(format!("model file lacks a feature kind: {e}")))
}

impl GmmTagModel {
    pub fn get(&self, tag: Tag) -> Option<&TagGmm> {
        self.tags.iter().find(|t| t.tag == tag)
    }

    /// Combines per-tag models trained separately; later models win on overlap.
    pub fn merge(parts: Vec<GmmTagModel>) -> Result<GmmTagModel> {
        let mut iter = parts.into_iter();
        let mut merged = iter.next().ok_or_else(|| Error::Config("no GMM models to merge".into()))?;
        for part in iter {
            if part.feature_kind != merged.feature_kind {
                return Err(Error::Config("cannot merge GMMs trained on different features".into()));
            }
            for t in part.tags {
                merged.tags.retain(|x| x.tag != t.tag);
                merged.tags.push(t);
            }
        }
        merged.tags.sort_by_key(|t| t.tag);
        Ok(merged)
    }

    pub fn to_model_file(&self) -> ModelFile {
        let tags: String = self.tags.iter().map(|t| t.tag.letter()).collect();
        let meta = serde_json::json!({
            "config": self.config,
            "feature_kind": self.feature_kind,
            "tags": tags,
        });
        let mut file = ModelFile::new(GMM_FAMILY, self.config.seed, meta);
        for t in &self.tags {
            push_gmm(&mut file, &format!("{}.pos", t.tag), &t.positive);
            push_gmm(&mut file, &format!("{}.neg", t.tag), &t.negative);
        }
        file
    }

    pub fn from_model_file(file: &ModelFile) -> Result<GmmTagModel> {
        if file.family != GMM_FAMILY {
            return Err(Error::Config(format!("expected a {GMM_FAMILY} model, found {}", file.family)));
        }
        let config = serde_json::from_value(file.meta["config"].clone()).unwrap_or_default();
        let letters = file.meta["tags"].as_str().unwrap_or("");
        let mut tags = Vec::new();
        for c in letters.chars() {
            let tag = Tag::from_letter(c).ok_or_else(|| Error::Shape(format!("unknown tag {c:?} in GMM model")))?;
            tags.push(TagGmm {
                tag,
                positive: read_gmm(file, &format!("{tag}.pos"))?,
                negative: read_gmm(file, &format!("{tag}.neg"))?,
            });
        }
        Ok(GmmTagModel {
            feature_kind: feature_kind_meta(file)?,
            tags,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().write(path)
    }

    pub fn load(path: &Path) -> Result<GmmTagModel> {
        GmmTagModel::from_model_file(&ModelFile::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// Weight `A` of the summed hinge losses against `½‖w‖²`.
    pub regularization: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            regularization: 1.0,
            epochs: 50,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub regularization: f64,
    /// Objective value of the returned parameters on the training set.
    pub objective: f64,
    /// Training examples with functional margin below 1.
    pub violations: usize,
}

impl LinearSvm {
    pub fn margin(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.weights.dot(&x) + self.bias
    }
}

/// `½‖w‖² + A Σ max(0, 1 − y(w·x + b))` with labels mapped to ±1.
pub fn svm_objective(weights: ArrayView1<'_, f64>, bias: f64, x: ArrayView2<'_, f64>, y: &[bool], a: f64) -> f64 {
    let hinge: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &yi)| {
            let s = if yi { 1.0 } else { -1.0 };
            (1.0 - s * (weights.dot(&row) + bias)).max(0.0)
        })
        .sum();
    0.5 * weights.dot(&weights) + a * hinge
}

fn violations(weights: ArrayView1<'_, f64>, bias: f64, x: ArrayView2<'_, f64>, y: &[bool]) -> usize {
    x.rows()
        .into_iter()
        .zip(y)
        .filter(|(row, &yi)| {
            let s = if yi { 1.0 } else { -1.0 };
            s * (weights.dot(row) + bias) < 1.0
        })
        .count()
}

/// Regularized hinge-loss minimization by epoch-ordered stochastic
/// sub-gradient steps. Returns the best iterate seen at epoch boundaries.
pub fn linear_svm_fit(x: ArrayView2<'_, f64>, y: &[bool], config: &SvmConfig) -> Result<LinearSvm> {
    linear_svm_fit_from(x, y, config, None)
}

/// As [`linear_svm_fit`], optionally starting from `init` (weights, bias).
pub fn linear_svm_fit_from(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    config: &SvmConfig,
    init: Option<(ArrayView1<'_, f64>, f64)>,
) -> Result<LinearSvm> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} instances but {} labels", y.len())));
    }
    let positives = y.iter().filter(|&&v| v).count();
    if positives == 0 || positives == n {
        return Err(Error::Degenerate("SVM training data contains a single class".into()));
    }
    if !(config.regularization > 0.0) {
        return Err(Error::Config("SVM regularization must be > 0".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in SVM training data".into()));
    }
    // Scaled problem: λ/2‖w‖² + mean hinge, with λ = 1 / (A n).
    let lambda = 1.0 / (config.regularization * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let (mut w, mut b) = match init {
        Some((w0, b0)) => (w0.to_owned(), b0),
        None => (Array1::zeros(d), 0.0),
    };
    let mut best = (svm_objective(w.view(), b, x, y, config.regularization), w.clone(), b);
    let mut avg_w = Array1::zeros(d);
    let mut avg_b;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    // Offsetting the step schedule by one epoch keeps the first (unregularized)
    // bias steps on the scale of A rather than A·n.
    let mut t = n as f64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        avg_w.fill(0.0);
        avg_b = 0.0;
        for &i in &order {
            t += 1.0;
            let eta = 1.0 / (lambda * t);
            let s = if y[i] { 1.0 } else { -1.0 };
            let row = x.row(i);
            let margin = s * (w.dot(&row) + b);
            w.mapv_inplace(|v| v * (1.0 - eta * lambda));
            if margin < 1.0 {
                w.scaled_add(eta * s, &row);
                b += eta * s;
            }
            let norm = w.dot(&w).sqrt();
            if norm > radius {
                w.mapv_inplace(|v| v * radius / norm);
            }
            avg_w.scaled_add(1.0 / n as f64, &w);
            avg_b += b / n as f64;
        }
        for (cw, cb) in [(&w, b), (&avg_w, avg_b)] {
            let obj = svm_objective(cw.view(), cb, x, y, config.regularization);
            if !obj.is_finite() {
                return Err(Error::Numeric(format!("SVM objective became {obj} at epoch {}", epoch + 1)));
            }
            if obj < best.0 {
                best = (obj, cw.clone(), cb);
            }
        }
    }
    let (objective, weights, bias) = best;
    Ok(LinearSvm {
        violations: violations(weights.view(), bias, x, y),
        weights,
        bias,
        regularization: config.regularization,
        objective,
    })
}

/// One multiple-instance bag.
#[derive(Debug, Clone, PartialEq)]
pub struct MilBag {
    pub id: String,
    /// `instances × dims`.
    pub instances: Array2<f64>,
    pub label: bool,
    /// Index of the selected witness instance; `None` means the bag centroid.
    pub representative: Option<usize>,
}

impl MilBag {
    pub fn new(id: impl Into<String>, instances: Array2<f64>, label: bool) -> Self {
        MilBag {
            id: id.into(),
            instances,
            label,
            representative: None,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn centroid(&self) -> Array1<f64> {
        self.instances.mean_axis(Axis(0)).expect("non-empty bag")
    }

    fn representative_vector(&self) -> Array1<f64> {
        match self.representative {
            Some(i) => self.instances.row(i).to_owned(),
            None => self.centroid(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MisvmConfig {
    pub svm: SvmConfig,
    pub max_outer_iterations: usize,
}

impl Default for MisvmConfig {
    fn default() -> Self {
        MisvmConfig {
            svm: SvmConfig::default(),
            max_outer_iterations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisvmModel {
    pub svm: LinearSvm,
    /// Number of SVM trainings performed.
    pub iterations: usize,
    /// False when the iteration cap was hit with representatives still moving.
    pub converged: bool,
    /// Bag objective after each outer iteration.
    pub objective_history: Vec<f64>,
}

impl MisvmModel {
    /// Bag score: the largest instance margin.
    pub fn bag_score(&self, instances: ArrayView2<'_, f64>) -> f64 {
        instances
            .rows()
            .into_iter()
            .map(|x| self.svm.margin(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn mil_training_set(bags: &[MilBag]) -> (Array2<f64>, Vec<bool>) {
    let d = bags[0].instances.ncols();
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for bag in bags {
        if bag.label {
            rows.extend(bag.representative_vector().iter());
            labels.push(true);
        } else {
            rows.extend(bag.instances.iter());
            labels.extend(std::iter::repeat(false).take(bag.len()));
        }
    }
    let n = labels.len();
    (Array2::from_shape_vec((n, d), rows).expect("rows are d-wide"), labels)
}

/// MI-SVM: alternate between fitting a linear SVM on positive-bag witnesses
/// plus every negative instance, and re-selecting each positive bag's
/// highest-scoring instance as its witness. Positive witnesses start at the
/// bag centroid. Updates `bags[..].representative` in place.
pub fn misvm_train(bags: &mut [MilBag], config: &MisvmConfig) -> Result<MisvmModel> {
    if bags.iter().any(|b| b.is_empty()) {
        return Err(Error::Degenerate("MIL bags must contain at least one instance".into()));
    }
    if !bags.iter().any(|b| b.label) || !bags.iter().any(|b| !b.label) {
        return Err(Error::Degenerate("MI-SVM needs positive and negative bags".into()));
    }
    let d = bags[0].instances.ncols();
    if bags.iter().any(|b| b.instances.ncols() != d) {
        return Err(Error::Shape("MIL bags disagree on instance dimension".into()));
    }
    for bag in bags.iter_mut() {
        bag.representative = None;
    }
    let mut svm: Option<LinearSvm> = None;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_outer_iterations.max(1) {
        iterations += 1;
        let (x, y) = mil_training_set(bags);
        let a = config.svm.regularization;
        let svm_config = SvmConfig {
            seed: config.svm.seed.wrapping_add(iterations as u64),
            ..config.svm
        };
        let mut fitted = match &svm {
            Some(prev) => linear_svm_fit_from(x.view(), &y, &svm_config, Some((prev.weights.view(), prev.bias)))?,
            None => linear_svm_fit(x.view(), &y, &svm_config)?,
        };
        // Never accept a refit that is worse than the previous weights on the
        // current witnesses; this keeps the bag objective non-increasing.
        if let Some(prev) = &svm {
            let prev_obj = svm_objective(prev.weights.view(), prev.bias, x.view(), &y, a);
            if prev_obj <= fitted.objective {
                fitted = LinearSvm {
                    objective: prev_obj,
                    violations: violations(prev.weights.view(), prev.bias, x.view(), &y),
                    ..prev.clone()
                };
            }
        }
        history.push(fitted.objective);

        let mut changed = false;
        for bag in bags.iter_mut().filter(|b| b.label) {
            let old = bag.representative_vector();
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, row) in bag.instances.rows().into_iter().enumerate() {
                let f = fitted.margin(row);
                if f > best.0 {
                    best = (f, j);
                }
            }
            bag.representative = Some(best.1);
            if bag.instances.row(best.1) != old {
                changed = true;
            }
        }
        svm = Some(fitted);
        if !changed {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("MI-SVM stopped at the iteration cap ({iterations}) with witnesses still changing");
    }
    Ok(MisvmModel {
        svm: svm.expect("at least one iteration"),
        iterations,
        converged,
        objective_history: history,
    })
}

/// Per-dimension mean followed by the upper triangle (row-major, diagonal
/// included) of the population covariance.
pub fn chunk_svm_features(chunk: &FeatureMatrix) -> Result<Array1<f64>> {
    let (n, d) = chunk.values.dim();
    if n == 0 {
        return Err(Error::Degenerate(format!("chunk {} has no frames", chunk.chunk_id)));
    }
    if n == 1 {
        log::warn!("chunk {} has a single frame; its covariance is zero", chunk.chunk_id);
    }
    let mean = chunk.values.mean_axis(Axis(0)).expect("non-empty");
    let centered = &chunk.values - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let mut out = Vec::with_capacity(d + d * (d + 1) / 2);
    out.extend(mean.iter());
    for i in 0..d {
        for j in i..d {
            out.push(cov[[i, j]]);
        }
    }
    Ok(Array1::from(out))
}

pub fn chunk_svm_dim(feature_dim: usize) -> usize {
    feature_dim + feature_dim * (feature_dim + 1) / 2
}

/// Linear SVM per tag, with its input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmTagModel {
    pub family: String,
    pub feature_kind: FeatureKind,
    pub svms: Vec<LinearSvm>,
    pub norm: NormStats,
}

pub const MISVM_FAMILY: &str = "misvm";
pub const CHUNKSVM_FAMILY: &str = "chunksvm";

fn standardize_rows(norm: &NormStats, m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - norm.mean[j]) / norm.std[j];
        }
    }
    out
}

/// Frame-level MI-SVM per tag: bags are chunks, instances standardized frames.
pub fn train_misvm_tagger(
    chunks: &[(FeatureMatrix, TagSet)],
    norm: &NormStats,
    config: &MisvmConfig,
) -> Result<SvmTagModel> {
    check_dims(chunks)?;
    let standardized: Vec<Array2<f64>> = chunks.iter().map(|(m, _)| standardize_rows(norm, &m.values)).collect();
    let mut svms = Vec::with_capacity(NUM_TAGS);
    for tag in Tag::ALL {
        split_by_tag(chunks, tag)?;
        let mut bags: Vec<MilBag> = chunks
            .iter()
            .zip(&standardized)
            .map(|((m, t), x)| MilBag::new(m.chunk_id.clone(), x.clone(), t.contains(tag)))
            .collect();
        let cfg = MisvmConfig {
            svm: SvmConfig {
                seed: config.svm.seed.wrapping_add(1000 * tag.index() as u64),
                ..config.svm
            },
            ..*config
        };
        let model = misvm_train(&mut bags, &cfg)?;
        log::info!(
            "MI-SVM tag {tag}: {} outer iterations, converged {}, objective {:.3}",
            model.iterations,
            model.converged,
            model.svm.objective
        );
        svms.push(model.svm);
    }
    Ok(SvmTagModel {
        family: MISVM_FAMILY.into(),
        feature_kind: chunks[0].0.kind,
        svms,
        norm: norm.clone(),
    })
}

/// Chunk-level SVM per tag over standardized mean+covariance vectors.
pub fn train_chunk_svm_tagger(chunks: &[(FeatureMatrix, TagSet)], config: &SvmConfig) -> Result<SvmTagModel> {
    let dims = check_dims(chunks)?;
    let mut rows = Array2::zeros((chunks.len(), chunk_svm_dim(dims)));
    for (i, (m, _)) in chunks.iter().enumerate() {
        rows.row_mut(i).assign(&chunk_svm_features(m)?);
    }
    let as_matrix = FeatureMatrix::new("chunk-statistics", chunks[0].0.kind, rows);
    let norm = NormStats::fit([&as_matrix])?;
    let x = standardize_rows(&norm, &as_matrix.values);
    let mut svms = Vec::with_capacity(NUM_TAGS);
    for tag in Tag::ALL {
        split_by_tag(chunks, tag)?;
        let y: Vec<bool> = chunks.iter().map(|(_, t)| t.contains(tag)).collect();
        let cfg = SvmConfig {
            seed: config.seed.wrapping_add(tag.index() as u64),
            ..*config
        };
        svms.push(linear_svm_fit(x.view(), &y, &cfg)?);
    }
    Ok(SvmTagModel {
        family: CHUNKSVM_FAMILY.into(),
        feature_kind: chunks[0].0.kind,
        svms,
        norm,
    })
}

impl SvmTagModel {
    /// Signed-margin score per tag (max over frames for MI-SVM).
    pub fn score(&self, chunk: &FeatureMatrix) -> Result<[f64; NUM_TAGS]> {
        let x = match self.family.as_str() {
            MISVM_FAMILY => {
                if chunk.dims() != self.norm.dims() {
                    return Err(Error::Shape(format!(
                        "MI-SVM expects {}-dim frames, chunk {} has {}",
                        self.norm.dims(),
                        chunk.chunk_id,
                        chunk.dims()
                    )));
                }
                standardize_rows(&self.norm, &chunk.values)
            }
            _ => {
                let v = chunk_svm_features(chunk)?;
                if v.len() != self.norm.dims() {
                    return Err(Error::Shape(format!(
                        "chunk SVM expects {} statistics, chunk {} gives {}",
                        self.norm.dims(),
                        chunk.chunk_id,
                        v.len()
                    )));
                }
                standardize_rows(&self.norm, &v.insert_axis(Axis(0)))
            }
        };
        let mut out = [0.0; NUM_TAGS];
        for (o, svm) in out.iter_mut().zip(&self.svms) {
            *o = x
                .rows()
                .into_iter()
                .map(|r| svm.margin(r))
                .fold(f64::NEG_INFINITY, f64::max);
        }
        Ok(out)
    }

    pub fn to_model_file(&self) -> ModelFile {
        let a = self.svms.first().map_or(1.0, |s| s.regularization);
        let meta = serde_json::json!({ "regularization": a, "feature_kind": self.feature_kind });
        let mut file = ModelFile::new(&self.family, 0, meta);
        for (tag, svm) in Tag::ALL.iter().zip(&self.svms) {
            file.push(format!("{tag}.weights"), vec![svm.weights.len()], svm.weights.to_vec());
            file.push(format!("{tag}.bias"), vec![1], vec![svm.bias]);
        }
        file.push_norm(&self.norm);
        file
    }

    pub fn from_model_file(file: &ModelFile) -> Result<SvmTagModel> {
        if file.family != MISVM_FAMILY && file.family != CHUNKSVM_FAMILY {
            return Err(Error::Config(format!("expected an SVM model, found {}", file.family)));
        }
        let a = file.meta["regularization"].as_f64().unwrap_or(1.0);
        let mut svms = Vec::with_capacity(NUM_TAGS);
        for tag in Tag::ALL {
            svms.push(LinearSvm {
                weights: file.vector(&format!("{tag}.weights"))?,
                bias: file.tensor(&format!("{tag}.bias"))?.1[0],
                regularization: a,
                objective: f64::NAN,
                violations: 0,
            });
        }
        Ok(SvmTagModel {
            family: file.family.clone(),
            feature_kind: feature_kind_meta(file)?,
            svms,
            norm: file.norm()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().write(path)
    }

    pub fn load(path: &Path) -> Result<SvmTagModel> {
        SvmTagModel::from_model_file(&ModelFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn uniform_model(p: DiagGmm, n: DiagGmm) -> GmmTagModel {
        GmmTagModel {
            feature_kind: FeatureKind::Mfcc,
            tags: Tag::ALL
                .iter()
                .map(|&tag| TagGmm {
                    tag,
                    positive: p.clone(),
                    negative: n.clone(),
                })
                .collect(),
            config: EmConfig::default(),
        }
    }

    #[test]
    fn single_component_matches_sample_moments() {
        let data = array![[1.0, 2.0], [3.0, -1.0], [2.0, 0.5], [6.0, 4.0]];
        let fit = em_fit(
            data.view(),
            &EmConfig {
                components: 1,
                ..EmConfig::default()
            },
        )
        .unwrap();
        let mean = data.mean_axis(Axis(0)).unwrap();
        let var = data.var_axis(Axis(0), 0.0);
        for j in 0..2 {
            assert!((fit.gmm.means[[0, j]] - mean[j]).abs() < 1e-12);
            assert!((fit.gmm.variances[[0, j]] - var[j]).abs() < 1e-12);
        }
        assert_eq!(fit.gmm.weights[0], 1.0);
    }

    #[test]
    fn zero_iterations_is_kmeans_start() {
        let data = Array2::from_shape_fn((40, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let cfg = EmConfig {
            components: 3,
            iterations: 0,
            ..EmConfig::default()
        };
        let fit = em_fit(data.view(), &cfg).unwrap();
        assert_eq!(fit.gmm, kmeans_init(data.view(), &cfg).unwrap());
        assert_eq!(fit.log_likelihood.len(), 1);
    }

    #[test]
    fn too_few_frames_is_degenerate() {
        let data = Array2::zeros((3, 2));
        assert!(matches!(em_fit(data.view(), &EmConfig::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identical_models_score_zero_and_duplicates_double() {
        let g = DiagGmm {
            weights: array![0.3, 0.7],
            means: array![[0.0, 1.0], [2.0, -1.0]],
            variances: array![[1.0, 0.5], [2.0, 1.0]],
        };
        let model = uniform_model(g.clone(), g);
        let chunk = FeatureMatrix::new("c", FeatureKind::Mfcc, array![[0.3, 0.2], [5.0, 1.0]]);
        assert!(gmm_tag_score(&model, &chunk).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_gaussian_log_ratio() {
        let p = DiagGmm {
            weights: array![1.0],
            means: array![[1.0]],
            variances: array![[4.0]],
        };
        let n = DiagGmm {
            weights: array![1.0],
            means: array![[-1.0]],
            variances: array![[1.0]],
        };
        let x = 0.5;
        let lp = -0.5 * ((x - 1.0f64).powi(2) / 4.0 + 4.0f64.ln() + LN_2PI);
        let ln = -0.5 * ((x + 1.0f64).powi(2) + LN_2PI);
        let model = uniform_model(p, n);
        let one = FeatureMatrix::new("c", FeatureKind::Mfcc, array![[x]]);
        let two = FeatureMatrix::new("c", FeatureKind::Mfcc, array![[x], [x]]);
        let s1 = gmm_tag_score(&model, &one).unwrap()[0];
        assert!((s1 - (lp - ln)).abs() < 1e-9);
        assert!((gmm_tag_score(&model, &two).unwrap()[0] - 2.0 * s1).abs() < 1e-9);
    }

    #[test]
    fn chunk_features_by_hand() {
        let c = FeatureMatrix::new("c", FeatureKind::Mfcc, array![[0.0, 0.0], [2.0, 2.0]]);
        let v = chunk_svm_features(&c).unwrap();
        assert_eq!(v.to_vec(), vec![1.0, 1.0, 1.0, 1.0, 1.0]);
        let k = FeatureMatrix::new("k", FeatureKind::Mfcc, Array2::from_elem((5, 3), 2.5));
        let v = chunk_svm_features(&k).unwrap();
        assert_eq!(&v.to_vec()[..3], &[2.5, 2.5, 2.5]);
        assert!(v.iter().skip(3).all(|&x| x == 0.0));
        assert_eq!(chunk_svm_dim(24), 324);
    }

    #[test]
    fn separable_svm_is_perfect() {
        let x = array![[2.0, 1.0], [3.0, 2.0], [2.5, -1.0], [-2.0, 0.0], [-3.0, 1.0], [-2.5, -2.0]];
        let y = [true, true, true, false, false, false];
        let svm = linear_svm_fit(x.view(), &y, &SvmConfig::default()).unwrap();
        for (row, &yi) in x.rows().into_iter().zip(&y) {
            assert_eq!(svm.margin(row) > 0.0, yi);
        }
    }

    #[test]
    fn one_class_svm_is_degenerate() {
        let x = array![[1.0], [2.0]];
        assert!(matches!(
            linear_svm_fit(x.view(), &[true, true], &SvmConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn singleton_bags_converge_in_one_round() {
        let mut bags = vec![
            MilBag::new("p1", array![[2.0, 0.0]], true),
            MilBag::new("p2", array![[3.0, 1.0]], true),
            MilBag::new("n1", array![[-2.0, 0.0], [-3.0, 0.5]], false),
        ];
        let m = misvm_train(&mut bags, &MisvmConfig::default()).unwrap();
        assert_eq!(m.iterations, 1);
        assert!(m.converged);
    }
}
