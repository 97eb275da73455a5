//! Dense feed-forward networks trained by mini-batch SGD with momentum.
//!
//! Dropout follows the classic scheme: during training each input unit of a
//! layer is zeroed with probability `dropout_rate`; at inference no mask is
//! drawn and the layer's weights are scaled by `1 - dropout_rate` instead.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Linear => {}
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }

    pub fn parse(text: &str) -> Option<Activation> {
        match text.to_ascii_lowercase().as_str() {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Squared error summed over outputs, averaged over the batch.
    Mse,
    /// Binary cross-entropy summed over outputs, averaged over the batch.
    /// Requires a sigmoid output layer.
    Bce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
    /// Probability of dropping each *input* unit of this layer during training.
    pub dropout_rate: f64,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Shape of one layer for model construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn new(units: usize, activation: Activation, dropout_rate: f64) -> Self {
        LayerSpec {
            units,
            activation,
            dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
    pub seed: u64,
}

/// How dropout is handled in a forward pass.
pub enum Mode<'a> {
    /// Draw a fresh Bernoulli mask for every dropout-enabled layer.
    Train(&'a mut dyn RngCore),
    /// No mask; weights scaled by `1 - dropout_rate`.
    Infer,
}

/// Multiplier applied to a layer's input before the affine map.
#[derive(Debug, Clone)]
enum Gate {
    Mask(Array2<f64>),
    Scale(f64),
}

/// Everything the backward pass needs from a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    gated_inputs: Vec<Array2<f64>>,
    gates: Vec<Gate>,
    pre_activations: Vec<Array2<f64>>,
    /// Output of every layer; the last entry is the network output.
    pub activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("model has layers")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.len()),
                })
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl MlpModel {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn new(input_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = input_dim;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            if !(0.0..1.0).contains(&spec.dropout_rate) {
                return Err(Error::Config(format!(
                    "dropout rate {} outside [0, 1)",
                    spec.dropout_rate
                )));
            }
            if spec.units == 0 || fan_in == 0 {
                return Err(Error::Config("layer widths must be positive".into()));
            }
            let limit = (6.0 / (fan_in + spec.units) as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((spec.units, fan_in), || {
                rng.gen_range(-limit..=limit)
            });
            layers.push(DenseLayer {
                weights,
                biases: Array1::zeros(spec.units),
                activation: spec.activation,
                dropout_rate: spec.dropout_rate,
            });
            fan_in = spec.units;
        }
        Ok(MlpModel { layers, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("model has layers").output_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Checks that consecutive layer widths chain and parameters are finite.
    pub fn validate(&self) -> Result<()> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} units but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.biases.len() != l.output_dim() {
                return Err(Error::Shape(format!("layer {i} bias length mismatch")));
            }
            if !(0.0..1.0).contains(&l.dropout_rate) {
                return Err(Error::Config(format!("layer {i} dropout rate outside [0, 1)")));
            }
            if l.weights.iter().chain(l.biases.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    /// Per-layer outputs for a single input vector.
    pub fn forward(&self, input: ArrayView1<'_, f64>, mode: Mode<'_>) -> Result<Vec<Array1<f64>>> {
        let x = input.insert_axis(Axis(0));
        let trace = self.forward_batch(x, mode)?;
        Ok(trace
            .activations
            .into_iter()
            .map(|a| a.index_axis_move(Axis(0), 0))
            .collect())
    }

    /// Batch forward pass over the rows of `inputs`.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>, mut mode: Mode<'_>) -> Result<ForwardTrace> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        let n = self.layers.len();
        let mut trace = ForwardTrace {
            gated_inputs: Vec::with_capacity(n),
            gates: Vec::with_capacity(n),
            pre_activations: Vec::with_capacity(n),
            activations: Vec::with_capacity(n),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let prev: ArrayView2<'_, f64> = if i == 0 {
                inputs.view()
            } else {
                trace.activations[i - 1].view()
            };
            let rho = layer.dropout_rate;
            let (gated, gate) = match (&mut mode, rho > 0.0) {
                (Mode::Train(rng), true) => {
                    let mask = Array2::from_shape_simple_fn(prev.raw_dim(), || {
                        if rng.gen::<f64>() < rho {
                            0.0
                        } else {
                            1.0
                        }
                    });
                    (&prev * &mask, Gate::Mask(mask))
                }
                (Mode::Infer, true) => (prev.mapv(|v| v * (1.0 - rho)), Gate::Scale(1.0 - rho)),
                _ => (prev.to_owned(), Gate::Scale(1.0)),
            };
            let mut z = gated.dot(&layer.weights.t());
            z += &layer.biases;
            let mut a = z.clone();
            layer.activation.apply(&mut a);
            trace.gated_inputs.push(gated);
            trace.gates.push(gate);
            trace.pre_activations.push(z);
            trace.activations.push(a);
        }
        Ok(trace)
    }

    /// Inference-mode outputs for a batch.
    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut trace = self.forward_batch(inputs, Mode::Infer)?;
        Ok(trace.activations.pop().expect("model has layers"))
    }

    fn check_targets(&self, inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, loss: LossKind) -> Result<()> {
        if targets.dim() != (inputs.nrows(), self.output_dim()) {
            return Err(Error::Shape(format!(
                "targets are {:?}, expected ({}, {})",
                targets.dim(),
                inputs.nrows(),
                self.output_dim()
            )));
        }
        if inputs.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if loss == LossKind::Bce {
            if self.layers.last().map(|l| l.activation) != Some(Activation::Sigmoid) {
                return Err(Error::Config("binary cross-entropy needs a sigmoid output layer".into()));
            }
            if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::Config("binary cross-entropy targets must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Batch loss and its gradient with respect to the output pre-activations.
    fn output_loss(&self, trace: &ForwardTrace, targets: ArrayView2<'_, f64>, loss: LossKind) -> (f64, Array2<f64>) {
        let n = targets.nrows() as f64;
        let z = trace.pre_activations.last().expect("model has layers");
        let y = trace.output();
        let act = self.layers.last().expect("model has layers").activation;
        let mut delta = Array2::zeros(z.raw_dim());
        let mut total = 0.0;
        match loss {
            LossKind::Bce => {
                // Fused sigmoid + cross-entropy on the logits.
                Zip::from(&mut delta).and(z).and(y).and(targets).for_each(|d, &z, &y, &t| {
                    total += softplus(z) - t * z;
                    *d = (y - t) / n;
                });
            }
            LossKind::Mse => {
                Zip::from(&mut delta).and(z).and(y).and(targets).for_each(|d, &z, &y, &t| {
                    let e = y - t;
                    total += e * e;
                    *d = 2.0 * e / n * act.derivative(z, y);
                });
            }
        }
        (total / n, delta)
    }

    /// Loss on a batch without gradients.
    pub fn loss(&self, inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, loss: LossKind, mode: Mode<'_>) -> Result<f64> {
        self.check_targets(inputs, targets, loss)?;
        let trace = self.forward_batch(inputs, mode)?;
        Ok(self.output_loss(&trace, targets, loss).0)
    }

    /// Batch loss and backpropagated parameter gradients.
    pub fn loss_and_gradient(
        &self,
        inputs: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        loss: LossKind,
        mode: Mode<'_>,
    ) -> Result<(f64, Gradients)> {
        self.check_targets(inputs, targets, loss)?;
        let trace = self.forward_batch(inputs, mode)?;
        let (value, mut delta) = self.output_loss(&trace, targets, loss);
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let gw = delta.t().dot(&trace.gated_inputs[i]);
            let gb = delta.sum_axis(Axis(0));
            grads.push(LayerGradient {
                weights: gw,
                biases: gb,
            });
            if i > 0 {
                let mut upstream = delta.dot(&layer.weights);
                match &trace.gates[i] {
                    Gate::Mask(mask) => upstream *= mask,
                    Gate::Scale(s) => {
                        if *s != 1.0 {
                            upstream *= *s
                        }
                    }
                }
                let prev_act = self.layers[i - 1].activation;
                Zip::from(&mut upstream)
                    .and(&trace.pre_activations[i - 1])
                    .and(&trace.activations[i - 1])
                    .for_each(|u, &z, &a| *u *= prev_act.derivative(z, a));
                delta = upstream;
            }
        }
        grads.reverse();
        Ok((value, Gradients { layers: grads }))
    }

    /// Visits every scalar parameter in a fixed order (layer, weights row-major, biases).
    pub fn parameter_mut(&mut self, layer: usize, index: usize) -> &mut f64 {
        let l = &mut self.layers[layer];
        let nw = l.weights.len();
        if index < nw {
            let cols = l.weights.ncols();
            &mut l.weights[[index / cols, index % cols]]
        } else {
            &mut l.biases[index - nw]
        }
    }
}

fn gradient_entry(g: &Gradients, layer: usize, index: usize) -> f64 {
    let l = &g.layers[layer];
    let nw = l.weights.len();
    if index < nw {
        let cols = l.weights.ncols();
        l.weights[[index / cols, index % cols]]
    } else {
        l.biases[index - nw]
    }
}

/// SGD with classical momentum: `v ← μ·v − λ·g`, `θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) {
        let velocity = self.velocity.get_or_insert_with(|| Gradients::zeros_like(model));
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((layer, v), g) in model.layers.iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
            Zip::from(&mut v.weights).and(&g.weights).for_each(|v, &g| *v = mu * *v - lr * g);
            Zip::from(&mut v.biases).and(&g.biases).for_each(|v, &g| *v = mu * *v - lr * g);
            layer.weights += &v.weights;
            layer.biases += &v.biases;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Parameters sampled per layer; `None` checks all of them.
    pub samples_per_layer: Option<usize>,
    pub seed: u64,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        GradientCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_layer: Some(64),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `(layer, parameter index)` of the worst mismatch.
    pub worst: (usize, usize),
    pub passed: bool,
}

/// Compares backprop gradients against central finite differences in
/// inference mode (no dropout masks).
pub fn gradient_check(
    model: &MlpModel,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    loss: LossKind,
    config: &GradientCheckConfig,
) -> Result<GradientCheckReport> {
    let (_, analytic) = model.loss_and_gradient(inputs, targets, loss, Mode::Infer)?;
    gradient_check_against(model, inputs, targets, loss, &analytic, config)
}

/// Finite-difference comparison against externally supplied gradients.
pub fn gradient_check_against(
    model: &MlpModel,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    loss: LossKind,
    analytic: &Gradients,
    config: &GradientCheckConfig,
) -> Result<GradientCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = model.clone();
    let mut report = GradientCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: (0, 0),
        passed: true,
    };
    for layer in 0..model.layers.len() {
        let count = model.layers[layer].weights.len() + model.layers[layer].biases.len();
        let mut indices: Vec<usize> = (0..count).collect();
        if let Some(k) = config.samples_per_layer {
            indices.shuffle(&mut rng);
            indices.truncate(k);
        }
        for index in indices {
            let original = *probe.parameter_mut(layer, index);
            *probe.parameter_mut(layer, index) = original + config.step;
            let plus = probe.loss(inputs, targets, loss, Mode::Infer)?;
            *probe.parameter_mut(layer, index) = original - config.step;
            let minus = probe.loss(inputs, targets, loss, Mode::Infer)?;
            *probe.parameter_mut(layer, index) = original;
            let numeric = (plus - minus) / (2.0 * config.step);
            let exact = gradient_entry(analytic, layer, index);
            // Floor keeps vanishing gradients from dominating the ratio.
            let denom = exact.abs().max(numeric.abs()).max(1e-6);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (layer, index);
            }
        }
    }
    report.passed = report.max_relative_error < config.tolerance;
    Ok(report)
}

/// Supplies mini-batches by index without materializing the full data set.
pub trait BatchSource: Sync {
    fn len(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn target_dim(&self) -> usize;
    /// Fills row `r` of `inputs`/`targets` with example `indices[r]`.
    fn fill(&self, indices: &[usize], inputs: &mut Array2<f64>, targets: &mut Array2<f64>);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory source over dense input and target matrices.
#[derive(Debug, Clone)]
pub struct DenseSource {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl BatchSource for DenseSource {
    fn len(&self) -> usize {
        self.inputs.nrows()
    }

    fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    fn target_dim(&self) -> usize {
        self.targets.ncols()
    }

    fn fill(&self, indices: &[usize], inputs: &mut Array2<f64>, targets: &mut Array2<f64>) {
        for (r, &i) in indices.iter().enumerate() {
            inputs.row_mut(r).assign(&self.inputs.row(i));
            targets.row_mut(r).assign(&self.targets.row(i));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation loss; `None` trains every epoch.
    pub patience: Option<usize>,
    pub loss: LossKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean mini-batch training loss per epoch (with dropout active).
    pub train_loss: Vec<f64>,
    /// Inference-mode loss on the validation source per epoch.
    pub valid_loss: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept; 0 when no epoch ran.
    pub kept_epoch: usize,
}

/// Evaluates mean inference-mode loss over a source.
pub fn evaluate_loss(model: &MlpModel, source: &dyn BatchSource, loss: LossKind, batch_size: usize) -> Result<f64> {
    let n = source.len();
    if n == 0 {
        return Err(Error::Degenerate("cannot evaluate loss on an empty set".into()));
    }
    let indices: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let mut x = Array2::zeros((0, source.input_dim()));
    let mut t = Array2::zeros((0, source.target_dim()));
    for chunk in indices.chunks(batch_size.max(1)) {
        if x.nrows() != chunk.len() {
            x = Array2::zeros((chunk.len(), source.input_dim()));
            t = Array2::zeros((chunk.len(), source.target_dim()));
        }
        source.fill(chunk, &mut x, &mut t);
        total += model.loss(x.view(), t.view(), loss, Mode::Infer)? * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Mini-batch SGD with momentum over shuffled epochs.
///
/// With `patience` and a validation source, training stops once the
/// validation loss has not improved for `patience` epochs and the best
/// parameters are restored. Otherwise the final epoch's parameters are kept.
pub fn train(
    model: &mut MlpModel,
    train_set: &dyn BatchSource,
    valid_set: Option<&dyn BatchSource>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    if train_set.input_dim() != model.input_dim() || train_set.target_dim() != model.output_dim() {
        return Err(Error::Shape(format!(
            "data is {}→{} but network is {}→{}",
            train_set.input_dim(),
            train_set.target_dim(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    let mut history = TrainHistory::default();
    if config.max_epochs == 0 || train_set.is_empty() {
        return Ok(history);
    }
    let batch = config.batch_size.max(1);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut optimizer = SgdMomentum::new(config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, MlpModel, usize)> = None;
    let mut since_best = 0;
    let mut x = Array2::zeros((batch, train_set.input_dim()));
    let mut t = Array2::zeros((batch, train_set.target_dim()));

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(batch).enumerate() {
            if x.nrows() != idx.len() {
                x = Array2::zeros((idx.len(), train_set.input_dim()));
                t = Array2::zeros((idx.len(), train_set.target_dim()));
            }
            train_set.fill(idx, &mut x, &mut t);
            let (loss, grads) =
                model.loss_and_gradient(x.view(), t.view(), config.loss, Mode::Train(&mut mask_rng))?;
            if !loss.is_finite() || !grads.max_abs().is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}, batch {b} ({} examples): loss = {loss}",
                    idx.len()
                )));
            }
            optimizer.step(model, &grads);
            epoch_loss += loss * idx.len() as f64;
        }
        history.train_loss.push(epoch_loss / train_set.len() as f64);
        history.kept_epoch = epoch;

        if let Some(valid) = valid_set.filter(|v| !v.is_empty()) {
            let v = evaluate_loss(model, valid, config.loss, batch)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("validation loss is {v} at epoch {epoch}")));
            }
            history.valid_loss.push(v);
            if let Some(patience) = config.patience {
                if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
                    best = Some((v, model.clone(), epoch));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        break;
                    }
                }
            }
        }
        log::debug!(
            "epoch {epoch}: train {:.6} valid {:?}",
            history.train_loss.last().unwrap(),
            history.valid_loss.last()
        );
    }
    if let Some((_, params, epoch)) = best {
        *model = params;
        history.kept_epoch = epoch;
    }
    Ok(history)
}
