use audiotag_core::nn::{
    gradient_check, gradient_check_against, train, Activation, DenseSource, GradientCheckConfig, LayerSpec, LossKind,
    MlpModel, Mode, TrainConfig,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

fn sigmoid_net(seed: u64, dropout: f64) -> MlpModel {
    MlpModel::new(
        5,
        &[
            LayerSpec::new(8, Activation::Relu, dropout),
            LayerSpec::new(6, Activation::Sigmoid, dropout),
            LayerSpec::new(3, Activation::Sigmoid, dropout),
        ],
        seed,
    )
    .unwrap()
}

/// Moves every bias off zero so no ReLU sits on its kink.
fn perturb_biases(model: &mut MlpModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.layers {
        layer.biases.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    }
}

#[test]
fn corrupted_gradients_fail_the_check() {
    let mut model = sigmoid_net(3, 0.0);
    perturb_biases(&mut model, 4);
    let x = random(6, 5, -1.0, 1.0, 5);
    let t = random(6, 3, 0.0, 1.0, 6).mapv(f64::round);
    let config = GradientCheckConfig {
        samples_per_layer: None,
        ..GradientCheckConfig::default()
    };
    let (_, grads) = model.loss_and_gradient(x.view(), t.view(), LossKind::Bce, Mode::Infer).unwrap();
    let good = gradient_check_against(&model, x.view(), t.view(), LossKind::Bce, &grads, &config).unwrap();
    assert!(good.passed, "{good:?}");

    let mut bad = grads.clone();
    bad.layers[1].weights[[2, 3]] += 0.05;
    let report = gradient_check_against(&model, x.view(), t.view(), LossKind::Bce, &bad, &config).unwrap();
    assert!(!report.passed);
    assert_eq!(report.worst, (1, 2 * 8 + 3));
}

#[test]
fn mean_of_dropout_passes_approaches_inference() {
    // One linear layer: the expected masked output equals the scaled one.
    let model = MlpModel::new(4, &[LayerSpec::new(2, Activation::Linear, 0.3)], 7).unwrap();
    let x = Array1::from(vec![0.5, -1.0, 2.0, 1.5]);
    let infer = model.forward(x.view(), Mode::Infer).unwrap().pop().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 40_000;
    let mut acc = Array1::<f64>::zeros(2);
    for _ in 0..n {
        acc += &model.forward(x.view(), Mode::Train(&mut rng)).unwrap()[0];
    }
    acc /= n as f64;
    // Var of one pass is at most Σ w²x² ρ(1-ρ); 5 sigma bound on the mean.
    for o in 0..2 {
        let var: f64 = (0..4).map(|i| (model.layers[0].weights[[o, i]] * x[i]).powi(2) * 0.21).sum();
        let bound = 5.0 * (var / n as f64).sqrt();
        assert!((acc[o] - infer[o]).abs() < bound, "{} vs {}", acc[o], infer[o]);
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let x = random(40, 5, -1.0, 1.0, 1);
    let t = random(40, 3, 0.0, 1.0, 2).mapv(f64::round);
    let source = DenseSource {
        inputs: x,
        targets: t,
    };
    let config = TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        batch_size: 8,
        max_epochs: 4,
        patience: None,
        loss: LossKind::Bce,
        seed: 9,
    };
    let run = |seed| {
        let mut m = sigmoid_net(seed, 0.2);
        let h = train(&mut m, &source, None, &config).unwrap();
        (m, h)
    };
    let (a, ha) = run(1);
    let (b, hb) = run(1);
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = run(2);
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backprop_agrees_with_finite_differences(seed in any::<u64>(), mse in any::<bool>()) {
        let mut model = sigmoid_net(seed, 0.25);
        perturb_biases(&mut model, seed ^ 1);
        let x = random(4, 5, -1.0, 1.0, seed ^ 2);
        let t = random(4, 3, 0.0, 1.0, seed ^ 3);
        let loss = if mse { LossKind::Mse } else { LossKind::Bce };
        let report = gradient_check(&model, x.view(), t.view(), loss, &GradientCheckConfig::default()).unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn scaled_inference_equals_inverted_dropout_weights(seed in any::<u64>(), rate in 0.0..0.9f64) {
        // Inverted dropout stores (1-ρ)W and skips scaling at inference.
        let classic = sigmoid_net(seed, rate);
        let mut inverted = classic.clone();
        for layer in &mut inverted.layers {
            layer.weights.mapv_inplace(|w| w * (1.0 - layer.dropout_rate));
            layer.dropout_rate = 0.0;
        }
        let x = random(6, 5, -2.0, 2.0, seed ^ 5);
        let a = classic.predict(x.view()).unwrap();
        let b = inverted.predict(x.view()).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let model = sigmoid_net(seed, 0.0);
        let x = random(5, 5, -3.0, 3.0, seed ^ 7);
        let t = random(5, 3, 0.0, 1.0, seed ^ 8);
        for loss in [LossKind::Bce, LossKind::Mse] {
            let value = model.loss(x.view(), t.view(), loss, Mode::Infer).unwrap();
            prop_assert!(value >= 0.0 && value.is_finite(), "{:?} gave {}", loss, value);
        }
    }

    #[test]
    fn sigmoid_outputs_are_probabilities(seed in any::<u64>()) {
        let model = sigmoid_net(seed, 0.1);
        let x = random(7, 5, -50.0, 50.0, seed ^ 9);
        let y = model.predict(x.view()).unwrap();
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
