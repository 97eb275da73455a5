use audiotag_core::dae::{reconstruction_error, train_dae, DaeConfig, DaeModel, DaeVariant, DaeWindows};
use audiotag_core::features::{FeatureKind, FeatureMatrix, NormStats};
use audiotag_core::nn::Activation;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: usize = 4;

fn chunk(frames: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_fn((frames, DIMS), |_| rng.gen_range(-1.5..1.5));
    FeatureMatrix::new(format!("c{seed}"), FeatureKind::Mbk, values)
}

fn small_config(variant: DaeVariant) -> DaeConfig {
    DaeConfig {
        context_frames: 3,
        encoder_hidden: 12,
        bottleneck: 6,
        decoder_hidden: 12,
        epochs: 3,
        learning_rate: 0.01,
        batch_size: 16,
        ..DaeConfig::new(variant)
    }
}

fn trained(variant: DaeVariant, seed: u64) -> DaeModel {
    let corpus = [chunk(40, seed), chunk(40, seed + 1)];
    let refs: Vec<&FeatureMatrix> = corpus.iter().collect();
    train_dae(&refs, &DaeConfig { seed, ..small_config(variant) }).unwrap()
}

/// Encoder forward pass written out with plain matrix products.
fn reference_codes(model: &DaeModel, m: &FeatureMatrix) -> Array2<f64> {
    let half = (model.config.context_frames / 2) as isize;
    let last = m.frames() as isize - 1;
    let mut out = Array2::zeros((m.frames(), model.code_dim()));
    for t in 0..m.frames() {
        let mut x: Vec<f64> = Vec::new();
        for k in -half..=half {
            let r = (t as isize + k).clamp(0, last) as usize;
            x.extend(m.values.row(r).iter());
        }
        let mut h = Array1::from(x);
        for layer in &model.network.layers[..2] {
            let scaled = h.mapv(|v| v * (1.0 - layer.dropout_rate));
            let mut z = layer.weights.dot(&scaled) + &layer.biases;
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        out.row_mut(t).assign(&h);
    }
    out
}

#[test]
fn encoding_matches_plain_matrix_products() {
    for variant in [DaeVariant::Asymmetric, DaeVariant::Symmetric] {
        let model = trained(variant, 3);
        let m = chunk(25, 99);
        let codes = model.encode_matrix(&m).unwrap();
        let expected = reference_codes(&model, &m);
        assert_eq!(codes.kind, FeatureKind::DaeCode);
        assert_eq!(codes.values.dim(), expected.dim());
        for (a, b) in codes.values.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_network_error_is_mean_squared_target_norm() {
    for variant in [DaeVariant::Asymmetric, DaeVariant::Symmetric] {
        let mut model = trained(variant, 5);
        for layer in &mut model.network.layers {
            layer.weights.fill(0.0);
            layer.biases.fill(0.0);
        }
        let m = chunk(30, 6);
        let windows = DaeWindows::new(&[&m], &model.config).unwrap();
        let err = reconstruction_error(&model, &windows).unwrap();
        let last = m.frames() as isize - 1;
        let mut expected = 0.0;
        for t in 0..m.frames() as isize {
            let offsets: Vec<isize> = match variant {
                DaeVariant::Asymmetric => vec![0],
                DaeVariant::Symmetric => vec![-1, 0, 1],
            };
            for k in offsets {
                let r = (t + k).clamp(0, last) as usize;
                expected += m.values.row(r).iter().map(|v| v * v).sum::<f64>();
            }
        }
        expected /= m.frames() as f64;
        assert!((err - expected).abs() < 1e-9 * expected, "{err} vs {expected}");
    }
}

#[test]
fn encoder_and_decoder_weights_are_independent() {
    let model = trained(DaeVariant::Symmetric, 7);
    let m = chunk(10, 8);
    let codes = model.encode_matrix(&m).unwrap();

    let mut decoder_changed = model.clone();
    decoder_changed.network.layers[2].weights.mapv_inplace(|v| v + 0.5);
    decoder_changed.network.layers[3].weights.mapv_inplace(|v| -v);
    assert_eq!(decoder_changed.encode_matrix(&m).unwrap(), codes);

    let code = codes.values.row(4).to_owned();
    let decoded = model.decode(code.view()).unwrap();
    let mut encoder_changed = model.clone();
    encoder_changed.network.layers[0].weights.mapv_inplace(|v| v * 3.0);
    encoder_changed.network.layers[1].weights.mapv_inplace(|v| v + 1.0);
    assert_eq!(encoder_changed.decode(code.view()).unwrap(), decoded);
}

#[test]
fn nominal_chunk_keeps_its_frame_count() {
    let model = trained(DaeVariant::Asymmetric, 9);
    let codes = model.encode_matrix(&chunk(399, 10)).unwrap();
    assert_eq!(codes.values.dim(), (399, 6));
}

#[test]
fn overcomplete_linear_autoencoder_approaches_identity() {
    let corpus: Vec<FeatureMatrix> = (0..4).map(|i| chunk(100, 20 + i)).collect();
    let norm = NormStats::fit(&corpus).unwrap();
    let normalized: Vec<FeatureMatrix> = corpus.iter().map(|m| norm.apply(m).unwrap()).collect();
    let refs: Vec<&FeatureMatrix> = normalized.iter().collect();
    let config = DaeConfig {
        context_frames: 1,
        encoder_hidden: 8,
        bottleneck: 8,
        decoder_hidden: 8,
        hidden_activation: Activation::Linear,
        bottleneck_activation: Activation::Linear,
        corruption: 0.0,
        epochs: 60,
        learning_rate: 0.01,
        batch_size: 10,
        ..DaeConfig::new(DaeVariant::Symmetric)
    };
    let model = train_dae(&refs, &config).unwrap();
    let per_dim = model.final_cv_error_per_dim().unwrap();
    // Unit-variance inputs: predicting zero would cost 1 per dim.
    assert!(per_dim < 1e-3, "held-out error per dim {per_dim}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn relu_codes_are_non_negative(seed in any::<u64>()) {
        let model = trained(DaeVariant::Asymmetric, seed % 1000);
        let codes = model.encode_matrix(&chunk(15, seed)).unwrap();
        prop_assert!(codes.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_chunk_gives_constant_codes(seed in any::<u64>(), frames in 1..30usize) {
        let model = trained(DaeVariant::Symmetric, seed % 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame: Vec<f64> = (0..DIMS).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let values = Array2::from_shape_fn((frames, DIMS), |(_, d)| frame[d]);
        let codes = model.encode_matrix(&FeatureMatrix::new("k", FeatureKind::Mbk, values)).unwrap();
        prop_assert_eq!(codes.frames(), frames);
        for row in codes.values.rows() {
            prop_assert_eq!(row, codes.values.row(0));
        }
    }
}
