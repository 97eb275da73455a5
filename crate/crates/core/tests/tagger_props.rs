use std::collections::HashMap;
use std::path::PathBuf;

use audiotag_core::dataset::{ChunkList, ChunkRecord, FoldId, Refinement};
use audiotag_core::eval::compute_eer;
use audiotag_core::features::{FeatureKind, FeatureMatrix, NormStats};
use audiotag_core::tagger::{aggregate_windows, decide_tags, train_tagger, Aggregation, ChunkScore, TaggerConfig};
use audiotag_core::tags::{Tag, TagSet, NUM_TAGS};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Each tag lights up its own feature dimension; absent tags sit at -1.
fn cluster_chunks(n: usize, seed: u64) -> Vec<(FeatureMatrix, TagSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let tags = TagSet::from_tags(Tag::ALL.into_iter().filter(|_| rng.gen_bool(0.5)));
            let values = Array2::from_shape_fn((20, NUM_TAGS), |(_, d)| {
                let centre = if tags.contains(Tag::ALL[d]) { 1.0 } else { -1.0 };
                centre + rng.gen_range(-0.4..0.4)
            });
            (FeatureMatrix::new(format!("c{i}"), FeatureKind::Mbk, values), tags)
        })
        .collect()
}

#[test]
fn separable_clusters_are_learned() {
    let train = cluster_chunks(60, 1);
    let test = cluster_chunks(40, 2);
    let norm = NormStats::fit(train.iter().map(|(m, _)| m)).unwrap();
    let config = TaggerConfig {
        half_width: 2,
        noise_frames: 2,
        train_stride: 2,
        hidden: vec![32, 16],
        learning_rate: 0.01,
        batch_size: 20,
        max_epochs: 20,
        patience: None,
        ..TaggerConfig::default()
    };
    let tagger = train_tagger(&train, &config, &norm).unwrap();
    let losses = &tagger.history.train_loss;
    assert_eq!(losses.len(), 20);
    assert!(losses[4] < losses[0], "loss did not fall: {losses:?}");

    let scores: Vec<ChunkScore> = test.iter().map(|(m, _)| tagger.predict(m).unwrap()).collect();
    for tag in Tag::ALL {
        let s: Vec<f64> = scores.iter().map(|c| c.get(tag)).collect();
        let t: Vec<bool> = test.iter().map(|(_, tags)| tags.contains(tag)).collect();
        let eer = compute_eer(&s, &t).unwrap();
        assert!(eer < 0.05, "tag {tag}: EER {eer}");
    }
}

fn record(id: &str, fold: Option<FoldId>) -> ChunkRecord {
    ChunkRecord {
        chunk_id: id.to_string(),
        audio_path: PathBuf::from(format!("{id}.wav")),
        tags: TagSet::empty(),
        refinement: if fold.is_some() { Refinement::Refined } else { Refinement::RawOnly },
        fold,
    }
}

fn corpus(per_fold: usize, weak: usize, eval: usize) -> ChunkList {
    let mut records = Vec::new();
    for k in 0..5u8 {
        for i in 0..per_fold {
            records.push(record(&format!("d{k}_{i}"), Some(FoldId::Dev(k))));
        }
    }
    for i in 0..weak {
        records.push(record(&format!("w{i}"), None));
    }
    for i in 0..eval {
        records.push(record(&format!("e{i}"), Some(FoldId::Evaluation)));
    }
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(per_fold as u64));
    ChunkList::new(records)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pooling_ignores_window_order_and_stays_in_range(seed in any::<u64>(), windows in 1..40usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = Array2::from_shape_fn((windows, NUM_TAGS), |_| rng.gen_range(0.0..1.0));
        let mut rows: Vec<usize> = (0..windows).collect();
        rows.shuffle(&mut rng);
        let permuted = out.select(ndarray::Axis(0), &rows);
        for agg in [Aggregation::Mean, Aggregation::Max] {
            let a = aggregate_windows(out.view(), agg).unwrap();
            let b = aggregate_windows(permuted.view(), agg).unwrap();
            for k in 0..NUM_TAGS {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
                let col = out.column(k);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a[k] >= lo - 1e-12 && a[k] <= hi + 1e-12);
            }
            if agg == Aggregation::Max {
                for k in 0..NUM_TAGS {
                    prop_assert!(out.column(k).iter().any(|&v| v == a[k]));
                }
            }
        }
    }

    #[test]
    fn decisions_are_strict_threshold_crossings(
        posteriors in prop::array::uniform7(0.0..1.0f64),
        threshold in 0.0..1.0f64,
    ) {
        let score = ChunkScore { chunk_id: "x".into(), posteriors };
        let set = decide_tags(&score, threshold);
        for tag in Tag::ALL {
            prop_assert_eq!(set.contains(tag), posteriors[tag.index()] > threshold);
        }
    }

    #[test]
    fn development_chunks_are_tested_once_and_trained_four_times(
        per_fold in 1..6usize,
        weak in 0..5usize,
        eval in 0..4usize,
    ) {
        let list = corpus(per_fold, weak, eval);
        let mut trained: HashMap<String, usize> = HashMap::new();
        let mut tested: HashMap<String, usize> = HashMap::new();
        for k in 0..5u8 {
            let split = list.split(FoldId::Dev(k), true);
            let without = list.split(FoldId::Dev(k), false);
            for r in &split.train {
                *trained.entry(r.chunk_id.clone()).or_default() += 1;
                prop_assert_ne!(r.fold, Some(FoldId::Dev(k)));
            }
            for r in &split.test {
                *tested.entry(r.chunk_id.clone()).or_default() += 1;
                prop_assert_eq!(r.fold, Some(FoldId::Dev(k)));
            }
            // Weak chunks only ever enlarge the training set.
            prop_assert_eq!(&split.test, &without.test);
            let extra: Vec<_> = split.train.iter().filter(|r| !without.train.contains(r)).collect();
            prop_assert_eq!(extra.len(), weak);
            prop_assert!(extra.iter().all(|r| r.refinement == Refinement::RawOnly));
            prop_assert!(without.train.iter().all(|r| split.train.contains(r)));
        }
        for r in list.records() {
            match r.fold {
                Some(FoldId::Dev(_)) => {
                    prop_assert_eq!(trained.get(&r.chunk_id), Some(&4));
                    prop_assert_eq!(tested.get(&r.chunk_id), Some(&1));
                }
                Some(FoldId::Evaluation) => {
                    prop_assert!(!trained.contains_key(&r.chunk_id) && !tested.contains_key(&r.chunk_id));
                }
                None => {
                    prop_assert_eq!(trained.get(&r.chunk_id), Some(&5));
                    prop_assert!(!tested.contains_key(&r.chunk_id));
                }
            }
        }
        let eval_split = list.split(FoldId::Evaluation, false);
        prop_assert_eq!(eval_split.test.len(), eval);
        prop_assert_eq!(eval_split.train.len(), 5 * per_fold);
    }
}
