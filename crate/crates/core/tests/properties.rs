use proptest::prelude::*;

use mematch_core::episodes::{Image, ImageSpec};
use mematch_core::memory::Memory;
use mematch_core::model::{ModelConfig, ModelParams, ModelStats};
use mematch_core::numcore::{Tape, Tensor};
use mematch_core::rng::{substream, RngState};
use mematch_core::trainer::{
    decode, encode, episode_loss, mean_ci95, predict_label, Checkpoint, LossReduction, OptimState, Prediction,
};
use mematch_core::verify::reference;

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(x));
        let s = t.softmax(v).unwrap();
        let p = t.data(s);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_vectors_have_unit_length(x in vec_strategy(6)) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(x));
        let n = t.l2_normalize(v).unwrap();
        let len: f64 = t.data(n).iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((len - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_is_linear_in_its_input(a in vec_strategy(2 * 16), b in vec_strategy(2 * 16), w in vec_strategy(3 * 2 * 9), s in -2.0f64..2.0) {
        let conv = |x: &[f64]| reference::conv2d(x, 1, 2, 4, 4, &w, 3, 3, None, 1);
        let mut t = Tape::new();
        let mixed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let xv = t.constant(Tensor::new(vec![1, 2, 4, 4], mixed).unwrap());
        let wv = t.constant(Tensor::new(vec![3, 2, 3, 3], w.clone()).unwrap());
        let y = t.conv2d(xv, wv, None, 1).unwrap();
        let (ya, yb) = (conv(&a), conv(&b));
        for (i, got) in t.data(y).iter().enumerate() {
            prop_assert!((got - (ya[i] + s * yb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn memory_writes_keep_their_invariants(
        dim in 2usize..6,
        capacity in 1usize..5,
        writes in prop::collection::vec((vec_strategy(6), 0usize..3), 1..12),
    ) {
        let mut t = Tape::new();
        let mut mem = Memory::new(capacity, dim);
        let mut slots = Vec::new();
        for (i, (x, label)) in writes.iter().enumerate() {
            let x = &x[..dim];
            prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let v = t.constant(Tensor::vector(x.to_vec()));
            mem.write(&mut t, v, *label).unwrap();
            reference::write(&mut slots, capacity, x, *label);
            prop_assert!(mem.len() <= (i + 1).min(capacity));
        }
        prop_assert_eq!(mem.len(), slots.len());
        for (slot, (key, label)) in mem.slots().iter().zip(&slots) {
            prop_assert_eq!(slot.value, *label);
            let k = t.data(slot.key);
            prop_assert!((k.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            for (a, b) in k.iter().zip(key) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matching_loss_is_nonnegative_and_matches_the_loop(
        ways in 1usize..4,
        shots in 1usize..3,
        logits in prop::collection::vec(-8.0f64..8.0, 36),
        queries in prop::collection::vec(0usize..3, 1..4),
    ) {
        let support: Vec<usize> = (0..ways).flat_map(|c| vec![c; shots]).collect();
        let query: Vec<usize> = queries.iter().map(|q| q % ways).collect();
        let l = &logits[..query.len() * support.len()];
        let got = episode_loss(l, &support, &query, LossReduction::Sum).unwrap();
        prop_assert!(got >= 0.0);
        prop_assert!((got - reference::matching_loss(l, &support, &query)).abs() < 1e-9 * got.max(1.0));
        let mean = episode_loss(l, &support, &query, LossReduction::Mean).unwrap();
        prop_assert!(mean <= got + 1e-12);
    }

    #[test]
    fn predictions_point_at_a_support_label(row in prop::collection::vec(-3.0f64..3.0, 1..10)) {
        let labels: Vec<usize> = (0..row.len()).map(|i| i % 3).collect();
        for mode in [Prediction::Nearest, Prediction::ClassSum] {
            prop_assert!(labels.contains(&predict_label(&row, &labels, mode)));
        }
        let best = predict_label(&row, &labels, Prediction::Nearest);
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = row.iter().position(|&v| v == top).unwrap();
        prop_assert_eq!(best, labels[first]);
    }

    #[test]
    fn confidence_interval_is_nonnegative_and_mean_bounded(v in prop::collection::vec(0.0f64..1.0, 1..50)) {
        let (m, ci) = mean_ci95(&v);
        prop_assert!(ci >= 0.0);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
    }

    #[test]
    fn four_quarter_turns_are_the_identity(pixels in prop::collection::vec(0.0f32..1.0, 25)) {
        let img = Image::new(ImageSpec { channels: 1, height: 5, width: 5 }, pixels).unwrap();
        prop_assert_eq!(&img.rotate90(4).unwrap(), &img);
        prop_assert_eq!(&img.rotate90(1).unwrap().rotate90(3).unwrap(), &img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), draws in 0usize..20, meta in "[a-z ]{0,12}") {
        let params = ModelParams::<f32>::init(&ModelConfig::tiny(), &mut substream(seed, "init", 0)).unwrap();
        let stats = ModelStats::new(&params.config);
        let mut opt = OptimState::new(params.named().into_iter().map(|(_, t)| t));
        opt.step = draws as u64;
        let mut rng = substream(seed, "episodes", 0);
        for _ in 0..draws {
            rand::RngCore::next_u32(&mut rng);
        }
        let ck = Checkpoint { params, stats, opt, rng: RngState::capture(&rng), meta };
        let bytes = encode(&ck).unwrap();
        let back = decode::<f32>(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }
}
