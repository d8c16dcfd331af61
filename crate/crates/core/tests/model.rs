use mematch_core::ctxlearner::predict_params;
use mematch_core::episodes::synthetic::{generate, SyntheticSpec};
use mematch_core::episodes::{sample_episode, Dataset};
use mematch_core::memory::Memory;
use mematch_core::model::{ModelConfig, ModelParams, ModelStats};
use mematch_core::numcore::{Tape, Tensor};
use mematch_core::rng::substream;
use mematch_core::trainer::{accuracy, episode_logits, loss_and_grads, LossReduction, Prediction};
use mematch_core::verify::{reference, tiny_model};

fn tiny_data() -> Dataset {
    let spec = SyntheticSpec {
        train_classes: 6,
        test_classes: 1,
        images_per_class: 12,
        size: 16,
        shift: 1,
        ..Default::default()
    };
    generate(&spec, 5).unwrap().train
}

#[test]
fn batched_logits_match_per_image_reference() {
    let ds = tiny_data();
    for seed in 0..5 {
        let params = tiny_model(seed);
        let stats = ModelStats::<f64>::new(&params.config);
        let ep = sample_episode(&ds, 3, 2, 2, &mut substream(seed, "ep", 0)).unwrap();
        let got = episode_logits(&params, &stats, &ep).unwrap();
        let want = reference::episode_logits(&params, &stats, &ep);
        assert_eq!(got.shape(), &[6, 6]);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn f32_and_f64_models_agree() {
    let ds = tiny_data();
    let params = tiny_model(3);
    let ep = sample_episode(&ds, 4, 1, 2, &mut substream(3, "ep", 0)).unwrap();
    let stats = ModelStats::<f64>::new(&params.config);
    let hi = episode_logits(&params, &stats, &ep).unwrap();
    let lo = episode_logits(&params.cast::<f32>(), &stats.cast::<f32>(), &ep).unwrap();
    for (a, b) in hi.data().iter().zip(lo.data()) {
        assert!((a - *b as f64).abs() < 1e-3 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn every_c_way_k_shot_runs_without_shape_errors() {
    let ds = tiny_data();
    let params = tiny_model(0).cast::<f32>();
    let stats = ModelStats::new(&params.config);
    for c in 2..=5 {
        for k in 1..=5 {
            let ep = sample_episode(&ds, c, k, 2, &mut substream(c as u64, "grid", k as u64)).unwrap();
            let logits = episode_logits(&params, &stats, &ep).unwrap();
            assert_eq!(logits.shape(), &[2 * c, c * k]);
            assert!(logits.is_finite());
        }
    }
}

#[test]
fn capacity_below_support_size_still_runs() {
    let ds = tiny_data();
    let mut params = tiny_model(1);
    params.config.memory_capacity = Some(2);
    let stats = ModelStats::new(&params.config);
    let ep = sample_episode(&ds, 4, 2, 1, &mut substream(1, "cap", 0)).unwrap();
    let got = episode_logits(&params, &stats, &ep).unwrap();
    let want = reference::episode_logits(&params, &stats, &ep);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }
}

#[test]
fn gradients_reach_every_parameter() {
    let ds = tiny_data();
    let params = tiny_model(2);
    let mut stats = ModelStats::new(&params.config);
    let ep = sample_episode(&ds, 3, 2, 2, &mut substream(2, "grad", 0)).unwrap();
    let (loss, grads) = loss_and_grads(&params, &mut stats, &ep, LossReduction::Sum, 1.0).unwrap();
    assert!(loss > 0.0);
    for ((name, _), g) in params.named().iter().zip(&grads) {
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        // A bias feeding a train-mode batchnorm is cancelled by the mean
        // subtraction, so its gradient is zero by construction.
        if name.ends_with(".bias") && (name.starts_with("backbone") || name.starts_with("factorized")) {
            assert!(norm < 1e-10, "{name}: {norm}");
        } else {
            assert!(norm > 1e-12, "{name} receives no gradient");
        }
    }
}

#[test]
fn output_map_learns_from_the_first_step() {
    // With the default zero output map the LSTM gets no gradient, but the map
    // itself must, otherwise parameter prediction could never switch on.
    let ds = tiny_data();
    let params = ModelParams::<f64>::init(&ModelConfig::tiny(), &mut substream(4, "init", 0)).unwrap();
    let mut stats = ModelStats::new(&params.config);
    let ep = sample_episode(&ds, 3, 1, 2, &mut substream(4, "ep", 0)).unwrap();
    let (_, grads) = loss_and_grads(&params, &mut stats, &ep, LossReduction::Sum, 1.0).unwrap();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let t_p = names.iter().position(|n| n == "learner.t_p").unwrap();
    assert!(grads[t_p].iter().any(|g| g.abs() > 1e-12));
}

#[test]
fn predicted_vector_depends_on_slot_order() {
    let params = tiny_model(6);
    let cfg = &params.config;
    let mut rng = substream(6, "keys", 0);
    let keys: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[cfg.key_dim], 1.0, &mut rng)).collect();
    let run = |order: [usize; 3]| {
        let mut tape = Tape::new();
        let (vars, _) = params.bind(&mut tape);
        let mut mem = Memory::new(3, cfg.key_dim);
        for (label, &i) in order.iter().enumerate() {
            let v = tape.constant(keys[i].clone());
            mem.write(&mut tape, v, label).unwrap();
        }
        let w = predict_params(&mut tape, &mem, &vars.learner).unwrap();
        tape.data(w).to_vec()
    };
    let a = run([0, 1, 2]);
    let b = run([2, 1, 0]);
    let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(gap > 1e-6, "bidirectional encoding ignored order");
    assert_eq!(a, run([0, 1, 2]));
}

#[test]
fn constant_logits_score_chance_with_lowest_index_ties() {
    let support = [0, 1, 2, 3, 4];
    let query: Vec<usize> = (0..5).flat_map(|c| [c; 3]).collect();
    let logits = vec![0.0; query.len() * support.len()];
    assert_eq!(accuracy(&logits, &support, &query, Prediction::Nearest), 0.2);
    assert_eq!(accuracy(&logits, &support, &query, Prediction::ClassSum), 0.2);
}
