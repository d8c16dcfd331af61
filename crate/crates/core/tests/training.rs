use mematch_core::episodes::synthetic::{generate, SyntheticSpec};
use mematch_core::episodes::{sample_episode, Dataset, SamplingStrategy};
use mematch_core::model::{ModelConfig, ModelParams, ModelStats};
use mematch_core::rng::substream;
use mematch_core::trainer::{
    decode, encode, train_step, AdamConfig, LossReduction, OptimState, SessionSettings, TrainSession,
};
use mematch_core::Error;

fn data() -> Dataset {
    let spec = SyntheticSpec {
        train_classes: 8,
        test_classes: 1,
        images_per_class: 10,
        size: 16,
        shift: 1,
        ..Default::default()
    };
    generate(&spec, 9).unwrap().train
}

fn settings() -> SessionSettings {
    SessionSettings {
        adam: AdamConfig::default(),
        strategy: SamplingStrategy::uniform(3, 1, 2),
        episodes_per_step: 2,
        reduction: LossReduction::Sum,
    }
}

#[test]
fn repeated_steps_on_one_episode_drive_its_loss_down() {
    let ds = data();
    let ep = sample_episode(&ds, 3, 1, 2, &mut substream(0, "overfit", 0)).unwrap();
    let mut params = ModelParams::<f32>::init(&ModelConfig::tiny(), &mut substream(0, "init", 0)).unwrap();
    let mut stats = ModelStats::new(&params.config);
    let mut opt = OptimState::new(params.named().into_iter().map(|(_, t)| t));
    let adam = AdamConfig { lr: 0.01, ..Default::default() };
    let losses: Vec<f64> = (0..50)
        .map(|_| {
            train_step(&mut params, &mut stats, &mut opt, &adam, std::slice::from_ref(&ep), LossReduction::Sum)
                .unwrap()
                .loss
        })
        .collect();
    assert!(losses[49] < 0.1 * losses[0], "{} -> {}", losses[0], losses[49]);
    let drops = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops >= 45, "loss fell on only {drops} of 49 steps: {losses:?}");
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_uninterrupted_run() {
    let ds = data();
    let cfg = ModelConfig::tiny();
    let mut straight = TrainSession::<f32>::new(&cfg, settings(), 42).unwrap();
    let mut first = TrainSession::<f32>::new(&cfg, settings(), 42).unwrap();
    for _ in 0..3 {
        straight.advance(&ds).unwrap();
        first.advance(&ds).unwrap();
    }
    let bytes = encode(&first.checkpoint("mid")).unwrap();
    drop(first);
    let mut resumed = TrainSession::resume(decode::<f32>(&bytes).unwrap(), settings()).unwrap();
    assert_eq!(resumed.step(), 3);
    for _ in 0..3 {
        let a = straight.advance(&ds).unwrap();
        let b = resumed.advance(&ds).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    assert_eq!(straight.params, resumed.params);
    assert_eq!(encode(&straight.checkpoint("x")).unwrap(), encode(&resumed.checkpoint("x")).unwrap());
}

#[test]
fn same_seed_same_trajectory_different_seed_different() {
    let ds = data();
    let cfg = ModelConfig::tiny();
    let run = |seed| {
        let mut s = TrainSession::<f32>::new(&cfg, settings(), seed).unwrap();
        (0..2).map(|_| s.advance(&ds).unwrap().loss).collect::<Vec<_>>()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn non_finite_loss_stops_training_with_the_step() {
    let ds = data();
    let mut s = TrainSession::<f32>::new(&ModelConfig::tiny(), settings(), 3).unwrap();
    s.advance(&ds).unwrap();
    s.params.projections.t_c.data_mut()[0] = f32::NAN;
    match s.advance(&ds) {
        Err(Error::NanLoss { step }) => assert_eq!(step, 1),
        other => panic!("expected NanLoss, got {other:?}"),
    }
}

#[test]
fn invalid_settings_name_their_field() {
    let cfg = ModelConfig::tiny();
    let mut bad = settings();
    bad.episodes_per_step = 0;
    let err = TrainSession::<f32>::new(&cfg, bad, 0).unwrap_err().to_string();
    assert!(err.contains("episodes_per_step"), "{err}");
    let mut bad = settings();
    bad.adam.lr = -1.0;
    let err = TrainSession::<f32>::new(&cfg, bad, 0).unwrap_err().to_string();
    assert!(err.contains("optim.lr"), "{err}");
}
