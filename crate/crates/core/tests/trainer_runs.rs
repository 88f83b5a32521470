use fsdd::checkpoint::Checkpoint;
use fsdd::data::{sample_dataset, Example, SyntheticSpec};
use fsdd::net::{Denoiser, DenoiserConfig};
use fsdd::trainer::{batch_indices, corrupt_batch, fit, fit_from, step_stream, train_step, TrainConfig, TrainState};
use fsdd::RngStream;

fn small_model() -> DenoiserConfig {
    DenoiserConfig {
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        ..DenoiserConfig::new(5, 6)
    }
}

fn dataset() -> Vec<Example> {
    sample_dataset(&SyntheticSpec::two_point(5, 6, 3), 40).unwrap()
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        seed: 9,
        ..TrainConfig::default()
    }
}

/// `step,loss` pairs of a training log.
fn losses(path: &std::path::Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn zero_learning_rate_freezes_params_but_ema_blends() {
    let model = Denoiser::<f64>::init(small_model(), 1).unwrap();
    let mut state = TrainState::new(model.clone(), 0.5);
    // Offset the shadow so blending is observable.
    for t in state.ema.shadow.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += 1.0);
    }
    let before = state.ema.shadow.clone();
    let data = dataset();
    let batch: Vec<&Example> = data.iter().take(4).collect();
    let c = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        ..cfg(1)
    };
    train_step(&mut state, &batch, &step_stream(0, 0), &c).unwrap();
    assert_eq!(state.model.params, model.params);
    for ((s, b), p) in state.ema.shadow.tensors().iter().zip(before.tensors()).zip(model.params.tensors()) {
        for ((&s, &b), &p) in s.data.iter().zip(&b.data).zip(&p.data) {
            assert_eq!(s, 0.5 * b + 0.5 * p);
        }
    }
}

#[test]
fn zero_decay_shadow_tracks_live_params() {
    let data = dataset();
    let c = TrainConfig {
        ema_decay: 0.0,
        ..cfg(1)
    };
    let state = fit::<f64>(&data, small_model(), &c).unwrap();
    assert_eq!(state.ema.shadow, state.model.params);
}

#[test]
fn training_sees_only_fixed_sum_states() {
    let data = dataset();
    let model = Denoiser::<f64>::init(small_model(), 0).unwrap();
    let batch: Vec<&Example> = data.iter().collect();
    for step in 0..20 {
        let b = corrupt_batch(&model, &batch, &step_stream(4, step), true).unwrap();
        for x in &b.x_t {
            assert_eq!(x.iter().sum::<u32>(), 6);
        }
    }
    // The unconstrained arm lets sums drift.
    let drifted = (0..20).any(|step| {
        corrupt_batch(&model, &batch, &step_stream(4, step), false)
            .unwrap()
            .x_t
            .iter()
            .any(|x| x.iter().sum::<u32>() != 6)
    });
    assert!(drifted);
}

#[test]
fn fixed_batch_loss_rarely_jumps() {
    let data = dataset();
    let batch: Vec<&Example> = data.iter().take(8).collect();
    let mut state = TrainState::new(Denoiser::<f64>::init(small_model(), 2).unwrap(), 0.999);
    let c = cfg(200);
    let rng = RngStream::new(5, 5);
    // Same corruption every step so only the parameters move.
    let mut prev = f64::INFINITY;
    let mut jumps = 0;
    for _ in 0..200 {
        let loss = train_step(&mut state, &batch, &rng, &c).unwrap();
        if loss > prev * 1.1 {
            jumps += 1;
        }
        prev = loss;
    }
    assert!(jumps < 10, "{jumps} of 200 steps raised the loss by more than 10%");
}

#[test]
fn identical_runs_have_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset();
    let run = |name: &str| {
        let log = dir.path().join(name);
        let c = TrainConfig {
            log_path: Some(log.clone()),
            eval_every: 5,
            ..cfg(15)
        };
        let s = fit::<f64>(&data, small_model(), &c).unwrap();
        (s, losses(&log))
    };
    let (a, la) = run("a.csv");
    let (b, lb) = run("b.csv");
    assert_eq!(la, lb);
    assert_eq!(a, b);
    assert_eq!(la.len(), 15);
}

#[test]
fn resumed_run_replays_the_uninterrupted_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset();
    let full_log = dir.path().join("full.csv");
    let full = fit::<f64>(
        &data,
        small_model(),
        &TrainConfig {
            log_path: Some(full_log.clone()),
            ..cfg(20)
        },
    )
    .unwrap();

    let ck = dir.path().join("half.ckpt");
    let part_log = dir.path().join("part.csv");
    fit::<f64>(
        &data,
        small_model(),
        &TrainConfig {
            checkpoint_path: Some(ck.clone()),
            log_path: Some(part_log.clone()),
            ..cfg(8)
        },
    )
    .unwrap();
    let c = cfg(20);
    let restored = TrainState::<f64>::from_checkpoint(&Checkpoint::load(&ck).unwrap(), c.ema_decay).unwrap();
    assert_eq!(restored.step, 8);
    let resumed = fit_from(
        restored,
        &data,
        &TrainConfig {
            log_path: Some(part_log.clone()),
            ..c
        },
    )
    .unwrap();
    assert_eq!(resumed, full);
    assert_eq!(losses(&part_log), losses(&full_log));
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("init.ckpt");
    let data = dataset();
    let state = fit::<f64>(
        &data,
        small_model(),
        &TrainConfig {
            checkpoint_path: Some(ck.clone()),
            ..cfg(0)
        },
    )
    .unwrap();
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.step, 0);
    assert_eq!(loaded.group::<f64>("params").unwrap(), state.model.params);
    assert_eq!(state.model, Denoiser::init(small_model(), 9).unwrap());
}

#[test]
fn epochs_visit_every_example_once() {
    let n = 10;
    let seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(n, 2, 1, s)).collect();
    let mut sorted = seen.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    // The next epoch is a different permutation.
    let next: Vec<usize> = (5..10).flat_map(|s| batch_indices(n, 2, 1, s)).collect();
    assert_ne!(seen, next);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = dataset();
    for bad in [
        TrainConfig { ema_decay: 1.0, ..cfg(1) },
        TrainConfig { batch_size: 0, ..cfg(1) },
        TrainConfig { learning_rate: f64::NAN, ..cfg(1) },
    ] {
        assert!(fit::<f64>(&data, small_model(), &bad).is_err());
    }
    assert!(fit::<f64>(&[], small_model(), &cfg(1)).is_err());
    let wrong = sample_dataset(&SyntheticSpec::two_point(4, 6, 3), 4).unwrap();
    assert!(fit::<f64>(&wrong, small_model(), &cfg(1)).is_err());
}

#[test]
fn f32_training_runs() {
    let data = dataset();
    let s = fit::<f32>(&data, small_model(), &cfg(5)).unwrap();
    assert!(s.model.params.l2_norm().is_finite());
}
