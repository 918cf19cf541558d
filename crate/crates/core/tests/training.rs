//! Training-loop behavior: liveness, determinism, ordering guarantees,
//! ablation switches, checkpoint persistence.

use mmit_core::data::synth::{synth_generate, SyntheticSceneSpec};
use mmit_core::data::DataSource;
use mmit_core::error::Error;
use mmit_core::latent::{DomainLabel, StyleCode};
use mmit_core::objectives::LossWeights;
use mmit_core::train::checkpoint::{ensure_compatible, load_checkpoint, save_checkpoint};
use mmit_core::train::{
    make_batch, train_loop, train_loop_from, train_step, LossRecord, TrainOptions,
    TrainState, TrainingConfig,
};
use mmit_core::data::AugmentPolicy;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(max_iters: u64) -> TrainingConfig {
    TrainingConfig {
        batch_size: 2,
        max_iters,
        seed: 11,
        image_size: 32,
        ..TrainingConfig::default()
    }
}

fn tiny_dataset(count: usize) -> mmit_core::data::MemoryDataset {
    let spec = SyntheticSceneSpec::with_size(32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    synth_generate(&spec, count, &mut rng).unwrap()
}

fn all_param_values(state: &TrainState) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    for (prefix, ps) in [
        ("ec", &state.nets.content_encoder.params),
        ("es", &state.nets.style_encoder.params),
        ("g", &state.nets.generator.params),
        ("dc", &state.nets.content_critic.params),
        ("dx", &state.nets.image_critic.params),
    ] {
        for (name, arr) in ps.iter() {
            out.push((format!("{prefix}.{name}"), arr.iter().copied().collect()));
        }
    }
    out
}

#[test]
fn one_step_changes_every_parameter() {
    let ds = tiny_dataset(8);
    let config = tiny_config(1);
    let mut state = TrainState::new(config.clone(), ds.dict().clone()).unwrap();
    let before = all_param_values(&state);
    let indices: Vec<usize> = (0..config.batch_size).collect();
    let mut rng = state.rng.clone();
    let batch = make_batch(&ds, &indices, &config, &AugmentPolicy::off(), &mut rng).unwrap();
    train_step(&mut state, &batch).unwrap();
    let after = all_param_values(&state);
    for ((name, b), (_, a)) in before.iter().zip(after.iter()) {
        let delta: f64 = b
            .iter()
            .zip(a.iter())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(delta > 0.0, "parameter {name} unchanged after one step");
    }
    assert_eq!(state.iteration, 1);
}

#[test]
fn critic_steps_leave_generator_untouched() {
    // Zero every generator-side objective weight and remove the adversarial
    // pull by checking right after critic phases: run a full step with a
    // config whose generator lr is zero is not expressible, so instead
    // verify via two half-measures: the fake images are detached for the
    // critics (their update cannot change gen params because the gen Adam
    // runs strictly after), and parameter sets are disjoint.
    let ds = tiny_dataset(8);
    let config = tiny_config(1);
    let state = TrainState::new(config, ds.dict().clone()).unwrap();
    let mut names = std::collections::HashSet::new();
    for (prefix, ps) in [
        ("ec", &state.nets.content_encoder.params),
        ("es", &state.nets.style_encoder.params),
        ("g", &state.nets.generator.params),
        ("dc", &state.nets.content_critic.params),
        ("dx", &state.nets.image_critic.params),
    ] {
        for (name, _) in ps.iter() {
            assert!(
                names.insert(format!("{prefix}.{name}")),
                "duplicate parameter {prefix}.{name} across optimizer groups"
            );
        }
    }
}

#[test]
fn seeded_runs_are_identical() {
    let ds = tiny_dataset(10);
    let config = tiny_config(6);
    let run = || -> Vec<LossRecord> {
        let mut records = Vec::new();
        let mut opts = TrainOptions {
            on_record: Some(Box::new(|r: &LossRecord| records.push(*r))),
            ..TrainOptions::default()
        };
        train_loop(&ds, &config, &mut opts).unwrap();
        drop(opts);
        records
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.iter, y.iter);
        assert_eq!(x.losses, y.losses, "loss records diverged at iter {}", x.iter);
    }
}

#[test]
fn records_are_monotone_and_complete() {
    let ds = tiny_dataset(8);
    let config = tiny_config(5);
    let mut iters = Vec::new();
    let mut opts = TrainOptions {
        on_record: Some(Box::new(|r: &LossRecord| {
            assert!(r.losses.is_finite());
            iters.push(r.iter);
        })),
        ..TrainOptions::default()
    };
    train_loop(&ds, &config, &mut opts).unwrap();
    drop(opts);
    assert_eq!(iters, vec![1, 2, 3, 4, 5]);
}

#[test]
fn zero_weights_freeze_style_encoder_and_zero_terms() {
    let ds = tiny_dataset(8);
    let mut config = tiny_config(2);
    config.weights = LossWeights {
        lambda_kl: 0.0,
        lambda_rec: 0.0,
        lambda_reg: 0.0,
    };
    let mut state = TrainState::new(config.clone(), ds.dict().clone()).unwrap();
    let es_before: Vec<Vec<f32>> = (0..state.nets.style_encoder.params.len())
        .map(|i| state.nets.style_encoder.params.value(i).iter().copied().collect())
        .collect();
    let mut rng = state.rng.clone();
    for _ in 0..2 {
        let batch = make_batch(&ds, &[0, 1], &config, &AugmentPolicy::off(), &mut rng).unwrap();
        let losses = train_step(&mut state, &batch).unwrap();
        // Weighted terms are identically zero; the generator total reduces
        // to the adversarial terms.
        assert_eq!(losses.kl, 0.0);
        assert_eq!(losses.rec, 0.0);
        assert_eq!(losses.latent_reg_s, 0.0);
        assert_eq!(losses.latent_reg_c, 0.0);
        let adv = losses.content_adv + losses.image_adv;
        assert!((losses.gen_total - adv).abs() < 1e-9);
    }
    // With every weighted path off, the style encoder receives no gradient.
    for (i, before) in es_before.iter().enumerate() {
        let after: Vec<f32> = state.nets.style_encoder.params.value(i).iter().copied().collect();
        assert_eq!(&after, before, "style encoder moved under zero weights");
    }
}

#[test]
fn max_iters_zero_returns_initial_state() {
    let ds = tiny_dataset(4);
    let config = tiny_config(0);
    let fresh = TrainState::new(config.clone(), ds.dict().clone()).unwrap();
    let trained = train_loop(&ds, &config, &mut TrainOptions::default()).unwrap();
    assert_eq!(trained.iteration, 0);
    for ((n, a), (_, b)) in all_param_values(&fresh)
        .iter()
        .zip(all_param_values(&trained).iter())
    {
        assert_eq!(a, b, "{n} changed without any iterations");
    }
}

#[test]
fn callback_cadence() {
    let ds = tiny_dataset(8);
    let config = tiny_config(5);
    let mut hits = Vec::new();
    let mut opts = TrainOptions {
        callback_every: 2,
        callback: Some(Box::new(|s: &TrainState| {
            hits.push(s.iteration);
            Ok(())
        })),
        ..TrainOptions::default()
    };
    train_loop(&ds, &config, &mut opts).unwrap();
    drop(opts);
    assert_eq!(hits, vec![2, 4]);
}

#[test]
fn empty_dataset_is_config_error() {
    let ds = mmit_core::data::MemoryDataset {
        samples: vec![],
        dict: mmit_core::data::synth::synth_dict(),
    };
    let err = train_loop(&ds, &tiny_config(1), &mut TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ds = tiny_dataset(8);
    let config = tiny_config(3);
    let state = train_loop(&ds, &config, &mut TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    assert_eq!(loaded.iteration, state.iteration);
    assert_eq!(loaded.config, state.config);
    for ((n, a), (_, b)) in all_param_values(&state)
        .iter()
        .zip(all_param_values(&loaded).iter())
    {
        assert!(
            a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{n} not bitwise identical after round trip"
        );
    }

    // Forward outputs are bitwise identical.
    let sample = ds.get(0).unwrap();
    let c1 = state.nets.content_encode(&sample.image).unwrap();
    let c2 = loaded.nets.content_encode(&sample.image).unwrap();
    let style = StyleCode::new(vec![0.3; state.config.n_s]).unwrap();
    let dom = DomainLabel::one_hot(1, 2).unwrap();
    let g1 = state.nets.generate(&c1, &style, &dom).unwrap();
    let g2 = loaded.nets.generate(&c2, &style, &dom).unwrap();
    assert!(g1
        .iter()
        .zip(g2.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));

    // Resuming continues the iteration numbering deterministically.
    let mut resumed = loaded;
    resumed.config.max_iters = 5;
    train_loop_from(&mut resumed, &ds, &mut TrainOptions::default()).unwrap();
    assert_eq!(resumed.iteration, 5);
}

#[test]
fn truncated_checkpoint_is_integrity_error() {
    let ds = tiny_dataset(4);
    let config = tiny_config(1);
    let state = train_loop(&ds, &config, &mut TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 257]).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn config_conflict_on_structural_mismatch() {
    let loaded = tiny_config(1);
    let mut requested = loaded.clone();
    requested.image_size = 64;
    let err = ensure_compatible(&loaded, &requested).unwrap_err();
    assert!(matches!(err, Error::ConfigConflict(_)));
    assert!(err.to_string().contains("image_size"), "{err}");
}

#[test]
fn resume_after_checkpoint_matches_uninterrupted_run() {
    let ds = tiny_dataset(8);
    let full_config = tiny_config(4);
    let mut records_full = Vec::new();
    let mut opts = TrainOptions {
        on_record: Some(Box::new(|r: &LossRecord| records_full.push(r.losses))),
        ..TrainOptions::default()
    };
    train_loop(&ds, &full_config, &mut opts).unwrap();
    drop(opts);

    let half_config = tiny_config(2);
    let state = train_loop(&ds, &half_config, &mut TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    resumed.config.max_iters = 4;
    let mut records_resumed = Vec::new();
    let mut opts = TrainOptions {
        on_record: Some(Box::new(|r: &LossRecord| records_resumed.push(r.losses))),
        ..TrainOptions::default()
    };
    train_loop_from(&mut resumed, &ds, &mut opts).unwrap();
    drop(opts);

    assert_eq!(records_resumed.len(), 2);
    assert_eq!(records_full[2], records_resumed[0]);
    assert_eq!(records_full[3], records_resumed[1]);
}
