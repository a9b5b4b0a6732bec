use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vdn_core::models::{checkpoint, ImageShape, ModelConfig, Perceptual, VdnModel};
use vdn_core::nn::Group;
use vdn_core::objective::{total_loss, Phase};
use vdn_core::synth::{gen_multidomain, lodo_split, Dataset, DomainSpec};
use vdn_core::trainer::{epoch_batches, fit, step_inputs, train_step, TrainConfig, TrainState};
use vdn_core::Tensor;

fn small_data(seed: u64) -> Dataset {
    let mut spec = DomainSpec::new(3, 2).unwrap();
    spec.image = ImageShape {
        height: 4,
        width: 4,
        channels: 3,
    };
    gen_multidomain(&spec, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().data
}

fn small_model(data: &Dataset, seed: u64) -> VdnModel {
    VdnModel::new(ModelConfig {
        input_dim: data.dim,
        image: data.image,
        zc_dim: 3,
        zd_dim: 2,
        hidden: 8,
        critic_hidden: 6,
        classes: data.classes,
        domains: data.domains,
        perceptual: Perceptual::Random { width: 4 },
        init_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn critic_values(m: &VdnModel) -> Vec<f64> {
    [Group::ImageCritic, Group::DualCritic]
        .iter()
        .flat_map(|g| m.group_values(*g))
        .collect()
}

fn generator_values(m: &VdnModel) -> Vec<f64> {
    Group::ALL
        .iter()
        .filter(|g| !g.is_critic())
        .flat_map(|g| m.group_values(*g))
        .collect()
}

#[test]
fn phases_stay_isolated_while_training() {
    let data = small_data(1);
    let mut m = small_model(&data, 1);
    let cfg = TrainConfig {
        gen_lr: 1e-3,
        critic_lr: 1e-3,
        ..TrainConfig::default()
    };
    let sources = data.domains_present();
    let mut state = TrainState::new(&m, 3);
    for _ in 0..20 {
        let idx = epoch_batches(&data, 6, &mut state.rng).remove(0);
        let sub = data.subset(&idx);
        let x = Tensor::new(vec![sub.len(), sub.dim], sub.x).unwrap();
        let inputs = step_inputs(&m, x, sub.y, sub.d, &sources, &mut state.rng).unwrap();
        for phase in [Phase::Generator, Phase::Critic] {
            let ev = total_loss(&m, &inputs, &cfg.objective, phase).unwrap();
            for (p, g) in m.params.params().iter().zip(&ev.grads) {
                if !phase.trains(p.group) {
                    assert!(g.is_none(), "{phase:?} produced a gradient for {}", p.name);
                }
            }
        }
        let perceptual = m.group_values(Group::Perceptual);
        let critic = critic_values(&m);
        let report = train_step(&mut m, &mut state, &inputs, &cfg, 1.0).unwrap();
        assert_eq!(m.group_values(Group::Perceptual), perceptual);
        if report.critic.is_none() {
            assert_eq!(critic_values(&m), critic);
        }
    }
}

#[test]
fn critic_moves_only_on_cadence() {
    let data = small_data(2);
    let mut m = small_model(&data, 2);
    let cfg = TrainConfig {
        gen_lr: 1e-3,
        critic_lr: 1e-3,
        critic_update_every: 3,
        ..TrainConfig::default()
    };
    let sources = data.domains_present();
    let mut state = TrainState::new(&m, 5);
    for step in 1..=9u64 {
        let idx = epoch_batches(&data, 6, &mut state.rng).remove(0);
        let sub = data.subset(&idx);
        let x = Tensor::new(vec![sub.len(), sub.dim], sub.x).unwrap();
        let inputs = step_inputs(&m, x, sub.y, sub.d, &sources, &mut state.rng).unwrap();
        let before_c = critic_values(&m);
        let before_g = generator_values(&m);
        let r = train_step(&mut m, &mut state, &inputs, &cfg, 1.0).unwrap();
        assert_ne!(generator_values(&m), before_g, "generator must move at step {step}");
        assert_eq!(r.critic.is_some(), step % 3 == 0);
        assert_eq!(critic_values(&m) != before_c, step % 3 == 0, "step {step}");
    }
}

#[test]
fn training_is_reproducible_and_checkpoints_preserve_outputs() {
    let data = small_data(3);
    let (train, test) = lodo_split(&data, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        gen_lr: 1e-3,
        critic_lr: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = small_model(&data, 4);
        let log = fit(&mut m, &train, &[("target", &test)], &cfg, true).unwrap();
        (m, log)
    };
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(m1.flat_params(), m2.flat_params());
    assert!(log1.batches.iter().flatten().all(|&i| train.d[i] != 0));

    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&m1, dir.path()).unwrap();
    let back = checkpoint::load(dir.path(), Some(&m1.config)).unwrap();
    let x = Tensor::new(vec![test.len(), test.dim], test.x.clone()).unwrap();
    assert_eq!(back.predict(&x).unwrap(), m1.predict(&x).unwrap());
    let again = tempfile::tempdir().unwrap();
    checkpoint::save(&back, again.path()).unwrap();
    for f in [checkpoint::MANIFEST_FILE, checkpoint::BLOB_FILE] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap()
        );
    }
}

#[test]
fn checkpoint_rejects_other_config() {
    let data = small_data(4);
    let m = small_model(&data, 0);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&m, dir.path()).unwrap();
    let other = ModelConfig {
        zc_dim: 5,
        ..m.config.clone()
    };
    assert!(matches!(
        checkpoint::load(dir.path(), Some(&other)),
        Err(checkpoint::CheckpointError::ConfigMismatch(_))
    ));
    let blob = dir.path().join(checkpoint::BLOB_FILE);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(
        checkpoint::load(dir.path(), None),
        Err(checkpoint::CheckpointError::Truncated { .. })
    ));
}
