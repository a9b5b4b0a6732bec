//! The two reproducible experiments: the XOR toy pair (with and without
//! the information-gain regularizer) and leave-one-domain-out on the
//! synthetic multi-domain benchmark.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::{ModelConfig, VdnModel};
use crate::objective::{LossWeights, ObjectiveOptions};
use crate::synth::{gen_multidomain, gen_xor, lodo_split, DomainSpec};
use crate::trainer::{fit, toy_train_config, TrainConfig, TrainError, TrainLog};

pub const TOY_TRAIN: usize = 1000;
pub const TOY_TEST: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyRun {
    pub test_accuracy: f64,
    /// Mean closed-form `D(Q(z_c|x) || N(0, I))` over training inputs at
    /// the end of training.
    pub posterior_kl: f64,
}

/// Trains one XOR toy model and returns it with its log; the test split
/// is evaluated as `"test"` after every epoch. Data, initialization and
/// training all derive from `seed`, so the two configurations of a seed see
/// the same data and init.
pub fn fit_toy_xor(with_reg: bool, seed: u64) -> Result<(VdnModel, TrainLog), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = gen_xor(TOY_TRAIN, &mut rng)?;
    let test = gen_xor(TOY_TEST, &mut rng)?;
    let mut model = VdnModel::new(ModelConfig {
        init_seed: seed,
        ..ModelConfig::toy()
    })?;
    let log = fit(&mut model, &train, &[("test", &test)], &toy_train_config(with_reg, seed), false)?;
    Ok((model, log))
}

pub fn run_toy_xor(with_reg: bool, seed: u64) -> Result<ToyRun, TrainError> {
    let (_, log) = fit_toy_xor(with_reg, seed)?;
    Ok(ToyRun::from_log(&log))
}

impl ToyRun {
    pub fn from_log(log: &TrainLog) -> Self {
        ToyRun {
            test_accuracy: log.last_eval("test").map_or(f64::NAN, |a| a.overall()),
            posterior_kl: log.epochs.last().and_then(|e| e.posterior_kl).unwrap_or(f64::NAN),
        }
    }
}

/// Ablation variants, from the task-loss baseline to the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Erm,
    InfoGain,
    Posterior,
    Both,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Erm, Variant::InfoGain, Variant::Posterior, Variant::Both, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Erm => "erm",
            Variant::InfoGain => "info-gain",
            Variant::Posterior => "posterior",
            Variant::Both => "both",
            Variant::Full => "full",
        }
    }

    pub fn objective(self) -> ObjectiveOptions {
        let reg = matches!(self, Variant::InfoGain | Variant::Both | Variant::Full);
        let post = matches!(self, Variant::Posterior | Variant::Both | Variant::Full);
        let d = LossWeights::default();
        ObjectiveOptions {
            weights: LossWeights {
                lambda_reg: if reg { d.lambda_reg } else { 0.0 },
                lambda_rec: if post { d.lambda_rec } else { 0.0 },
                lambda_gan: if post { d.lambda_gan } else { 0.0 },
            },
            augment: self == Variant::Full,
            detach_augmented: false,
        }
    }
}

/// Benchmark size and training budget for the domain-generalization suite.
#[derive(Clone, Debug, PartialEq)]
pub struct DgSettings {
    pub domains: usize,
    pub classes: usize,
    pub n_per_domain: usize,
    pub epochs: usize,
    pub lr: f64,
    pub critic_weight_clip: Option<f64>,
}

impl Default for DgSettings {
    fn default() -> Self {
        DgSettings {
            domains: 4,
            classes: 4,
            n_per_domain: 60,
            epochs: 100,
            lr: 5e-4,
            critic_weight_clip: Some(0.01),
        }
    }
}

impl DgSettings {
    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            gen_lr: self.lr,
            critic_lr: self.lr,
            seed,
            objective: variant.objective(),
            critic_weight_clip: self.critic_weight_clip,
            ..TrainConfig::default()
        }
    }
}

/// Data seed of benchmark replicate `seed`.
pub fn dg_data_seed(seed: u64) -> u64 {
    1000 + seed
}

/// Target-domain accuracy of `variant` trained on all domains but `holdout`.
pub fn run_dg(variant: Variant, seed: u64, holdout: usize, s: &DgSettings) -> Result<f64, TrainError> {
    let spec = DomainSpec::new(s.domains, s.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dg_data_seed(seed));
    let data = gen_multidomain(&spec, s.n_per_domain, &mut rng)?.data;
    let (train, test) = lodo_split(&data, holdout)?;
    let mut model = VdnModel::new(ModelConfig {
        input_dim: data.dim,
        image: data.image,
        classes: s.classes,
        domains: s.domains,
        init_seed: seed,
        ..ModelConfig::default()
    })?;
    let log = fit(&mut model, &train, &[("target", &test)], &s.train_config(variant, seed), false)?;
    Ok(log.last_eval("target").map_or(f64::NAN, |a| a.overall()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_are_nested() {
        let w = |v: Variant| v.objective().weights;
        assert_eq!(w(Variant::Erm), LossWeights { lambda_reg: 0.0, lambda_rec: 0.0, lambda_gan: 0.0 });
        assert_eq!(w(Variant::Both), LossWeights::default());
        assert_eq!(w(Variant::Full), w(Variant::Both));
        assert!(Variant::Full.objective().augment && !Variant::Both.objective().augment);
        assert_eq!(w(Variant::InfoGain).lambda_rec, 0.0);
        assert_eq!(w(Variant::Posterior).lambda_reg, 0.0);
    }

    #[test]
    fn tiny_dg_run_is_deterministic() {
        let s = DgSettings {
            n_per_domain: 8,
            epochs: 1,
            ..DgSettings::default()
        };
        let a = run_dg(Variant::Full, 0, 1, &s).unwrap();
        assert_eq!(a, run_dg(Variant::Full, 0, 1, &s).unwrap());
        assert!((0.0..=1.0).contains(&a));
    }
}
