//! The full training objective: `L = λ_reg·L_reg + L_task + λ_rec·L_rec + λ_gan·L_gan`.
//!
//! One call builds a fresh tape for one phase. In the generator phase the
//! encoders, task head and generator are trainable and the critics enter as
//! constants; in the critic phase it is the other way around.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fdiv;
use crate::models::{one_hot_tags, VdnModel};
use crate::nn::{Bindings, Group};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_rec: f64,
    pub lambda_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_reg: 0.1,
            lambda_rec: 1.0,
            lambda_gan: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_rec", self.lambda_rec),
            ("lambda_gan", self.lambda_gan),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Contract(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Critic,
}

impl Phase {
    /// Whether parameters of `g` receive gradient in this phase.
    pub fn trains(self, g: Group) -> bool {
        match self {
            Phase::Generator => !g.is_critic() && g != Group::Perceptual,
            Phase::Critic => g.is_critic(),
        }
    }
}

/// Switches for the terms of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    /// Also classify translated samples, labelled by their content source.
    pub augment: bool,
    /// Treat translated samples as constants inside the task loss.
    pub detach_augmented: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            weights: LossWeights::default(),
            augment: true,
            detach_augmented: false,
        }
    }
}

/// A minibatch plus all the randomness one objective evaluation consumes.
#[derive(Clone, Debug)]
pub struct StepInputs {
    /// `[batch, input_dim]`.
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    /// Row `i` of the shuffled style batch is style code `perm[i]`.
    pub perm: Vec<usize>,
    /// Standard-normal draws `[batch, zc_dim]` (real inputs of the dual critic).
    pub prior: Tensor,
    /// Domain tags paired with the prior draws.
    pub prior_domains: Vec<usize>,
    /// Reparameterization noise `[batch, zc_dim]`; ignored by deterministic encoders.
    pub noise: Option<Tensor>,
}

impl StepInputs {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    fn validate(&self, model: &VdnModel) -> Result<()> {
        let b = self.labels.len();
        let c = &model.config;
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if self.x.shape() != [b, c.input_dim] {
            return Err(Error::Contract(format!(
                "batch of {b} labels but inputs of shape {:?}",
                self.x.shape()
            )));
        }
        if self.domains.len() != b {
            return Err(Error::Contract(format!(
                "missing domain labels: {} for a batch of {b}",
                self.domains.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= c.classes) {
            return Err(Error::Contract(format!("label {y} outside [0, {})", c.classes)));
        }
        if let Some(&d) = self.domains.iter().chain(&self.prior_domains).find(|&&d| d >= c.domains) {
            return Err(Error::Contract(format!("domain {d} outside [0, {})", c.domains)));
        }
        let mut seen = vec![false; b];
        for &p in &self.perm {
            if p >= b || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Contract("style shuffle is not a permutation".into()));
            }
        }
        if self.perm.len() != b {
            return Err(Error::Contract("style shuffle is not a permutation".into()));
        }
        if self.prior.shape() != [b, c.zc_dim] || self.prior_domains.len() != b {
            return Err(Error::Contract("prior draws must match the batch size".into()));
        }
        if let Some(n) = &self.noise {
            if n.shape() != [b, c.zc_dim] {
                return Err(Error::Contract(format!("noise shape {:?}", n.shape())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub phase: Phase,
    pub l_task: f64,
    pub l_reg: f64,
    pub l_rec: f64,
    /// Generator term in the generator phase, critic term in the critic phase.
    pub l_gan: f64,
    pub total: f64,
    /// L2 norm of the gradient on each trainable group.
    pub grad_norms: Vec<(Group, f64)>,
}

impl LossReport {
    /// The total rebuilt from the parts.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        match self.phase {
            Phase::Generator => {
                self.l_task + w.lambda_reg * self.l_reg + w.lambda_rec * self.l_rec + w.lambda_gan * self.l_gan
            }
            Phase::Critic => -(w.lambda_reg * self.l_reg + w.lambda_gan * self.l_gan),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_task, self.l_reg, self.l_rec, self.l_gan, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Report plus the parameter gradients of one evaluation, indexed like the
/// model's parameter store.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: LossReport,
    pub grads: Vec<Option<Vec<f64>>>,
}

/// Cross-entropy of the task head on `zc`, plus on `aug` (a second batch of
/// content codes with the same labels) when given.
pub fn l_task(
    tape: &mut Tape,
    model: &VdnModel,
    bind: &Bindings,
    zc: Var,
    labels: &[usize],
    aug: Option<Var>,
) -> Result<Var> {
    let logits = model.classify(tape, bind, zc)?;
    let real = tape.softmax_cross_entropy(logits, labels)?;
    match aug {
        None => Ok(real),
        Some(z) => {
            let logits = model.classify(tape, bind, z)?;
            let gen = tape.softmax_cross_entropy(logits, labels)?;
            tape.add(real, gen)
        }
    }
}

/// Batch mean of `||E_p(x) - E_p(x_rec)||_1`.
pub fn l_rec(tape: &mut Tape, model: &VdnModel, bind: &Bindings, x: Var, x_rec: Var) -> Result<Var> {
    let a = model.perceive(tape, bind, x)?;
    let b = model.perceive(tape, bind, x_rec)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    let per = tape.sum_axis(d, 1)?;
    Ok(tape.mean(per))
}

/// `(generator_term, critic_term)` of the image critic game. Real rows are
/// scored under their own domain, fakes under the domain of their style.
pub fn l_gan(
    tape: &mut Tape,
    model: &VdnModel,
    bind: &Bindings,
    x: Var,
    domains: &[usize],
    x_fake: Var,
    fake_domains: &[usize],
) -> Result<(Var, Var)> {
    let real = model.image_critic(tape, bind, x, domains)?;
    let fake = model.image_critic(tape, bind, x_fake, fake_domains)?;
    let er = tape.mean(real);
    let ef = tape.mean(fake);
    let critic = tape.sub(er, ef)?;
    Ok((tape.neg(ef), critic))
}

fn permutation_matrix(perm: &[usize]) -> Tensor {
    let b = perm.len();
    let mut t = Tensor::zeros(&[b, b]);
    for (i, &p) in perm.iter().enumerate() {
        t.data_mut()[i * b + p] = 1.0;
    }
    t
}

fn detach(tape: &mut Tape, v: Var) -> Var {
    let t = tape.value(v).clone();
    tape.constant(t)
}

/// Evaluates the phase objective on one batch and backpropagates it.
pub fn total_loss(
    model: &VdnModel,
    inputs: &StepInputs,
    opts: &ObjectiveOptions,
    phase: Phase,
) -> Result<Evaluation> {
    opts.weights.validate()?;
    inputs.validate(model)?;
    let w = opts.weights;
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape, |g| phase.trains(g));
    let t = &mut tape;

    let x = t.constant(inputs.x.clone());
    let enc = model.encode(t, &bind, x)?;
    let zc = model.content_code(t, &enc, inputs.noise.as_ref())?;

    let tags = t.constant(one_hot_tags(&inputs.domains, model.config.domains)?);
    let prior = t.constant(inputs.prior.clone());
    let prior_tags = t.constant(one_hot_tags(&inputs.prior_domains, model.config.domains)?);
    let reg = fdiv::l_reg(t, model.dual_critic(), &bind, zc, tags, prior, prior_tags)?;

    // translated samples: content of row i, style of row perm[i]
    let posterior = match enc.z_d {
        Some(zd) => {
            let p = t.constant(permutation_matrix(&inputs.perm));
            let zd_shuf = t.matmul(p, zd)?;
            let x_fake = model.generate(t, &bind, zc, zd_shuf)?;
            let fake_domains: Vec<usize> = inputs.perm.iter().map(|&j| inputs.domains[j]).collect();
            let (gen_term, critic_term) = l_gan(t, model, &bind, x, &inputs.domains, x_fake, &fake_domains)?;
            Some((zd, x_fake, gen_term, critic_term))
        }
        None => None,
    };

    let zero = t.scalar(0.0);
    let (total, task, rec, gan) = match phase {
        Phase::Generator => {
            let aug = match (&posterior, opts.augment) {
                (Some((_, x_fake, ..)), true) => {
                    let xf = if opts.detach_augmented { detach(t, *x_fake) } else { *x_fake };
                    let e = model.encode(t, &bind, xf)?;
                    Some(model.content_code(t, &e, inputs.noise.as_ref())?)
                }
                _ => None,
            };
            let task = l_task(t, model, &bind, zc, &inputs.labels, aug)?;
            let (rec, gan) = match posterior {
                Some((zd, _, gen_term, _)) => {
                    let x_rec = model.generate(t, &bind, enc.mu, zd)?;
                    (l_rec(t, model, &bind, x, x_rec)?, gen_term)
                }
                None => (zero, zero),
            };
            let a = t.scale(reg, w.lambda_reg);
            let b = t.scale(rec, w.lambda_rec);
            let c = t.scale(gan, w.lambda_gan);
            let s = t.add(task, a)?;
            let s = t.add(s, b)?;
            (t.add(s, c)?, task, rec, gan)
        }
        Phase::Critic => {
            let gan = posterior.map_or(zero, |p| p.3);
            let a = t.scale(reg, w.lambda_reg);
            let c = t.scale(gan, w.lambda_gan);
            let s = t.add(a, c)?;
            (t.neg(s), zero, zero, gan)
        }
    };

    tape.backward(total)?;
    let grads = model.params.grads(&tape, &bind);
    let mut norms: Vec<(Group, f64)> = Group::ALL
        .iter()
        .filter(|g| phase.trains(**g))
        .map(|g| (*g, 0.0))
        .collect();
    for (p, g) in model.params.params().iter().zip(&grads) {
        if let (Some(g), Some(slot)) = (g, norms.iter_mut().find(|(k, _)| *k == p.group)) {
            slot.1 += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    norms.iter_mut().for_each(|(_, n)| *n = n.sqrt());

    let report = LossReport {
        phase,
        l_task: tape.item(task)?,
        l_reg: tape.item(reg)?,
        l_rec: tape.item(rec)?,
        l_gan: tape.item(gan)?,
        total: tape.item(total)?,
        grad_norms: norms,
    };
    Ok(Evaluation { report, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ImageShape, ModelConfig, Perceptual};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn small_model(seed: u64) -> VdnModel {
        VdnModel::new(ModelConfig {
            input_dim: 12,
            image: Some(ImageShape {
                height: 2,
                width: 2,
                channels: 3,
            }),
            zc_dim: 3,
            zd_dim: 2,
            hidden: 6,
            critic_hidden: 5,
            classes: 4,
            domains: 2,
            perceptual: Perceptual::Random { width: 4 },
            init_seed: seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    fn inputs(seed: u64) -> StepInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StepInputs {
            x: normal(&mut rng, &[4, 12]),
            labels: vec![0, 1, 2, 3],
            domains: vec![0, 0, 1, 1],
            perm: vec![2, 3, 0, 1],
            prior: normal(&mut rng, &[4, 3]),
            prior_domains: vec![1, 0, 1, 0],
            noise: None,
        }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 4]));
        let l = tape.softmax_cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((tape.item(l).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn phase_isolation() {
        let m = small_model(1);
        let inp = inputs(2);
        for phase in [Phase::Generator, Phase::Critic] {
            let ev = total_loss(&m, &inp, &ObjectiveOptions::default(), phase).unwrap();
            for (p, g) in m.params.params().iter().zip(&ev.grads) {
                if !phase.trains(p.group) {
                    assert!(g.is_none(), "{phase:?} touched {}", p.name);
                }
            }
            assert!(ev.grads.iter().any(Option::is_some));
        }
    }

    #[test]
    fn total_recomposes_from_parts() {
        let m = small_model(3);
        let opts = ObjectiveOptions {
            weights: LossWeights {
                lambda_reg: 0.37,
                lambda_rec: 1.9,
                lambda_gan: 0.6,
            },
            ..Default::default()
        };
        for phase in [Phase::Generator, Phase::Critic] {
            let r = total_loss(&m, &inputs(4), &opts, phase).unwrap().report;
            assert!(r.is_finite());
            assert!((r.total - r.recompose(&opts.weights)).abs() <= 1e-12 * (1.0 + r.total.abs()));
            assert!(r.l_rec >= 0.0);
        }
    }

    #[test]
    fn zero_adversarial_weights_zero_critic_loss() {
        let m = small_model(5);
        let opts = ObjectiveOptions {
            weights: LossWeights {
                lambda_reg: 0.0,
                lambda_rec: 1.0,
                lambda_gan: 0.0,
            },
            ..Default::default()
        };
        let ev = total_loss(&m, &inputs(6), &opts, Phase::Critic).unwrap();
        assert_eq!(ev.report.total, 0.0);
        assert!(ev.grads.iter().flatten().all(|g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn augmentation_off_is_real_only_term() {
        let m = small_model(7);
        let inp = inputs(8);
        let off = ObjectiveOptions {
            augment: false,
            ..Default::default()
        };
        let r = total_loss(&m, &inp, &off, Phase::Generator).unwrap().report;
        let mut tape = Tape::new();
        let bind = m.params.bind(&mut tape, |_| false);
        let x = tape.constant(inp.x.clone());
        let (mu, _) = m.encode_content(&mut tape, &bind, x).unwrap();
        let l = l_task(&mut tape, &m, &bind, mu, &inp.labels, None).unwrap();
        assert_eq!(r.l_task, tape.item(l).unwrap());
        let on = total_loss(&m, &inp, &ObjectiveOptions::default(), Phase::Generator).unwrap();
        assert!(on.report.l_task > r.l_task);
    }

    #[test]
    fn detached_augmentation_changes_gradient_not_value() {
        let m = small_model(9);
        let inp = inputs(10);
        let det = ObjectiveOptions {
            detach_augmented: true,
            ..Default::default()
        };
        let a = total_loss(&m, &inp, &ObjectiveOptions::default(), Phase::Generator).unwrap();
        let b = total_loss(&m, &inp, &det, Phase::Generator).unwrap();
        assert_eq!(a.report.total, b.report.total);
        assert_ne!(a.grads, b.grads);
    }

    #[test]
    fn constant_image_critic_gives_zero_critic_term() {
        let mut m = small_model(11);
        let ids: Vec<_> = m
            .params
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group == Group::ImageCritic)
            .map(|(i, _)| i)
            .collect();
        for (i, p) in m.params.iter_mut().enumerate() {
            if ids.contains(&i) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
                if p.name.ends_with("fc2.bias") {
                    p.value.data_mut().iter_mut().for_each(|v| *v = 1.5);
                }
            }
        }
        let opts = ObjectiveOptions {
            weights: LossWeights {
                lambda_reg: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = total_loss(&m, &inputs(12), &opts, Phase::Critic).unwrap().report;
        assert_eq!(r.l_gan, 0.0);
    }

    #[test]
    fn bad_inputs_are_contract_errors() {
        let m = small_model(13);
        let opts = ObjectiveOptions::default();
        let mut i = inputs(14);
        i.labels[0] = 4;
        assert!(matches!(total_loss(&m, &i, &opts, Phase::Generator), Err(Error::Contract(_))));
        let mut i = inputs(14);
        i.domains.pop();
        assert!(matches!(total_loss(&m, &i, &opts, Phase::Generator), Err(Error::Contract(_))));
        let mut i = inputs(14);
        i.perm = vec![0, 0, 1, 2];
        assert!(total_loss(&m, &i, &opts, Phase::Generator).is_err());
        let bad = ObjectiveOptions {
            weights: LossWeights {
                lambda_reg: -1.0,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(total_loss(&m, &inputs(14), &bad, Phase::Generator).is_err());
    }

    #[test]
    fn identity_perceptual_reduces_to_pixel_l1() {
        let m = VdnModel::new(ModelConfig {
            perceptual: Perceptual::Identity,
            ..small_model(0).config
        })
        .unwrap();
        let mut tape = Tape::new();
        let bind = m.params.bind(&mut tape, |_| false);
        let a = tape.constant(Tensor::matrix(2, 12, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 12]));
        let l = l_rec(&mut tape, &m, &bind, a, b).unwrap();
        let expect = (0..24).map(|i| i as f64 * 0.1).sum::<f64>() / 2.0;
        assert!((tape.item(l).unwrap() - expect).abs() < 1e-12);
        let z = l_rec(&mut tape, &m, &bind, a, a).unwrap();
        assert_eq!(tape.item(z).unwrap(), 0.0);
    }
}
