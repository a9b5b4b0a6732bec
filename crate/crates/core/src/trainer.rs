//! Alternating training: a generator-phase update every step and a
//! critic-phase update once every `critic_update_every` steps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::distributions::{kl_gaussians, DiagGaussian};
use crate::error::{Error, Result};
use crate::kv::{KvError, KvMap};
use crate::models::VdnModel;
use crate::nn::Group;
use crate::objective::{total_loss, LossReport, LossWeights, ObjectiveOptions, Phase, StepInputs};
use crate::synth::Dataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// RMSprop without momentum.
    RmsProp { rho: f64, eps: f64 },
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` at every multiple of `every` epochs.
    Step { every: usize, gamma: f64 },
    /// Cosine annealing from the base rate to 0 over the run.
    Cosine,
}

impl Schedule {
    /// Learning rate of (0-based) `epoch` in a run of `epochs` epochs.
    pub fn lr(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Step { every, gamma } => base * gamma.powi((epoch / every.max(1)) as i32),
            Schedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gen_lr: f64,
    pub critic_lr: f64,
    pub critic_update_every: usize,
    pub gen_optimizer: Optimizer,
    pub critic_optimizer: Optimizer,
    pub schedule: Schedule,
    pub seed: u64,
    pub objective: ObjectiveOptions,
    /// Global-norm gradient clip per phase; off when `None`.
    pub grad_clip: Option<f64>,
    /// Clamp on image-critic weights after each critic update; off when `None`.
    pub critic_weight_clip: Option<f64>,
    /// Track the closed-form KL of the content posterior from the prior.
    pub track_kl: bool,
}

pub const RMSPROP: Optimizer = Optimizer::RmsProp { rho: 0.99, eps: 1e-8 };

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            gen_lr: 5e-5,
            critic_lr: 5e-5,
            critic_update_every: 5,
            gen_optimizer: RMSPROP,
            critic_optimizer: RMSPROP,
            schedule: Schedule::Constant,
            seed: 0,
            objective: ObjectiveOptions::default(),
            grad_clip: None,
            critic_weight_clip: None,
            track_kl: false,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "gen_lr",
    "critic_lr",
    "critic_update_every",
    "optimizer",
    "critic_optimizer",
    "rmsprop_rho",
    "rmsprop_eps",
    "schedule",
    "step_every",
    "step_gamma",
    "seed",
    "lambda_reg",
    "lambda_rec",
    "lambda_gan",
    "augment",
    "detach_augmented",
    "grad_clip",
    "critic_weight_clip",
    "track_kl",
];

fn opt_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::RmsProp { .. } => "rmsprop",
        Optimizer::Sgd => "sgd",
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.critic_update_every == 0 {
            return Err(Error::Contract("critic_update_every must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        if !(self.gen_lr >= 0.0 && self.critic_lr >= 0.0) {
            return Err(Error::Contract("learning rates must be >= 0".into()));
        }
        if let Schedule::Step { every: 0, .. } = self.schedule {
            return Err(Error::Contract("step schedule needs step_every >= 1".into()));
        }
        self.objective.weights.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.insert("epochs", self.epochs);
        m.insert("batch_size", self.batch_size);
        m.insert("gen_lr", self.gen_lr);
        m.insert("critic_lr", self.critic_lr);
        m.insert("critic_update_every", self.critic_update_every);
        m.insert("optimizer", opt_name(self.gen_optimizer));
        m.insert("critic_optimizer", opt_name(self.critic_optimizer));
        let (rho, eps) = match (self.gen_optimizer, self.critic_optimizer) {
            (Optimizer::RmsProp { rho, eps }, _) | (_, Optimizer::RmsProp { rho, eps }) => (rho, eps),
            _ => (0.99, 1e-8),
        };
        m.insert("rmsprop_rho", rho);
        m.insert("rmsprop_eps", eps);
        let (name, every, gamma) = match self.schedule {
            Schedule::Constant => ("constant", 50, 0.1),
            Schedule::Step { every, gamma } => ("step", every, gamma),
            Schedule::Cosine => ("cosine", 50, 0.1),
        };
        m.insert("schedule", name);
        m.insert("step_every", every);
        m.insert("step_gamma", gamma);
        m.insert("seed", self.seed);
        m.insert("lambda_reg", self.objective.weights.lambda_reg);
        m.insert("lambda_rec", self.objective.weights.lambda_rec);
        m.insert("lambda_gan", self.objective.weights.lambda_gan);
        m.insert("augment", self.objective.augment);
        m.insert("detach_augmented", self.objective.detach_augmented);
        m.insert("grad_clip", self.grad_clip.unwrap_or(0.0));
        m.insert("critic_weight_clip", self.critic_weight_clip.unwrap_or(0.0));
        m.insert("track_kl", self.track_kl);
        m
    }

    /// Reads the training keys of `m` over `base`; other keys are ignored.
    pub fn from_kv(m: &KvMap, base: &TrainConfig) -> std::result::Result<Self, KvError> {
        let mut c = base.clone();
        m.set("epochs", &mut c.epochs)?;
        m.set("batch_size", &mut c.batch_size)?;
        m.set("gen_lr", &mut c.gen_lr)?;
        m.set("critic_lr", &mut c.critic_lr)?;
        m.set("critic_update_every", &mut c.critic_update_every)?;
        m.set("seed", &mut c.seed)?;
        let w = &mut c.objective.weights;
        m.set("lambda_reg", &mut w.lambda_reg)?;
        m.set("lambda_rec", &mut w.lambda_rec)?;
        m.set("lambda_gan", &mut w.lambda_gan)?;
        m.set("augment", &mut c.objective.augment)?;
        m.set("detach_augmented", &mut c.objective.detach_augmented)?;
        m.set("track_kl", &mut c.track_kl)?;

        let (mut rho, mut eps) = (0.99, 1e-8);
        m.set("rmsprop_rho", &mut rho)?;
        m.set("rmsprop_eps", &mut eps)?;
        let parse_opt = |key: &str, cur: Optimizer| -> std::result::Result<Optimizer, KvError> {
            let cur = match cur {
                Optimizer::RmsProp { .. } => Optimizer::RmsProp { rho, eps },
                Optimizer::Sgd => Optimizer::Sgd,
            };
            match m.get_str(key) {
                None => Ok(cur),
                Some("rmsprop") => Ok(Optimizer::RmsProp { rho, eps }),
                Some("sgd") => Ok(Optimizer::Sgd),
                Some(v) => Err(KvError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    reason: "expected `rmsprop` or `sgd`".into(),
                }),
            }
        };
        c.gen_optimizer = parse_opt("optimizer", c.gen_optimizer)?;
        c.critic_optimizer = parse_opt("critic_optimizer", c.critic_optimizer)?;

        let (mut every, mut gamma) = match c.schedule {
            Schedule::Step { every, gamma } => (every, gamma),
            _ => (50, 0.1),
        };
        m.set("step_every", &mut every)?;
        m.set("step_gamma", &mut gamma)?;
        c.schedule = match m.get_str("schedule") {
            None => match c.schedule {
                Schedule::Step { .. } => Schedule::Step { every, gamma },
                s => s,
            },
            Some("constant") => Schedule::Constant,
            Some("step") => Schedule::Step { every, gamma },
            Some("cosine") => Schedule::Cosine,
            Some(v) => {
                return Err(KvError::BadValue {
                    key: "schedule".into(),
                    value: v.into(),
                    reason: "expected `constant`, `step` or `cosine`".into(),
                })
            }
        };
        let positive = |v: f64| (v > 0.0).then_some(v);
        let mut clip = c.grad_clip.unwrap_or(0.0);
        m.set("grad_clip", &mut clip)?;
        c.grad_clip = positive(clip);
        let mut wclip = c.critic_weight_clip.unwrap_or(0.0);
        m.set("critic_weight_clip", &mut wclip)?;
        c.critic_weight_clip = positive(wclip);
        Ok(c)
    }
}

/// `s <- rho s + (1 - rho) g^2`, `theta <- theta - lr g / (sqrt(s) + eps)`.
pub fn rmsprop_update(theta: &mut [f64], grad: &[f64], state: &mut [f64], lr: f64, rho: f64, eps: f64) {
    assert!(theta.len() == grad.len() && grad.len() == state.len(), "rmsprop shape mismatch");
    for ((t, &g), s) in theta.iter_mut().zip(grad).zip(state.iter_mut()) {
        *s = rho * *s + (1.0 - rho) * g * g;
        *t -= lr * g / (s.sqrt() + eps);
    }
}

pub fn sgd_update(theta: &mut [f64], grad: &[f64], lr: f64) {
    assert_eq!(theta.len(), grad.len(), "sgd shape mismatch");
    for (t, &g) in theta.iter_mut().zip(grad) {
        *t -= lr * g;
    }
}

/// Rows of `z_d` in a uniformly random order, with the permutation:
/// output row `i` is input row `perm[i]`.
pub fn shuffle_styles<R: Rng + ?Sized>(z_d: &Tensor, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    if z_d.rank() != 2 || z_d.shape()[0] == 0 {
        return Err(Error::Contract(format!("shuffle_styles needs a non-empty batch, got {:?}", z_d.shape())));
    }
    let mut perm: Vec<usize> = (0..z_d.shape()[0]).collect();
    perm.shuffle(rng);
    let rows: Vec<&[f64]> = perm.iter().map(|&i| z_d.row(i)).collect();
    Ok((Tensor::from_rows(&rows)?, perm))
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] Error),
    #[error("non-finite loss at step {step}: {report:?}")]
    NonFinite { step: u64, report: Box<LossReport> },
}

/// Optimizer and sampling state that persists across steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub rng: ChaCha8Rng,
    pub step: u64,
    rms: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn new(model: &VdnModel, seed: u64) -> Self {
        TrainState {
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            rms: model.params.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub generator: LossReport,
    pub critic: Option<LossReport>,
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let v: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], v).expect("sized")
}

/// Draws the per-step randomness for a batch: style permutation, prior
/// samples with domain tags from `source_domains`, and encoder noise.
pub fn step_inputs<R: Rng + ?Sized>(
    model: &VdnModel,
    x: Tensor,
    labels: Vec<usize>,
    domains: Vec<usize>,
    source_domains: &[usize],
    rng: &mut R,
) -> Result<StepInputs> {
    let b = labels.len();
    if b == 0 || source_domains.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    let zc = model.config.zc_dim;
    let prior = normal_tensor(rng, b, zc);
    let prior_domains = (0..b).map(|_| source_domains[rng.random_range(0..source_domains.len())]).collect();
    let noise = model.config.reparameterize.then(|| normal_tensor(rng, b, zc));
    Ok(StepInputs {
        x,
        labels,
        domains,
        perm,
        prior,
        prior_domains,
        noise,
    })
}

fn apply_update(
    model: &mut VdnModel,
    state: &mut TrainState,
    grads: &[Option<Vec<f64>>],
    phase: Phase,
    lr: f64,
    opt: Optimizer,
    clip: Option<f64>,
) {
    let scale = match clip {
        Some(c) => {
            let n = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (i, p) in model.params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if !phase.trains(p.group) {
            continue;
        }
        let scaled: Vec<f64>;
        let g = if scale != 1.0 {
            scaled = g.iter().map(|v| v * scale).collect();
            &scaled
        } else {
            g
        };
        match opt {
            Optimizer::RmsProp { rho, eps } => rmsprop_update(p.value.data_mut(), g, &mut state.rms[i], lr, rho, eps),
            Optimizer::Sgd => sgd_update(p.value.data_mut(), g, lr),
        }
    }
}

/// One iteration on `inputs`. `lr_factor` scales both base learning rates.
pub fn train_step(
    model: &mut VdnModel,
    state: &mut TrainState,
    inputs: &StepInputs,
    config: &TrainConfig,
    lr_factor: f64,
) -> std::result::Result<StepReport, TrainError> {
    config.validate()?;
    state.step += 1;
    let step = state.step;
    let gen = total_loss(model, inputs, &config.objective, Phase::Generator)?;
    if !gen.report.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            report: Box::new(gen.report),
        });
    }
    apply_update(
        model,
        state,
        &gen.grads,
        Phase::Generator,
        config.gen_lr * lr_factor,
        config.gen_optimizer,
        config.grad_clip,
    );

    let critic = if step.is_multiple_of(config.critic_update_every as u64) {
        let ev = total_loss(model, inputs, &config.objective, Phase::Critic)?;
        if !ev.report.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                report: Box::new(ev.report),
            });
        }
        apply_update(
            model,
            state,
            &ev.grads,
            Phase::Critic,
            config.critic_lr * lr_factor,
            config.critic_optimizer,
            config.grad_clip,
        );
        if let Some(c) = config.critic_weight_clip {
            for p in model.params.iter_mut().filter(|p| p.group == Group::ImageCritic) {
                p.value.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
            }
        }
        Some(ev.report)
    } else {
        None
    };
    Ok(StepReport {
        generator: gen.report,
        critic,
    })
}

/// Batches for one epoch, drawn round-robin over the domains present so
/// each batch holds near-equal counts per domain. Every domain queue is
/// reshuffled when exhausted; the epoch has `ceil(n / batch_size)` batches.
pub fn epoch_batches<R: Rng + ?Sized>(data: &Dataset, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let domains = data.domains_present();
    if domains.is_empty() || batch_size == 0 {
        return Vec::new();
    }
    let mut pools: Vec<Vec<usize>> = domains
        .iter()
        .map(|&d| (0..data.len()).filter(|&i| data.d[i] == d).collect())
        .collect();
    pools.iter_mut().for_each(|p| p.shuffle(rng));
    let mut cursors = vec![0; pools.len()];
    let batches = data.len().div_ceil(batch_size);
    let mut turn = rng.random_range(0..pools.len());
    let mut out = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut b = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let k = turn % pools.len();
            turn += 1;
            if cursors[k] == pools[k].len() {
                pools[k].shuffle(rng);
                cursors[k] = 0;
            }
            b.push(pools[k][cursors[k]]);
            cursors[k] += 1;
        }
        out.push(b);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    /// `(domain, correct, total)` for each domain present.
    pub per_domain: Vec<(usize, usize, usize)>,
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn overall(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn domain(&self, d: usize) -> Option<f64> {
        self.per_domain
            .iter()
            .find(|r| r.0 == d)
            .map(|&(_, c, t)| c as f64 / t as f64)
    }

    /// Unweighted mean of the per-domain accuracies.
    pub fn domain_mean(&self) -> f64 {
        if self.per_domain.is_empty() {
            return 0.0;
        }
        self.per_domain.iter().map(|&(_, c, t)| c as f64 / t as f64).sum::<f64>() / self.per_domain.len() as f64
    }
}

/// Accuracy of `model.predict`, processed in fixed-size chunks.
pub fn evaluate(model: &VdnModel, data: &Dataset) -> Result<Accuracy> {
    const CHUNK: usize = 256;
    let mut pred = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(CHUNK) {
        let n = CHUNK.min(data.len() - start);
        let x = Tensor::new(vec![n, data.dim], data.x[start * data.dim..(start + n) * data.dim].to_vec())?;
        pred.extend(model.predict(&x)?);
    }
    let mut per = vec![(0usize, 0usize); data.domains];
    for i in 0..data.len() {
        per[data.d[i]].1 += 1;
        if pred[i] == data.y[i] {
            per[data.d[i]].0 += 1;
        }
    }
    let per_domain: Vec<_> = per
        .iter()
        .enumerate()
        .filter(|(_, p)| p.1 > 0)
        .map(|(d, &(c, t))| (d, c, t))
        .collect();
    Ok(Accuracy {
        correct: per_domain.iter().map(|r| r.1).sum(),
        total: data.len(),
        per_domain,
    })
}

/// Mean over `data` of the closed-form KL(Q(z_c|x) || N(0, I)).
pub fn mean_posterior_kl(model: &VdnModel, data: &Dataset) -> Result<f64> {
    let x = Tensor::new(vec![data.len(), data.dim], data.x.clone())?;
    let prior = DiagGaussian::standard(model.config.zc_dim);
    let qs = model.content_posteriors(&x)?;
    let mut s = 0.0;
    for q in &qs {
        s += kl_gaussians(q, &prior)?;
    }
    Ok(s / qs.len().max(1) as f64)
}

/// Epoch means of the loss terms over generator steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossMeans {
    pub l_task: f64,
    pub l_reg: f64,
    pub l_rec: f64,
    pub l_gan: f64,
    pub total: f64,
    pub critic_total: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_factor: f64,
    pub losses: LossMeans,
    pub eval: Vec<(String, Accuracy)>,
    pub posterior_kl: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    /// Training example indices of every batch, when recorded.
    pub batches: Vec<Vec<usize>>,
}

impl TrainLog {
    pub fn last_eval(&self, split: &str) -> Option<&Accuracy> {
        self.epochs.last()?.eval.iter().find(|(s, _)| s == split).map(|(_, a)| a)
    }
}

/// Runs `config.epochs` epochs on `train`, evaluating on each of `evals`
/// (name, data) after every epoch. The model is trained in place; the
/// final-epoch state is what remains.
pub fn fit(
    model: &mut VdnModel,
    train: &Dataset,
    evals: &[(&str, &Dataset)],
    config: &TrainConfig,
    record_batches: bool,
) -> std::result::Result<TrainLog, TrainError> {
    config.validate()?;
    train.validate()?;
    if train.dim != model.config.input_dim || train.classes > model.config.classes {
        return Err(Error::Contract("dataset does not match the model".into()).into());
    }
    let sources = train.domains_present();
    let mut state = TrainState::new(model, config.seed);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let lr_factor = config.schedule.lr(1.0, epoch, config.epochs);
        let batches = epoch_batches(train, config.batch_size, &mut state.rng);
        let mut sums = LossMeans::default();
        let (mut critic_sum, mut critic_n) = (0.0, 0usize);
        for idx in &batches {
            let sub = train.subset(idx);
            let x = Tensor::new(vec![sub.len(), sub.dim], sub.x)?;
            let inputs = step_inputs(model, x, sub.y, sub.d, &sources, &mut state.rng)?;
            let r = train_step(model, &mut state, &inputs, config, lr_factor)?;
            let g = &r.generator;
            sums.l_task += g.l_task;
            sums.l_reg += g.l_reg;
            sums.l_rec += g.l_rec;
            sums.l_gan += g.l_gan;
            sums.total += g.total;
            if let Some(c) = &r.critic {
                critic_sum += c.total;
                critic_n += 1;
            }
        }
        if record_batches {
            log.batches.extend(batches.iter().cloned());
        }
        let n = batches.len().max(1) as f64;
        let losses = LossMeans {
            l_task: sums.l_task / n,
            l_reg: sums.l_reg / n,
            l_rec: sums.l_rec / n,
            l_gan: sums.l_gan / n,
            total: sums.total / n,
            critic_total: (critic_n > 0).then(|| critic_sum / critic_n as f64),
        };
        let mut eval = Vec::with_capacity(evals.len());
        for (name, data) in evals {
            eval.push((name.to_string(), evaluate(model, data)?));
        }
        let posterior_kl = if config.track_kl && model.config.reparameterize {
            Some(mean_posterior_kl(model, train)?)
        } else {
            None
        };
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            lr_factor,
            losses,
            eval,
            posterior_kl,
        });
    }
    log.steps = state.step;
    Ok(log)
}

/// The training configuration used for the XOR toy experiment: plain SGD,
/// critic updated every step.
pub fn toy_train_config(with_reg: bool, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 32,
        gen_lr: 0.5,
        critic_lr: 0.01,
        critic_update_every: 1,
        gen_optimizer: Optimizer::Sgd,
        critic_optimizer: Optimizer::Sgd,
        schedule: Schedule::Constant,
        seed,
        objective: ObjectiveOptions {
            weights: LossWeights {
                lambda_reg: if with_reg { 0.1 } else { 0.0 },
                lambda_rec: 0.0,
                lambda_gan: 0.0,
            },
            augment: false,
            detach_augmented: false,
        },
        grad_clip: None,
        critic_weight_clip: None,
        track_kl: true,
    }
}
