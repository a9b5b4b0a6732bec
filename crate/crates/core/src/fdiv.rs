//! Variational (dual) estimation of KL(Q || P) written as the f-divergence
//! D_f(P || Q) with generator f(u) = -log u.
//!
//! The critic T must stay inside dom f* = (-inf, 0); the network output is
//! passed through `v -> -exp(-v)` to guarantee that.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bindings, Group, Mlp, ParamStore};

/// Pre-activation clamp applied before `-exp(-v)`.
pub const PRE_ACTIVATION_CLAMP: f64 = 30.0;

/// Fenchel conjugate of `f(u) = -log u`: `f*(t) = -1 - log(-t)` for `t < 0`.
pub fn fenchel_conjugate(t: f64) -> Result<f64> {
    if !(t < 0.0) {
        return Err(Error::Domain {
            op: "fenchel_conjugate",
            detail: format!("{t} is outside dom f* = (-inf, 0)"),
        });
    }
    Ok(-1.0 - (-t).ln())
}

/// `g_f(v) = -exp(-v)` on the tape, after clamping `v` to
/// `[-PRE_ACTIVATION_CLAMP, PRE_ACTIVATION_CLAMP]`.
pub fn output_activation(tape: &mut Tape, pre: Var) -> Var {
    let c = tape.clamp(pre, -PRE_ACTIVATION_CLAMP, PRE_ACTIVATION_CLAMP);
    let n = tape.neg(c);
    let e = tape.exp(n);
    tape.neg(e)
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(t) = scores.iter().find(|t| !(**t < 0.0)) {
        return Err(Error::Invariant(format!(
            "critic produced {t}, outside dom f*"
        )));
    }
    Ok(())
}

/// Sample-mean dual value `mean_P[T] - mean_Q[f*(T)]` from critic scores.
pub fn dual_value(scores_p: &[f64], scores_q: &[f64]) -> Result<f64> {
    if scores_p.is_empty() || scores_q.is_empty() {
        return Err(Error::Contract("dual estimate needs samples from both P and Q".into()));
    }
    check_scores(scores_p)?;
    check_scores(scores_q)?;
    let ep = scores_p.iter().sum::<f64>() / scores_p.len() as f64;
    let mut eq = 0.0;
    for &t in scores_q {
        eq += fenchel_conjugate(t)?;
    }
    Ok(ep - eq / scores_q.len() as f64)
}

/// Dual value with exact expectations over a finite support: `p`, `q` are
/// probability vectors and `scores[i]` is T evaluated at support point `i`.
pub fn dual_value_exact(p: &[f64], q: &[f64], scores: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            op: "dual_value_exact",
            lhs: vec![p.len(), q.len()],
            rhs: vec![scores.len()],
        });
    }
    check_scores(scores)?;
    let mut v = 0.0;
    for i in 0..p.len() {
        v += p[i] * scores[i] - q[i] * fenchel_conjugate(scores[i])?;
    }
    Ok(v)
}

/// Scalar-output network followed by `g_f`; the T of the dual form.
#[derive(Clone, Debug)]
pub struct DualCritic {
    pub net: Mlp,
}

impl DualCritic {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        DualCritic {
            net: Mlp::new(store, "fc", Group::DualCritic, &widths, Activation::Relu, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Critic scores `[batch]`, each strictly negative.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, input: Var) -> Result<Var> {
        let pre = self.net.forward(tape, bind, input)?;
        let b = tape.shape(pre)[0];
        let pre = tape.reshape(pre, &[b])?;
        Ok(output_activation(tape, pre))
    }
}

/// `mean_P[T] + mean_Q[log(-T)] + 1`, i.e. `mean_P[T] - mean_Q[f*(T)]`, from
/// critic scores on the tape.
fn dual_from_scores(tape: &mut Tape, t_p: Var, t_q: Var) -> Result<Var> {
    check_scores(tape.data(t_p))?;
    check_scores(tape.data(t_q))?;
    let ep = tape.mean(t_p);
    let neg = tape.neg(t_q);
    let lg = tape.log(neg)?;
    let eq = tape.mean(lg);
    let s = tape.add(ep, eq)?;
    Ok(tape.offset(s, 1.0))
}

/// Dual estimate of KL(Q || P) from critic inputs drawn from P and Q.
pub fn dual_estimate(
    tape: &mut Tape,
    critic: &DualCritic,
    bind: &Bindings,
    samples_p: Var,
    samples_q: Var,
) -> Result<Var> {
    if tape.shape(samples_p)[0] == 0 || tape.shape(samples_q)[0] == 0 {
        return Err(Error::Contract("dual estimate needs samples from both P and Q".into()));
    }
    let t_p = critic.forward(tape, bind, samples_p)?;
    let t_q = critic.forward(tape, bind, samples_q)?;
    dual_from_scores(tape, t_p, t_q)
}

/// The regularization game value
/// `E_prior[D_c(z)] + E_batch[log(-D_c(E_c(x)))] + 1`.
///
/// `batch_zc` are the encoder codes (fake inputs) and `prior_samples` the
/// standard-Gaussian draws (real inputs); each is concatenated with its
/// one-hot domain tag before entering the critic. The encoder minimizes this
/// value and the critic maximizes it.
pub fn l_reg(
    tape: &mut Tape,
    critic: &DualCritic,
    bind: &Bindings,
    batch_zc: Var,
    batch_tags: Var,
    prior_samples: Var,
    prior_tags: Var,
) -> Result<Var> {
    if tape.shape(batch_zc)[0] != tape.shape(prior_samples)[0] {
        return Err(Error::Contract(format!(
            "l_reg needs equal fake/real counts, got {} and {}",
            tape.shape(batch_zc)[0],
            tape.shape(prior_samples)[0]
        )));
    }
    let fake = tape.concat(&[batch_zc, batch_tags], 1)?;
    let real = tape.concat(&[prior_samples, prior_tags], 1)?;
    dual_estimate(tape, critic, bind, real, fake)
}
