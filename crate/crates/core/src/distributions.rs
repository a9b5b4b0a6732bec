//! Diagonal Gaussians, the Laplace likelihood and the divergences between
//! them, in plain `f64` form and as tape operations.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian with independent coordinates, parameterized by log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::ShapeMismatch {
                op: "diag_gaussian",
                lhs: vec![mu.len()],
                rhs: vec![log_var.len()],
            });
        }
        if let Some(v) = log_var.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("log variance {v}")));
        }
        Ok(DiagGaussian { mu, log_var })
    }

    /// N(0, I) in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| (0.5 * l).exp()).collect()
    }

    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "log_pdf",
                lhs: vec![self.dim()],
                rhs: vec![z.len()],
            });
        }
        Ok(z.iter()
            .zip(&self.mu)
            .zip(&self.log_var)
            .map(|((z, m), lv)| -0.5 * (LN_2PI + lv + (z - m).powi(2) / lv.exp()))
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        reparam_sample(self, &noise).expect("noise sized to dimension")
    }
}

/// Closed-form KL(q || p) between diagonal Gaussians.
pub fn kl_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return contract(format!(
            "kl_gaussians: dimension {} vs {}",
            q.dim(),
            p.dim()
        ));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let var_ratio = (q.log_var[i] - p.log_var[i]).exp();
        let diff = q.mu[i] - p.mu[i];
        kl += 0.5 * (var_ratio + diff * diff / p.log_var[i].exp() - 1.0 + p.log_var[i] - q.log_var[i]);
    }
    Ok(kl)
}

/// Monte-Carlo estimate of E_q[log q - log p] with its standard error.
pub fn monte_carlo_kl<R: Rng + ?Sized>(
    q: &DiagGaussian,
    p: &DiagGaussian,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if q.dim() != p.dim() {
        return contract("monte_carlo_kl: dimension mismatch");
    }
    if samples < 2 {
        return contract("monte_carlo_kl needs at least two samples");
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let z = q.sample(rng);
        let v = q.log_pdf(&z)? - p.log_pdf(&z)?;
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    Ok((mean, (var.max(0.0) / n).sqrt()))
}

/// `mu + exp(log_var / 2) * noise`.
pub fn reparam_sample(q: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(Error::ShapeMismatch {
            op: "reparam_sample",
            lhs: vec![q.dim()],
            rhs: vec![noise.len()],
        });
    }
    Ok(q.mu
        .iter()
        .zip(&q.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Tape version of [`reparam_sample`]; `noise` enters as a constant so no
/// gradient reaches it.
pub fn reparam_sample_var(tape: &mut Tape, mu: Var, log_var: Var, noise: Tensor) -> Result<Var> {
    if tape.shape(mu) != tape.shape(log_var) || tape.shape(mu) != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparam_sample",
            lhs: tape.shape(mu).to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let eps = tape.constant(noise);
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, eps)?;
    tape.add(mu, scaled)
}

/// Closed-form KL(N(mu, exp(log_var)) || prior) on the tape.
///
/// For `[batch, dim]` inputs the per-row divergences are averaged; a `[dim]`
/// input yields the single divergence.
pub fn kl_gaussians_var(tape: &mut Tape, mu: Var, log_var: Var, prior: &DiagGaussian) -> Result<Var> {
    let shape = tape.shape(mu).to_vec();
    if shape != tape.shape(log_var) || shape.last() != Some(&prior.dim()) {
        return contract(format!(
            "kl_gaussians: q shape {shape:?} vs prior dimension {}",
            prior.dim()
        ));
    }
    let p_mu = tape.constant(Tensor::vector(prior.mu.clone()));
    let p_lv = tape.constant(Tensor::vector(prior.log_var.clone()));
    let inv_p_var = tape.constant(Tensor::vector(prior.log_var.iter().map(|l| (-l).exp()).collect()));
    // 0.5 * (exp(lq - lp) + (mq - mp)^2 / vp - 1 + lp - lq)
    let dl = tape.sub(log_var, p_lv)?;
    let ratio = tape.exp(dl);
    let diff = tape.sub(mu, p_mu)?;
    let sq = tape.mul(diff, diff)?;
    let maha = tape.mul(sq, inv_p_var)?;
    let a = tape.add(ratio, maha)?;
    let b = tape.sub(a, dl)?;
    let c = tape.offset(b, -1.0);
    let terms = tape.scale(c, 0.5);
    if shape.len() == 1 {
        Ok(tape.sum(terms))
    } else {
        let per_row = tape.sum_axis(terms, shape.len() - 1)?;
        Ok(tape.mean(per_row))
    }
}

/// Laplace density with a shared scale, the likelihood behind an L1 loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceDensity {
    loc: Vec<f64>,
    scale: f64,
}

impl LaplaceDensity {
    pub fn new(loc: Vec<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Domain {
                op: "laplace",
                detail: format!("scale must be positive, got {scale}"),
            });
        }
        Ok(LaplaceDensity { loc, scale })
    }

    pub fn loc(&self) -> &[f64] {
        &self.loc
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// `sum_i [-log(2 b) - |x_i - m_i| / b]`.
pub fn laplace_log_pdf(d: &LaplaceDensity, x: &[f64]) -> Result<f64> {
    if x.len() != d.loc.len() {
        return Err(Error::ShapeMismatch {
            op: "laplace_log_pdf",
            lhs: vec![d.loc.len()],
            rhs: vec![x.len()],
        });
    }
    let norm = -(2.0 * d.scale).ln();
    Ok(x.iter()
        .zip(&d.loc)
        .map(|(x, m)| norm - (x - m).abs() / d.scale)
        .sum())
}

/// Tape version of [`laplace_log_pdf`] with a differentiable location.
pub fn laplace_log_pdf_var(tape: &mut Tape, x: Var, loc: Var, scale: f64) -> Result<Var> {
    if !(scale > 0.0) {
        return Err(Error::Domain {
            op: "laplace",
            detail: format!("scale must be positive, got {scale}"),
        });
    }
    let n = tape.value(x).numel() as f64;
    let d = tape.sub(x, loc)?;
    let a = tape.abs(d);
    let s = tape.sum(a);
    let t = tape.scale(s, -1.0 / scale);
    Ok(tape.offset(t, -n * (2.0 * scale).ln()))
}
