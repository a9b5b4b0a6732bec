//! Exact checks of the divergence identities and bounds on small discrete
//! worlds, where every expectation is a finite sum.
//!
//! A world holds a ground-truth joint `p(x, z_c, z_d)` and a candidate
//! encoder `q(z_c | x)`. Worlds pass an invariant gate (normalization,
//! independence of `z_c` and `z_d`, positivity of `q`) before any check
//! runs, so a malformed world is rejected rather than counted as a
//! counterexample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;
use thiserror::Error;

pub const NORM_TOL: f64 = 1e-12;
pub const INDEP_TOL: f64 = 1e-12;
/// Pass threshold for identities (residual) and inequalities (slack).
pub const CHECK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("invariant gate: {0}")]
    Gate(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("infeasible weights: domination fails at z_c = {zc} ({lhs} > {rhs})")]
    Infeasible { zc: usize, lhs: f64, rhs: f64 },
    #[error("assumption violated: {0}")]
    Assumption(String),
}

type Result<T> = std::result::Result<T, BoundsError>;

/// `sum q log(q / p)` with the convention `0 log 0 = 0`.
pub fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() })
        .sum()
}

/// Random probability vector, Dirichlet with concentration `alpha`.
pub fn dirichlet<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let v: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 && v.iter().all(|x| *x > 0.0) {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteWorld {
    pub nx: usize,
    pub nc: usize,
    pub nd: usize,
    /// `joint[(x * nc + c) * nd + d] = p(x, z_c = c, z_d = d)`.
    pub joint: Vec<f64>,
    /// `q_c_given_x[x * nc + c] = q(z_c = c | x)`.
    pub q_c_given_x: Vec<f64>,
    /// Data marginal on the encoder side; `q(z_c) = sum_x q_x(x) q(z_c|x)`.
    /// Defaults to `p(x)`.
    pub q_x: Vec<f64>,
}

impl DiscreteWorld {
    /// World from factors `p(z_c)`, `p(z_d)`, `p(x | z_c, z_d)` (indexed
    /// `[(c * nd + d) * nx + x]`) and an encoder.
    pub fn from_factors(p_c: &[f64], p_d: &[f64], p_x_given: &[f64], q_c_given_x: Vec<f64>) -> Self {
        let (nc, nd) = (p_c.len(), p_d.len());
        let nx = p_x_given.len() / (nc * nd);
        let mut joint = vec![0.0; nx * nc * nd];
        for x in 0..nx {
            for c in 0..nc {
                for d in 0..nd {
                    joint[(x * nc + c) * nd + d] = p_c[c] * p_d[d] * p_x_given[(c * nd + d) * nx + x];
                }
            }
        }
        let mut w = DiscreteWorld {
            nx,
            nc,
            nd,
            joint,
            q_c_given_x,
            q_x: Vec::new(),
        };
        w.q_x = w.p_x();
        w
    }

    /// Random world with supports in `2..=max_support` and independent
    /// latents.
    pub fn random<R: Rng + ?Sized>(max_support: usize, rng: &mut R) -> Self {
        let nx = rng.random_range(2..=max_support);
        let nc = rng.random_range(2..=max_support);
        let nd = rng.random_range(2..=max_support);
        let p_c = dirichlet(nc, 1.0, rng);
        let p_d = dirichlet(nd, 1.0, rng);
        let mut px = Vec::with_capacity(nc * nd * nx);
        for _ in 0..nc * nd {
            px.extend(dirichlet(nx, 1.0, rng));
        }
        let q: Vec<f64> = (0..nx).flat_map(|_| dirichlet(nc, 1.0, rng)).collect();
        Self::from_factors(&p_c, &p_d, &px, q)
    }

    pub fn p(&self, x: usize, c: usize, d: usize) -> f64 {
        self.joint[(x * self.nc + c) * self.nd + d]
    }

    pub fn p_x(&self) -> Vec<f64> {
        (0..self.nx)
            .map(|x| (0..self.nc).flat_map(|c| (0..self.nd).map(move |d| (c, d))).map(|(c, d)| self.p(x, c, d)).sum())
            .collect()
    }

    pub fn p_c(&self) -> Vec<f64> {
        (0..self.nc)
            .map(|c| (0..self.nx).flat_map(|x| (0..self.nd).map(move |d| (x, d))).map(|(x, d)| self.p(x, c, d)).sum())
            .collect()
    }

    pub fn p_d(&self) -> Vec<f64> {
        (0..self.nd)
            .map(|d| (0..self.nx).flat_map(|x| (0..self.nc).map(move |c| (x, c))).map(|(x, c)| self.p(x, c, d)).sum())
            .collect()
    }

    pub fn p_cd(&self, c: usize, d: usize) -> f64 {
        (0..self.nx).map(|x| self.p(x, c, d)).sum()
    }

    /// `p(x | z_c, z_d)`; zero when the latent pair has no mass.
    pub fn p_x_given_cd(&self, x: usize, c: usize, d: usize) -> f64 {
        let m = self.p_cd(c, d);
        if m == 0.0 {
            0.0
        } else {
            self.p(x, c, d) / m
        }
    }

    /// `p(x | z_c)` for every `z_c`.
    pub fn p_x_given_c(&self, x: usize) -> Vec<f64> {
        let pc = self.p_c();
        (0..self.nc)
            .map(|c| (0..self.nd).map(|d| self.p(x, c, d)).sum::<f64>() / pc[c])
            .collect()
    }

    /// Ground-truth posterior `p(z_c | x)`.
    pub fn p_c_given_x(&self, x: usize) -> Vec<f64> {
        let px = self.p_x()[x];
        (0..self.nc).map(|c| (0..self.nd).map(|d| self.p(x, c, d)).sum::<f64>() / px).collect()
    }

    pub fn q_row(&self, x: usize) -> &[f64] {
        &self.q_c_given_x[x * self.nc..(x + 1) * self.nc]
    }

    /// Encoder marginal `q(z_c)`.
    pub fn q_c(&self) -> Vec<f64> {
        (0..self.nc)
            .map(|c| (0..self.nx).map(|x| self.q_x[x] * self.q_row(x)[c]).sum())
            .collect()
    }

    /// Replaces the encoder with the ground-truth posterior.
    pub fn with_exact_posterior(mut self) -> Self {
        self.q_c_given_x = (0..self.nx).flat_map(|x| self.p_c_given_x(x)).collect();
        self
    }

    /// The invariant gate.
    pub fn validate(&self) -> Result<()> {
        let gate = |m: String| Err(BoundsError::Gate(m));
        if self.joint.len() != self.nx * self.nc * self.nd
            || self.q_c_given_x.len() != self.nx * self.nc
            || self.q_x.len() != self.nx
        {
            return gate("table sizes disagree with supports".into());
        }
        if self.joint.iter().chain(&self.q_c_given_x).chain(&self.q_x).any(|v| !v.is_finite() || *v < 0.0) {
            return gate("negative or non-finite probability".into());
        }
        let total: f64 = self.joint.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return gate(format!("joint sums to {total}"));
        }
        if (self.q_x.iter().sum::<f64>() - 1.0).abs() > NORM_TOL {
            return gate("q(x) is not normalized".into());
        }
        for x in 0..self.nx {
            let s: f64 = self.q_row(x).iter().sum();
            if (s - 1.0).abs() > NORM_TOL {
                return gate(format!("q(z_c | x={x}) sums to {s}"));
            }
            if let Some(c) = self.q_row(x).iter().position(|v| *v <= 0.0) {
                return gate(format!("q(z_c={c} | x={x}) is not positive"));
            }
        }
        let (pc, pd) = (self.p_c(), self.p_d());
        if pc.iter().any(|v| *v <= 0.0) {
            return gate("p(z_c) has an empty atom".into());
        }
        for c in 0..self.nc {
            for d in 0..self.nd {
                let gap = (self.p_cd(c, d) - pc[c] * pd[d]).abs();
                if gap > INDEP_TOL {
                    return gate(format!("z_c and z_d are dependent (gap {gap:.3e} at ({c}, {d}))"));
                }
            }
        }
        Ok(())
    }

    fn check_x(&self, x: usize) -> Result<f64> {
        if x >= self.nx {
            return Err(BoundsError::Contract(format!("x = {x} outside support of {}", self.nx)));
        }
        let px = self.p_x()[x];
        if px <= 0.0 {
            return Err(BoundsError::Contract(format!("p(x={x}) = 0")));
        }
        Ok(px)
    }
}

/// `|D(q||p(z_c|x)) - [D(q||p(z_c)) - E_q log p(x|z_c) + log p(x)]|`.
pub fn check_lemma1(w: &DiscreteWorld, x: usize) -> Result<f64> {
    w.validate()?;
    let px = w.check_x(x)?;
    let q = w.q_row(x);
    let lhs = kl(q, &w.p_c_given_x(x));
    let lik = w.p_x_given_c(x);
    let e_log: f64 = q.iter().zip(&lik).map(|(a, l)| a * l.ln()).sum();
    let rhs = kl(q, &w.p_c()) - e_log + px.ln();
    Ok((lhs - rhs).abs())
}

/// Outcome of the evidence-bound check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thm1Slack {
    /// Bound minus divergence; `+inf` when the bound is vacuous.
    pub slack: f64,
    /// The likelihood vanished on a support point with positive weight.
    pub vacuous: bool,
}

/// `[D(q||p(z_c)) - E_{q, P_d} log p(x|z_c,z_d) + log p(x)] - D(q||p(z_c|x))`,
/// with `P_d` the true marginal `p(z_d)` unless given.
pub fn check_thm1(w: &DiscreteWorld, x: usize, p_d: Option<&[f64]>) -> Result<Thm1Slack> {
    w.validate()?;
    let px = w.check_x(x)?;
    let marginal = w.p_d();
    let pd = p_d.unwrap_or(&marginal);
    if pd.len() != w.nd || (pd.iter().sum::<f64>() - 1.0).abs() > NORM_TOL {
        return Err(BoundsError::Contract("P_d must be a distribution over z_d".into()));
    }
    let q = w.q_row(x);
    let mut e_log = 0.0;
    for c in 0..w.nc {
        for d in 0..w.nd {
            let weight = q[c] * pd[d];
            if weight == 0.0 {
                continue;
            }
            let l = w.p_x_given_cd(x, c, d);
            if l == 0.0 {
                return Ok(Thm1Slack {
                    slack: f64::INFINITY,
                    vacuous: true,
                });
            }
            e_log += weight * l.ln();
        }
    }
    let bound = kl(q, &w.p_c()) - e_log + px.ln();
    Ok(Thm1Slack {
        slack: bound - kl(q, &w.p_c_given_x(x)),
        vacuous: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Relaxation {
    /// `max_{z_c} q(x|z_c) / q(x) = max_{z_c} q(z_c|x) / q(z_c)`.
    pub m: f64,
    /// `M D(q(z_c)||p(z_c)) + M log M - D(q(z_c|x)||p(z_c))`.
    pub slack: f64,
}

/// The relaxed information-gain bound at `x`. The encoder side is
/// generative: `q(x|z_c) = q(z_c|x) q(x) / q(z_c)`.
pub fn check_relaxation(w: &DiscreteWorld, x: usize) -> Result<Relaxation> {
    w.validate()?;
    w.check_x(x)?;
    if w.q_x[x] <= 0.0 {
        return Err(BoundsError::Contract(format!("q(x={x}) = 0")));
    }
    let qc = w.q_c();
    let q = w.q_row(x);
    let m = q.iter().zip(&qc).map(|(a, b)| a / b).fold(f64::NEG_INFINITY, f64::max);
    let pc = w.p_c();
    Ok(Relaxation {
        m,
        slack: m * kl(&qc, &pc) + m * m.ln() - kl(q, &pc),
    })
}

/// Encoder-side generative model with latent dependence controlled by
/// `alpha`: `q(z_c, z_d) = (1 - alpha) q(z_c) q(z_d) + alpha r(z_c, z_d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub nc: usize,
    pub nd: usize,
    pub nx: usize,
    /// `q_cd[c * nd + d]`.
    pub q_cd: Vec<f64>,
    /// `q_x_given[(c * nd + d) * nx + x]`.
    pub q_x_given: Vec<f64>,
}

impl EncoderModel {
    pub fn random<R: Rng + ?Sized>(nc: usize, nd: usize, nx: usize, alpha: f64, rng: &mut R) -> Self {
        let qc = dirichlet(nc, 1.0, rng);
        let qd = dirichlet(nd, 1.0, rng);
        let r = dirichlet(nc * nd, 1.0, rng);
        let q_cd = (0..nc * nd)
            .map(|i| (1.0 - alpha) * qc[i / nd] * qd[i % nd] + alpha * r[i])
            .collect();
        let q_x_given = (0..nc * nd).flat_map(|_| dirichlet(nx, 1.0, rng)).collect();
        EncoderModel {
            nc,
            nd,
            nx,
            q_cd,
            q_x_given,
        }
    }

    pub fn q_c(&self) -> Vec<f64> {
        (0..self.nc).map(|c| (0..self.nd).map(|d| self.q_cd[c * self.nd + d]).sum()).collect()
    }

    pub fn q_d(&self) -> Vec<f64> {
        (0..self.nd).map(|d| (0..self.nc).map(|c| self.q_cd[c * self.nd + d]).sum()).collect()
    }

    pub fn q_x(&self) -> Vec<f64> {
        (0..self.nx)
            .map(|x| (0..self.nc * self.nd).map(|i| self.q_cd[i] * self.q_x_given[i * self.nx + x]).sum())
            .collect()
    }

    /// Disentanglement ratio `sup q(z_c|z_d) / q(z_c)`.
    pub fn ratio(&self) -> f64 {
        let (qc, qd) = (self.q_c(), self.q_d());
        let mut k = f64::NEG_INFINITY;
        for c in 0..self.nc {
            for d in 0..self.nd {
                k = k.max(self.q_cd[c * self.nd + d] / qd[d] / qc[c]);
            }
        }
        k
    }

    /// `q(z_c | x)` by Bayes, as a table `[x * nc + c]`.
    pub fn posterior(&self) -> Vec<f64> {
        let qx = self.q_x();
        let mut out = vec![0.0; self.nx * self.nc];
        for x in 0..self.nx {
            for c in 0..self.nc {
                let num: f64 = (0..self.nd)
                    .map(|d| self.q_cd[c * self.nd + d] * self.q_x_given[(c * self.nd + d) * self.nx + x])
                    .sum();
                out[x * self.nc + c] = num / qx[x];
            }
        }
        out
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Target-domain bound:
/// `sum_i beta_i D(q_i || p_i) - D(q_t || p_t)` where every source shares
/// the target's ground-truth posterior (`p_i == p_t` within 1e-12) and
/// `q_t <= sum_i beta_i q_i` pointwise.
pub fn check_thm2(
    q_target: &[f64],
    p_target: &[f64],
    sources: &[(&[f64], &[f64])],
    betas: &[f64],
) -> Result<f64> {
    if sources.is_empty() || sources.len() != betas.len() {
        return Err(BoundsError::Contract("need one weight per source and at least one source".into()));
    }
    let n = q_target.len();
    if p_target.len() != n || sources.iter().any(|(q, p)| q.len() != n || p.len() != n) {
        return Err(BoundsError::Contract("support sizes disagree".into()));
    }
    if betas.iter().any(|b| !(*b >= 0.0)) {
        return Err(BoundsError::Contract("weights must be non-negative".into()));
    }
    for (i, (_, p)) in sources.iter().enumerate() {
        if let Some(c) = (0..n).find(|&c| (p[c] - p_target[c]).abs() > NORM_TOL) {
            return Err(BoundsError::Assumption(format!(
                "source {i} ground-truth posterior differs from the target's at z_c = {c}"
            )));
        }
    }
    for c in 0..n {
        let rhs: f64 = sources.iter().zip(betas).map(|((q, _), b)| b * q[c]).sum();
        if q_target[c] > rhs * (1.0 + 1e-12) {
            return Err(BoundsError::Infeasible {
                zc: c,
                lhs: q_target[c],
                rhs,
            });
        }
    }
    let bound: f64 = sources.iter().zip(betas).map(|((q, p), b)| b * kl(q, p)).sum();
    Ok(bound - kl(q_target, p_target))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibleBeta {
    pub index_set: Vec<usize>,
    pub betas: Vec<f64>,
    pub bound: f64,
}

/// Smallest weight making `q_t <= beta * mix` pointwise.
fn cover_scale(q_t: &[f64], mix: &[f64]) -> f64 {
    q_t.iter().zip(mix).map(|(a, b)| a / b).fold(0.0, f64::max)
}

/// Best bound over singletons (with their minimal weight) and a grid of
/// convex pairs scaled to cover the target. `divs[i]` is
/// `D(q_i || p_i)` of source `i`.
pub fn find_feasible_beta(q_target: &[f64], q_sources: &[&[f64]], divs: &[f64]) -> Result<FeasibleBeta> {
    if q_sources.is_empty() || q_sources.len() != divs.len() {
        return Err(BoundsError::Contract("need one divergence per source".into()));
    }
    if q_target.iter().chain(q_sources.iter().flat_map(|q| q.iter())).any(|v| *v <= 0.0) {
        return Err(BoundsError::Contract("densities must be strictly positive".into()));
    }
    let mut best: Option<FeasibleBeta> = None;
    let mut consider = |cand: FeasibleBeta| {
        if best.as_ref().is_none_or(|b| cand.bound < b.bound) {
            best = Some(cand);
        }
    };
    for (i, q) in q_sources.iter().enumerate() {
        let b = cover_scale(q_target, q);
        consider(FeasibleBeta {
            index_set: vec![i],
            betas: vec![b],
            bound: b * divs[i],
        });
    }
    const GRID: usize = 10;
    for i in 0..q_sources.len() {
        for j in i + 1..q_sources.len() {
            for g in 1..GRID {
                let w = g as f64 / GRID as f64;
                let mix: Vec<f64> = q_sources[i].iter().zip(q_sources[j]).map(|(a, b)| w * a + (1.0 - w) * b).collect();
                let s = cover_scale(q_target, &mix);
                consider(FeasibleBeta {
                    index_set: vec![i, j],
                    betas: vec![s * w, s * (1.0 - w)],
                    bound: s * (w * divs[i] + (1.0 - w) * divs[j]),
                });
            }
        }
    }
    Ok(best.expect("at least one source"))
}

/// Target and sources drawn from one world in which `x = (group, member)`
/// and `p(x | z) = p(group | z) pi_group(member)`, so all members of a
/// group share the ground-truth posterior `p(z_c | x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Thm2Case {
    pub p_posterior: Vec<f64>,
    pub q_target: Vec<f64>,
    pub q_sources: Vec<Vec<f64>>,
}

impl Thm2Case {
    pub fn random<R: Rng + ?Sized>(max_support: usize, rng: &mut R) -> Self {
        let nc = rng.random_range(2..=max_support);
        let nd = rng.random_range(2..=max_support);
        let groups = rng.random_range(2..=max_support);
        let members = rng.random_range(2..=4);
        let p_c = dirichlet(nc, 1.0, rng);
        let p_d = dirichlet(nd, 1.0, rng);
        let pi = dirichlet(members, 1.0, rng);
        let p_g: Vec<Vec<f64>> = (0..nc * nd).map(|_| dirichlet(groups, 1.0, rng)).collect();
        // x enumerates (group, member); the world's posterior of group 0
        let nx = groups * members;
        let mut px_given = vec![0.0; nc * nd * nx];
        for (i, pg) in p_g.iter().enumerate() {
            for g in 0..groups {
                for m in 0..members {
                    px_given[i * nx + g * members + m] = pg[g] * pi[m];
                }
            }
        }
        let q: Vec<f64> = (0..nx).flat_map(|_| dirichlet(nc, 1.0, rng)).collect();
        let w = DiscreteWorld::from_factors(&p_c, &p_d, &px_given, q);
        let target = 0;
        let p_posterior = w.p_c_given_x(target);
        let q_sources = (1..members).map(|m| w.q_row(m).to_vec()).collect();
        Thm2Case {
            p_posterior,
            q_target: w.q_row(target).to_vec(),
            q_sources,
        }
    }

    pub fn source_divergences(&self) -> Vec<f64> {
        self.q_sources.iter().map(|q| kl(q, &self.p_posterior)).collect()
    }

    /// Slack at the weights chosen by [`find_feasible_beta`].
    pub fn slack(&self) -> Result<(FeasibleBeta, f64)> {
        let qs: Vec<&[f64]> = self.q_sources.iter().map(Vec::as_slice).collect();
        let fb = find_feasible_beta(&self.q_target, &qs, &self.source_divergences())?;
        let chosen: Vec<(&[f64], &[f64])> = fb
            .index_set
            .iter()
            .map(|&i| (self.q_sources[i].as_slice(), self.p_posterior.as_slice()))
            .collect();
        let s = check_thm2(&self.q_target, &self.p_posterior, &chosen, &fb.betas)?;
        Ok((fb, s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Lemma1,
    Thm1,
    Relax,
    Thm2,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Lemma1, Suite::Thm1, Suite::Relax, Suite::Thm2];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Thm1 => "thm1",
            Suite::Relax => "relax",
            Suite::Thm2 => "thm2",
        }
    }

    pub fn parse(s: &str) -> Option<Vec<Suite>> {
        match s {
            "all" => Some(Suite::ALL.to_vec()),
            _ => Suite::ALL.iter().copied().find(|x| x.name() == s).map(|x| vec![x]),
        }
    }
}

/// Seed of world `i` in a run seeded with `seed`.
pub fn world_seed(seed: u64, i: usize) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const MAX_SUPPORT: usize = 6;
/// Minimum number of worlds in the disentanglement-ratio trend.
pub const TREND_WORLDS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub worlds: usize,
    /// `residual` for the identity, `slack` for the inequalities.
    pub metric: &'static str,
    /// Largest residual or smallest slack over all worlds.
    pub worst: f64,
    pub worst_world_seed: u64,
    /// Worlds where the check failed, by seed.
    pub failing_world_seeds: Vec<u64>,
    pub failures: usize,
    pub vacuous: usize,
    /// Spearman correlation between the disentanglement ratio and M.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio_m_spearman: Option<f64>,
    pub pass: bool,
}

fn ratio_trend(seed: u64, worlds: usize) -> f64 {
    let n = worlds.max(TREND_WORLDS);
    let (mut ks, mut ms) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed(seed ^ 0x74_7265_6e64, i));
        let alpha = rng.random_range(0.0..1.0);
        let e = EncoderModel::random(4, 4, 4, alpha, &mut rng);
        let post = e.posterior();
        let qc = e.q_c();
        // M of the world: sup over x and z_c of q(x|z_c)/q(x) = q(z_c|x)/q(z_c)
        let m = (0..e.nx * e.nc).map(|j| post[j] / qc[j % e.nc]).fold(f64::NEG_INFINITY, f64::max);
        ks.push(e.ratio());
        ms.push(m);
    }
    spearman(&ks, &ms)
}

/// Encoder-side world for the relaxation suite.
fn relax_world<R: Rng + ?Sized>(rng: &mut R) -> DiscreteWorld {
    let base = DiscreteWorld::random(MAX_SUPPORT, rng);
    let alpha = rng.random_range(0.0..1.0);
    let e = EncoderModel::random(base.nc, rng.random_range(2..=MAX_SUPPORT), base.nx, alpha, rng);
    DiscreteWorld {
        q_c_given_x: e.posterior(),
        q_x: e.q_x(),
        ..base
    }
}

/// Runs one suite over `worlds` seeded worlds.
pub fn run_suite(suite: Suite, worlds: usize, seed: u64) -> Result<SuiteReport> {
    if worlds == 0 {
        return Err(BoundsError::Contract("need at least one world".into()));
    }
    let identity = suite == Suite::Lemma1;
    let mut worst = if identity { 0.0 } else { f64::INFINITY };
    let mut worst_seed = world_seed(seed, 0);
    let mut failing = Vec::new();
    let mut vacuous = 0;
    for i in 0..worlds {
        let ws = world_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(ws);
        let value = match suite {
            Suite::Lemma1 => {
                let w = DiscreteWorld::random(MAX_SUPPORT, &mut rng);
                (0..w.nx).map(|x| check_lemma1(&w, x)).try_fold(0.0f64, |a, r| r.map(|v| a.max(v)))?
            }
            Suite::Thm1 => {
                let w = DiscreteWorld::random(MAX_SUPPORT, &mut rng);
                let mut m = f64::INFINITY;
                for x in 0..w.nx {
                    let s = check_thm1(&w, x, None)?;
                    vacuous += s.vacuous as usize;
                    m = m.min(s.slack);
                }
                m
            }
            Suite::Relax => {
                let w = relax_world(&mut rng);
                (0..w.nx)
                    .map(|x| check_relaxation(&w, x))
                    .try_fold(f64::INFINITY, |a, r| r.map(|v| a.min(v.slack)))?
            }
            Suite::Thm2 => Thm2Case::random(MAX_SUPPORT, &mut rng).slack()?.1,
        };
        let bad = if identity { !(value < CHECK_TOL) } else { !(value >= -CHECK_TOL) };
        if bad {
            failing.push(ws);
        }
        let worse = if identity { value > worst } else { value < worst };
        if worse || i == 0 {
            worst = value;
            worst_seed = ws;
        }
    }
    let trend = (suite == Suite::Relax).then(|| ratio_trend(seed, worlds));
    let pass = failing.is_empty() && trend.is_none_or(|r| r > 0.0);
    Ok(SuiteReport {
        suite,
        worlds,
        metric: if identity { "residual" } else { "slack" },
        worst,
        worst_world_seed: worst_seed,
        failures: failing.len(),
        failing_world_seeds: failing,
        vacuous,
        ratio_m_spearman: trend,
        pass,
    })
}
