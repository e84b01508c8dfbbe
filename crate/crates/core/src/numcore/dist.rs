//! Diagonal Gaussians and factorized Bernoullis.
//!
//! Each density comes in two forms: a plain one over slices, and a batched
//! graph version producing one value per row (`[n, 1]`).

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -12.0;
pub const LOG_VAR_MAX: f64 = 12.0;
pub const PROB_EPS: f64 = 1e-6;

/// `ln(2π)`
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Clamps `log_var` into `[-12, 12]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::Dimension(format!(
                "gaussian with {} means and {} log-variances",
                mean.len(),
                log_var.len()
            )));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: length {a} vs {b}")));
    }
    Ok(())
}

pub fn reparam_sample(q: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    check_len("reparam_sample", q.dim(), noise.len())?;
    Ok(q.mean
        .iter()
        .zip(&q.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// `KL(q || p)` in nats.
pub fn diag_gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_len("diag_gaussian_kl", q.dim(), p.dim())?;
    let mut kl = 0.0;
    for j in 0..q.dim() {
        kl += kl_term(q.mean[j], q.log_var[j], p.mean[j], p.log_var[j]);
    }
    Ok(kl)
}

#[inline]
fn kl_term(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let d = mq - mp;
    0.5 * (lp - lq + ((lq - lp).exp() + d * d * (-lp).exp()) - 1.0)
}

pub fn gaussian_log_density(x: &[f64], like: &DiagGaussian) -> Result<f64> {
    check_len("gaussian_log_density", x.len(), like.dim())?;
    Ok(x.iter()
        .zip(&like.mean)
        .zip(&like.log_var)
        .map(|((x, m), lv)| normal_log_pdf(*x, *m, *lv))
        .sum())
}

#[inline]
pub fn normal_log_pdf(x: f64, mean: f64, log_var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + log_var + d * d * (-log_var).exp())
}

/// `Σ m ln π + (1 - m) ln(1 - π)` with `π` clamped into `[1e-6, 1 - 1e-6]`.
pub fn bernoulli_log_mass(m: &[bool], pi: &[f64]) -> Result<f64> {
    check_len("bernoulli_log_mass", m.len(), pi.len())?;
    Ok(m.iter()
        .zip(pi)
        .map(|(&obs, &p)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if obs {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum())
}

// Graph versions. Means and log-variances are `[n, k]` nodes; the caller
// applies the log-variance clamp when building them.

/// `mean + exp(log_var / 2) * noise`
pub fn g_reparam(g: &mut Graph<'_>, mean: Var, log_var: Var, noise: &Tensor) -> Result<Var> {
    let half = g.scale(log_var, 0.5);
    let sd = g.exp(half);
    let eps = g.constant(noise.clone());
    let spread = g.mul(sd, eps)?;
    g.add(mean, spread)
}

/// Per-row `KL(N(mean, exp(log_var)) || N(0, I))`.
pub fn g_kl_standard(g: &mut Graph<'_>, mean: Var, log_var: Var) -> Result<Var> {
    // 0.5 * (exp(lv) + m^2 - 1 - lv)
    let var = g.exp(log_var);
    let m2 = g.square(mean);
    let s = g.add(var, m2)?;
    let s = g.sub(s, log_var)?;
    let s = g.affine(s, 0.5, -0.5);
    Ok(g.sum_cols(s))
}

/// Per-row `KL(q || p)` between diagonal Gaussians.
pub fn g_kl(g: &mut Graph<'_>, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
    let dl = g.sub(lq, lp)?;
    let ratio = g.exp(dl);
    let d = g.sub(mq, mp)?;
    let d2 = g.square(d);
    let neg_lp = g.neg(lp);
    let inv_vp = g.exp(neg_lp);
    let quad = g.mul(d2, inv_vp)?;
    let s = g.add(ratio, quad)?;
    let s = g.sub(s, dl)?;
    let s = g.affine(s, 0.5, -0.5);
    Ok(g.sum_cols(s))
}

/// Elementwise normal log-density, `[n, k]`.
pub fn g_normal_log_pdf(g: &mut Graph<'_>, x: Var, mean: Var, log_var: Var) -> Result<Var> {
    let d = g.sub(x, mean)?;
    let d2 = g.square(d);
    let neg = g.neg(log_var);
    let prec = g.exp(neg);
    let quad = g.mul(d2, prec)?;
    let s = g.add(quad, log_var)?;
    Ok(g.affine(s, -0.5, -0.5 * LN_2PI))
}

/// Per-row Gaussian log-density over the cells where `mask` is 1.
pub fn g_masked_log_density(
    g: &mut Graph<'_>,
    x: Var,
    mean: Var,
    log_var: Var,
    mask: &Tensor,
) -> Result<Var> {
    let cells = g_normal_log_pdf(g, x, mean, log_var)?;
    let m = g.constant(mask.clone());
    let kept = g.mul(cells, m)?;
    Ok(g.sum_cols(kept))
}

/// Per-row Bernoulli log-mass of the 0/1 tensor `m` under probabilities `pi`.
pub fn g_bernoulli_log_mass(g: &mut Graph<'_>, m: &Tensor, pi: Var) -> Result<Var> {
    let pi = g.clamp(pi, PROB_EPS, 1.0 - PROB_EPS);
    let ln_pi = g.ln(pi);
    let one_minus = g.affine(pi, -1.0, 1.0);
    let ln_one_minus = g.ln(one_minus);
    let mv = g.constant(m.clone());
    let inv = g.constant(m.map(|v| 1.0 - v));
    let a = g.mul(ln_pi, mv)?;
    let b = g.mul(ln_one_minus, inv)?;
    let s = g.add(a, b)?;
    Ok(g.sum_cols(s))
}
