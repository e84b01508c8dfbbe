//! Training objectives. Every function here returns per-row means over the
//! batch, so callers maximize `total` (and descend on its negation).
//!
//! Noise tensors carry `reps` consecutive rows per data row: `[n * reps, K]`.

use serde::{Deserialize, Serialize};

use crate::encoders::{g_complete, g_masked_log_likelihood};
use crate::error::{Error, Result};
use crate::missingness::{MaskPattern, MechanismSpec};
use crate::model::{Draws, Model};
use crate::numcore::dist;
use crate::numcore::{Graph, Tensor, Var};

/// Scalar summary of one loss evaluation, in nats per row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub elbo_q: f64,
    pub elbo_p: f64,
    pub kl_qp: f64,
    pub loglik_pbar: f64,
    /// `kl_qp - loglik_pbar - elbo_p + elbo_q`
    pub reg_bracket: f64,
}

impl LossBreakdown {
    /// A plain bound: no regularizer terms.
    pub fn plain(elbo_q: f64) -> Self {
        Self {
            total: elbo_q,
            elbo_q,
            ..Self::default()
        }
    }

    /// Assemble `total = elbo_q - λ·bracket` with the same operation order
    /// the graph uses, so the reconstruction is exact.
    pub fn compose(lambda: f64, elbo_q: f64, elbo_p: f64, kl_qp: f64, loglik_pbar: f64) -> Self {
        let reg_bracket = kl_qp - loglik_pbar - elbo_p + elbo_q;
        Self {
            total: elbo_q - reg_bracket * lambda,
            elbo_q,
            elbo_p,
            kl_qp,
            loglik_pbar,
            reg_bracket,
        }
    }
}

/// A loss node in a graph plus its scalar breakdown.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub lambda: f64,
    pub mechanism: MechanismSpec,
    /// Posterior samples per expectation.
    #[serde(default = "one")]
    pub samples: usize,
}

fn one() -> usize {
    1
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a finite non-negative number, got {}", self.lambda)));
        }
        if self.samples == 0 {
            return Err(Error::Config("reg.samples must be at least 1".into()));
        }
        self.mechanism.validate()?;
        if !(0.01..=1.5).contains(&self.lambda) && self.lambda != 0.0 {
            log::warn!("lambda {} outside the usual tuning range [0.01, 1.5]", self.lambda);
        }
        Ok(())
    }
}

/// How the KL to the prior enters a Gaussian ELBO.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlMode {
    /// Closed form.
    Analytic,
    /// Single-sample `log q(z) - log p(z)` at the drawn `z`.
    Sampled,
}

/// One encoder/decoder pass over `(x, mask)`.
#[derive(Clone, Copy, Debug)]
pub struct Pass {
    pub draws: Draws,
    pub dec_mean: Var,
    pub dec_log_var: Var,
    /// Masked log-likelihood per draw, `[n * reps, 1]`.
    pub loglik: Var,
    /// Per-row bound, `[n, 1]`.
    pub bound: Var,
}

fn group_mean(g: &mut Graph<'_>, a: Var, reps: usize) -> Result<Var> {
    if reps == 1 {
        return Ok(a);
    }
    let s = g.group_sum_rows(a, reps)?;
    Ok(g.scale(s, 1.0 / reps as f64))
}

fn log_mean_exp(g: &mut Graph<'_>, lw: Var, reps: usize) -> Result<Var> {
    let rows = g.value(lw).rows() / reps;
    let w = g.reshape(lw, rows, reps)?;
    let lse = g.logsumexp_cols(w);
    Ok(g.affine(lse, 1.0, -(reps as f64).ln()))
}

fn log_prior(g: &mut Graph<'_>, z: Var) -> Result<Var> {
    let (r, k) = (g.value(z).rows(), g.value(z).cols());
    let zero = g.constant(Tensor::zeros(r, k));
    let lp = dist::g_normal_log_pdf(g, z, zero, zero)?;
    Ok(g.sum_cols(lp))
}

/// Per-draw log-weights `log p(x_Q | z) + log p(z) - log q(z)`, plus the
/// Bernoulli mask term for self-masking models. Returns
/// `(log_weights, loglik, dec_mean, dec_log_var)`.
fn log_weights(
    g: &mut Graph<'_>,
    model: &Model,
    x: &Tensor,
    mask: &MaskPattern,
    draws: &Draws,
) -> Result<(Var, Var, Var, Var)> {
    let (mean, lv) = model.decoder.forward(g, draws.z)?;
    let ll = g_masked_log_likelihood(g, x, mask, mean, lv, draws.reps)?;
    let lp = log_prior(g, draws.z)?;
    let lw = g.add(ll, lp)?;
    let mut lw = g.sub(lw, draws.log_q)?;
    if let Some(head) = &model.mask_head {
        let x_hat = g_complete(g, x, mask, mean, draws.reps)?;
        let pi = head.forward(g, x_hat)?;
        let m = mask.to_tensor().repeat_rows(draws.reps);
        let mass = dist::g_bernoulli_log_mass(g, &m, pi)?;
        lw = g.add(lw, mass)?;
    }
    Ok((lw, ll, mean, lv))
}

/// Draws from the posterior given `(x, mask)` with their log-weights and
/// decoder outputs, `[n * reps, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct WeightedDraws {
    pub draws: Draws,
    pub log_weights: Var,
    pub dec_mean: Var,
    pub dec_log_var: Var,
}

pub fn weighted_draws(
    g: &mut Graph<'_>,
    model: &Model,
    x: &Tensor,
    mask: &MaskPattern,
    noise: &Tensor,
) -> Result<WeightedDraws> {
    let enc = model.encode_batch(g, x, mask)?;
    let draws = model.draw(g, enc, noise)?;
    let (log_weights, _, dec_mean, dec_log_var) = log_weights(g, model, x, mask, &draws)?;
    Ok(WeightedDraws {
        draws,
        log_weights,
        dec_mean,
        dec_log_var,
    })
}

/// The model's own training bound per row: analytic ELBO for Gaussian
/// encoders, sampled ELBO for flows, importance-weighted bounds for the
/// MIWAE family.
pub fn model_pass(g: &mut Graph<'_>, model: &Model, x: &Tensor, mask: &MaskPattern, noise: &Tensor) -> Result<Pass> {
    let mode = if model.flow.is_some() || model.mask_head.is_some() {
        KlMode::Sampled
    } else {
        KlMode::Analytic
    };
    pass_with(g, model, x, mask, noise, mode, model.spec.kind.is_importance_weighted())
}

fn pass_with(
    g: &mut Graph<'_>,
    model: &Model,
    x: &Tensor,
    mask: &MaskPattern,
    noise: &Tensor,
    mode: KlMode,
    weighted: bool,
) -> Result<Pass> {
    let enc = model.encode_batch(g, x, mask)?;
    let draws = model.draw(g, enc, noise)?;
    let (lw, ll, mean, lv) = log_weights(g, model, x, mask, &draws)?;
    let bound = if weighted {
        log_mean_exp(g, lw, draws.reps)?
    } else {
        match mode {
            KlMode::Sampled => group_mean(g, lw, draws.reps)?,
            KlMode::Analytic => {
                if model.flow.is_some() || model.mask_head.is_some() {
                    return Err(Error::Contract("closed-form KL needs a Gaussian model without mask head".into()));
                }
                let llm = group_mean(g, ll, draws.reps)?;
                let kl = dist::g_kl_standard(g, enc.mean, enc.log_var)?;
                g.sub(llm, kl)?
            }
        }
    };
    Ok(Pass {
        draws,
        dec_mean: mean,
        dec_log_var: lv,
        loglik: ll,
        bound,
    })
}

/// Partial ELBO: masked log-likelihood over `q_mask` minus the KL to the
/// prior, averaged over rows.
pub fn elbo_partial(
    g: &mut Graph<'_>,
    model: &Model,
    x: &Tensor,
    q_mask: &MaskPattern,
    noise: &Tensor,
    mode: KlMode,
) -> Result<Objective> {
    let pass = pass_with(g, model, x, q_mask, noise, mode, false)?;
    let total = g.mean_all(pass.bound);
    Ok(Objective {
        total,
        breakdown: LossBreakdown::plain(g.scalar(total)),
    })
}

/// Importance-weighted bound with `noise.rows() / n` samples per row.
pub fn miwae_bound(g: &mut Graph<'_>, model: &Model, x: &Tensor, q_mask: &MaskPattern, noise: &Tensor) -> Result<Objective> {
    let pass = pass_with(g, model, x, q_mask, noise, KlMode::Sampled, true)?;
    let total = g.mean_all(pass.bound);
    Ok(Objective {
        total,
        breakdown: LossBreakdown::plain(g.scalar(total)),
    })
}

/// Importance-weighted bound whose log-weights include the self-masking
/// term `log p(m | x̂)`; `m_mask` is the observation pattern.
pub fn not_miwae_bound(g: &mut Graph<'_>, model: &Model, x: &Tensor, m_mask: &MaskPattern, noise: &Tensor) -> Result<Objective> {
    if model.mask_head.is_none() {
        return Err(Error::Contract("not-MIWAE bound needs a mask head".into()));
    }
    miwae_bound(g, model, x, m_mask, noise)
}

/// The two parts of the MNAR flow ELBO, per-row means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MnarFlowTerms {
    pub flow_elbo: f64,
    pub mask_log_mass: f64,
}

/// Single-sample flow ELBO plus `E_q[log p(m | z)]` on the decoder
/// completion.
pub fn mnar_flow_elbo(
    g: &mut Graph<'_>,
    model: &Model,
    x: &Tensor,
    m_mask: &MaskPattern,
    noise: &Tensor,
) -> Result<(Objective, MnarFlowTerms)> {
    let (Some(_), Some(head)) = (&model.flow, &model.mask_head) else {
        return Err(Error::Contract("MNAR flow ELBO needs a flow and a mask head".into()));
    };
    let enc = model.encode_batch(g, x, m_mask)?;
    let draws = model.draw(g, enc, noise)?;
    let (mean, lv) = model.decoder.forward(g, draws.z)?;
    let ll = g_masked_log_likelihood(g, x, m_mask, mean, lv, draws.reps)?;
    let lp = log_prior(g, draws.z)?;
    let a = g.add(ll, lp)?;
    let a = g.sub(a, draws.log_q)?;
    let x_hat = g_complete(g, x, m_mask, mean, draws.reps)?;
    let pi = head.forward(g, x_hat)?;
    let m = m_mask.to_tensor().repeat_rows(draws.reps);
    let b = dist::g_bernoulli_log_mass(g, &m, pi)?;
    let a = group_mean(g, a, draws.reps)?;
    let b = group_mean(g, b, draws.reps)?;
    let a = g.mean_all(a);
    let b = g.mean_all(b);
    let total = g.add(a, b)?;
    let terms = MnarFlowTerms {
        flow_elbo: g.scalar(a),
        mask_log_mass: g.scalar(b),
    };
    Ok((
        Objective {
            total,
            breakdown: LossBreakdown::plain(g.scalar(total)),
        },
        terms,
    ))
}

/// Consistency-regularized objective
/// `elbo_Q - λ (KL(q_Q || q_P) - log p(x_{Q∖P} | z_Q) - elbo_P + elbo_Q)`.
///
/// Each bound is the model's own (see [`model_pass`]); for self-masking
/// models the P-side bound uses `p_mask` as the observation pattern. The
/// KL is closed form for Gaussian posteriors and the log-ratio estimate at
/// the `z_Q` draws for flows.
#[allow(clippy::too_many_arguments)]
pub fn regularized_loss(
    g: &mut Graph<'_>,
    model: &Model,
    x: &Tensor,
    q_mask: &MaskPattern,
    p_mask: &MaskPattern,
    lambda: f64,
    noise_q: &Tensor,
    noise_p: &Tensor,
) -> Result<Objective> {
    p_mask.check_shape(q_mask.rows(), q_mask.cols(), "P mask")?;
    if !p_mask.is_subset_of(q_mask) {
        return Err(Error::Contract("P mask observes a cell that Q does not".into()));
    }
    let pq = model_pass(g, model, x, q_mask, noise_q)?;
    let pp = model_pass(g, model, x, p_mask, noise_p)?;
    let reps = pq.draws.reps;

    let kl = match &model.flow {
        None => {
            let (eq, ep) = (pq.draws.enc, pp.draws.enc);
            dist::g_kl(g, eq.mean, eq.log_var, ep.mean, ep.log_var)?
        }
        Some(_) => {
            let lq = model.log_q_at(g, pq.draws.enc, pq.draws.z, reps)?;
            let lp = model.log_q_at(g, pp.draws.enc, pq.draws.z, reps)?;
            let d = g.sub(lq, lp)?;
            group_mean(g, d, reps)?
        }
    };
    let pbar = q_mask.difference(p_mask);
    let llp = g_masked_log_likelihood(g, x, &pbar, pq.dec_mean, pq.dec_log_var, reps)?;
    let llp = group_mean(g, llp, reps)?;

    let elbo_q = g.mean_all(pq.bound);
    let elbo_p = g.mean_all(pp.bound);
    let kl_qp = g.mean_all(kl);
    let loglik_pbar = g.mean_all(llp);

    let br = g.sub(kl_qp, loglik_pbar)?;
    let br = g.sub(br, elbo_p)?;
    let br = g.add(br, elbo_q)?;
    let scaled = g.scale(br, lambda);
    let total = g.sub(elbo_q, scaled)?;

    let breakdown = LossBreakdown::compose(
        lambda,
        g.scalar(elbo_q),
        g.scalar(elbo_p),
        g.scalar(kl_qp),
        g.scalar(loglik_pbar),
    );
    debug_assert_eq!(breakdown.total.to_bits(), g.scalar(total).to_bits());
    Ok(Objective { total, breakdown })
}

/// The model's own bound, as an objective.
pub fn model_bound(g: &mut Graph<'_>, model: &Model, x: &Tensor, mask: &MaskPattern, noise: &Tensor) -> Result<Objective> {
    let pass = model_pass(g, model, x, mask, noise)?;
    let total = g.mean_all(pass.bound);
    Ok(Objective {
        total,
        breakdown: LossBreakdown::plain(g.scalar(total)),
    })
}
