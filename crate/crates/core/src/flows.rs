//! Flow posteriors: a diagonal Gaussian base pushed through a sigmoid, a
//! stack of piecewise-linear couplings on the unit cube, and a logit back to
//! the real line.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::dist::{self, DiagGaussian};
use crate::numcore::pwl::{self, PwlPoint};
use crate::numcore::{Activation, Graph, Mlp, ParamStore, Tensor, Var};

/// Bijection between the base space and the unit cube the couplings act on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    /// sigmoid on the way in, logit on the way out.
    Logistic,
    /// No boundary maps; only valid when there are no couplings or the base
    /// already lives in the unit interval.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSpec {
    pub layers: usize,
    pub bins: usize,
    /// Hidden width of each conditioner.
    pub hidden: usize,
    /// Width of the encoder context fed to every conditioner.
    pub context: usize,
    pub squash: Squash,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            bins: 10,
            hidden: 64,
            context: 8,
            squash: Squash::Logistic,
        }
    }
}

/// One coupling: coordinates `ident` pass through and condition the
/// piecewise-linear map applied to coordinates `trans`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PwlCoupling {
    pub ident: (usize, usize),
    pub trans: (usize, usize),
    pub bins: usize,
    pub conditioner: Mlp,
}

impl PwlCoupling {
    fn is_noop(&self) -> bool {
        self.trans.1 == 0
    }

    fn logits(&self, g: &mut Graph<'_>, u: Var, context: Option<Var>) -> Result<Var> {
        let mut parts = Vec::new();
        if self.ident.1 > 0 {
            parts.push(g.slice_cols(u, self.ident.0, self.ident.1)?);
        }
        if let Some(c) = context {
            parts.push(c);
        }
        let input = match parts.len() {
            0 => g.constant(Tensor::zeros(g.value(u).rows(), 0)),
            1 => parts[0],
            _ => g.concat_cols(&parts)?,
        };
        self.conditioner.forward(g, input)
    }

    /// Returns the mapped `u` and the per-row log-determinant `[rows, 1]`.
    pub fn apply(&self, g: &mut Graph<'_>, u: Var, context: Option<Var>, inverse: bool) -> Result<(Var, Var)> {
        let t = self.trans.1;
        let logits = self.logits(g, u, context)?;
        let ut = g.slice_cols(u, self.trans.0, t)?;
        let out = if inverse {
            g.pwl_inverse(ut, logits, self.bins)?
        } else {
            g.pwl_forward(ut, logits, self.bins)?
        };
        let mapped = g.slice_cols(out, 0, t)?;
        let lds = g.slice_cols(out, t, t)?;
        let ld = g.sum_cols(lds);
        let ui = g.slice_cols(u, self.ident.0, self.ident.1)?;
        let joined = if self.trans.0 == 0 {
            g.concat_cols(&[mapped, ui])?
        } else {
            g.concat_cols(&[ui, mapped])?
        };
        Ok((joined, ld))
    }

    /// Probabilities of every transformed coordinate given `u` and `context`,
    /// `[trans len][bins]`.
    pub fn bin_probs(&self, store: &ParamStore, u: &[f64], context: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(store);
        let uv = g.constant(Tensor::row(u));
        let cv = (!context.is_empty()).then(|| g.constant(Tensor::row(context)));
        let l = self.logits(&mut g, uv, cv)?;
        let lv = g.value(l).data().to_vec();
        Ok(lv
            .chunks(self.bins)
            .map(|c| {
                let mut p = vec![0.0; self.bins];
                pwl::softmax(c, &mut p);
                p
            })
            .collect())
    }
}

/// The couplings of a flow posterior; base parameters and context come from
/// the encoder at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStack {
    pub spec: FlowSpec,
    pub latent: usize,
    pub couplings: Vec<PwlCoupling>,
}

impl FlowStack {
    /// Conditioner output layers start at zero, so a fresh flow equals its
    /// base.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        latent: usize,
        spec: FlowSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.bins < 1 {
            return Err(Error::Config("flow needs at least one bin".into()));
        }
        if spec.layers > 0 && spec.squash == Squash::Identity {
            log::warn!("flow couplings with identity squash expect a base inside (0, 1)");
        }
        let half = latent / 2;
        let mut couplings = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let (ident, trans) = if l % 2 == 0 {
                ((0, half), (half, latent - half))
            } else {
                ((half, latent - half), (0, half))
            };
            let widths = [ident.1 + spec.context, spec.hidden, trans.1 * spec.bins];
            let conditioner = Mlp::new(
                store,
                &format!("{name}.{l}"),
                &widths,
                Activation::Elu,
                Activation::Identity,
                rng,
            )?;
            let last = conditioner.layers.last().unwrap().weight;
            let w = store.get_mut(last);
            *w = Tensor::zeros(w.rows(), w.cols());
            couplings.push(PwlCoupling {
                ident,
                trans,
                bins: spec.bins,
                conditioner,
            });
        }
        Ok(Self {
            spec,
            latent,
            couplings,
        })
    }

    fn squash_in(&self, g: &mut Graph<'_>, z0: Var) -> Result<(Var, Var)> {
        match self.spec.squash {
            Squash::Identity => {
                let rows = g.value(z0).rows();
                Ok((z0, g.constant(Tensor::zeros(rows, 1))))
            }
            Squash::Logistic => {
                // ln sigmoid'(x) = -softplus(x) - softplus(-x)
                let u = g.sigmoid(z0);
                let a = g.softplus(z0);
                let nz = g.neg(z0);
                let b = g.softplus(nz);
                let s = g.add(a, b)?;
                let s = g.sum_cols(s);
                Ok((u, g.neg(s)))
            }
        }
    }

    /// `(z, ln |dz/du|)` for the final unit-cube point `u`.
    fn squash_out(&self, g: &mut Graph<'_>, u: Var) -> Result<(Var, Var)> {
        match self.spec.squash {
            Squash::Identity => {
                let rows = g.value(u).rows();
                Ok((u, g.constant(Tensor::zeros(rows, 1))))
            }
            Squash::Logistic => {
                let u = g.clamp(u, pwl::UNIT_EPS, 1.0 - pwl::UNIT_EPS);
                let z = g.logit(u);
                let lu = g.ln(u);
                let om = g.affine(u, -1.0, 1.0);
                let lom = g.ln(om);
                let s = g.add(lu, lom)?;
                let s = g.sum_cols(s);
                Ok((z, g.neg(s)))
            }
        }
    }

    /// Reparameterized draw and its log-density. `mean`, `log_var` and
    /// `context` are per-draw rows; returns `(z, log q(z))` with
    /// `log q` of shape `[rows, 1]`.
    pub fn sample(
        &self,
        g: &mut Graph<'_>,
        mean: Var,
        log_var: Var,
        context: Option<Var>,
        noise: &Tensor,
    ) -> Result<(Var, Var)> {
        let z0 = dist::g_reparam(g, mean, log_var, noise)?;
        let base = dist::g_normal_log_pdf(g, z0, mean, log_var)?;
        let mut logq = g.sum_cols(base);
        let (mut u, ld_in) = self.squash_in(g, z0)?;
        logq = g.sub(logq, ld_in)?;
        for (i, c) in self.couplings.iter().enumerate() {
            if c.is_noop() {
                continue;
            }
            let (next, ld) = c.apply(g, u, context, false)?;
            if !g.value(ld).all_finite() {
                return Err(Error::Numeric(format!("coupling {i} produced a non-finite log-determinant")));
            }
            u = next;
            logq = g.sub(logq, ld)?;
        }
        let (z, ld_out) = self.squash_out(g, u)?;
        logq = g.sub(logq, ld_out)?;
        Ok((z, logq))
    }

    /// Inverse chain from `z` back to the base point `z0`. Returns `z0`,
    /// the input squash log-det at `z0`, the summed inverse coupling
    /// log-dets and the output squash log-det.
    fn invert(&self, g: &mut Graph<'_>, context: Option<Var>, z: Var) -> Result<(Var, Option<Var>, Option<Var>, Option<Var>)> {
        let (mut u, ld_out) = match self.spec.squash {
            Squash::Identity => (z, None),
            Squash::Logistic => {
                let u = g.sigmoid(z);
                let (_, ld) = self.squash_out(g, u)?;
                (u, Some(ld))
            }
        };
        let mut inv_total: Option<Var> = None;
        for (i, c) in self.couplings.iter().enumerate().rev() {
            if c.is_noop() {
                continue;
            }
            let (prev, ld) = c.apply(g, u, context, true)?;
            if !g.value(ld).all_finite() {
                return Err(Error::Numeric(format!("coupling {i} produced a non-finite log-determinant")));
            }
            u = prev;
            inv_total = Some(match inv_total {
                Some(t) => g.add(t, ld)?,
                None => ld,
            });
        }
        let (z0, ld_in) = match self.spec.squash {
            Squash::Identity => (u, None),
            Squash::Logistic => {
                let uc = g.clamp(u, pwl::UNIT_EPS, 1.0 - pwl::UNIT_EPS);
                let z0 = g.logit(uc);
                let (_, ld) = self.squash_in(g, z0)?;
                (z0, Some(ld))
            }
        };
        Ok((z0, ld_in, inv_total, ld_out))
    }

    /// Base point `z0` that `sample` maps to `z`.
    pub fn base_point(&self, g: &mut Graph<'_>, context: Option<Var>, z: Var) -> Result<Var> {
        Ok(self.invert(g, context, z)?.0)
    }

    /// `log q(z)` through the inverse chain, `[rows, 1]`.
    pub fn log_prob(
        &self,
        g: &mut Graph<'_>,
        mean: Var,
        log_var: Var,
        context: Option<Var>,
        z: Var,
    ) -> Result<Var> {
        // log q(z) = log base(z0) - ln|dz0->u0| - Σ fwd ld - ln|du_L->z|
        let (z0, ld_in, inv_total, ld_out) = self.invert(g, context, z)?;
        let base = dist::g_normal_log_pdf(g, z0, mean, log_var)?;
        let mut logq = g.sum_cols(base);
        if let Some(ld) = ld_in {
            logq = g.sub(logq, ld)?;
        }
        if let Some(t) = inv_total {
            // inverse log-dets are the negated forward ones
            logq = g.add(logq, t)?;
        }
        if let Some(ld) = ld_out {
            logq = g.sub(logq, ld)?;
        }
        Ok(logq)
    }
}

/// A flow posterior for one row: base Gaussian plus conditioner context.
#[derive(Clone, Debug)]
pub struct FlowPosterior<'a> {
    pub stack: &'a FlowStack,
    pub store: &'a ParamStore,
    pub base: DiagGaussian,
    pub context: Vec<f64>,
}

impl FlowPosterior<'_> {
    fn base_vars(&self, g: &mut Graph<'_>, rows: usize) -> (Var, Var, Option<Var>) {
        let mean = g.constant(Tensor::row(&self.base.mean).repeat_rows(rows));
        let lv = g.constant(Tensor::row(&self.base.log_var).repeat_rows(rows));
        let ctx = (!self.context.is_empty()).then(|| g.constant(Tensor::row(&self.context).repeat_rows(rows)));
        (mean, lv, ctx)
    }

    /// Draws one `z` per noise row; returns the draws and their `log q`.
    pub fn sample_and_logprob(&self, noise: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if noise.cols() != self.base.dim() {
            return Err(Error::Dimension(format!(
                "flow noise width {} for K = {}",
                noise.cols(),
                self.base.dim()
            )));
        }
        let mut g = Graph::new(self.store);
        let (m, lv, ctx) = self.base_vars(&mut g, noise.rows());
        let (z, lq) = self.stack.sample(&mut g, m, lv, ctx, noise)?;
        Ok((g.value(z).clone(), g.value(lq).data().to_vec()))
    }

    /// Base-distribution points that map to the rows of `z`.
    pub fn base_points(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(self.store);
        let (_, _, ctx) = self.base_vars(&mut g, z.rows());
        let zv = g.constant(z.clone());
        let z0 = self.stack.base_point(&mut g, ctx, zv)?;
        Ok(g.value(z0).clone())
    }

    pub fn log_prob(&self, z: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.store);
        let (m, lv, ctx) = self.base_vars(&mut g, z.rows());
        let zv = g.constant(z.clone());
        let lq = self.stack.log_prob(&mut g, m, lv, ctx, zv)?;
        Ok(g.value(lq).data().to_vec())
    }
}

/// `(1/M) Σ_m [log q_Q(z_m) - log q_P(z_m)]` with `z_m` drawn from `q_q`
/// using the `M` rows of `noises`. Both densities go through the inverse
/// chain, so identical posteriors give exactly zero.
pub fn flow_kl_estimate(q_q: &FlowPosterior<'_>, q_p: &FlowPosterior<'_>, noises: &Tensor) -> Result<f64> {
    if noises.rows() == 0 {
        return Err(Error::Contract("flow KL estimate needs at least one sample".into()));
    }
    let (z, _) = q_q.sample_and_logprob(noises)?;
    let lq = q_q.log_prob(&z)?;
    let lp = q_p.log_prob(&z)?;
    let total: f64 = lq.iter().zip(&lp).map(|(a, b)| a - b).sum();
    Ok(total / noises.rows() as f64)
}

/// Single-coordinate forward map of one coupling with explicit bin
/// probabilities; see [`pwl::forward`].
pub fn pwl_forward(u: f64, probs: &[f64]) -> PwlPoint {
    pwl::forward(u, probs)
}

pub fn pwl_inverse(v: f64, probs: &[f64]) -> PwlPoint {
    pwl::inverse(v, probs)
}
