//! Greedy feature acquisition driven by the posterior information reward,
//! and the information curves it produces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::impute;
use crate::missingness::MaskPattern;
use crate::model::Model;
use crate::numcore::dist::reparam_sample;
use crate::numcore::{Graph, Tensor};

/// Draws per flow KL estimate.
pub const FLOW_KL_SAMPLES: usize = 10;

/// Observed values, candidates and target for one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionState {
    pub d: usize,
    pub target: usize,
    /// Acquired `(feature, value)` pairs in acquisition order.
    pub observed: Vec<(usize, f64)>,
    /// Candidates, ascending.
    pub unobserved: Vec<usize>,
    /// Squared target error after each step, starting with no observations.
    pub errors: Vec<f64>,
}

impl AcquisitionState {
    /// Nothing observed; every `available` feature except the target is a
    /// candidate.
    pub fn new(d: usize, target: usize, available: &[usize]) -> Result<Self> {
        if target >= d {
            return Err(Error::Config(format!("target {target} outside {d} features")));
        }
        let mut unobserved: Vec<usize> = available.iter().copied().filter(|&j| j != target).collect();
        unobserved.sort_unstable();
        unobserved.dedup();
        if let Some(&j) = unobserved.iter().find(|&&j| j >= d) {
            return Err(Error::Config(format!("feature {j} outside {d} features")));
        }
        Ok(Self {
            d,
            target,
            observed: Vec::new(),
            unobserved,
            errors: Vec::new(),
        })
    }

    pub fn is_observed(&self, j: usize) -> bool {
        self.observed.iter().any(|&(k, _)| k == j)
    }

    /// Dense row and mask with the observed values filled in.
    pub fn row(&self) -> (Vec<f64>, Vec<bool>) {
        let mut x = vec![0.0; self.d];
        let mut m = vec![false; self.d];
        for &(j, v) in &self.observed {
            x[j] = v;
            m[j] = true;
        }
        (x, m)
    }

    pub fn acquire(&mut self, i: usize, value: f64) -> Result<()> {
        let pos = self
            .unobserved
            .iter()
            .position(|&j| j == i)
            .ok_or_else(|| Error::Contract(format!("feature {i} is not a candidate")))?;
        self.unobserved.remove(pos);
        self.observed.push((i, value));
        Ok(())
    }
}

fn normals<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

fn observed_row(d: usize, observed: &[(usize, f64)]) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut x = vec![0.0; d];
    let mut m = vec![false; d];
    for &(j, v) in observed {
        if j >= d {
            return Err(Error::Dimension(format!("feature {j} outside {d} features")));
        }
        x[j] = v;
        m[j] = true;
    }
    Ok((x, m))
}

/// `samples` joint draws of the `features` coordinates from the posterior
/// predictive given `observed`: one `z` per draw, then one decoder draw.
/// The generator yields all `z` noise first, then the decoder noise.
pub fn sample_predictive<R: Rng + ?Sized>(
    model: &Model,
    observed: &[(usize, f64)],
    features: &[usize],
    samples: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if samples == 0 {
        return Err(Error::Config("predictive sampling needs at least one sample".into()));
    }
    let d = model.d();
    let (x, m) = observed_row(d, observed)?;
    if let Some(&j) = features.iter().find(|&&j| j >= d || m[j]) {
        return Err(Error::Contract(format!("feature {j} is observed or out of range")));
    }
    let parts = model.posterior_parts(&x, &m)?;
    let k = model.latent();
    let noise = normals(rng, samples, k);
    let z = match model.flow_posterior(parts.0.clone(), parts.1.clone()) {
        Some(q) => q.sample_and_logprob(&noise)?.0,
        None => {
            let mut data = Vec::with_capacity(samples * k);
            for s in 0..samples {
                data.extend(reparam_sample(&parts.0, noise.row_slice(s))?);
            }
            Tensor::from_vec(samples, k, data)?
        }
    };
    if features.is_empty() {
        return Ok(vec![Vec::new(); samples]);
    }
    let mut g = Graph::new(&model.store);
    let zv = g.constant(z);
    let (mean, lv) = model.decoder.forward(&mut g, zv)?;
    let (mean, lv) = (g.value(mean), g.value(lv));
    let eps = normals(rng, samples, features.len());
    Ok((0..samples)
        .map(|s| {
            features
                .iter()
                .enumerate()
                .map(|(c, &j)| mean.get(s, j) + (0.5 * lv.get(s, j)).exp() * eps.get(s, c))
                .collect()
        })
        .collect())
}

/// Per-candidate work drawn before the batched encoder pass.
struct Plan {
    draws: Vec<Vec<f64>>,
    kl_noise: Vec<Tensor>,
}

/// Rewards for `candidates` in order. Each candidate consumes the
/// generator as one [`information_reward`] call would.
pub fn information_rewards<R: Rng + ?Sized>(
    model: &Model,
    state: &AcquisitionState,
    candidates: &[usize],
    s_outer: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if s_outer == 0 {
        return Err(Error::Config("information reward needs at least one outer sample".into()));
    }
    if state.d != model.d() {
        return Err(Error::Dimension(format!("state has {} features, model {}", state.d, model.d())));
    }
    let t = state.target;
    for &i in candidates {
        if i == t || state.is_observed(i) || i >= state.d {
            return Err(Error::Contract(format!("feature {i} is observed, the target, or out of range")));
        }
    }
    let flow = model.flow.is_some();
    let mut plans = Vec::with_capacity(candidates.len());
    for &i in candidates {
        let draws = sample_predictive(model, &state.observed, &[t, i], s_outer, rng)?;
        let kl_noise = if flow {
            (0..2 * s_outer).map(|_| normals(rng, FLOW_KL_SAMPLES, model.latent())).collect()
        } else {
            Vec::new()
        };
        plans.push(Plan { draws, kl_noise });
    }

    // Rows: O, then per candidate and draw: O+i, O+t+i, O+t.
    let (base_x, base_m) = state.row();
    let d = state.d;
    let rows = 1 + 3 * s_outer * candidates.len();
    let mut x = Vec::with_capacity(rows * d);
    let mut m = Vec::with_capacity(rows * d);
    x.extend(&base_x);
    m.extend(&base_m);
    for (&i, plan) in candidates.iter().zip(&plans) {
        for draw in &plan.draws {
            let (vt, vi) = (draw[0], draw[1]);
            for (with_t, with_i) in [(false, true), (true, true), (true, false)] {
                let (mut rx, mut rm) = (base_x.clone(), base_m.clone());
                if with_t {
                    rx[t] = vt;
                    rm[t] = true;
                }
                if with_i {
                    rx[i] = vi;
                    rm[i] = true;
                }
                x.extend(rx);
                m.extend(rm);
            }
        }
    }
    let parts = model.posterior_parts_batch(&Tensor::from_vec(rows, d, x)?, &MaskPattern::from_vec(rows, d, m)?)?;
    let empty = Tensor::zeros(0, model.latent());
    let mut out = Vec::with_capacity(candidates.len());
    for (c, plan) in plans.iter().enumerate() {
        let mut gain = 0.0;
        let mut cond = 0.0;
        for s in 0..s_outer {
            let r = 1 + 3 * (c * s_outer + s);
            let (n1, n2) = if flow {
                (&plan.kl_noise[2 * s], &plan.kl_noise[2 * s + 1])
            } else {
                (&empty, &empty)
            };
            gain += model.posterior_kl(&parts[r], &parts[0], n1)?;
            cond += model.posterior_kl(&parts[r + 1], &parts[r + 2], n2)?;
        }
        out.push(gain / s_outer as f64 - cond / s_outer as f64);
    }
    Ok(out)
}

/// Expected information about the target gained by acquiring `i`.
pub fn information_reward<R: Rng + ?Sized>(
    model: &Model,
    state: &AcquisitionState,
    i: usize,
    s_outer: usize,
    rng: &mut R,
) -> Result<f64> {
    Ok(information_rewards(model, state, &[i], s_outer, rng)?[0])
}

/// Index of the largest reward; ties go to the first.
pub fn argmax_lowest(rewards: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &r) in rewards.iter().enumerate() {
        if best.is_none_or(|b| r > rewards[b]) {
            best = Some(k);
        }
    }
    best
}

/// The candidate with the highest reward, lowest index on ties.
pub fn select_next<R: Rng + ?Sized>(model: &Model, state: &AcquisitionState, s_outer: usize, rng: &mut R) -> Result<usize> {
    if state.unobserved.is_empty() {
        return Err(Error::Contract("no candidates left to acquire".into()));
    }
    let rewards = information_rewards(model, state, &state.unobserved, s_outer, rng)?;
    Ok(state.unobserved[argmax_lowest(&rewards).expect("non-empty")])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcConfig {
    pub target: usize,
    pub max_steps: usize,
    pub s_outer: usize,
    pub s_impute: usize,
    pub seed: u64,
    /// Worker threads over rows.
    pub jobs: usize,
}

impl Default for IcConfig {
    fn default() -> Self {
        Self {
            target: 0,
            max_steps: 5,
            s_outer: 10,
            s_impute: 100,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Per-step target errors over test rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InformationCurve {
    /// Squared error per row and step.
    pub per_row: Vec<Vec<f64>>,
    /// Features acquired per row, in order.
    pub picks: Vec<Vec<usize>>,
    pub mse: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl InformationCurve {
    pub fn rmse(&self) -> Vec<f64> {
        self.mse.iter().map(|v| v.sqrt()).collect()
    }

    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = comment {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("step,mse,std_err,rmse\n");
        for (s, ((m, e), r)) in self.mse.iter().zip(&self.std_err).zip(self.rmse()).enumerate() {
            out.push_str(&format!("{s},{m},{e},{r}\n"));
        }
        out
    }
}

fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x1c00_0000 + row as u64);
    rng
}

fn predict_target(model: &Model, state: &AcquisitionState, s_impute: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (x, m) = state.row();
    let d = state.d;
    let imputed = impute(model, &Tensor::row(&x), &MaskPattern::from_vec(1, d, m)?, s_impute, rng)?;
    Ok(imputed.get(0, state.target))
}

/// Greedy acquisition for one row of ground truth.
pub fn curve_row(
    model: &Model,
    truth: &[f64],
    available: &[usize],
    cfg: &IcConfig,
    row: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut rng = row_rng(cfg.seed, row);
    let mut state = AcquisitionState::new(truth.len(), cfg.target, available)?;
    let err = |p: f64| (p - truth[cfg.target]).powi(2);
    let first = predict_target(model, &state, cfg.s_impute, &mut rng)?;
    state.errors.push(err(first));
    let mut picks = Vec::new();
    for _ in 0..cfg.max_steps {
        if !state.unobserved.is_empty() {
            let i = select_next(model, &state, cfg.s_outer, &mut rng)?;
            state.acquire(i, truth[i])?;
            picks.push(i);
        }
        let p = predict_target(model, &state, cfg.s_impute, &mut rng)?;
        state.errors.push(err(p));
    }
    Ok((state.errors, picks))
}

/// Information curve over the rows of `truth`. `available` limits which
/// cells may be acquired (all when `None`). Each row uses its own
/// generator stream, so results do not depend on `jobs`.
pub fn information_curve(
    model: &Model,
    truth: &Tensor,
    available: Option<&MaskPattern>,
    cfg: &IcConfig,
) -> Result<InformationCurve> {
    let (n, d) = (truth.rows(), truth.cols());
    if d != model.d() {
        return Err(Error::Dimension(format!("model has {} features, data {d}", model.d())));
    }
    if n == 0 {
        return Err(Error::Data("information curve over no rows".into()));
    }
    if let Some(a) = available {
        a.check_shape(n, d, "acquisition availability")?;
    }
    let run = |r: usize| {
        let avail: Vec<usize> = (0..d).filter(|&j| available.is_none_or(|a| a.get(r, j))).collect();
        curve_row(model, truth.row_slice(r), &avail, cfg, r)
    };
    let jobs = cfg.jobs.clamp(1, n);
    let results: Vec<Result<(Vec<f64>, Vec<usize>)>> = if jobs == 1 {
        (0..n).map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<(Vec<f64>, Vec<usize>)>>> = (0..n).map(|_| None).collect();
        let per = n.div_ceil(jobs);
        std::thread::scope(|sc| {
            for (c, chunk) in slots.chunks_mut(per).enumerate() {
                let run = &run;
                sc.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run(c * per + k));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every row filled")).collect()
    };
    let mut per_row = Vec::with_capacity(n);
    let mut picks = Vec::with_capacity(n);
    for r in results {
        let (e, p) = r?;
        per_row.push(e);
        picks.push(p);
    }
    let steps = cfg.max_steps + 1;
    let mut mse = Vec::with_capacity(steps);
    let mut std_err = Vec::with_capacity(steps);
    for s in 0..steps {
        let col: Vec<f64> = per_row.iter().map(|e| e[s]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        mse.push(mean);
        std_err.push((var / n as f64).sqrt());
    }
    Ok(InformationCurve {
        per_row,
        picks,
        mse,
        std_err,
    })
}

/// Rows whose feature 0 copies the target (feature 1) and whose other
/// features are independent uniform noise.
pub fn duplicate_feature_synthetic(n: usize, d: usize, seed: u64) -> Result<Tensor> {
    if d < 3 {
        return Err(Error::Config("the duplicate synthetic needs at least 3 features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let t: f64 = rng.gen_range(0.05..0.95);
        data.push(t);
        data.push(t);
        for _ in 2..d {
            data.push(rng.gen_range(0.05..0.95));
        }
    }
    Tensor::from_vec(n, d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_lowest(&[0.0, 0.0]), Some(0));
        assert_eq!(argmax_lowest(&[]), None);
        let shifted: Vec<f64> = [0.2, -1.0, 0.7, 0.7].iter().map(|v| v + 5.0).collect();
        assert_eq!(argmax_lowest(&shifted), argmax_lowest(&[0.2, -1.0, 0.7, 0.7]));
    }

    #[test]
    fn state_moves_features() {
        let mut s = AcquisitionState::new(4, 1, &[3, 0, 1, 2]).unwrap();
        assert_eq!(s.unobserved, vec![0, 2, 3]);
        s.acquire(2, 0.5).unwrap();
        assert_eq!(s.unobserved, vec![0, 3]);
        assert_eq!(s.row(), (vec![0.0, 0.0, 0.5, 0.0], vec![false, false, true, false]));
        assert!(s.acquire(2, 0.1).is_err());
        assert!(s.acquire(1, 0.1).is_err());
    }
}
