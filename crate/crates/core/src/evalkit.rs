//! Imputation and evaluation metrics: RMSE on hidden cells, negative
//! expected log-likelihood of hidden cells, and test ELBO.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{split, Dataset, ScaleInfo};
use crate::error::{Error, Result};
use crate::missingness::{sample_mcar_mask, self_censoring_mask, MaskPattern};
use crate::model::Model;
use crate::numcore::dist::normal_log_pdf;
use crate::numcore::graph::logsumexp;
use crate::numcore::{Graph, Tensor};
use crate::objectives::{elbo_partial, weighted_draws, KlMode};
use crate::trainer::{train, TrainConfig, TrainLog};

/// Rows per graph during evaluation, to bound memory.
const CHUNK: usize = 32;

pub const DEFAULT_SAMPLES: usize = 100;

fn normals<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(CHUNK).map(move |s| (s..(s + CHUNK).min(n)).collect())
}

fn check(x: &Tensor, mask: &MaskPattern, model: &Model) -> Result<()> {
    if x.cols() != model.d() {
        return Err(Error::Dimension(format!("model has {} features, data {}", model.d(), x.cols())));
    }
    mask.check_shape(x.rows(), x.cols(), "evaluation mask")
}

/// Hidden-cell estimates `(row, col, value)` for the rows in `idx`.
fn impute_rows(model: &Model, x: &Tensor, q_mask: &MaskPattern, noise: &Tensor, s: usize, idx: &[usize]) -> Result<Vec<(usize, usize, f64)>> {
    let weighted = model.spec.kind.is_importance_weighted();
    let xb = x.select_rows(idx);
    let qb = q_mask.select_rows(idx);
    let nidx: Vec<usize> = idx.iter().flat_map(|&i| i * s..(i + 1) * s).collect();
    let nb = noise.select_rows(&nidx);
    let mut g = Graph::new(&model.store);
    let wd = weighted_draws(&mut g, model, &xb, &qb, &nb)?;
    let means = g.value(wd.dec_mean);
    let lw = g.value(wd.log_weights).data();
    let mut out = Vec::new();
    for (r, &i) in idx.iter().enumerate() {
        let rows = r * s..(r + 1) * s;
        let w: Vec<f64> = if weighted {
            let l = &lw[rows.clone()];
            let lse = logsumexp(l);
            l.iter().map(|v| (v - lse).exp()).collect()
        } else {
            vec![1.0 / s as f64; s]
        };
        for j in 0..x.cols() {
            if q_mask.get(i, j) {
                continue;
            }
            let v: f64 = rows.clone().zip(&w).map(|(k, wk)| wk * means.get(k, j)).sum();
            out.push((i, j, v));
        }
    }
    Ok(out)
}

/// Completed rows: observed cells copied, hidden cells the average of
/// decoder means over `noise.rows() / n` posterior draws per row (self-
/// normalized importance weights for the MIWAE family).
pub fn impute_with_noise(model: &Model, x: &Tensor, q_mask: &MaskPattern, noise: &Tensor) -> Result<Tensor> {
    impute_with_noise_jobs(model, x, q_mask, noise, 1)
}

/// As [`impute_with_noise`], spreading row chunks over `jobs` threads. The
/// result does not depend on `jobs`.
pub fn impute_with_noise_jobs(model: &Model, x: &Tensor, q_mask: &MaskPattern, noise: &Tensor, jobs: usize) -> Result<Tensor> {
    check(x, q_mask, model)?;
    let n = x.rows();
    if n == 0 {
        return Ok(x.clone());
    }
    if noise.rows() % n != 0 || noise.rows() == 0 {
        return Err(Error::Dimension(format!("{} noise rows for {n} data rows", noise.rows())));
    }
    let s = noise.rows() / n;
    let all: Vec<Vec<usize>> = chunks(n).collect();
    let jobs = jobs.clamp(1, all.len());
    let parts: Vec<Result<Vec<(usize, usize, f64)>>> = if jobs == 1 {
        all.iter().map(|idx| impute_rows(model, x, q_mask, noise, s, idx)).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|t| {
                    let mine: Vec<&Vec<usize>> = all.iter().skip(t).step_by(jobs).collect();
                    scope.spawn(move || {
                        mine.into_iter()
                            .map(|idx| impute_rows(model, x, q_mask, noise, s, idx))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("imputation worker panicked"))
                .collect()
        })
    };
    let mut out = x.clone();
    for part in parts {
        for (i, j, v) in part? {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

pub fn impute<R: Rng + ?Sized>(model: &Model, x: &Tensor, q_mask: &MaskPattern, samples: usize, rng: &mut R) -> Result<Tensor> {
    impute_jobs(model, x, q_mask, samples, rng, 1)
}

pub fn impute_jobs<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    q_mask: &MaskPattern,
    samples: usize,
    rng: &mut R,
    jobs: usize,
) -> Result<Tensor> {
    if samples == 0 {
        return Err(Error::Config("imputation needs at least one sample".into()));
    }
    let noise = normals(rng, x.rows() * samples, model.latent());
    impute_with_noise_jobs(model, x, q_mask, &noise, jobs)
}

/// `sqrt((1/n) Σ_i Σ_{j hidden} (x̂_ij − x_ij)²)`.
pub fn rmse_missing(imputed: &Tensor, truth: &Tensor, q_mask: &MaskPattern) -> Result<f64> {
    if imputed.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "imputed {:?} vs truth {:?}",
            imputed.shape(),
            truth.shape()
        )));
    }
    q_mask.check_shape(truth.rows(), truth.cols(), "rmse mask")?;
    if truth.rows() == 0 {
        return Err(Error::Data("rmse of no rows".into()));
    }
    let mut total = 0.0;
    for i in 0..truth.rows() {
        for j in 0..truth.cols() {
            if !q_mask.get(i, j) {
                let e = imputed.get(i, j) - truth.get(i, j);
                total += e * e;
            }
        }
    }
    Ok((total / truth.rows() as f64).sqrt())
}

/// `−E_q[log p(x_hidden | z)]` per row, averaged over rows. Rows without
/// hidden cells contribute 0.
pub fn neg_expected_llh<R: Rng + ?Sized>(
    model: &Model,
    truth: &Tensor,
    q_mask: &MaskPattern,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    check(truth, q_mask, model)?;
    if samples == 0 || truth.rows() == 0 {
        return Err(Error::Config("need at least one sample and one row".into()));
    }
    let n = truth.rows();
    let noise = normals(rng, n * samples, model.latent());
    let mut total = 0.0;
    for idx in chunks(n) {
        let xb = truth.select_rows(&idx);
        let qb = q_mask.select_rows(&idx);
        let nidx: Vec<usize> = idx.iter().flat_map(|&i| i * samples..(i + 1) * samples).collect();
        let mut g = Graph::new(&model.store);
        let enc = model.encode_batch(&mut g, &xb, &qb)?;
        let draws = model.draw(&mut g, enc, &noise.select_rows(&nidx))?;
        let (mean, lv) = model.decoder.forward(&mut g, draws.z)?;
        let (mean, lv) = (g.value(mean), g.value(lv));
        for (r, &i) in idx.iter().enumerate() {
            let mut row = 0.0;
            for k in r * samples..(r + 1) * samples {
                for j in 0..truth.cols() {
                    if !q_mask.get(i, j) {
                        row += normal_log_pdf(truth.get(i, j), mean.get(k, j), lv.get(k, j));
                    }
                }
            }
            total -= row / samples as f64;
        }
    }
    Ok(total / n as f64)
}

/// Mean per-row partial ELBO over `samples` posterior draws: closed-form
/// KL for Gaussian models, sampled log-ratio for flows and self-masking
/// models (whose ELBO includes the mask term).
pub fn test_elbo<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    q_mask: &MaskPattern,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    check(x, q_mask, model)?;
    if samples == 0 || x.rows() == 0 {
        return Err(Error::Config("need at least one sample and one row".into()));
    }
    let n = x.rows();
    let mode = if model.flow.is_some() || model.mask_head.is_some() {
        KlMode::Sampled
    } else {
        KlMode::Analytic
    };
    let noise = normals(rng, n * samples, model.latent());
    let mut total = 0.0;
    for idx in chunks(n) {
        let nidx: Vec<usize> = idx.iter().flat_map(|&i| i * samples..(i + 1) * samples).collect();
        let mut g = Graph::new(&model.store);
        let e = elbo_partial(
            &mut g,
            model,
            &x.select_rows(&idx),
            &q_mask.select_rows(&idx),
            &noise.select_rows(&nidx),
            mode,
        )?;
        total += e.breakdown.total * idx.len() as f64;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub model: String,
    pub reg: bool,
    pub lambda: f64,
    pub p_remove: f64,
    pub missing_rate: f64,
    pub seed: u64,
    pub rmse: Option<f64>,
    pub neg_llh: Option<f64>,
    pub elbo: Option<f64>,
}

impl MetricsRecord {
    pub const HEADER: &'static str = "dataset,model,reg,lambda,p_remove,missing_rate,seed,rmse,neg_llh,elbo";

    /// One CSV line; metrics not computed are written as `skipped`.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "skipped".to_string(), |x| x.to_string());
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.model,
            self.reg,
            self.lambda,
            self.p_remove,
            self.missing_rate,
            self.seed,
            opt(self.rmse),
            opt(self.neg_llh),
            opt(self.elbo)
        );
        s
    }
}

/// Seeded generator for evaluation draws.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xe7a1);
    rng
}

/// Seeded generator for benchmark MCAR masks.
pub fn mcar_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x3a5c);
    rng
}

/// How an imputation benchmark hides cells and which rows it scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    /// MCAR mask over all rows; train on a random split, score the test rows.
    HeldOut { missing_rate: f64, test_fraction: f64 },
    /// Self-censoring mask; train and score on every row.
    SelfCensorWhole,
}

impl Protocol {
    pub fn missing_rate(&self) -> f64 {
        match *self {
            Protocol::HeldOut { missing_rate, .. } => missing_rate,
            Protocol::SelfCensorWhole => f64::NAN,
        }
    }
}

/// Scaled inputs for one benchmark run.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Ground truth in scaled units.
    pub truth: Tensor,
    /// Model input: scaled values with hidden cells zeroed.
    pub x: Tensor,
    pub mask: MaskPattern,
    pub scale: ScaleInfo,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Build the mask, split and scaling for `protocol`, all seeded by `seed`.
pub fn prepare(ds: &Dataset, protocol: Protocol, seed: u64) -> Result<Prepared> {
    if ds.observed.count_observed() != ds.rows() * ds.cols() {
        return Err(Error::Data("benchmarks need a fully observed ground truth".into()));
    }
    let (n, d) = (ds.rows(), ds.cols());
    let (mask, train, test, fit) = match protocol {
        Protocol::HeldOut {
            missing_rate,
            test_fraction,
        } => {
            let parts = split(n, test_fraction, seed)?;
            let mask = sample_mcar_mask(n, d, missing_rate, &mut mcar_rng(seed))?;
            let mut in_train = vec![false; n];
            for &i in &parts.train {
                in_train[i] = true;
            }
            let fit = MaskPattern::from_fn(n, d, |i, j| in_train[i] && mask.get(i, j));
            (mask, parts.train, parts.test, fit)
        }
        Protocol::SelfCensorWhole => {
            let mask = self_censoring_mask(&ds.values);
            let all: Vec<usize> = (0..n).collect();
            (mask, all.clone(), all, MaskPattern::full(n, d, true))
        }
    };
    let scale = ScaleInfo::fit(ds, &fit, &ds.columns)?;
    let truth = scale.apply(&ds.values);
    let mut x = truth.clone();
    for i in 0..n {
        for j in 0..d {
            if !mask.get(i, j) {
                x.set(i, j, 0.0);
            }
        }
    }
    Ok(Prepared {
        truth,
        x,
        mask,
        scale,
        train,
        test,
    })
}

pub struct RunOutput {
    pub record: MetricsRecord,
    pub model: Model,
    pub log: TrainLog,
    pub prepared: Prepared,
}

/// Train `cfg` on the prepared rows and score imputation of the hidden
/// cells of the evaluation rows with `samples` posterior draws.
pub fn run_imputation(name: &str, ds: &Dataset, cfg: &TrainConfig, protocol: Protocol, samples: usize) -> Result<RunOutput> {
    let prepared = prepare(ds, protocol, cfg.seed)?;
    let p = &prepared;
    let (model, log) = train(cfg, &p.x.select_rows(&p.train), &p.mask.select_rows(&p.train))?;
    let xt = p.x.select_rows(&p.test);
    let qt = p.mask.select_rows(&p.test);
    let truth = p.truth.select_rows(&p.test);
    let mut rng = eval_rng(cfg.seed);
    let imputed = impute(&model, &xt, &qt, samples, &mut rng)?;
    let rmse = rmse_missing(&imputed, &truth, &qt)?;
    let neg_llh = neg_expected_llh(&model, &truth, &qt, samples, &mut rng)?;
    let elbo = test_elbo(&model, &xt, &qt, samples, &mut rng)?;
    let (lambda, p_remove) = if cfg.reg.enabled {
        (cfg.reg.lambda, cfg.reg.p_remove)
    } else {
        (0.0, 0.0)
    };
    let record = MetricsRecord {
        dataset: name.to_string(),
        model: cfg.model.name().to_string(),
        reg: cfg.reg.enabled,
        lambda,
        p_remove,
        missing_rate: protocol.missing_rate(),
        seed: cfg.seed,
        rmse: Some(rmse),
        neg_llh: Some(neg_llh),
        elbo: Some(elbo),
    };
    Ok(RunOutput {
        record,
        model,
        log,
        prepared,
    })
}

/// Outcome of a regularizer grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub lambda: f64,
    pub p_remove: f64,
    /// `(lambda, p_remove, rmse)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64, f64)>,
}

/// Pick `(λ, 𝒫)` for a regularized model by imputation quality on the
/// training rows only: a `holdout` fraction of the observed training cells
/// is hidden, the model trains on the rest, and the hidden cells are
/// scored. Ties keep the earlier grid point.
#[allow(clippy::too_many_arguments)]
pub fn tune_regularizer(
    ds: &Dataset,
    cfg: &TrainConfig,
    protocol: Protocol,
    lambdas: &[f64],
    p_removes: &[f64],
    holdout: f64,
    samples: usize,
) -> Result<TuneResult> {
    if lambdas.is_empty() || p_removes.is_empty() {
        return Err(Error::Config("empty tuning grid".into()));
    }
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Error::Config(format!("holdout fraction {holdout} outside (0, 1)")));
    }
    let p = prepare(ds, protocol, cfg.seed)?;
    let x = p.x.select_rows(&p.train);
    let truth = p.truth.select_rows(&p.train);
    let q = p.mask.select_rows(&p.train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7e11);
    let hidden = MaskPattern::from_fn(q.rows(), q.cols(), |i, j| q.get(i, j) && rng.gen::<f64>() < holdout);
    let fit_mask = MaskPattern::from_fn(q.rows(), q.cols(), |i, j| q.get(i, j) && !hidden.get(i, j));
    let mut fit_x = x.clone();
    for i in 0..q.rows() {
        for j in 0..q.cols() {
            if hidden.get(i, j) {
                fit_x.set(i, j, 0.0);
            }
        }
    }
    let scored = hidden.complement();
    let mut scores = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    for &lambda in lambdas {
        for &p_remove in p_removes {
            let mut c = cfg.clone();
            c.reg.enabled = true;
            c.reg.lambda = lambda;
            c.reg.p_remove = p_remove;
            let (model, _) = train(&c, &fit_x, &fit_mask)?;
            let imputed = impute(&model, &fit_x, &fit_mask, samples, &mut eval_rng(cfg.seed))?;
            let r = rmse_missing(&imputed, &truth, &scored)?;
            log::info!("tune lambda={lambda} p_remove={p_remove}: rmse {r:.5}");
            scores.push((lambda, p_remove, r));
            if best.is_none_or(|b| r < b.2) {
                best = Some((lambda, p_remove, r));
            }
        }
    }
    let (lambda, p_remove, _) = best.expect("non-empty grid");
    Ok(TuneResult {
        lambda,
        p_remove,
        scores,
    })
}
