//! Minibatch training with ADAM, optionally with the consistency
//! regularizer or artificial missingness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::PnpSpec;
use crate::error::{Error, Result};
use crate::flows::FlowSpec;
use crate::missingness::{am_rate, artificial_subset_with_stats, observed_column_stats, MaskPattern, MechanismSpec};
use crate::model::{Model, ModelKind, ModelSpec};
use crate::numcore::{Activation, AdamConfig, AdamState, Graph, Tensor};
use crate::objectives::{model_bound, regularized_loss, LossBreakdown, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Uniform,
    HalfFeatureMean,
    AllFeatureMean,
    HalfFeatureVariance,
    AllFeatureVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegSettings {
    pub enabled: bool,
    pub lambda: f64,
    /// Removal probability for the uniform mechanism.
    pub p_remove: f64,
    pub mechanism: MechanismKind,
}

impl Default for RegSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda: 1.0,
            p_remove: 0.3,
            mechanism: MechanismKind::Uniform,
        }
    }
}

impl RegSettings {
    pub fn mechanism_spec(&self) -> MechanismSpec {
        match self.mechanism {
            MechanismKind::Uniform => MechanismSpec::Uniform {
                p_remove: self.p_remove,
            },
            MechanismKind::HalfFeatureMean => MechanismSpec::HalfFeatureMean,
            MechanismKind::AllFeatureMean => MechanismSpec::AllFeatureMean,
            MechanismKind::HalfFeatureVariance => MechanismSpec::HalfFeatureVariance,
            MechanismKind::AllFeatureVariance => MechanismSpec::AllFeatureVariance,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmSettings {
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub reg: RegSettings,
    pub am: AmSettings,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub latent: usize,
    /// Importance samples per row for the MIWAE family.
    pub importance_samples: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub pnp: PnpSpec,
    pub flow: FlowSpec,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Pnp,
            reg: RegSettings::default(),
            am: AmSettings::default(),
            epochs: 3000,
            lr: 1e-3,
            batch: 64,
            latent: 10,
            importance_samples: 5,
            encoder_hidden: vec![100, 100, 100],
            decoder_hidden: vec![100, 100, 100, 100],
            activation: Activation::Elu,
            pnp: PnpSpec::default(),
            flow: FlowSpec::default(),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reg.enabled && self.am.enabled {
            return Err(Error::Config("reg and am cannot both be enabled".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.latent == 0 {
            return Err(Error::Config("latent must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.model.is_importance_weighted() && self.importance_samples == 0 {
            return Err(Error::Config("importance_samples must be at least 1".into()));
        }
        if self.reg.enabled {
            if !(self.reg.lambda >= 0.0 && self.reg.lambda.is_finite()) {
                return Err(Error::Config(format!("reg.lambda must be non-negative, got {}", self.reg.lambda)));
            }
            self.reg.mechanism_spec().validate()?;
            if self.reg.lambda != 0.0 && !(0.01..=1.5).contains(&self.reg.lambda) {
                log::warn!("reg.lambda {} outside the usual range [0.01, 1.5]", self.reg.lambda);
            }
            if self.reg.mechanism == MechanismKind::Uniform && !(0.01..=0.8).contains(&self.reg.p_remove) {
                log::warn!("reg.p_remove {} outside the usual range [0.01, 0.8]", self.reg.p_remove);
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, d: usize) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            d,
            latent: self.latent,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            activation: self.activation,
            pnp: self.pnp.clone(),
            flow: self.flow.clone(),
            importance_samples: if self.model.is_importance_weighted() {
                self.importance_samples
            } else {
                1
            },
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// SHA-256 of the JSON form of `value`, hex encoded.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// One epoch of training. `loss` is the negated objective (the quantity
/// ADAM descends); components are row-weighted epoch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub elbo_q: f64,
    pub elbo_p: f64,
    pub kl_qp: f64,
    pub loglik_pbar: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with a provenance comment line. Without `timing` the seconds
    /// column is written as 0 so the file is a pure function of the run.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = format!("# config_hash={} seed={}\n", self.config_hash, self.seed);
        out.push_str("epoch,loss,elbo_Q,elbo_P,kl_QP,loglik_Pbar,seconds\n");
        for r in &self.records {
            let secs = if timing { r.seconds } else { 0.0 };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.loss, r.elbo_q, r.elbo_p, r.kl_qp, r.loglik_pbar, secs
            );
        }
        out
    }
}

/// Epoch-shuffled index batches; the final short batch is kept.
pub fn minibatch_iter(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Artificial missingness for one step: observed cells dropped at a fresh
/// `U(0, 0.7)` rate. Returns the reduced mask and the rate.
pub fn train_am_step<R: Rng + ?Sized>(q_mask: &MaskPattern, rng: &mut R) -> (MaskPattern, f64) {
    let rate = am_rate(rng);
    let mut out = q_mask.clone();
    for i in 0..q_mask.rows() {
        for j in 0..q_mask.cols() {
            if q_mask.get(i, j) && rng.gen::<f64>() < rate {
                out.set(i, j, false);
            }
        }
    }
    (out, rate)
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

/// A fresh model for `cfg`, with mask-head offsets at the observed column
/// means of `x`.
pub fn init_model(cfg: &TrainConfig, x: &Tensor, q_mask: &MaskPattern) -> Result<Model> {
    let (means, _) = observed_column_stats(x, q_mask);
    let offsets: Vec<f64> = means.iter().map(|m| if m.is_finite() { *m } else { 0.5 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Model::new(cfg.model_spec(x.cols()), Some(&offsets), &mut rng)
}

/// Train on scaled values `x` observed where `q_mask` is set; hidden cells
/// are never read. `on_checkpoint` runs every `eval_every` epochs.
pub fn train_with(
    cfg: &TrainConfig,
    x: &Tensor,
    q_mask: &MaskPattern,
    on_checkpoint: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    q_mask.check_shape(x.rows(), x.cols(), "training mask")?;
    if x.rows() == 0 {
        return Err(Error::Data("no training rows".into()));
    }
    let mut model = init_model(cfg, x, q_mask)?;
    let mut adam = AdamState::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x5eed);
    let mechanism = cfg.reg.mechanism_spec();
    let stats = match mechanism {
        MechanismSpec::Uniform { .. } => None,
        _ => Some(observed_column_stats(x, q_mask)),
    };
    let reps = model.spec.samples_per_row();
    let k = model.latent();
    let mut log = TrainLog {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        records: Vec::with_capacity(cfg.epochs),
    };
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0; 5];
        let mut rows = 0usize;
        for (b, idx) in minibatch_iter(x.rows(), cfg.batch, cfg.seed, epoch).into_iter().enumerate() {
            let xb = x.select_rows(&idx);
            let qb = q_mask.select_rows(&idx);
            let n = idx.len();
            let mut g = Graph::new(&model.store);
            let obj: Objective = if cfg.reg.enabled {
                let pb = artificial_subset_with_stats(&qb, &xb, &mechanism, stats.as_ref(), &mut rng)?;
                let nq = standard_normal(&mut rng, n * reps, k);
                let np = standard_normal(&mut rng, n * reps, k);
                regularized_loss(&mut g, &model, &xb, &qb, &pb, cfg.reg.lambda, &nq, &np)?
            } else if cfg.am.enabled {
                let (reduced, _) = train_am_step(&qb, &mut rng);
                let noise = standard_normal(&mut rng, n * reps, k);
                model_bound(&mut g, &model, &xb, &reduced, &noise)?
            } else {
                let noise = standard_normal(&mut rng, n * reps, k);
                model_bound(&mut g, &model, &xb, &qb, &noise)?
            };
            let br: LossBreakdown = obj.breakdown;
            if !br.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {b}: {br:?}"
                )));
            }
            let mut grads = g.gradient(obj.total)?;
            drop(g);
            grads.scale(-1.0);
            adam.step(&mut model.store, &grads).map_err(|e| match e {
                Error::NonFiniteGradient(name) => Error::NonFiniteGradient(format!(
                    "{name} at epoch {epoch}, batch {b}; last breakdown {br:?}"
                )),
                other => other,
            })?;
            let w = n as f64;
            for (s, v) in sums.iter_mut().zip([br.total, br.elbo_q, br.elbo_p, br.kl_qp, br.loglik_pbar]) {
                *s += w * v;
            }
            rows += n;
        }
        let r = rows as f64;
        log.records.push(EpochRecord {
            epoch,
            loss: -sums[0] / r,
            elbo_q: sums[1] / r,
            elbo_p: sums[2] / r,
            kl_qp: sums[3] / r,
            loglik_pbar: sums[4] / r,
            seconds: start.elapsed().as_secs_f64(),
        });
        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && epoch != cfg.epochs {
            on_checkpoint(epoch, &model)?;
        }
    }
    on_checkpoint(cfg.epochs, &model)?;
    Ok((model, log))
}

pub fn train(cfg: &TrainConfig, x: &Tensor, q_mask: &MaskPattern) -> Result<(Model, TrainLog)> {
    train_with(cfg, x, q_mask, &mut |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once() {
        let b = minibatch_iter(5, 2, 3, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn epochs_shuffle_differently() {
        let a = minibatch_iter(50, 7, 3, 1).concat();
        let b = minibatch_iter(50, 7, 3, 2).concat();
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
        assert_eq!(a, minibatch_iter(50, 7, 3, 1).concat());
    }

    #[test]
    fn reg_and_am_are_exclusive() {
        let mut cfg = TrainConfig::default();
        cfg.reg.enabled = true;
        cfg.am.enabled = true;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_toml("model = \"zi\"\nepochz = 3\n").is_err());
        assert!(TrainConfig::from_toml("model = \"zi\"\n[reg]\nlamda = 3\n").is_err());
        let cfg = TrainConfig::from_toml("model = \"flow\"\nepochs = 7\n[reg]\nenabled = true\nlambda = 0.5\n").unwrap();
        assert_eq!(cfg.model, ModelKind::Flow);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.reg.lambda, 0.5);
        assert_eq!(cfg.batch, 64);
    }

    #[test]
    fn am_mask_is_a_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = MaskPattern::from_fn(20, 5, |i, j| (i + j) % 3 != 0);
        for _ in 0..50 {
            let (r, rate) = train_am_step(&q, &mut rng);
            assert!(r.is_subset_of(&q));
            assert!((0.0..=0.7).contains(&rate));
        }
    }
}
