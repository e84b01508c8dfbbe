//! A trainable model: encoder, decoder head, optional flow and self-masking
//! head, all sharing one [`ParamStore`]. Also the JSON checkpoint format.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ScaleInfo;
use crate::encoders::{DecoderHead, Encoded, Encoder, EncoderKind, EncoderSpec, MaskHead, PnpSpec};
use crate::error::{Error, Result};
use crate::flows::{FlowPosterior, FlowSpec, FlowStack};
use crate::missingness::MaskPattern;
use crate::numcore::dist::{self, DiagGaussian};
use crate::numcore::{Activation, Graph, ParamStore, Tensor, Var};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Zi,
    MaskZi,
    Pnp,
    Flow,
    Miwae,
    NotMiwae,
    FlowMnar,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Zi,
        ModelKind::MaskZi,
        ModelKind::Pnp,
        ModelKind::Flow,
        ModelKind::Miwae,
        ModelKind::NotMiwae,
        ModelKind::FlowMnar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Zi => "zi",
            ModelKind::MaskZi => "mask_zi",
            ModelKind::Pnp => "pnp",
            ModelKind::Flow => "flow",
            ModelKind::Miwae => "miwae",
            ModelKind::NotMiwae => "not_miwae",
            ModelKind::FlowMnar => "flow_mnar",
        }
    }

    pub fn encoder_kind(self) -> EncoderKind {
        match self {
            ModelKind::Zi | ModelKind::Miwae | ModelKind::NotMiwae => EncoderKind::Zi,
            ModelKind::MaskZi => EncoderKind::MaskZi,
            ModelKind::Pnp => EncoderKind::Pnp,
            ModelKind::Flow | ModelKind::FlowMnar => EncoderKind::FlowInput,
        }
    }

    pub fn is_flow(self) -> bool {
        matches!(self, ModelKind::Flow | ModelKind::FlowMnar)
    }

    /// Models with a Bernoulli self-masking term.
    pub fn is_mnar(self) -> bool {
        matches!(self, ModelKind::NotMiwae | ModelKind::FlowMnar)
    }

    /// Models trained on an importance-weighted bound.
    pub fn is_importance_weighted(self) -> bool {
        matches!(self, ModelKind::Miwae | ModelKind::NotMiwae)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub d: usize,
    pub latent: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub pnp: PnpSpec,
    pub flow: FlowSpec,
    /// Importance samples `M` per row for the weighted bounds.
    pub importance_samples: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, d: usize, latent: usize) -> Self {
        Self {
            kind,
            d,
            latent,
            encoder_hidden: vec![100, 100, 100],
            decoder_hidden: vec![100, 100, 100, 100],
            activation: Activation::Elu,
            pnp: PnpSpec::default(),
            flow: FlowSpec::default(),
            importance_samples: if kind.is_importance_weighted() { 5 } else { 1 },
        }
    }

    /// Posterior samples per row used by this model's training bound.
    pub fn samples_per_row(&self) -> usize {
        if self.kind.is_importance_weighted() {
            self.importance_samples.max(1)
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: DecoderHead,
    pub flow: Option<FlowStack>,
    pub mask_head: Option<MaskHead>,
}

/// Posterior draws for a batch: `reps` consecutive rows of `z` per data row.
#[derive(Clone, Copy, Debug)]
pub struct Draws {
    pub enc: Encoded,
    pub z: Var,
    /// `log q(z)` along the sampling path, `[rows * reps, 1]`.
    pub log_q: Var,
    pub reps: usize,
}

impl Model {
    /// `mask_offsets` seeds the self-masking thresholds (one per feature);
    /// ignored by models without a mask head. Defaults to 0.5.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, mask_offsets: Option<&[f64]>, rng: &mut R) -> Result<Self> {
        if spec.latent == 0 || spec.d == 0 {
            return Err(Error::Config("model needs d >= 1 and K >= 1".into()));
        }
        let mut store = ParamStore::new();
        let flow_ctx = if spec.kind.is_flow() { spec.flow.context } else { 0 };
        let enc_spec = EncoderSpec {
            kind: spec.kind.encoder_kind(),
            d: spec.d,
            latent: spec.latent,
            hidden: spec.encoder_hidden.clone(),
            activation: spec.activation,
            context: flow_ctx,
            pnp: spec.pnp.clone(),
        };
        let encoder = Encoder::new(&mut store, "enc", enc_spec, rng)?;
        let decoder = DecoderHead::new(
            &mut store,
            "dec",
            spec.latent,
            &spec.decoder_hidden,
            spec.d,
            spec.activation,
            rng,
        )?;
        let flow = if spec.kind.is_flow() {
            Some(FlowStack::new(&mut store, "flow", spec.latent, spec.flow.clone(), rng)?)
        } else {
            None
        };
        let mask_head = if spec.kind.is_mnar() {
            let offsets = match mask_offsets {
                Some(o) if o.len() == spec.d => o.to_vec(),
                Some(o) => {
                    return Err(Error::Dimension(format!("{} mask offsets for {} features", o.len(), spec.d)));
                }
                None => vec![0.5; spec.d],
            };
            Some(MaskHead::new(&mut store, "mask", &offsets))
        } else {
            None
        };
        Ok(Self {
            spec,
            store,
            encoder,
            decoder,
            flow,
            mask_head,
        })
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn latent(&self) -> usize {
        self.spec.latent
    }

    pub fn encode_batch(&self, g: &mut Graph<'_>, x: &Tensor, mask: &MaskPattern) -> Result<Encoded> {
        self.encoder.forward(g, x, mask)
    }

    /// Reparameterized draws, `noise.rows() / rows` per row of the encoding.
    pub fn draw(&self, g: &mut Graph<'_>, enc: Encoded, noise: &Tensor) -> Result<Draws> {
        let rows = g.value(enc.mean).rows();
        if rows == 0 || noise.rows() % rows != 0 || noise.cols() != self.latent() {
            return Err(Error::Dimension(format!(
                "noise {:?} for {rows} rows with K = {}",
                noise.shape(),
                self.latent()
            )));
        }
        let reps = noise.rows() / rows;
        let (mean, lv, ctx) = self.expand(g, enc, reps)?;
        let (z, log_q) = match &self.flow {
            Some(stack) => stack.sample(g, mean, lv, ctx, noise)?,
            None => {
                let z = dist::g_reparam(g, mean, lv, noise)?;
                let lp = dist::g_normal_log_pdf(g, z, mean, lv)?;
                (z, g.sum_cols(lp))
            }
        };
        Ok(Draws { enc, z, log_q, reps })
    }

    /// `log q(z | enc)` for `reps` rows of `z` per encoded row. Flows go
    /// through the inverse chain.
    pub fn log_q_at(&self, g: &mut Graph<'_>, enc: Encoded, z: Var, reps: usize) -> Result<Var> {
        let (mean, lv, ctx) = self.expand(g, enc, reps)?;
        match &self.flow {
            Some(stack) => stack.log_prob(g, mean, lv, ctx, z),
            None => {
                let lp = dist::g_normal_log_pdf(g, z, mean, lv)?;
                Ok(g.sum_cols(lp))
            }
        }
    }

    fn expand(&self, g: &mut Graph<'_>, enc: Encoded, reps: usize) -> Result<(Var, Var, Option<Var>)> {
        if reps == 1 {
            return Ok((enc.mean, enc.log_var, enc.context));
        }
        let mean = g.repeat_rows(enc.mean, reps)?;
        let lv = g.repeat_rows(enc.log_var, reps)?;
        let ctx = match enc.context {
            Some(c) => Some(g.repeat_rows(c, reps)?),
            None => None,
        };
        Ok((mean, lv, ctx))
    }

    /// Base Gaussian and flow context for one row.
    pub fn posterior_parts(&self, x_row: &[f64], mask_row: &[bool]) -> Result<(DiagGaussian, Vec<f64>)> {
        let d = self.d();
        if x_row.len() != d || mask_row.len() != d {
            return Err(Error::Dimension(format!(
                "model expects {d} features, got {} values and {} mask cells",
                x_row.len(),
                mask_row.len()
            )));
        }
        let x = Tensor::row(x_row);
        let m = MaskPattern::from_vec(1, d, mask_row.to_vec())?;
        let mut parts = self.posterior_parts_batch(&x, &m)?;
        Ok(parts.pop().unwrap())
    }

    /// Per-row base Gaussians and flow contexts.
    pub fn posterior_parts_batch(&self, x: &Tensor, mask: &MaskPattern) -> Result<Vec<(DiagGaussian, Vec<f64>)>> {
        let mut g = Graph::new(&self.store);
        let enc = self.encode_batch(&mut g, x, mask)?;
        let (m, lv) = (g.value(enc.mean), g.value(enc.log_var));
        (0..x.rows())
            .map(|i| {
                let ctx = enc.context.map_or(Vec::new(), |c| g.value(c).row_slice(i).to_vec());
                Ok((
                    DiagGaussian::new(m.row_slice(i).to_vec(), lv.row_slice(i).to_vec())?,
                    ctx,
                ))
            })
            .collect()
    }

    /// Flow posterior for one row, if this model has a flow.
    pub fn flow_posterior(&self, base: DiagGaussian, context: Vec<f64>) -> Option<FlowPosterior<'_>> {
        self.flow.as_ref().map(|stack| FlowPosterior {
            stack,
            store: &self.store,
            base,
            context,
        })
    }

    /// `KL(q(z | a) || q(z | b))` between two posteriors of this model.
    /// Closed form for Gaussian posteriors; flows use `noise` (`[M, K]`).
    pub fn posterior_kl(
        &self,
        a: &(DiagGaussian, Vec<f64>),
        b: &(DiagGaussian, Vec<f64>),
        noise: &Tensor,
    ) -> Result<f64> {
        match (self.flow_posterior(a.0.clone(), a.1.clone()), self.flow_posterior(b.0.clone(), b.1.clone())) {
            (Some(qa), Some(qb)) => crate::flows::flow_kl_estimate(&qa, &qb, noise),
            _ => dist::diag_gaussian_kl(&a.0, &b.0),
        }
    }
}

pub const CHECKPOINT_MAGIC: &str = "cvae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub model: Model,
    pub scale: Option<ScaleInfo>,
    /// The training configuration, when the writer had one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(model: Model, scale: Option<ScaleInfo>, config_hash: String, seed: u64) -> Self {
        Self {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            config_hash,
            seed,
            model,
            scale,
            config: None,
        }
    }

    pub fn with_config(mut self, config: TrainConfig) -> Self {
        self.config = Some(config);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        match v.get("magic").and_then(|m| m.as_str()) {
            Some(CHECKPOINT_MAGIC) => {}
            _ => return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into())),
        }
        let version = v.get("version").and_then(|m| m.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: ModelKind) -> Model {
        let mut spec = ModelSpec::new(kind, 3, 2);
        spec.encoder_hidden = vec![4];
        spec.decoder_hidden = vec![4];
        spec.pnp = PnpSpec {
            embed: 3,
            h: vec![4],
            g: vec![4],
        };
        spec.flow.hidden = 4;
        spec.flow.context = 2;
        Model::new(spec, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn every_kind_builds_and_round_trips() {
        for kind in ModelKind::ALL {
            let m = small(kind);
            assert_eq!(m.flow.is_some(), kind.is_flow());
            assert_eq!(m.mask_head.is_some(), kind.is_mnar());
            let ck = Checkpoint::new(m, None, "abc".into(), 4);
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            assert_eq!(back, ck);
            assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_version() {
        let ck = Checkpoint::new(small(ModelKind::Zi), None, String::new(), 0);
        let text = ck.to_json().unwrap();
        let bad = text.replacen(CHECKPOINT_MAGIC, "nope", 1);
        assert!(matches!(Checkpoint::from_json(&bad), Err(Error::Checkpoint(_))));
        let bad = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(Checkpoint::from_json(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn gaussian_log_q_matches_sampling_path() {
        let m = small(ModelKind::Zi);
        let mut g = Graph::new(&m.store);
        let x = Tensor::from_vec(2, 3, vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7]).unwrap();
        let mask = MaskPattern::from_vec(2, 3, vec![true, false, true, true, true, false]).unwrap();
        let enc = m.encode_batch(&mut g, &x, &mask).unwrap();
        let noise = Tensor::from_vec(6, 2, (0..12).map(|i| i as f64 / 7.0 - 0.8).collect()).unwrap();
        let dr = m.draw(&mut g, enc, &noise).unwrap();
        let again = m.log_q_at(&mut g, enc, dr.z, dr.reps).unwrap();
        assert_eq!(dr.reps, 3);
        assert_eq!(g.value(dr.log_q), g.value(again));
    }
}
