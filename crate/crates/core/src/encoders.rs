//! Posterior encoders for partially observed rows, the Gaussian decoder
//! head, and the self-masking head used by the MNAR models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::MaskPattern;
use crate::numcore::dist::{self, DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::numcore::{Activation, Graph, Mlp, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Missing cells replaced by zeros.
    Zi,
    /// Zero-imputed row concatenated with its mask.
    MaskZi,
    /// Permutation-invariant set encoder over (feature, value) pairs.
    Pnp,
    /// Same input as `MaskZi`, with extra context outputs for a flow.
    FlowInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PnpSpec {
    /// Width of each feature embedding `e_j`.
    pub embed: usize,
    /// Widths of `h` after the embedding (the last one is the pooled width).
    pub h: Vec<usize>,
    /// Hidden widths of `g`, which maps the pooled vector to the posterior.
    pub g: Vec<usize>,
}

impl Default for PnpSpec {
    fn default() -> Self {
        Self {
            embed: 20,
            h: vec![50, 50],
            g: vec![100],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub d: usize,
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Extra outputs handed to a flow's conditioners (`FlowInput` only).
    pub context: usize,
    pub pnp: PnpSpec,
}

impl EncoderSpec {
    fn input_width(&self) -> usize {
        match self.kind {
            EncoderKind::Zi => self.d,
            EncoderKind::MaskZi | EncoderKind::FlowInput => 2 * self.d,
            EncoderKind::Pnp => self.pnp.embed,
        }
    }

    fn output_width(&self) -> usize {
        2 * self.latent + self.context
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum EncoderNet {
    Dense(Mlp),
    Pnp { embed: ParamId, h: Mlp, g: Mlp },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub spec: EncoderSpec,
    net: EncoderNet,
}

/// Batched encoder output: posterior parameters `[n, K]` and, for flows,
/// the conditioner context `[n, C]`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub mean: Var,
    pub log_var: Var,
    pub context: Option<Var>,
}

/// Zero-imputed values: `x` where observed, 0 elsewhere. Hidden cells are
/// never read.
pub fn zero_imputed(x: &Tensor, mask: &MaskPattern) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            if mask.get(i, j) {
                out.set(i, j, x.get(i, j));
            }
        }
    }
    out
}

fn check_batch(x: &Tensor, mask: &MaskPattern, d: usize) -> Result<()> {
    if x.cols() != d {
        return Err(Error::Dimension(format!("encoder expects {d} features, got {}", x.cols())));
    }
    mask.check_shape(x.rows(), x.cols(), "encoder input")
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        if spec.latent == 0 || spec.d == 0 {
            return Err(Error::Config("encoder needs d >= 1 and K >= 1".into()));
        }
        if spec.kind != EncoderKind::FlowInput && spec.context != 0 {
            return Err(Error::Config("only the flow encoder emits context".into()));
        }
        let act = spec.activation;
        let net = match spec.kind {
            EncoderKind::Pnp => {
                if spec.pnp.h.is_empty() {
                    return Err(Error::Config("pnp needs at least one h layer".into()));
                }
                let e = spec.pnp.embed;
                let limit = (6.0 / (spec.d + e) as f64).sqrt();
                let table = (0..spec.d * e).map(|_| rng.gen_range(-limit..=limit)).collect();
                let embed = store.add(format!("{name}.embed"), Tensor::from_vec(spec.d, e, table)?);
                let mut hw = vec![e];
                hw.extend(&spec.pnp.h);
                let h = Mlp::new(store, &format!("{name}.h"), &hw, act, act, rng)?;
                let mut gw = vec![*hw.last().unwrap()];
                gw.extend(&spec.pnp.g);
                gw.push(spec.output_width());
                let g = Mlp::new(store, &format!("{name}.g"), &gw, act, Activation::Identity, rng)?;
                EncoderNet::Pnp { embed, h, g }
            }
            _ => {
                let mut widths = vec![spec.input_width()];
                widths.extend(&spec.hidden);
                widths.push(spec.output_width());
                EncoderNet::Dense(Mlp::new(store, name, &widths, act, Activation::Identity, rng)?)
            }
        };
        Ok(Self { spec, net })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: &Tensor, mask: &MaskPattern) -> Result<Encoded> {
        check_batch(x, mask, self.spec.d)?;
        let raw = match &self.net {
            EncoderNet::Dense(net) => {
                let xz = zero_imputed(x, mask);
                let input = match self.spec.kind {
                    EncoderKind::Zi => xz,
                    _ => concat_mask(&xz, mask),
                };
                let input = g.constant(input);
                net.forward(g, input)?
            }
            EncoderNet::Pnp { embed, h, g: gnet } => {
                let (mut feature, mut value, mut seg) = (Vec::new(), Vec::new(), Vec::new());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        if mask.get(i, j) {
                            feature.push(j);
                            value.push(x.get(i, j));
                            seg.push(i);
                        }
                    }
                }
                self.pnp_pool(g, *embed, h, gnet, feature, value, seg, x.rows())?
            }
        };
        self.split_output(g, raw)
    }

    #[allow(clippy::too_many_arguments)]
    fn pnp_pool(
        &self,
        g: &mut Graph<'_>,
        embed: ParamId,
        h: &Mlp,
        gnet: &Mlp,
        feature: Vec<usize>,
        value: Vec<f64>,
        seg: Vec<usize>,
        rows: usize,
    ) -> Result<Var> {
        let pooled_width = h.output_width();
        let pooled = if feature.is_empty() {
            g.constant(Tensor::zeros(rows, pooled_width))
        } else {
            let count = value.len();
            let table = g.param(embed);
            let e = g.gather_rows(table, feature)?;
            let xv = g.constant(Tensor::from_vec(count, 1, value)?);
            let s = g.mul_col(e, xv)?;
            let hs = h.forward(g, s)?;
            g.segment_sum(hs, seg, rows)?
        };
        gnet.forward(g, pooled)
    }

    fn split_output(&self, g: &mut Graph<'_>, raw: Var) -> Result<Encoded> {
        let k = self.spec.latent;
        let mean = g.slice_cols(raw, 0, k)?;
        let lv = g.slice_cols(raw, k, k)?;
        let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        let context = if self.spec.context > 0 {
            Some(g.slice_cols(raw, 2 * k, self.spec.context)?)
        } else {
            None
        };
        Ok(Encoded {
            mean,
            log_var,
            context,
        })
    }

    /// Posterior for one row. Cells where `mask_row` is false are ignored.
    pub fn encode(&self, store: &ParamStore, x_row: &[f64], mask_row: &[bool]) -> Result<DiagGaussian> {
        let d = self.spec.d;
        if x_row.len() != d || mask_row.len() != d {
            return Err(Error::Dimension(format!(
                "encoder expects {d} features, got {} values and {} mask cells",
                x_row.len(),
                mask_row.len()
            )));
        }
        let x = Tensor::row(x_row);
        let m = MaskPattern::from_vec(1, d, mask_row.to_vec())?;
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, &x, &m)?;
        DiagGaussian::new(g.value(out.mean).data().to_vec(), g.value(out.log_var).data().to_vec())
    }

    /// Set-encoder posterior from `(feature, value)` pairs in any order.
    pub fn encode_set(&self, store: &ParamStore, set: &[(usize, f64)]) -> Result<DiagGaussian> {
        let EncoderNet::Pnp { embed, h, g: gnet } = &self.net else {
            return Err(Error::Contract("encode_set needs a set encoder".into()));
        };
        let mut pairs = set.to_vec();
        pairs.sort_by_key(|p| p.0);
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Contract(format!("feature {} appears twice", w[0].0)));
        }
        if let Some(&(j, _)) = pairs.iter().find(|p| p.0 >= self.spec.d) {
            return Err(Error::Dimension(format!("feature {j} of {}", self.spec.d)));
        }
        let mut g = Graph::new(store);
        let feature = pairs.iter().map(|p| p.0).collect();
        let value = pairs.iter().map(|p| p.1).collect();
        let seg = vec![0; pairs.len()];
        let raw = self.pnp_pool(&mut g, *embed, h, gnet, feature, value, seg, 1)?;
        let out = self.split_output(&mut g, raw)?;
        DiagGaussian::new(g.value(out.mean).data().to_vec(), g.value(out.log_var).data().to_vec())
    }

    /// The embedding table and the `h`/`g` networks of a set encoder.
    pub fn pnp_parts(&self) -> Option<(ParamId, &Mlp, &Mlp)> {
        match &self.net {
            EncoderNet::Pnp { embed, h, g } => Some((*embed, h, g)),
            EncoderNet::Dense(_) => None,
        }
    }

    /// The network of a dense encoder.
    pub fn dense_net(&self) -> Option<&Mlp> {
        match &self.net {
            EncoderNet::Dense(m) => Some(m),
            EncoderNet::Pnp { .. } => None,
        }
    }
}

fn concat_mask(xz: &Tensor, mask: &MaskPattern) -> Tensor {
    let (n, d) = (xz.rows(), xz.cols());
    let mut out = Tensor::zeros(n, 2 * d);
    for i in 0..n {
        let row = out.row_slice_mut(i);
        row[..d].copy_from_slice(xz.row_slice(i));
        for (o, &b) in row[d..].iter_mut().zip(mask.row(i)) {
            *o = if b { 1.0 } else { 0.0 };
        }
    }
    out
}

/// MLP from `K` to per-feature mean (through a sigmoid) and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderHead {
    pub d: usize,
    pub latent: usize,
    net: Mlp,
}

impl DecoderHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        latent: usize,
        hidden: &[usize],
        d: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![latent];
        widths.extend(hidden);
        widths.push(2 * d);
        let net = Mlp::new(store, name, &widths, activation, Activation::Identity, rng)?;
        Ok(Self { d, latent, net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// `(mean, log_var)`, each `[rows, d]`.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Result<(Var, Var)> {
        let k = g.value(z).cols();
        if k != self.latent {
            return Err(Error::Dimension(format!("decoder expects K = {}, got {k}", self.latent)));
        }
        let raw = self.net.forward(g, z)?;
        let m = g.slice_cols(raw, 0, self.d)?;
        let mean = g.sigmoid(m);
        let lv = g.slice_cols(raw, self.d, self.d)?;
        let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok((mean, log_var))
    }

    pub fn decode(&self, store: &ParamStore, z: &[f64]) -> Result<DiagGaussian> {
        if z.len() != self.latent {
            return Err(Error::Dimension(format!("decoder expects K = {}, got {}", self.latent, z.len())));
        }
        let mut g = Graph::new(store);
        let zv = g.constant(Tensor::row(z));
        let (m, lv) = self.forward(&mut g, zv)?;
        DiagGaussian::new(g.value(m).data().to_vec(), g.value(lv).data().to_vec())
    }
}

/// Per-feature self-masking: `π_j = sigmoid(-a_j (x_j - b_j))`, the
/// probability that feature `j` is observed given its value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskHead {
    pub slope: ParamId,
    pub offset: ParamId,
}

pub const MASK_SLOPE_INIT: f64 = 10.0;

impl MaskHead {
    pub fn new(store: &mut ParamStore, name: &str, offsets: &[f64]) -> Self {
        let d = offsets.len();
        let slope = store.add(format!("{name}.a"), Tensor::filled(1, d, MASK_SLOPE_INIT));
        let offset = store.add(format!("{name}.b"), Tensor::row(offsets));
        Self { slope, offset }
    }

    /// Observation probabilities for completed rows `x_hat` (`[rows, d]`).
    pub fn forward(&self, g: &mut Graph<'_>, x_hat: Var) -> Result<Var> {
        let b = g.param(self.offset);
        let nb = g.neg(b);
        let centered = g.add_row(x_hat, nb)?;
        let a = g.param(self.slope);
        let na = g.neg(a);
        let logits = g.mul_row(centered, na)?;
        Ok(g.sigmoid(logits))
    }

    pub fn probs(&self, store: &ParamStore, x_hat: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let x = g.constant(Tensor::row(x_hat));
        let p = self.forward(&mut g, x)?;
        Ok(g.value(p).data().to_vec())
    }
}

/// Completed rows: observed cells from `x`, hidden cells from `fill`.
/// `fill` has `x.rows() * reps` rows, `reps` consecutive rows per row of `x`.
pub fn g_complete(g: &mut Graph<'_>, x: &Tensor, mask: &MaskPattern, fill: Var, reps: usize) -> Result<Var> {
    let obs = zero_imputed(x, mask).repeat_rows(reps);
    let hidden = mask.complement().to_tensor().repeat_rows(reps);
    let h = g.constant(hidden);
    let kept = g.mul(fill, h)?;
    let o = g.constant(obs);
    g.add(kept, o)
}

/// Sum of per-feature Gaussian log-densities over the observed cells.
pub fn masked_log_likelihood(like: &DiagGaussian, x_row: &[f64], mask_row: &[bool]) -> Result<f64> {
    if x_row.len() != like.dim() || mask_row.len() != like.dim() {
        return Err(Error::Dimension(format!(
            "likelihood over {} features, got {} values and {} mask cells",
            like.dim(),
            x_row.len(),
            mask_row.len()
        )));
    }
    let mut total = 0.0;
    for j in 0..like.dim() {
        if mask_row[j] {
            total += dist::normal_log_pdf(x_row[j], like.mean[j], like.log_var[j]);
        }
    }
    Ok(total)
}

/// Batched version of [`masked_log_likelihood`]; `x` may hold anything at
/// hidden cells. Returns `[rows, 1]`. `x` and `mask` are repeated `reps`
/// times to line up with `reps` consecutive decoder rows per data row.
pub fn g_masked_log_likelihood(
    g: &mut Graph<'_>,
    x: &Tensor,
    mask: &MaskPattern,
    mean: Var,
    log_var: Var,
    reps: usize,
) -> Result<Var> {
    let xz = zero_imputed(x, mask).repeat_rows(reps);
    let m = mask.to_tensor().repeat_rows(reps);
    let xv = g.constant(xz);
    dist::g_masked_log_density(g, xv, mean, log_var, &m)
}
