//! Observation masks: true missingness (MCAR, self-censoring) and the
//! artificial subsets `P ⊆ Q` used by the regularizer and by AM training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// `n × d` booleans, `true` = observed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskPattern {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl MaskPattern {
    pub fn full(rows: usize, cols: usize, observed: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![observed; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} mask cells for a {rows}x{cols} mask",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, observed: bool) {
        self.bits[i * self.cols + j] = observed;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_observed(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        1.0 - self.count_observed() as f64 / self.bits.len() as f64
    }

    /// `self ⊆ other` cellwise.
    pub fn is_subset_of(&self, other: &MaskPattern) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.bits.iter().zip(&other.bits).all(|(&p, &q)| !p || q)
    }

    /// Cells observed in `self` but not in `subset`.
    pub fn difference(&self, subset: &MaskPattern) -> MaskPattern {
        MaskPattern {
            rows: self.rows,
            cols: self.cols,
            bits: self
                .bits
                .iter()
                .zip(&subset.bits)
                .map(|(&q, &p)| q && !p)
                .collect(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> MaskPattern {
        let mut bits = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            bits.extend_from_slice(self.row(i));
        }
        MaskPattern {
            rows: idx.len(),
            cols: self.cols,
            bits,
        }
    }

    /// 1.0 where observed, 0.0 elsewhere.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(self.rows, self.cols, data).expect("mask shape")
    }

    /// Complement: `true` where missing.
    pub fn complement(&self) -> MaskPattern {
        MaskPattern {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn check_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::Dimension(format!(
                "{what}: mask is {}x{}, data is {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// How the artificial subset `P` is carved out of `Q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismSpec {
    /// Each observed cell dropped independently with probability `p_remove`.
    Uniform { p_remove: f64 },
    HalfFeatureMean,
    AllFeatureMean,
    HalfFeatureVariance,
    AllFeatureVariance,
}

impl MechanismSpec {
    pub fn validate(&self) -> Result<()> {
        if let MechanismSpec::Uniform { p_remove } = *self {
            if !(0.0..=1.0).contains(&p_remove) {
                return Err(Error::Config(format!(
                    "removal probability {p_remove} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Each cell missing independently with probability `rate`.
pub fn sample_mcar_mask<R: Rng + ?Sized>(n: usize, d: usize, rate: f64, rng: &mut R) -> Result<MaskPattern> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("missing rate {rate} outside [0, 1]")));
    }
    Ok(MaskPattern::from_fn(n, d, |_, _| rng.gen::<f64>() >= rate))
}

/// A cell is missing iff its value is strictly above its column mean.
pub fn self_censoring_mask(values: &Tensor) -> MaskPattern {
    let (n, d) = (values.rows(), values.cols());
    let means: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| values.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    MaskPattern::from_fn(n, d, |i, j| values.get(i, j) <= means[j])
}

/// Number of leading columns the `half_*` mechanisms act on.
pub fn first_half(d: usize) -> usize {
    d.div_ceil(2)
}

/// Mean and population variance of the observed cells of every column.
/// Columns without observed cells get `NaN`.
pub fn observed_column_stats(values: &Tensor, mask: &MaskPattern) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (values.rows(), values.cols());
    let mut mean = vec![f64::NAN; d];
    let mut var = vec![f64::NAN; d];
    for j in 0..d {
        let obs: Vec<f64> = (0..n).filter(|&i| mask.get(i, j)).map(|i| values.get(i, j)).collect();
        if obs.is_empty() {
            continue;
        }
        let m = obs.iter().sum::<f64>() / obs.len() as f64;
        mean[j] = m;
        var[j] = obs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / obs.len() as f64;
    }
    (mean, var)
}

/// Draws `P ⊆ Q`.
///
/// The threshold mechanisms use column statistics of the cells `q_mask`
/// observes in `values`; pass the training statistics through
/// [`artificial_subset_with_stats`] to avoid recomputing them per batch.
pub fn artificial_subset<R: Rng + ?Sized>(
    q_mask: &MaskPattern,
    values: &Tensor,
    spec: &MechanismSpec,
    rng: &mut R,
) -> Result<MaskPattern> {
    let stats = match spec {
        MechanismSpec::Uniform { .. } => None,
        _ => Some(observed_column_stats(values, q_mask)),
    };
    artificial_subset_with_stats(q_mask, values, spec, stats.as_ref(), rng)
}

pub fn artificial_subset_with_stats<R: Rng + ?Sized>(
    q_mask: &MaskPattern,
    values: &Tensor,
    spec: &MechanismSpec,
    stats: Option<&(Vec<f64>, Vec<f64>)>,
    rng: &mut R,
) -> Result<MaskPattern> {
    spec.validate()?;
    q_mask.check_shape(values.rows(), values.cols(), "artificial_subset")?;
    let (n, d) = (q_mask.rows(), q_mask.cols());
    let mut p = q_mask.clone();
    match *spec {
        MechanismSpec::Uniform { p_remove } => {
            for i in 0..n {
                for j in 0..d {
                    if q_mask.get(i, j) && rng.gen::<f64>() < p_remove {
                        p.set(i, j, false);
                    }
                }
            }
        }
        kind => {
            let owned;
            let (mean, var) = match stats {
                Some(s) => (&s.0, &s.1),
                None => {
                    owned = observed_column_stats(values, q_mask);
                    (&owned.0, &owned.1)
                }
            };
            let (threshold, span) = match kind {
                MechanismSpec::HalfFeatureMean => (mean, first_half(d)),
                MechanismSpec::AllFeatureMean => (mean, d),
                MechanismSpec::HalfFeatureVariance => (var, first_half(d)),
                _ => (var, d),
            };
            if threshold.len() != d {
                return Err(Error::Dimension(format!(
                    "{} column statistics for {d} columns",
                    threshold.len()
                )));
            }
            for i in 0..n {
                for j in 0..span {
                    if q_mask.get(i, j) && values.get(i, j) > threshold[j] {
                        p.set(i, j, false);
                    }
                }
            }
        }
    }
    Ok(p)
}

/// Missing rate for one artificial-missingness training step, `U(0, 0.7)`.
pub fn am_rate<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen_range(0.0..=0.7)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mcar_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_mcar_mask(4, 3, 0.0, &mut rng).unwrap().count_observed(), 12);
        assert_eq!(sample_mcar_mask(4, 3, 1.0, &mut rng).unwrap().count_observed(), 0);
        assert!(sample_mcar_mask(4, 3, 1.5, &mut rng).is_err());
    }

    #[test]
    fn mcar_rate_is_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = sample_mcar_mask(100, 100, 0.3, &mut rng).unwrap();
        let sd = (0.3f64 * 0.7 / 1e4).sqrt();
        assert!((m.missing_fraction() - 0.3).abs() < 4.0 * sd);
    }

    #[test]
    fn self_censoring_examples() {
        let v = Tensor::from_vec(2, 1, vec![0.2, 0.8]).unwrap();
        assert_eq!(self_censoring_mask(&v).bits(), &[true, false]);
        let v = Tensor::from_vec(2, 1, vec![5.0, 5.0]).unwrap();
        assert_eq!(self_censoring_mask(&v).bits(), &[true, true]);
        let v = Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(self_censoring_mask(&v).bits(), &[true, true, false]);
    }

    #[test]
    fn uniform_subset_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Tensor::zeros(5, 4);
        let q = sample_mcar_mask(5, 4, 0.3, &mut rng).unwrap();
        let p0 = artificial_subset(&q, &v, &MechanismSpec::Uniform { p_remove: 0.0 }, &mut rng).unwrap();
        assert_eq!(p0, q);
        let p1 = artificial_subset(&q, &v, &MechanismSpec::Uniform { p_remove: 1.0 }, &mut rng).unwrap();
        assert_eq!(p1.count_observed(), 0);
    }

    #[test]
    fn mean_threshold_drops_high_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Tensor::from_vec(2, 1, vec![0.1, 0.9]).unwrap();
        let q = MaskPattern::full(2, 1, true);
        let p = artificial_subset(&q, &v, &MechanismSpec::AllFeatureMean, &mut rng).unwrap();
        assert_eq!(p.bits(), &[true, false]);
    }

    #[test]
    fn half_mechanisms_touch_leading_columns_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::from_vec(2, 3, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let q = MaskPattern::full(2, 3, true);
        let p = artificial_subset(&q, &v, &MechanismSpec::HalfFeatureMean, &mut rng).unwrap();
        assert_eq!(p.bits(), &[true, true, true, false, false, true]);
        assert_eq!(first_half(3), 2);
        assert_eq!(first_half(4), 2);
    }

    #[test]
    fn am_rate_support_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws: Vec<f64> = (0..100_000).map(|_| am_rate(&mut rng)).collect();
        assert!(draws.iter().all(|r| (0.0..=0.7).contains(r)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.35).abs() < 0.01);
    }
}
