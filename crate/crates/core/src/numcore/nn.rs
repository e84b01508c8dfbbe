//! Fully connected layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, ParamId, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Activation::Elu => g.elu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }

    /// Scalar version, for reference computations.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => super::graph::sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// A stack of linear layers; `hidden` after every layer but the last,
/// `output` after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "network `{name}` needs at least input and output widths"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            let weight = store.add(format!("{name}.{i}.w"), Tensor::from_vec(fan_in, fan_out, w)?);
            let bias = store.add(format!("{name}.{i}.b"), Tensor::zeros(1, fan_out));
            layers.push(Linear {
                weight,
                bias,
                fan_in,
                fan_out,
            });
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, g: &mut Graph<'_>, input: Var) -> Result<Var> {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let got = g.value(h).cols();
            if got != layer.fan_in {
                return Err(Error::LayerShape {
                    layer: i,
                    expected: layer.fan_in,
                    got,
                });
            }
            let w = g.param(layer.weight);
            let b = g.param(layer.bias);
            let lin = g.matmul(h, w)?;
            let lin = g.add_row(lin, b)?;
            let act = if i == last { self.output } else { self.hidden };
            h = act.apply(g, lin);
        }
        Ok(h)
    }

    /// Forward pass over a constant batch, without keeping the graph.
    pub fn eval(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "n", &[2, 2], Activation::Elu, Activation::Identity, &mut rng).unwrap();
        *store.get_mut(net.layers[0].weight) = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = net.eval(&store, &Tensor::row(&[1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_sigmoid_unit_is_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "n", &[3, 1], Activation::Elu, Activation::Sigmoid, &mut rng).unwrap();
        *store.get_mut(net.layers[0].weight) = Tensor::zeros(3, 1);
        let y = net.eval(&store, &Tensor::row(&[4.0, -7.0, 100.0])).unwrap();
        assert_eq!(y.item(), 0.5);
    }

    #[test]
    fn width_mismatch_names_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "n", &[3, 4, 1], Activation::Elu, Activation::Identity, &mut rng).unwrap();
        let err = net.eval(&store, &Tensor::row(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 0, expected: 3, got: 2 }));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&mut store, "n", &[10, 20], Activation::Elu, Activation::Identity, &mut rng).unwrap();
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(store.get(net.layers[0].weight).data().iter().all(|w| w.abs() <= limit));
        assert!(store.get(net.layers[0].bias).data().iter().all(|&b| b == 0.0));
    }
}
