#![allow(dead_code)]

pub mod toy;

use cvae::encoders::PnpSpec;
use cvae::model::{Model, ModelKind, ModelSpec};
use cvae::numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_spec(kind: ModelKind, d: usize, k: usize) -> ModelSpec {
    let mut s = ModelSpec::new(kind, d, k);
    s.encoder_hidden = vec![6, 5];
    s.decoder_hidden = vec![5, 6];
    s.pnp = PnpSpec {
        embed: 4,
        h: vec![5, 4],
        g: vec![5],
    };
    s.flow.hidden = 5;
    s.flow.context = 2;
    s.flow.layers = 2;
    s
}

/// A small model with every parameter perturbed away from its init.
pub fn shaken(kind: ModelKind, d: usize, k: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::new(small_spec(kind, d, k), None, &mut rng).unwrap();
    for id in m.store.ids().collect::<Vec<_>>() {
        for v in m.store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    m
}

/// Make the decoder ignore `z`: zero the output weights and set the output
/// bias to `means` (pre-sigmoid logits) and `log_var`.
pub fn constant_decoder(m: &mut Model, logits: &[f64], log_var: f64) {
    let last = m.spec.decoder_hidden.len();
    let w = m.store.find(&format!("dec.{last}.w")).unwrap();
    m.store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let b = m.store.find(&format!("dec.{last}.b")).unwrap();
    let d = logits.len();
    let bias = m.store.get_mut(b).data_mut();
    bias[..d].copy_from_slice(logits);
    bias[d..].iter_mut().for_each(|v| *v = log_var);
}

/// Zero the dense encoder's first-layer weights reading feature `j` (value
/// and, when present, mask indicator).
pub fn ignore_feature(m: &mut Model, j: usize) {
    let d = m.d();
    let w = m.store.find("enc.0.w").unwrap();
    let t = m.store.get_mut(w);
    let cols = t.cols();
    let rows = t.rows();
    for r in [j, d + j] {
        if r < rows {
            for c in 0..cols {
                t.set(r, c, 0.0);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}
