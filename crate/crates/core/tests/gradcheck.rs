//! Reverse-mode gradients against central finite differences.

use cvae::numcore::dist;
use cvae::numcore::{Activation, Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use cvae::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: usize = 20;

type Build = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>;

fn loss_of(store: &ParamStore, ids: &[ParamId], weights: &Tensor, build: &Build) -> f64 {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
    let out = build(&mut g, &vars).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum_all(prod);
    g.scalar(loss)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Max relative error over every coordinate of every input.
fn check(inputs: Vec<Tensor>, build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t))
        .collect();
    let (rows, cols) = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = build(&mut g, &vars).unwrap();
        (g.value(out).rows(), g.value(out).cols())
    };
    let weights = Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();

    let analytic = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = build(&mut g, &vars).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum_all(prod);
        g.gradient(loss).unwrap()
    };

    let mut worst: f64 = 0.0;
    for &id in &ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + H;
            let up = loss_of(&store, &ids, &weights, build);
            store.get_mut(id).data_mut()[k] = orig - H;
            let down = loss_of(&store, &ids, &weights, build);
            store.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(analytic.get(id).data()[k], fd));
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn run(name: &str, shapes: &[(usize, usize, f64, f64)], build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for point in 0..POINTS {
        let inputs = shapes
            .iter()
            .map(|&(r, c, lo, hi)| rand_tensor(&mut rng, r, c, lo, hi))
            .collect();
        let err = check(inputs, build, &mut rng);
        assert!(err < TOL, "{name}: point {point} relative error {err:e}");
    }
}

#[test]
fn elementwise_ops() {
    let s = (3, 4, -2.0, 2.0);
    run("exp", &[s], &|g, v| Ok(g.exp(v[0])));
    run("square", &[s], &|g, v| Ok(g.square(v[0])));
    run("sigmoid", &[s], &|g, v| Ok(g.sigmoid(v[0])));
    run("elu", &[s], &|g, v| Ok(g.elu(v[0])));
    run("affine", &[s], &|g, v| Ok(g.affine(v[0], -1.7, 0.3)));
    run("softplus", &[(3, 4, -30.0, 30.0)], &|g, v| Ok(g.softplus(v[0])));
    run("ln", &[(3, 4, 0.1, 3.0)], &|g, v| Ok(g.ln(v[0])));
    run("logit", &[(3, 4, 0.05, 0.95)], &|g, v| Ok(g.logit(v[0])));
    run("relu", &[(3, 4, 0.1, 2.0)], &|g, v| Ok(g.relu(v[0])));
    run("clamp", &[(3, 4, -0.9, 0.9)], &|g, v| Ok(g.clamp(v[0], -1.0, 1.0)));
}

#[test]
fn binary_ops() {
    let s = (3, 4, -2.0, 2.0);
    run("add", &[s, s], &|g, v| g.add(v[0], v[1]));
    run("sub", &[s, s], &|g, v| g.sub(v[0], v[1]));
    run("mul", &[s, s], &|g, v| g.mul(v[0], v[1]));
    run("matmul", &[(3, 4, -1.0, 1.0), (4, 2, -1.0, 1.0)], &|g, v| g.matmul(v[0], v[1]));
    run("add_row", &[s, (1, 4, -1.0, 1.0)], &|g, v| g.add_row(v[0], v[1]));
    run("mul_col", &[s, (3, 1, -1.0, 1.0)], &|g, v| g.mul_col(v[0], v[1]));
    run("mul_row", &[s, (1, 4, -1.0, 1.0)], &|g, v| g.mul_row(v[0], v[1]));
}

#[test]
fn reductions_and_reshapes() {
    let s = (4, 3, -2.0, 2.0);
    run("sum_all", &[s], &|g, v| Ok(g.sum_all(v[0])));
    run("mean_all", &[s], &|g, v| Ok(g.mean_all(v[0])));
    run("sum_cols", &[s], &|g, v| Ok(g.sum_cols(v[0])));
    run("logsumexp_cols", &[s], &|g, v| Ok(g.logsumexp_cols(v[0])));
    run("concat", &[s, (4, 2, -1.0, 1.0)], &|g, v| g.concat_cols(&[v[0], v[1], v[0]]));
    run("slice", &[s], &|g, v| g.slice_cols(v[0], 1, 2));
    run("gather", &[s], &|g, v| g.gather_rows(v[0], vec![3, 0, 0, 2]));
    run("repeat", &[s], &|g, v| g.repeat_rows(v[0], 3));
    run("group_sum", &[s], &|g, v| g.group_sum_rows(v[0], 2));
    run("segment_sum", &[s], &|g, v| g.segment_sum(v[0], vec![2, 0, 2, 1], 4));
    run("reshape", &[s], &|g, v| g.reshape(v[0], 2, 6));
}

/// True when `x` sits within `margin` of a bin edge in either space.
fn near_edge(u: &Tensor, logits: &Tensor, bins: usize, inverse: bool, margin: f64) -> bool {
    let mut probs = vec![0.0; bins];
    for i in 0..u.rows() {
        for j in 0..u.cols() {
            cvae::numcore::pwl::softmax(&logits.row_slice(i)[j * bins..(j + 1) * bins], &mut probs);
            let x = u.get(i, j);
            let mut edge = 0.0;
            for b in 0..=bins {
                let e = if inverse { edge } else { b as f64 / bins as f64 };
                if (x - e).abs() < margin {
                    return true;
                }
                if b < bins {
                    edge += probs[b];
                }
            }
        }
    }
    false
}

#[test]
fn piecewise_linear_ops() {
    let bins = 10;
    for inverse in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(41 + inverse as u64);
        let mut done = 0;
        while done < POINTS {
            let u = rand_tensor(&mut rng, 3, 2, 0.01, 0.99);
            let l = rand_tensor(&mut rng, 3, 2 * bins, -2.0, 2.0);
            if near_edge(&u, &l, bins, inverse, 1e-3) {
                continue;
            }
            let build: &Build = if inverse {
                &|g, v| g.pwl_inverse(v[0], v[1], 10)
            } else {
                &|g, v| g.pwl_forward(v[0], v[1], 10)
            };
            let err = check(vec![u, l], build, &mut rng);
            assert!(err < TOL, "pwl inverse={inverse}: relative error {err:e}");
            done += 1;
        }
    }
}

#[test]
fn distribution_ops() {
    let s = (3, 2, -1.5, 1.5);
    run("kl_standard", &[s, s], &|g, v| dist::g_kl_standard(g, v[0], v[1]));
    run("kl", &[s, s, s, s], &|g, v| dist::g_kl(g, v[0], v[1], v[2], v[3]));
    let noise = Tensor::from_vec(3, 2, vec![0.3, -1.2, 0.8, 2.0, -0.1, 0.5]).unwrap();
    run("reparam", &[s, s], &move |g, v| dist::g_reparam(g, v[0], v[1], &noise));
    let mask = Tensor::from_vec(3, 2, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let m2 = mask.clone();
    run("masked_log_density", &[s, s, s], &move |g, v| {
        dist::g_masked_log_density(g, v[0], v[1], v[2], &m2)
    });
    run("bernoulli", &[(3, 2, 0.05, 0.95)], &move |g, v| dist::g_bernoulli_log_mass(g, &mask, v[0]));
}

#[test]
fn two_hidden_layer_elu_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..POINTS {
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "net", &[4, 6, 5, 3], Activation::Elu, Activation::Identity, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, 5, 4, -1.0, 1.0);
        let target = rand_tensor(&mut rng, 5, 3, -1.0, 1.0);
        let loss = |store: &ParamStore| -> (f64, Option<cvae::numcore::Gradients>) {
            let mut g = Graph::new(store);
            let xi = g.constant(x.clone());
            let y = net.forward(&mut g, xi).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(y, t).unwrap();
            let d2 = g.square(d);
            let l = g.sum_all(d2);
            (g.scalar(l), Some(g.gradient(l).unwrap()))
        };
        let grads = loss(&store).1.unwrap();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + H;
                let up = loss(&store).0;
                store.get_mut(id).data_mut()[k] = orig - H;
                let down = loss(&store).0;
                store.get_mut(id).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * H);
                let err = rel_err(grads.get(id).data()[k], fd);
                assert!(err < TOL, "{}[{k}]: {err:e}", store.name(id));
            }
        }
    }
}
