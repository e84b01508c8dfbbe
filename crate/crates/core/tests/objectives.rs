//! Loss functions against independent compositions of the plain-value
//! primitives, exact invariants, and end-to-end gradient checks.

mod common;

use common::toy;
use cvae::encoders::{masked_log_likelihood, PnpSpec};
use cvae::flows::flow_kl_estimate;
use cvae::missingness::MaskPattern;
use cvae::model::{Model, ModelKind, ModelSpec};
use cvae::numcore::dist::{self, DiagGaussian, LN_2PI};
use cvae::numcore::{Graph, ParamId, Tensor};
use cvae::objectives::{
    elbo_partial, miwae_bound, mnar_flow_elbo, model_bound, not_miwae_bound, regularized_loss, KlMode,
    LossBreakdown, Objective,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn spec(kind: ModelKind, d: usize, k: usize) -> ModelSpec {
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

fn build(kind: ModelKind, d: usize, k: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::new(spec(kind, d, k), None, &mut rng).unwrap();
    // shake every parameter so flows are not flat and mask heads not trivial
    for id in m.store.ids().collect::<Vec<_>>() {
        for v in m.store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    m
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Tensor, MaskPattern) {
    let x = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let q = MaskPattern::from_fn(n, d, |_, _| rng.gen_bool(0.7));
    (x, q)
}

fn sub_mask(rng: &mut ChaCha8Rng, q: &MaskPattern) -> MaskPattern {
    MaskPattern::from_fn(q.rows(), q.cols(), |i, j| q.get(i, j) && rng.gen_bool(0.5))
}

fn param(m: &Model, name: &str) -> ParamId {
    m.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"))
}

fn zero_all(m: &mut Model, prefix: &str) {
    for id in m.store.ids().collect::<Vec<_>>() {
        if m.store.name(id).starts_with(prefix) {
            m.store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

fn bits(o: &Objective) -> u64 {
    o.breakdown.total.to_bits()
}

const GAUSSIAN_KINDS: [ModelKind; 3] = [ModelKind::Zi, ModelKind::MaskZi, ModelKind::Pnp];

#[test]
fn elbo_with_prior_encoder_and_flat_decoder_is_half_log_two_pi() {
    let mut m = build(ModelKind::Zi, 3, 2, 1);
    zero_all(&mut m, "enc.");
    zero_all(&mut m, "dec.");
    let x = Tensor::row(&[0.5, 0.9, 0.1]);
    let q = MaskPattern::from_vec(1, 3, vec![true, false, false]).unwrap();
    let mut g = Graph::new(&m.store);
    let e = elbo_partial(&mut g, &m, &x, &q, &Tensor::row(&[0.3, -1.1]), KlMode::Analytic).unwrap();
    assert_eq!(e.breakdown.total, -0.5 * LN_2PI);
}

#[test]
fn empty_observed_set_gives_negative_kl() {
    let m = build(ModelKind::MaskZi, 3, 2, 2);
    let x = Tensor::row(&[0.5, 0.9, 0.1]);
    let q = MaskPattern::full(1, 3, false);
    let mut g = Graph::new(&m.store);
    let e = elbo_partial(&mut g, &m, &x, &q, &Tensor::row(&[0.3, -1.1]), KlMode::Analytic).unwrap();
    let post = m.encoder.encode(&m.store, x.data(), q.row(0)).unwrap();
    let kl = dist::diag_gaussian_kl(&post, &DiagGaussian::standard(2)).unwrap();
    assert!((e.breakdown.total + kl).abs() < 1e-12);
}

/// Plain-value partial ELBO for one row.
fn oracle_elbo(m: &Model, x: &[f64], q: &[bool], noise: &[f64], analytic: bool) -> f64 {
    let post = m.encoder.encode(&m.store, x, q).unwrap();
    let z = dist::reparam_sample(&post, noise).unwrap();
    let like = m.decoder.decode(&m.store, &z).unwrap();
    let ll = masked_log_likelihood(&like, x, q).unwrap();
    if analytic {
        ll - dist::diag_gaussian_kl(&post, &DiagGaussian::standard(z.len())).unwrap()
    } else {
        ll + dist::gaussian_log_density(&z, &DiagGaussian::standard(z.len())).unwrap()
            - dist::gaussian_log_density(&z, &post).unwrap()
    }
}

#[test]
fn elbo_matches_plain_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (case, kind) in GAUSSIAN_KINDS.iter().cycle().take(12).enumerate() {
        let m = build(*kind, 4, 3, case as u64);
        let (x, q) = random_batch(&mut rng, 5, 4);
        let noise = normal(&mut rng, 5, 3);
        for analytic in [true, false] {
            let mode = if analytic { KlMode::Analytic } else { KlMode::Sampled };
            let mut g = Graph::new(&m.store);
            let e = elbo_partial(&mut g, &m, &x, &q, &noise, mode).unwrap();
            let want: f64 = (0..5)
                .map(|i| oracle_elbo(&m, x.row_slice(i), q.row(i), noise.row_slice(i), analytic))
                .sum::<f64>()
                / 5.0;
            assert!((e.breakdown.total - want).abs() < 1e-12, "{kind}: {} vs {want}", e.breakdown.total);
        }
    }
}

#[test]
fn lambda_zero_and_equal_masks_reduce_to_the_elbo_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in ModelKind::ALL {
        let m = build(kind, 4, 2, 9);
        let reps = m.spec.samples_per_row();
        let (x, q) = random_batch(&mut rng, 6, 4);
        let p = sub_mask(&mut rng, &q);
        let nq = normal(&mut rng, 6 * reps, 2);
        let np = normal(&mut rng, 6 * reps, 2);
        let mut g = Graph::new(&m.store);
        let base = model_bound(&mut g, &m, &x, &q, &nq).unwrap();
        let r0 = regularized_loss(&mut g, &m, &x, &q, &p, 0.0, &nq, &np).unwrap();
        assert_eq!(bits(&r0), bits(&base), "{kind} λ = 0");
        for lambda in [0.3, 1.0, 1.5] {
            let r = regularized_loss(&mut g, &m, &x, &q, &q, lambda, &nq, &nq).unwrap();
            assert_eq!(r.breakdown.kl_qp, 0.0, "{kind}");
            assert_eq!(r.breakdown.loglik_pbar, 0.0, "{kind}");
            assert_eq!(bits(&r), bits(&base), "{kind} P = Q, λ = {lambda}");
        }
    }
    // the analytic Gaussian ELBO is the bound of the plain models
    let m = build(ModelKind::Pnp, 4, 2, 9);
    let (x, q) = random_batch(&mut rng, 6, 4);
    let n = normal(&mut rng, 6, 2);
    let mut g = Graph::new(&m.store);
    let a = model_bound(&mut g, &m, &x, &q, &n).unwrap();
    let b = elbo_partial(&mut g, &m, &x, &q, &n, KlMode::Analytic).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn regularized_total_matches_independent_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (case, kind) in GAUSSIAN_KINDS.iter().cycle().take(9).enumerate() {
        let m = build(*kind, 4, 3, 20 + case as u64);
        let n = 4;
        let (x, q) = random_batch(&mut rng, n, 4);
        let p = sub_mask(&mut rng, &q);
        let nq = normal(&mut rng, n, 3);
        let np = normal(&mut rng, n, 3);
        let lambda = rng.gen_range(0.01..1.5);
        let mut g = Graph::new(&m.store);
        let r = regularized_loss(&mut g, &m, &x, &q, &p, lambda, &nq, &np).unwrap();

        let (mut eq, mut ep, mut kl, mut ll) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let xi = x.row_slice(i);
            eq += oracle_elbo(&m, xi, q.row(i), nq.row_slice(i), true);
            ep += oracle_elbo(&m, xi, p.row(i), np.row_slice(i), true);
            let post_q = m.encoder.encode(&m.store, xi, q.row(i)).unwrap();
            let post_p = m.encoder.encode(&m.store, xi, p.row(i)).unwrap();
            kl += dist::diag_gaussian_kl(&post_q, &post_p).unwrap();
            let z = dist::reparam_sample(&post_q, nq.row_slice(i)).unwrap();
            let like = m.decoder.decode(&m.store, &z).unwrap();
            let pbar: Vec<bool> = (0..4).map(|j| q.get(i, j) && !p.get(i, j)).collect();
            ll += masked_log_likelihood(&like, xi, &pbar).unwrap();
        }
        let nf = n as f64;
        let want = LossBreakdown::compose(lambda, eq / nf, ep / nf, kl / nf, ll / nf);
        let b = r.breakdown;
        for (got, w) in [
            (b.total, want.total),
            (b.elbo_q, want.elbo_q),
            (b.elbo_p, want.elbo_p),
            (b.kl_qp, want.kl_qp),
            (b.loglik_pbar, want.loglik_pbar),
        ] {
            assert!((got - w).abs() < 1e-12, "{kind}: {got} vs {w}");
        }
        assert_eq!(b, LossBreakdown::compose(lambda, b.elbo_q, b.elbo_p, b.kl_qp, b.loglik_pbar));
    }
}

#[test]
fn flow_regularizer_uses_the_log_ratio_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = build(ModelKind::Flow, 4, 2, 7);
    let (x, q) = random_batch(&mut rng, 3, 4);
    let p = sub_mask(&mut rng, &q);
    let nq = normal(&mut rng, 3, 2);
    let np = normal(&mut rng, 3, 2);
    let mut g = Graph::new(&m.store);
    let r = regularized_loss(&mut g, &m, &x, &q, &p, 0.8, &nq, &np).unwrap();
    let mut kl = 0.0;
    for i in 0..3 {
        let a = m.posterior_parts(x.row_slice(i), q.row(i)).unwrap();
        let b = m.posterior_parts(x.row_slice(i), p.row(i)).unwrap();
        kl += m.posterior_kl(&a, &b, &Tensor::row(nq.row_slice(i))).unwrap();
    }
    assert!((r.breakdown.kl_qp - kl / 3.0).abs() < 1e-10);
}

#[test]
fn single_sample_miwae_is_the_sampled_elbo() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..5 {
        let m = build(ModelKind::Miwae, 4, 3, seed);
        let (x, q) = random_batch(&mut rng, 6, 4);
        let noise = normal(&mut rng, 6, 3);
        let mut g = Graph::new(&m.store);
        let iw = miwae_bound(&mut g, &m, &x, &q, &noise).unwrap();
        let e = elbo_partial(&mut g, &m, &x, &q, &noise, KlMode::Sampled).unwrap();
        assert_eq!(bits(&iw), bits(&e));
    }
}

#[test]
fn miwae_with_exact_prior_posterior_is_the_marginal() {
    let mut m = build(ModelKind::Miwae, 3, 2, 8);
    zero_all(&mut m, "enc.");
    // decoder that ignores z: only the output bias survives
    let last = m.decoder.net().layers.len() - 1;
    for id in m.store.ids().collect::<Vec<_>>() {
        let name = m.store.name(id).to_string();
        if name.starts_with("dec.") && name != format!("dec.{last}.b") {
            m.store.get_mut(id).data_mut().fill(0.0);
        }
    }
    let x = Tensor::row(&[0.2, 0.6, 0.9]);
    let q = MaskPattern::from_vec(1, 3, vec![true, false, true]).unwrap();
    let like = m.decoder.decode(&m.store, &[0.0, 0.0]).unwrap();
    let marginal = masked_log_likelihood(&like, x.data(), q.row(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for reps in [1, 2, 5, 64] {
        let mut g = Graph::new(&m.store);
        let b = miwae_bound(&mut g, &m, &x, &q, &normal(&mut rng, reps, 2)).unwrap();
        assert!((b.breakdown.total - marginal).abs() < 1e-12, "M = {reps}");
    }
}

#[test]
fn importance_bound_grows_with_nested_sample_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let replications = 1000;
    for case in 0..100 {
        let m = build(ModelKind::Miwae, 3, 2, 100 + case);
        let (x, q) = random_batch(&mut rng, 1, 3);
        let mut means = [0.0; 4];
        for _ in 0..replications {
            let all = normal(&mut rng, 8, 2);
            let post = m.encoder.encode(&m.store, x.data(), q.row(0)).unwrap();
            let lw: Vec<f64> = (0..8)
                .map(|s| {
                    let z = dist::reparam_sample(&post, all.row_slice(s)).unwrap();
                    let like = m.decoder.decode(&m.store, &z).unwrap();
                    masked_log_likelihood(&like, x.data(), q.row(0)).unwrap()
                        + dist::gaussian_log_density(&z, &DiagGaussian::standard(2)).unwrap()
                        - dist::gaussian_log_density(&z, &post).unwrap()
                })
                .collect();
            for (k, mean) in means.iter_mut().enumerate() {
                let size = 1 << k;
                let b = cvae::numcore::graph::logsumexp(&lw[..size]) - (size as f64).ln();
                *mean += b / replications as f64;
            }
            // the graph bound agrees with the hand-built one on the full set
            if case == 0 {
                let mut g = Graph::new(&m.store);
                let b = miwae_bound(&mut g, &m, &x, &q, &all).unwrap();
                let want = cvae::numcore::graph::logsumexp(&lw) - 8f64.ln();
                assert!((b.breakdown.total - want).abs() < 1e-10);
            }
        }
        for w in means.windows(2) {
            assert!(w[1] >= w[0] - 1e-3, "case {case}: {means:?}");
        }
    }
}

fn set_mask_head(m: &mut Model, slope: f64, offset: f64) {
    let (a, b) = (param(m, "mask.a"), param(m, "mask.b"));
    m.store.get_mut(a).data_mut().fill(slope);
    m.store.get_mut(b).data_mut().fill(offset);
}

#[test]
fn half_probability_mask_head_shifts_by_d_ln_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = 4;
    let mut m = build(ModelKind::NotMiwae, d, 2, 11);
    set_mask_head(&mut m, 0.0, 0.3);
    let (x, q) = random_batch(&mut rng, 5, d);
    let noise = normal(&mut rng, 5 * m.spec.samples_per_row(), 2);
    let mut g = Graph::new(&m.store);
    let with = not_miwae_bound(&mut g, &m, &x, &q, &noise).unwrap().breakdown.total;
    let mut plain = m.clone();
    plain.mask_head = None;
    let mut g = Graph::new(&plain.store);
    let without = miwae_bound(&mut g, &plain, &x, &q, &noise).unwrap().breakdown.total;
    assert!((with - (without + d as f64 * 0.5f64.ln())).abs() < 1e-12);

    let mut m = build(ModelKind::FlowMnar, d, 2, 12);
    set_mask_head(&mut m, 0.0, 0.3);
    let noise = normal(&mut rng, 5, 2);
    let mut g = Graph::new(&m.store);
    let (o, t) = mnar_flow_elbo(&mut g, &m, &x, &q, &noise).unwrap();
    assert!((t.mask_log_mass - d as f64 * 0.5f64.ln()).abs() < 1e-12);
    assert!((o.breakdown.total - (t.flow_elbo + d as f64 * 0.5f64.ln())).abs() < 1e-12);
    let mut plain = m.clone();
    plain.mask_head = None;
    let mut g = Graph::new(&plain.store);
    let flow = model_bound(&mut g, &plain, &x, &q, &noise).unwrap().breakdown.total;
    assert!((t.flow_elbo - flow).abs() < 1e-12);
}

#[test]
fn certain_observation_makes_the_mask_term_vanish() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::row(&[0.1, 0.4, 0.8]);
    let full = MaskPattern::full(1, 3, true);
    for kind in [ModelKind::NotMiwae, ModelKind::FlowMnar] {
        let mut m = build(kind, 3, 2, 14);
        set_mask_head(&mut m, 1.0, 1000.0);
        let noise = normal(&mut rng, m.spec.samples_per_row(), 2);
        let mut g = Graph::new(&m.store);
        let with = model_bound(&mut g, &m, &x, &full, &noise).unwrap().breakdown.total;
        let mut plain = m.clone();
        plain.mask_head = None;
        let mut g = Graph::new(&plain.store);
        let without = model_bound(&mut g, &plain, &x, &full, &noise).unwrap().breakdown.total;
        // probabilities are floored at 1 - 1e-6
        assert!((with - without).abs() < 1e-5, "{kind}");
    }
}

#[test]
fn not_miwae_matches_hand_assembled_log_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let m = build(ModelKind::NotMiwae, 4, 2, 16);
    let head = m.mask_head.as_ref().unwrap();
    let reps = m.spec.samples_per_row();
    for _ in 0..10 {
        let (x, q) = random_batch(&mut rng, 1, 4);
        let noise = normal(&mut rng, reps, 2);
        let post = m.encoder.encode(&m.store, x.data(), q.row(0)).unwrap();
        let lw: Vec<f64> = (0..reps)
            .map(|s| {
                let z = dist::reparam_sample(&post, noise.row_slice(s)).unwrap();
                let like = m.decoder.decode(&m.store, &z).unwrap();
                let x_hat: Vec<f64> = (0..4).map(|j| if q.get(0, j) { x.get(0, j) } else { like.mean[j] }).collect();
                let pi = head.probs(&m.store, &x_hat).unwrap();
                masked_log_likelihood(&like, x.data(), q.row(0)).unwrap()
                    + dist::gaussian_log_density(&z, &DiagGaussian::standard(2)).unwrap()
                    - dist::gaussian_log_density(&z, &post).unwrap()
                    + dist::bernoulli_log_mass(q.row(0), &pi).unwrap()
            })
            .collect();
        let want = cvae::numcore::graph::logsumexp(&lw) - (reps as f64).ln();
        let mut g = Graph::new(&m.store);
        let got = not_miwae_bound(&mut g, &m, &x, &q, &noise).unwrap().breakdown.total;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn bounds_are_finite_for_empty_and_single_observation_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::from_vec(2, 3, vec![0.3, 0.5, 0.7, 0.1, 0.2, 0.9]).unwrap();
    let q = MaskPattern::from_vec(2, 3, vec![false, false, false, false, true, false]).unwrap();
    let p = MaskPattern::full(2, 3, false);
    for kind in ModelKind::ALL {
        let m = build(kind, 3, 2, 18);
        let reps = m.spec.samples_per_row();
        let mut g = Graph::new(&m.store);
        let r = regularized_loss(&mut g, &m, &x, &q, &p, 1.0, &normal(&mut rng, 2 * reps, 2), &normal(&mut rng, 2 * reps, 2))
            .unwrap();
        let b = r.breakdown;
        for v in [b.total, b.elbo_q, b.elbo_p, b.kl_qp, b.loglik_pbar] {
            assert!(v.is_finite(), "{kind}: {b:?}");
        }
        let grads = g.gradient(r.total).unwrap();
        for id in m.store.ids() {
            assert!(grads.get(id).all_finite(), "{kind}");
        }
    }
}

#[test]
fn flat_flow_kl_estimate_matches_closed_form() {
    let mut m = build(ModelKind::Flow, 3, 2, 19);
    zero_all(&mut m, "flow.");
    let a = (DiagGaussian::new(vec![0.3, -0.2], vec![-0.4, 0.2]).unwrap(), vec![0.1, 0.2]);
    let b = (DiagGaussian::new(vec![-0.1, 0.4], vec![0.1, -0.3]).unwrap(), vec![0.5, -0.7]);
    let closed = dist::diag_gaussian_kl(&a.0, &b.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let samples = 10_000;
    let noise = normal(&mut rng, samples, 2);
    let qa = m.flow_posterior(a.0.clone(), a.1.clone()).unwrap();
    let qb = m.flow_posterior(b.0.clone(), b.1.clone()).unwrap();
    let (z, _) = qa.sample_and_logprob(&noise).unwrap();
    let la = qa.log_prob(&z).unwrap();
    let lb = qb.log_prob(&z).unwrap();
    let terms: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x - y).collect();
    let mean = terms.iter().sum::<f64>() / samples as f64;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
    let se = (var / samples as f64).sqrt();
    assert!((mean - closed).abs() < 3.0 * se, "{mean} vs {closed} (se {se})");
    assert!((flow_kl_estimate(&qa, &qb, &noise).unwrap() - mean).abs() < 1e-12);
}

#[test]
fn flow_kl_estimate_is_nonnegative_on_average() {
    let m = build(ModelKind::Flow, 3, 2, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..5 {
        let a = m.posterior_parts(&[0.2, 0.5, 0.9], &[true, true, false]).unwrap();
        let b = m.posterior_parts(&[rng.gen(), 0.5, 0.9], &[rng.gen_bool(0.5), false, true]).unwrap();
        let draws: Vec<f64> = (0..200)
            .map(|_| m.posterior_kl(&a, &b, &normal(&mut rng, 10, 2)).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
        assert!(mean > -3.0 * sd / (draws.len() as f64).sqrt(), "{mean}");
    }
}

// --- finite differences through whole losses ---

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn fd_check(m: &mut Model, label: &str, loss: &dyn Fn(&mut Graph<'_>, &Model) -> Objective) {
    let analytic = {
        let mut g = Graph::new(&m.store);
        let o = loss(&mut g, m);
        g.gradient(o.total).unwrap()
    };
    let eval = |m: &Model| {
        let mut g = Graph::new(&m.store);
        loss(&mut g, m).breakdown.total
    };
    let mut worst: f64 = 0.0;
    for id in m.store.ids().collect::<Vec<_>>() {
        for k in 0..m.store.get(id).len() {
            let orig = m.store.get(id).data()[k];
            m.store.get_mut(id).data_mut()[k] = orig + H;
            let up = eval(m);
            m.store.get_mut(id).data_mut()[k] = orig - H;
            let down = eval(m);
            m.store.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * H);
            let a = analytic.get(id).data()[k];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
            assert!(err < TOL, "{label}: {}[{k}] analytic {a} vs fd {fd}", m.store.name(id));
        }
    }
    assert!(worst < TOL);
}

#[test]
fn every_loss_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::from_vec(3, 3, vec![0.2, 0.6, 0.4, 0.8, 0.3, 0.55, 0.1, 0.9, 0.7]).unwrap();
    let q = MaskPattern::from_vec(3, 3, vec![true, true, false, true, true, true, false, true, true]).unwrap();
    let p = MaskPattern::from_vec(3, 3, vec![true, false, false, false, true, true, false, false, true]).unwrap();
    for kind in ModelKind::ALL {
        let mut m = build(kind, 3, 2, 24);
        let reps = m.spec.samples_per_row();
        let nq = normal(&mut rng, 3 * reps, 2);
        let np = normal(&mut rng, 3 * reps, 2);
        let (x2, q2, p2) = (x.clone(), q.clone(), p.clone());
        fd_check(&mut m, &format!("{kind} regularized"), &move |g, m| {
            regularized_loss(g, m, &x2, &q2, &p2, 0.9, &nq, &np).unwrap()
        });
        let n1 = normal(&mut rng, 3 * reps, 2);
        let (x2, q2) = (x.clone(), q.clone());
        fd_check(&mut m, &format!("{kind} bound"), &move |g, m| model_bound(g, m, &x2, &q2, &n1).unwrap());
        if !kind.is_flow() && !kind.is_mnar() {
            let n1 = normal(&mut rng, 3, 2);
            let (x2, q2) = (x.clone(), q.clone());
            fd_check(&mut m, &format!("{kind} elbo"), &move |g, m| {
                elbo_partial(g, m, &x2, &q2, &n1, KlMode::Analytic).unwrap()
            });
        }
    }
}

#[test]
fn nested_posteriors_satisfy_the_consistency_relation_exactly() {
    assert_eq!(toy::check_relation(&toy::example()), Ok(8 * 27));
}
