use cvae::evalkit::{eval_rng, test_elbo};
use cvae::missingness::MaskPattern;
use cvae::model::{Checkpoint, ModelKind};
use cvae::numcore::{Graph, Tensor};
use cvae::objectives::{elbo_partial, KlMode};
use cvae::trainer::{init_model, minibatch_iter, train, train_am_step, train_with, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small(kind: ModelKind, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: kind,
        epochs,
        latent: 2,
        batch: 8,
        encoder_hidden: vec![8],
        decoder_hidden: vec![8],
        seed: 4,
        ..Default::default()
    }
}

fn synthetic(n: usize, d: usize, seed: u64) -> (Tensor, MaskPattern) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let q = MaskPattern::from_fn(n, d, |_, _| rng.gen_bool(0.7));
    (x, q)
}

fn checkpoint_bytes(cfg: &TrainConfig, x: &Tensor, q: &MaskPattern) -> (String, String) {
    let (m, log) = train(cfg, x, q).unwrap();
    let ck = Checkpoint::new(m, None, log.config_hash.clone(), cfg.seed);
    (ck.to_json().unwrap(), log.to_csv(false))
}

#[test]
fn repeated_runs_are_bit_identical() {
    let (x, q) = synthetic(16, 3, 1);
    for kind in [ModelKind::Pnp, ModelKind::Flow, ModelKind::NotMiwae] {
        let mut cfg = small(kind, 2);
        cfg.reg.enabled = !kind.is_mnar();
        assert_eq!(checkpoint_bytes(&cfg, &x, &q), checkpoint_bytes(&cfg, &x, &q), "{kind}");
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let (x, q) = synthetic(10, 3, 2);
    let cfg = small(ModelKind::MaskZi, 0);
    let (m, log) = train(&cfg, &x, &q).unwrap();
    assert!(log.records.is_empty());
    assert_eq!(m, init_model(&cfg, &x, &q).unwrap());
}

#[test]
fn hidden_cells_do_not_reach_the_checkpoint() {
    let (x, q) = synthetic(12, 3, 3);
    let mut y = x.clone();
    for i in 0..12 {
        for j in 0..3 {
            if !q.get(i, j) {
                y.set(i, j, 1e6);
            }
        }
    }
    let mut cfg = small(ModelKind::Zi, 3);
    cfg.reg.enabled = true;
    assert_eq!(checkpoint_bytes(&cfg, &x, &q), checkpoint_bytes(&cfg, &y, &q));
}

#[test]
fn plain_loss_is_the_partial_elbo_mean() {
    let (x, q) = synthetic(6, 3, 5);
    let mut cfg = small(ModelKind::Zi, 1);
    cfg.batch = 6;
    cfg.reg.lambda = 0.7;
    let (_, log) = train(&cfg, &x, &q).unwrap();

    let m = init_model(&cfg, &x, &q).unwrap();
    let idx = &minibatch_iter(6, 6, cfg.seed, 1)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x5eed);
    let noise = Tensor::from_vec(6, 2, (0..12).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let mut g = Graph::new(&m.store);
    let e = elbo_partial(&mut g, &m, &x.select_rows(idx), &q.select_rows(idx), &noise, KlMode::Analytic).unwrap();
    assert_eq!(log.records[0].loss, -e.breakdown.total);
    assert_eq!(log.records[0].elbo_q, e.breakdown.total);
}

#[test]
fn checkpoints_follow_the_cadence() {
    let (x, q) = synthetic(8, 2, 6);
    let mut cfg = small(ModelKind::Zi, 7);
    cfg.eval_every = 3;
    let mut seen = Vec::new();
    let (last, log) = train_with(&cfg, &x, &q, &mut |e, m| {
        seen.push((e, m.clone()));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![3, 6, 7]);
    assert_eq!(seen[2].1, last);
    assert_eq!(log.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
}

#[test]
fn toy_training_halves_the_negative_elbo() {
    let x = Tensor::from_vec(4, 2, vec![0.1, 0.9, 0.9, 0.1, 0.2, 0.8, 0.8, 0.2]).unwrap();
    let q = MaskPattern::full(4, 2, true);
    let cfg = small(ModelKind::Zi, 500);
    let before = -test_elbo(&init_model(&cfg, &x, &q).unwrap(), &x, &q, 200, &mut eval_rng(0)).unwrap();
    let (m, _) = train(&cfg, &x, &q).unwrap();
    let after = -test_elbo(&m, &x, &q, 200, &mut eval_rng(0)).unwrap();
    assert!(before > 0.0);
    assert!(after <= 0.5 * before, "{before} -> {after}");
}

#[test]
fn artificial_missingness_drops_about_35_percent() {
    let q = MaskPattern::full(10, 10, true);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let steps = 4000;
    let mut dropped = 0.0;
    for _ in 0..steps {
        let (r, rate) = train_am_step(&q, &mut rng);
        assert!(r.is_subset_of(&q));
        assert!((0.0..=0.7).contains(&rate));
        dropped += 1.0 - r.count_observed() as f64 / 100.0;
    }
    let mean = dropped / steps as f64;
    // U(0, 0.7) has sd 0.202; plus binomial noise per step
    let se = (0.7f64.powi(2) / 12.0 + 0.35 * 0.65 / 100.0).sqrt() / (steps as f64).sqrt();
    assert!((mean - 0.35).abs() < 3.0 * se, "{mean}");
}

#[test]
fn bad_configurations_are_rejected() {
    let (x, q) = synthetic(4, 2, 8);
    let mut cfg = small(ModelKind::Zi, 1);
    cfg.reg.enabled = true;
    cfg.am.enabled = true;
    assert!(train(&cfg, &x, &q).is_err());
    let cfg = TrainConfig { batch: 0, ..small(ModelKind::Zi, 1) };
    assert!(train(&cfg, &x, &q).is_err());
    assert!(train(&small(ModelKind::Zi, 1), &x, &MaskPattern::full(3, 2, true)).is_err());
}
