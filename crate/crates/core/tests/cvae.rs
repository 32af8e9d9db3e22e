use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenflow_core::backbone::BackboneConfig;
use scenflow_core::cvae::{
    gaussian_kl, latent_kl, standard_noise, train_vae, Cvae, CvaeConfig, LatentSet, VaeTrainConfig, LOG_STD_MAX,
    LOG_STD_MIN,
};
use scenflow_core::scene::{Pose2, Scenario};
use scenflow_core::synth::{gen_nominal, generate_pool, MapPreset, PoolKind, SynthConfig};
use scenflow_tensor::gradcheck::{all_coords, check_params};
use scenflow_tensor::TensorError;

fn synth() -> SynthConfig {
    SynthConfig {
        dt: 0.2,
        history_steps: 5,
        future_steps: 25,
        ..Default::default()
    }
}

fn small() -> CvaeConfig {
    CvaeConfig {
        backbone: BackboneConfig {
            d_model: 16,
            n_heads: 2,
            n_blocks: 1,
            top_k_actors: 8,
            top_k_map_nodes: 8,
        },
        latent_dim: 4,
        dt: 0.2,
        history_steps: 5,
        future_steps: 25,
        ..Default::default()
    }
}

fn scenario(seed: u64) -> Scenario {
    gen_nominal(Arc::new(MapPreset::Highway.build()), 4, seed, &synth()).unwrap()
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn tensor_err(e: scenflow_core::cvae::CvaeError) -> TensorError {
    match e {
        scenflow_core::cvae::CvaeError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn construction_is_seed_deterministic() {
    assert_eq!(
        Cvae::new(small(), 3).unwrap().to_bytes(),
        Cvae::new(small(), 3).unwrap().to_bytes()
    );
    assert_ne!(
        Cvae::new(small(), 3).unwrap().hash(),
        Cvae::new(small(), 4).unwrap().hash()
    );
}

#[test]
fn prior_and_posterior_log_std_stay_in_bounds() {
    let m = Cvae::new(small(), 1).unwrap();
    for seed in 0..5 {
        let p = m.prepare(&scenario(seed), true).unwrap();
        for set in [m.prior(&p).unwrap(), m.posterior(&p).unwrap()] {
            assert_eq!(set.n_actors(), p.n_actors());
            assert_eq!(set.dim(), 4);
            assert!(set
                .log_std
                .iter()
                .flatten()
                .all(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(l)));
        }
    }
}

#[test]
fn prior_is_permutation_equivariant() {
    let m = Cvae::new(small(), 2).unwrap();
    let s = scenario(5);
    let perm: Vec<usize> = (0..s.n_actors()).rev().collect();
    let a = m.prior(&m.prepare(&s, false).unwrap()).unwrap();
    let b = m.prior(&m.prepare(&s.permuted(&perm), false).unwrap()).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert_eq!(b.mean[new], a.mean[old]);
        assert_eq!(b.log_std[new], a.log_std[old]);
    }
}

#[test]
fn prior_is_viewpoint_invariant_and_rollouts_move_with_the_scene() {
    let m = Cvae::new(small(), 3).unwrap();
    let s = scenario(6);
    let g = Pose2::new(-250.0, 71.5, 2.2);
    let moved = s.transformed(&g);
    let (pa, pb) = (m.prepare(&s, false).unwrap(), m.prepare(&moved, false).unwrap());
    let (a, b) = (m.prior(&pa).unwrap(), m.prior(&pb).unwrap());
    assert!(max_gap(&a.mean, &b.mean) < 1e-6);
    assert!(max_gap(&a.log_std, &b.log_std) < 1e-6);
    let z = a.mean.clone();
    let da = m.decode(&pa, &z).unwrap();
    let db = m.decode(&pb, &z).unwrap();
    for (fa, fb) in da.future.iter().zip(&db.future) {
        for (x, y) in fa.iter().zip(fb) {
            let want = g.compose(&x.pose());
            assert!((want.x - y.x).hypot(want.y - y.y) < 1e-6);
        }
    }
}

#[test]
fn reparameterized_moments_match_the_distribution() {
    let set = LatentSet {
        mean: vec![vec![1.5, -0.5]],
        log_std: vec![vec![0.3f64.ln(), LOG_STD_MIN]],
        sample: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut sums = [[0.0; 2]; 2];
    for _ in 0..n {
        let z = set.reparameterize(&set.draw_noise(&mut rng)).unwrap().sample.unwrap();
        for k in 0..2 {
            sums[k][0] += z[0][k];
            sums[k][1] += z[0][k] * z[0][k];
        }
    }
    let stats = |k: usize| {
        let mean = sums[k][0] / n as f64;
        (mean, (sums[k][1] / n as f64 - mean * mean).sqrt())
    };
    let (m0, s0) = stats(0);
    assert!(
        (m0 - 1.5).abs() < 0.02 * 1.5 && (s0 - 0.3).abs() < 0.02 * 0.3,
        "{m0} {s0}"
    );
    let (m1, s1) = stats(1);
    assert!(
        (m1 + 0.5).abs() < 1e-2 && (s1 - LOG_STD_MIN.exp()).abs() < 0.02 * LOG_STD_MIN.exp(),
        "{m1} {s1}"
    );
    assert!(set.reparameterize(&[vec![0.0; 3]]).is_err());
}

#[test]
fn decoding_is_deterministic_and_physical() {
    let m = Cvae::new(small(), 4).unwrap();
    let s = scenario(8);
    let p = m.prepare(&s, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = standard_noise(p.n_actors(), 4, &mut rng);
    let a = m.decode(&p, &z).unwrap();
    assert_eq!(a, m.decode(&p, &z).unwrap());
    assert_eq!(a.future.len(), 25);
    let dyn_cfg = small().dynamics;
    for acts in &a.actions {
        assert_eq!(acts.len(), 25);
        for act in acts {
            assert!(act.accel.abs() <= dyn_cfg.accel_max + 1e-12 && act.steer.abs() <= dyn_cfg.steer_max + 1e-12);
        }
    }
    assert!(a.future.iter().flatten().all(|st| st.yaw > -PI && st.yaw <= PI));
    let other = standard_noise(p.n_actors(), 4, &mut rng);
    assert_ne!(a.future, m.decode(&p, &other).unwrap().future);
}

#[test]
fn elbo_total_combines_terms() {
    let m = Cvae::new(small(), 5).unwrap();
    let p = m.prepare(&scenario(9), true).unwrap();
    let eps = standard_noise(p.n_actors(), 4, &mut ChaCha8Rng::seed_from_u64(1));
    let e = m.elbo(&p, &eps).unwrap();
    assert!((e.total - (e.reconstruction + e.beta * e.kl)).abs() < 1e-9 * e.total.abs().max(1.0));
    assert!(
        (e.reconstruction - (e.position + small().action_weight * e.action)).abs() < 1e-9 * e.reconstruction.max(1.0)
    );
    assert!(e.kl >= 0.0);
    let q = m.posterior(&p).unwrap();
    let prior = m.prior(&p).unwrap();
    assert!((latent_kl(&q, &prior).unwrap() - e.kl).abs() < 1e-9 * e.kl.max(1.0));
    assert_eq!(latent_kl(&q, &q).unwrap(), 0.0);
}

#[test]
fn posterior_sees_the_future() {
    let m = Cvae::new(small(), 6).unwrap();
    let s = scenario(10);
    let p = m.prepare(&s, true).unwrap();
    let mut braked = s.clone();
    for (k, f) in braked.future.iter_mut().enumerate() {
        f[0].x -= 0.3 * k as f64;
    }
    let q = m.prepare(&braked, true).unwrap();
    assert_ne!(m.posterior(&p).unwrap().mean, m.posterior(&q).unwrap().mean);
    assert_eq!(m.prior(&p).unwrap().mean, m.prior(&q).unwrap().mean);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = Cvae::new(small(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.ckpt");
    m.save(&path).unwrap();
    let back = Cvae::load(&path).unwrap();
    assert_eq!(back.to_bytes(), m.to_bytes());
    assert_eq!(back.hash(), m.hash());
    assert!(Cvae::from_bytes(b"garbage").is_err());
}

#[test]
fn short_training_is_reproducible_and_reduces_reconstruction() {
    let data = generate_pool(PoolKind::SimNominal, 6, 3, &synth(), false)
        .unwrap()
        .scenarios;
    let tcfg = VaeTrainConfig {
        steps: 60,
        lr: 3e-3,
        seed: 2,
        ..Default::default()
    };
    let run = || {
        let mut m = Cvae::new(small(), 9).unwrap();
        let log = train_vae(&mut m, data.iter().cycle(), &tcfg, |_, _| {}).unwrap();
        (m, log)
    };
    let (a, log) = run();
    let (b, _) = run();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert!(log.iter().all(|r| r.kl.is_finite() && r.kl >= 0.0));
    let before = Cvae::new(small(), 9).unwrap().mean_reconstruction(&data, 0).unwrap();
    assert!(a.mean_reconstruction(&data, 0).unwrap() < before);
    let cut = data.iter().take(3);
    assert!(train_vae(&mut Cvae::new(small(), 9).unwrap(), cut, &tcfg, |_, _| {}).is_err());
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let cfg = CvaeConfig {
        backbone: BackboneConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            top_k_actors: 3,
            top_k_map_nodes: 3,
        },
        latent_dim: 2,
        future_steps: 10,
        ..small()
    };
    let data_cfg = SynthConfig {
        future_steps: 10,
        ..synth()
    };
    let s = gen_nominal(Arc::new(MapPreset::Highway.build()), 3, 4, &data_cfg).unwrap();
    let m = Cvae::new(cfg, 8).unwrap();
    let p = m.prepare(&s, true).unwrap();
    let eps = standard_noise(p.n_actors(), 2, &mut ChaCha8Rng::seed_from_u64(3));
    let coords: Vec<_> = all_coords(&m.store).into_iter().step_by(11).collect();
    let report = check_params(&m.store, &coords, 1e-5, 1e-5, |tape, store| {
        m.elbo_on_tape(tape, store, &p, &eps).map_err(tensor_err)
    })
    .unwrap();
    assert!(
        report.max_rel_error() < 1e-4,
        "max relative error {}",
        report.max_rel_error()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kl_is_non_negative(
        mq in -5.0..5.0f64, lq in LOG_STD_MIN..LOG_STD_MAX,
        mp in -5.0..5.0f64, lp in LOG_STD_MIN..LOG_STD_MAX,
    ) {
        let kl = gaussian_kl(mq, lq, mp, lp);
        prop_assert!(kl >= -1e-12);
        prop_assert!(gaussian_kl(mq, lq, mq, lq).abs() < 1e-12);
    }
}
