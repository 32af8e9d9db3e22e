use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenflow_tensor::gradcheck::{all_coords, check_params};
use scenflow_tensor::nn::{LayerNorm, Mlp};
use scenflow_tensor::{ParamStore, Tape, TensorError, Var};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let x = tape.zeros(&[3]);
    let y = x.softmax(0).unwrap();
    assert!(close(&y.to_vec(), &[1.0 / 3.0; 3], 1e-15));
}

#[test]
fn softmax_along_middle_axis() {
    let tape = Tape::new();
    let x = tape.constant(&[1, 2, 2], vec![0.0, 5.0, 0.0, -5.0]).unwrap();
    let y = x.softmax(1).unwrap().to_vec();
    // columns normalize independently
    assert!((y[0] + y[2] - 1.0).abs() < 1e-15);
    assert!((y[1] + y[3] - 1.0).abs() < 1e-15);
    assert_eq!(y[0], 0.5);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(&[4], vec![2.5; 4]).unwrap();
    assert!(x.layer_norm().unwrap().to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_matmul() {
    let tape = Tape::new();
    let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(eye.matmul(&a).unwrap().to_vec(), a.to_vec());
}

#[test]
fn product_rule() {
    let mut store = ParamStore::new();
    let x = store.add("x", &[], vec![2.0]);
    let y = store.add("y", &[], vec![3.0]);
    let tape = Tape::new();
    let loss = tape.param(&store, x).mul(&tape.param(&store, y)).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.param(x).unwrap(), &[3.0]);
    assert_eq!(g.param(y).unwrap(), &[2.0]);
}

#[test]
fn sum_squares_gradient() {
    let mut store = ParamStore::new();
    let x = store.add("x", &[2], vec![1.0, -2.0]);
    let tape = Tape::new();
    let loss = tape.param(&store, x).sum_squares();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.param(x).unwrap(), &[2.0, -4.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut store = ParamStore::new();
    let x = store.add("x", &[], vec![3.0]);
    let tape = Tape::new();
    let xv = tape.param(&store, x);
    // x*x + x -> 2x + 1
    let loss = xv.square().add(&xv).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.param(x).unwrap(), &[7.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.zeros(&[2]);
    assert!(matches!(tape.backward(&x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.zeros(&[2, 3]);
    let b = tape.zeros(&[2, 2]);
    let err = a.matmul(&b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 2]
        }
    );
    assert!(a.add(&b).is_err());
}

#[test]
fn first_nan_is_reported_with_op() {
    let tape = Tape::new();
    let x = tape.constant(&[1], vec![1000.0]).unwrap();
    let y = x.exp(); // inf
    let z = y.scale(0.0); // nan, but exp came first
    let err = tape.check_finite().unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { op: "exp", .. }));
    assert!(tape.backward(&z.sum()).is_err());
}

#[test]
fn gather_and_masked_fill() {
    let tape = Tape::new();
    let x = tape.constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let g = x.gather(vec![2, 0, 2]).unwrap();
    assert_eq!(g.shape(), vec![3, 2]);
    assert_eq!(g.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let m = x
        .masked_fill(vec![true, false, false, false, false, true], -1.0)
        .unwrap();
    assert_eq!(m.to_vec(), vec![-1.0, 2.0, 3.0, 4.0, 5.0, -1.0]);
    assert!(x.gather(vec![3]).is_err());
}

#[test]
fn concat_slice_sum_axis() {
    let tape = Tape::new();
    let a = tape.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = Var::concat(&[a, b], 1).unwrap();
    assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    assert_eq!(c.slice(1, 1, 3).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    assert_eq!(c.sum_axis(0).unwrap().to_vec(), vec![3.0, 8.0, 10.0]);
    assert_eq!(c.sum_axis(1).unwrap().to_vec(), vec![8.0, 13.0]);
}

/// Builds a loss that exercises every differentiable op once.
fn every_op_loss(tape: &Tape, store: &ParamStore) -> scenflow_tensor::Result<Var> {
    let ids: Vec<_> = store.ids().collect();
    let a = tape.param(store, ids[0]); // [3,4]
    let w = tape.param(store, ids[1]); // [4,4]
    let b = tape.param(store, ids[2]); // [4]
    let h = a.matmul(&w)?.add(&b)?;
    let n = h.layer_norm()?;
    let s = n.reshape(&[3, 2, 2])?.softmax(1)?.reshape(&[3, 4])?;
    let g = s.gelu().mul(&h.tanh())?;
    let trig = a.sin().add(&a.cos())?.sub(&a.scale(0.3).tan())?;
    let e = a.scale(0.2).exp().add_scalar(0.5).relu();
    let cat = Var::concat(&[g.clone(), trig.clone(), e], 1)?; // [3,12]
    let sl = cat.slice(1, 2, 9)?;
    let gat = sl.gather(vec![2, 0, 2, 1])?;
    let masked = gat.masked_fill(
        vec![false; 28]
            .into_iter()
            .enumerate()
            .map(|(i, _)| i % 5 == 0)
            .collect::<Vec<_>>(),
        0.0,
    )?;
    let col = masked.sum_axis(0)?;
    let wrapped = trig.scale(3.0).wrap_angle();
    col.sum_squares()
        .add(&masked.mean())?
        .add(&wrapped.sum())?
        .add(&cat.sum())
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let mut rand_vec = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    store.add("a", &[3, 4], rand_vec(12));
    store.add("w", &[4, 4], rand_vec(16));
    store.add("b", &[4], rand_vec(4));
    let report = check_params(&store, &all_coords(&store), 1e-5, 1e-6, every_op_loss).unwrap();
    assert!(report.max_rel_error() < 1e-5, "{:?}", report.entries);
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[3, 8, 2], &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 2);
        let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let report = check_params(&store, &all_coords(&store), 1e-5, 1e-6, |tape, s| {
            let xv = tape.constant(&[5, 3], x.clone())?;
            let y = mlp.forward(tape, s, &xv)?;
            Ok(ln.forward(tape, s, &y)?.add(&y)?.sum_squares())
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "seed {seed}: {}", report.max_rel_error());
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[4, 16, 16, 1], &mut rng);
    let run = || {
        let tape = Tape::new();
        let x = tape
            .constant(&[6, 4], (0..24).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let loss = mlp.forward(&tape, &store, &x).unwrap().sum_squares();
        let g = tape.backward(&loss).unwrap();
        g.params(store.len())
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let tape = Tape::new();
            let x = tape.constant(&[3, 4], v).unwrap();
            let y = x.softmax(1).unwrap().to_vec();
            for r in 0..3 {
                let s: f64 = y[r * 4..(r + 1) * 4].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn wrap_angle_in_range(a in -1e4f64..1e4) {
            let w = scenflow_tensor::wrap_angle(a);
            prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
            prop_assert!(((a - w) / (2.0 * std::f64::consts::PI)).fract().abs() < 1e-9
                || (1.0 - ((a - w) / (2.0 * std::f64::consts::PI)).fract().abs()) < 1e-9);
        }
    }
}

fn head_sum(tape: &Tape, d: usize, heads: usize) -> Var {
    let dh = d / heads;
    let mut m = vec![0.0; d * heads];
    for c in 0..d {
        m[c * heads + c / dh] = 1.0;
    }
    tape.constant(&[d, heads], m).unwrap()
}

#[test]
fn pair_ops_match_gather_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let (d, heads, group) = (6, 3, 2);
    let q = tape
        .constant(&[3, d], (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let k = tape
        .constant(&[4, d], (0..4 * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let q_rows = vec![0, 0, 1, 1, 2, 2];
    let k_rows = vec![3, 1, 0, 0, 2, 3];
    let fused = q.pair_scores(&k, q_rows.clone(), k_rows.clone(), heads).unwrap();
    let plain = q
        .gather(q_rows)
        .unwrap()
        .mul(&k.gather(k_rows.clone()).unwrap())
        .unwrap()
        .matmul(&head_sum(&tape, d, heads))
        .unwrap();
    assert!(close(&fused.to_vec(), &plain.to_vec(), 1e-14));

    let w = fused.tanh();
    let mixed = w.pair_mix(&k, k_rows.clone(), group).unwrap();
    let dh = d / heads;
    let mut expand = vec![0.0; heads * d];
    for c in 0..d {
        expand[(c / dh) * d + c] = 1.0;
    }
    let expand = tape.constant(&[heads, d], expand).unwrap();
    let plain = w
        .matmul(&expand)
        .unwrap()
        .mul(&k.gather(k_rows).unwrap())
        .unwrap()
        .reshape(&[3, group, d])
        .unwrap()
        .sum_axis(1)
        .unwrap();
    assert_eq!(mixed.shape(), vec![3, d]);
    assert!(close(&mixed.to_vec(), &plain.to_vec(), 1e-14));
}

#[test]
fn pair_ops_reject_bad_rows() {
    let tape = Tape::new();
    let q = tape.zeros(&[2, 4]);
    assert!(q.pair_scores(&q, vec![0, 2], vec![0, 1], 2).is_err());
    assert!(q.pair_scores(&q, vec![0], vec![0, 1], 2).is_err());
    assert!(q.pair_scores(&q, vec![0], vec![0], 3).is_err());
    let w = tape.zeros(&[3, 2]);
    assert!(w.pair_mix(&q, vec![0, 1, 1], 2).is_err());
    assert!(w.pair_mix(&q, vec![0, 1], 1).is_err());
}

#[test]
fn pair_ops_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        store.add("q", &[3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        store.add("k", &[5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let q_rows: Vec<usize> = (0..9).map(|r| r / 3).collect();
        let k_rows: Vec<usize> = (0..9).map(|_| rng.gen_range(0..5)).collect();
        let report = check_params(&store, &all_coords(&store), 1e-5, 1e-6, |tape, s| {
            let q = tape.param(s, s.find("q").unwrap());
            let k = tape.param(s, s.find("k").unwrap());
            let scores = q.pair_scores(&k, q_rows.clone(), k_rows.clone(), 2)?;
            let w = scores.reshape(&[3, 3, 2])?.softmax(1)?.reshape(&[9, 2])?;
            let out = w.pair_mix(&k, k_rows.clone(), 3)?;
            Ok(out.sin().sum())
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "seed {seed}: {}", report.max_rel_error());
    }
}
