use crate::error::{Result, TensorError};
use crate::param::ParamStore;

/// Adam optimizer state: one first/second moment array per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Vec<f64>>], state: &mut AdamState) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![store.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != state.m[i].len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.entries()[i].shape.clone(),
                    rhs: vec![g.len()],
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let values = store.value_mut(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..values.len() {
            let gj = grads[i].as_ref().map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            values[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", &[], vec![x]);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s, 0.1);
        adam_step(&mut s, &[Some(vec![0.0])], &mut st).unwrap();
        assert_eq!(s.entries()[0].value[0], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_lr_sized() {
        // t=1: mhat = g, vhat = g^2, so the update is lr * g / (|g| + eps).
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s, 0.1);
        adam_step(&mut s, &[Some(vec![1.0])], &mut st).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.entries()[0].value[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s, 0.01);
        for _ in 0..100 {
            adam_step(&mut s, &[Some(vec![-3.0])], &mut st).unwrap();
        }
        assert!(s.entries()[0].value[0] > 0.9);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s, 0.01);
        assert!(adam_step(&mut s, &[Some(vec![1.0, 2.0])], &mut st).is_err());
        assert!(adam_step(&mut s, &[], &mut st).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let v = g[0].as_ref().unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }
}
