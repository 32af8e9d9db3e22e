//! Layer building blocks over [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Self::with_bound(store, name, d_in, d_out, bound, rng)
    }

    /// Weights drawn from U(-bound, bound); `bound = 0` gives an all-zero layer.
    pub fn with_bound(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w_vals = if bound > 0.0 {
            uniform(rng, d_in * d_out, bound)
        } else {
            vec![0.0; d_in * d_out]
        };
        let w = store.add(format!("{name}.w"), &[d_in, d_out], w_vals);
        let b = store.add(format!("{name}.b"), &[d_out], vec![0.0; d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        x.matmul(&tape.param(store, self.w))?.add(&tape.param(store, self.b))
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, &h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu();
            }
        }
        Ok(h)
    }
}

/// Layer norm over the last axis followed by a learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[d], vec![1.0; d]),
            beta: store.add(format!("{name}.beta"), &[d], vec![0.0; d]),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        x.layer_norm()?
            .mul(&tape.param(store, self.gamma))?
            .add(&tape.param(store, self.beta))
    }
}
