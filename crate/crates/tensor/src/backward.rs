//! Reverse sweep over the tape.

use crate::error::{Result, TensorError};
use crate::ops::{gelu_grad, split_axis};
use crate::param::ParamId;
use crate::tape::{Node, Op, Tape, Var};

/// Gradients of a scalar loss with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient per parameter id, in store order. Parameters the loss did not
    /// touch are `None`.
    pub fn params(&self, n_params: usize) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; n_params];
        for &(param, node) in &self.params {
            if param < n_params {
                out[param] = self.grads[node].clone();
            }
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id.0)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], node: usize, len: usize) -> &mut Vec<f64> {
    grads[node].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `g` (length n) into a possibly-broadcast operand of length `len`.
fn add_broadcast(dst: &mut [f64], g: &[f64], sign: f64) {
    let len = dst.len();
    if len == g.len() {
        for (d, &x) in dst.iter_mut().zip(g) {
            *d += sign * x;
        }
    } else {
        for (i, &x) in g.iter().enumerate() {
            dst[i % len] += sign * x;
        }
    }
}

impl Tape {
    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        self.check_finite()?;
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut params = Vec::new();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if let Op::Param(p) = node.op {
                params.push((p, id));
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| nodes[i].value.as_slice();
    let wants = |i: usize| nodes[i].requires_grad;
    let len = |i: usize| nodes[i].value.len();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul(a, b) => {
            let k = *nodes[a].shape.last().unwrap();
            let n = nodes[b].shape[1];
            let m = len(a) / k.max(1);
            if wants(a) {
                let bv = val(b);
                let da = accumulate(grads, a, m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if wants(b) {
                let av = val(a);
                let db = accumulate(grads, b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (d, &x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += aip * x;
                        }
                    }
                }
            }
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(a) {
                add_broadcast(accumulate(grads, a, len(a)), g, 1.0);
            }
            if wants(b) {
                add_broadcast(accumulate(grads, b, len(b)), g, sign_b);
            }
        }
        &Op::Mul(a, b) => {
            let (la, lb) = (len(a), len(b));
            if wants(a) {
                let bv = val(b);
                let da = accumulate(grads, a, la);
                for (i, &gi) in g.iter().enumerate() {
                    da[i % la] += gi * bv[i % lb];
                }
            }
            if wants(b) {
                let av = val(a);
                let db = accumulate(grads, b, lb);
                for (i, &gi) in g.iter().enumerate() {
                    db[i % lb] += gi * av[i % la];
                }
            }
        }
        &Op::Scale(a, s) => {
            let da = accumulate(grads, a, g.len());
            for (d, &x) in da.iter_mut().zip(g) {
                *d += s * x;
            }
        }
        &Op::Offset(a) | &Op::Identity(a) => {
            add_broadcast(accumulate(grads, a, g.len()), g, 1.0);
        }
        Op::LayerNorm { x, inv_std } => {
            let d = *node.shape.last().unwrap();
            let y = &node.value;
            let dx = accumulate(grads, *x, g.len());
            for (r, &is) in inv_std.iter().enumerate() {
                let gr = &g[r * d..(r + 1) * d];
                let yr = &y[r * d..(r + 1) * d];
                let mean_g = gr.iter().sum::<f64>() / d as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[r * d + j] += is * (gr[j] - mean_g - yr[j] * mean_gy);
                }
            }
        }
        &Op::Softmax { x, axis } => {
            let (outer, l, inner_n) = split_axis(&node.shape, axis);
            let y = &node.value;
            let dx = accumulate(grads, x, g.len());
            for o in 0..outer {
                for i in 0..inner_n {
                    let idx = |j: usize| (o * l + j) * inner_n + i;
                    let dot: f64 = (0..l).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..l {
                        dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
        }
        &Op::Relu(a) => {
            let xv = val(a);
            let da = accumulate(grads, a, g.len());
            for i in 0..g.len() {
                if xv[i] > 0.0 {
                    da[i] += g[i];
                }
            }
        }
        &Op::Gelu(a) => {
            let xv = val(a);
            let da = accumulate(grads, a, g.len());
            for i in 0..g.len() {
                da[i] += g[i] * gelu_grad(xv[i]);
            }
        }
        &Op::Tanh(a) => {
            let y = &node.value;
            let da = accumulate(grads, a, g.len());
            for i in 0..g.len() {
                da[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }
        &Op::Exp(a) => {
            let y = &node.value;
            let da = accumulate(grads, a, g.len());
            for i in 0..g.len() {
                da[i] += g[i] * y[i];
            }
        }
        &Op::Sin(a) => {
            let xv = val(a);
            let da = accumulate(grads, a, g.len());
            for i in 0..g.len() {
                da[i] += g[i] * xv[i].cos();
            }
        }
        &Op::Cos(a) => {
            let xv = val(a);
            let da = accumulate(grads, a, g.len());
            for i in 0..g.len() {
                da[i] -= g[i] * xv[i].sin();
            }
        }
        &Op::Tan(a) => {
            let y = &node.value;
            let da = accumulate(grads, a, g.len());
            for i in 0..g.len() {
                da[i] += g[i] * (1.0 + y[i] * y[i]);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner_n) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            let total = node.shape[*axis] * inner_n;
            for &p in parts {
                let chunk = nodes[p].shape[*axis] * inner_n;
                if wants(p) {
                    let dp = accumulate(grads, p, len(p));
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (d, s) in dp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += chunk;
            }
        }
        &Op::Slice { x, axis, start } => {
            let src_shape = &nodes[x].shape;
            let (outer, l, inner_n) = split_axis(src_shape, axis);
            let width = node.shape[axis] * inner_n;
            let dx = accumulate(grads, x, len(x));
            for o in 0..outer {
                let base = (o * l + start) * inner_n;
                for (d, s) in dx[base..base + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                    *d += s;
                }
            }
        }
        Op::Gather { x, idx } => {
            let row_len = if idx.is_empty() { 0 } else { g.len() / idx.len() };
            let dx = accumulate(grads, *x, len(*x));
            for (r, &i) in idx.iter().enumerate() {
                for (d, s) in dx[i * row_len..(i + 1) * row_len]
                    .iter_mut()
                    .zip(&g[r * row_len..(r + 1) * row_len])
                {
                    *d += s;
                }
            }
        }
        Op::PairScores {
            q,
            k,
            q_rows,
            k_rows,
            heads,
        } => {
            let d = nodes[*q].shape[1];
            let dh = d / heads;
            for (target, other, own_rows, other_rows) in [(*q, *k, q_rows, k_rows), (*k, *q, k_rows, q_rows)] {
                if !wants(target) {
                    continue;
                }
                let ov = val(other);
                let dt = accumulate(grads, target, len(target));
                for (r, (&ti, &oi)) in own_rows.iter().zip(other_rows.iter()).enumerate() {
                    for h in 0..*heads {
                        let gr = g[r * heads + h];
                        for c in h * dh..(h + 1) * dh {
                            dt[ti * d + c] += gr * ov[oi * d + c];
                        }
                    }
                }
            }
        }
        Op::PairMix { w, v, v_rows, group } => {
            let heads = nodes[*w].shape[1];
            let d = nodes[*v].shape[1];
            let dh = d / heads;
            if wants(*w) {
                let vv = val(*v);
                let dw = accumulate(grads, *w, len(*w));
                for (r, &vi) in v_rows.iter().enumerate() {
                    let grow = &g[(r / group) * d..(r / group + 1) * d];
                    for h in 0..heads {
                        dw[r * heads + h] += (h * dh..(h + 1) * dh).map(|c| grow[c] * vv[vi * d + c]).sum::<f64>();
                    }
                }
            }
            if wants(*v) {
                let wv = val(*w);
                let dv = accumulate(grads, *v, len(*v));
                for (r, &vi) in v_rows.iter().enumerate() {
                    let grow = &g[(r / group) * d..(r / group + 1) * d];
                    for h in 0..heads {
                        let wr = wv[r * heads + h];
                        for c in h * dh..(h + 1) * dh {
                            dv[vi * d + c] += wr * grow[c];
                        }
                    }
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            let dx = accumulate(grads, *x, g.len());
            for i in 0..g.len() {
                if !mask[i] {
                    dx[i] += g[i];
                }
            }
        }
        &Op::Sum(a) => {
            let da = accumulate(grads, a, len(a));
            for d in da.iter_mut() {
                *d += g[0];
            }
        }
        &Op::Mean(a) => {
            let n = len(a);
            let da = accumulate(grads, a, n);
            let s = g[0] / n.max(1) as f64;
            for d in da.iter_mut() {
                *d += s;
            }
        }
        &Op::SumSquares(a) => {
            let xv = val(a);
            let da = accumulate(grads, a, xv.len());
            for (d, &x) in da.iter_mut().zip(xv) {
                *d += 2.0 * x * g[0];
            }
        }
        &Op::SumAxis { x, axis } => {
            let (outer, l, inner_n) = split_axis(&nodes[x].shape, axis);
            let dx = accumulate(grads, x, len(x));
            for o in 0..outer {
                let src = &g[o * inner_n..(o + 1) * inner_n];
                for j in 0..l {
                    let base = (o * l + j) * inner_n;
                    for (d, s) in dx[base..base + inner_n].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}
