//! Forward definitions of the differentiable ops.
//!
//! Binary elementwise ops broadcast when one operand's shape is a trailing
//! suffix of the other's (a bias row against a matrix, a scalar against
//! anything).

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{numel, Op, Var};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `C[m,n] += A[m,k] * B[k,n]`, row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

impl Var {
    fn check_tape(&self, other: &Var) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignTape)
        }
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (shape, out) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            (node.shape.clone(), node.value.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(shape, out, op)
    }

    fn binary(&self, other: &Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check_tape(other)?;
        let (shape, out) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let shape = if is_suffix(&a.shape, &b.shape) {
                a.shape.clone()
            } else if is_suffix(&b.shape, &a.shape) {
                b.shape.clone()
            } else {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            };
            let n = numel(&shape);
            let (la, lb) = (a.value.len(), b.value.len());
            let out: Vec<f64> = if la == n && lb == n {
                a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect()
            } else {
                (0..n).map(|i| f(a.value[i % la], b.value[i % lb])).collect()
            };
            (shape, out)
        };
        Ok(self.tape.push(shape, out, op))
    }

    /// Matrix product of `self` (`[.., k]`, leading dims flattened) with a 2-D `[k, n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_tape(other)?;
        let (shape, out) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            if a.shape.is_empty() || b.shape.len() != 2 {
                return Err(mismatch());
            }
            let k = *a.shape.last().unwrap();
            if k != b.shape[0] {
                return Err(mismatch());
            }
            let n = b.shape[1];
            let m = a.value.len() / k.max(1);
            let mut out = vec![0.0; m * n];
            matmul_into(&a.value, &b.value, &mut out, m, k, n);
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = n;
            (shape, out)
        };
        Ok(self.tape.push(shape, out, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(|x| x + c, Op::Offset(self.id))
    }

    pub fn square(&self) -> Var {
        self.mul(self).expect("same shape")
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self) -> Result<Var> {
        let shape = self.shape();
        let Some(&d) = shape.last() else {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "scalar input".into(),
            });
        };
        let (out, inv_std) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let rows = x.len() / d;
            let mut out = vec![0.0; x.len()];
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = (v - mean) * is;
                }
                inv_std.push(is);
            }
            (out, inv_std)
        };
        Ok(self.tape.push(shape, out, Op::LayerNorm { x: self.id, inv_std }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, len, inner_n) = split_axis(&shape, axis);
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner_n {
                    let idx = |j: usize| (o * len + j) * inner_n + i;
                    let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (x[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[idx(j)] /= total;
                    }
                }
            }
            out
        };
        Ok(self.tape.push(shape, out, Op::Softmax { x: self.id, axis }))
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        self.unary(gelu_scalar, Op::Gelu(self.id))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn sin(&self) -> Var {
        self.unary(f64::sin, Op::Sin(self.id))
    }

    pub fn cos(&self) -> Var {
        self.unary(f64::cos, Op::Cos(self.id))
    }

    pub fn tan(&self) -> Var {
        self.unary(f64::tan, Op::Tan(self.id))
    }

    /// Wraps angles into (-pi, pi]. Locally the identity, so the gradient is 1.
    pub fn wrap_angle(&self) -> Var {
        self.unary(crate::wrap_angle, Op::Identity(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.to_vec();
        Ok(self.tape.push(shape.to_vec(), values, Op::Identity(self.id)))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        for p in &parts[1..] {
            first.check_tape(p)?;
        }
        let tape = first.tape.clone();
        let (shape, out) = {
            let inner = tape.inner.borrow();
            let base = &inner.nodes[first.id].shape;
            if axis >= base.len() {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: format!("axis {axis} out of range for {base:?}"),
                });
            }
            let mut total = 0;
            for p in parts {
                let s = &inner.nodes[p.id].shape;
                let compatible =
                    s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.clone(),
                    });
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner_n) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let node = &inner.nodes[p.id];
                    let chunk = node.shape[axis] * inner_n;
                    out.extend_from_slice(&node.value[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, out)
        };
        Ok(tape.push(
            shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// The half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {shape:?}"),
            });
        }
        let (outer, len, inner_n) = split_axis(&shape, axis);
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let mut out = Vec::with_capacity(outer * (end - start) * inner_n);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * len + start) * inner_n..(o * len + end) * inner_n]);
            }
            out
        };
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        Ok(self.tape.push(
            new_shape,
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Per-pair, per-head dot products for sparse attention:
    /// `out[r, h] = sum over c in head h of self[q_rows[r], c] * keys[k_rows[r], c]`.
    /// Both inputs are `[rows, d]` with `d` divisible by `heads`.
    pub fn pair_scores(
        &self,
        keys: &Var,
        q_rows: impl Into<Rc<[usize]>>,
        k_rows: impl Into<Rc<[usize]>>,
        heads: usize,
    ) -> Result<Var> {
        self.check_tape(keys)?;
        let (q_rows, k_rows): (Rc<[usize]>, Rc<[usize]>) = (q_rows.into(), k_rows.into());
        let (qs, ks) = (self.shape(), keys.shape());
        let invalid = |msg: String| TensorError::Invalid { op: "pair_scores", msg };
        if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] || heads == 0 || qs[1] % heads != 0 {
            return Err(invalid(format!("inputs {qs:?} and {ks:?} with {heads} heads")));
        }
        if q_rows.len() != k_rows.len() {
            return Err(invalid("row lists differ in length".into()));
        }
        if q_rows.iter().any(|&i| i >= qs[0]) || k_rows.iter().any(|&i| i >= ks[0]) {
            return Err(invalid("row index out of range".into()));
        }
        let d = qs[1];
        let dh = d / heads;
        let out = {
            let inner = self.tape.inner.borrow();
            let (q, k) = (&inner.nodes[self.id].value, &inner.nodes[keys.id].value);
            let mut out = Vec::with_capacity(q_rows.len() * heads);
            for (&qi, &ki) in q_rows.iter().zip(k_rows.iter()) {
                let (qr, kr) = (&q[qi * d..(qi + 1) * d], &k[ki * d..(ki + 1) * d]);
                for h in 0..heads {
                    let span = h * dh..(h + 1) * dh;
                    out.push(qr[span.clone()].iter().zip(&kr[span]).map(|(a, b)| a * b).sum());
                }
            }
            out
        };
        Ok(self.tape.push(
            vec![q_rows.len(), heads],
            out,
            Op::PairScores {
                q: self.id,
                k: keys.id,
                q_rows,
                k_rows,
                heads,
            },
        ))
    }

    /// Head-weighted sums of value rows for sparse attention. `self` holds
    /// weights `[R, heads]`; consecutive groups of `group` pairs share one
    /// output row: `out[r / group, c] = sum of self[r, head(c)] * values[v_rows[r], c]`.
    pub fn pair_mix(&self, values: &Var, v_rows: impl Into<Rc<[usize]>>, group: usize) -> Result<Var> {
        self.check_tape(values)?;
        let v_rows: Rc<[usize]> = v_rows.into();
        let (ws, vs) = (self.shape(), values.shape());
        let invalid = |msg: String| TensorError::Invalid { op: "pair_mix", msg };
        if ws.len() != 2 || vs.len() != 2 || ws[1] == 0 || vs[1] % ws[1] != 0 {
            return Err(invalid(format!("weights {ws:?} and values {vs:?}")));
        }
        if group == 0 || v_rows.len() != ws[0] || ws[0] % group != 0 {
            return Err(invalid(format!(
                "{} value rows for {} pairs in groups of {group}",
                v_rows.len(),
                ws[0]
            )));
        }
        if v_rows.iter().any(|&i| i >= vs[0]) {
            return Err(invalid("row index out of range".into()));
        }
        let (heads, d) = (ws[1], vs[1]);
        let dh = d / heads;
        let m = ws[0] / group;
        let out = {
            let inner = self.tape.inner.borrow();
            let (w, v) = (&inner.nodes[self.id].value, &inner.nodes[values.id].value);
            let mut out = vec![0.0; m * d];
            for (r, &vi) in v_rows.iter().enumerate() {
                let orow = &mut out[(r / group) * d..(r / group + 1) * d];
                let vrow = &v[vi * d..(vi + 1) * d];
                for h in 0..heads {
                    let wr = w[r * heads + h];
                    for c in h * dh..(h + 1) * dh {
                        orow[c] += wr * vrow[c];
                    }
                }
            }
            out
        };
        Ok(self.tape.push(
            vec![m, d],
            out,
            Op::PairMix {
                w: self.id,
                v: values.id,
                v_rows,
                group,
            },
        ))
    }

    /// Selects rows (entries along axis 0) by index; indices may repeat.
    pub fn gather(&self, idx: impl Into<Rc<[usize]>>) -> Result<Var> {
        let idx: Rc<[usize]> = idx.into();
        let shape = self.shape();
        if shape.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: "scalar input".into(),
            });
        }
        let rows = shape[0];
        let row_len = numel(&shape[1..]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let mut out = Vec::with_capacity(idx.len() * row_len);
            for &i in idx.iter() {
                out.extend_from_slice(&x[i * row_len..(i + 1) * row_len]);
            }
            out
        };
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        Ok(self.tape.push(new_shape, out, Op::Gather { x: self.id, idx }))
    }

    /// Replaces entries where `mask` is true with `value` (no gradient flows there).
    pub fn masked_fill(&self, mask: impl Into<Rc<[bool]>>, value: f64) -> Result<Var> {
        let mask: Rc<[bool]> = mask.into();
        if mask.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: self.shape(),
                rhs: vec![mask.len()],
            });
        }
        let out = self
            .values()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        Ok(self.tape.push(self.shape(), out, Op::MaskedFill { x: self.id, mask }))
    }

    pub fn sum(&self) -> Var {
        let s = self.values().iter().sum();
        self.tape.push(vec![], vec![s], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var {
        let s = {
            let v = self.values();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        self.tape.push(vec![], vec![s], Op::Mean(self.id))
    }

    pub fn sum_squares(&self) -> Var {
        let s = self.values().iter().map(|x| x * x).sum();
        self.tape.push(vec![], vec![s], Op::SumSquares(self.id))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, len, inner_n) = split_axis(&shape, axis);
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let mut out = vec![0.0; outer * inner_n];
            for o in 0..outer {
                let dst = &mut out[o * inner_n..(o + 1) * inner_n];
                for j in 0..len {
                    let src = &x[(o * len + j) * inner_n..(o * len + j + 1) * inner_n];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            out
        };
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok(self.tape.push(new_shape, out, Op::SumAxis { x: self.id, axis }))
    }
}
