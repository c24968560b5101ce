//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape is define-by-run: each op executes immediately (so shape
//! errors surface at the call site) and records what it needs for the
//! backward sweep. [`GradTape::backward`] then walks the recorded ops in
//! reverse, accumulating adjoints, and returns gradients keyed by
//! parameter name.
//!
//! [`finite_diff`] provides the independent oracle the gradient tests
//! check every vector-Jacobian product against.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{self, ShapeError, Tensor};

#[derive(Debug, Clone, Error)]
pub enum TapeError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward: loss must be a single scalar, got {elements} elements")]
    NotScalar { elements: usize },
    #[error("gradient lookup for unknown parameter \"{name}\"")]
    MissingParam { name: String },
    #[error("parameter \"{name}\" registered twice on the same tape")]
    DuplicateParam { name: String },
}

/// Handle to a tensor living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Leaf with no gradient of interest.
    Input,
    /// Leaf whose gradient is collected under a name.
    Param(String),
    Matmul(Var, Var),
    AddRowBias(Var, Var),
    Hadamard(Var, Var),
    Add(Var, Var),
    /// Elementwise product with a constant tensor (masks, fixed scales).
    MulConst(Var, Tensor),
    Scale(Var, f64),
    FlipTime(Var),
    Silu(Var),
    LayerNormFeature(Var, f64),
    CausalConv1d { x: Var, w: Var, b: Var },
    SliceCols(Var, usize, usize),
    LastRow(Var),
    /// Vertical concatenation; per-part row counts are recovered from
    /// the stored operand shapes.
    ConcatRows(Vec<Var>),
    Sum(Var),
    /// `sum((pred - target)^2) / B` where B is the number of rows of
    /// `pred`. With pred `B*p` this sums squared errors over the
    /// horizon and averages over the batch.
    MseLoss { pred: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter name. Unknown names are an error so a
/// typo cannot silently read as a zero gradient.
pub struct Gradients {
    by_name: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Result<&Tensor, TapeError> {
        self.by_name.get(name).ok_or_else(|| TapeError::MissingParam {
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> GradTape {
        GradTape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a named parameter leaf. Names must be unique per tape;
    /// registering the same tensor once and reusing the `Var` across
    /// many windows is what makes batch gradients accumulate.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var, TapeError> {
        for node in &self.nodes {
            if let Op::Param(existing) = &node.op {
                if existing == name {
                    return Err(TapeError::DuplicateParam {
                        name: name.to_string(),
                    });
                }
            }
        }
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TapeError> {
        let v = tensor::add_row_bias(self.value(x), self.value(bias))?;
        Ok(self.push(v, Op::AddRowBias(x, bias)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let v = tensor::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var, TapeError> {
        let v = tensor::hadamard(self.value(a), c)?;
        Ok(self.push(v, Op::MulConst(a, c.clone())))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = tensor::scale(self.value(a), s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn flip_time(&mut self, a: Var) -> Result<Var, TapeError> {
        let v = tensor::flip_time(self.value(a))?;
        Ok(self.push(v, Op::FlipTime(a)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = tensor::silu(self.value(a));
        self.push(v, Op::Silu(a))
    }

    pub fn layernorm_feature(&mut self, a: Var, eps: f64) -> Result<Var, TapeError> {
        let v = tensor::layernorm_feature(self.value(a), eps)?;
        Ok(self.push(v, Op::LayerNormFeature(a, eps)))
    }

    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TapeError> {
        let v = tensor::causal_conv1d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::CausalConv1d { x, w, b }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TapeError> {
        let v = tensor::slice_cols(self.value(a), start, end)?;
        Ok(self.push(v, Op::SliceCols(a, start, end)))
    }

    /// Last time step of a `t*d` tensor, kept rank 2 as `1*d`.
    pub fn last_row(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] == 0 {
            return Err(ShapeError::Rank {
                op: "last_row",
                expected: 2,
                shape: t.shape().to_vec(),
            }
            .into());
        }
        let last = t.shape()[0] - 1;
        let v = Tensor::from_vec(&[1, t.shape()[1]], t.row(last).to_vec())?;
        Ok(self.push(v, Op::LastRow(a)))
    }

    /// Stacks rank-2 operands with matching column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        if parts.is_empty() {
            return Err(ShapeError::Invalid {
                op: "concat_rows",
                shape: vec![],
                reason: "no operands".into(),
            }
            .into());
        }
        let cols = self.value(parts[0]).shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[1] != cols {
                return Err(ShapeError::Mismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: t.shape().to_vec(),
                }
                .into());
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::Sum(a))
    }

    /// Squared-error loss: sums over all elements, divides by the row
    /// count of `pred`.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var, TapeError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(ShapeError::Mismatch {
                op: "mse_loss",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            }
            .into());
        }
        let b = p.shape()[0] as f64;
        let v = tensor::sub(p, target)?.square_sum() / b;
        Ok(self.push(
            Tensor::scalar(v),
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per
    /// registered parameter; parameters the loss never touched get
    /// explicit zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let loss_val = self.value(loss);
        if loss_val.len() != 1 {
            return Err(TapeError::NotScalar {
                elements: loss_val.len(),
            });
        }
        let mut adjoint: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(Tensor::filled(loss_val.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoint[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input | Op::Param(_) => {
                    // Leaves keep their adjoint for collection below.
                    adjoint[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let bt = tensor::transpose(self.value(*b))?;
                    let at = tensor::transpose(self.value(*a))?;
                    accumulate(&mut adjoint, *a, tensor::matmul(&g, &bt)?);
                    accumulate(&mut adjoint, *b, tensor::matmul(&at, &g)?);
                }
                Op::AddRowBias(x, bias) => {
                    accumulate(&mut adjoint, *bias, tensor::col_sum(&g)?);
                    accumulate(&mut adjoint, *x, g);
                }
                Op::Hadamard(a, b) => {
                    accumulate(&mut adjoint, *a, tensor::hadamard(&g, self.value(*b))?);
                    accumulate(&mut adjoint, *b, tensor::hadamard(&g, self.value(*a))?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoint, *a, g.clone());
                    accumulate(&mut adjoint, *b, g);
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut adjoint, *a, tensor::hadamard(&g, c)?);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut adjoint, *a, tensor::scale(&g, *s));
                }
                Op::FlipTime(a) => {
                    accumulate(&mut adjoint, *a, tensor::flip_time(&g)?);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut dx = g;
                    for (dv, xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        *dv *= tensor::silu_grad_scalar(*xv);
                    }
                    accumulate(&mut adjoint, *a, dx);
                }
                Op::LayerNormFeature(a, eps) => {
                    let dx = layernorm_vjp(self.value(*a), &self.nodes[idx].value, &g, *eps);
                    accumulate(&mut adjoint, *a, dx);
                }
                Op::CausalConv1d { x, w, b } => {
                    let (dx, dw) = conv_vjp(self.value(*x), self.value(*w), &g);
                    accumulate(&mut adjoint, *b, tensor::col_sum(&g)?);
                    accumulate(&mut adjoint, *x, dx);
                    accumulate(&mut adjoint, *w, dw);
                }
                Op::SliceCols(a, start, _end) => {
                    let src = self.value(*a);
                    let mut dx = Tensor::zeros(src.shape());
                    let w = g.shape()[1];
                    for r in 0..g.shape()[0] {
                        dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adjoint, *a, dx);
                }
                Op::LastRow(a) => {
                    let src = self.value(*a);
                    let mut dx = Tensor::zeros(src.shape());
                    let last = src.shape()[0] - 1;
                    dx.row_mut(last).copy_from_slice(g.row(0));
                    accumulate(&mut adjoint, *a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).shape()[0];
                        let cols = self.value(p).shape()[1];
                        let mut dp = Tensor::zeros(&[rows, cols]);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        offset += rows;
                        accumulate(&mut adjoint, p, dp);
                    }
                }
                Op::Sum(a) => {
                    let s = g.item();
                    accumulate(&mut adjoint, *a, Tensor::filled(self.value(*a).shape(), s));
                }
                Op::MseLoss { pred, target } => {
                    let p = self.value(*pred);
                    let b = p.shape()[0] as f64;
                    let diff = tensor::sub(p, target)?;
                    accumulate(&mut adjoint, *pred, tensor::scale(&diff, 2.0 * g.item() / b));
                }
            }
        }

        let mut by_name = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let grad = adjoint[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_name.insert(name.clone(), grad);
            }
        }
        Ok(Gradients { by_name })
    }
}

fn accumulate(adjoint: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adjoint[v.0] {
        Some(existing) => {
            for (e, a) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += a;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// For y = (x - mean) / sqrt(var + eps) per feature group:
/// dx = (g - mean(g) - y * mean(g . y)) / sqrt(var + eps).
fn layernorm_vjp(x: &Tensor, y: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data();
    let gd = g.data();
    for (pos, chunk) in dx.data_mut().chunks_mut(d).enumerate() {
        let base = pos * d;
        let xs = &xd[base..base + d];
        let ys = &yd[base..base + d];
        let gs = &gd[base..base + d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let g_mean = gs.iter().sum::<f64>() / d as f64;
        let gy_mean = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            chunk[j] = inv * (gs[j] - g_mean - ys[j] * gy_mean);
        }
    }
    dx
}

fn conv_vjp(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (t, c_in) = (x.shape()[0], x.shape()[1]);
    let (k, _, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let mut dx = Tensor::zeros(&[t, c_in]);
    let mut dw = Tensor::zeros(&[k, c_in, c_out]);
    for j in 0..k.min(t) {
        for tt in j..t {
            let grow = g.row(tt);
            let xrow = x.row(tt - j);
            // dx[t-j] += g[t] . w[j]^T ; dw[j] += x[t-j]^T (outer) g[t]
            for (ci, &xv) in xrow.iter().enumerate() {
                let mut acc = 0.0;
                for (co, &gv) in grow.iter().enumerate() {
                    acc += gv * w.get3(j, ci, co);
                }
                dx.set2(tt - j, ci, dx.get2(tt - j, ci) + acc);
                for (co, &gv) in grow.iter().enumerate() {
                    let cur = dw.get3(j, ci, co);
                    dw.set3(j, ci, co, cur + xv * gv);
                }
            }
        }
    }
    (dx, dw)
}

/// Central-difference gradient of a scalar function, one probe pair per
/// element: `(f(x + h e) - f(x - h e)) / 2h`.
pub fn finite_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst-case elementwise discrepancy between two gradients, scaled by
/// `max(1, |a|, |b|)` so it reads as a relative error for large entries
/// and an absolute one near zero.
pub fn max_scaled_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / 1.0f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    const FD_H: f64 = 1e-5;
    const TOL: f64 = 1e-7;

    /// Checks the analytic gradient of `build` with respect to a single
    /// parameter against central differences.
    fn fd_check(x0: &Tensor, build: impl Fn(&mut GradTape, Var) -> Var) -> f64 {
        let mut tape = GradTape::new();
        let p = tape.param("p", x0.clone()).unwrap();
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get("p").unwrap();

        let numeric = finite_diff(
            |x| {
                let mut t = GradTape::new();
                let p = t.param("p", x.clone()).unwrap();
                let l = build(&mut t, p);
                t.value(l).item()
            },
            x0,
            FD_H,
        );
        max_scaled_err(analytic, &numeric)
    }

    #[test]
    fn matmul_vjp_both_sides() {
        let mut rng = Rng::new(1);
        let a0 = rng.normal_tensor(&[3, 4]);
        let b0 = rng.normal_tensor(&[4, 2]);

        let b_for_lhs = b0.clone();
        let err = fd_check(&a0, move |t, p| {
            let b = t.input(b_for_lhs.clone());
            let m = t.matmul(p, b).unwrap();
            t.sum(m)
        });
        assert!(err < TOL, "lhs err {err}");

        let a_for_rhs = a0.clone();
        let err = fd_check(&b0, move |t, p| {
            let a = t.input(a_for_rhs.clone());
            let m = t.matmul(a, p).unwrap();
            t.sum(m)
        });
        assert!(err < TOL, "rhs err {err}");
    }

    #[test]
    fn matmul_vjp_hand_example() {
        // loss = sum(A . B); dA = ones . B^T, so dA[i][k] = sum_j B[k][j].
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut tape = GradTape::new();
        let pa = tape.param("a", a).unwrap();
        let ib = tape.input(b);
        let m = tape.matmul(pa, ib).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[7.0, 11.0]);
    }

    #[test]
    fn hadamard_and_silu_vjp() {
        let mut rng = Rng::new(2);
        let x0 = rng.normal_tensor(&[3, 3]);
        let other = rng.normal_tensor(&[3, 3]);
        let err = fd_check(&x0, move |t, p| {
            let o = t.input(other.clone());
            let h = t.hadamard(p, o).unwrap();
            let s = t.silu(h);
            t.sum(s)
        });
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn layernorm_vjp_matches_fd() {
        let mut rng = Rng::new(3);
        for eps in [0.0, 1e-5, 0.1] {
            let x0 = rng.normal_tensor(&[4, 6]);
            let err = fd_check(&x0, move |t, p| {
                let y = t.layernorm_feature(p, eps).unwrap();
                let s = t.silu(y);
                t.sum(s)
            });
            assert!(err < 1e-6, "eps={eps} err {err}");
        }
    }

    #[test]
    fn conv_vjp_all_three_operands() {
        let mut rng = Rng::new(4);
        let x0 = rng.normal_tensor(&[6, 3]);
        let w0 = rng.normal_tensor(&[3, 3, 2]);
        let b0 = rng.normal_tensor(&[2]);

        let (w_c, b_c) = (w0.clone(), b0.clone());
        let err = fd_check(&x0, move |t, p| {
            let w = t.input(w_c.clone());
            let b = t.input(b_c.clone());
            let y = t.causal_conv1d(p, w, b).unwrap();
            let s = t.silu(y);
            t.sum(s)
        });
        assert!(err < TOL, "x err {err}");

        let (x_c, b_c) = (x0.clone(), b0.clone());
        let err = fd_check(&w0, move |t, p| {
            let x = t.input(x_c.clone());
            let b = t.input(b_c.clone());
            let y = t.causal_conv1d(x, p, b).unwrap();
            let s = t.silu(y);
            t.sum(s)
        });
        assert!(err < TOL, "w err {err}");

        let (x_c, w_c) = (x0.clone(), w0.clone());
        let err = fd_check(&b0, move |t, p| {
            let x = t.input(x_c.clone());
            let w = t.input(w_c.clone());
            let y = t.causal_conv1d(x, w, p).unwrap();
            let s = t.silu(y);
            t.sum(s)
        });
        assert!(err < TOL, "b err {err}");
    }

    #[test]
    fn flip_slice_lastrow_concat_vjps() {
        let mut rng = Rng::new(5);
        let x0 = rng.normal_tensor(&[5, 4]);
        let err = fd_check(&x0, |t, p| {
            let f = t.flip_time(p).unwrap();
            let s = t.slice_cols(f, 1, 3).unwrap();
            let l = t.last_row(s).unwrap();
            let c = t.concat_rows(&[l, l]).unwrap();
            let sl = t.silu(c);
            t.sum(sl)
        });
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn mse_loss_vjp_and_value() {
        // loss = sum((pred - target)^2) / rows.
        let pred = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let target = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 8.0]]).unwrap();
        let mut tape = GradTape::new();
        let p = tape.param("p", pred).unwrap();
        let loss = tape.mse_loss(p, &target).unwrap();
        assert!((tape.value(loss).item() - (1.0 + 4.0 + 9.0 + 16.0) / 2.0).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        // d pred = 2 (pred - target) / 2.
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 2.0, 3.0, -4.0]);
    }

    #[test]
    fn mse_loss_vjp_matches_fd() {
        let mut rng = Rng::new(6);
        let x0 = rng.normal_tensor(&[4, 3]);
        let target = rng.normal_tensor(&[4, 3]);
        let err = fd_check(&x0, move |t, p| {
            let s = t.silu(p);
            t.mse_loss(s, &target).unwrap()
        });
        assert!(err < TOL, "err {err}");
    }

    #[test]
    fn mask_and_bias_vjps() {
        let mut rng = Rng::new(7);
        let x0 = rng.normal_tensor(&[4, 3]);
        let mask = {
            let mut m = Tensor::zeros(&[4, 3]);
            for v in m.data_mut() {
                *v = if rng.bernoulli(0.5) { 2.0 } else { 0.0 };
            }
            m
        };
        let bias0 = rng.normal_tensor(&[3]);

        let (mask_c, bias_c) = (mask.clone(), bias0.clone());
        let err = fd_check(&x0, move |t, p| {
            let b = t.input(bias_c.clone());
            let xb = t.add_row_bias(p, b).unwrap();
            let m = t.mul_const(xb, &mask_c).unwrap();
            let s = t.scale(m, 0.5);
            t.sum(s)
        });
        assert!(err < TOL, "x err {err}");

        let (mask_c, x_c) = (mask, x0);
        let err = fd_check(&bias0, move |t, p| {
            let x = t.input(x_c.clone());
            let xb = t.add_row_bias(x, p).unwrap();
            let m = t.mul_const(xb, &mask_c).unwrap();
            let s = t.silu(m);
            t.sum(s)
        });
        assert!(err < TOL, "bias err {err}");
    }

    #[test]
    fn shared_param_accumulates_across_uses() {
        // Two "windows" sharing one weight: the gradient must be the
        // sum of the per-window gradients.
        let mut rng = Rng::new(8);
        let w0 = rng.normal_tensor(&[3, 2]);
        let x1 = rng.normal_tensor(&[2, 3]);
        let x2 = rng.normal_tensor(&[2, 3]);

        let grad_for = |xs: &[&Tensor]| -> Tensor {
            let mut tape = GradTape::new();
            let w = tape.param("w", w0.clone()).unwrap();
            let mut losses = Vec::new();
            for x in xs {
                let xi = tape.input((*x).clone());
                let m = tape.matmul(xi, w).unwrap();
                let s = tape.silu(m);
                losses.push(tape.sum(s));
            }
            let total = match losses.len() {
                1 => losses[0],
                _ => {
                    let mut acc = losses[0];
                    for l in &losses[1..] {
                        acc = tape.add(acc, *l).unwrap();
                    }
                    acc
                }
            };
            tape.backward(total).unwrap().get("w").unwrap().clone()
        };

        let g1 = grad_for(&[&x1]);
        let g2 = grad_for(&[&x2]);
        let g_both = grad_for(&[&x1, &x2]);
        for i in 0..g_both.len() {
            let want = g1.data()[i] + g2.data()[i];
            assert!((g_both.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn untouched_param_gets_zero_gradient() {
        let mut tape = GradTape::new();
        let a = tape.param("used", Tensor::scalar(2.0)).unwrap();
        tape.param("unused", Tensor::zeros(&[2, 2])).unwrap();
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 4]);
        assert_eq!(grads.get("used").unwrap().data(), &[1.0]);
    }

    #[test]
    fn unknown_gradient_name_is_an_error() {
        let mut tape = GradTape::new();
        let a = tape.param("w", Tensor::scalar(1.0)).unwrap();
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert!(matches!(
            grads.get("v"),
            Err(TapeError::MissingParam { .. })
        ));
    }

    #[test]
    fn duplicate_param_name_is_an_error() {
        let mut tape = GradTape::new();
        tape.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.param("w", Tensor::scalar(2.0)),
            Err(TapeError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = GradTape::new();
        let a = tape.param("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            tape.backward(a),
            Err(TapeError::NotScalar { elements: 4 })
        ));
    }

    #[test]
    fn finite_diff_recovers_quadratic_gradient() {
        // f(x) = sum(x^2) has exact gradient 2x; central differences on
        // a quadratic are exact up to rounding.
        let mut rng = Rng::new(9);
        let x = rng.normal_tensor(&[3, 3]);
        let g = finite_diff(|t| t.square_sum(), &x, 1e-4);
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-9);
        }
    }

    #[test]
    fn deep_chain_gradcheck() {
        // A miniature of the real forward pass: affine, conv, silu,
        // layernorm, slice, last row, affine head, mse.
        let mut rng = Rng::new(10);
        let w0 = rng.uniform_tensor(&[3, 8], -0.5, 0.5);
        let x_in = rng.normal_tensor(&[5, 3]);
        let wc = rng.uniform_tensor(&[2, 8, 8], -0.3, 0.3);
        let bc = rng.uniform_tensor(&[8], -0.1, 0.1);
        let wh = rng.uniform_tensor(&[4, 2], -0.5, 0.5);
        let target = rng.normal_tensor(&[1, 2]);

        let err = fd_check(&w0, move |t, p| {
            let x = t.input(x_in.clone());
            let wcv = t.input(wc.clone());
            let bcv = t.input(bc.clone());
            let whv = t.input(wh.clone());
            let h = t.matmul(x, p).unwrap();
            let c = t.causal_conv1d(h, wcv, bcv).unwrap();
            let s = t.silu(c);
            let n = t.layernorm_feature(s, 1e-5).unwrap();
            let sl = t.slice_cols(n, 0, 4).unwrap();
            let lr = t.last_row(sl).unwrap();
            let y = t.matmul(lr, whv).unwrap();
            t.mse_loss(y, &target).unwrap()
        });
        assert!(err < 1e-6, "err {err}");
    }
}
