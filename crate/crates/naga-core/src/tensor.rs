//! Dense row-major f64 tensors of rank 1 to 3, plus the op set the
//! forward pass is assembled from.
//!
//! Every binary op validates shapes and reports both operands on
//! mismatch; nothing here panics on bad user input. All arithmetic is
//! f64 with a fixed accumulation order, so results are reproducible
//! bit-for-bit across runs and platforms.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("{op}: dimension mismatch between lhs {lhs:?} and rhs {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    Invalid {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
}

/// Dense tensor. `data` is row-major: for shape `[a, b, c]` the element
/// `(i, j, k)` lives at `(i * b + j) * c + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(
            !shape.is_empty() && shape.len() <= 3,
            "tensor rank must be 1..=3, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, ShapeError> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(ShapeError::Invalid {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: "rank must be 1..=3".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(ShapeError::Invalid {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape wants {n} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor, ShapeError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(ShapeError::Invalid {
                    op: "from_rows",
                    shape: vec![r, c],
                    reason: format!("ragged row of length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(&[r, c], data)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn get3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k] = v;
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Single scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn square_sum(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), ShapeError> {
    if a.shape != b.shape {
        return Err(ShapeError::Mismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn want_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), ShapeError> {
    if t.rank() != rank {
        return Err(ShapeError::Rank {
            op,
            expected: rank,
            shape: t.shape.clone(),
        });
    }
    Ok(())
}

/// `A (m*k) . B (k*n) -> m*n`.
///
/// The inner loop accumulates over k in ascending order for every output
/// element; the reverse pass and the test oracles rely on that order for
/// bitwise agreement.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    want_rank("matmul", a, 2)?;
    want_rank("matmul", b, 2)?;
    if a.shape[1] != b.shape[0] {
        return Err(ShapeError::Mismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, n) = (a.shape[0], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    matmul_acc(&mut out, a, b);
    Ok(out)
}

/// `out += A . B` without reallocating. Shapes must already agree.
pub(crate) fn matmul_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    debug_assert_eq!(b.shape[0], k);
    debug_assert_eq!(out.shape, vec![m, n]);
    for i in 0..m {
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// Transpose of a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor, ShapeError> {
    want_rank("transpose", a, 2)?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(out)
}

/// Elementwise product of same-shape tensors.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    same_shape("hadamard", a, b)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x * y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Elementwise sum of same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    same_shape("add", a, b)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x + y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Elementwise difference of same-shape tensors.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    same_shape("sub", a, b)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x - y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

/// `X (t*d) + bias (d)` broadcast over rows.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor, ShapeError> {
    want_rank("add_row_bias", x, 2)?;
    want_rank("add_row_bias", bias, 1)?;
    if x.shape[1] != bias.shape[0] {
        return Err(ShapeError::Mismatch {
            op: "add_row_bias",
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut out = x.clone();
    let d = bias.shape[0];
    for r in 0..x.shape[0] {
        let row = &mut out.data[r * d..(r + 1) * d];
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(out)
}

/// Column sums of a rank-2 tensor, as a rank-1 tensor. Adjoint of
/// broadcasting a bias over rows.
pub fn col_sum(x: &Tensor) -> Result<Tensor, ShapeError> {
    want_rank("col_sum", x, 2)?;
    let (m, n) = (x.shape[0], x.shape[1]);
    let mut out = Tensor::zeros(&[n]);
    for i in 0..m {
        for j in 0..n {
            out.data[j] += x.data[i * n + j];
        }
    }
    Ok(out)
}

/// Reverses a `t*d` tensor along the time axis: output row `i` is input
/// row `t - 1 - i`, so position t pairs with position T-t+1 in
/// one-based indexing.
pub fn flip_time(x: &Tensor) -> Result<Tensor, ShapeError> {
    want_rank("flip_time", x, 2)?;
    let (t, d) = (x.shape[0], x.shape[1]);
    let mut out = Tensor::zeros(&[t, d]);
    for i in 0..t {
        out.data[i * d..(i + 1) * d].copy_from_slice(x.row(t - 1 - i));
    }
    Ok(out)
}

pub fn silu_scalar(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise `x * sigmoid(x)`, any rank.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Derivative of silu: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
pub fn silu_grad_scalar(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

/// Normalizes each position of the last axis to zero mean and unit
/// variance over the feature dimension, using the population (1/d)
/// variance: `(x - mean) / sqrt(var + eps)`.
pub fn layernorm_feature(x: &Tensor, eps: f64) -> Result<Tensor, ShapeError> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(ShapeError::Invalid {
            op: "layernorm_feature",
            shape: x.shape.clone(),
            reason: format!("eps must be finite and >= 0, got {eps}"),
        });
    }
    let d = *x.shape.last().unwrap();
    if d == 0 {
        return Err(ShapeError::Invalid {
            op: "layernorm_feature",
            shape: x.shape.clone(),
            reason: "empty feature axis".into(),
        });
    }
    let mut out = x.clone();
    for chunk in out.data.chunks_mut(d) {
        let mean = chunk.iter().sum::<f64>() / d as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in chunk.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(out)
}

/// Causal 1-D convolution over time.
///
/// `x` is `t*c_in`, `w` is `k*c_in*c_out` (tap 0 reads the current step,
/// tap j reads j steps into the past), `b` is `c_out`. The sequence is
/// implicitly left-padded with `k - 1` zero rows, so
/// `y[t] = b + sum_j x[t-j] . w[j]` with out-of-range terms dropped and
/// output position t never reading positions after t.
pub fn causal_conv1d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    want_rank("causal_conv1d", x, 2)?;
    want_rank("causal_conv1d", w, 3)?;
    want_rank("causal_conv1d", b, 1)?;
    let (t, c_in) = (x.shape[0], x.shape[1]);
    let (k, w_in, c_out) = (w.shape[0], w.shape[1], w.shape[2]);
    if w_in != c_in {
        return Err(ShapeError::Mismatch {
            op: "causal_conv1d",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    if b.shape[0] != c_out {
        return Err(ShapeError::Mismatch {
            op: "causal_conv1d",
            lhs: w.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    if k == 0 {
        return Err(ShapeError::Invalid {
            op: "causal_conv1d",
            shape: w.shape.clone(),
            reason: "kernel width must be >= 1".into(),
        });
    }
    // Bias first, then taps in ascending order; each tap is a shifted
    // matmul accumulation. Per output element the add order is fixed,
    // which the reference oracle in the tests reproduces exactly.
    let mut out = Tensor::zeros(&[t, c_out]);
    for r in 0..t {
        out.data[r * c_out..(r + 1) * c_out].copy_from_slice(b.data());
    }
    for j in 0..k {
        if j >= t {
            break;
        }
        let tap = Tensor {
            shape: vec![c_in, c_out],
            data: w.data[j * c_in * c_out..(j + 1) * c_in * c_out].to_vec(),
        };
        for tt in j..t {
            let xrow = x.row(tt - j);
            let orow = &mut out.data[tt * c_out..(tt + 1) * c_out];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &tap.data[ci * c_out..(ci + 1) * c_out];
                for (o, w) in orow.iter_mut().zip(wrow) {
                    *o += xv * w;
                }
            }
        }
    }
    Ok(out)
}

/// Copies columns `start..end` of a rank-2 tensor.
pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor, ShapeError> {
    want_rank("slice_cols", x, 2)?;
    let (t, d) = (x.shape[0], x.shape[1]);
    if start >= end || end > d {
        return Err(ShapeError::Invalid {
            op: "slice_cols",
            shape: x.shape.clone(),
            reason: format!("column range {start}..{end} out of bounds"),
        });
    }
    let w = end - start;
    let mut out = Tensor::zeros(&[t, w]);
    for r in 0..t {
        out.data[r * w..(r + 1) * w].copy_from_slice(&x.row(r)[start..end]);
    }
    Ok(out)
}
