//! Bilinear time-mirrored encoder.
//!
//! Each hidden channel multiplies an affine feature of the input at
//! time t with an affine feature of the input at the mirrored time
//! T-t+1:
//!
//! ```text
//! H = (X W1 + b1) . (flip_time(X) W2 + b2) . D
//! ```
//!
//! where `.` is elementwise and D is a dropout mask. The closed-form
//! parameter gradients ([`lemma2_grad_w1`], [`lemma2_grad_w2`]) and
//! the diagonal special case ([`diag_vedic`]) are exposed separately so
//! they can be cross-checked against autodiff and against each other.

use thiserror::Error;

use crate::rng::Rng;
use crate::tape::{GradTape, TapeError, Var};
use crate::tensor::{self, ShapeError, Tensor};

#[derive(Debug, Clone, Error)]
pub enum VedicError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid vedic parameters: {0}")]
    Invalid(String),
    #[error("closed-form gradient requires zero biases, got |b1|={b1_norm:.3e} |b2|={b2_norm:.3e}")]
    NonzeroBias { b1_norm: f64, b2_norm: f64 },
}

#[derive(Debug, Clone)]
pub struct VedicParams {
    /// `d_in * d_hidden`, applied to the sequence as-is.
    pub w1: Tensor,
    /// `d_in * d_hidden`, applied to the time-reversed sequence.
    pub w2: Tensor,
    pub b1: Tensor,
    pub b2: Tensor,
    /// Dropout probability in [0, 1).
    pub p: f64,
}

impl VedicParams {
    /// Uniform init in +-1/sqrt(d_in) with zero biases.
    pub fn init(d_in: usize, d_hidden: usize, p: f64, rng: &mut Rng) -> VedicParams {
        let bound = 1.0 / (d_in as f64).sqrt();
        VedicParams {
            w1: rng.uniform_tensor(&[d_in, d_hidden], -bound, bound),
            w2: rng.uniform_tensor(&[d_in, d_hidden], -bound, bound),
            b1: Tensor::zeros(&[d_hidden]),
            b2: Tensor::zeros(&[d_hidden]),
            p,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn validate(&self) -> Result<(), VedicError> {
        if self.w1.rank() != 2 || self.w1.shape() != self.w2.shape() {
            return Err(VedicError::Invalid(format!(
                "W1 {:?} and W2 {:?} must be matching matrices",
                self.w1.shape(),
                self.w2.shape()
            )));
        }
        let d_hidden = self.w1.shape()[1];
        if self.b1.shape() != [d_hidden] || self.b2.shape() != [d_hidden] {
            return Err(VedicError::Invalid(format!(
                "biases {:?}/{:?} must have length {d_hidden}",
                self.b1.shape(),
                self.b2.shape()
            )));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(VedicError::Invalid(format!(
                "dropout probability must be in [0,1), got {}",
                self.p
            )));
        }
        Ok(())
    }

    /// The closed-form gradients below assume both biases vanish.
    pub fn require_zero_bias(&self) -> Result<(), VedicError> {
        let b1_norm = self.b1.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let b2_norm = self.b2.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        if b1_norm != 0.0 || b2_norm != 0.0 {
            return Err(VedicError::NonzeroBias { b1_norm, b2_norm });
        }
        Ok(())
    }
}

/// Inverted-scaling dropout mask: kept entries carry 1/(1-p) so the
/// expected masked output equals the unmasked one. The raw {0,1}
/// pattern is kept alongside for checks that want the literal mask.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub scaled: Tensor,
    pub raw: Tensor,
    pub p: f64,
}

impl DropoutMask {
    /// Draws each entry independently: kept with probability 1-p.
    pub fn sample(t: usize, d_hidden: usize, p: f64, rng: &mut Rng) -> DropoutMask {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0,1)");
        let keep_scale = 1.0 / (1.0 - p);
        let mut raw = Tensor::zeros(&[t, d_hidden]);
        let mut scaled = Tensor::zeros(&[t, d_hidden]);
        for i in 0..raw.len() {
            if !rng.bernoulli(p) {
                raw.data_mut()[i] = 1.0;
                scaled.data_mut()[i] = keep_scale;
            }
        }
        DropoutMask { scaled, raw, p }
    }

    /// The evaluation-time mask: all ones, no scaling.
    pub fn ones(t: usize, d_hidden: usize) -> DropoutMask {
        DropoutMask {
            scaled: Tensor::filled(&[t, d_hidden], 1.0),
            raw: Tensor::filled(&[t, d_hidden], 1.0),
            p: 0.0,
        }
    }
}

fn check_encode_shapes(
    x: &Tensor,
    params: &VedicParams,
    mask: &DropoutMask,
) -> Result<(), VedicError> {
    params.validate()?;
    if x.rank() != 2 || x.shape()[1] != params.d_in() {
        return Err(ShapeError::Mismatch {
            op: "vedic_encode",
            lhs: x.shape().to_vec(),
            rhs: params.w1.shape().to_vec(),
        }
        .into());
    }
    let want = [x.shape()[0], params.d_hidden()];
    if mask.scaled.shape() != want {
        return Err(ShapeError::Mismatch {
            op: "vedic_encode",
            lhs: want.to_vec(),
            rhs: mask.scaled.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `(X W1 + b1) . (flip_time(X) W2 + b2) . mask`, the flip dropped when
/// `use_flip` is off.
pub fn vedic_encode(
    x: &Tensor,
    params: &VedicParams,
    mask: &DropoutMask,
    use_flip: bool,
) -> Result<Tensor, VedicError> {
    check_encode_shapes(x, params, mask)?;
    let x1 = tensor::add_row_bias(&tensor::matmul(x, &params.w1)?, &params.b1)?;
    let x2_src = if use_flip { tensor::flip_time(x)? } else { x.clone() };
    let x2 = tensor::add_row_bias(&tensor::matmul(&x2_src, &params.w2)?, &params.b2)?;
    let prod = tensor::hadamard(&x1, &x2)?;
    Ok(tensor::hadamard(&prod, &mask.scaled)?)
}

/// Tape handles for one encoder's parameters.
pub struct VedicVars {
    pub w1: Var,
    pub w2: Var,
    pub b1: Var,
    pub b2: Var,
}

impl VedicVars {
    pub fn register(
        tape: &mut GradTape,
        prefix: &str,
        params: &VedicParams,
    ) -> Result<VedicVars, TapeError> {
        Ok(VedicVars {
            w1: tape.param(&format!("{prefix}.w1"), params.w1.clone())?,
            w2: tape.param(&format!("{prefix}.w2"), params.w2.clone())?,
            b1: tape.param(&format!("{prefix}.b1"), params.b1.clone())?,
            b2: tape.param(&format!("{prefix}.b2"), params.b2.clone())?,
        })
    }
}

/// Same computation as [`vedic_encode`] recorded on a tape. The mask is
/// a constant from the gradient's point of view.
pub fn vedic_encode_on_tape(
    tape: &mut GradTape,
    x: Var,
    vars: &VedicVars,
    mask: &DropoutMask,
    use_flip: bool,
) -> Result<Var, TapeError> {
    let m1 = tape.matmul(x, vars.w1)?;
    let x1 = tape.add_row_bias(m1, vars.b1)?;
    let x2_src = if use_flip { tape.flip_time(x)? } else { x };
    let m2 = tape.matmul(x2_src, vars.w2)?;
    let x2 = tape.add_row_bias(m2, vars.b2)?;
    let prod = tape.hadamard(x1, x2)?;
    tape.mul_const(prod, &mask.scaled)
}

fn check_lemma2_shapes(
    x: &Tensor,
    params: &VedicParams,
    mask: &DropoutMask,
    delta: &Tensor,
) -> Result<(), VedicError> {
    check_encode_shapes(x, params, mask)?;
    params.require_zero_bias()?;
    if delta.shape() != mask.scaled.shape() {
        return Err(ShapeError::Mismatch {
            op: "lemma2_grad",
            lhs: delta.shape().to_vec(),
            rhs: mask.scaled.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Closed-form `dL/dW1` for the zero-bias encoder with the flip on:
/// entry (a,i) is `sum_t delta[t,i] D[t,i] (sum_b W2[b,i] x[T-t+1,b]) x[t,a]`.
///
/// `delta` is the backpropagated error at the encoder output and D is
/// the effective (scaled) mask.
pub fn lemma2_grad_w1(
    x: &Tensor,
    params: &VedicParams,
    mask: &DropoutMask,
    delta: &Tensor,
) -> Result<Tensor, VedicError> {
    check_lemma2_shapes(x, params, mask, delta)?;
    let x2v = tensor::matmul(&tensor::flip_time(x)?, &params.w2)?;
    let g = tensor::hadamard(&tensor::hadamard(delta, &mask.scaled)?, &x2v)?;
    Ok(tensor::matmul(&tensor::transpose(x)?, &g)?)
}

/// Mirror of [`lemma2_grad_w1`] with the roles of the two branches
/// swapped: the readout factor comes from `X W1` and the outer product
/// uses the time-reversed inputs.
pub fn lemma2_grad_w2(
    x: &Tensor,
    params: &VedicParams,
    mask: &DropoutMask,
    delta: &Tensor,
) -> Result<Tensor, VedicError> {
    check_lemma2_shapes(x, params, mask, delta)?;
    let x1v = tensor::matmul(x, &params.w1)?;
    let g = tensor::hadamard(&tensor::hadamard(delta, &mask.scaled)?, &x1v)?;
    Ok(tensor::matmul(&tensor::transpose(&tensor::flip_time(x)?)?, &g)?)
}

/// Diagonal special case on a single step: `H_i = (x_i w_i)(y_{d-i+1} v_i)`
/// with one-based indexing, i.e. channel i multiplies feature i of `x`
/// with the mirrored feature of `y`.
pub fn diag_vedic(
    x: &Tensor,
    y: &Tensor,
    w_diag: &Tensor,
    v_diag: &Tensor,
) -> Result<Tensor, ShapeError> {
    for t in [x, y, w_diag, v_diag] {
        if t.rank() != 1 || t.shape() != x.shape() {
            return Err(ShapeError::Mismatch {
                op: "diag_vedic",
                lhs: x.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let d = x.shape()[0];
    let mut out = Tensor::zeros(&[d]);
    for i in 0..d {
        out.data_mut()[i] = x.data()[i] * w_diag.data()[i] * y.data()[d - 1 - i] * v_diag.data()[i];
    }
    Ok(out)
}
