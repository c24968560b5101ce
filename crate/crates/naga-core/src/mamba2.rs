//! Gated convolutional sequence block.
//!
//! The stage is: affine projection to width `2*d_inner + 2*d_state +
//! h_head`, a three-way feature split into `(z, x_bc, dt)`, a causal
//! conv plus SiLU on the `x_bc` view, feature layernorm, and finally
//! the first `d_inner/2` channels as output.
//!
//! The `z` and `dt` views are computed and then deliberately never
//! consumed: the block's defining equations stop there, and the
//! unused-branch test below pins that behavior so it cannot silently
//! drift into a gated or recurrent variant.

use thiserror::Error;

use crate::rng::Rng;
use crate::tape::{GradTape, TapeError, Var};
use crate::tensor::{self, ShapeError, Tensor};

#[derive(Debug, Clone, Error)]
pub enum Mamba2Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid block parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mamba2Dims {
    pub d_inner: usize,
    pub d_state: usize,
    pub h_head: usize,
    pub k: usize,
}

impl Mamba2Dims {
    /// Width of the input projection: `2*d_inner + 2*d_state + h_head`.
    pub fn proj_width(&self) -> usize {
        2 * self.d_inner + 2 * self.d_state + self.h_head
    }

    /// Output channels after the half slice.
    pub fn out_width(&self) -> usize {
        self.d_inner / 2
    }
}

#[derive(Debug, Clone)]
pub struct Mamba2Params {
    /// `d_input * proj_width`.
    pub w_in: Tensor,
    pub b_in: Tensor,
    /// Conv kernel `k * d_inner * d_inner`; tap 0 is the current step.
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub eps: f64,
    pub dims: Mamba2Dims,
}

impl Mamba2Params {
    /// Uniform init in +-1/sqrt(fan_in) with zero biases.
    pub fn init(d_input: usize, dims: Mamba2Dims, eps: f64, rng: &mut Rng) -> Mamba2Params {
        let w = dims.proj_width();
        let in_bound = 1.0 / (d_input as f64).sqrt();
        let conv_fan_in = dims.k * dims.d_inner;
        let c_bound = 1.0 / (conv_fan_in as f64).sqrt();
        Mamba2Params {
            w_in: rng.uniform_tensor(&[d_input, w], -in_bound, in_bound),
            b_in: Tensor::zeros(&[w]),
            w_c: rng.uniform_tensor(&[dims.k, dims.d_inner, dims.d_inner], -c_bound, c_bound),
            b_c: Tensor::zeros(&[dims.d_inner]),
            eps,
            dims,
        }
    }

    pub fn d_input(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn validate(&self) -> Result<(), Mamba2Error> {
        let d = self.dims;
        if d.d_inner == 0 || !d.d_inner.is_multiple_of(2) {
            return Err(Mamba2Error::Invalid(format!(
                "d_inner must be positive and even, got {}",
                d.d_inner
            )));
        }
        if d.k == 0 {
            return Err(Mamba2Error::Invalid("conv width k must be >= 1".into()));
        }
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(Mamba2Error::Invalid(format!(
                "eps must be a positive real, got {}",
                self.eps
            )));
        }
        let w = d.proj_width();
        if self.w_in.rank() != 2 || self.w_in.shape()[1] != w {
            return Err(Mamba2Error::Invalid(format!(
                "W_in {:?} must have projection width {w}",
                self.w_in.shape()
            )));
        }
        if self.b_in.shape() != [w] {
            return Err(Mamba2Error::Invalid(format!(
                "b_in {:?} must have length {w}",
                self.b_in.shape()
            )));
        }
        if self.w_c.shape() != [d.k, d.d_inner, d.d_inner] {
            return Err(Mamba2Error::Invalid(format!(
                "W_c {:?} must be k*d_inner*d_inner = {:?}",
                self.w_c.shape(),
                [d.k, d.d_inner, d.d_inner]
            )));
        }
        if self.b_c.shape() != [d.d_inner] {
            return Err(Mamba2Error::Invalid(format!(
                "b_c {:?} must have length {}",
                self.b_c.shape(),
                d.d_inner
            )));
        }
        Ok(())
    }
}

/// The three contiguous feature views of the projected sequence, in
/// order: gate `z`, conv branch `x_bc`, and step widths `dt`.
#[derive(Debug, Clone)]
pub struct SplitViews {
    pub z: Tensor,
    pub x_bc: Tensor,
    pub dt: Tensor,
}

/// Row-wise affine projection `H W_in + b_in`.
pub fn project_in(h: &Tensor, params: &Mamba2Params) -> Result<Tensor, Mamba2Error> {
    params.validate()?;
    let z = tensor::matmul(h, &params.w_in)?;
    Ok(tensor::add_row_bias(&z, &params.b_in)?)
}

/// Partition along features into widths `(d_inner, d_inner, 2*d_state + h_head)`.
pub fn split3(z: &Tensor, dims: Mamba2Dims) -> Result<SplitViews, ShapeError> {
    if z.rank() != 2 || z.shape()[1] != dims.proj_width() {
        return Err(ShapeError::Mismatch {
            op: "split3",
            lhs: z.shape().to_vec(),
            rhs: vec![dims.proj_width()],
        });
    }
    let d = dims.d_inner;
    Ok(SplitViews {
        z: tensor::slice_cols(z, 0, d)?,
        x_bc: tensor::slice_cols(z, d, 2 * d)?,
        dt: tensor::slice_cols(z, 2 * d, dims.proj_width())?,
    })
}

/// Full block: project, split, conv+SiLU on `x_bc`, feature layernorm,
/// first `d_inner/2` channels. The `z`/`dt` views stop at the split.
pub fn mamba2_forward(h: &Tensor, params: &Mamba2Params) -> Result<Tensor, Mamba2Error> {
    let z = project_in(h, params)?;
    let views = split3(&z, params.dims)?;
    let conv = tensor::causal_conv1d(&views.x_bc, &params.w_c, &params.b_c)?;
    let activated = tensor::silu(&conv);
    let y_hidden = tensor::layernorm_feature(&activated, params.eps)?;
    Ok(tensor::slice_cols(&y_hidden, 0, params.dims.out_width())?)
}

/// Final time step of the block output, as a length-c vector.
pub fn last_step(h: &Tensor) -> Result<Tensor, ShapeError> {
    if h.rank() != 2 || h.shape()[0] == 0 {
        return Err(ShapeError::Invalid {
            op: "last_step",
            shape: h.shape().to_vec(),
            reason: "need a rank-2 tensor with at least one row".into(),
        });
    }
    Tensor::from_vec(&[h.shape()[1]], h.row(h.shape()[0] - 1).to_vec())
}

/// Tape handles for one block's parameters.
pub struct Mamba2Vars {
    pub w_in: Var,
    pub b_in: Var,
    pub w_c: Var,
    pub b_c: Var,
}

impl Mamba2Vars {
    pub fn register(
        tape: &mut GradTape,
        prefix: &str,
        params: &Mamba2Params,
    ) -> Result<Mamba2Vars, TapeError> {
        Ok(Mamba2Vars {
            w_in: tape.param(&format!("{prefix}.w_in"), params.w_in.clone())?,
            b_in: tape.param(&format!("{prefix}.b_in"), params.b_in.clone())?,
            w_c: tape.param(&format!("{prefix}.w_c"), params.w_c.clone())?,
            b_c: tape.param(&format!("{prefix}.b_c"), params.b_c.clone())?,
        })
    }
}

/// [`mamba2_forward`] recorded on a tape. The unused views are recorded
/// too, mirroring the plain version; they contribute nothing to any
/// downstream gradient.
pub fn mamba2_forward_on_tape(
    tape: &mut GradTape,
    h: Var,
    vars: &Mamba2Vars,
    dims: Mamba2Dims,
    eps: f64,
) -> Result<Var, TapeError> {
    let proj = tape.matmul(h, vars.w_in)?;
    let z = tape.add_row_bias(proj, vars.b_in)?;
    let d = dims.d_inner;
    let _gate = tape.slice_cols(z, 0, d)?;
    let x_bc = tape.slice_cols(z, d, 2 * d)?;
    let _dt = tape.slice_cols(z, 2 * d, dims.proj_width())?;
    let conv = tape.causal_conv1d(x_bc, vars.w_c, vars.b_c)?;
    let activated = tape.silu(conv);
    let y_hidden = tape.layernorm_feature(activated, eps)?;
    tape.slice_cols(y_hidden, 0, dims.out_width())
}
