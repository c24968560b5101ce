//! Full forecasting model: stacked cells of (encoder, sequence block)
//! with a linear head on the last time step.
//!
//! A cell encodes its input (bilinear time-mirrored, plain affine, or
//! identity) and runs the block from [`crate::mamba2`]. Cells after the
//! first consume the previous cell's output re-projected to the input
//! width through a learned bridge. The head maps the final cell's last
//! time step to `pred_len` values.

use thiserror::Error;

use crate::mamba2::{self, Mamba2Dims, Mamba2Params, Mamba2Vars};
use crate::rng::Rng;
use crate::tape::{GradTape, TapeError, Var};
use crate::tensor::{self, ShapeError, Tensor};
use crate::vedic::{self, DropoutMask, VedicError, VedicParams, VedicVars};

#[derive(Debug, Clone, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Vedic(#[from] VedicError),
    #[error(transparent)]
    Mamba(#[from] mamba2::Mamba2Error),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {context}")]
    NonFiniteInput { context: &'static str },
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
}

/// What the per-cell encoder computes from the cell input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Bilinear time-mirrored features (the full architecture).
    Vedic,
    /// A single learned affine map to `d_hidden`; the comparison class
    /// for the capacity-separation analysis.
    Affine,
    /// Pass-through; the "encoder removed" ablation.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub h_head: usize,
    pub k: usize,
    pub pred_len: usize,
    pub num_cells: usize,
    pub encoder: EncoderKind,
    pub use_flip: bool,
    /// Probability of zeroing each input entry during training.
    pub mask_prob: f64,
    /// Dropout probability inside the bilinear encoder.
    pub dropout_p: f64,
    /// Layernorm variance stabilizer.
    pub eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults; only the data-dependent sizes are required.
    pub fn new(d_in: usize, pred_len: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            d_hidden: 64,
            d_inner: 128,
            d_state: 16,
            h_head: 8,
            k: 4,
            pred_len,
            num_cells: 2,
            encoder: EncoderKind::Vedic,
            use_flip: true,
            mask_prob: 0.0,
            dropout_p: 0.0,
            eps: 1e-5,
        }
    }

    pub fn use_vedic(&self) -> bool {
        self.encoder == EncoderKind::Vedic
    }

    /// The ablation toggle: off replaces the encoder with identity.
    pub fn with_use_vedic(mut self, on: bool) -> ModelConfig {
        self.encoder = if on {
            EncoderKind::Vedic
        } else {
            EncoderKind::Identity
        };
        self
    }

    pub fn dims(&self) -> Mamba2Dims {
        Mamba2Dims {
            d_inner: self.d_inner,
            d_state: self.d_state,
            h_head: self.h_head,
            k: self.k,
        }
    }

    /// Feature width entering each cell's sequence block.
    pub fn block_input_width(&self) -> usize {
        match self.encoder {
            EncoderKind::Vedic | EncoderKind::Affine => self.d_hidden,
            EncoderKind::Identity => self.d_in,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("d_in", self.d_in),
            ("d_hidden", self.d_hidden),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("h_head", self.h_head),
            ("k", self.k),
            ("pred_len", self.pred_len),
            ("num_cells", self.num_cells),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.d_inner.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig(format!(
                "d_inner must be even, got {}",
                self.d_inner
            )));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(ModelError::InvalidConfig(format!(
                "mask_prob must be in [0,1), got {}",
                self.mask_prob
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(ModelError::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum EncoderParams {
    Vedic(VedicParams),
    Affine { w: Tensor, b: Tensor },
    Identity,
}

#[derive(Debug, Clone)]
pub struct BridgeParams {
    /// `(d_inner/2) * d_in`.
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    /// `(d_inner/2) * pred_len`.
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct CellParams {
    pub encoder: EncoderParams,
    pub block: Mamba2Params,
    /// Present on every cell except the last.
    pub bridge: Option<BridgeParams>,
}

#[derive(Debug, Clone)]
pub struct NagaModel {
    pub config: ModelConfig,
    pub cells: Vec<CellParams>,
    pub head: HeadParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stochastic state for one window's forward pass. `input` zeroes raw
/// input entries; `dropout[i]` is cell i's encoder mask (vedic cells
/// only).
#[derive(Debug, Clone)]
pub struct WindowMasks {
    pub input: Option<Tensor>,
    pub dropout: Vec<Option<DropoutMask>>,
}

impl NagaModel {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<NagaModel, ModelError> {
        config.validate()?;
        let mut cells = Vec::with_capacity(config.num_cells);
        for i in 0..config.num_cells {
            let encoder = match config.encoder {
                EncoderKind::Vedic => EncoderParams::Vedic(VedicParams::init(
                    config.d_in,
                    config.d_hidden,
                    config.dropout_p,
                    rng,
                )),
                EncoderKind::Affine => {
                    let bound = 1.0 / (config.d_in as f64).sqrt();
                    EncoderParams::Affine {
                        w: rng.uniform_tensor(&[config.d_in, config.d_hidden], -bound, bound),
                        b: Tensor::zeros(&[config.d_hidden]),
                    }
                }
                EncoderKind::Identity => EncoderParams::Identity,
            };
            let block = Mamba2Params::init(config.block_input_width(), config.dims(), config.eps, rng);
            let bridge = if i + 1 < config.num_cells {
                let half = config.d_inner / 2;
                let bound = 1.0 / (half as f64).sqrt();
                Some(BridgeParams {
                    w: rng.uniform_tensor(&[half, config.d_in], -bound, bound),
                    b: Tensor::zeros(&[config.d_in]),
                })
            } else {
                None
            };
            cells.push(CellParams {
                encoder,
                block,
                bridge,
            });
        }
        let half = config.d_inner / 2;
        let bound = 1.0 / (half as f64).sqrt();
        let head = HeadParams {
            w: rng.uniform_tensor(&[half, config.pred_len], -bound, bound),
            b: Tensor::zeros(&[config.pred_len]),
        };
        Ok(NagaModel {
            config,
            cells,
            head,
        })
    }

    /// Visits every parameter as (name, tensor) in the canonical order:
    /// cells ascending (encoder, block, bridge), then the head.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, cell) in self.cells.iter().enumerate() {
            match &cell.encoder {
                EncoderParams::Vedic(v) => {
                    f(&format!("cell{i}.vedic.w1"), &v.w1);
                    f(&format!("cell{i}.vedic.w2"), &v.w2);
                    f(&format!("cell{i}.vedic.b1"), &v.b1);
                    f(&format!("cell{i}.vedic.b2"), &v.b2);
                }
                EncoderParams::Affine { w, b } => {
                    f(&format!("cell{i}.affine.w"), w);
                    f(&format!("cell{i}.affine.b"), b);
                }
                EncoderParams::Identity => {}
            }
            f(&format!("cell{i}.block.w_in"), &cell.block.w_in);
            f(&format!("cell{i}.block.b_in"), &cell.block.b_in);
            f(&format!("cell{i}.block.w_c"), &cell.block.w_c);
            f(&format!("cell{i}.block.b_c"), &cell.block.b_c);
            if let Some(bridge) = &cell.bridge {
                f(&format!("cell{i}.bridge.w"), &bridge.w);
                f(&format!("cell{i}.bridge.b"), &bridge.b);
            }
        }
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, cell) in self.cells.iter_mut().enumerate() {
            match &mut cell.encoder {
                EncoderParams::Vedic(v) => {
                    f(&format!("cell{i}.vedic.w1"), &mut v.w1);
                    f(&format!("cell{i}.vedic.w2"), &mut v.w2);
                    f(&format!("cell{i}.vedic.b1"), &mut v.b1);
                    f(&format!("cell{i}.vedic.b2"), &mut v.b2);
                }
                EncoderParams::Affine { w, b } => {
                    f(&format!("cell{i}.affine.w"), w);
                    f(&format!("cell{i}.affine.b"), b);
                }
                EncoderParams::Identity => {}
            }
            f(&format!("cell{i}.block.w_in"), &mut cell.block.w_in);
            f(&format!("cell{i}.block.b_in"), &mut cell.block.b_in);
            f(&format!("cell{i}.block.w_c"), &mut cell.block.w_c);
            f(&format!("cell{i}.block.b_c"), &mut cell.block.b_c);
            if let Some(bridge) = &mut cell.bridge {
                f(&format!("cell{i}.bridge.w"), &mut bridge.w);
                f(&format!("cell{i}.bridge.b"), &mut bridge.b);
            }
        }
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }

    /// Snapshot of all parameters in canonical order.
    pub fn params_vec(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Restores a snapshot taken with [`NagaModel::params_vec`].
    pub fn set_params_vec(&mut self, params: &[(String, Tensor)]) -> Result<(), ModelError> {
        let mut idx = 0;
        let mut err: Option<ModelError> = None;
        self.visit_params_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match params.get(idx) {
                Some((n, v)) if n == name && v.shape() == t.shape() => {
                    *t = v.clone();
                    idx += 1;
                }
                Some((n, _)) => {
                    err = Some(ModelError::ParamMismatch(format!(
                        "expected \"{name}\" at position {idx}, found \"{n}\""
                    )));
                }
                None => {
                    err = Some(ModelError::ParamMismatch(format!(
                        "snapshot ended before \"{name}\""
                    )));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "snapshot has {} extra entries",
                params.len() - idx
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    /// Draws train-mode masks for one window, in a fixed order (input
    /// mask first, then per-cell dropout) so runs are reproducible.
    /// Zero-probability masks draw nothing from the stream.
    pub fn sample_masks(&self, t_len: usize, rng: &mut Rng) -> WindowMasks {
        let input = if self.config.mask_prob > 0.0 {
            let mut m = Tensor::filled(&[t_len, self.config.d_in], 1.0);
            for v in m.data_mut() {
                if rng.bernoulli(self.config.mask_prob) {
                    *v = 0.0;
                }
            }
            Some(m)
        } else {
            None
        };
        let dropout = self
            .cells
            .iter()
            .map(|cell| match &cell.encoder {
                EncoderParams::Vedic(v) if v.p > 0.0 => {
                    Some(DropoutMask::sample(t_len, v.d_hidden(), v.p, rng))
                }
                _ => None,
            })
            .collect();
        WindowMasks { input, dropout }
    }

    /// Eval-mode masks: no input masking, all-ones dropout.
    pub fn eval_masks(&self) -> WindowMasks {
        WindowMasks {
            input: None,
            dropout: vec![None; self.cells.len()],
        }
    }

    /// One window (`t * d_in`) to one prediction row (`1 * pred_len`),
    /// without a tape.
    pub fn forward_window(&self, x: &Tensor, masks: &WindowMasks) -> Result<Tensor, ModelError> {
        if x.rank() != 2 || x.shape()[1] != self.config.d_in {
            return Err(ShapeError::Mismatch {
                op: "forward_window",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.d_in],
            }
            .into());
        }
        let t_len = x.shape()[0];
        let mut cur = match &masks.input {
            Some(m) => tensor::hadamard(x, m)?,
            None => x.clone(),
        };
        let mut block_out = None;
        for (i, cell) in self.cells.iter().enumerate() {
            let encoded = match &cell.encoder {
                EncoderParams::Vedic(v) => {
                    let ones;
                    let mask = match &masks.dropout[i] {
                        Some(m) => m,
                        None => {
                            ones = DropoutMask::ones(t_len, v.d_hidden());
                            &ones
                        }
                    };
                    vedic::vedic_encode(&cur, v, mask, self.config.use_flip)?
                }
                EncoderParams::Affine { w, b } => {
                    tensor::add_row_bias(&tensor::matmul(&cur, w)?, b)?
                }
                EncoderParams::Identity => cur.clone(),
            };
            let out = mamba2::mamba2_forward(&encoded, &cell.block)?;
            if let Some(bridge) = &cell.bridge {
                cur = tensor::add_row_bias(&tensor::matmul(&out, &bridge.w)?, &bridge.b)?;
            }
            block_out = Some(out);
        }
        let out = block_out.expect("num_cells >= 1 enforced by validate");
        let last = mamba2::last_step(&out)?;
        let last_row = Tensor::from_vec(&[1, last.len()], last.data().to_vec())?;
        let pred = tensor::add_row_bias(&tensor::matmul(&last_row, &self.head.w)?, &self.head.b)?;
        Ok(pred)
    }

    /// Batched forward: `x` is `B*T*d_in`, output `B*pred_len`. Train
    /// mode draws masks from `rng` per batch element, in order; eval
    /// mode touches neither masks nor the generator.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor, ModelError> {
        if x.rank() != 3 || x.shape()[2] != self.config.d_in {
            return Err(ShapeError::Mismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.d_in],
            }
            .into());
        }
        if !x.data().iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteInput { context: "forward input" });
        }
        let (b, t_len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(&[b, self.config.pred_len]);
        for e in 0..b {
            let window = Tensor::from_vec(
                &[t_len, d],
                x.data()[e * t_len * d..(e + 1) * t_len * d].to_vec(),
            )?;
            let masks = match mode {
                Mode::Train => self.sample_masks(t_len, rng),
                Mode::Eval => self.eval_masks(),
            };
            let pred = self.forward_window(&window, &masks)?;
            out.row_mut(e).copy_from_slice(pred.row(0));
        }
        Ok(out)
    }

    /// Registers every parameter on a tape, in canonical order.
    pub fn register_params(&self, tape: &mut GradTape) -> Result<ParamVars, ModelError> {
        let mut cells = Vec::with_capacity(self.cells.len());
        for (i, cell) in self.cells.iter().enumerate() {
            let encoder = match &cell.encoder {
                EncoderParams::Vedic(v) => Some(EncoderVars::Vedic(VedicVars::register(
                    tape,
                    &format!("cell{i}.vedic"),
                    v,
                )?)),
                EncoderParams::Affine { w, b } => Some(EncoderVars::Affine {
                    w: tape.param(&format!("cell{i}.affine.w"), w.clone())?,
                    b: tape.param(&format!("cell{i}.affine.b"), b.clone())?,
                }),
                EncoderParams::Identity => None,
            };
            let block = Mamba2Vars::register(tape, &format!("cell{i}.block"), &cell.block)?;
            let bridge = match &cell.bridge {
                Some(br) => Some((
                    tape.param(&format!("cell{i}.bridge.w"), br.w.clone())?,
                    tape.param(&format!("cell{i}.bridge.b"), br.b.clone())?,
                )),
                None => None,
            };
            cells.push(CellVars {
                encoder,
                block,
                bridge,
            });
        }
        let head_w = tape.param("head.w", self.head.w.clone())?;
        let head_b = tape.param("head.b", self.head.b.clone())?;
        Ok(ParamVars {
            cells,
            head_w,
            head_b,
        })
    }

    /// One window's forward pass recorded on a tape, reusing already
    /// registered parameter vars; returns the `1 * pred_len` prediction.
    pub fn forward_window_on_tape(
        &self,
        tape: &mut GradTape,
        vars: &ParamVars,
        x: &Tensor,
        masks: &WindowMasks,
    ) -> Result<Var, ModelError> {
        let t_len = x.shape()[0];
        let xv = tape.input(x.clone());
        let mut cur = match &masks.input {
            Some(m) => tape.mul_const(xv, m)?,
            None => xv,
        };
        let mut block_out = None;
        for (i, cell) in self.cells.iter().enumerate() {
            let encoded = match (&cell.encoder, &vars.cells[i].encoder) {
                (EncoderParams::Vedic(v), Some(EncoderVars::Vedic(vv))) => {
                    let ones;
                    let mask = match &masks.dropout[i] {
                        Some(m) => m,
                        None => {
                            ones = DropoutMask::ones(t_len, v.d_hidden());
                            &ones
                        }
                    };
                    vedic::vedic_encode_on_tape(tape, cur, vv, mask, self.config.use_flip)?
                }
                (EncoderParams::Affine { .. }, Some(EncoderVars::Affine { w, b })) => {
                    let m = tape.matmul(cur, *w)?;
                    tape.add_row_bias(m, *b)?
                }
                (EncoderParams::Identity, None) => cur,
                _ => {
                    return Err(ModelError::ParamMismatch(
                        "registered vars disagree with model structure".into(),
                    ))
                }
            };
            let out = mamba2::mamba2_forward_on_tape(
                tape,
                encoded,
                &vars.cells[i].block,
                self.config.dims(),
                self.config.eps,
            )?;
            if let Some((bw, bb)) = &vars.cells[i].bridge {
                let m = tape.matmul(out, *bw)?;
                cur = tape.add_row_bias(m, *bb)?;
            }
            block_out = Some(out);
        }
        let out = block_out.expect("num_cells >= 1 enforced by validate");
        let last = tape.last_row(out)?;
        let m = tape.matmul(last, vars.head_w)?;
        Ok(tape.add_row_bias(m, vars.head_b)?)
    }

    /// Builds the batch loss graph: per-window forward passes stacked
    /// into `B * pred_len` and fed to the squared-error loss. `masks`
    /// must hold one entry per window.
    pub fn build_batch_loss(
        &self,
        tape: &mut GradTape,
        vars: &ParamVars,
        windows: &[&Tensor],
        targets: &Tensor,
        masks: &[WindowMasks],
    ) -> Result<Var, ModelError> {
        if windows.is_empty() || windows.len() != masks.len() {
            return Err(ModelError::InvalidConfig(format!(
                "batch of {} windows with {} mask sets",
                windows.len(),
                masks.len()
            )));
        }
        let mut preds = Vec::with_capacity(windows.len());
        for (x, m) in windows.iter().zip(masks) {
            preds.push(self.forward_window_on_tape(tape, vars, x, m)?);
        }
        let stacked = tape.concat_rows(&preds)?;
        Ok(tape.mse_loss(stacked, targets)?)
    }
}

pub enum EncoderVars {
    Vedic(VedicVars),
    Affine { w: Var, b: Var },
}

pub struct CellVars {
    pub encoder: Option<EncoderVars>,
    pub block: Mamba2Vars,
    pub bridge: Option<(Var, Var)>,
}

/// Tape handles for the whole model.
pub struct ParamVars {
    pub cells: Vec<CellVars>,
    pub head_w: Var,
    pub head_b: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{finite_diff, max_scaled_err};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_in: 3,
            d_hidden: 6,
            d_inner: 4,
            d_state: 2,
            h_head: 2,
            k: 2,
            pred_len: 2,
            num_cells: 2,
            encoder: EncoderKind::Vedic,
            use_flip: true,
            mask_prob: 0.0,
            dropout_p: 0.0,
            eps: 1e-5,
        }
    }

    #[test]
    fn output_shape_contract() {
        for (cells, kind) in [
            (1, EncoderKind::Vedic),
            (2, EncoderKind::Vedic),
            (3, EncoderKind::Identity),
            (2, EncoderKind::Affine),
        ] {
            let mut cfg = tiny_config();
            cfg.num_cells = cells;
            cfg.encoder = kind;
            let mut rng = Rng::new(1);
            let model = NagaModel::init(cfg, &mut rng).unwrap();
            let x = rng.normal_tensor(&[4, 7, 3]);
            let y = model.forward(&x, Mode::Eval, &mut rng).unwrap();
            assert_eq!(y.shape(), &[4, 2], "cells={cells} kind={kind:?}");
        }
    }

    #[test]
    fn zero_head_weight_predicts_bias() {
        let mut rng = Rng::new(2);
        let mut model = NagaModel::init(tiny_config(), &mut rng).unwrap();
        model.head.w = Tensor::zeros(model.head.w.shape());
        model.head.b = Tensor::from_vec(&[2], vec![3.5, -1.25]).unwrap();
        let x = rng.normal_tensor(&[3, 6, 3]);
        let y = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[3.5, -1.25]);
        }
    }

    #[test]
    fn single_cell_identity_matches_straight_line_composition() {
        // num_cells=1, identity encoder, k=1: the model is exactly
        // block then head, so composing the stage functions by hand
        // must agree bit for bit. Input is a 2-element batch of 4x2.
        let mut cfg = tiny_config();
        cfg.d_in = 2;
        cfg.num_cells = 1;
        cfg.encoder = EncoderKind::Identity;
        cfg.k = 1;
        let mut rng = Rng::new(3);
        let model = NagaModel::init(cfg, &mut rng).unwrap();
        let x = rng.normal_tensor(&[2, 4, 2]);
        let got = model.forward(&x, Mode::Eval, &mut rng).unwrap();

        for e in 0..2 {
            let window =
                Tensor::from_vec(&[4, 2], x.data()[e * 8..(e + 1) * 8].to_vec()).unwrap();
            let block = mamba2::mamba2_forward(&window, &model.cells[0].block).unwrap();
            let last = mamba2::last_step(&block).unwrap();
            let row = Tensor::from_vec(&[1, last.len()], last.data().to_vec()).unwrap();
            let pred = tensor::add_row_bias(
                &tensor::matmul(&row, &model.head.w).unwrap(),
                &model.head.b,
            )
            .unwrap();
            assert_eq!(got.row(e), pred.row(0), "batch element {e}");
        }
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let cfg = tiny_config();
        let mut rng = Rng::new(4);
        let model = NagaModel::init(cfg, &mut rng).unwrap();
        let proj = 2 * cfg.d_inner + 2 * cfg.d_state + cfg.h_head;
        let vedic = 2 * cfg.d_in * cfg.d_hidden + 2 * cfg.d_hidden;
        let block = cfg.d_hidden * proj + proj + cfg.k * cfg.d_inner * cfg.d_inner + cfg.d_inner;
        let bridge = (cfg.d_inner / 2) * cfg.d_in + cfg.d_in;
        let head = (cfg.d_inner / 2) * cfg.pred_len + cfg.pred_len;
        let want = 2 * (vedic + block) + bridge + head;
        assert_eq!(model.param_count(), want);
    }

    #[test]
    fn snapshot_round_trip_and_mismatch_detection() {
        let mut rng = Rng::new(5);
        let model = NagaModel::init(tiny_config(), &mut rng).unwrap();
        let snap = model.params_vec();
        let mut other = NagaModel::init(tiny_config(), &mut rng).unwrap();
        assert_ne!(other.params_vec()[0].1, snap[0].1);
        other.set_params_vec(&snap).unwrap();
        assert_eq!(other.params_vec(), snap);

        let mut truncated = snap.clone();
        truncated.pop();
        assert!(matches!(
            other.set_params_vec(&truncated),
            Err(ModelError::ParamMismatch(_))
        ));
    }

    #[test]
    fn eval_is_deterministic_and_ignores_rng() {
        let mut rng = Rng::new(6);
        let model = NagaModel::init(tiny_config(), &mut rng).unwrap();
        let x = rng.normal_tensor(&[2, 5, 3]);
        let mut rng_a = Rng::new(100);
        let mut rng_b = Rng::new(999);
        let a = model.forward(&x, Mode::Eval, &mut rng_a).unwrap();
        let b = model.forward(&x, Mode::Eval, &mut rng_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_mode_masking_alters_outputs_deterministically() {
        let mut cfg = tiny_config();
        cfg.mask_prob = 0.5;
        cfg.dropout_p = 0.4;
        let mut rng = Rng::new(7);
        let model = NagaModel::init(cfg, &mut rng).unwrap();
        let x = rng.normal_tensor(&[2, 5, 3]);
        let eval = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        let t1 = model.forward(&x, Mode::Train, &mut Rng::new(11)).unwrap();
        let t2 = model.forward(&x, Mode::Train, &mut Rng::new(11)).unwrap();
        assert_eq!(t1, t2, "same mask seed must reproduce");
        assert_ne!(t1, eval, "masking should perturb the outputs");
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut rng = Rng::new(8);
        let model = NagaModel::init(tiny_config(), &mut rng).unwrap();
        let mut x = rng.normal_tensor(&[1, 4, 3]);
        x.data_mut()[5] = f64::NAN;
        assert!(matches!(
            model.forward(&x, Mode::Eval, &mut rng),
            Err(ModelError::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut rng = Rng::new(9);
        let mut odd = tiny_config();
        odd.d_inner = 5;
        assert!(NagaModel::init(odd, &mut rng).is_err());
        let mut mask = tiny_config();
        mask.mask_prob = 1.0;
        assert!(NagaModel::init(mask, &mut rng).is_err());
        let mut zero = tiny_config();
        zero.num_cells = 0;
        assert!(NagaModel::init(zero, &mut rng).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        for kind in [EncoderKind::Vedic, EncoderKind::Affine, EncoderKind::Identity] {
            let mut cfg = tiny_config();
            cfg.encoder = kind;
            let mut rng = Rng::new(10);
            let model = NagaModel::init(cfg, &mut rng).unwrap();
            let x = rng.normal_tensor(&[6, 3]);
            let masks = model.eval_masks();
            let plain = model.forward_window(&x, &masks).unwrap();
            let mut tape = GradTape::new();
            let vars = model.register_params(&mut tape).unwrap();
            let pred = model
                .forward_window_on_tape(&mut tape, &vars, &x, &masks)
                .unwrap();
            assert_eq!(tape.value(pred), &plain, "kind {kind:?}");
        }
    }

    #[test]
    fn full_model_gradcheck_all_parameters() {
        // Every parameter of a two-cell vedic model with frozen masks,
        // against central differences through the whole pipeline.
        let mut cfg = tiny_config();
        cfg.mask_prob = 0.3;
        cfg.dropout_p = 0.25;
        let mut rng = Rng::new(11);
        let model = NagaModel::init(cfg, &mut rng).unwrap();
        let x = rng.normal_tensor(&[5, 3]);
        let target = rng.normal_tensor(&[1, 2]);
        let masks = model.sample_masks(5, &mut rng);

        let mut tape = GradTape::new();
        let vars = model.register_params(&mut tape).unwrap();
        let loss = model
            .build_batch_loss(&mut tape, &vars, &[&x], &target, std::slice::from_ref(&masks))
            .unwrap();
        let grads = tape.backward(loss).unwrap();

        let names: Vec<String> = model.params_vec().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let mut current = None;
            model.visit_params(&mut |n, t| {
                if n == name {
                    current = Some(t.clone());
                }
            });
            let current = current.unwrap();
            let numeric = finite_diff(
                |p| {
                    let mut m = model.clone();
                    m.visit_params_mut(&mut |n, t| {
                        if n == name {
                            *t = p.clone();
                        }
                    });
                    let pred = m.forward_window(&x, &masks).unwrap();
                    tensor::sub(&pred, &target).unwrap().square_sum()
                },
                &current,
                1e-5,
            );
            let err = max_scaled_err(grads.get(&name).unwrap(), &numeric);
            assert!(err < 1e-5, "{name}: rel err {err}");
        }
    }
}
