//! Expressiveness results made executable: ground-truth bilinear
//! targets, a small singular value decomposition, the constructive
//! recovery of a bilinear target by the multiplicative encoder, and
//! the capacity comparison against a purely affine encoder.

use thiserror::Error;

use crate::data::{DataError, SplitSpec, SynthBilinearSpec, WindowedDataset};
use crate::model::{EncoderKind, ModelConfig, ModelError, NagaModel};
use crate::rng::Rng;
use crate::tensor::{self, ShapeError, Tensor};
use crate::train::{train, TrainConfig, TrainError};
use crate::vedic::{vedic_encode, DropoutMask, VedicError, VedicParams};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("pair ({t_pos}, {t_mirror}) is not mirrored in a window of {window} steps")]
    NotMirrored {
        t_pos: usize,
        t_mirror: usize,
        window: usize,
    },
    #[error("encoder width {d_hidden} cannot represent a rank {rank} coupling")]
    WidthTooSmall { d_hidden: usize, rank: usize },
    #[error("requested rank {r} exceeds dimension {d}")]
    RankTooLarge { r: usize, d: usize },
    #[error("invalid target: {0}")]
    Invalid(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Vedic(#[from] VedicError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A ground-truth forecasting target over a window of `window` input
/// rows: a bilinear coupling between the rows at one-based positions
/// `t_pos` and `t_mirror`, plus an optional linear functional of the
/// whole window.
#[derive(Debug, Clone)]
pub struct BilinearTarget {
    /// Coupling matrix, `d * d`.
    pub c: Tensor,
    /// Rank used at construction time (informational).
    pub rank: usize,
    pub t_pos: usize,
    pub t_mirror: usize,
    pub window: usize,
    /// Optional linear part, `window * d`.
    pub linear: Option<Tensor>,
}

impl BilinearTarget {
    /// Arbitrary pair positions; the constructive recovery below only
    /// accepts mirrored ones, which is part of what the tests probe.
    pub fn with_pair(
        c: Tensor,
        window: usize,
        t_pos: usize,
        t_mirror: usize,
        linear: Option<Tensor>,
    ) -> Result<BilinearTarget, TheoryError> {
        if c.rank() != 2 || c.shape()[0] != c.shape()[1] {
            return Err(TheoryError::Invalid(format!(
                "coupling must be square, got {:?}",
                c.shape()
            )));
        }
        let d = c.shape()[0];
        for (name, pos) in [("t_pos", t_pos), ("t_mirror", t_mirror)] {
            if pos == 0 || pos > window {
                return Err(TheoryError::Invalid(format!(
                    "{name} {pos} outside 1..={window}"
                )));
            }
        }
        if let Some(l) = &linear {
            if l.shape() != [window, d] {
                return Err(ShapeError::Mismatch {
                    op: "bilinear_target_linear",
                    lhs: l.shape().to_vec(),
                    rhs: vec![window, d],
                }
                .into());
            }
        }
        let rank = d;
        Ok(BilinearTarget {
            c,
            rank,
            t_pos,
            t_mirror,
            window,
            linear,
        })
    }

    /// Random rank-`rank` coupling with unit Frobenius norm on the
    /// mirrored pair (`t_pos`, `window - t_pos + 1`).
    pub fn random(
        d: usize,
        rank: usize,
        window: usize,
        t_pos: usize,
        ell_scale: f64,
        rng: &mut Rng,
    ) -> Result<BilinearTarget, TheoryError> {
        if rank > d {
            return Err(TheoryError::Invalid(format!(
                "rank {rank} exceeds dimension {d}"
            )));
        }
        if t_pos == 0 || t_pos > window {
            return Err(TheoryError::Invalid(format!(
                "t_pos {t_pos} outside 1..={window}"
            )));
        }
        let mut c = Tensor::zeros(&[d, d]);
        if rank > 0 {
            let u = rng.normal_tensor(&[d, rank]);
            let v = rng.normal_tensor(&[d, rank]);
            c = tensor::matmul(&u, &tensor::transpose(&v)?)?;
            let norm = c.square_sum().sqrt();
            if norm > 0.0 {
                for x in c.data_mut() {
                    *x /= norm;
                }
            }
        }
        let linear = if ell_scale > 0.0 {
            let mut l = rng.normal_tensor(&[window, d]);
            for x in l.data_mut() {
                *x *= ell_scale;
            }
            Some(l)
        } else {
            None
        };
        Ok(BilinearTarget {
            c,
            rank,
            t_pos,
            t_mirror: window - t_pos + 1,
            window,
            linear,
        })
    }

    pub fn is_mirrored(&self) -> bool {
        self.t_mirror == self.window - self.t_pos + 1
    }

    pub fn dim(&self) -> usize {
        self.c.shape()[0]
    }

    /// Ground-truth value on one window of inputs (`window * d`).
    pub fn eval(&self, x: &Tensor) -> Result<f64, TheoryError> {
        let d = self.dim();
        if x.rank() != 2 || x.shape() != [self.window, d] {
            return Err(ShapeError::Mismatch {
                op: "bilinear_target_eval",
                lhs: x.shape().to_vec(),
                rhs: vec![self.window, d],
            }
            .into());
        }
        let mut y = 0.0;
        for a in 0..d {
            let xa = x.get2(self.t_pos - 1, a);
            if xa == 0.0 {
                continue;
            }
            for b in 0..d {
                y += xa * self.c.get2(a, b) * x.get2(self.t_mirror - 1, b);
            }
        }
        if let Some(l) = &self.linear {
            for (lv, xv) in l.data().iter().zip(x.data()) {
                y += lv * xv;
            }
        }
        Ok(y)
    }
}

/// Rank-`r` factorization `a ~ sum_i alpha[i] * u_i v_i^T` with the
/// retained singular triples sorted by decreasing weight.
#[derive(Debug, Clone)]
pub struct RankFactorization {
    /// Left vectors as columns, `m * r`.
    pub u: Tensor,
    /// Right vectors as columns, `n * r`.
    pub v: Tensor,
    /// Component weights (singular values), descending.
    pub alpha: Vec<f64>,
}

impl RankFactorization {
    /// Sum of the top `k` components.
    pub fn reconstruct_top(&self, k: usize) -> Tensor {
        let m = self.u.shape()[0];
        let n = self.v.shape()[0];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..k.min(self.alpha.len()) {
            let s = self.alpha[i];
            for r in 0..m {
                let ur = s * self.u.get2(r, i);
                for c in 0..n {
                    let cur = out.get2(r, c);
                    out.set2(r, c, cur + ur * self.v.get2(c, i));
                }
            }
        }
        out
    }

    /// Sum of every retained component.
    pub fn reconstruct(&self) -> Tensor {
        self.reconstruct_top(self.alpha.len())
    }

    /// Number of weights above `tol` relative to the largest.
    pub fn effective_rank(&self, tol: f64) -> usize {
        let max = self.alpha.first().copied().unwrap_or(0.0);
        if max <= 0.0 {
            return 0;
        }
        self.alpha.iter().filter(|&&s| s > tol * max).count()
    }
}

/// Best rank-`r` approximation by singular value decomposition,
/// computed with one-sided Jacobi rotations: cheap and accurate for
/// the small couplings used here, no external solver needed. The
/// reconstruction is exact when the matrix rank is at most `r`.
pub fn svd_factorize(a: &Tensor, r: usize) -> Result<RankFactorization, TheoryError> {
    if a.rank() != 2 {
        return Err(ShapeError::Rank {
            op: "svd_factorize",
            expected: 2,
            shape: a.shape().to_vec(),
        }
        .into());
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if r > m.min(n) {
        return Err(TheoryError::RankTooLarge { r, d: m.min(n) });
    }
    let mut work = a.clone();
    let mut v = Tensor::zeros(&[n, n]);
    for i in 0..n {
        v.set2(i, i, 1.0);
    }
    // Right rotations until all column pairs are orthogonal; the
    // rotated matrix is then U scaled by the singular values and the
    // accumulated rotations are V.
    let tol = 1e-14;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (work.get2(i, p), work.get2(i, q));
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = cos * t;
                for i in 0..m {
                    let (x, y) = (work.get2(i, p), work.get2(i, q));
                    work.set2(i, p, cos * x - sin * y);
                    work.set2(i, q, sin * x + cos * y);
                }
                for i in 0..n {
                    let (x, y) = (v.get2(i, p), v.get2(i, q));
                    v.set2(i, p, cos * x - sin * y);
                    v.set2(i, q, sin * x + cos * y);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut norms = vec![0.0; n];
    for (j, s) in norms.iter_mut().enumerate() {
        let mut sq = 0.0;
        for i in 0..m {
            sq += work.get2(i, j) * work.get2(i, j);
        }
        *s = sq.sqrt();
    }
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite norms"));
    let mut u = Tensor::zeros(&[m, r]);
    let mut v_kept = Tensor::zeros(&[n, r]);
    let mut alpha = vec![0.0; r];
    for (dst, &src) in order.iter().take(r).enumerate() {
        alpha[dst] = norms[src];
        if norms[src] > 1e-300 {
            for i in 0..m {
                u.set2(i, dst, work.get2(i, src) / norms[src]);
            }
        }
        for i in 0..n {
            v_kept.set2(i, dst, v.get2(i, src));
        }
    }
    Ok(RankFactorization { u, v: v_kept, alpha })
}

/// Multiplicative encoder weights that reproduce a mirrored bilinear
/// target exactly: one encoder column per singular component, read out
/// at the pair's first position with the singular values as weights,
/// and the linear part applied to the raw inputs.
#[derive(Debug, Clone)]
pub struct ExactVedic {
    pub params: VedicParams,
    pub alpha: Vec<f64>,
    pub t_pos: usize,
    pub window: usize,
    pub linear: Option<Tensor>,
}

impl ExactVedic {
    pub fn predict(&self, x: &Tensor) -> Result<f64, TheoryError> {
        if x.rank() != 2 || x.shape() != [self.window, self.params.d_in()] {
            return Err(ShapeError::Mismatch {
                op: "exact_vedic_predict",
                lhs: x.shape().to_vec(),
                rhs: vec![self.window, self.params.d_in()],
            }
            .into());
        }
        let mask = DropoutMask::ones(self.window, self.params.d_hidden());
        let h = vedic_encode(x, &self.params, &mask, true)?;
        let mut y = 0.0;
        for (i, a) in self.alpha.iter().enumerate() {
            y += a * h.get2(self.t_pos - 1, i);
        }
        if let Some(l) = &self.linear {
            for (lv, xv) in l.data().iter().zip(x.data()) {
                y += lv * xv;
            }
        }
        Ok(y)
    }

    /// Per-element squared prediction error over a window set built
    /// from raw (unnormalized) data.
    pub fn mse_on(&self, xs: &[Tensor], ys: &[f64]) -> Result<f64, TheoryError> {
        let mut sq = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let d = self.predict(x)? - y;
            sq += d * d;
        }
        Ok(sq / xs.len().max(1) as f64)
    }
}

fn build_from_components(
    target: &BilinearTarget,
    f: &RankFactorization,
    width: usize,
    keep: usize,
) -> Result<ExactVedic, TheoryError> {
    let d = target.dim();
    let mut w1 = Tensor::zeros(&[d, width]);
    let mut w2 = Tensor::zeros(&[d, width]);
    let mut alpha = vec![0.0; width];
    for (i, a) in alpha.iter_mut().enumerate().take(keep) {
        for r in 0..d {
            w1.set2(r, i, f.u.get2(r, i));
            w2.set2(r, i, f.v.get2(r, i));
        }
        *a = f.alpha[i];
    }
    let params = VedicParams {
        w1,
        w2,
        b1: Tensor::zeros(&[width]),
        b2: Tensor::zeros(&[width]),
        p: 0.0,
    };
    params.validate()?;
    Ok(ExactVedic {
        params,
        alpha,
        t_pos: target.t_pos,
        window: target.window,
        linear: target.linear.clone(),
    })
}

/// Exact recovery. Requires a mirrored pair and an encoder at least as
/// wide as the coupling's rank; extra columns stay zero and change
/// nothing.
pub fn build_exact_vedic(
    target: &BilinearTarget,
    d_hidden: usize,
) -> Result<ExactVedic, TheoryError> {
    if !target.is_mirrored() {
        return Err(TheoryError::NotMirrored {
            t_pos: target.t_pos,
            t_mirror: target.t_mirror,
            window: target.window,
        });
    }
    let d = target.dim();
    let f = svd_factorize(&target.c, d)?;
    let rank = f.effective_rank(1e-12);
    if d_hidden < rank {
        return Err(TheoryError::WidthTooSmall { d_hidden, rank });
    }
    build_from_components(target, &f, d_hidden, rank)
}

/// Best-effort recovery with a possibly narrower encoder: keeps the
/// top `d_hidden` singular components. Used to show the rank bound is
/// tight.
pub fn build_truncated_vedic(
    target: &BilinearTarget,
    d_hidden: usize,
) -> Result<ExactVedic, TheoryError> {
    if !target.is_mirrored() {
        return Err(TheoryError::NotMirrored {
            t_pos: target.t_pos,
            t_mirror: target.t_mirror,
            window: target.window,
        });
    }
    let d = target.dim();
    let f = svd_factorize(&target.c, d)?;
    let keep = d_hidden.min(f.effective_rank(1e-12));
    build_from_components(target, &f, d_hidden.max(1), keep)
}

/// Largest absolute prediction error over random windows.
pub fn recovery_error(
    exact: &ExactVedic,
    target: &BilinearTarget,
    n_windows: usize,
    rng: &mut Rng,
) -> Result<f64, TheoryError> {
    let mut worst = 0.0f64;
    for _ in 0..n_windows {
        let x = rng.normal_tensor(&[target.window, target.dim()]);
        let diff = (exact.predict(&x)? - target.eval(&x)?).abs();
        worst = worst.max(diff);
    }
    Ok(worst)
}

/// Model dimensions and budget for the encoder capacity comparison.
#[derive(Debug, Clone)]
pub struct CapacityGapConfig {
    pub seeds: Vec<u64>,
    pub d_in: usize,
    pub rank: usize,
    pub window: usize,
    pub rows: usize,
    pub noise: f64,
    pub d_hidden: usize,
    pub train: TrainConfig,
}

impl Default for CapacityGapConfig {
    fn default() -> CapacityGapConfig {
        CapacityGapConfig {
            seeds: vec![0, 1, 2, 3, 4],
            d_in: 3,
            rank: 1,
            window: 8,
            rows: 600,
            noise: 0.01,
            d_hidden: 8,
            train: TrainConfig {
                max_epochs: 60,
                patience: 10,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CapacityGapRow {
    pub seed: u64,
    pub vedic_val_mse: f64,
    pub affine_val_mse: f64,
}

fn gap_model_config(cfg: &CapacityGapConfig, encoder: EncoderKind) -> ModelConfig {
    let mut mc = ModelConfig::new(cfg.d_in + 1, 1);
    mc.d_hidden = cfg.d_hidden;
    mc.d_inner = 8;
    mc.d_state = 2;
    mc.h_head = 2;
    // One cell and a short convolution: the mirrored pair spans the
    // whole window, so nothing downstream of the encoder can form the
    // product on its own.
    mc.k = 2;
    mc.num_cells = 1;
    mc.encoder = encoder;
    mc.mask_prob = 0.0;
    mc.dropout_p = 0.0;
    mc
}

fn train_one(
    cfg: &CapacityGapConfig,
    data: &WindowedDataset,
    encoder: EncoderKind,
    seed: u64,
) -> Result<f64, TheoryError> {
    let mc = gap_model_config(cfg, encoder);
    let mut rng = Rng::new(seed ^ 0x9e3779b97f4a7c15);
    let mut model = NagaModel::init(mc, &mut rng)?;
    let tc = TrainConfig { seed, ..cfg.train };
    let report = train(&mut model, data, &tc)?;
    Ok(report.best_val_mse)
}

/// Trains an affine-encoder model and the multiplicative model on the
/// same dataset under identical budgets and returns both best
/// validation MSEs as `(affine, vedic)`.
pub fn capacity_gap(
    cfg: &CapacityGapConfig,
    data: &WindowedDataset,
    seed: u64,
) -> Result<(f64, f64), TheoryError> {
    let affine = train_one(cfg, data, EncoderKind::Affine, seed)?;
    let vedic = train_one(cfg, data, EncoderKind::Vedic, seed)?;
    Ok((affine, vedic))
}

/// Builds a fresh bilinear dataset per seed and runs [`capacity_gap`]
/// on each.
pub fn capacity_gap_over_seeds(
    cfg: &CapacityGapConfig,
) -> Result<Vec<CapacityGapRow>, TheoryError> {
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let data = capacity_dataset(cfg, seed)?;
        let (affine_val_mse, vedic_val_mse) = capacity_gap(cfg, &data, seed)?;
        rows.push(CapacityGapRow {
            seed,
            vedic_val_mse,
            affine_val_mse,
        });
    }
    Ok(rows)
}

/// The synthetic task for the comparison: purely bilinear (no linear
/// shortcut), mirrored pair spanning the window's ends.
pub fn capacity_dataset(
    cfg: &CapacityGapConfig,
    seed: u64,
) -> Result<WindowedDataset, TheoryError> {
    let mut spec = SynthBilinearSpec::new(cfg.window, cfg.d_in, cfg.rank, cfg.noise, seed);
    spec.rows = cfg.rows;
    spec.ell_scale = 0.0;
    let (table, _) = crate::data::synth_bilinear(&spec)?;
    let (data, _) = WindowedDataset::build(
        &table,
        &SplitSpec::Ratio {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        },
        cfg.window,
        1,
        table.default_target(),
    )?;
    Ok(data)
}
