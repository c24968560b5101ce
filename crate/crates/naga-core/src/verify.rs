//! The runnable verification battery behind the CLI's `verify`
//! subcommand: gradient correctness of the full model, agreement of
//! the closed-form encoder gradients with autodiff, the exact-recovery
//! construction, and the encoder capacity separation.
//!
//! Every check is deterministic and self-contained; each returns the
//! worst observed value next to its tolerance so failures are
//! actionable.

use std::time::Instant;

use crate::model::{ModelConfig, NagaModel};
use crate::rng::Rng;
use crate::tape::{finite_diff, max_scaled_err, GradTape};
use crate::tensor::{self, Tensor};
use crate::theory::{
    build_exact_vedic, build_truncated_vedic, capacity_gap, capacity_dataset, recovery_error,
    svd_factorize, BilinearTarget, CapacityGapConfig,
};
use crate::train::TrainConfig;
use crate::vedic::{
    lemma2_grad_w1, lemma2_grad_w2, vedic_encode, vedic_encode_on_tape, DropoutMask, VedicParams,
    VedicVars,
};

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst value observed across the check's instances.
    pub observed: f64,
    /// The bound `observed` is compared against; `detail` states the
    /// direction.
    pub threshold: f64,
    pub seconds: f64,
    pub detail: String,
}

impl CheckResult {
    fn finish(
        name: &'static str,
        start: Instant,
        passed: bool,
        observed: f64,
        threshold: f64,
        detail: String,
    ) -> CheckResult {
        CheckResult {
            name,
            passed,
            observed,
            threshold,
            seconds: start.elapsed().as_secs_f64(),
            detail,
        }
    }
}

/// Central-difference check of every parameter of a two-cell model at
/// the reference dimensions (window 8, three inputs, two-step
/// horizon), with input masking and encoder dropout active under
/// frozen masks.
pub fn check_full_model_gradients() -> CheckResult {
    let start = Instant::now();
    let mut cfg = ModelConfig::new(3, 2);
    cfg.d_hidden = 8;
    cfg.d_inner = 8;
    cfg.d_state = 2;
    cfg.h_head = 2;
    cfg.k = 2;
    cfg.num_cells = 2;
    cfg.mask_prob = 0.3;
    cfg.dropout_p = 0.25;
    let mut rng = Rng::new(101);
    let model = NagaModel::init(cfg, &mut rng).expect("reference config is valid");
    let x = rng.normal_tensor(&[8, 3]);
    let target = rng.normal_tensor(&[1, 2]);
    let masks = model.sample_masks(8, &mut rng);

    let mut tape = GradTape::new();
    let vars = model.register_params(&mut tape).expect("registration");
    let loss = model
        .build_batch_loss(&mut tape, &vars, &[&x], &target, std::slice::from_ref(&masks))
        .expect("loss graph");
    let grads = tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for (name, current) in model.params_vec() {
        let numeric = finite_diff(
            |p| {
                let mut m = model.clone();
                m.visit_params_mut(&mut |n, t| {
                    if n == name {
                        *t = p.clone();
                    }
                });
                let pred = m.forward_window(&x, &masks).expect("forward");
                tensor::sub(&pred, &target).expect("shapes").square_sum()
            },
            &current,
            1e-5,
        );
        let err = max_scaled_err(grads.get(&name).expect("gradient"), &numeric);
        if err > worst {
            worst = err;
            worst_name = name;
        }
    }
    let threshold = 1e-5;
    CheckResult::finish(
        "full-model-gradcheck",
        start,
        worst < threshold,
        worst,
        threshold,
        format!("worst parameter: {worst_name} (error must stay below the threshold)"),
    )
}

/// One random closed-form gradient instance; returns the absolute
/// errors of the W1 and W2 formulas against autodiff. The gradient
/// functions are injected so a deliberately corrupted formula can be
/// shown to fail.
type GradFn = fn(&Tensor, &VedicParams, &DropoutMask, &Tensor) -> Result<Tensor, crate::vedic::VedicError>;

fn closed_form_instance(
    rng: &mut Rng,
    grad_w1: GradFn,
    grad_w2: GradFn,
) -> (f64, f64) {
    let t_len = rng.index(6) + 1;
    let d_in = rng.index(4) + 1;
    let d_hidden = rng.index(5) + 1;
    let p = if rng.bernoulli(0.5) { 0.3 } else { 0.0 };
    let params = VedicParams::init(d_in, d_hidden, p, rng);
    let mask = if p > 0.0 {
        DropoutMask::sample(t_len, d_hidden, p, rng)
    } else {
        DropoutMask::ones(t_len, d_hidden)
    };
    let x = rng.normal_tensor(&[t_len, d_in]);
    let delta = rng.normal_tensor(&[t_len, d_hidden]);

    let mut tape = GradTape::new();
    let vars = VedicVars::register(&mut tape, "enc", &params).expect("register");
    let xv = tape.input(x.clone());
    let h = vedic_encode_on_tape(&mut tape, xv, &vars, &mask, true).expect("encode");
    let weighted = tape.mul_const(h, &delta).expect("weighting");
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).expect("backward");

    let closed_w1 = grad_w1(&x, &params, &mask, &delta).expect("closed form w1");
    let closed_w2 = grad_w2(&x, &params, &mask, &delta).expect("closed form w2");
    let auto_w1 = grads.get("enc.w1").expect("autodiff w1");
    let auto_w2 = grads.get("enc.w2").expect("autodiff w2");
    let abs = |a: &Tensor, b: &Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    (abs(&closed_w1, auto_w1), (abs(&closed_w2, auto_w2)))
}

fn closed_form_check(
    name: &'static str,
    pick: fn((f64, f64)) -> f64,
    grad_w1: GradFn,
    grad_w2: GradFn,
) -> CheckResult {
    let start = Instant::now();
    let mut rng = Rng::new(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        worst = worst.max(pick(closed_form_instance(&mut rng, grad_w1, grad_w2)));
    }
    let threshold = 1e-10;
    CheckResult::finish(
        name,
        start,
        worst < threshold,
        worst,
        threshold,
        "100 random instances, absolute error vs autodiff (below threshold)".into(),
    )
}

pub fn check_closed_form_grad_w1() -> CheckResult {
    closed_form_check("closed-form-grad-w1", |e| e.0, lemma2_grad_w1, lemma2_grad_w2)
}

pub fn check_closed_form_grad_w2() -> CheckResult {
    closed_form_check("closed-form-grad-w2", |e| e.1, lemma2_grad_w1, lemma2_grad_w2)
}

/// Elementwise loop oracle for the encoder forward pass.
pub fn check_encoder_forward_oracle() -> CheckResult {
    let start = Instant::now();
    let mut rng = Rng::new(303);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t_len = rng.index(7) + 1;
        let d_in = rng.index(5) + 1;
        let d_hidden = rng.index(6) + 1;
        let params = VedicParams::init(d_in, d_hidden, 0.2, &mut rng);
        let mask = DropoutMask::sample(t_len, d_hidden, 0.2, &mut rng);
        let x = rng.normal_tensor(&[t_len, d_in]);
        let h = vedic_encode(&x, &params, &mask, true).expect("encode");
        for t in 0..t_len {
            for i in 0..d_hidden {
                let mut left = params.b1.data()[i];
                let mut right = params.b2.data()[i];
                for a in 0..d_in {
                    left += x.get2(t, a) * params.w1.get2(a, i);
                    right += x.get2(t_len - 1 - t, a) * params.w2.get2(a, i);
                }
                let want = left * right * mask.scaled.get2(t, i);
                worst = worst.max((h.get2(t, i) - want).abs());
            }
        }
    }
    let threshold = 1e-12;
    CheckResult::finish(
        "encoder-forward-oracle",
        start,
        worst < threshold,
        worst,
        threshold,
        "200 random instances vs a direct loop transcription (below threshold)".into(),
    )
}

/// Factor-and-rebuild residual of the decomposition.
pub fn check_svd_reconstruction() -> CheckResult {
    let start = Instant::now();
    let mut rng = Rng::new(404);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.index(7) + 2;
        let rank = rng.index(d) + 1;
        let u = rng.normal_tensor(&[d, rank]);
        let v = rng.normal_tensor(&[d, rank]);
        let c = tensor::matmul(&u, &tensor::transpose(&v).expect("transpose")).expect("matmul");
        let f = svd_factorize(&c, d).expect("factorize");
        let back = f.reconstruct();
        for (a, b) in back.data().iter().zip(c.data()) {
            worst = worst.max((a - b).abs() / 1.0f64.max(a.abs()).max(b.abs()));
        }
    }
    let threshold = 1e-10;
    CheckResult::finish(
        "svd-reconstruction",
        start,
        worst < threshold,
        worst,
        threshold,
        "100 random matrices up to 8x8, scaled elementwise residual (below threshold)".into(),
    )
}

/// Exact recovery of 50 random bilinear targets by the constructed
/// encoder, evaluated on fresh inputs.
pub fn check_exact_recovery() -> CheckResult {
    let start = Instant::now();
    let mut rng = Rng::new(505);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let d = rng.index(6) + 1;
        let rank = rng.index(d.min(3)) + 1;
        let window = rng.index(9) + 2;
        let t_pos = rng.index(window) + 1;
        let ell = if case % 2 == 0 { 0.0 } else { 0.3 };
        let target = BilinearTarget::random(d, rank, window, t_pos, ell, &mut rng)
            .expect("target construction");
        let exact = build_exact_vedic(&target, d.max(rank)).expect("exact construction");
        let err = recovery_error(&exact, &target, 40, &mut rng).expect("evaluation");
        worst = worst.max(err);
    }
    let threshold = 1e-8;
    CheckResult::finish(
        "exact-recovery",
        start,
        worst < threshold,
        worst,
        threshold,
        "50 random targets (d <= 6, rank <= 3, window <= 10), absolute error (below threshold)"
            .into(),
    )
}

/// With one encoder column fewer than the coupling rank, the best
/// achievable error must stay bounded away from zero.
pub fn check_rank_condition() -> CheckResult {
    let start = Instant::now();
    let mut rng = Rng::new(606);
    let mut min_residual = f64::INFINITY;
    let mut produced = 0;
    while produced < 10 {
        let d = rng.index(4) + 3;
        let rank = 3;
        let target =
            BilinearTarget::random(d, rank, 6, 6, 0.0, &mut rng).expect("target construction");
        // Only well-conditioned couplings make the quantitative bound
        // meaningful; a vanishing trailing component carries no signal.
        let f = svd_factorize(&target.c, d).expect("factorize");
        if f.alpha[rank - 1] < 0.05 {
            continue;
        }
        produced += 1;
        let narrow = build_truncated_vedic(&target, rank - 1).expect("truncated construction");
        let err = recovery_error(&narrow, &target, 64, &mut rng).expect("evaluation");
        min_residual = min_residual.min(err);
    }
    let threshold = 1e-3;
    CheckResult::finish(
        "rank-condition",
        start,
        min_residual > threshold,
        min_residual,
        threshold,
        "10 full-rank-3 targets, width rank-1: smallest residual (must exceed threshold)".into(),
    )
}

/// Small-budget encoder comparison: the multiplicative encoder must
/// beat the affine one on a mirrored bilinear task.
pub fn check_capacity_separation() -> CheckResult {
    let start = Instant::now();
    let cfg = CapacityGapConfig {
        seeds: vec![0, 1],
        rows: 300,
        train: TrainConfig {
            max_epochs: 20,
            patience: 10,
            ..TrainConfig::default()
        },
        ..CapacityGapConfig::default()
    };
    let mut worst_ratio = 0.0f64;
    let mut failed = false;
    let mut detail = String::from("vedic/affine best val MSE per seed:");
    for &seed in &cfg.seeds {
        match capacity_dataset(&cfg, seed).and_then(|d| capacity_gap(&cfg, &d, seed)) {
            Ok((affine, vedic)) => {
                let ratio = vedic / affine;
                worst_ratio = worst_ratio.max(ratio);
                if vedic >= affine || !vedic.is_finite() || !affine.is_finite() {
                    failed = true;
                }
                detail.push_str(&format!(" seed {seed}: {vedic:.5}/{affine:.5}"));
            }
            Err(e) => {
                failed = true;
                detail.push_str(&format!(" seed {seed}: error {e}"));
            }
        }
    }
    let threshold = 1.0;
    CheckResult::finish(
        "capacity-separation",
        start,
        !failed && worst_ratio < threshold,
        worst_ratio,
        threshold,
        detail,
    )
}

/// Runs every check in a fixed order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_full_model_gradients(),
        check_closed_form_grad_w1(),
        check_closed_form_grad_w2(),
        check_encoder_forward_oracle(),
        check_svd_reconstruction(),
        check_exact_recovery(),
        check_rank_condition(),
        check_capacity_separation(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vedic::VedicError;

    #[test]
    fn full_model_gradcheck_passes() {
        let r = check_full_model_gradients();
        assert!(r.passed, "{}: observed {}", r.name, r.observed);
    }

    #[test]
    fn closed_form_checks_pass() {
        let r1 = check_closed_form_grad_w1();
        assert!(r1.passed, "{}: observed {}", r1.name, r1.observed);
        let r2 = check_closed_form_grad_w2();
        assert!(r2.passed, "{}: observed {}", r2.name, r2.observed);
    }

    #[test]
    fn corrupted_closed_form_fails_the_named_check() {
        // A sign flip in the gradient formula must be caught.
        fn flipped(
            x: &Tensor,
            params: &VedicParams,
            mask: &DropoutMask,
            delta: &Tensor,
        ) -> Result<Tensor, VedicError> {
            let mut g = lemma2_grad_w1(x, params, mask, delta)?;
            for v in g.data_mut() {
                *v = -*v;
            }
            Ok(g)
        }
        let r = closed_form_check("closed-form-grad-w1", |e| e.0, flipped, lemma2_grad_w2);
        assert_eq!(r.name, "closed-form-grad-w1");
        assert!(!r.passed, "sign-flipped formula must fail");
        assert!(r.observed > r.threshold);
    }

    #[test]
    fn oracle_and_reconstruction_checks_pass() {
        for r in [check_encoder_forward_oracle(), check_svd_reconstruction()] {
            assert!(r.passed, "{}: observed {}", r.name, r.observed);
        }
    }

    #[test]
    fn recovery_and_rank_checks_pass() {
        let r = check_exact_recovery();
        assert!(r.passed, "{}: observed {}", r.name, r.observed);
        let r = check_rank_condition();
        assert!(r.passed, "{}: observed {}", r.name, r.observed);
    }

    #[test]
    fn capacity_check_passes() {
        let r = check_capacity_separation();
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }
}
