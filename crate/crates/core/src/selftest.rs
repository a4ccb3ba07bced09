//! Built-in oracle suite: finite-difference gradient checks, per-sample
//! consistency, Fisher/KL identities, weight bounds, and the quadratic
//! FIM-SGD convergence oracle.
//!
//! Every check pits the differentiation engine against an independent
//! route: finite differences evaluate losses through the straight-line
//! `predict` path (never the tape), the Fisher checks against closed-form
//! Gaussian facts, and the optimizer against an exactly solvable quadratic.

use crate::error::Result;
use crate::field::{FieldArch, FieldModel};
use crate::fisher::{
    fim_loss_tape, kl_gaussian_mean, kl_quadratic_form, mse_loss_tape, preconditioned_update,
    scores_batch, weight, weights_batch, FimConfig, FisherAccumulator, ScoreScope, WeightNorm,
};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::unroll::{MetaMode, StepScale, Unroll};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        CheckResult { name, pass, detail }
    }
}

/// Central finite differences of a scalar function of a flat vector.
pub fn fd_gradient(loss: impl Fn(&Tensor) -> f64, theta: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(&[theta.len()]);
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (loss(&plus) - loss(&minus)) / (2.0 * h);
    }
    grad
}

/// Max-abs-normalized disagreement: ‖a − b‖_∞ / max(‖b‖_∞, 1e-8).
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let num = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = b.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    num / den.max(1e-8)
}

fn random_arch(rng: &mut Rng, sine: bool) -> FieldArch {
    let n_layers = 3 + rng.below(3);
    let hidden = 6 + rng.below(9);
    let d_in = 1 + rng.below(3);
    let d_out = 1 + rng.below(3);
    let mut arch = if sine {
        FieldArch::sine(n_layers, hidden, d_in, d_out)
    } else {
        FieldArch::relu(n_layers, hidden, d_in, d_out)
    };
    if !sine && rng.below(3) == 0 {
        arch.pos_enc = Some(1 + rng.below(3));
    }
    arch
}

fn random_batch(rng: &mut Rng, m: usize, d_in: usize, d_out: usize) -> (Tensor, Tensor) {
    let coords = Tensor::new(
        vec![m, d_in],
        (0..m * d_in).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .unwrap();
    let targets = Tensor::new(
        vec![m, d_out],
        (0..m * d_out).map(|_| rng.uniform(-0.5, 0.5)).collect(),
    )
    .unwrap();
    (coords, targets)
}

/// Straight-line (tape-free) weighted squared-error loss, the independent
/// reference for the finite-difference checks.
fn straight_line_loss(
    arch: &FieldArch,
    params: &Tensor,
    coords: &Tensor,
    targets: &Tensor,
    weights: &[f64],
) -> f64 {
    let model = FieldModel::new(arch.clone(), params.clone()).unwrap();
    let pred = model.predict(coords);
    let m = coords.rows();
    let mut total = 0.0;
    for b in 0..m {
        let sq: f64 = pred
            .row(b)
            .iter()
            .zip(targets.row(b))
            .map(|(&p, &s)| (p - s) * (p - s))
            .sum();
        total += weights[b] * sq;
    }
    total / m as f64
}

/// Analytic gradients of the MSE and FIM losses vs central finite
/// differences over `n_models` random sine/ReLU fields (≤ 2000 parameters).
pub fn check_gradients(n_models: usize, seed: u64) -> CheckResult {
    let mut rng = Rng::with_stream(seed, 1000);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for k in 0..n_models {
        let arch = random_arch(&mut rng, k % 2 == 0);
        if arch.param_count() > 2000 {
            continue;
        }
        let model = match FieldModel::init(arch.clone(), &mut rng) {
            Ok(m) => m,
            Err(e) => return CheckResult::new("gradients", false, e.to_string()),
        };
        let (coords, targets) = random_batch(&mut rng, 8, arch.d_in, arch.d_out);

        // Plain MSE.
        let mut tape = Tape::new();
        let p = tape.leaf(model.params.clone());
        let loss = match mse_loss_tape(&mut tape, &arch, p, &coords, &targets) {
            Ok(l) => l,
            Err(e) => return CheckResult::new("gradients", false, e.to_string()),
        };
        let analytic = tape.backward(loss, p).unwrap();
        let ones = vec![1.0; 8];
        let fd = fd_gradient(
            |t| straight_line_loss(&arch, t, &coords, &targets, &ones),
            &model.params,
            h,
        );
        worst = worst.max(max_rel_err(&analytic, &fd));

        // FIM loss with weights frozen at the expansion point.
        let scores = scores_batch(&model, &coords, &targets, ScoreScope::LastLayer).unwrap();
        let mut acc =
            FisherAccumulator::new(scores.cols(), 0.9, 1e-6).unwrap();
        for b in 0..scores.rows() {
            acc.update(&Tensor::vector(scores.row(b).to_vec()));
        }
        let cfg = FimConfig {
            lambda: 0.5,
            weight_norm: WeightNorm::BatchMeanOne,
            ..FimConfig::default()
        };
        let w = weights_batch(&acc, &scores, &cfg);
        let mut tape = Tape::new();
        let p = tape.leaf(model.params.clone());
        let loss = fim_loss_tape(&mut tape, &arch, p, &coords, &targets, &w).unwrap();
        let analytic = tape.backward(loss, p).unwrap();
        let fd = fd_gradient(
            |t| straight_line_loss(&arch, t, &coords, &targets, &w),
            &model.params,
            h,
        );
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    CheckResult::new(
        "gradients",
        worst < 1e-4,
        format!("max relative error {worst:.3e} over {n_models} models (tolerance 1e-4)"),
    )
}

/// Mean of per-sample gradient rows equals the batch gradient to 1e-12.
pub fn check_per_sample_consistency(seed: u64) -> CheckResult {
    let mut rng = Rng::with_stream(seed, 1001);
    let arch = random_arch(&mut rng, true);
    let model = FieldModel::init(arch.clone(), &mut rng).unwrap();
    let m = 8;
    let (coords, targets) = random_batch(&mut rng, m, arch.d_in, arch.d_out);
    let mut tape = Tape::new();
    let p = tape.leaf(model.params.clone());
    let out = crate::field::forward_tape(&mut tape, &arch, p, &coords).unwrap();
    let t = tape.constant(targets.clone());
    let r = tape.sub(out, t);
    let sq = tape.mul(r, r);
    let rows = tape.row_sum(sq);
    let losses: Vec<_> = (0..m).map(|b| tape.index(rows, b)).collect();
    let per_sample = tape.per_sample_grads(&losses, p).unwrap();
    let total = tape.sum_all(rows);
    let mean_loss = tape.scale(total, 1.0 / m as f64);
    let batch_grad = tape.backward(mean_loss, p).unwrap();
    let mean_rows = per_sample.col_sum().scale(1.0 / m as f64);
    let gap = mean_rows
        .data()
        .iter()
        .zip(batch_grad.data())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0, f64::max);
    CheckResult::new(
        "per-sample-consistency",
        gap < 1e-12,
        format!("max |mean(per-sample) − batch| = {gap:.3e} (tolerance 1e-12)"),
    )
}

/// Meta-gradient through k=3 unrolled steps vs finite differences over θ₀,
/// plus the k=1 quadratic closed form to 1e-12.
pub fn check_meta_gradient(seed: u64) -> CheckResult {
    // Closed form: inner ½θ², one step of rate η, outer ½θ².
    let eta = 0.25;
    let theta0 = 1.2;
    let mut u = Unroll::new(Tensor::vector(vec![theta0]));
    u.sgd_step(&StepScale::Fixed(eta), crate::unroll::half_sq_norm)
        .unwrap();
    let (_, g) = u
        .meta_gradient(MetaMode::FullSecondOrder, crate::unroll::half_sq_norm)
        .unwrap();
    let expect = (1.0 - eta) * (1.0 - eta) * theta0;
    if (g.data()[0] - expect).abs() > 1e-12 {
        return CheckResult::new(
            "meta-gradient",
            false,
            format!("quadratic closed form: {} vs {expect}", g.data()[0]),
        );
    }

    // A ~200-parameter sine field, 3 inner steps, FD over θ₀.
    let mut rng = Rng::with_stream(seed, 1002);
    let arch = FieldArch::sine(3, 12, 2, 1); // 2·12+12 + 12·12+12 + 12+1 = 229
    let model = FieldModel::init(arch.clone(), &mut rng).unwrap();
    let (ctx_c, ctx_t) = random_batch(&mut rng, 8, 2, 1);
    let (q_c, q_t) = random_batch(&mut rng, 8, 2, 1);
    let eta = 0.01;
    let k = 3;

    let analytic = {
        let mut u = Unroll::new(model.params.clone());
        for _ in 0..k {
            u.sgd_step(&StepScale::Fixed(eta), |tape, p| {
                mse_loss_tape(tape, &arch, p, &ctx_c, &ctx_t)
            })
            .unwrap();
        }
        let (_, g) = u
            .meta_gradient(MetaMode::FullSecondOrder, |tape, p| {
                mse_loss_tape(tape, &arch, p, &q_c, &q_t)
            })
            .unwrap();
        g
    };

    // Independent pipeline evaluation for differencing: the inner updates
    // use numeric tape gradients, the losses the straight-line path.
    let pipeline = |theta0: &Tensor| -> f64 {
        let mut theta = theta0.clone();
        for _ in 0..k {
            let mut tape = Tape::new();
            let p = tape.leaf(theta.clone());
            let loss = mse_loss_tape(&mut tape, &arch, p, &ctx_c, &ctx_t).unwrap();
            let g = tape.backward(loss, p).unwrap();
            theta.axpy(-eta, &g);
        }
        straight_line_loss(&arch, &theta, &q_c, &q_t, &[1.0; 8])
    };
    let fd = fd_gradient(pipeline, &model.params, 1e-4);
    let rel = max_rel_err(&analytic, &fd);
    CheckResult::new(
        "meta-gradient",
        rel < 1e-3,
        format!(
            "closed form exact; k=3 unroll vs finite differences: {rel:.3e} (tolerance 1e-3)"
        ),
    )
}

/// Empirical diagonal Fisher on the scalar Gaussian-mean model converges to
/// 1/σ² (within 5% at 10⁵ samples), and ½ΔᵀFΔ equals the analytic KL.
pub fn check_kl_fisher_identity(seed: u64) -> CheckResult {
    let sigma = 0.5;
    let theta = 0.3;
    let mut rng = Rng::with_stream(seed, 1003);
    let mut acc = FisherAccumulator::new(1, 1.0, 1e-12).unwrap();
    for _ in 0..100_000 {
        let x = rng.normal(theta, sigma);
        // Score of N(θ,σ²): (x − θ)/σ².
        acc.update(&Tensor::vector(vec![(x - theta) / (sigma * sigma)]));
    }
    let f_true = 1.0 / (sigma * sigma);
    let f_hat = acc.diag().data()[0];
    let rel = (f_hat - f_true).abs() / f_true;
    if rel >= 0.05 {
        return CheckResult::new(
            "kl-fisher-identity",
            false,
            format!("empirical Fisher off by {rel:.3}"),
        );
    }
    // Where the quadratic approximation is exact: the Gaussian mean family.
    let fisher = Tensor::vector(vec![f_true]);
    for delta in [-2.0, -0.5, 0.0, 0.25, 1.0, 3.0] {
        let quad = kl_quadratic_form(&Tensor::vector(vec![delta]), &fisher);
        let exact = kl_gaussian_mean(delta, sigma);
        if quad != exact {
            return CheckResult::new(
                "kl-fisher-identity",
                false,
                format!("½ΔᵀFΔ = {quad} but KL = {exact} at Δ = {delta}"),
            );
        }
    }
    CheckResult::new(
        "kl-fisher-identity",
        true,
        format!("F̂ within {rel:.4} of 1/σ²; quadratic form equals KL exactly"),
    )
}

/// 1 ≤ w ≤ 1 + λ‖g‖²/ε over random (g, F̂) pairs, and batch-mean-one
/// weights average to exactly 1.
pub fn check_weight_bound(pairs: usize, seed: u64) -> CheckResult {
    let mut rng = Rng::with_stream(seed, 1004);
    let dim = 8;
    let eps = 1e-4;
    let cfg = FimConfig {
        lambda: 0.3,
        eps,
        weight_norm: WeightNorm::None,
        ..FimConfig::default()
    };
    for i in 0..pairs {
        let g = Tensor::vector((0..dim).map(|_| rng.normal(0.0, 2.0)).collect());
        let f = Tensor::vector((0..dim).map(|_| rng.uniform(0.0, 3.0)).collect());
        let acc = FisherAccumulator::with_diag(f, eps);
        let w = weight(&acc, &g, &cfg);
        let norm2: f64 = g.data().iter().map(|v| v * v).sum();
        let upper = 1.0 + cfg.lambda * norm2 / eps;
        if !(1.0..=upper * (1.0 + 1e-12)).contains(&w) {
            return CheckResult::new(
                "weight-bound",
                false,
                format!("pair {i}: w = {w} outside [1, {upper}]"),
            );
        }
    }
    // Batch-mean-one: mean weight 1 ± 1e-12.
    let cfg_norm = FimConfig {
        weight_norm: WeightNorm::BatchMeanOne,
        ..cfg
    };
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = 32;
        let scores = Tensor::new(
            vec![m, dim],
            (0..m * dim).map(|_| rng.normal(0.0, 1.5)).collect(),
        )
        .unwrap();
        let f = Tensor::vector((0..dim).map(|_| rng.uniform(0.1, 2.0)).collect());
        let acc = FisherAccumulator::with_diag(f, eps);
        let w = weights_batch(&acc, &scores, &cfg_norm);
        let mean = w.iter().sum::<f64>() / m as f64;
        worst = worst.max((mean - 1.0).abs());
    }
    CheckResult::new(
        "weight-bound",
        worst < 1e-12,
        format!("{pairs} pairs inside the bound; normalized mean off by ≤ {worst:.2e}"),
    )
}

/// FIM-SGD on a 10-dim quadratic with condition number 100: deterministic
/// per-step contraction never beats the theorem's geometric factor, and
/// noisy runs plateau at or under the noise floor (×2 slack).
pub fn check_fim_sgd_convergence(seed: u64) -> CheckResult {
    let dim = 10;
    // Eigenvalues log-spaced in [0.1, 10]: μ = 0.1, L = 10, κ = 100.
    let (mu, lips) = (0.1f64, 10.0f64);
    let a: Vec<f64> = (0..dim)
        .map(|i| mu * (lips / mu).powf(i as f64 / (dim - 1) as f64))
        .collect();
    // Fixed diagonal Fisher with eigenvalues of F⁻¹ inside [p_min, p_max].
    let fdiag: Vec<f64> = (0..dim).map(|i| 0.8 + 0.45 * (i as f64 / 9.0)).collect();
    let fisher = Tensor::vector(fdiag.clone());
    let p_min = 1.0 / fdiag.iter().cloned().fold(f64::MIN, f64::max);
    let p_max = 1.0 / fdiag.iter().cloned().fold(f64::MAX, f64::min);

    let theta_star = Tensor::vector(vec![0.7; dim]);
    let grad_at = |theta: &Tensor| -> Tensor {
        Tensor::vector(
            theta
                .data()
                .iter()
                .zip(theta_star.data())
                .zip(&a)
                .map(|((&t, &s), &ai)| ai * (t - s))
                .collect(),
        )
    };
    let v_of = |theta: &Tensor| -> f64 {
        theta
            .data()
            .iter()
            .zip(theta_star.data())
            .map(|(&t, &s)| (t - s) * (t - s))
            .sum()
    };

    let mut rng = Rng::with_stream(seed, 1005);
    for &eta in &[2.5e-4, 5e-4, 1e-3] {
        // Admissible range from the convergence theorem: 0 < η < 2μ/(λ_max·L²).
        let admissible = 2.0 * mu / (p_max * lips * lips);
        if eta >= admissible {
            return CheckResult::new(
                "fim-sgd-convergence",
                false,
                format!("test η {eta} outside the admissible range {admissible}"),
            );
        }
        let factor = 1.0 - 2.0 * eta * p_min * mu + eta * eta * lips * lips * p_max * p_max;

        // (a) Exact gradients, 50 seeded starting points: measured per-step
        // contraction of the seed-averaged error never exceeds the factor.
        let mut thetas: Vec<Tensor> = (0..50)
            .map(|_| {
                Tensor::vector(
                    (0..dim)
                        .map(|j| theta_star.data()[j] + rng.normal(0.0, 1.0))
                        .collect(),
                )
            })
            .collect();
        for _ in 0..1500 {
            let before: f64 = thetas.iter().map(|t| v_of(t)).sum::<f64>() / 50.0;
            for t in &mut thetas {
                let g = grad_at(t);
                *t = preconditioned_update(t, &g, &fisher, 0.0, eta);
            }
            let after: f64 = thetas.iter().map(|t| v_of(t)).sum::<f64>() / 50.0;
            let ratio = after / before;
            if ratio > factor + 1e-6 {
                return CheckResult::new(
                    "fim-sgd-convergence",
                    false,
                    format!("η={eta}: contraction {ratio} exceeds factor {factor}"),
                );
            }
        }
    }

    // (b) Stochastic gradients at η = 5e-4: envelope + plateau vs the floor.
    let eta = 5e-4;
    let factor = 1.0 - 2.0 * eta * p_min * mu + eta * eta * lips * lips * p_max * p_max;
    let noise_sd = 0.05_f64; // per-component; E‖ξ‖² = dim·sd².
    let sigma2 = dim as f64 * noise_sd * noise_sd;
    let denom = 2.0 * p_min * mu - eta * lips * lips * p_max * p_max;
    let floor = eta * sigma2 * p_max * p_max / denom;
    let steps = 160_000usize;
    let tail = 20_000usize;
    let mut thetas: Vec<Tensor> = (0..50)
        .map(|_| {
            Tensor::vector(
                (0..dim)
                    .map(|j| theta_star.data()[j] + rng.normal(0.0, 1.0))
                    .collect(),
            )
        })
        .collect();
    let v0: f64 = thetas.iter().map(|t| v_of(t)).sum::<f64>() / 50.0;
    let mut envelope = v0;
    let mut tail_sum = 0.0;
    let mut tail_n = 0usize;
    for step in 0..steps {
        for t in &mut thetas {
            let mut g = grad_at(t);
            for slot in g.data_mut() {
                *slot += rng.normal(0.0, noise_sd);
            }
            *t = preconditioned_update(t, &g, &fisher, 0.0, eta);
        }
        envelope = envelope * factor + eta * eta * sigma2 * p_max * p_max;
        let v: f64 = thetas.iter().map(|t| v_of(t)).sum::<f64>() / 50.0;
        let bound = envelope.max(factor.powi(step as i32 + 1) * v0 + floor);
        if v > bound * 1.05 {
            return CheckResult::new(
                "fim-sgd-convergence",
                false,
                format!("step {step}: E‖θ−θ*‖² = {v} above envelope {bound}"),
            );
        }
        if step >= steps - tail {
            tail_sum += v;
            tail_n += 1;
        }
    }
    let plateau = tail_sum / tail_n as f64;
    let pass = plateau <= 2.0 * floor;
    CheckResult::new(
        "fim-sgd-convergence",
        pass,
        format!(
            "contraction within factor at all tested η; plateau {plateau:.3e} vs noise floor {floor:.3e} (needs ≤ 2×)"
        ),
    )
}

/// Uniform-image PSNR oracle: predicting mid-gray on U[0,1] pixels lands at
/// 10·log10(12) ≈ 10.79 dB.
pub fn check_psnr_analytic(seed: u64) -> CheckResult {
    let mut rng = Rng::with_stream(seed, 1006);
    let n = 64 * 64;
    let target = Tensor::vector((0..n).map(|_| rng.uniform(0.0, 1.0)).collect());
    let pred = Tensor::vector(vec![0.5; n]);
    let db = crate::metrics::psnr(&pred, &target).unwrap();
    let expect = 10.0 * 12f64.log10();
    let gap = (db - expect).abs();
    CheckResult::new(
        "psnr-analytic",
        gap < 0.3,
        format!("mid-gray guess on uniform noise: {db:.3} dB vs {expect:.3} dB (±0.3)"),
    )
}

/// The whole suite. `quick` trims the expensive Monte-Carlo runs.
pub fn run_all(quick: bool, seed: u64) -> Result<Vec<CheckResult>> {
    let n_models = if quick { 10 } else { 50 };
    let pairs = if quick { 10_000 } else { 100_000 };
    let mut out = vec![
        check_gradients(n_models, seed),
        check_per_sample_consistency(seed),
        check_meta_gradient(seed),
        check_kl_fisher_identity(seed),
        check_weight_bound(pairs, seed),
        check_psnr_analytic(seed),
    ];
    if !quick {
        out.push(check_fim_sgd_convergence(seed));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Activation;

    #[test]
    fn fd_gradient_on_quadratic() {
        let theta = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let g = fd_gradient(|t| t.data().iter().map(|v| v * v).sum(), &theta, 1e-6);
        for (a, b) in g.data().iter().zip(&[2.0, -4.0, 6.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn quick_suite_passes() {
        for check in run_all(true, 42).unwrap() {
            assert!(check.pass, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn gradient_check_small() {
        let r = check_gradients(6, 7);
        assert!(r.pass, "{}", r.detail);
    }

    #[test]
    fn sine_and_relu_archs_sampled() {
        let mut rng = Rng::with_stream(1, 1);
        let a = random_arch(&mut rng, true);
        let b = random_arch(&mut rng, false);
        assert!(matches!(a.activation, Activation::Sine { .. }));
        assert!(matches!(b.activation, Activation::Relu));
    }
}
