//! Fisher-information sample weighting, the FIM loss, and FIM-SGD.
//!
//! Under the unit-variance Gaussian likelihood implied by the MSE objective,
//! a sample's score is g = Jᵀ(s − ŝ) — exactly the negative gradient of its
//! half squared error. Squared scores accumulate into a diagonal empirical
//! Fisher estimate F̂, which prices each sample:
//!
//!   w = 1 + λ · Σ_p g_p² / (F̂_p + ε)
//!
//! The FIM loss is the per-sample-weighted squared error with weights held
//! constant under differentiation; FIM-SGD optionally preconditions the
//! gradient by (F̂ + ε)⁻¹.

use crate::error::{Error, Result};
use crate::field::{forward_tape, FieldArch, FieldModel};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// How F̂ aggregates squared scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FisherMode {
    /// F̂ ← ρ·F̂ + (1−ρ)·g⊙g with ρ in [0,1).
    Ema { rho: f64 },
    /// Cumulative mean of g⊙g — the consistent empirical Fisher estimator.
    Mean,
}

/// Diagonal empirical Fisher estimate with damping.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    diag: Tensor,
    mode: FisherMode,
    eps: f64,
    count: u64,
}

impl FisherAccumulator {
    /// Fresh accumulator over `n` score entries. `rho = 1` selects the
    /// cumulative-mean estimator; `rho ∈ [0,1)` the moving average.
    pub fn new(n: usize, rho: f64, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::contract(format!("fisher decay rho={rho} not in [0,1]")));
        }
        if eps < 0.0 {
            return Err(Error::contract(format!("fisher damping eps={eps} negative")));
        }
        let mode = if rho == 1.0 {
            FisherMode::Mean
        } else {
            FisherMode::Ema { rho }
        };
        Ok(FisherAccumulator {
            diag: Tensor::zeros(&[n]),
            mode,
            eps,
            count: 0,
        })
    }

    /// Accumulator with a preset diagonal (tests, EWC anchors).
    pub fn with_diag(diag: Tensor, eps: f64) -> Self {
        let count = 1;
        FisherAccumulator {
            diag,
            mode: FisherMode::Mean,
            eps,
            count,
        }
    }

    pub fn diag(&self) -> &Tensor {
        &self.diag
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Folds one score into F̂.
    pub fn update(&mut self, g: &Tensor) {
        debug_assert_eq!(g.len(), self.diag.len(), "score length");
        self.count += 1;
        match self.mode {
            FisherMode::Ema { rho } => {
                for (f, &gi) in self.diag.data_mut().iter_mut().zip(g.data()) {
                    *f = rho * *f + (1.0 - rho) * gi * gi;
                }
            }
            FisherMode::Mean => {
                let c = self.count as f64;
                for (f, &gi) in self.diag.data_mut().iter_mut().zip(g.data()) {
                    *f += (gi * gi - *f) / c;
                }
            }
        }
    }

    /// Count-weighted merge of two shards (exact for mean mode,
    /// count-proportional for EMA).
    pub fn merge(&mut self, other: &FisherAccumulator) {
        debug_assert_eq!(self.diag.len(), other.diag.len());
        let total = self.count + other.count;
        if total == 0 {
            return;
        }
        let wa = self.count as f64 / total as f64;
        let wb = other.count as f64 / total as f64;
        for (f, &g) in self.diag.data_mut().iter_mut().zip(other.diag.data()) {
            *f = wa * *f + wb * g;
        }
        self.count = total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightNorm {
    None,
    /// Rescale a batch's weights to mean exactly 1.
    BatchMeanOne,
}

/// Which parameters the score covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreScope {
    FullParams,
    /// Final linear layer only: g is (h ⊗ r, r), no backward pass needed.
    LastLayer,
}

#[derive(Debug, Clone)]
pub struct FimConfig {
    /// Fisher weight strength λ ≥ 0; 0 reduces the loss to plain MSE.
    pub lambda: f64,
    /// Decay for the per-task Fisher EMA (1 = cumulative mean).
    pub rho: f64,
    /// Damping ε added to F̂ before inverting.
    pub eps: f64,
    pub weight_norm: WeightNorm,
    pub scope: ScoreScope,
    /// Precondition updates by (F̂+ε)⁻¹ (diagonal FIM-SGD); plain SGD when off.
    pub precondition: bool,
    /// Carry F̂ across tasks instead of reinitializing per task.
    pub carry_fisher: bool,
    /// Apply FIM weights in the outer (query) loss as well.
    pub outer_weighted: bool,
}

impl Default for FimConfig {
    fn default() -> Self {
        FimConfig {
            lambda: 0.1,
            rho: 0.99,
            eps: 1e-8,
            weight_norm: WeightNorm::BatchMeanOne,
            scope: ScoreScope::LastLayer,
            precondition: false,
            carry_fisher: false,
            outer_weighted: true,
        }
    }
}

impl FimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::contract(format!("lambda={} negative", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::contract(format!("rho={} not in [0,1]", self.rho)));
        }
        if self.eps <= 0.0 && self.lambda > 0.0 {
            return Err(Error::contract("damping eps must be > 0".to_string()));
        }
        Ok(())
    }

    /// Scored parameter count for a given architecture.
    pub fn scope_len(&self, arch: &FieldArch) -> usize {
        match self.scope {
            ScoreScope::FullParams => arch.param_count(),
            ScoreScope::LastLayer => arch.last_layer_span().len(),
        }
    }

    pub fn fresh_fisher(&self, arch: &FieldArch) -> Result<FisherAccumulator> {
        FisherAccumulator::new(self.scope_len(arch), self.rho, self.eps)
    }
}

// ── scores ──────────────────────────────────────────────────────────────

/// Score of a single sample: ∇_θ log p(s | f_θ(x)) = Jᵀ(s − ŝ), restricted
/// to `scope`. Targets are in model space.
pub fn score(
    model: &FieldModel,
    coord: &[f64],
    target: &[f64],
    scope: ScoreScope,
) -> Result<Tensor> {
    let coords = Tensor::new(vec![1, coord.len()], coord.to_vec())?;
    let targets = Tensor::new(vec![1, target.len()], target.to_vec())?;
    let all = scores_batch(model, &coords, &targets, scope)?;
    Ok(Tensor::vector(all.row(0).to_vec()))
}

/// Per-sample scores, one row each.
pub fn scores_batch(
    model: &FieldModel,
    coords: &Tensor,
    targets: &Tensor,
    scope: ScoreScope,
) -> Result<Tensor> {
    let m = coords.rows();
    match scope {
        ScoreScope::LastLayer => {
            let (pred, hidden) = model.predict_hidden(coords);
            let layout = model.arch.param_layout();
            let last = layout.last().expect("n_layers >= 1");
            let (hin, hout) = (last.in_dim, last.out_dim);
            let has_bias = last.b.is_some();
            let width = hin * hout + if has_bias { hout } else { 0 };
            let mut data = Vec::with_capacity(m * width);
            for b in 0..m {
                let h = hidden.row(b);
                let r: Vec<f64> = targets
                    .row(b)
                    .iter()
                    .zip(pred.row(b))
                    .map(|(&s, &p)| s - p)
                    .collect();
                // dŝ_j/dW_ij = h_i, so g_W = h ⊗ r; g_b = r.
                for &hi in h {
                    for &rj in &r {
                        data.push(hi * rj);
                    }
                }
                if has_bias {
                    data.extend_from_slice(&r);
                }
            }
            Tensor::new(vec![m, width], data)
        }
        ScoreScope::FullParams => {
            // One backward pass per sample: g = −∇θ(½‖ŝ−s‖²).
            let mut tape = Tape::new();
            let p = tape.leaf(model.params.clone());
            let out = forward_tape(&mut tape, &model.arch, p, coords)?;
            let t = tape.constant(targets.clone());
            let r = tape.sub(out, t);
            let sq = tape.mul(r, r);
            let rows = tape.row_sum(sq);
            let losses: Vec<NodeId> = (0..m)
                .map(|b| {
                    let e = tape.index(rows, b);
                    tape.scale(e, 0.5)
                })
                .collect();
            let grads = tape.per_sample_grads(&losses, p)?;
            Ok(grads.neg())
        }
    }
}

// ── weights ─────────────────────────────────────────────────────────────

/// w = 1 + λ · Σ_p g_p² / (F̂_p + ε). Damping keeps the quotient finite.
pub fn weight(acc: &FisherAccumulator, g: &Tensor, cfg: &FimConfig) -> f64 {
    if cfg.lambda == 0.0 {
        return 1.0;
    }
    debug_assert_eq!(g.len(), acc.len(), "score/fisher length");
    let quad: f64 = g
        .data()
        .iter()
        .zip(acc.diag().data())
        .map(|(&gi, &fi)| gi * gi / (fi + acc.eps()))
        .sum();
    1.0 + cfg.lambda * quad
}

/// Per-sample weights for a batch of scores, normalized per config.
pub fn weights_batch(acc: &FisherAccumulator, scores: &Tensor, cfg: &FimConfig) -> Vec<f64> {
    let m = scores.rows();
    let mut w: Vec<f64> = (0..m)
        .map(|b| {
            let g = Tensor::vector(scores.row(b).to_vec());
            weight(acc, &g, cfg)
        })
        .collect();
    if cfg.weight_norm == WeightNorm::BatchMeanOne {
        let sum: f64 = w.iter().sum();
        if sum > 0.0 {
            let scale = m as f64 / sum;
            for wi in &mut w {
                *wi *= scale;
            }
        }
    }
    w
}

// ── loss ────────────────────────────────────────────────────────────────

/// FIM loss value on a batch: (1/m)·Σ_j w_j·‖ŝ_j − s_j‖², plus the weights
/// used. Weights derive from the *current* F̂ and are constants w.r.t. θ.
pub fn fim_loss(
    model: &FieldModel,
    coords: &Tensor,
    targets: &Tensor,
    acc: &FisherAccumulator,
    cfg: &FimConfig,
) -> Result<(f64, Vec<f64>)> {
    let scores = scores_batch(model, coords, targets, cfg.scope)?;
    let w = weights_batch(acc, &scores, cfg);
    let pred = model.predict(coords);
    let m = coords.rows();
    let mut loss = 0.0;
    for b in 0..m {
        let sq: f64 = pred
            .row(b)
            .iter()
            .zip(targets.row(b))
            .map(|(&p, &s)| (p - s) * (p - s))
            .sum();
        loss += w[b] * sq;
    }
    Ok((loss / m as f64, w))
}

/// Records the weighted loss (1/m)·Σ_j w_j·‖ŝ_j − s_j‖² on a tape; the
/// weights enter as constants (stop-gradient).
pub fn fim_loss_tape(
    tape: &mut Tape,
    arch: &FieldArch,
    params: NodeId,
    coords: &Tensor,
    targets: &Tensor,
    weights: &[f64],
) -> Result<NodeId> {
    let m = coords.rows();
    debug_assert_eq!(weights.len(), m, "one weight per sample");
    let out = forward_tape(tape, arch, params, coords)?;
    let t = tape.constant(targets.clone());
    let r = tape.sub(out, t);
    let sq = tape.mul(r, r);
    let rows = tape.row_sum(sq);
    let w = tape.constant(Tensor::vector(weights.to_vec()));
    let weighted = tape.mul(rows, w);
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, 1.0 / m as f64))
}

/// Plain MSE loss node: (1/m)·Σ_j ‖ŝ_j − s_j‖² (all weights one).
pub fn mse_loss_tape(
    tape: &mut Tape,
    arch: &FieldArch,
    params: NodeId,
    coords: &Tensor,
    targets: &Tensor,
) -> Result<NodeId> {
    let m = coords.rows();
    let out = forward_tape(tape, arch, params, coords)?;
    let t = tape.constant(targets.clone());
    let r = tape.sub(out, t);
    let sq = tape.mul(r, r);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / m as f64))
}

// ── updates ─────────────────────────────────────────────────────────────

/// θ′ = θ − η·g ⊘ (F̂ + ε): one diagonally preconditioned step.
pub fn preconditioned_update(
    theta: &Tensor,
    grad: &Tensor,
    fisher_diag: &Tensor,
    eps: f64,
    eta: f64,
) -> Tensor {
    debug_assert_eq!(theta.len(), grad.len());
    debug_assert_eq!(theta.len(), fisher_diag.len());
    let data = theta
        .data()
        .iter()
        .zip(grad.data().iter().zip(fisher_diag.data()))
        .map(|(&t, (&g, &f))| t - eta * g / (f + eps))
        .collect();
    Tensor::new(theta.shape().to_vec(), data).unwrap()
}

/// Per-parameter step sizes for one update: η everywhere, with the scored
/// block divided by (F̂+ε) when preconditioning is on.
pub fn step_scale_vector(
    arch: &FieldArch,
    acc: &FisherAccumulator,
    cfg: &FimConfig,
    eta: f64,
) -> Tensor {
    let n = arch.param_count();
    let mut scale = vec![eta; n];
    if cfg.precondition {
        let span = match cfg.scope {
            ScoreScope::FullParams => 0..n,
            ScoreScope::LastLayer => arch.last_layer_span(),
        };
        for (slot, &f) in scale[span].iter_mut().zip(acc.diag().data()) {
            *slot = eta / (f + acc.eps());
        }
    }
    Tensor::vector(scale)
}

/// Report of one adaptation step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub loss: f64,
    pub w_min: f64,
    pub w_mean: f64,
    pub w_max: f64,
}

/// Folds a batch of scores into a still-empty accumulator so first-step
/// weights divide by an estimate of g² instead of the bare damping.
pub fn warm_init_fisher(acc: &mut FisherAccumulator, scores: &Tensor) {
    if acc.count() == 0 {
        for b in 0..scores.rows() {
            acc.update(&Tensor::vector(scores.row(b).to_vec()));
        }
    }
}

/// One FIM-SGD step on a batch: compute weights from the current F̂, take the
/// (optionally preconditioned) gradient step, then fold the batch's scores
/// into F̂. An empty accumulator is warm-initialized from the first batch.
/// Returns the updated model; a non-finite update rejects the step.
pub fn fim_sgd_step(
    model: &FieldModel,
    coords: &Tensor,
    targets: &Tensor,
    acc: &mut FisherAccumulator,
    cfg: &FimConfig,
    eta: f64,
) -> Result<(FieldModel, StepReport)> {
    if eta <= 0.0 {
        return Err(Error::contract(format!("learning rate {eta} must be > 0")));
    }
    let scores = scores_batch(model, coords, targets, cfg.scope)?;
    warm_init_fisher(acc, &scores);
    let w = weights_batch(acc, &scores, cfg);
    let mut tape = Tape::new();
    let p = tape.leaf(model.params.clone());
    let loss = fim_loss_tape(&mut tape, &model.arch, p, coords, targets, &w)?;
    let loss_value = tape.value(loss).item();
    let grad = tape.backward(loss, p)?;
    let scale = step_scale_vector(&model.arch, acc, cfg, eta);
    let mut params = model.params.clone();
    for ((t, &g), &s) in params
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(scale.data())
    {
        *t -= s * g;
    }
    if !params.all_finite() {
        return Err(Error::Numeric {
            op: "fim_sgd_step",
            node: 0,
        });
    }
    for b in 0..scores.rows() {
        acc.update(&Tensor::vector(scores.row(b).to_vec()));
    }
    let report = StepReport {
        loss: loss_value,
        w_min: w.iter().copied().fold(f64::INFINITY, f64::min),
        w_mean: w.iter().sum::<f64>() / w.len() as f64,
        w_max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok((FieldModel::new(model.arch.clone(), params)?, report))
}

// ── KL / Fisher identities ──────────────────────────────────────────────

/// KL(N(θ,σ²) ‖ N(θ+Δ,σ²)) = Δ²/(2σ²) — exact for the Gaussian mean model.
pub fn kl_gaussian_mean(delta: f64, sigma: f64) -> f64 {
    delta * delta / (2.0 * sigma * sigma)
}

/// The quadratic form ½·ΔᵀF̂Δ for diagonal F̂.
pub fn kl_quadratic_form(delta: &Tensor, fisher_diag: &Tensor) -> f64 {
    debug_assert_eq!(delta.len(), fisher_diag.len());
    0.5 * delta
        .data()
        .iter()
        .zip(fisher_diag.data())
        .map(|(&d, &f)| d * f * d)
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldArch;
    use crate::rng::Rng;

    fn small_model(seed: u64) -> FieldModel {
        let arch = FieldArch::sine(3, 6, 2, 2);
        FieldModel::init(arch, &mut Rng::with_stream(seed, 0)).unwrap()
    }

    fn rand_batch(rng: &mut Rng, m: usize, d: usize, c: usize) -> (Tensor, Tensor) {
        let coords = Tensor::new(
            vec![m, d],
            (0..m * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let targets = Tensor::new(
            vec![m, c],
            (0..m * c).map(|_| rng.uniform(-0.5, 0.5)).collect(),
        )
        .unwrap();
        (coords, targets)
    }

    #[test]
    fn score_zero_residual_is_zero() {
        let model = small_model(1);
        let coords = Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let pred = model.predict(&coords);
        for scope in [ScoreScope::FullParams, ScoreScope::LastLayer] {
            let g = score(&model, &[0.3, -0.2], pred.row(0), scope).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn score_scalar_linear_closed_form() {
        // ŝ = θ·x (single linear layer, no bias): g = x(s − θx).
        let mut arch = FieldArch::sine(1, 0, 1, 1);
        arch.bias = false;
        let theta = 0.7;
        let model = FieldModel::new(arch, Tensor::vector(vec![theta])).unwrap();
        let (x, s) = (0.4, 1.1);
        let g = score(&model, &[x], &[s], ScoreScope::FullParams).unwrap();
        assert!((g.data()[0] - x * (s - theta * x)).abs() < 1e-15);
    }

    #[test]
    fn score_equals_negative_mse_gradient() {
        let model = small_model(2);
        let mut rng = Rng::with_stream(3, 1);
        let (coords, targets) = rand_batch(&mut rng, 4, 2, 2);
        let full = scores_batch(&model, &coords, &targets, ScoreScope::FullParams).unwrap();
        // Independent route: tape gradient of ½‖ŝ−s‖² per sample.
        let mut tape = Tape::new();
        let p = tape.leaf(model.params.clone());
        let out = forward_tape(&mut tape, &model.arch, p, &coords).unwrap();
        let t = tape.constant(targets.clone());
        let r = tape.sub(out, t);
        let sq = tape.mul(r, r);
        let rows = tape.row_sum(sq);
        for b in 0..4 {
            let e = tape.index(rows, b);
            let half = tape.scale(e, 0.5);
            let grad = tape.backward(half, p).unwrap();
            for (gs, gg) in full.row(b).iter().zip(grad.data()) {
                assert!((gs + gg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn last_layer_score_matches_full_scope_block() {
        let model = small_model(4);
        let mut rng = Rng::with_stream(5, 1);
        let (coords, targets) = rand_batch(&mut rng, 3, 2, 2);
        let full = scores_batch(&model, &coords, &targets, ScoreScope::FullParams).unwrap();
        let last = scores_batch(&model, &coords, &targets, ScoreScope::LastLayer).unwrap();
        let span = model.arch.last_layer_span();
        for b in 0..3 {
            let block = &full.row(b)[span.clone()];
            for (a, e) in last.row(b).iter().zip(block) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fisher_rho_zero_is_last_square() {
        let mut acc = FisherAccumulator::new(3, 0.0, 1e-8).unwrap();
        acc.update(&Tensor::vector(vec![1.0, -2.0, 3.0]));
        assert_eq!(acc.diag().data(), &[1.0, 4.0, 9.0]);
        acc.update(&Tensor::vector(vec![0.5, 0.5, 0.5]));
        assert_eq!(acc.diag().data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn fisher_decays_toward_zero_on_zero_scores() {
        let mut acc = FisherAccumulator::new(1, 0.5, 1e-8).unwrap();
        acc.update(&Tensor::vector(vec![2.0]));
        let start = acc.diag().data()[0];
        for _ in 0..20 {
            acc.update(&Tensor::vector(vec![0.0]));
        }
        assert!(acc.diag().data()[0] < start * 1e-5);
    }

    #[test]
    fn fisher_ema_monte_carlo_matches_variance() {
        // i.i.d. g ~ N(0, σ²I), 10⁴ updates, ρ = 0.99 → entries near σ².
        let sigma = 0.8;
        let mut acc = FisherAccumulator::new(4, 0.99, 1e-8).unwrap();
        let mut rng = Rng::with_stream(2024, 7);
        for _ in 0..10_000 {
            let g = Tensor::vector((0..4).map(|_| rng.normal(0.0, sigma)).collect());
            acc.update(&g);
        }
        for &f in acc.diag().data() {
            let rel = (f - sigma * sigma).abs() / (sigma * sigma);
            assert!(rel < 0.10, "EMA Fisher off by {rel:.3}");
        }
    }

    #[test]
    fn fisher_mean_mode_is_consistent() {
        let sigma = 2.0;
        let mut acc = FisherAccumulator::new(2, 1.0, 1e-8).unwrap();
        let mut rng = Rng::with_stream(11, 0);
        for _ in 0..100_000 {
            let g = Tensor::vector(vec![rng.normal(0.0, sigma), rng.normal(0.0, sigma)]);
            acc.update(&g);
        }
        for &f in acc.diag().data() {
            assert!((f - 4.0).abs() / 4.0 < 0.02);
        }
    }

    #[test]
    fn merge_is_count_weighted() {
        let mut a = FisherAccumulator::new(1, 1.0, 1e-8).unwrap();
        let mut b = FisherAccumulator::new(1, 1.0, 1e-8).unwrap();
        a.update(&Tensor::vector(vec![2.0])); // mean 4, count 1
        for _ in 0..3 {
            b.update(&Tensor::vector(vec![4.0])); // mean 16, count 3
        }
        a.merge(&b);
        assert_eq!(a.count(), 4);
        assert!((a.diag().data()[0] - (4.0 + 3.0 * 16.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn weight_reductions() {
        let acc = FisherAccumulator::with_diag(Tensor::vector(vec![1.0, 1.0]), 1e-12);
        let mut cfg = FimConfig::default();
        cfg.lambda = 0.0;
        assert_eq!(weight(&acc, &Tensor::vector(vec![3.0, 4.0]), &cfg), 1.0);
        cfg.lambda = 0.5;
        assert_eq!(weight(&acc, &Tensor::vector(vec![0.0, 0.0]), &cfg), 1.0);
        // ‖g‖² = 2 against F̂ = I: w = 1 + 0.5·2 = 2 (up to the tiny damping).
        let w = weight(&acc, &Tensor::vector(vec![1.0, 1.0]), &cfg);
        assert!((w - 2.0).abs() < 1e-9);
    }

    #[test]
    fn weight_bound_holds() {
        let mut rng = Rng::with_stream(17, 0);
        let cfg = FimConfig {
            lambda: 0.3,
            ..FimConfig::default()
        };
        for _ in 0..1000 {
            let g = Tensor::vector((0..5).map(|_| rng.normal(0.0, 2.0)).collect());
            let f = Tensor::vector((0..5).map(|_| rng.uniform(0.0, 3.0)).collect());
            let acc = FisherAccumulator::with_diag(f, 1e-4);
            let w = weight(&acc, &g, &cfg);
            let norm2: f64 = g.data().iter().map(|v| v * v).sum();
            assert!(w >= 1.0);
            assert!(w <= 1.0 + cfg.lambda * norm2 / 1e-4 + 1e-9);
        }
    }

    #[test]
    fn weight_monotone_in_lambda_and_score_norm() {
        let acc = FisherAccumulator::with_diag(Tensor::vector(vec![0.5, 2.0]), 1e-6);
        let g = Tensor::vector(vec![0.3, -0.4]);
        let mk = |l: f64| FimConfig {
            lambda: l,
            ..FimConfig::default()
        };
        assert!(weight(&acc, &g, &mk(0.2)) < weight(&acc, &g, &mk(0.4)));
        let g2 = g.scale(2.0);
        assert!(weight(&acc, &g, &mk(0.2)) < weight(&acc, &g2, &mk(0.2)));
    }

    #[test]
    fn batch_mean_one_normalization() {
        let model = small_model(6);
        let mut rng = Rng::with_stream(8, 2);
        let (coords, targets) = rand_batch(&mut rng, 16, 2, 2);
        let scores = scores_batch(&model, &coords, &targets, ScoreScope::LastLayer).unwrap();
        let mut acc = FisherAccumulator::new(scores.cols(), 0.9, 1e-8).unwrap();
        for b in 0..scores.rows() {
            acc.update(&Tensor::vector(scores.row(b).to_vec()));
        }
        let cfg = FimConfig {
            weight_norm: WeightNorm::BatchMeanOne,
            lambda: 0.5,
            ..FimConfig::default()
        };
        let w = weights_batch(&acc, &scores, &cfg);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fim_loss_lambda_zero_is_mse() {
        let model = small_model(7);
        let mut rng = Rng::with_stream(9, 2);
        let (coords, targets) = rand_batch(&mut rng, 8, 2, 2);
        let acc = FisherAccumulator::new(
            FimConfig::default().scope_len(&model.arch),
            0.99,
            1e-8,
        )
        .unwrap();
        let cfg = FimConfig {
            lambda: 0.0,
            ..FimConfig::default()
        };
        let (loss, w) = fim_loss(&model, &coords, &targets, &acc, &cfg).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
        let pred = model.predict(&coords);
        let mse: f64 = pred
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &s)| (p - s) * (p - s))
            .sum::<f64>()
            / 8.0;
        assert!((loss - mse).abs() < 1e-15);
    }

    #[test]
    fn uniform_weights_scale_the_unweighted_loss() {
        let model = small_model(7);
        let mut rng = Rng::with_stream(10, 2);
        let (coords, targets) = rand_batch(&mut rng, 4, 2, 2);
        let mut tape = Tape::new();
        let p = tape.leaf(model.params.clone());
        let weighted =
            fim_loss_tape(&mut tape, &model.arch, p, &coords, &targets, &[3.0; 4]).unwrap();
        let unit =
            fim_loss_tape(&mut tape, &model.arch, p, &coords, &targets, &[1.0; 4]).unwrap();
        let lw = tape.value(weighted).item();
        let lu = tape.value(unit).item();
        assert!((lw - 3.0 * lu).abs() < 1e-15 * lw.abs().max(1.0));
    }

    #[test]
    fn zero_residual_samples_contribute_nothing() {
        let model = small_model(3);
        let coords = Tensor::new(vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let pred = model.predict(&coords);
        // First sample's target equals the prediction; second is off.
        let mut t = pred.data().to_vec();
        t[2] += 1.0;
        t[3] -= 0.5;
        let targets = Tensor::new(vec![2, 2], t).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(model.params.clone());
        let huge_w =
            fim_loss_tape(&mut tape, &model.arch, p, &coords, &targets, &[1e6, 1.0]).unwrap();
        let unit_w =
            fim_loss_tape(&mut tape, &model.arch, p, &coords, &targets, &[1.0, 1.0]).unwrap();
        assert_eq!(tape.value(huge_w).item(), tape.value(unit_w).item());
    }

    #[test]
    fn identity_preconditioner_is_plain_sgd() {
        // F̂ + ε = 1 exactly (0.5 + 0.5), so the preconditioned step must be
        // bitwise identical to the plain step.
        let model = small_model(12);
        let mut rng = Rng::with_stream(13, 3);
        let (coords, targets) = rand_batch(&mut rng, 8, 2, 2);
        let eta = 0.05;

        let n = FimConfig::default().scope_len(&model.arch);
        let mut acc_pre = FisherAccumulator::with_diag(Tensor::full(&[n], 0.5), 0.5);
        let cfg_pre = FimConfig {
            lambda: 0.0,
            precondition: true,
            ..FimConfig::default()
        };
        let (pre, _) =
            fim_sgd_step(&model, &coords, &targets, &mut acc_pre, &cfg_pre, eta).unwrap();

        let mut acc_plain = FisherAccumulator::new(n, 0.99, 1e-8).unwrap();
        let cfg_plain = FimConfig {
            lambda: 0.0,
            precondition: false,
            ..FimConfig::default()
        };
        let (plain, _) =
            fim_sgd_step(&model, &coords, &targets, &mut acc_plain, &cfg_plain, eta).unwrap();

        assert_eq!(pre.params.data(), plain.params.data());
    }

    #[test]
    fn one_dim_quadratic_preconditioned_contraction() {
        // L = ½μθ², F̂ = μ, ε = 0 → θ′ = (1−η)θ.
        let mu = 4.0;
        let eta = 0.3;
        let theta = Tensor::vector(vec![2.0]);
        let grad = theta.scale(mu);
        let next = preconditioned_update(&theta, &grad, &Tensor::vector(vec![mu]), 0.0, eta);
        assert!((next.data()[0] - (1.0 - eta) * 2.0).abs() < 1e-15);
    }

    #[test]
    fn kl_identity_exact_for_gaussian_mean() {
        for sigma in [1.0, 0.5, 2.0] {
            let fisher = Tensor::vector(vec![1.0 / (sigma * sigma)]);
            for delta in [-1.5, -0.25, 0.0, 0.5, 2.0] {
                let lhs = kl_quadratic_form(&Tensor::vector(vec![delta]), &fisher);
                let rhs = kl_gaussian_mean(delta, sigma);
                assert_eq!(lhs, rhs);
            }
        }
    }
}
