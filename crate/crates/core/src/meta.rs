//! Episode engine: inner task-sequential adaptation, outer meta-update of
//! the shared initialization, and test-time optimization.
//!
//! One episode instantiates a modular field from θ_shared, adapts each
//! task's module on that task's context only (tasks strictly in order,
//! earlier contexts never revisited), then scores every task's query at its
//! adapted parameters. The per-task outer gradients — first-order at the
//! adapted parameters, or exact through the unrolled inner loop — are
//! averaged into one update of θ_shared.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::field::FieldModel;
use crate::fisher::{
    fim_loss_tape, fim_sgd_step, scores_batch, step_scale_vector, warm_init_fisher,
    weights_batch, FimConfig, FisherAccumulator, StepReport,
};
use crate::metrics::psnr_in_range;
use crate::modular::{compose_predict, instantiate, ModularField, SharedInit};
use crate::rng::Rng;
use crate::task::{
    split_resolution, split_spatial, split_temporal, Episode, QueryMode, SampleSet, Signal,
    SignalMeta, TaskSource,
};
use crate::tensor::Tensor;
use crate::unroll::{MetaMode, StepScale, Unroll};

/// Everything the meta-learner carries between outer steps.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub shared: SharedInit,
    pub outer_step: u64,
    pub eta_inner: f64,
    pub eta_outer: f64,
    pub inner_steps: usize,
    pub fim: FimConfig,
    pub mode: MetaMode,
}

impl MetaState {
    pub fn new(
        shared: SharedInit,
        eta_inner: f64,
        eta_outer: f64,
        inner_steps: usize,
        fim: FimConfig,
        mode: MetaMode,
    ) -> Result<Self> {
        if eta_inner <= 0.0 || eta_outer <= 0.0 {
            return Err(Error::contract("learning rates must be > 0".to_string()));
        }
        if inner_steps < 1 {
            return Err(Error::contract("inner_steps must be >= 1".to_string()));
        }
        fim.validate()?;
        Ok(MetaState {
            shared,
            outer_step: 0,
            eta_inner,
            eta_outer,
            inner_steps,
            fim,
            mode,
        })
    }
}

/// Per-task record of one adapted episode.
#[derive(Debug, Clone, Copy)]
pub struct TaskOutcome {
    pub final_inner_loss: f64,
    pub w_min: f64,
    pub w_mean: f64,
    pub w_max: f64,
    pub outer_loss: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub adapted: ModularField,
    pub per_task: Vec<TaskOutcome>,
    pub outer_loss: f64,
    /// Mean over tasks of the per-task meta-gradient w.r.t. θ_shared
    /// (present when the episode was run for meta-training).
    pub meta_grad: Option<Tensor>,
}

/// Targets shifted into model space (centered on the value-range midpoint).
fn centered(targets: &Tensor, mid: f64) -> Tensor {
    if mid == 0.0 {
        targets.clone()
    } else {
        targets.map(|v| v - mid)
    }
}

/// Query weights for the outer loss: FIM weights from the task's Fisher
/// when configured, otherwise all ones.
fn outer_weights(
    model: &FieldModel,
    coords: &Tensor,
    targets: &Tensor,
    acc: &FisherAccumulator,
    fim: &FimConfig,
) -> Result<Vec<f64>> {
    if fim.outer_weighted && fim.lambda > 0.0 {
        let scores = scores_batch(model, coords, targets, fim.scope)?;
        Ok(weights_batch(acc, &scores, fim))
    } else {
        Ok(vec![1.0; coords.rows()])
    }
}

fn fold_reports(reports: &[StepReport]) -> (f64, f64, f64, f64) {
    let last_loss = reports.last().map(|r| r.loss).unwrap_or(0.0);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for r in reports {
        min = min.min(r.w_min);
        max = max.max(r.w_max);
        sum += r.w_mean;
    }
    if reports.is_empty() {
        (last_loss, 1.0, 1.0, 1.0)
    } else {
        (last_loss, min, sum / reports.len() as f64, max)
    }
}

/// Runs the inner loop over the episode's tasks, strictly in order. Each
/// task adapts its own module from θ_shared for `inner_steps` FIM-SGD steps
/// on its context; earlier contexts are never handed back out. With
/// `want_meta_grad`, per-task query losses and gradients are collected and
/// reduced (by averaging) into one meta-gradient for θ_shared.
pub fn inner_adapt<S: TaskSource>(
    state: &MetaState,
    source: &S,
    want_meta_grad: bool,
) -> Result<EpisodeResult> {
    let meta = source.meta().clone();
    let regions = source.regions();
    let mut field = instantiate(&state.shared, &regions, &meta.dims)?;
    let arch = state.shared.arch.clone();
    let mid = meta.mid();
    let second_order = want_meta_grad && state.mode == MetaMode::FullSecondOrder;

    let mut per_task = Vec::with_capacity(source.n_tasks());
    let mut grad_sum: Option<Tensor> = None;
    let mut carried: Option<FisherAccumulator> = None;

    for i in 0..source.n_tasks() {
        let view = source.task(i);
        if view.context.is_empty() {
            return Err(Error::contract(format!("task {i} has an empty context")));
        }
        let ctx_coords = view.context.coords.clone();
        let ctx_targets = centered(&view.context.targets, mid);
        let mut acc = match (state.fim.carry_fisher, carried.take()) {
            (true, Some(a)) => a,
            _ => state.fim.fresh_fisher(&arch)?,
        };

        let mut reports = Vec::with_capacity(state.inner_steps);
        let mut task_grad: Option<Tensor> = None;
        let mut outer_loss_val = 0.0;

        if second_order {
            let mut unroll = Unroll::new(state.shared.params.clone());
            for _ in 0..state.inner_steps {
                let model = FieldModel::new(arch.clone(), unroll.theta().clone())?;
                let scores = scores_batch(&model, &ctx_coords, &ctx_targets, state.fim.scope)?;
                warm_init_fisher(&mut acc, &scores);
                let w = weights_batch(&acc, &scores, &state.fim);
                let scale = if state.fim.precondition {
                    StepScale::PerParam(step_scale_vector(
                        &arch,
                        &acc,
                        &state.fim,
                        state.eta_inner,
                    ))
                } else {
                    StepScale::Fixed(state.eta_inner)
                };
                let loss = unroll.sgd_step(&scale, |tape, theta| {
                    fim_loss_tape(tape, &arch, theta, &ctx_coords, &ctx_targets, &w)
                })?;
                for b in 0..scores.rows() {
                    acc.update(&Tensor::vector(scores.row(b).to_vec()));
                }
                reports.push(StepReport {
                    loss,
                    w_min: w.iter().copied().fold(f64::INFINITY, f64::min),
                    w_mean: w.iter().sum::<f64>() / w.len() as f64,
                    w_max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
            let adapted = FieldModel::new(arch.clone(), unroll.theta().clone())?;
            if view.query.is_empty() {
                return Err(Error::contract(format!(
                    "task {i} has an empty query set; meta-training needs one"
                )));
            }
            let q_coords = view.query.coords.clone();
            let q_targets = centered(&view.query.targets, mid);
            let qw = outer_weights(&adapted, &q_coords, &q_targets, &acc, &state.fim)?;
            let (outer_value, grad) = unroll.meta_gradient(MetaMode::FullSecondOrder, {
                let arch = arch.clone();
                move |tape, theta| fim_loss_tape(tape, &arch, theta, &q_coords, &q_targets, &qw)
            })?;
            outer_loss_val = outer_value;
            task_grad = Some(grad);
            field.modules[i] = adapted;
        } else {
            let mut model = field.modules[i].clone();
            for _ in 0..state.inner_steps {
                let (next, report) = fim_sgd_step(
                    &model,
                    &ctx_coords,
                    &ctx_targets,
                    &mut acc,
                    &state.fim,
                    state.eta_inner,
                )?;
                model = next;
                reports.push(report);
            }
            if want_meta_grad {
                if view.query.is_empty() {
                    return Err(Error::contract(format!(
                        "task {i} has an empty query set; meta-training needs one"
                    )));
                }
                let q_coords = view.query.coords.clone();
                let q_targets = centered(&view.query.targets, mid);
                let qw = outer_weights(&model, &q_coords, &q_targets, &acc, &state.fim)?;
                let mut tape = crate::tape::Tape::new();
                let p = tape.leaf(model.params.clone());
                let loss = fim_loss_tape(&mut tape, &arch, p, &q_coords, &q_targets, &qw)?;
                outer_loss_val = tape.value(loss).item();
                task_grad = Some(tape.backward(loss, p)?);
            } else if !view.query.is_empty() {
                let q_coords = view.query.coords.clone();
                let q_targets = centered(&view.query.targets, mid);
                let (l, _) =
                    crate::fisher::fim_loss(&model, &q_coords, &q_targets, &acc, &state.fim)?;
                outer_loss_val = l;
            }
            field.modules[i] = model;
        }

        if state.fim.carry_fisher {
            carried = Some(acc);
        }
        let (final_inner_loss, w_min, w_mean, w_max) = fold_reports(&reports);
        per_task.push(TaskOutcome {
            final_inner_loss,
            w_min,
            w_mean,
            w_max,
            outer_loss: outer_loss_val,
        });
        if let Some(g) = task_grad {
            match &mut grad_sum {
                Some(total) => total.axpy(1.0, &g),
                None => grad_sum = Some(g),
            }
        }
    }

    let t = source.n_tasks() as f64;
    let outer_loss = per_task.iter().map(|o| o.outer_loss).sum::<f64>() / t;
    if !outer_loss.is_finite() {
        return Err(Error::Numeric {
            op: "inner_adapt outer loss",
            node: 0,
        });
    }
    let meta_grad = grad_sum.map(|g| g.scale(1.0 / t));
    Ok(EpisodeResult {
        adapted: field,
        per_task,
        outer_loss,
        meta_grad,
    })
}

/// Averages episode meta-gradients and takes one outer SGD step on
/// θ_shared. A non-finite gradient skips the update (logged), leaving the
/// initialization unchanged.
pub fn outer_update(state: &MetaState, results: &[EpisodeResult]) -> Result<MetaState> {
    if results.is_empty() {
        return Err(Error::contract("outer_update needs at least one episode".to_string()));
    }
    let n = state.shared.params.len();
    let mut mean = Tensor::zeros(&[n]);
    for r in results {
        let g = r.meta_grad.as_ref().ok_or_else(|| {
            Error::contract("episode result carries no meta-gradient".to_string())
        })?;
        mean.axpy(1.0 / results.len() as f64, g);
    }
    let mut next = state.clone();
    next.outer_step += 1;
    if !mean.all_finite() {
        eprintln!(
            "outer step {}: non-finite meta-gradient, update skipped",
            state.outer_step
        );
        return Ok(next);
    }
    next.shared.params.axpy(-state.eta_outer, &mean);
    Ok(next)
}

// ── evaluation traces ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub step: u64,
    pub psnr: f64,
    pub per_task: Vec<f64>,
    /// Full-signal reconstruction in value space (unclamped).
    pub recon: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdaptTrace {
    pub points: Vec<EvalPoint>,
    /// forgetting[j][i] = PSNR over task i's region right after task j
    /// finished its step quota.
    pub forgetting: Vec<Vec<f64>>,
}

/// PSNR of model-space predictions against raw targets.
pub fn psnr_of(pred_model_space: &Tensor, targets_raw: &Tensor, meta: &SignalMeta) -> f64 {
    let mid = meta.mid();
    let pred = pred_model_space.map(|v| v + mid);
    psnr_in_range(&pred, targets_raw, meta.lo, meta.hi).unwrap_or(f64::NAN)
}

fn modular_psnr(field: &ModularField, samples: &SampleSet, meta: &SignalMeta) -> f64 {
    let pred = compose_predict(field, &samples.coords);
    psnr_of(&pred, &samples.targets, meta)
}

/// (PSNR, value-space reconstruction) of a modular field on a sample set.
fn modular_recon(
    field: &ModularField,
    samples: &SampleSet,
    meta: &SignalMeta,
) -> (f64, Tensor) {
    let mid = meta.mid();
    let pred = compose_predict(field, &samples.coords).map(|v| v + mid);
    let db = psnr_in_range(&pred, &samples.targets, meta.lo, meta.hi).unwrap_or(f64::NAN);
    (db, pred)
}

/// Splits a total step budget across tasks: floor share each, earlier tasks
/// absorb the remainder.
pub fn task_quotas(total: u64, t: usize) -> Vec<u64> {
    let base = total / t as u64;
    let rem = (total % t as u64) as usize;
    (0..t).map(|i| base + u64::from(i < rem)).collect()
}

/// Test-time optimization from the shared initialization: tasks run in
/// order, splitting the step budget (the largest eval step) across tasks;
/// full-signal and per-task PSNR are recorded at every listed global step.
/// No outer update happens.
pub fn meta_test_adapt<S: TaskSource>(
    state: &MetaState,
    source: &S,
    eval_steps: &[u64],
) -> Result<AdaptTrace> {
    if eval_steps.is_empty() || eval_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(
            "eval steps must be non-empty and ascending".to_string(),
        ));
    }
    let meta = source.meta().clone();
    let mid = meta.mid();
    let t = source.n_tasks();
    let mut field = instantiate(&state.shared, &source.regions(), &meta.dims)?;

    let mut points = Vec::new();
    let mut forgetting = Vec::new();
    let mut next_eval = 0usize;
    let mut global: u64 = 0;

    let record = |field: &ModularField, step: u64, points: &mut Vec<EvalPoint>| {
        let per_task: Vec<f64> = (0..t)
            .map(|i| modular_psnr(field, source.task_eval(i), &meta))
            .collect();
        let (psnr, recon) = modular_recon(field, source.eval(), &meta);
        points.push(EvalPoint {
            step,
            psnr,
            per_task,
            recon,
        });
    };

    if eval_steps[next_eval] == 0 {
        record(&field, 0, &mut points);
        next_eval += 1;
    }

    let total = *eval_steps.last().unwrap();
    let quotas = task_quotas(total, t);
    let mut carried: Option<FisherAccumulator> = None;
    for i in 0..t {
        let view = source.task(i);
        let ctx_coords = view.context.coords.clone();
        let ctx_targets = centered(&view.context.targets, mid);
        let mut acc = match (state.fim.carry_fisher, carried.take()) {
            (true, Some(a)) => a,
            _ => state.fim.fresh_fisher(&state.shared.arch)?,
        };
        let mut model = field.modules[i].clone();
        for _ in 0..quotas[i] {
            let (next, _) = fim_sgd_step(
                &model,
                &ctx_coords,
                &ctx_targets,
                &mut acc,
                &state.fim,
                state.eta_inner,
            )?;
            model = next;
            global += 1;
            if next_eval < eval_steps.len() && global == eval_steps[next_eval] {
                field.modules[i] = model.clone();
                record(&field, global, &mut points);
                next_eval += 1;
            }
        }
        field.modules[i] = model;
        if state.fim.carry_fisher {
            carried = Some(acc);
        }
        let row: Vec<f64> = (0..t)
            .map(|k| modular_psnr(&field, source.task_eval(k), &meta))
            .collect();
        forgetting.push(row);
    }

    Ok(AdaptTrace { points, forgetting })
}

// ── meta-training driver ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    Spatial { t: usize, axis: usize },
    Temporal { t: usize },
    Resolution,
}

impl SplitSpec {
    pub fn build(&self, signal: &Signal) -> Result<Episode> {
        match *self {
            SplitSpec::Spatial { t, axis } => split_spatial(signal, t, axis),
            SplitSpec::Temporal { t } => split_temporal(signal, t),
            SplitSpec::Resolution => split_resolution(signal, 4),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub outer_steps: u64,
    pub meta_batch: usize,
    /// Context samples per task per episode draw; 0 keeps full regions.
    pub context_m: usize,
    pub query_mode: QueryMode,
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            outer_steps: 5000,
            meta_batch: 4,
            context_m: 0,
            query_mode: QueryMode::Holdout,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub outer_step: u64,
    pub outer_loss: f64,
    pub wall_ms: u64,
}

/// Generic episodic outer loop: draws `meta_batch` episodes per outer step
/// (uniformly over the training episodes, contexts re-sampled when
/// `context_m` > 0), runs `adapt` on each — concurrently when `threads` > 1
/// — and applies the averaged meta-update to θ_shared. Episodes that fail
/// (non-finite loss) are reported and dropped from the batch. The reduction
/// order is fixed by slot, so runs are deterministic for a given seed
/// regardless of thread scheduling.
pub fn meta_train_loop<F>(
    state: MetaState,
    episodes: &[Episode],
    opts: &TrainOptions,
    rng: &Rng,
    adapt: F,
    mut on_step: impl FnMut(&MetaState, &TrainLogRow),
) -> Result<MetaState>
where
    F: Fn(&MetaState, &Episode) -> Result<(f64, Tensor)> + Sync,
{
    if episodes.is_empty() {
        return Err(Error::contract("meta training needs at least one episode".to_string()));
    }
    let mut state = state;
    let start = Instant::now();
    for step in 0..opts.outer_steps {
        let srng = rng.split(state.outer_step);
        // Materialize this batch's episodes (cheap clones or subsamples).
        let batch: Vec<Episode> = (0..opts.meta_batch)
            .map(|slot| {
                let mut pick = srng.split(slot as u64);
                let ep = &episodes[pick.below(episodes.len())];
                if opts.context_m > 0 {
                    ep.subsample(opts.context_m, &pick.split(1), opts.query_mode)
                } else {
                    Ok(ep.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let workers = opts.threads.max(1).min(batch.len());
        let outcomes: Vec<(usize, Result<(f64, Tensor)>)> = if workers <= 1 {
            batch
                .iter()
                .enumerate()
                .map(|(slot, ep)| (slot, adapt(&state, ep)))
                .collect()
        } else {
            let state_ref = &state;
            let batch_ref = &batch;
            let adapt_ref = &adapt;
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        scope.spawn(move || {
                            let mut out = Vec::new();
                            let mut slot = w;
                            while slot < batch_ref.len() {
                                out.push((slot, adapt_ref(state_ref, &batch_ref[slot])));
                                slot += workers;
                            }
                            out
                        })
                    })
                    .collect();
                let mut all: Vec<(usize, Result<(f64, Tensor)>)> = handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("episode worker panicked"))
                    .collect();
                all.sort_by_key(|(slot, _)| *slot);
                all
            })
        };

        let mut losses = Vec::with_capacity(outcomes.len());
        let n = state.shared.params.len();
        let mut grad_mean = Tensor::zeros(&[n]);
        let mut survivors = 0usize;
        for (slot, outcome) in outcomes {
            match outcome {
                Ok((loss, grad)) => {
                    losses.push(loss);
                    grad_mean.axpy(1.0, &grad);
                    survivors += 1;
                }
                Err(e) => eprintln!("outer step {step}, episode slot {slot} aborted: {e}"),
            }
        }
        if survivors == 0 {
            return Err(Error::contract(format!(
                "outer step {step}: every episode in the batch aborted"
            )));
        }
        grad_mean = grad_mean.scale(1.0 / survivors as f64);
        let outer_loss = losses.iter().sum::<f64>() / survivors as f64;
        state.outer_step += 1;
        if grad_mean.all_finite() {
            state.shared.params.axpy(-state.eta_outer, &grad_mean);
        } else {
            eprintln!("outer step {step}: non-finite meta-gradient, update skipped");
        }
        on_step(
            &state,
            &TrainLogRow {
                outer_step: state.outer_step,
                outer_loss,
                wall_ms: start.elapsed().as_millis() as u64,
            },
        );
    }
    Ok(state)
}

/// Meta-trains the modular engine: each episode runs [`inner_adapt`] with
/// meta-gradients on.
pub fn meta_train(
    state: MetaState,
    episodes: &[Episode],
    opts: &TrainOptions,
    rng: &Rng,
    on_step: impl FnMut(&MetaState, &TrainLogRow),
) -> Result<MetaState> {
    meta_train_loop(
        state,
        episodes,
        opts,
        rng,
        |s, ep| {
            let res = inner_adapt(s, ep, true)?;
            let grad = res
                .meta_grad
                .expect("inner_adapt(want_meta_grad=true) returns a gradient");
            Ok((res.outer_loss, grad))
        },
        on_step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldArch;
    use crate::task::{synth_family, Family, TrackingSource};

    fn tiny_state(k: usize, lambda: f64, mode: MetaMode) -> MetaState {
        let arch = FieldArch::sine(3, 8, 2, 1);
        let params = crate::field::init_params(&arch, &mut Rng::with_stream(3, 1)).unwrap();
        let fim = FimConfig {
            lambda,
            ..FimConfig::default()
        };
        MetaState::new(
            SharedInit::new(arch, params).unwrap(),
            5e-3,
            1e-2,
            k,
            fim,
            mode,
        )
        .unwrap()
    }

    fn tiny_episode(seed: u64) -> Episode {
        let rng = Rng::with_stream(seed, 40);
        let sig = &synth_family(&rng, Family::Gabor2d { size: 12 }, 1).unwrap()[0];
        split_spatial(sig, 4, 1).unwrap()
    }

    #[test]
    fn adapt_improves_inner_loss() {
        let state = tiny_state(24, 0.0, MetaMode::FirstOrder);
        let ep = tiny_episode(1);
        let res = inner_adapt(&state, &ep, false).unwrap();
        // Final inner loss must be below the starting loss for each task.
        for (i, out) in res.per_task.iter().enumerate() {
            let view = ep.task(i);
            let mid = ep.meta.mid();
            let model = crate::field::FieldModel::new(
                state.shared.arch.clone(),
                state.shared.params.clone(),
            )
            .unwrap();
            let pred = model.predict(&view.context.coords);
            let tgt = centered(&view.context.targets, mid);
            let start: f64 = pred
                .data()
                .iter()
                .zip(tgt.data())
                .map(|(&p, &s)| (p - s) * (p - s))
                .sum::<f64>()
                / view.context.len() as f64;
            assert!(
                out.final_inner_loss < start,
                "task {i}: {} !< {start}",
                out.final_inner_loss
            );
        }
    }

    #[test]
    fn earlier_modules_are_isolated_from_later_tasks() {
        let state = tiny_state(16, 0.1, MetaMode::FirstOrder);
        let ep = tiny_episode(2);
        let res_a = inner_adapt(&state, &ep, false).unwrap();
        // Corrupt the *later* tasks' contexts: module 0 must be bitwise
        // unaffected, because nothing after task 0 can touch it.
        let mut ep_b = ep.clone();
        for t in &mut ep_b.tasks[1..] {
            t.context.targets = t.context.targets.map(|v| 1.0 - v);
        }
        let res_b = inner_adapt(&state, &ep_b, false).unwrap();
        assert_eq!(
            res_a.adapted.modules[0].params.data(),
            res_b.adapted.modules[0].params.data()
        );
        assert_ne!(
            res_a.adapted.modules[1].params.data(),
            res_b.adapted.modules[1].params.data()
        );
        // And task 0 actually adapted away from the shared init.
        assert_ne!(
            res_a.adapted.modules[0].params.data(),
            state.shared.params.data()
        );
    }

    #[test]
    fn episode_purity_identical_runs() {
        let state = tiny_state(8, 0.1, MetaMode::FirstOrder);
        let ep = tiny_episode(3);
        let a = inner_adapt(&state, &ep, true).unwrap();
        let b = inner_adapt(&state, &ep, true).unwrap();
        assert_eq!(a.outer_loss, b.outer_loss);
        assert_eq!(
            a.meta_grad.as_ref().unwrap().data(),
            b.meta_grad.as_ref().unwrap().data()
        );
    }

    #[test]
    fn tracker_sees_ordered_single_visits() {
        let state = tiny_state(4, 0.1, MetaMode::FirstOrder);
        let ep = tiny_episode(4);
        let tracker = TrackingSource::new(&ep);
        inner_adapt(&state, &tracker, true).unwrap();
        assert!(tracker.violations().is_empty());
        assert_eq!(tracker.accesses(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_outer_loss_leaves_shared_unchanged() {
        let state = tiny_state(1, 0.0, MetaMode::FirstOrder);
        // Constant-zero signal in model space: targets equal the range mid,
        // so a zero-output net fits exactly and gradients vanish.
        let n = 8;
        let sig = Signal::new(
            crate::task::SignalKind::Image,
            "const",
            vec![n, n],
            1,
            0.0,
            1.0,
            Tensor::new(vec![n * n, 1], vec![0.5; n * n]).unwrap(),
        )
        .unwrap();
        let ep = split_spatial(&sig, 4, 1).unwrap();
        let mut state = state;
        // Zero the parameters so predictions are exactly 0 in model space.
        state.shared.params = Tensor::zeros(&[state.shared.arch.param_count()]);
        let res = inner_adapt(&state, &ep, true).unwrap();
        assert_eq!(res.outer_loss, 0.0);
        let next = outer_update(&state, &[res]).unwrap();
        assert_eq!(next.shared.params.data(), state.shared.params.data());
        assert_eq!(next.outer_step, state.outer_step + 1);
    }

    /// For k=1 and η_inner → 0, first- and second-order meta-gradients
    /// converge to each other.
    #[test]
    fn meta_gradient_modes_agree_at_tiny_lr() {
        let ep = tiny_episode(5);
        let mut grads = Vec::new();
        for mode in [MetaMode::FirstOrder, MetaMode::FullSecondOrder] {
            let mut state = tiny_state(1, 0.0, mode);
            state.eta_inner = 1e-6;
            let res = inner_adapt(&state, &ep, true).unwrap();
            grads.push(res.meta_grad.unwrap());
        }
        let (a, b) = (&grads[0], &grads[1]);
        let num: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.data().iter().map(|&y| y * y).sum::<f64>().sqrt();
        assert!(num / den < 1e-3, "relative difference {}", num / den);
    }

    #[test]
    fn quotas_split_budget() {
        assert_eq!(task_quotas(4096, 4), vec![1024; 4]);
        assert_eq!(task_quotas(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(task_quotas(1, 4), vec![1, 0, 0, 0]);
    }

    #[test]
    fn meta_test_trace_records_requested_steps() {
        let state = tiny_state(4, 0.0, MetaMode::FirstOrder);
        let ep = tiny_episode(6);
        let trace = meta_test_adapt(&state, &ep, &[0, 1, 4, 8]).unwrap();
        let steps: Vec<u64> = trace.points.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 1, 4, 8]);
        assert_eq!(trace.forgetting.len(), 4);
        for p in &trace.points {
            assert_eq!(p.per_task.len(), 4);
            assert!(p.psnr.is_finite());
        }
    }

    #[test]
    fn meta_train_smoke_improves_loss() {
        let rng = Rng::with_stream(7, 50);
        let sigs = synth_family(&rng, Family::Gabor2d { size: 12 }, 6).unwrap();
        let episodes: Vec<Episode> = sigs
            .iter()
            .map(|s| split_spatial(s, 4, 1).unwrap())
            .collect();
        let state = tiny_state(4, 0.0, MetaMode::FirstOrder);
        let opts = TrainOptions {
            outer_steps: 40,
            meta_batch: 2,
            threads: 2,
            ..TrainOptions::default()
        };
        let mut first = None;
        let mut last = 0.0;
        let trained = meta_train(state, &episodes, &opts, &Rng::with_stream(1, 60), |_, row| {
            if first.is_none() {
                first = Some(row.outer_loss);
            }
            last = row.outer_loss;
        })
        .unwrap();
        assert_eq!(trained.outer_step, 40);
        assert!(last < first.unwrap(), "{last} !< {first:?}");
    }

    #[test]
    fn meta_train_is_deterministic_across_thread_counts() {
        let rng = Rng::with_stream(7, 51);
        let sigs = synth_family(&rng, Family::Gabor2d { size: 10 }, 4).unwrap();
        let episodes: Vec<Episode> = sigs
            .iter()
            .map(|s| split_spatial(s, 2, 1).unwrap())
            .collect();
        let mut params = Vec::new();
        for threads in [1usize, 2] {
            let state = tiny_state(2, 0.1, MetaMode::FirstOrder);
            let opts = TrainOptions {
                outer_steps: 6,
                meta_batch: 3,
                threads,
                context_m: 20,
                ..TrainOptions::default()
            };
            let trained =
                meta_train(state, &episodes, &opts, &Rng::with_stream(9, 61), |_, _| {}).unwrap();
            params.push(trained.shared.params);
        }
        assert_eq!(params[0].data(), params[1].data());
    }
}
