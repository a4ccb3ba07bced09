//! Reference strategies for the comparison sweep: offline learning, plain
//! continual learning, experience replay, EWC, MAML+CL, OML, and the two
//! modular meta-learned variants.
//!
//! All strategies share the step-budget semantics of [`meta_test_adapt`]:
//! the largest eval step is the total optimization budget, split across
//! tasks for the task-sequential methods, with full-signal and per-task
//! PSNR recorded at every listed global step.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::{FieldArch, FieldModel};
use crate::fisher::{scores_batch, FimConfig, FisherAccumulator, ScoreScope};
use crate::meta::{
    meta_test_adapt, meta_train_loop, psnr_of, task_quotas, AdaptTrace, EvalPoint, MetaState,
    TrainLogRow, TrainOptions,
};
use crate::rng::Rng;
use crate::task::{Episode, SampleSet, TaskSource};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Offline learning: one net, all data at once.
    Ol,
    /// Plain continual learning: one net, sequential tasks, no protection.
    Cl,
    /// Experience replay with a reservoir buffer.
    Er,
    /// Elastic weight consolidation.
    Ewc,
    /// MAML initialization adapted continually (single net).
    MamlCl,
    /// OML: inner loop restricted to the top layers.
    Oml,
    /// Modular field from the meta initialization, plain MSE.
    OursMod,
    /// Modular field from the meta initialization with the FIM loss.
    OursMim,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Ol => "OL",
            Strategy::Cl => "CL",
            Strategy::Er => "ER",
            Strategy::Ewc => "EWC",
            Strategy::MamlCl => "MAML+CL",
            Strategy::Oml => "OML",
            Strategy::OursMod => "OURS-MOD",
            Strategy::OursMim => "OURS-MIM",
        }
    }

    pub const ALL: [Strategy; 8] = [
        Strategy::Ol,
        Strategy::Cl,
        Strategy::Er,
        Strategy::Ewc,
        Strategy::MamlCl,
        Strategy::Oml,
        Strategy::OursMod,
        Strategy::OursMim,
    ];
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        Ok(match s {
            "OL" => Strategy::Ol,
            "CL" => Strategy::Cl,
            "ER" => Strategy::Er,
            "EWC" => Strategy::Ewc,
            "MAML+CL" => Strategy::MamlCl,
            "OML" => Strategy::Oml,
            "OURS-MOD" => Strategy::OursMod,
            "OURS-MIM" => Strategy::OursMim,
            other => return Err(Error::contract(format!("unknown strategy '{other}'"))),
        })
    }
}

// ── replay buffer ───────────────────────────────────────────────────────

/// Reservoir-sampled store of (coordinate, target) pairs.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    seen: u64,
    coords: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            seen: 0,
            coords: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Algorithm-R reservoir insertion.
    pub fn push(&mut self, coord: &[f64], target: &[f64], rng: &mut Rng) {
        self.seen += 1;
        if self.coords.len() < self.capacity {
            self.coords.push(coord.to_vec());
            self.targets.push(target.to_vec());
        } else if self.capacity > 0 {
            let j = rng.below(self.seen as usize);
            if j < self.capacity {
                self.coords[j] = coord.to_vec();
                self.targets[j] = target.to_vec();
            }
        }
    }

    pub fn push_set(&mut self, samples: &SampleSet, rng: &mut Rng) {
        for i in 0..samples.len() {
            self.push(samples.coords.row(i), samples.targets.row(i), rng);
        }
    }

    pub fn contains_index_count(&self) -> usize {
        self.coords.len()
    }
}

/// Mixes ⌈ratio·m⌉ uniformly drawn buffer samples with samples from the
/// current batch (targets in whatever space the caller keeps them). An empty
/// buffer returns the current batch unchanged.
pub fn replay_mix(
    buffer: &ReplayBuffer,
    cur_coords: &Tensor,
    cur_targets: &Tensor,
    ratio: f64,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("replay ratio {ratio} not in [0,1]")));
    }
    let m = cur_coords.rows();
    if buffer.is_empty() || ratio == 0.0 {
        return Ok((cur_coords.clone(), cur_targets.clone()));
    }
    let d = cur_coords.cols();
    let c = cur_targets.cols();
    let n_replay = (ratio * m as f64).ceil() as usize;
    let n_replay = n_replay.min(m);
    let n_current = m - n_replay;
    let mut coords = Vec::with_capacity(m * d);
    let mut targets = Vec::with_capacity(m * c);
    for _ in 0..n_replay {
        let j = rng.below(buffer.len());
        coords.extend_from_slice(&buffer.coords[j]);
        targets.extend_from_slice(&buffer.targets[j]);
    }
    for &row in rng.choose_indices(m, n_current).iter() {
        coords.extend_from_slice(cur_coords.row(row));
        targets.extend_from_slice(cur_targets.row(row));
    }
    Ok((
        Tensor::new(vec![m, d], coords)?,
        Tensor::new(vec![m, c], targets)?,
    ))
}

// ── EWC ─────────────────────────────────────────────────────────────────

/// One consolidated task: its optimum and Fisher diagonal (full scope).
#[derive(Debug, Clone)]
pub struct EwcAnchor {
    pub theta_star: Tensor,
    pub fisher: Tensor,
}

/// Σ_tasks (λ/2)·Σ_p F̂_p (θ_p − θ*_p)².
pub fn ewc_penalty(params: &Tensor, anchors: &[EwcAnchor], lambda: f64) -> f64 {
    let mut total = 0.0;
    for a in anchors {
        total += params
            .data()
            .iter()
            .zip(a.theta_star.data().iter().zip(a.fisher.data()))
            .map(|(&t, (&ts, &f))| f * (t - ts) * (t - ts))
            .sum::<f64>();
    }
    0.5 * lambda * total
}

/// Gradient of [`ewc_penalty`]: λ·Σ_tasks F̂ ⊙ (θ − θ*).
pub fn ewc_penalty_grad(params: &Tensor, anchors: &[EwcAnchor], lambda: f64) -> Tensor {
    let mut grad = Tensor::zeros(&[params.len()]);
    for a in anchors {
        for ((g, &t), (&ts, &f)) in grad
            .data_mut()
            .iter_mut()
            .zip(params.data())
            .zip(a.theta_star.data().iter().zip(a.fisher.data()))
        {
            *g += lambda * f * (t - ts);
        }
    }
    grad
}

/// Diagonal empirical Fisher over a context at the task's final parameters.
pub fn ewc_anchor(model: &FieldModel, coords: &Tensor, targets: &Tensor) -> Result<EwcAnchor> {
    let scores = scores_batch(model, coords, targets, ScoreScope::FullParams)?;
    let mut acc = FisherAccumulator::new(model.params.len(), 1.0, 1e-12)?;
    for b in 0..scores.rows() {
        acc.update(&Tensor::vector(scores.row(b).to_vec()));
    }
    Ok(EwcAnchor {
        theta_star: model.params.clone(),
        fisher: acc.diag().clone(),
    })
}

// ── OML mask ────────────────────────────────────────────────────────────

/// Parameter mask selecting the named layers (by index). The inner loop
/// updates only masked-in parameters; the outer loop updates everything.
pub fn oml_inner_mask(arch: &FieldArch, layers: &[usize]) -> Result<Vec<bool>> {
    if layers.is_empty() {
        return Err(Error::contract("OML mask needs at least one layer".to_string()));
    }
    let layout = arch.param_layout();
    for &l in layers {
        if l >= layout.len() {
            return Err(Error::contract(format!(
                "layer {l} out of range for {}-layer net",
                layout.len()
            )));
        }
    }
    let mut mask = vec![false; arch.param_count()];
    for &l in layers {
        let span = &layout[l];
        for slot in &mut mask[span.w.clone()] {
            *slot = true;
        }
        if let Some(b) = &span.b {
            for slot in &mut mask[b.clone()] {
                *slot = true;
            }
        }
    }
    Ok(mask)
}

/// Indices of the top `k` layers (the OML convention: early layers frozen
/// in the inner loop).
pub fn top_layers(arch: &FieldArch, k: usize) -> Vec<usize> {
    let n = arch.n_layers;
    (n.saturating_sub(k)..n).collect()
}

// ── single-net mechanics ────────────────────────────────────────────────

/// One plain-MSE SGD step, optionally masked and with an additive gradient
/// term (the EWC penalty).
fn mse_step(
    model: &FieldModel,
    coords: &Tensor,
    targets: &Tensor,
    eta: f64,
    mask: Option<&[bool]>,
    extra_grad: Option<&Tensor>,
) -> Result<FieldModel> {
    let mut tape = crate::tape::Tape::new();
    let p = tape.leaf(model.params.clone());
    let loss = crate::fisher::mse_loss_tape(&mut tape, &model.arch, p, coords, targets)?;
    let mut grad = tape.backward(loss, p)?;
    if let Some(extra) = extra_grad {
        grad.axpy(1.0, extra);
    }
    let mut params = model.params.clone();
    match mask {
        Some(m) => {
            for ((t, &g), &keep) in params.data_mut().iter_mut().zip(grad.data()).zip(m) {
                if keep {
                    *t -= eta * g;
                }
            }
        }
        None => params.axpy(-eta, &grad),
    }
    if !params.all_finite() {
        return Err(Error::Numeric {
            op: "mse_step",
            node: 0,
        });
    }
    FieldModel::new(model.arch.clone(), params)
}

fn single_psnr(model: &FieldModel, samples: &SampleSet, meta: &crate::task::SignalMeta) -> f64 {
    psnr_of(&model.predict(&samples.coords), &samples.targets, meta)
}

fn single_recon(
    model: &FieldModel,
    samples: &SampleSet,
    meta: &crate::task::SignalMeta,
) -> (f64, Tensor) {
    let mid = meta.mid();
    let pred = model.predict(&samples.coords).map(|v| v + mid);
    let db = crate::metrics::psnr_in_range(&pred, &samples.targets, meta.lo, meta.hi)
        .unwrap_or(f64::NAN);
    (db, pred)
}

enum Variant {
    Offline,
    Continual,
    Replay { ratio: f64, capacity_frac: f64 },
    Ewc { lambda: f64 },
}

/// Shared walker for the single-net strategies.
fn single_trace<S: TaskSource>(
    model0: FieldModel,
    source: &S,
    eval_steps: &[u64],
    eta: f64,
    mask: Option<Vec<bool>>,
    variant: Variant,
    rng: &mut Rng,
) -> Result<AdaptTrace> {
    if eval_steps.is_empty() || eval_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(
            "eval steps must be non-empty and ascending".to_string(),
        ));
    }
    let meta = source.meta().clone();
    let mid = meta.mid();
    let t = source.n_tasks();
    let total = *eval_steps.last().unwrap();
    let mut model = model0;
    let mut points = Vec::new();
    let mut forgetting = Vec::new();
    let mut next_eval = 0usize;
    let mut global = 0u64;

    let record = |model: &FieldModel, step: u64, points: &mut Vec<EvalPoint>| {
        let per_task: Vec<f64> = (0..t)
            .map(|i| single_psnr(model, source.task_eval(i), &meta))
            .collect();
        let (psnr, recon) = single_recon(model, source.eval(), &meta);
        points.push(EvalPoint {
            step,
            psnr,
            per_task,
            recon,
        });
    };

    if eval_steps[0] == 0 {
        record(&model, 0, &mut points);
        next_eval = 1;
    }

    if matches!(variant, Variant::Offline) {
        // Gather every context up front (in task order) into one batch.
        let mut coords = Vec::new();
        let mut targets = Vec::new();
        let (d, c) = (meta.d_in(), meta.channels);
        let mut m = 0usize;
        for i in 0..t {
            let view = source.task(i);
            coords.extend_from_slice(view.context.coords.data());
            targets.extend(view.context.targets.data().iter().map(|&v| v - mid));
            m += view.context.len();
        }
        let coords = Tensor::new(vec![m, d], coords)?;
        let targets = Tensor::new(vec![m, c], targets)?;
        for _ in 0..total {
            model = mse_step(&model, &coords, &targets, eta, mask.as_deref(), None)?;
            global += 1;
            if next_eval < eval_steps.len() && global == eval_steps[next_eval] {
                record(&model, global, &mut points);
                next_eval += 1;
            }
        }
        return Ok(AdaptTrace { points, forgetting });
    }

    let quotas = task_quotas(total, t);
    let mut buffer: Option<ReplayBuffer> = None;
    let mut replay_ratio = 0.0;
    if let Variant::Replay {
        ratio,
        capacity_frac,
    } = variant
    {
        // Capacity as a fraction of one task's context size.
        let per_task = source.task(0).context.len();
        let capacity = ((per_task as f64) * capacity_frac).ceil().max(1.0) as usize;
        buffer = Some(ReplayBuffer::new(capacity));
        replay_ratio = ratio;
    }
    let mut anchors: Vec<EwcAnchor> = Vec::new();
    let ewc_lambda = match variant {
        Variant::Ewc { lambda } => lambda,
        _ => 0.0,
    };

    for i in 0..t {
        let view = source.task(i);
        let ctx_coords = view.context.coords.clone();
        let ctx_targets = view.context.targets.map(|v| v - mid);
        for _ in 0..quotas[i] {
            let (bc, bt) = match &buffer {
                Some(buf) => replay_mix(buf, &ctx_coords, &ctx_targets, replay_ratio, rng)?,
                None => (ctx_coords.clone(), ctx_targets.clone()),
            };
            let extra = if ewc_lambda > 0.0 && !anchors.is_empty() {
                Some(ewc_penalty_grad(&model.params, &anchors, ewc_lambda))
            } else {
                None
            };
            model = mse_step(&model, &bc, &bt, eta, mask.as_deref(), extra.as_ref())?;
            global += 1;
            if next_eval < eval_steps.len() && global == eval_steps[next_eval] {
                record(&model, global, &mut points);
                next_eval += 1;
            }
        }
        if let Some(buf) = &mut buffer {
            // Feed this task's context into the reservoir once, at task end.
            let centered = SampleSet {
                coords: ctx_coords.clone(),
                targets: ctx_targets.clone(),
                indices: view.context.indices.clone(),
            };
            buf.push_set(&centered, rng);
        }
        if ewc_lambda > 0.0 {
            anchors.push(ewc_anchor(&model, &ctx_coords, &ctx_targets)?);
        }
        let row: Vec<f64> = (0..t)
            .map(|k| single_psnr(&model, source.task_eval(k), &meta))
            .collect();
        forgetting.push(row);
    }

    Ok(AdaptTrace { points, forgetting })
}

// ── strategy dispatch ───────────────────────────────────────────────────

/// The starting point a strategy adapts from.
#[derive(Debug, Clone)]
pub enum StrategyInit {
    /// A single net: random for OL/CL/ER/EWC, meta-learned for MAML+CL/OML.
    Single(FieldModel),
    /// The modular meta state for OURS-MOD / OURS-MIM.
    Modular(MetaState),
}

#[derive(Debug, Clone)]
pub struct StrategyOpts {
    pub eval_steps: Vec<u64>,
    pub eta: f64,
    /// FIM configuration for OURS-MIM (OURS-MOD forces λ=0, precondition off).
    pub fim: FimConfig,
    pub ewc_lambda: f64,
    pub replay_ratio: f64,
    pub replay_capacity_frac: f64,
    pub oml_mask_layers: usize,
    pub rng: Rng,
}

impl Default for StrategyOpts {
    fn default() -> Self {
        StrategyOpts {
            eval_steps: vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096],
            eta: 1e-2,
            fim: FimConfig::default(),
            ewc_lambda: 100.0,
            replay_ratio: 0.5,
            replay_capacity_frac: 0.25,
            oml_mask_layers: 2,
            rng: Rng::new(0),
        }
    }
}

/// Runs one strategy over one episode, producing its PSNR-vs-step trace and
/// (for the task-sequential methods) the forgetting matrix.
pub fn run_strategy<S: TaskSource>(
    strategy: Strategy,
    source: &S,
    init: &StrategyInit,
    opts: &StrategyOpts,
) -> Result<AdaptTrace> {
    let mut rng = opts.rng.clone();
    match (strategy, init) {
        (Strategy::Ol, StrategyInit::Single(m)) => single_trace(
            m.clone(),
            source,
            &opts.eval_steps,
            opts.eta,
            None,
            Variant::Offline,
            &mut rng,
        ),
        (Strategy::Cl, StrategyInit::Single(m))
        | (Strategy::MamlCl, StrategyInit::Single(m)) => single_trace(
            m.clone(),
            source,
            &opts.eval_steps,
            opts.eta,
            None,
            Variant::Continual,
            &mut rng,
        ),
        (Strategy::Er, StrategyInit::Single(m)) => single_trace(
            m.clone(),
            source,
            &opts.eval_steps,
            opts.eta,
            None,
            Variant::Replay {
                ratio: opts.replay_ratio,
                capacity_frac: opts.replay_capacity_frac,
            },
            &mut rng,
        ),
        (Strategy::Ewc, StrategyInit::Single(m)) => single_trace(
            m.clone(),
            source,
            &opts.eval_steps,
            opts.eta,
            None,
            Variant::Ewc {
                lambda: opts.ewc_lambda,
            },
            &mut rng,
        ),
        (Strategy::Oml, StrategyInit::Single(m)) => {
            let layers = top_layers(&m.arch, opts.oml_mask_layers);
            let mask = oml_inner_mask(&m.arch, &layers)?;
            single_trace(
                m.clone(),
                source,
                &opts.eval_steps,
                opts.eta,
                Some(mask),
                Variant::Continual,
                &mut rng,
            )
        }
        (Strategy::OursMod, StrategyInit::Modular(state)) => {
            let mut state = state.clone();
            state.eta_inner = opts.eta;
            state.fim.lambda = 0.0;
            state.fim.precondition = false;
            meta_test_adapt(&state, source, &opts.eval_steps)
        }
        (Strategy::OursMim, StrategyInit::Modular(state)) => {
            let mut state = state.clone();
            state.eta_inner = opts.eta;
            state.fim = opts.fim.clone();
            meta_test_adapt(&state, source, &opts.eval_steps)
        }
        (s, _) => Err(Error::contract(format!(
            "strategy {} is incompatible with the provided initialization",
            s.name()
        ))),
    }
}

// ── single-net meta-training (MAML+CL / OML) ────────────────────────────

/// First-order meta-training of a single net adapted *sequentially* through
/// the episode's tasks (the MAML+CL setup; a mask over inner-loop parameters
/// gives OML). The outer loss evaluates each task's query at the parameters
/// the net held right after that task; outer gradients update all
/// parameters.
pub fn meta_train_single(
    state: MetaState,
    episodes: &[Episode],
    opts: &TrainOptions,
    mask_layers: Option<usize>,
    rng: &Rng,
    on_step: impl FnMut(&MetaState, &TrainLogRow),
) -> Result<MetaState> {
    let mask = match mask_layers {
        Some(k) => {
            let layers = top_layers(&state.shared.arch, k);
            Some(oml_inner_mask(&state.shared.arch, &layers)?)
        }
        None => None,
    };
    meta_train_loop(
        state,
        episodes,
        opts,
        rng,
        move |s, ep| {
            let mid = ep.meta.mid();
            let mut model = FieldModel::new(s.shared.arch.clone(), s.shared.params.clone())?;
            let t = ep.n_tasks();
            let mut grad_sum = Tensor::zeros(&[s.shared.params.len()]);
            let mut loss_sum = 0.0;
            for i in 0..t {
                let view = ep.task(i);
                let ctx_coords = view.context.coords.clone();
                let ctx_targets = view.context.targets.map(|v| v - mid);
                for _ in 0..s.inner_steps {
                    model = mse_step(
                        &model,
                        &ctx_coords,
                        &ctx_targets,
                        s.eta_inner,
                        mask.as_deref(),
                        None,
                    )?;
                }
                if view.query.is_empty() {
                    return Err(Error::contract(format!(
                        "task {i} has an empty query set; meta-training needs one"
                    )));
                }
                let q_coords = view.query.coords.clone();
                let q_targets = view.query.targets.map(|v| v - mid);
                let mut tape = crate::tape::Tape::new();
                let p = tape.leaf(model.params.clone());
                let loss = crate::fisher::mse_loss_tape(
                    &mut tape,
                    &model.arch,
                    p,
                    &q_coords,
                    &q_targets,
                )?;
                loss_sum += tape.value(loss).item();
                grad_sum.axpy(1.0, &tape.backward(loss, p)?);
            }
            Ok((loss_sum / t as f64, grad_sum.scale(1.0 / t as f64)))
        },
        on_step,
    )
}
