//! Signals and continual task streams.
//!
//! A signal is a dense grid of values (image pixels, audio samples, video
//! voxels) with coordinates normalized per axis to [−1,1]. An episode splits
//! one signal into an ordered sequence of tasks — spatial patches, temporal
//! chunks, or resolution phases — each carrying context samples for
//! adaptation and query samples for evaluation. During continual adaptation
//! the engine receives tasks one at a time through [`TaskSource`], which is
//! also the seam where the access-tracking test double plugs in.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    Image,
    Video,
    Audio,
    Synthetic,
}

/// Everything needed to interpret a signal's samples without the signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMeta {
    pub kind: SignalKind,
    pub id: String,
    /// Grid extent per coordinate axis (channels excluded).
    pub dims: Vec<usize>,
    pub channels: usize,
    /// Declared value range.
    pub lo: f64,
    pub hi: f64,
}

impl SignalMeta {
    /// Midpoint of the value range; models fit values centered on this.
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn d_in(&self) -> usize {
        self.dims.len()
    }
}

/// A dense signal on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub meta: SignalMeta,
    /// (n_points, channels), points in row-major grid order.
    pub values: Tensor,
}

/// Coordinate of grid index i on an axis of extent n, in [−1,1].
pub fn axis_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for k in (0..dims.len()).rev() {
        idx[k] = flat % dims[k];
        flat /= dims[k];
    }
    idx
}

impl Signal {
    pub fn new(
        kind: SignalKind,
        id: impl Into<String>,
        dims: Vec<usize>,
        channels: usize,
        lo: f64,
        hi: f64,
        values: Tensor,
    ) -> Result<Self> {
        let n: usize = dims.iter().product();
        if values.shape() != [n, channels] {
            return Err(Error::dim(
                "Signal::new",
                format!("[{n}, {channels}]"),
                format!("{:?}", values.shape()),
            ));
        }
        if values.data().iter().any(|&v| v < lo - 1e-12 || v > hi + 1e-12) {
            return Err(Error::contract(format!(
                "signal values outside declared range [{lo}, {hi}]"
            )));
        }
        Ok(Signal {
            meta: SignalMeta {
                kind,
                id: id.into(),
                dims,
                channels,
                lo,
                hi,
            },
            values,
        })
    }

    pub fn n_points(&self) -> usize {
        self.meta.dims.iter().product()
    }

    /// Coordinates of one flat grid index.
    pub fn coord_of(&self, flat: usize) -> Vec<f64> {
        unravel(flat, &self.meta.dims)
            .iter()
            .zip(&self.meta.dims)
            .map(|(&i, &n)| axis_coord(i, n))
            .collect()
    }

    /// Sample set over a list of flat grid indices.
    pub fn gather(&self, indices: &[usize]) -> SampleSet {
        let d = self.meta.d_in();
        let c = self.meta.channels;
        let mut coords = Vec::with_capacity(indices.len() * d);
        let mut targets = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            coords.extend(self.coord_of(ix));
            targets.extend_from_slice(self.values.row(ix));
        }
        SampleSet {
            coords: Tensor::new(vec![indices.len(), d], coords).unwrap(),
            targets: Tensor::new(vec![indices.len(), c], targets).unwrap(),
            indices: indices.to_vec(),
        }
    }

    /// All grid points, in row-major order.
    pub fn all_samples(&self) -> SampleSet {
        let idx: Vec<usize> = (0..self.n_points()).collect();
        self.gather(&idx)
    }
}

/// Coordinates, targets, and their originating grid indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub coords: Tensor,
    pub targets: Tensor,
    pub indices: Vec<usize>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn take(&self, picks: &[usize]) -> SampleSet {
        let d = self.coords.cols();
        let c = self.targets.cols();
        let mut coords = Vec::with_capacity(picks.len() * d);
        let mut targets = Vec::with_capacity(picks.len() * c);
        let mut indices = Vec::with_capacity(picks.len());
        for &p in picks {
            coords.extend_from_slice(self.coords.row(p));
            targets.extend_from_slice(self.targets.row(p));
            indices.push(self.indices[p]);
        }
        SampleSet {
            coords: Tensor::new(vec![picks.len(), d], coords).unwrap(),
            targets: Tensor::new(vec![picks.len(), c], targets).unwrap(),
            indices,
        }
    }
}

/// The coordinate region a task owns.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Box(BoxRegion),
    /// Resolution-split phase: pixels at (2a+row, 2b+col).
    Phase { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn full(d: usize) -> Self {
        BoxRegion {
            lo: vec![-1.0; d],
            hi: vec![1.0; d],
        }
    }

    pub fn contains(&self, coord: &[f64]) -> bool {
        coord
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&x, (&lo, &hi))| x >= lo && x <= hi)
    }

    /// Positive-measure overlap along every axis.
    pub fn overlaps(&self, other: &BoxRegion) -> bool {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .all(|((&alo, &ahi), (&blo, &bhi))| alo.max(blo) < ahi.min(bhi))
    }

    pub fn volume(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| (hi - lo).max(0.0))
            .product()
    }
}

/// One continual task: its region, the adaptation context, the held-out
/// query, and the full ground truth of the region (for metrics only).
#[derive(Debug, Clone)]
pub struct FieldTask {
    pub index: usize,
    pub region: Region,
    pub context: SampleSet,
    pub query: SampleSet,
    pub full: SampleSet,
}

/// Borrowed adaptation data for one task, handed out by a [`TaskSource`].
pub struct TaskView<'a> {
    pub index: usize,
    pub region: &'a Region,
    pub context: &'a SampleSet,
    pub query: &'a SampleSet,
}

/// An ordered task sequence over one signal.
#[derive(Debug, Clone)]
pub struct Episode {
    pub meta: SignalMeta,
    pub tasks: Vec<FieldTask>,
    /// Full-signal ground truth, for evaluation.
    pub eval: SampleSet,
}

impl Episode {
    pub fn regions(&self) -> Vec<Region> {
        self.tasks.iter().map(|t| t.region.clone()).collect()
    }

    /// Places every task's full targets back at their grid indices; must
    /// reproduce the signal bit-exactly for partition-type splits.
    pub fn reassemble(&self) -> Tensor {
        let n: usize = self.meta.dims.iter().product();
        let c = self.meta.channels;
        let mut out = Tensor::zeros(&[n, c]);
        for task in &self.tasks {
            for (row, &ix) in task.full.indices.iter().enumerate() {
                let dst = &mut out.data_mut()[ix * c..(ix + 1) * c];
                dst.copy_from_slice(task.full.targets.row(row));
            }
        }
        out
    }

    /// Replaces each task's context with `m` samples drawn without
    /// replacement; the query becomes the held-out remainder, or the full
    /// region under full supervision.
    pub fn subsample(&self, m: usize, rng: &Rng, query: QueryMode) -> Result<Episode> {
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                let mut trng = rng.split(t.index as u64);
                let (context, q) = sample_context_query(t, m, &mut trng, query)?;
                Ok(FieldTask {
                    index: t.index,
                    region: t.region.clone(),
                    context,
                    query: q,
                    full: t.full.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            meta: self.meta.clone(),
            tasks,
            eval: self.eval.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// Query = region samples not drawn into the context.
    Holdout,
    /// Query = every sample in the region.
    FullRegion,
}

/// Draws `m` context samples from the task's region without replacement.
pub fn sample_context_query(
    task: &FieldTask,
    m: usize,
    rng: &mut Rng,
    mode: QueryMode,
) -> Result<(SampleSet, SampleSet)> {
    let n = task.full.len();
    if m == 0 || m > n {
        return Err(Error::contract(format!(
            "context size {m} invalid for region of {n} samples"
        )));
    }
    let picked = rng.choose_indices(n, m);
    let mut in_context = vec![false; n];
    for &p in &picked {
        in_context[p] = true;
    }
    let context = task.full.take(&picked);
    let query = match mode {
        QueryMode::FullRegion => task.full.clone(),
        QueryMode::Holdout => {
            let rest: Vec<usize> = (0..n).filter(|&i| !in_context[i]).collect();
            task.full.take(&rest)
        }
    };
    Ok((context, query))
}

// ── splits ──────────────────────────────────────────────────────────────

/// Box covering index range [i0, i1) on `axis`, full extent elsewhere.
/// Boundaries sit halfway between adjacent grid coordinates.
fn chunk_box(dims: &[usize], axis: usize, i0: usize, i1: usize) -> BoxRegion {
    let d = dims.len();
    let n = dims[axis];
    let mut b = BoxRegion::full(d);
    b.lo[axis] = if i0 == 0 {
        -1.0
    } else {
        0.5 * (axis_coord(i0 - 1, n) + axis_coord(i0, n))
    };
    b.hi[axis] = if i1 >= n {
        1.0
    } else {
        0.5 * (axis_coord(i1 - 1, n) + axis_coord(i1, n))
    };
    b
}

fn split_along_axis(signal: &Signal, t: usize, axis: usize) -> Result<Episode> {
    let dims = &signal.meta.dims;
    if t < 1 {
        return Err(Error::contract("task count must be >= 1".to_string()));
    }
    if axis >= dims.len() {
        return Err(Error::contract(format!(
            "split axis {axis} out of range for {} dims",
            dims.len()
        )));
    }
    let n = dims[axis];
    if n < t {
        return Err(Error::contract(format!(
            "cannot split extent {n} into {t} chunks"
        )));
    }
    let base = n / t;
    let stride_after: usize = dims[axis + 1..].iter().product();
    let n_points = signal.n_points();
    let mut tasks = Vec::with_capacity(t);
    for k in 0..t {
        let i0 = k * base;
        let i1 = if k + 1 == t { n } else { (k + 1) * base };
        let indices: Vec<usize> = (0..n_points)
            .filter(|&flat| {
                let along = (flat / stride_after) % n;
                along >= i0 && along < i1
            })
            .collect();
        let full = signal.gather(&indices);
        tasks.push(FieldTask {
            index: k,
            region: Region::Box(chunk_box(dims, axis, i0, i1)),
            context: full.clone(),
            query: full.clone(),
            full,
        });
    }
    Ok(Episode {
        meta: signal.meta.clone(),
        tasks,
        eval: signal.all_samples(),
    })
}

/// Splits an image into `t` patches along one spatial axis
/// (e.g. a 180×180 image into four 180×45 patches along the width).
pub fn split_spatial(signal: &Signal, t: usize, axis: usize) -> Result<Episode> {
    split_along_axis(signal, t, axis)
}

/// Splits a video or audio signal into `t` contiguous chunks along time
/// (axis 0).
pub fn split_temporal(signal: &Signal, t: usize) -> Result<Episode> {
    match signal.meta.kind {
        SignalKind::Video | SignalKind::Audio => {}
        _ => {
            return Err(Error::contract(
                "temporal split requires a video or audio signal".to_string(),
            ))
        }
    }
    split_along_axis(signal, t, 0)
}

/// Splits an image into four phase-decimated sub-images: sub-image (p,q)
/// keeps pixels (2a+p, 2b+q). Each sub-image spans the full coordinate
/// range; together they cover every pixel exactly once.
pub fn split_resolution(signal: &Signal, t: usize) -> Result<Episode> {
    if t != 4 {
        return Err(Error::contract(format!(
            "resolution split defines exactly 4 sub-images, got t={t}"
        )));
    }
    let dims = &signal.meta.dims;
    if dims.len() != 2 {
        return Err(Error::contract(
            "resolution split requires a 2-d image".to_string(),
        ));
    }
    let (h, w) = (dims[0], dims[1]);
    let mut tasks = Vec::with_capacity(4);
    for (k, (p, q)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let mut indices = Vec::new();
        let mut r = p;
        while r < h {
            let mut c = q;
            while c < w {
                indices.push(r * w + c);
                c += 2;
            }
            r += 2;
        }
        let full = signal.gather(&indices);
        tasks.push(FieldTask {
            index: k,
            region: Region::Phase { row: p, col: q },
            context: full.clone(),
            query: full.clone(),
            full,
        });
    }
    Ok(Episode {
        meta: signal.meta.clone(),
        tasks,
        eval: signal.all_samples(),
    })
}

// ── synthetic families ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// x(τ) = Σ_{k=1..8} a_k sin(2π f_k τ + φ_k), normalized by Σ|a_k|.
    RandomFourier1d { len: usize },
    /// Sums of oriented Gabor atoms on a shared frequency/orientation bank.
    Gabor2d { size: usize },
}

pub fn describe_family(family: Family) -> String {
    match family {
        Family::RandomFourier1d { len } => format!(
            "random-fourier-1d: len={len}, K=8, f~U[1,8], a~U[-1,1], phase~U[0,2pi), \
             normalized by sum|a|"
        ),
        Family::Gabor2d { size } => format!(
            "gabor-2d: {size}x{size}, shared bank of 8 (freq, orientation) pairs, \
             6 atoms/signal, amplitude~U[0.4,1], center~U[-0.8,0.8]^2, width~U[0.25,0.6], \
             values standardized to sd 0.24 around 0.5, clipped to [0,1]"
        ),
    }
}

/// Draws `n` signals i.i.d. from the family. Signals within one family share
/// structure (the Gabor bank, the Fourier construction), which is what the
/// meta-learner exploits.
pub fn synth_family(rng: &Rng, family: Family, n: usize) -> Result<Vec<Signal>> {
    if n < 1 {
        return Err(Error::contract("family size must be >= 1".to_string()));
    }
    match family {
        Family::RandomFourier1d { len } => {
            (0..n).map(|i| fourier_signal(rng, len, i)).collect()
        }
        Family::Gabor2d { size } => {
            // Shared bank drawn once per family.
            let mut bank_rng = rng.split(u64::MAX);
            let bank: Vec<(f64, f64)> = (0..8)
                .map(|_| {
                    let freq = bank_rng.uniform(1.0, 3.5);
                    let angle = bank_rng.uniform(0.0, std::f64::consts::PI);
                    (freq, angle)
                })
                .collect();
            (0..n).map(|i| gabor_signal(rng, &bank, size, i)).collect()
        }
    }
}

fn fourier_signal(rng: &Rng, len: usize, index: usize) -> Result<Signal> {
    let mut r = rng.split(index as u64);
    const K: usize = 8;
    let mut amps = [0.0; K];
    let mut freqs = [0.0; K];
    let mut phases = [0.0; K];
    for k in 0..K {
        amps[k] = r.uniform(-1.0, 1.0);
        freqs[k] = r.uniform(1.0, 8.0);
        phases[k] = r.uniform(0.0, std::f64::consts::TAU);
    }
    let norm: f64 = amps.iter().map(|a| a.abs()).sum::<f64>().max(1e-9);
    let mut data = Vec::with_capacity(len);
    for i in 0..len {
        let tau = i as f64 / len as f64;
        let mut v = 0.0;
        for k in 0..K {
            v += amps[k] * (std::f64::consts::TAU * freqs[k] * tau + phases[k]).sin();
        }
        data.push(v / norm);
    }
    Signal::new(
        SignalKind::Audio,
        format!("rf1d-{index}"),
        vec![len],
        1,
        -1.0,
        1.0,
        Tensor::new(vec![len, 1], data)?,
    )
}

fn gabor_signal(rng: &Rng, bank: &[(f64, f64)], size: usize, index: usize) -> Result<Signal> {
    let mut r = rng.split(index as u64);
    const ATOMS: usize = 6;
    struct Atom {
        amp: f64,
        cx: f64,
        cy: f64,
        width: f64,
        freq: f64,
        ux: f64,
        uy: f64,
        phase: f64,
    }
    let atoms: Vec<Atom> = (0..ATOMS)
        .map(|_| {
            let (freq, angle) = bank[r.below(bank.len())];
            Atom {
                amp: r.uniform(0.4, 1.0) * if r.below(2) == 0 { 1.0 } else { -1.0 },
                cx: r.uniform(-0.8, 0.8),
                cy: r.uniform(-0.8, 0.8),
                width: r.uniform(0.25, 0.6),
                freq,
                ux: angle.cos(),
                uy: angle.sin(),
                phase: r.uniform(0.0, std::f64::consts::TAU),
            }
        })
        .collect();
    let mut raw = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = axis_coord(i, size);
        for j in 0..size {
            let x = axis_coord(j, size);
            let mut v = 0.0;
            for a in &atoms {
                let dx = x - a.cx;
                let dy = y - a.cy;
                let env = (-(dx * dx + dy * dy) / (2.0 * a.width * a.width)).exp();
                let carrier = (std::f64::consts::TAU * a.freq * (dx * a.ux + dy * a.uy)
                    + a.phase)
                    .cos();
                v += a.amp * env * carrier;
            }
            raw.push(v);
        }
    }
    // Standardize to a fixed contrast so every signal has comparable
    // statistics, then clip into [0,1].
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / raw.len() as f64;
    let sd = var.sqrt().max(1e-9);
    let data: Vec<f64> = raw
        .iter()
        .map(|v| (0.5 + 0.24 * (v - mean) / sd).clamp(0.0, 1.0))
        .collect();
    Signal::new(
        SignalKind::Synthetic,
        format!("gabor2d-{index}"),
        vec![size, size],
        1,
        0.0,
        1.0,
        Tensor::new(vec![size * size, 1], data)?,
    )
}

/// Deterministic train/test split of a signal list (first `frac` to train).
pub fn train_test_split(signals: Vec<Signal>, frac: f64) -> (Vec<Signal>, Vec<Signal>) {
    let cut = ((signals.len() as f64) * frac).round() as usize;
    let mut signals = signals;
    let test = signals.split_off(cut.min(signals.len()));
    (signals, test)
}

// ── task access ─────────────────────────────────────────────────────────

/// Hands out adaptation data one task at a time. The engine never holds more
/// than the current task's context, which is what structurally enforces the
/// continual-learning constraint; [`TrackingSource`] verifies it.
pub trait TaskSource {
    fn n_tasks(&self) -> usize;
    fn meta(&self) -> &SignalMeta;
    /// Adaptation data of task i. Counted by access trackers.
    fn task(&self, i: usize) -> TaskView<'_>;
    /// Full-signal ground truth, for metrics only.
    fn eval(&self) -> &SampleSet;
    /// Region ground truth of task i, for metrics only.
    fn task_eval(&self, i: usize) -> &SampleSet;
    fn regions(&self) -> Vec<Region>;
}

impl TaskSource for Episode {
    fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn meta(&self) -> &SignalMeta {
        &self.meta
    }

    fn task(&self, i: usize) -> TaskView<'_> {
        let t = &self.tasks[i];
        TaskView {
            index: t.index,
            region: &t.region,
            context: &t.context,
            query: &t.query,
        }
    }

    fn eval(&self) -> &SampleSet {
        &self.eval
    }

    fn task_eval(&self, i: usize) -> &SampleSet {
        &self.tasks[i].full
    }

    fn regions(&self) -> Vec<Region> {
        Episode::regions(self)
    }
}

/// Test double: records every adaptation-data access and flags reads of an
/// earlier task's context once a later task has started.
pub struct TrackingSource<'a> {
    inner: &'a Episode,
    highest_started: Cell<Option<usize>>,
    accesses: RefCell<Vec<usize>>,
    violations: RefCell<Vec<(usize, usize)>>,
}

impl<'a> TrackingSource<'a> {
    pub fn new(inner: &'a Episode) -> Self {
        TrackingSource {
            inner,
            highest_started: Cell::new(None),
            accesses: RefCell::new(Vec::new()),
            violations: RefCell::new(Vec::new()),
        }
    }

    /// (read task, task in progress) pairs where an earlier context was read.
    pub fn violations(&self) -> Vec<(usize, usize)> {
        self.violations.borrow().clone()
    }

    pub fn accesses(&self) -> Vec<usize> {
        self.accesses.borrow().clone()
    }
}

impl TaskSource for TrackingSource<'_> {
    fn n_tasks(&self) -> usize {
        self.inner.n_tasks()
    }

    fn meta(&self) -> &SignalMeta {
        self.inner.meta()
    }

    fn task(&self, i: usize) -> TaskView<'_> {
        self.accesses.borrow_mut().push(i);
        match self.highest_started.get() {
            Some(h) if i < h => self.violations.borrow_mut().push((i, h)),
            Some(h) if i > h => self.highest_started.set(Some(i)),
            None => self.highest_started.set(Some(i)),
            _ => {}
        }
        self.inner.task(i)
    }

    fn eval(&self) -> &SampleSet {
        self.inner.eval()
    }

    fn task_eval(&self, i: usize) -> &SampleSet {
        self.inner.task_eval(i)
    }

    fn regions(&self) -> Vec<Region> {
        self.inner.regions()
    }
}
