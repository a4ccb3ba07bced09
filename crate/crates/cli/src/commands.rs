//! Implementations of the CLI subcommands.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mclnf_core::baselines::{meta_train_single, run_strategy, Strategy, StrategyInit, StrategyOpts};
use mclnf_core::checkpoint::Checkpoint;
use mclnf_core::config::RunConfig;
use mclnf_core::field::{init_params, FieldModel};
use mclnf_core::meta::{self, AdaptTrace, MetaState, TrainOptions};
use mclnf_core::metrics::{MetricRow, MetricTable};
use mclnf_core::modular::SharedInit;
use mclnf_core::rng::Rng;
use mclnf_core::task::{Episode, Signal, SignalKind};

use crate::data::{
    self, split_spec, test_signals, thread_cap, train_signals, STREAM_INIT, STREAM_STRATEGY,
    STREAM_TRAIN,
};

fn ensure_out_dir(cfg: &RunConfig) -> Result<std::path::PathBuf> {
    let dir = std::path::PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn state_from(cfg: &RunConfig, shared: SharedInit, outer_step: u64) -> Result<MetaState> {
    let mut state = MetaState::new(
        shared,
        cfg.eta_inner,
        cfg.eta_outer,
        cfg.inner_steps,
        cfg.fim()?,
        cfg.meta_mode()?,
    )?;
    state.outer_step = outer_step;
    Ok(state)
}

fn checkpoint_of(cfg: &RunConfig, state: &MetaState) -> Checkpoint {
    Checkpoint {
        arch: state.shared.arch.clone(),
        shared: state.shared.params.clone(),
        modules: None,
        outer_step: state.outer_step,
        rng_seed: cfg.seed,
        rng_stream: STREAM_TRAIN,
        rng_word_pos: 0,
        config_hash: cfg.hash(),
    }
}

pub fn meta_train(cfg: &RunConfig, resume: Option<&Path>, force: bool) -> Result<()> {
    let out_dir = ensure_out_dir(cfg)?;
    let arch = cfg.arch()?;
    let signals = train_signals(cfg)?;
    let spec = split_spec(cfg)?;
    let episodes: Vec<Episode> = signals
        .iter()
        .map(|s| spec.build(s).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;

    let (shared, outer_step) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.verify_config(&cfg.hash(), force)?;
            if ck.arch != arch && !force {
                bail!("checkpoint architecture differs from the config");
            }
            (SharedInit::new(ck.arch, ck.shared)?, ck.outer_step)
        }
        None => {
            let mut rng = Rng::with_stream(cfg.seed, STREAM_INIT);
            let params = init_params(&arch, &mut rng)?;
            (SharedInit::new(arch, params)?, 0)
        }
    };
    let state = state_from(cfg, shared, outer_step)?;

    let remaining = cfg.outer_steps.saturating_sub(state.outer_step);
    if remaining == 0 {
        println!("nothing to do: checkpoint already at outer step {}", state.outer_step);
        return Ok(());
    }
    let opts = TrainOptions {
        outer_steps: remaining,
        meta_batch: cfg.meta_batch,
        context_m: cfg.context_m,
        query_mode: cfg.query_mode()?,
        threads: thread_cap().min(cfg.meta_batch.max(1)),
    };
    let train_rng = Rng::with_stream(cfg.seed, STREAM_TRAIN);

    let log_path = out_dir.join("train_log.csv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if log.metadata()?.len() == 0 {
        writeln!(log, "outer_step,outer_loss,wall_ms")?;
    }

    let every = cfg.checkpoint_every.max(1);
    let mut io_err: Option<anyhow::Error> = None;
    let strategy = Strategy::from_str(&cfg.strategy)?;
    println!(
        "meta-training {} for {} outer steps ({} episodes, batch {}, {} threads)",
        strategy.name(),
        remaining,
        episodes.len(),
        opts.meta_batch,
        opts.threads
    );
    let mut on_step = |s: &MetaState, row: &meta::TrainLogRow| {
        if let Err(e) = writeln!(
            log,
            "{},{:.9e},{}",
            row.outer_step, row.outer_loss, row.wall_ms
        ) {
            io_err.get_or_insert(e.into());
        }
        if row.outer_step % every == 0 {
            let path = out_dir.join(format!("ckpt_{:07}.ckpt", row.outer_step));
            if let Err(e) = checkpoint_of(cfg, s).save(&path) {
                io_err.get_or_insert(e.into());
            }
        }
        if row.outer_step % 500 == 0 {
            eprintln!(
                "outer step {:>7}  loss {:.6e}  ({} ms)",
                row.outer_step, row.outer_loss, row.wall_ms
            );
        }
    };

    let trained = match strategy {
        Strategy::OursMod | Strategy::OursMim => {
            let mut state = state;
            if strategy == Strategy::OursMod {
                state.fim.lambda = 0.0;
                state.fim.precondition = false;
            }
            meta::meta_train(state, &episodes, &opts, &train_rng, &mut on_step)?
        }
        Strategy::MamlCl => {
            meta_train_single(state, &episodes, &opts, None, &train_rng, &mut on_step)?
        }
        Strategy::Oml => meta_train_single(
            state,
            &episodes,
            &opts,
            Some(cfg.oml_mask_layers),
            &train_rng,
            &mut on_step,
        )?,
        other => bail!(
            "meta-train needs a meta strategy (OURS-MOD, OURS-MIM, MAML+CL, OML), got {}",
            other.name()
        ),
    };
    if let Some(e) = io_err {
        return Err(e).context("writing training artifacts");
    }
    let final_path = out_dir.join("meta.ckpt");
    checkpoint_of(cfg, &trained).save(&final_path)?;
    println!(
        "finished at outer step {}; checkpoint: {}",
        trained.outer_step,
        final_path.display()
    );
    Ok(())
}

fn strategy_init(
    cfg: &RunConfig,
    strategy: Strategy,
    ckpt: Option<&Path>,
) -> Result<(StrategyInit, String)> {
    let modular = matches!(strategy, Strategy::OursMod | Strategy::OursMim);
    let (shared, origin) = match ckpt {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (
                SharedInit::new(ck.arch, ck.shared)?,
                format!("checkpoint {}", path.display()),
            )
        }
        None => {
            let arch = cfg.arch()?;
            let mut rng = Rng::with_stream(cfg.seed, STREAM_INIT);
            (
                SharedInit::new(arch.clone(), init_params(&arch, &mut rng)?)?,
                format!("random initialization (seed {})", cfg.seed),
            )
        }
    };
    let init = if modular {
        StrategyInit::Modular(state_from(cfg, shared, 0)?)
    } else {
        StrategyInit::Single(FieldModel::new(shared.arch, shared.params)?)
    };
    Ok((init, origin))
}

fn strategy_opts(cfg: &RunConfig, rng: Rng) -> Result<StrategyOpts> {
    Ok(StrategyOpts {
        eval_steps: cfg.parse_eval_steps()?,
        eta: cfg.eta_inner,
        fim: cfg.fim()?,
        ewc_lambda: cfg.ewc_lambda,
        replay_ratio: cfg.replay_ratio,
        replay_capacity_frac: cfg.replay_capacity_frac,
        oml_mask_layers: cfg.oml_mask_layers,
        rng,
    })
}

fn trace_rows(
    strategy: &str,
    signal_id: &str,
    trace: &AdaptTrace,
    wall_ms: u64,
    table: &mut MetricTable,
) -> Result<()> {
    for p in &trace.points {
        table.push(MetricRow {
            strategy: strategy.to_string(),
            signal_id: signal_id.to_string(),
            step: p.step,
            psnr_db: p.psnr,
            per_task_psnr: p.per_task.clone(),
            wall_ms,
        })?;
    }
    Ok(())
}

fn dump_reconstructions(
    dir: &Path,
    signal: &Signal,
    trace: &AdaptTrace,
    strategy: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = &signal.meta;
    for p in &trace.points {
        let stem = format!("recon_{}_step{:05}", strategy.to_lowercase(), p.step);
        match meta.kind {
            SignalKind::Audio => {
                mclnf_core::io::write_wav(&dir.join(format!("{stem}.wav")), &p.recon, 16_000)?;
            }
            SignalKind::Video => {
                let sig = Signal::new(
                    meta.kind,
                    stem.clone(),
                    meta.dims.clone(),
                    meta.channels,
                    meta.lo,
                    meta.hi,
                    p.recon.map(|v| v.clamp(meta.lo, meta.hi)),
                )?;
                mclnf_core::io::write_video_dir(&dir.join(stem), &sig)?;
            }
            SignalKind::Image | SignalKind::Synthetic => {
                let ext = if meta.channels == 3 { "ppm" } else { "pgm" };
                mclnf_core::io::write_image(
                    &dir.join(format!("{stem}.{ext}")),
                    &meta.dims,
                    meta.channels,
                    &p.recon,
                )?;
            }
        }
    }
    Ok(())
}

pub fn adapt(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    signal_spec: &str,
    strategy_name: &str,
    dump_recon: bool,
) -> Result<()> {
    let out_dir = ensure_out_dir(cfg)?;
    let strategy = Strategy::from_str(strategy_name)?;
    let signal = data::load_signal(cfg, signal_spec)?;
    let mut episode = split_spec(cfg)?.build(&signal)?;
    if cfg.context_m > 0 {
        episode = episode.subsample(
            cfg.context_m,
            &Rng::with_stream(cfg.seed, STREAM_STRATEGY).split(99),
            cfg.query_mode()?,
        )?;
    }
    let (init, origin) = strategy_init(cfg, strategy, ckpt)?;
    let opts = strategy_opts(cfg, Rng::with_stream(cfg.seed, STREAM_STRATEGY))?;
    println!(
        "adapting '{}' with {} from {origin}",
        signal.meta.id,
        strategy.name()
    );
    let start = Instant::now();
    let trace = run_strategy(strategy, &episode, &init, &opts)?;
    let wall = start.elapsed().as_millis() as u64;

    let mut table = MetricTable::new();
    trace_rows(strategy.name(), &signal.meta.id, &trace, wall, &mut table)?;
    let csv_path = out_dir.join(format!(
        "adapt_{}_{}.csv",
        strategy.name().to_lowercase().replace('+', "_"),
        signal.meta.id
    ));
    table.write_csv(fs::File::create(&csv_path)?)?;
    for p in &trace.points {
        println!("step {:>6}  psnr {:>8.3} dB", p.step, p.psnr);
    }
    println!("metrics: {}", csv_path.display());
    if dump_recon {
        let dir = out_dir.join(format!("recon_{}", signal.meta.id));
        dump_reconstructions(&dir, &signal, &trace, strategy.name())?;
        println!("reconstructions: {}", dir.display());
    }
    Ok(())
}

pub fn compare(cfg: &RunConfig) -> Result<()> {
    let out_dir = ensure_out_dir(cfg)?;
    let strategies: Vec<Strategy> = cfg
        .strategy_list()
        .iter()
        .map(|s| Strategy::from_str(s).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let signals = test_signals(cfg)?;
    let spec = split_spec(cfg)?;
    let mut episodes = Vec::new();
    for s in &signals {
        let mut ep = spec.build(s)?;
        if cfg.context_m > 0 {
            ep = ep.subsample(
                cfg.context_m,
                &Rng::with_stream(cfg.seed, STREAM_STRATEGY).split(episodes.len() as u64),
                cfg.query_mode()?,
            )?;
        }
        episodes.push(ep);
    }

    // Shared inits: one random single net per episode (same for every
    // non-meta strategy), plus the configured meta checkpoints.
    let arch = cfg.arch()?;
    let random_models: Vec<FieldModel> = (0..episodes.len())
        .map(|i| {
            let mut rng = Rng::with_stream(cfg.seed, STREAM_INIT).split(i as u64);
            FieldModel::init(arch.clone(), &mut rng).map_err(anyhow::Error::from)
        })
        .collect::<Result<_>>()?;
    let load_meta = |path: &str, what: &str| -> Result<MetaState> {
        if path.is_empty() {
            bail!("comparison includes {what} but the config sets no checkpoint for it");
        }
        let ck = Checkpoint::load(Path::new(path))?;
        state_from(cfg, SharedInit::new(ck.arch, ck.shared)?, ck.outer_step)
    };
    let needs_modular = strategies
        .iter()
        .any(|s| matches!(s, Strategy::OursMod | Strategy::OursMim));
    let needs_single_meta = strategies
        .iter()
        .any(|s| matches!(s, Strategy::MamlCl | Strategy::Oml));
    let modular_state = if needs_modular {
        Some(load_meta(&cfg.meta_ckpt, "OURS-MOD/OURS-MIM")?)
    } else {
        None
    };
    let single_meta = if needs_single_meta {
        let st = load_meta(&cfg.maml_ckpt, "MAML+CL/OML")?;
        Some(FieldModel::new(st.shared.arch.clone(), st.shared.params.clone())?)
    } else {
        None
    };

    struct Job {
        strategy: Strategy,
        episode: usize,
    }
    let jobs: Vec<Job> = strategies
        .iter()
        .flat_map(|&s| {
            (0..episodes.len()).map(move |e| Job {
                strategy: s,
                episode: e,
            })
        })
        .collect();

    let run_job = |job: &Job| -> Result<(String, String, AdaptTrace, u64)> {
        let strategy = job.strategy;
        let ep = &episodes[job.episode];
        let init = match strategy {
            Strategy::OursMod | Strategy::OursMim => {
                StrategyInit::Modular(modular_state.clone().expect("checked above"))
            }
            Strategy::MamlCl | Strategy::Oml => {
                StrategyInit::Single(single_meta.clone().expect("checked above"))
            }
            _ => StrategyInit::Single(random_models[job.episode].clone()),
        };
        let rng = Rng::with_stream(cfg.seed, STREAM_STRATEGY)
            .split(job.episode as u64)
            .split(strategy as u64);
        let opts = strategy_opts(cfg, rng)?;
        let start = Instant::now();
        let trace = run_strategy(strategy, ep, &init, &opts)?;
        Ok((
            strategy.name().to_string(),
            ep.meta.id.clone(),
            trace,
            start.elapsed().as_millis() as u64,
        ))
    };

    let workers = thread_cap().min(jobs.len().max(1));
    println!(
        "comparing {} strategies over {} episodes ({} workers)",
        strategies.len(),
        episodes.len(),
        workers
    );
    let outcomes: Vec<Result<(String, String, AdaptTrace, u64)>> = if workers <= 1 {
        jobs.iter().map(&run_job).collect()
    } else {
        std::thread::scope(|scope| {
            let jobs_ref = &jobs;
            let run_ref = &run_job;
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        let mut i = w;
                        while i < jobs_ref.len() {
                            out.push((i, run_ref(&jobs_ref[i])));
                            i += workers;
                        }
                        out
                    })
                })
                .collect();
            let mut all: Vec<(usize, _)> = handles
                .into_iter()
                .flat_map(|h| h.join().expect("compare worker panicked"))
                .collect();
            all.sort_by_key(|(i, _)| *i);
            all.into_iter().map(|(_, r)| r).collect()
        })
    };

    let mut table = MetricTable::new();
    let mut finals: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for outcome in outcomes {
        let (strategy, signal_id, trace, wall) = outcome?;
        if let Some(last) = trace.points.last() {
            finals.entry(strategy.clone()).or_default().push(last.psnr);
        }
        trace_rows(&strategy, &signal_id, &trace, wall, &mut table)?;
    }
    let csv_path = out_dir.join("compare.csv");
    table.write_csv(fs::File::create(&csv_path)?)?;
    println!("merged metrics: {}", csv_path.display());
    for (strategy, mut psnrs) in finals {
        psnrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = psnrs[psnrs.len() / 2];
        println!("{strategy:>9}: median final PSNR {median:.3} dB over {} episodes", psnrs.len());
    }
    Ok(())
}

pub fn inspect(ckpt: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let arch = &ck.arch;
    let act = match arch.activation {
        mclnf_core::field::Activation::Sine { omega0 } => format!("sine(omega0={omega0})"),
        mclnf_core::field::Activation::Relu => "relu".to_string(),
    };
    println!("checkpoint: {}", ckpt.display());
    println!(
        "arch: {} layers, hidden {}, in {}, out {}, {}, bias {}, pos-enc {}",
        arch.n_layers,
        arch.hidden,
        arch.d_in,
        arch.d_out,
        act,
        arch.bias,
        arch.pos_enc.map(|n| n.to_string()).unwrap_or_else(|| "none".into())
    );
    println!("parameters per module: {}", arch.param_count());
    match &ck.modules {
        Some(mods) => {
            println!(
                "modules: {} (total parameters {})",
                mods.len(),
                mods.len() * arch.param_count()
            );
        }
        None => println!("modules: shared initialization only"),
    }
    println!("outer step: {}", ck.outer_step);
    let hash_hex: String = ck.config_hash[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    println!("config hash: {hash_hex}…");
    Ok(())
}
