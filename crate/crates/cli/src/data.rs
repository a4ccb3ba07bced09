//! Signal loading: files, frame directories, and synthetic families.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mclnf_core::config::RunConfig;
use mclnf_core::meta::SplitSpec;
use mclnf_core::rng::Rng;
use mclnf_core::task::{synth_family, train_test_split, Family, Signal};

/// RNG stream reserved for drawing the synthetic family.
pub const STREAM_FAMILY: u64 = 1;
/// RNG stream reserved for parameter initialization.
pub const STREAM_INIT: u64 = 2;
/// RNG stream reserved for episode draws during training.
pub const STREAM_TRAIN: u64 = 3;
/// RNG stream reserved for baseline randomness (replay draws etc.).
pub const STREAM_STRATEGY: u64 = 4;

pub fn family_of(cfg: &RunConfig, name: &str) -> Result<Family> {
    Ok(match name {
        "gabor-2d" => Family::Gabor2d {
            size: cfg.synth_size,
        },
        "random-fourier-1d" => Family::RandomFourier1d { len: cfg.synth_len },
        other => bail!("unknown synthetic family '{other}'"),
    })
}

/// Draws the configured family and splits it into (meta-train, meta-test).
pub fn synthetic_sets(cfg: &RunConfig, name: &str) -> Result<(Vec<Signal>, Vec<Signal>)> {
    let family = family_of(cfg, name)?;
    let rng = Rng::with_stream(cfg.seed, STREAM_FAMILY);
    eprintln!(
        "synthetic family: {} (n={}, seed={})",
        mclnf_core::task::describe_family(family),
        cfg.family_n,
        cfg.seed
    );
    let signals = synth_family(&rng, family, cfg.family_n)?;
    Ok(train_test_split(signals, cfg.train_frac))
}

/// Loads one signal from a file path, a frame directory, or
/// `synthetic:<family>[:<test index>]`.
pub fn load_signal(cfg: &RunConfig, spec: &str) -> Result<Signal> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let (name, index) = match rest.split_once(':') {
            Some((n, i)) => (n, i.parse::<usize>().context("bad synthetic index")?),
            None => (rest, 0),
        };
        let (_, test) = synthetic_sets(cfg, name)?;
        return test
            .into_iter()
            .nth(index)
            .with_context(|| format!("synthetic test split has no signal {index}"));
    }
    let path = Path::new(spec);
    if path.is_dir() {
        return Ok(mclnf_core::io::read_video_dir(path)?);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("ppm") => Ok(mclnf_core::io::read_image(path)?),
        Some("wav") => Ok(mclnf_core::io::read_wav(path)?.0),
        _ => bail!("cannot infer signal format of {spec} (want .pgm/.ppm/.wav or a directory)"),
    }
}

/// Signals used for meta-training under this config.
pub fn train_signals(cfg: &RunConfig) -> Result<Vec<Signal>> {
    if let Some(rest) = cfg.data.strip_prefix("synthetic:") {
        let (train, _) = synthetic_sets(cfg, rest)?;
        Ok(train)
    } else {
        Ok(vec![load_signal(cfg, &cfg.data)?])
    }
}

/// Meta-test signals under this config.
pub fn test_signals(cfg: &RunConfig) -> Result<Vec<Signal>> {
    if let Some(rest) = cfg.data.strip_prefix("synthetic:") {
        let (_, test) = synthetic_sets(cfg, rest)?;
        Ok(test)
    } else {
        Ok(vec![load_signal(cfg, &cfg.data)?])
    }
}

pub fn split_spec(cfg: &RunConfig) -> Result<SplitSpec> {
    Ok(match cfg.split.as_str() {
        "spatial" => SplitSpec::Spatial {
            t: cfg.tasks,
            axis: cfg.split_axis,
        },
        "temporal" => SplitSpec::Temporal { t: cfg.tasks },
        "resolution" => SplitSpec::Resolution,
        other => bail!("unknown split '{other}'"),
    })
}

/// Worker-thread cap: MCLNF_THREADS, else the machine's parallelism.
pub fn thread_cap() -> usize {
    std::env::var("MCLNF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}
