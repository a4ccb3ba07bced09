//! Run configuration: a flat key/value document with a published schema.
//!
//! Configs are TOML restricted to one flat table. Every key is validated
//! against the schema below; unknown keys are rejected so a typo cannot
//! silently fall back to a default. The canonical string of the effective
//! config (all keys, sorted) is hashed into checkpoints so a resume against
//! a different experiment definition refuses to proceed.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{Activation, FieldArch, DEFAULT_OMEGA0};
use crate::fisher::{FimConfig, ScoreScope, WeightNorm};
use crate::task::QueryMode;
use crate::unroll::MetaMode;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // architecture
    pub arch_preset: String, // "" = use the explicit fields below
    pub arch_layers: usize,
    pub arch_hidden: usize,
    pub arch_in: usize,
    pub arch_out: usize,
    pub arch_activation: String, // "sine" | "relu"
    pub arch_omega0: f64,
    pub arch_pos_enc: usize, // 0 = none
    pub arch_bias: bool,

    // task stream
    pub split: String, // "spatial" | "temporal" | "resolution"
    pub tasks: usize,
    pub split_axis: usize,
    pub context_m: usize, // 0 = every sample in the region
    pub query_mode: String, // "holdout" | "full"

    // data
    pub data: String, // "synthetic:gabor-2d" | "synthetic:random-fourier-1d" | path
    pub synth_size: usize,
    pub synth_len: usize,
    pub family_n: usize,
    pub train_frac: f64,

    // FIM loss
    pub lambda: f64,
    pub fisher_decay: f64,
    pub fisher_damping: f64,
    pub weight_norm: String, // "none" | "batch-mean-one"
    pub score_scope: String, // "last-layer" | "full-params"
    pub precondition: bool,
    pub fisher_carry: bool,
    pub fim_outer: bool,

    // meta-learning
    pub eta_inner: f64,
    pub eta_outer: f64,
    pub inner_steps: usize,
    pub meta_mode: String, // "first-order" | "second-order"
    pub outer_steps: u64,
    pub meta_batch: usize,

    // evaluation / strategies
    pub eval_steps: String, // comma-separated ascending ints
    pub strategy: String,
    pub strategies: String, // comma-separated, for `compare`
    pub ewc_lambda: f64,
    pub replay_capacity_frac: f64,
    pub replay_ratio: f64,
    pub oml_mask_layers: usize, // top-k layers adapted in the inner loop

    // run
    pub seed: u64,
    pub out_dir: String,
    pub checkpoint_every: u64,
    pub meta_ckpt: String, // modular meta checkpoint for OURS-* in `compare`
    pub maml_ckpt: String, // single-net meta checkpoint for MAML+CL / OML
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch_preset: String::new(),
            arch_layers: 4,
            arch_hidden: 32,
            arch_in: 2,
            arch_out: 1,
            arch_activation: "sine".into(),
            arch_omega0: DEFAULT_OMEGA0,
            arch_pos_enc: 0,
            arch_bias: true,
            split: "spatial".into(),
            tasks: 4,
            split_axis: 1,
            context_m: 0,
            query_mode: "holdout".into(),
            data: "synthetic:gabor-2d".into(),
            synth_size: 32,
            synth_len: 1024,
            family_n: 64,
            train_frac: 0.7,
            lambda: 0.1,
            fisher_decay: 0.99,
            fisher_damping: 1e-8,
            weight_norm: "batch-mean-one".into(),
            score_scope: "last-layer".into(),
            precondition: false,
            fisher_carry: false,
            fim_outer: true,
            eta_inner: 1e-2,
            eta_outer: 5e-3,
            inner_steps: 16,
            meta_mode: "first-order".into(),
            outer_steps: 5000,
            meta_batch: 4,
            eval_steps: "1,2,4,8,16,32,64,128,256,512,1024,2048,4096".into(),
            strategy: "OURS-MIM".into(),
            strategies: "OL,CL,ER,EWC,MAML+CL,OML,OURS-MOD,OURS-MIM".into(),
            ewc_lambda: 100.0,
            replay_capacity_frac: 0.25,
            replay_ratio: 0.5,
            oml_mask_layers: 2,
            seed: 0,
            out_dir: "out".into(),
            checkpoint_every: 1000,
            meta_ckpt: String::new(),
            maml_ckpt: String::new(),
        }
    }
}

macro_rules! schema {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        pub const KEYS: &[&str] = &[$($key),+];

        fn set_field(cfg: &mut RunConfig, key: &str, value: &toml::Value) -> Result<()> {
            match key {
                $($key => { cfg.$field = coerce::$kind(key, value)?; Ok(()) })+
                _ => Err(Error::Config(format!("unknown config key '{key}'"))),
            }
        }

        impl RunConfig {
            /// Canonical sorted key=value rendering of the effective config.
            pub fn canonical_string(&self) -> String {
                let mut lines = vec![$(format!("{}={}", $key, self.$field)),+];
                lines.sort();
                lines.join("\n")
            }
        }
    };
}

mod coerce {
    use super::*;

    pub fn usize(key: &str, v: &toml::Value) -> Result<usize> {
        v.as_integer()
            .filter(|&i| i >= 0)
            .map(|i| i as usize)
            .ok_or_else(|| Error::Config(format!("'{key}' wants a non-negative integer")))
    }

    pub fn u64(key: &str, v: &toml::Value) -> Result<u64> {
        v.as_integer()
            .filter(|&i| i >= 0)
            .map(|i| i as u64)
            .ok_or_else(|| Error::Config(format!("'{key}' wants a non-negative integer")))
    }

    pub fn f64(key: &str, v: &toml::Value) -> Result<f64> {
        match v {
            toml::Value::Float(f) => Ok(*f),
            toml::Value::Integer(i) => Ok(*i as f64),
            _ => Err(Error::Config(format!("'{key}' wants a number"))),
        }
    }

    pub fn bool(key: &str, v: &toml::Value) -> Result<bool> {
        v.as_bool()
            .ok_or_else(|| Error::Config(format!("'{key}' wants true/false")))
    }

    pub fn string(key: &str, v: &toml::Value) -> Result<String> {
        v.as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Config(format!("'{key}' wants a string")))
    }
}

schema! {
    "arch_preset" => arch_preset: string,
    "arch_layers" => arch_layers: usize,
    "arch_hidden" => arch_hidden: usize,
    "arch_in" => arch_in: usize,
    "arch_out" => arch_out: usize,
    "arch_activation" => arch_activation: string,
    "arch_omega0" => arch_omega0: f64,
    "arch_pos_enc" => arch_pos_enc: usize,
    "arch_bias" => arch_bias: bool,
    "split" => split: string,
    "tasks" => tasks: usize,
    "split_axis" => split_axis: usize,
    "context_m" => context_m: usize,
    "query_mode" => query_mode: string,
    "data" => data: string,
    "synth_size" => synth_size: usize,
    "synth_len" => synth_len: usize,
    "family_n" => family_n: usize,
    "train_frac" => train_frac: f64,
    "lambda" => lambda: f64,
    "fisher_decay" => fisher_decay: f64,
    "fisher_damping" => fisher_damping: f64,
    "weight_norm" => weight_norm: string,
    "score_scope" => score_scope: string,
    "precondition" => precondition: bool,
    "fisher_carry" => fisher_carry: bool,
    "fim_outer" => fim_outer: bool,
    "eta_inner" => eta_inner: f64,
    "eta_outer" => eta_outer: f64,
    "inner_steps" => inner_steps: usize,
    "meta_mode" => meta_mode: string,
    "outer_steps" => outer_steps: u64,
    "meta_batch" => meta_batch: usize,
    "eval_steps" => eval_steps: string,
    "strategy" => strategy: string,
    "strategies" => strategies: string,
    "ewc_lambda" => ewc_lambda: f64,
    "replay_capacity_frac" => replay_capacity_frac: f64,
    "replay_ratio" => replay_ratio: f64,
    "oml_mask_layers" => oml_mask_layers: usize,
    "seed" => seed: u64,
    "out_dir" => out_dir: string,
    "checkpoint_every" => checkpoint_every: u64,
    "meta_ckpt" => meta_ckpt: string,
    "maml_ckpt" => maml_ckpt: string,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
        let mut cfg = RunConfig::default();
        for (key, value) in &table {
            if value.is_table() || value.is_array() {
                return Err(Error::Config(format!(
                    "'{key}': nested tables/arrays are not allowed (flat key/value only)"
                )));
            }
            set_field(&mut cfg, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch()?.validate()?;
        self.fim()?.validate()?;
        self.meta_mode()?;
        self.query_mode()?;
        self.parse_eval_steps()?;
        match self.split.as_str() {
            "spatial" | "temporal" | "resolution" => {}
            s => return Err(Error::Config(format!("unknown split '{s}'"))),
        }
        if self.tasks < 1 {
            return Err(Error::Config("tasks must be >= 1".into()));
        }
        if self.eta_inner <= 0.0 || self.eta_outer <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.inner_steps < 1 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train_frac)
            || !(0.0..=1.0).contains(&self.replay_ratio)
            || !(0.0..=1.0).contains(&self.replay_capacity_frac)
        {
            return Err(Error::Config("fractions must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Architecture from the preset name or the explicit fields.
    pub fn arch(&self) -> Result<FieldArch> {
        if !self.arch_preset.is_empty() {
            let (arch, _) = crate::field::preset(&self.arch_preset)
                .ok_or_else(|| Error::Config(format!("unknown arch preset '{}'", self.arch_preset)))?;
            return Ok(arch);
        }
        let activation = match self.arch_activation.as_str() {
            "sine" => Activation::Sine {
                omega0: self.arch_omega0,
            },
            "relu" => Activation::Relu,
            a => return Err(Error::Config(format!("unknown activation '{a}'"))),
        };
        Ok(FieldArch {
            n_layers: self.arch_layers,
            hidden: self.arch_hidden,
            d_in: self.arch_in,
            d_out: self.arch_out,
            activation,
            pos_enc: if self.arch_pos_enc == 0 {
                None
            } else {
                Some(self.arch_pos_enc)
            },
            bias: self.arch_bias,
        })
    }

    pub fn fim(&self) -> Result<FimConfig> {
        let weight_norm = match self.weight_norm.as_str() {
            "none" => WeightNorm::None,
            "batch-mean-one" => WeightNorm::BatchMeanOne,
            w => return Err(Error::Config(format!("unknown weight_norm '{w}'"))),
        };
        let scope = match self.score_scope.as_str() {
            "last-layer" => ScoreScope::LastLayer,
            "full-params" => ScoreScope::FullParams,
            s => return Err(Error::Config(format!("unknown score_scope '{s}'"))),
        };
        Ok(FimConfig {
            lambda: self.lambda,
            rho: self.fisher_decay,
            eps: self.fisher_damping,
            weight_norm,
            scope,
            precondition: self.precondition,
            carry_fisher: self.fisher_carry,
            outer_weighted: self.fim_outer,
        })
    }

    pub fn meta_mode(&self) -> Result<MetaMode> {
        match self.meta_mode.as_str() {
            "first-order" => Ok(MetaMode::FirstOrder),
            "second-order" => Ok(MetaMode::FullSecondOrder),
            m => Err(Error::Config(format!("unknown meta_mode '{m}'"))),
        }
    }

    pub fn query_mode(&self) -> Result<QueryMode> {
        match self.query_mode.as_str() {
            "holdout" => Ok(QueryMode::Holdout),
            "full" => Ok(QueryMode::FullRegion),
            q => Err(Error::Config(format!("unknown query_mode '{q}'"))),
        }
    }

    pub fn parse_eval_steps(&self) -> Result<Vec<u64>> {
        let steps: Vec<u64> = self
            .eval_steps
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad eval step '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if steps.is_empty() || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "eval_steps must be non-empty and strictly ascending".into(),
            ));
        }
        Ok(steps)
    }

    pub fn strategy_list(&self) -> Vec<String> {
        self.strategies
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// SHA-256 of the canonical config string; stored in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_string().as_bytes());
        h.finalize().into()
    }
}
