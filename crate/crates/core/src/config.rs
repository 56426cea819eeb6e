//! `key = value` run configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. [`RunConfig::to_text`] writes every key in a fixed order, which
//! is what checkpoints echo and what the report hash covers.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature::Dims;
use crate::train::{Arm, TrainConfig};
use crate::world::WorldConfig;

/// Everything one experiment command needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    /// Total samples before the 70/10/20 split.
    pub samples: usize,
    pub train: TrainConfig,
    /// Missing ratio used by `eval` and `ablate`.
    pub eval_ratio: f64,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            samples: 4000,
            train: TrainConfig::default(),
            eval_ratio: 1.0,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Splits a config file into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Validation of the whole config is left to [`Self::validate`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let w = &mut self.world;
        match key {
            "samples" => self.samples = num(key, v)?,
            "latent_dim" => w.m = num(key, v)?,
            "noise_std" => w.noise_std = num(key, v)?,
            "cross_modal_rank" => w.cross_modal_rank = num(key, v)?,
            "channels" => w.dims.c = num(key, v)?,
            "grid_w" => w.dims.w = num(key, v)?,
            "grid_h" => w.dims.h = num(key, v)?,
            "classes" => w.dims.k = num(key, v)?,
            "slots" => t.shape.slots = num(key, v)?,
            "eps_hidden" => t.shape.eps_hidden = num(key, v)?,
            "head_hidden" => t.shape.head_hidden = num(key, v)?,
            "timesteps" => {
                // Entry step follows T unless set explicitly afterwards.
                let steps = num(key, v)?;
                if t.enhance_entry_t == t.timesteps {
                    t.enhance_entry_t = steps;
                }
                t.timesteps = steps;
            }
            "beta_start" => t.beta_start = num(key, v)?,
            "beta_end" => t.beta_end = num(key, v)?,
            "enhance_entry_t" => t.enhance_entry_t = num(key, v)?,
            "lambda1" => t.lambda1 = num(key, v)?,
            "lambda2" => t.lambda2 = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "mix_audio_missing" => t.scenario_mix.audio_missing = num(key, v)?,
            "mix_visual_missing" => t.scenario_mix.visual_missing = num(key, v)?,
            "mix_complete" => t.scenario_mix.complete = num(key, v)?,
            "arm" => t.arm = v.parse()?,
            "detach_enhanced" => t.detach_enhanced = flag(key, v)?,
            "freeze_generators" => t.freeze_generators = flag(key, v)?,
            "eval_ratio" => self.eval_ratio = num(key, v)?,
            "seed" => self.set_seed(num(key, v)?),
            "run_seed" => {
                let seed = num(key, v)?;
                self.world.seed = seed;
                self.train.seed = seed;
            }
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| num::<u64>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Uses `seed` for data generation, initialization and the seed list.
    pub fn set_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.train.seed = seed;
        self.seeds = vec![seed];
    }

    /// This config with data and training seeded by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.world.seed = seed;
        out.train.seed = seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        Dims::new(self.world.dims.c, self.world.dims.w, self.world.dims.h, self.world.dims.k)?;
        if self.samples < crate::world::MIN_DATASET {
            return Err(Error::Config(format!(
                "samples must be at least {}",
                crate::world::MIN_DATASET
            )));
        }
        if !(0.0..=1.0).contains(&self.eval_ratio) {
            return Err(Error::Config("eval_ratio must be in [0, 1]".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let (w, t) = (&self.world, &self.train);
        let mix = t.scenario_mix;
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("samples", self.samples.to_string());
        put("latent_dim", w.m.to_string());
        put("noise_std", format!("{:?}", w.noise_std));
        put("cross_modal_rank", w.cross_modal_rank.to_string());
        put("channels", w.dims.c.to_string());
        put("grid_w", w.dims.w.to_string());
        put("grid_h", w.dims.h.to_string());
        put("classes", w.dims.k.to_string());
        put("slots", t.shape.slots.to_string());
        put("eps_hidden", t.shape.eps_hidden.to_string());
        put("head_hidden", t.shape.head_hidden.to_string());
        put("timesteps", t.timesteps.to_string());
        put("beta_start", format!("{:?}", t.beta_start));
        put("beta_end", format!("{:?}", t.beta_end));
        put("enhance_entry_t", t.enhance_entry_t.to_string());
        put("lambda1", format!("{:?}", t.lambda1));
        put("lambda2", format!("{:?}", t.lambda2));
        put("lr", format!("{:?}", t.lr));
        put("batch_size", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        put("mix_audio_missing", format!("{:?}", mix.audio_missing));
        put("mix_visual_missing", format!("{:?}", mix.visual_missing));
        put("mix_complete", format!("{:?}", mix.complete));
        put("arm", t.arm.as_str().to_string());
        put("detach_enhanced", t.detach_enhanced.to_string());
        put("freeze_generators", t.freeze_generators.to_string());
        put("eval_ratio", format!("{:?}", self.eval_ratio));
        put("seeds", seeds.join(","));
        put("run_seed", self.train.seed.to_string());
        s
    }

    /// First 12 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn arm(&self) -> Arm {
        self.train.arm
    }
}
