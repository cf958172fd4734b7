//! Run configuration: a line-based `key = value` format with `#`
//! comments. Parsing starts from the documented defaults, rejects
//! unknown keys with line numbers, and round-trips exactly through the
//! canonical serialization.
//!
//! # Example
//!
//! ```
//! use episodica::config::RunConfig;
//!
//! let cfg = RunConfig::parse("variant = simclr\nepochs = 5\n")?;
//! assert_eq!(cfg.epochs, 5);
//! // canonical serialization is a parse/serialize fixpoint
//! let canonical = cfg.serialize();
//! assert_eq!(RunConfig::parse(&canonical)?, cfg);
//! # Ok::<(), episodica::Error>(())
//! ```

use crate::augment::{AugmentConfig, TransformPair};
use crate::encoder::{parse_arch, Layer};
use crate::error::{Error, Result};
use crate::eval::TaskSpec;
use crate::loss::{LossConfig, Similarity};
use crate::optim::SgdConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Simclr,
    Moco,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Simclr => "simclr",
            Variant::Moco => "moco",
        }
    }
}

/// Everything one run needs: pre-training hyperparameters, encoder and
/// projection-head architectures, augmentation settings, and the
/// evaluation task shape.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub arch: Vec<Layer>,
    /// projection head applied only during pre-training; empty = none.
    /// Evaluation always uses the pre-projection embeddings.
    pub projection: Vec<Layer>,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    /// negatives held by the moco-variant key queue
    pub queue_capacity: usize,
    /// EMA coefficient m for the momentum (key) encoder
    pub key_momentum: f32,
    pub sgd: SgdConfig,
    pub task: TaskSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Simclr,
            seed: 0,
            epochs: 100,
            batch_size: 32,
            arch: parse_arch(
                "conv3x3 3 16 2; relu; conv3x3 16 32 2; relu; global_avg_pool; dense 32 64",
            )
            .unwrap(),
            projection: parse_arch("dense 64 64; relu; dense 64 32").unwrap(),
            augment: AugmentConfig::default(),
            loss: LossConfig::simclr_default(),
            queue_capacity: 1024,
            key_momentum: 0.99,
            sgd: SgdConfig::default(),
            task: TaskSpec::default(),
        }
    }
}

fn arch_string(arch: &[Layer]) -> String {
    if arch.is_empty() {
        "none".into()
    } else {
        arch.iter().map(|l| l.manifest_line()).collect::<Vec<_>>().join("; ")
    }
}

fn parse_arch_value(v: &str) -> Result<Vec<Layer>> {
    if v == "none" {
        Ok(Vec::new())
    } else {
        parse_arch(v)
    }
}

fn triple(v: [f32; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn parse_triple(v: &str) -> Result<[f32; 3]> {
    let parts: Vec<f32> = v
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad float {s:?}"))))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected 3 floats, got {}", parts.len())));
    }
    Ok([parts[0], parts[1], parts[2]])
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return Err(Error::Config(format!(
                "key_momentum must be in [0,1], got {}",
                self.key_momentum
            )));
        }
        self.augment.validate()?;
        self.loss.validate()?;
        self.task.validate()?;
        Ok(())
    }

    /// Canonical text form: every key in fixed order, defaults included,
    /// so a run's printed config is a complete reproduction recipe.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("variant", self.variant.as_str().into());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("arch", arch_string(&self.arch));
        kv("projection", arch_string(&self.projection));
        kv("image_size", self.augment.image_size.to_string());
        kv("jitter_strength", self.augment.jitter_strength.to_string());
        kv("image_mean", triple(self.augment.image_mean));
        kv("image_std", triple(self.augment.image_std));
        kv("transform_pair", self.augment.transform_pair.as_str().into());
        kv("temperature", self.loss.temperature.to_string());
        kv(
            "similarity",
            match self.loss.similarity {
                Similarity::Cosine => "cosine".into(),
                Similarity::Dot => "dot".into(),
            },
        );
        kv("queue_capacity", self.queue_capacity.to_string());
        kv("key_momentum", self.key_momentum.to_string());
        kv("lr", self.sgd.lr.to_string());
        kv("momentum", self.sgd.momentum.to_string());
        kv("weight_decay", self.sgd.weight_decay.to_string());
        kv("nesterov", self.sgd.nesterov.to_string());
        kv("n_way", self.task.n_way.to_string());
        kv("k_shot", self.task.k_shot.to_string());
        kv("n_query", self.task.n_query.to_string());
        kv("n_tasks", self.task.n_tasks.to_string());
        out
    }

    /// Parse `key = value` text over the defaults. Unknown keys and
    /// unparsable values are rejected with their line number.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at_line = |e: Error| Error::Config(format!("line {}: {e}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| {
                    Error::Config(format!("line {}: expected `key = value`", lineno + 1))
                })?;
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| {
                        Error::Config(format!("line {}: bad value {value:?} for {key}", lineno + 1))
                    })?
                };
            }
            match key {
                "variant" => {
                    cfg.variant = match value {
                        "simclr" => Variant::Simclr,
                        "moco" => Variant::Moco,
                        _ => {
                            return Err(Error::Config(format!(
                                "line {}: unknown variant {value:?}",
                                lineno + 1
                            )))
                        }
                    };
                    // each variant carries its own loss defaults unless
                    // overridden by later lines
                    cfg.loss = match cfg.variant {
                        Variant::Simclr => LossConfig::simclr_default(),
                        Variant::Moco => LossConfig::moco_default(),
                    };
                }
                "seed" => cfg.seed = num!(),
                "epochs" => cfg.epochs = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "arch" => cfg.arch = parse_arch_value(value).map_err(at_line)?,
                "projection" => cfg.projection = parse_arch_value(value).map_err(at_line)?,
                "image_size" => cfg.augment.image_size = num!(),
                "jitter_strength" => cfg.augment.jitter_strength = num!(),
                "image_mean" => cfg.augment.image_mean = parse_triple(value).map_err(at_line)?,
                "image_std" => cfg.augment.image_std = parse_triple(value).map_err(at_line)?,
                "transform_pair" => {
                    cfg.augment.transform_pair = TransformPair::parse(value).map_err(at_line)?
                }
                "temperature" => cfg.loss.temperature = num!(),
                "similarity" => {
                    cfg.loss.similarity = match value {
                        "cosine" => Similarity::Cosine,
                        "dot" => Similarity::Dot,
                        _ => {
                            return Err(Error::Config(format!(
                                "line {}: unknown similarity {value:?}",
                                lineno + 1
                            )))
                        }
                    }
                }
                "queue_capacity" => cfg.queue_capacity = num!(),
                "key_momentum" => cfg.key_momentum = num!(),
                "lr" => cfg.sgd.lr = num!(),
                "momentum" => cfg.sgd.momentum = num!(),
                "weight_decay" => cfg.sgd.weight_decay = num!(),
                "nesterov" => cfg.sgd.nesterov = num!(),
                "n_way" => cfg.task.n_way = num!(),
                "k_shot" => cfg.task.k_shot = num!(),
                "n_query" => cfg.task.n_query = num!(),
                "n_tasks" => cfg.task.n_tasks = num!(),
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.augment.rng_seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}
