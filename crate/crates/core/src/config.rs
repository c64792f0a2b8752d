//! Run configuration: one TOML document with a section per component.
//!
//! Every key is required and unknown keys are rejected, so a configuration
//! file always states the whole experiment. [`reference_toml`] renders the
//! desk defaults with one comment per key.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::stack::StackConfig;
use crate::trainer::TrainConfig;
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and sampling; the world has its own seed.
    pub seed: u64,
    pub world: WorldConfig,
    pub stack: StackConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::desk(),
            stack: StackConfig::desk(),
            train: TrainConfig::desk(),
            loss: LossWeights::default(),
            output: OutputConfig { dir: "runs/desk".into() },
        }
    }

    /// A short run for smoke tests and quick looks.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.train = TrainConfig::with_iterations(50);
        c.output.dir = "runs/smoke".into();
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| Error::Config(e.to_string());
        self.world.validate().map_err(as_config)?;
        self.stack.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        self.loss.validate().map_err(as_config)?;
        let (w, s) = (&self.world, &self.stack);
        if (w.layers, w.channels, w.embed) != (s.layers, s.channels, s.embed) {
            return Err(Error::Config("world and stack disagree on layers, channels or embed".into()));
        }
        if self.train.iterations == 0 {
            return Err(Error::Config("train.iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

const KEY_DOCS: &[(&str, &str, &str)] = &[
    ("", "seed", "run seed: model initialization and sampling streams"),
    ("world", "seed", "seed of the frozen world (generator, encoder, attributes)"),
    ("world", "layers", "latent layers L"),
    ("world", "channels", "channels per layer D"),
    ("world", "embed", "text/image embedding length"),
    ("world", "image_dim", "image features; split into L + 2 equal bands"),
    ("world", "attributes", "attributes, each hosted by its own layer"),
    ("world", "epsilon", "leakage of every layer into the other bands"),
    ("world", "generator_gain", "scale of the generator maps"),
    ("world", "latent_mean_scale", "per-entry RMS of the per-layer latent mean (generator-invisible)"),
    ("world", "latent_std", "std of the per-sample latent variation"),
    ("world", "attribute_target", "readout value an edit toward +a should reach"),
    ("stack", "blocks", "modulation blocks k; 0 requires variant mapper_baseline"),
    ("stack", "layers", "must equal world.layers"),
    ("stack", "channels", "must equal world.channels"),
    ("stack", "embed", "must equal world.embed and, with blocks, channels"),
    ("stack", "variant", "full | no_s | no_t | no_st | mapper_baseline"),
    ("stack", "offset_scale", "multiplier on the refined offset before it is added to w"),
    ("train", "iterations", "optimizer steps"),
    ("train", "batch_size", "(latent, prompt) pairs per step"),
    ("train", "lr", "initial learning rate"),
    ("train", "beta1", "Adam first-moment decay"),
    ("train", "beta2", "Adam second-moment decay"),
    ("train", "eps", "Adam denominator guard"),
    ("train", "milestones", "iterations at which the learning rate is multiplied by decay"),
    ("train", "decay", "learning-rate factor per milestone"),
    ("train", "eval_every", "checkpoint period in iterations; 0 writes only the final one"),
    ("train", "prompts", "prompt specs attr<N>:+1 / attr<N>:-1; empty means all"),
    ("loss", "embd", "weight of the embedding-preservation term"),
    ("loss", "norm", "weight of the L1 offset norm"),
    ("loss", "id", "weight of the identity term"),
    ("loss", "bg", "weight of the background term"),
    ("loss", "sp", "weight of the semantic-preserving sum"),
    ("loss", "t", "weight of the text-manipulation term"),
    ("loss", "use_id", "include the identity term"),
    ("loss", "use_bg", "include the background term"),
    ("output", "dir", "output directory for metrics, checkpoints and the world file"),
];

/// The desk configuration with every key documented.
pub fn reference_toml() -> String {
    let plain = RunConfig::desk().to_toml();
    let mut section = String::new();
    let mut out = String::from("# Run configuration reference (desk defaults). Every key is required.\n\n");
    for line in plain.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.to_string();
        } else if let Some((key, _)) = line.split_once(" = ") {
            if let Some((_, _, doc)) = KEY_DOCS.iter().find(|(s, k, _)| *s == section && *k == key) {
                let _ = writeln!(out, "# {doc}");
            }
        }
        let _ = writeln!(out, "{line}");
    }
    out
}
