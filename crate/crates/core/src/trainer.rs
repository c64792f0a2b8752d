//! Minibatch training of a modulation model against the full objective.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{contract, Error, Result};
use crate::losses::{reference_on, total_loss_on, LossBreakdown, LossWeights};
use crate::optim::{lr_at, AdamConfig, AdamState};
use crate::stack::{ModulationModel, StackConfig};
use crate::world::{Prompt, SynthWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Iterations at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    /// Sampling seed; in a run configuration it comes from the top-level
    /// `seed`.
    #[serde(skip)]
    pub seed: u64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub eval_every: usize,
    /// Prompt specs (`attr<N>:±1`); empty means every prompt of the world.
    pub prompts: Vec<String>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self::with_iterations(2000)
    }

    /// Desk defaults with milestones at 50% and 80% of `iterations`.
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            iterations,
            batch_size: 8,
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: vec![iterations / 2, iterations * 4 / 5],
            decay: 0.1,
            seed: 0,
            eval_every: 0,
            prompts: Vec::new(),
        }
    }

    /// Full-scale iteration counts for the face, church and car domains.
    pub fn preset(name: &str) -> Option<Self> {
        let (iterations, batch) = match name {
            "face" => (150_000, 8),
            "church" => (200_000, 4),
            "car" => (100_000, 8),
            _ => return None,
        };
        Some(Self { batch_size: batch, ..Self::with_iterations(iterations) })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(contract("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(contract("betas must lie in [0, 1)"));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.decay > 0.0) {
            return Err(contract("lr, eps and decay must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(contract("milestones must be strictly increasing"));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        lr_at(self.lr, &self.milestones, self.decay, iter)
    }

    pub fn prompt_set(&self, world: &SynthWorld) -> Result<Vec<Prompt>> {
        if self.prompts.is_empty() {
            return Ok(Prompt::all(world.attributes().len()));
        }
        self.prompts
            .iter()
            .map(|s| {
                let p = Prompt::parse(s)?;
                world.check_prompt(p)?;
                Ok(p)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const METRICS_HEADER: &str = "iter,lr,total,sp,t,embd,norm,id,bg";

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_metrics_csv(history: &[MetricsRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in history {
        let l = &r.loss;
        let vals = [r.lr, l.total, l.sp, l.t, l.embd, l.norm, l.id, l.bg];
        let cells: Vec<String> = vals.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "{},{}", r.iter, cells.join(","))?;
    }
    Ok(())
}

/// Fresh model for a run seed. Initialization and sampling use separate
/// streams of the same seed.
pub fn init_model(config: StackConfig, seed: u64) -> Result<ModulationModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    ModulationModel::init(config, &mut rng)
}

/// One optimization step's batch loss and gradients, without updating.
pub fn batch_gradients(
    model: &ModulationModel,
    world: &SynthWorld,
    weights: &LossWeights,
    batch: &[(crate::tensor::Tensor, Prompt)],
) -> Result<(LossBreakdown, Vec<crate::tensor::Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let vars = world.bind(&mut tape);
    let scale = 1.0 / batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    let mut parts = Vec::with_capacity(batch.len());
    for (w, prompt) in batch {
        let wv = tape.constant(w.clone());
        let e = tape.constant(world.text_embedding(*prompt)?);
        let f = model.forward_on(&mut tape, &bound, wv, e)?;
        let reference = reference_on(&mut tape, world, &vars, weights, wv)?;
        let l = total_loss_on(&mut tape, world, &vars, weights, &reference, f.w_edit, f.delta, e)?;
        parts.push(l.read(&tape));
        terms.push((scale, l.total));
    }
    let loss = tape.weighted_sum(&terms)?;
    let mean = LossBreakdown::mean(&parts);
    tape.backward(loss)?;
    let grads = bound
        .params
        .iter()
        .map(|&p| tape.grad(p).cloned().unwrap_or_else(|| crate::tensor::Tensor::zeros(tape.value(p).dims())))
        .collect();
    Ok((mean, grads))
}

pub struct TrainReport {
    pub history: Vec<MetricsRecord>,
}

/// Resumable optimization state: sampling stream, Adam moments and the
/// iteration counter. [`train`] drives one to completion; interactive callers
/// can step it a few iterations at a time.
pub struct Session {
    config: TrainConfig,
    weights: LossWeights,
    prompts: Vec<Prompt>,
    rng: ChaCha8Rng,
    adam: AdamState,
    names: Vec<String>,
    iter: usize,
}

impl Session {
    pub fn new(
        config: &TrainConfig,
        weights: &LossWeights,
        model: &ModulationModel,
        world: &SynthWorld,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let wc = world.config();
        let sc = model.config();
        if (sc.layers, sc.channels, sc.embed) != (wc.layers, wc.channels, wc.embed) {
            return Err(contract("model and world dimensions differ"));
        }
        let prompts = config.prompt_set(world)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let params: Vec<&crate::tensor::Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
        let adam = AdamState::new(AdamConfig { beta1: config.beta1, beta2: config.beta2, eps: config.eps }, &params)?;
        Ok(Self { config: config.clone(), weights: weights.clone(), prompts, rng, adam, names, iter: 0 })
    }

    /// Iterations taken so far.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    /// One optimizer step. On a non-finite loss or gradient the model is left
    /// untouched.
    pub fn step(&mut self, model: &mut ModulationModel, world: &SynthWorld) -> Result<MetricsRecord> {
        let iter = self.iter;
        let batch: Vec<_> = (0..self.config.batch_size)
            .map(|_| {
                let w = world.sample_latent(&mut self.rng);
                let p = *self.prompts.choose(&mut self.rng).expect("non-empty prompt set");
                (w, p)
            })
            .collect();
        let lr = self.config.lr_at(iter);
        let (loss, grads) = batch_gradients(model, world, &self.weights, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {iter}")));
        }
        let mut params = model.params_mut();
        self.adam.step(&mut params, &grads, &self.names, lr)?;
        self.iter += 1;
        Ok(MetricsRecord { iter, lr, loss })
    }
}

/// Trains `model` in place. When `out` is given, checkpoints are written
/// there every `eval_every` iterations and at the end; on a non-finite loss
/// or gradient the last good parameters are kept and saved before the error
/// is returned.
pub fn train(
    config: &TrainConfig,
    weights: &LossWeights,
    model: &mut ModulationModel,
    world: &SynthWorld,
    out: Option<&Path>,
) -> Result<TrainReport> {
    let mut session = Session::new(config, weights, model, world)?;
    let save = |model: &ModulationModel, name: &str| -> Result<()> {
        if let Some(dir) = out {
            model.save(&dir.join(name))?;
        }
        Ok(())
    };

    let mut history = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        match session.step(model, world) {
            Ok(record) => history.push(record),
            Err(e) => {
                save(model, "checkpoint.ffc")?;
                return Err(e);
            }
        }
        if config.eval_every > 0 && (iter + 1) % config.eval_every == 0 {
            save(model, &format!("checkpoint_{:06}.ffc", iter + 1))?;
        }
    }
    save(model, "checkpoint.ffc")?;
    Ok(TrainReport { history })
}
