//! Browser bindings: train a modulation stack step by step on the desk world,
//! inspect where each block's position attention lands, and blend two edits.
//!
//! [`Lab`] is plain Rust so it can be tested natively; [`Demo`] wraps it for
//! JavaScript and turns errors into exceptions.

use semod::config::RunConfig;
use semod::eval::{eval_latents, evaluate_prompt};
use semod::runner::interpolation_table;
use semod::trainer::{init_model, Session};
use semod::{LossWeights, ModulationModel, Prompt, Result, SynthWorld, TrainConfig, WorldConfig};
use wasm_bindgen::prelude::*;

/// Held-out latents averaged over in the attention view.
const VIEW_SAMPLES: usize = 16;

pub struct Lab {
    world: SynthWorld,
    model: ModulationModel,
    weights: LossWeights,
    session: Session,
    seed: u64,
    losses: Vec<f64>,
}

impl Lab {
    /// Desk world and stack with the given leakage; `seed` drives model init
    /// and sampling.
    pub fn new(seed: u64, epsilon: f64) -> Result<Self> {
        let config = RunConfig::desk().with_seed(seed);
        let world = SynthWorld::new(&WorldConfig { epsilon, ..config.world })?;
        let model = init_model(config.stack, seed)?;
        let train = TrainConfig { seed, ..config.train };
        let session = Session::new(&train, &config.loss, &model, &world)?;
        Ok(Self { world, model, weights: config.loss, session, seed, losses: Vec::new() })
    }

    pub fn layers(&self) -> usize {
        self.world.config().layers
    }

    pub fn blocks(&self) -> usize {
        self.model.config().blocks
    }

    pub fn host_layers(&self) -> Vec<usize> {
        self.world.attributes().iter().map(|a| a.host_layer).collect()
    }

    pub fn iteration(&self) -> usize {
        self.session.iteration()
    }

    /// Runs `iterations` more optimizer steps; returns the whole loss curve.
    pub fn train(&mut self, iterations: usize) -> Result<&[f64]> {
        for _ in 0..iterations {
            let r = self.session.step(&mut self.model, &self.world)?;
            self.losses.push(r.loss.total);
        }
        Ok(&self.losses)
    }

    /// Every block's `S` for `prompt`, averaged over held-out latents,
    /// flattened block-major (`blocks × layers`).
    pub fn attention(&self, prompt: Prompt) -> Result<Vec<f64>> {
        self.world.check_prompt(prompt)?;
        let e_t = self.world.text_embedding(prompt)?;
        let latents = eval_latents(&self.world, self.seed, VIEW_SAMPLES);
        let mut acc = vec![0.0; self.blocks() * self.layers()];
        for w in &latents {
            let f = self.model.forward(w, &e_t)?;
            for (b, s) in f.scales.iter().enumerate() {
                for (l, v) in s.data().iter().enumerate() {
                    acc[b * self.layers() + l] += v / latents.len() as f64;
                }
            }
        }
        Ok(acc)
    }

    /// `[edited, unedited, oracle]` mean text loss for `prompt`.
    pub fn text_losses(&self, prompt: Prompt) -> Result<[f64; 3]> {
        self.world.check_prompt(prompt)?;
        let latents = eval_latents(&self.world, self.seed, VIEW_SAMPLES);
        let e = evaluate_prompt(&self.model, &self.world, &self.weights, prompt, &latents)?;
        Ok([e.loss.t, e.unedited_text_loss, e.oracle_text_loss])
    }

    /// Rows of `[λ, readout_a, readout_b]`, flattened, for the first held-out
    /// latent.
    pub fn interpolate(&self, a: Prompt, b: Prompt, steps: usize) -> Result<Vec<f64>> {
        self.world.check_prompt(a)?;
        self.world.check_prompt(b)?;
        let w = eval_latents(&self.world, self.seed, 1).remove(0);
        let rows = interpolation_table(&self.model, &self.world, &w, a, b, steps)?;
        Ok(rows.iter().flat_map(|r| [r.lambda, r.readout_a, r.readout_b]).collect())
    }
}

fn js(e: semod::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn prompt(spec: &str) -> std::result::Result<Prompt, JsError> {
    Prompt::parse(spec).map_err(js)
}

#[wasm_bindgen]
pub struct Demo(Lab);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, epsilon: f64) -> std::result::Result<Demo, JsError> {
        Lab::new(seed.into(), epsilon).map(Demo).map_err(js)
    }

    pub fn layers(&self) -> usize {
        self.0.layers()
    }

    pub fn blocks(&self) -> usize {
        self.0.blocks()
    }

    #[wasm_bindgen(js_name = hostLayers)]
    pub fn host_layers(&self) -> Vec<u32> {
        self.0.host_layers().into_iter().map(|l| l as u32).collect()
    }

    pub fn iteration(&self) -> usize {
        self.0.iteration()
    }

    pub fn train(&mut self, iterations: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.0.train(iterations).map(<[f64]>::to_vec).map_err(js)
    }

    pub fn attention(&self, spec: &str) -> std::result::Result<Vec<f64>, JsError> {
        self.0.attention(prompt(spec)?).map_err(js)
    }

    #[wasm_bindgen(js_name = textLosses)]
    pub fn text_losses(&self, spec: &str) -> std::result::Result<Vec<f64>, JsError> {
        self.0.text_losses(prompt(spec)?).map(|l| l.to_vec()).map_err(js)
    }

    pub fn interpolate(&self, a: &str, b: &str, steps: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.0.interpolate(prompt(a)?, prompt(b)?, steps).map_err(js)
    }
}
