//! Held-out evaluation: loss breakdowns, the gap to the least-squares edit
//! oracle, and where the first block's position attention points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{text_loss, total_loss, LossBreakdown, LossWeights};
use crate::stack::ModulationModel;
use crate::tensor::Tensor;
use crate::world::{Prompt, SynthWorld};

/// Number of held-out latent codes per prompt.
pub const EVAL_SAMPLES: usize = 64;

/// Held-out latents drawn from a stream no training run uses.
pub fn eval_latents(world: &SynthWorld, seed: u64, n: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    (0..n).map(|_| world.sample_latent(&mut rng)).collect()
}

#[derive(Clone, Debug)]
pub struct PromptEval {
    pub prompt: Prompt,
    pub loss: LossBreakdown,
    pub unedited_text_loss: f64,
    pub oracle_text_loss: f64,
    /// First block's `S` averaged over the samples; empty for the mapper.
    pub mean_scale: Vec<f64>,
}

impl PromptEval {
    pub fn text_gap(&self) -> f64 {
        self.loss.t - self.oracle_text_loss
    }
}

#[derive(Clone, Debug)]
pub struct AttributeEval {
    pub attribute: usize,
    pub host_layer: usize,
    pub text_loss: f64,
    pub oracle_text_loss: f64,
    /// First block's `S` averaged over both signs and all samples.
    pub mean_scale: Vec<f64>,
}

impl AttributeEval {
    pub fn argmax_layer(&self) -> Option<usize> {
        argmax(&self.mean_scale)
    }

    pub fn recovered(&self) -> bool {
        self.argmax_layer() == Some(self.host_layer)
    }

    pub fn text_gap(&self) -> f64 {
        self.text_loss - self.oracle_text_loss
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub prompts: Vec<PromptEval>,
    pub attributes: Vec<AttributeEval>,
    /// Mean breakdown over every prompt and sample.
    pub overall: LossBreakdown,
}

impl EvalReport {
    pub fn recovered_count(&self) -> usize {
        self.attributes.iter().filter(|a| a.recovered()).count()
    }
}

pub fn argmax(xs: &[f64]) -> Option<usize> {
    xs.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &x)| match best {
            Some((_, b)) if b >= x => best,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}

fn mean_vec(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else { return Vec::new() };
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

pub fn evaluate_prompt(
    model: &ModulationModel,
    world: &SynthWorld,
    weights: &LossWeights,
    prompt: Prompt,
    latents: &[Tensor],
) -> Result<PromptEval> {
    let e_t = world.text_embedding(prompt)?;
    let mut losses = Vec::with_capacity(latents.len());
    let mut scales = Vec::new();
    let (mut unedited, mut oracle) = (0.0, 0.0);
    for w in latents {
        let f = model.forward(w, &e_t)?;
        losses.push(total_loss(world, weights, w, &f.w_edit, &f.delta, prompt)?);
        if let Some(s) = f.scales.first() {
            scales.push(s.data().to_vec());
        }
        unedited += text_loss(world, w, prompt)?;
        let star = world.oracle_edit(w, prompt)?;
        let edited = Tensor::new(w.dims().to_vec(), w.data().iter().zip(star.data()).map(|(a, b)| a + b).collect())?;
        oracle += text_loss(world, &edited, prompt)?;
    }
    let n = latents.len().max(1) as f64;
    Ok(PromptEval {
        prompt,
        loss: LossBreakdown::mean(&losses),
        unedited_text_loss: unedited / n,
        oracle_text_loss: oracle / n,
        mean_scale: mean_vec(&scales),
    })
}

pub fn evaluate(
    model: &ModulationModel,
    world: &SynthWorld,
    weights: &LossWeights,
    prompts: &[Prompt],
    latents: &[Tensor],
) -> Result<EvalReport> {
    let evals =
        prompts.iter().map(|&p| evaluate_prompt(model, world, weights, p, latents)).collect::<Result<Vec<_>>>()?;
    let attributes = (0..world.attributes().len())
        .filter_map(|a| {
            let mine: Vec<&PromptEval> = evals.iter().filter(|e| e.prompt.attribute == a).collect();
            if mine.is_empty() {
                return None;
            }
            let k = mine.len() as f64;
            Some(AttributeEval {
                attribute: a,
                host_layer: world.attributes()[a].host_layer,
                text_loss: mine.iter().map(|e| e.loss.t).sum::<f64>() / k,
                oracle_text_loss: mine.iter().map(|e| e.oracle_text_loss).sum::<f64>() / k,
                mean_scale: mean_vec(&mine.iter().map(|e| e.mean_scale.clone()).collect::<Vec<_>>()),
            })
        })
        .collect();
    let overall = LossBreakdown::mean(&evals.iter().map(|e| e.loss).collect::<Vec<_>>());
    Ok(EvalReport { prompts: evals, attributes, overall })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
