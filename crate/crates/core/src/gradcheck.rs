//! Finite-difference verification of every backward rule.
//!
//! Each case records random inputs on a fresh tape, reduces its outputs to a
//! scalar with a random projection, and compares the reverse-mode gradient to
//! central differences element by element. Probes where an `|·|` kink lies
//! between `x − h` and `x + h` are skipped and counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{align, align_block, channel_attention, position_attention, AlignMode, AlignmentVars};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::injection::{inject, injection_params, InjectionVars};
use crate::losses::{reference_on, total_loss_on, LossWeights};
use crate::stack::{ModulationModel, StackConfig, Variant};
use crate::tensor::Tensor;
use crate::world::{Prompt, SynthWorld, WorldConfig};

/// Central-difference step.
pub const STEP: f64 = 1e-3;
/// Bound on `|g_ad − g_fd| / max(1, |g_fd|)`.
pub const TOLERANCE: f64 = 1e-4;
pub const TRIALS: usize = 100;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub layers: usize,
    pub channels: usize,
    pub trials: usize,
    pub seed: u64,
    /// Backward rule to negate, for checking that the suite can fail.
    pub fault: Option<&'static str>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { layers: 3, channels: 4, trials: TRIALS, seed: 0, fault: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CaseReport {
    pub name: String,
    pub trials: usize,
    pub probes: usize,
    pub skipped: usize,
    /// Draws replaced because they were ill-conditioned.
    pub redrawn: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.probes > 0
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(CaseReport::passed)
    }

    pub fn failures(&self) -> usize {
        self.cases.iter().map(|c| c.failures).sum()
    }
}

/// What a case records: the probed parameters (in input order), the outputs
/// to project, and values whose sign must not change across a probe.
pub struct Built {
    pub params: Vec<Var>,
    pub outputs: Vec<Var>,
    pub kinks: Vec<Var>,
    /// False when the draw sits next to a singularity of the objective; such
    /// draws are replaced.
    pub well_conditioned: bool,
}

type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Builder = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<Built>>;

pub struct Case {
    pub name: String,
    sample: Sampler,
    build: Builder,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        sample: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        build: impl Fn(&mut Tape, &[Tensor]) -> Result<Built> + 'static,
    ) -> Self {
        Self { name: name.into(), sample: Box::new(sample), build: Box::new(build) }
    }

    /// A case whose inputs are all probed parameters.
    fn simple(
        name: &str,
        sample: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + 'static,
    ) -> Self {
        Self::new(name, sample, move |tape, xs| {
            let params: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let outputs = f(tape, &params)?;
            Ok(Built { params, outputs, kinks: Vec::new(), well_conditioned: true })
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("dims")
}

fn signed_away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    uniform(rng, dims, 0.5, 1.5).map(|x| if rng.gen_bool(0.5) { x } else { -x })
}

fn objective(tape: &Tape, outputs: &[Var], projections: &[Tensor]) -> f64 {
    outputs
        .iter()
        .zip(projections)
        .map(|(&o, r)| tape.value(o).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn kink_signs(tape: &Tape, kinks: &[Var]) -> Vec<bool> {
    kinks.iter().flat_map(|&k| tape.value(k).data().iter().map(|&x| x > 0.0)).collect()
}

struct Evaluation {
    value: f64,
    signs: Vec<bool>,
}

fn evaluate(case: &Case, inputs: &[Tensor], projections: &[Tensor]) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let built = (case.build)(&mut tape, inputs)?;
    Ok(Evaluation { value: objective(&tape, &built.outputs, projections), signs: kink_signs(&tape, &built.kinks) })
}

fn min_row_std(x: &Tensor) -> f64 {
    let (m, n) = x.shape2();
    (0..m)
        .map(|i| {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Draws per trial before giving up on finding a well-conditioned one.
const MAX_DRAWS: usize = 1000;

/// Runs one case for `trials` random draws.
pub fn run_case(case: &Case, trials: usize, rng: &mut ChaCha8Rng, fault: Option<&'static str>) -> Result<CaseReport> {
    let mut report = CaseReport { name: case.name.clone(), trials, ..Default::default() };
    for _ in 0..trials {
        let mut draws = 0;
        let (inputs, mut tape, built) = loop {
            let inputs = (case.sample)(rng);
            let mut tape = Tape::new();
            if let Some(rule) = fault {
                tape.negate_backward_rule(rule);
            }
            let built = (case.build)(&mut tape, &inputs)?;
            draws += 1;
            if built.well_conditioned {
                break (inputs, tape, built);
            }
            if draws == MAX_DRAWS {
                return Err(Error::Degenerate(format!("{}: no well-conditioned draw", case.name)));
            }
            report.redrawn += 1;
        };
        let projections: Vec<Tensor> =
            built.outputs.iter().map(|&o| uniform(rng, tape.value(o).dims(), -1.0, 1.0)).collect();
        let mut terms = Vec::with_capacity(built.outputs.len());
        for (&o, r) in built.outputs.iter().zip(&projections) {
            let r = tape.constant(r.clone());
            let prod = tape.mul(o, r)?;
            terms.push((1.0, tape.sum(prod)));
        }
        let root = tape.weighted_sum(&terms)?;
        tape.backward(root)?;
        for (i, &p) in built.params.iter().enumerate() {
            let analytic = tape.grad(p).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
            for (j, &exact) in analytic.iter().enumerate() {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] = inputs[i].data()[j] + STEP;
                let plus = evaluate(case, &shifted, &projections)?;
                shifted[i].data_mut()[j] = inputs[i].data()[j] - STEP;
                let minus = evaluate(case, &shifted, &projections)?;
                if plus.signs != minus.signs {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus.value - minus.value) / (2.0 * STEP);
                let rel = (exact - numeric).abs() / numeric.abs().max(1.0);
                report.probes += 1;
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel.is_nan() || rel >= TOLERANCE {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Every case of the suite at the configured dimensions.
pub fn cases(config: &GradcheckConfig) -> Result<Vec<Case>> {
    let (l, d) = (config.layers, config.channels);
    let mut out = vec![
        Case::simple(
            "matmul",
            move |r| vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[d, l], -1.0, 1.0)],
            |t, v| Ok(vec![t.matmul(v[0], v[1])?]),
        ),
        Case::simple("transpose", move |r| vec![uniform(r, &[l, d], -1.0, 1.0)], |t, v| Ok(vec![t.transpose(v[0])?])),
        Case::simple(
            "add",
            move |r| vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[l, d], -1.0, 1.0)],
            |t, v| Ok(vec![t.add(v[0], v[1])?]),
        ),
        Case::simple(
            "sub",
            move |r| vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[l, d], -1.0, 1.0)],
            |t, v| Ok(vec![t.sub(v[0], v[1])?]),
        ),
        Case::simple(
            "mul",
            move |r| vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[l, d], -1.0, 1.0)],
            |t, v| Ok(vec![t.mul(v[0], v[1])?]),
        ),
        Case::simple(
            "div",
            move |r| vec![uniform(r, &[l, d], -1.0, 1.0), signed_away_from_zero(r, &[l, d])],
            |t, v| Ok(vec![t.div(v[0], v[1])?]),
        ),
        Case::simple("scale", move |r| vec![uniform(r, &[l, d], -1.0, 1.0)], |t, v| Ok(vec![t.scale(v[0], -1.7)])),
        Case::simple(
            "add_scalar",
            move |r| vec![uniform(r, &[l, d], -1.0, 1.0)],
            |t, v| Ok(vec![t.add_scalar(v[0], 0.3)]),
        ),
        Case::simple(
            "broadcast_rows",
            move |r| vec![uniform(r, &[d], -1.0, 1.0)],
            move |t, v| Ok(vec![t.broadcast_rows(v[0], l)?]),
        ),
        Case::simple(
            "broadcast_cols",
            move |r| vec![uniform(r, &[l], -1.0, 1.0)],
            move |t, v| Ok(vec![t.broadcast_cols(v[0], d)?]),
        ),
        Case::simple(
            "reshape",
            move |r| vec![uniform(r, &[l, d], -1.0, 1.0)],
            move |t, v| Ok(vec![t.reshape(v[0], &[d, l])?]),
        ),
        Case::simple("tanh", move |r| vec![uniform(r, &[l, d], -2.0, 2.0)], |t, v| Ok(vec![t.tanh(v[0])])),
        Case::simple(
            "softmax_row",
            move |r| vec![uniform(r, &[l, d], -2.0, 2.0)],
            |t, v| Ok(vec![t.softmax_row(v[0])?]),
        ),
        Case::simple("row_mean", move |r| vec![uniform(r, &[l, d], -1.0, 1.0)], |t, v| Ok(vec![t.row_mean(v[0])])),
        Case::simple(
            "row_stats",
            move |r| vec![uniform(r, &[l, d], -1.0, 1.0)],
            |t, v| {
                let (mean, std) = t.row_stats(v[0]);
                Ok(vec![mean, std])
            },
        ),
        Case::simple("sum", move |r| vec![uniform(r, &[l, d], -1.0, 1.0)], |t, v| Ok(vec![t.sum(v[0])])),
        Case::new(
            "l1_norm",
            move |r| vec![uniform(r, &[l, d], -1.0, 1.0)],
            |t, xs| {
                let x = t.param(xs[0].clone());
                Ok(Built { params: vec![x], outputs: vec![t.l1_norm(x)], kinks: vec![x], well_conditioned: true })
            },
        ),
        Case::simple(
            "cosine_similarity",
            move |r| vec![uniform(r, &[l * d], -1.0, 1.0), uniform(r, &[l * d], -1.0, 1.0)],
            |t, v| Ok(vec![t.cosine_similarity(v[0], v[1])?]),
        ),
        Case::simple(
            "masked_l2",
            move |r| vec![uniform(r, &[l * d], -1.0, 1.0)],
            move |t, v| {
                let mask: Vec<f64> = (0..l * d).map(|i| if i % 3 == 1 { 0.0 } else { 1.0 }).collect();
                Ok(vec![t.masked_l2(v[0], &mask)?])
            },
        ),
        Case::simple(
            "affine",
            move |r| vec![uniform(r, &[d], -1.0, 1.0), uniform(r, &[d, d], -1.0, 1.0), uniform(r, &[d], -1.0, 1.0)],
            |t, v| Ok(vec![t.affine(v[0], v[1], v[2])?]),
        ),
        Case::simple(
            "weighted_sum",
            |r| vec![uniform(r, &[1], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0)],
            |t, v| Ok(vec![t.weighted_sum(&[(0.5, v[0]), (-2.0, v[1]), (1.25, v[2])])?]),
        ),
    ];

    let attention_inputs = move |r: &mut ChaCha8Rng| {
        let bound = 1.0 / (d as f64).sqrt();
        vec![
            uniform(r, &[d], -1.0, 1.0),
            uniform(r, &[l, d], -1.0, 1.0),
            uniform(r, &[d, d], -bound, bound),
            uniform(r, &[d, d], -bound, bound),
            uniform(r, &[d, d], -bound, bound),
            uniform(r, &[1, l], -bound, bound),
        ]
    };
    let attention_vars = |v: &[Var]| AlignmentVars { wq: v[2], wk: v[3], wv: v[4], wqc: v[5] };
    out.push(Case::simple("position_attention", attention_inputs, move |t, v| {
        Ok(vec![position_attention(t, v[0], v[1], &attention_vars(v))?])
    }));
    out.push(Case::simple("channel_attention", attention_inputs, move |t, v| {
        let (translation, map) = channel_attention(t, v[0], v[1], &attention_vars(v))?;
        Ok(vec![translation, map])
    }));
    out.push(Case::simple(
        "align",
        move |r| vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[l], 0.0, 1.0), uniform(r, &[d], -1.0, 1.0)],
        |t, v| Ok(vec![align(t, v[0], v[1], v[2], AlignMode::FULL)?]),
    ));
    for variant in [Variant::Full, Variant::NoS, Variant::NoT, Variant::NoSt] {
        out.push(Case::simple(&format!("align_block[{variant}]"), attention_inputs, move |t, v| {
            let a = align_block(t, v[0], v[1], &attention_vars(v), variant.align_mode())?;
            Ok(vec![a.x, a.scale, a.translation])
        }));
    }
    let injection_inputs = move |r: &mut ChaCha8Rng| {
        vec![
            uniform(r, &[d], -1.0, 1.0),
            uniform(r, &[d, d], -0.5, 0.5),
            uniform(r, &[d], -0.5, 0.5),
            uniform(r, &[d, d], -0.5, 0.5),
            uniform(r, &[d], -0.5, 0.5),
        ]
    };
    out.push(Case::simple("injection_params", injection_inputs, |t, v| {
        let p = InjectionVars { gamma_weight: v[1], gamma_bias: v[2], beta_weight: v[3], beta_bias: v[4] };
        let (beta, gamma) = injection_params(t, v[0], &p)?;
        Ok(vec![beta, gamma])
    }));
    out.push(Case::new(
        "inject",
        move |r| vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[d], -1.0, 1.0), uniform(r, &[d], -1.0, 1.0)],
        |t, xs| {
            let params: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
            let out = inject(t, params[0], params[1], params[2])?;
            let well_conditioned = min_row_std(&xs[0]) >= MIN_ROW_STD;
            Ok(Built { params, outputs: vec![out], kinks: Vec::new(), well_conditioned })
        },
    ));

    let weights = LossWeights::default();
    let stack = StackConfig { blocks: 2, layers: l, channels: d, embed: d, variant: Variant::Full, offset_scale: 1.0 };
    out.push(end_to_end("total_loss[k=2]", gradcheck_world(l, d, 0.5, 0.5)?, weights.clone(), stack.clone())?);
    out.push(end_to_end("total_loss[mapper]", gradcheck_world(l, d, 0.25, 2.0)?, weights, stack.with_blocks(0))?);
    Ok(out)
}

/// Rows entering a normalization must be at least this spread; closer to a
/// constant row the curvature (∝ 1/σ²) swamps a step of 1e-3.
pub const MIN_ROW_STD: f64 = 0.3;

/// Small world for the end-to-end checks.
///
/// Gain and latent spread trade off: the block stack's attention sharpens
/// with larger latents, while the mapper's cosine losses curve less. Each
/// end-to-end case uses the pair that keeps its truncation error well below
/// tolerance.
pub fn gradcheck_world(layers: usize, channels: usize, gain: f64, latent_std: f64) -> Result<SynthWorld> {
    SynthWorld::new(&WorldConfig {
        seed: 1,
        layers,
        channels,
        embed: channels,
        image_dim: (layers + 2) * channels,
        attributes: layers.min(channels).min(3),
        epsilon: 0.05,
        generator_gain: gain,
        latent_mean_scale: 1.0,
        latent_std,
        attribute_target: 2.0,
    })
}

/// Total loss of one random (latent, prompt) pair, differentiated with
/// respect to every model parameter. The trailing two inputs are the latent
/// and text embedding, recorded as constants.
fn end_to_end(name: &str, world: SynthWorld, weights: LossWeights, stack: StackConfig) -> Result<Case> {
    let template = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ModulationModel::init(stack, &mut rng)?
    };
    let n_params = template.named_params().len();
    let sampler_world = world.clone();
    let sampler_template = template.clone();
    let sample = move |r: &mut ChaCha8Rng| {
        let mut xs: Vec<Tensor> = sampler_template
            .named_params()
            .iter()
            .map(|(name, p)| {
                // Injection output is invariant to the scale of the value
                // projection, so its curvature falls like 1/‖Wv‖²; a large
                // Wv and small γ maps keep the truncation error down.
                let bound = if name.ends_with(".wv") {
                    3.0
                } else if name.contains("gamma") {
                    0.1
                } else {
                    0.3
                };
                uniform(r, p.dims(), -bound, bound)
            })
            .collect();
        xs.push(sampler_world.sample_latent(r));
        let attribute = r.gen_range(0..sampler_world.attributes().len());
        let prompt = Prompt { attribute, sign: if r.gen_bool(0.5) { 1 } else { -1 } };
        xs.push(sampler_world.text_embedding(prompt).expect("valid prompt"));
        xs
    };
    let build = move |tape: &mut Tape, xs: &[Tensor]| {
        let mut model = template.clone();
        for (p, x) in model.params_mut().into_iter().zip(xs) {
            *p = x.clone();
        }
        let bound = model.bind(tape);
        let vars = world.bind(tape);
        let w = tape.constant(xs[n_params].clone());
        let e = tape.constant(xs[n_params + 1].clone());
        let f = model.forward_on(tape, &bound, w, e)?;
        let reference = reference_on(tape, &world, &vars, &weights, w)?;
        let loss = total_loss_on(tape, &world, &vars, &weights, &reference, f.w_edit, f.delta, e)?;
        let well_conditioned = f.aligned.iter().all(|&x| min_row_std(tape.value(x)) >= MIN_ROW_STD);
        Ok(Built { params: bound.params.clone(), outputs: vec![loss.total], kinks: vec![f.delta], well_conditioned })
    };
    Ok(Case::new(name, sample, build))
}

/// Runs every case; each gets its own random stream of `config.seed`.
pub fn run_suite(config: &GradcheckConfig) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for (i, case) in cases(config)?.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        report.cases.push(run_case(case, config.trials, &mut rng, config.fault)?);
    }
    Ok(report)
}
