//! Bodies of the command-line subcommands. Each writes plain CSV into an
//! output directory and depends only on its inputs and seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::RunConfig;
use crate::error::{contract, Error, Result};
use crate::eval::{argmax, eval_latents, evaluate, median, EvalReport, EVAL_SAMPLES};
use crate::gradcheck::SuiteReport;
use crate::losses::{text_loss, total_loss, LossWeights};
use crate::stack::{interpolate, ModulationModel, StackConfig, Variant};
use crate::tensor::Tensor;
use crate::trainer::{fmt_f64, init_model, train, write_metrics_csv, MetricsRecord, TrainConfig};
use crate::world::{Prompt, SynthWorld};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ffc";
pub const WORLD_FILE: &str = "world.ffw";
pub const CONFIG_FILE: &str = "config.toml";
pub const EDIT_FILE: &str = "edit.csv";
pub const SCALES_FILE: &str = "edit_scales.csv";
pub const INTERPOLATION_FILE: &str = "interpolate.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_ATTRIBUTES_FILE: &str = "eval_attributes.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";
pub const ABLATION_SUMMARY_FILE: &str = "ablation_summary.csv";

/// Seeds of a five-seed sweep starting at `base`.
pub fn sweep_seeds(base: u64) -> Vec<u64> {
    (base..base + 5).collect()
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cells(values: &[f64]) -> String {
    values.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(",")
}

/// Trained model, its training history and its held-out evaluation.
pub struct Fit {
    pub model: ModulationModel,
    pub history: Vec<MetricsRecord>,
    pub eval: EvalReport,
}

/// Trains a fresh model for `seed` and evaluates it on [`EVAL_SAMPLES`]
/// held-out latents drawn with the same seed.
pub fn fit(
    world: &SynthWorld,
    stack: &StackConfig,
    train_config: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
    out: Option<&Path>,
) -> Result<Fit> {
    let mut model = init_model(stack.clone(), seed)?;
    let tc = TrainConfig { seed, ..train_config.clone() };
    let report = train(&tc, weights, &mut model, world, out)?;
    let prompts = tc.prompt_set(world)?;
    let latents = eval_latents(world, seed, EVAL_SAMPLES);
    let eval = evaluate(&model, world, weights, &prompts, &latents)?;
    Ok(Fit { model, history: report.history, eval })
}

/// `train`: writes the world file, the resolved configuration, the metrics
/// CSV and checkpoints into `out`.
pub fn run_train(config: &RunConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    fs::create_dir_all(out)?;
    let world = SynthWorld::new(&config.world)?;
    world.save(&out.join(WORLD_FILE))?;
    fs::write(out.join(CONFIG_FILE), config.to_toml())?;
    let mut model = init_model(config.stack.clone(), config.seed)?;
    let report = train(&config.train, &config.loss, &mut model, &world, Some(out))?;
    let mut w = csv_writer(&out.join(METRICS_FILE))?;
    write_metrics_csv(&report.history, &mut w)?;
    w.flush()?;
    Ok(report.history)
}

pub const EDIT_HEADER: &str = "sample,prompt,total,sp,t,embd,norm,id,bg,unedited_t";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EditSummary {
    pub samples: usize,
    /// Samples whose text loss dropped below the unedited one.
    pub improved: usize,
}

/// `edit`: per-sample loss breakdown and every block's `S` for `samples`
/// held-out latents.
pub fn run_edit(
    model: &ModulationModel,
    world: &SynthWorld,
    weights: &LossWeights,
    prompt: Prompt,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<EditSummary> {
    world.check_prompt(prompt)?;
    fs::create_dir_all(out)?;
    let e_t = world.text_embedding(prompt)?;
    let layers = world.config().layers;
    let mut edits = csv_writer(&out.join(EDIT_FILE))?;
    let mut scales = csv_writer(&out.join(SCALES_FILE))?;
    writeln!(edits, "{EDIT_HEADER}")?;
    let s_cols: Vec<String> = (0..layers).map(|l| format!("s{l}")).collect();
    writeln!(scales, "sample,block,{}", s_cols.join(","))?;
    let mut improved = 0;
    for (i, w) in eval_latents(world, seed, samples).iter().enumerate() {
        let f = model.forward(w, &e_t)?;
        let l = total_loss(world, weights, w, &f.w_edit, &f.delta, prompt)?;
        let unedited = text_loss(world, w, prompt)?;
        improved += usize::from(l.t < unedited);
        let vals = [l.total, l.sp, l.t, l.embd, l.norm, l.id, l.bg, unedited];
        writeln!(edits, "{i},{prompt},{}", cells(&vals))?;
        for (b, s) in f.scales.iter().enumerate() {
            writeln!(scales, "{i},{b},{}", cells(s.data()))?;
        }
    }
    edits.flush()?;
    scales.flush()?;
    Ok(EditSummary { samples, improved })
}

#[derive(Clone, Debug)]
pub struct InterpolationRow {
    pub lambda: f64,
    pub code: Tensor,
    pub readout_a: f64,
    pub readout_b: f64,
}

/// Edits `w` under both prompts and blends the edited codes at `steps`
/// evenly spaced weights from 0 to 1.
pub fn interpolation_table(
    model: &ModulationModel,
    world: &SynthWorld,
    w: &Tensor,
    a: Prompt,
    b: Prompt,
    steps: usize,
) -> Result<Vec<InterpolationRow>> {
    if steps < 2 {
        return Err(Error::Config(format!("--lambda-steps must be at least 2, got {steps}")));
    }
    let w_a = model.forward(w, &world.text_embedding(a)?)?.w_edit;
    let w_b = model.forward(w, &world.text_embedding(b)?)?.w_edit;
    (0..steps)
        .map(|i| {
            let lambda = i as f64 / (steps - 1) as f64;
            let code = interpolate(&w_a, &w_b, lambda)?;
            Ok(InterpolationRow {
                lambda,
                readout_a: world.readout(&code, a.attribute)?,
                readout_b: world.readout(&code, b.attribute)?,
                code,
            })
        })
        .collect()
}

/// `interpolate`: blends the edits of one held-out latent.
#[allow(clippy::too_many_arguments)]
pub fn run_interpolate(
    model: &ModulationModel,
    world: &SynthWorld,
    a: Prompt,
    b: Prompt,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<InterpolationRow>> {
    world.check_prompt(a)?;
    world.check_prompt(b)?;
    let w = eval_latents(world, seed, 1).remove(0);
    let rows = interpolation_table(model, world, &w, a, b, steps)?;
    fs::create_dir_all(out)?;
    let mut f = csv_writer(&out.join(INTERPOLATION_FILE))?;
    writeln!(f, "step,lambda,readout_a,readout_b,text_loss_a,text_loss_b")?;
    for (i, r) in rows.iter().enumerate() {
        let vals = [r.lambda, r.readout_a, r.readout_b, text_loss(world, &r.code, a)?, text_loss(world, &r.code, b)?];
        writeln!(f, "{i},{}", cells(&vals))?;
    }
    f.flush()?;
    Ok(rows)
}

/// `eval`: per-prompt and per-attribute comparison with the edit oracle.
pub fn run_eval(
    model: &ModulationModel,
    world: &SynthWorld,
    weights: &LossWeights,
    prompts: &[Prompt],
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<EvalReport> {
    for &p in prompts {
        world.check_prompt(p)?;
    }
    let latents = eval_latents(world, seed, samples);
    let report = evaluate(model, world, weights, prompts, &latents)?;
    fs::create_dir_all(out)?;
    let layer = |i: Option<usize>| i.map_or_else(|| "-".to_string(), |l| l.to_string());
    let mut f = csv_writer(&out.join(EVAL_FILE))?;
    writeln!(f, "prompt,host_layer,argmax_layer,total,t,oracle_t,gap,unedited_t")?;
    for p in &report.prompts {
        let host = world.attributes()[p.prompt.attribute].host_layer;
        let vals = [p.loss.total, p.loss.t, p.oracle_text_loss, p.text_gap(), p.unedited_text_loss];
        writeln!(f, "{},{host},{},{}", p.prompt, layer(argmax(&p.mean_scale)), cells(&vals))?;
    }
    f.flush()?;
    let mut f = csv_writer(&out.join(EVAL_ATTRIBUTES_FILE))?;
    let s_cols: Vec<String> = (0..world.config().layers).map(|l| format!("s{l}")).collect();
    writeln!(f, "attribute,host_layer,argmax_layer,recovered,t,oracle_t,gap,{}", s_cols.join(","))?;
    for a in &report.attributes {
        let vals = [a.text_loss, a.oracle_text_loss, a.text_gap()];
        let s =
            if a.mean_scale.is_empty() { vec!["-".to_string(); s_cols.len()].join(",") } else { cells(&a.mean_scale) };
        writeln!(
            f,
            "attr{},{},{},{},{},{s}",
            a.attribute,
            a.host_layer,
            layer(a.argmax_layer()),
            a.recovered(),
            cells(&vals)
        )?;
    }
    f.flush()?;
    Ok(report)
}

/// One column of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationColumn {
    pub name: String,
    pub stack: StackConfig,
}

/// Block-count sweep used by the ablation.
pub const BLOCK_SWEEP: [usize; 5] = [0, 2, 4, 6, 10];

/// The four alignment variants at the configured depth, then the block
/// sweep with full alignment (`k0` is the mapper baseline).
pub fn ablation_columns(base: &StackConfig) -> Vec<AblationColumn> {
    let mut cols: Vec<AblationColumn> = [Variant::Full, Variant::NoS, Variant::NoT, Variant::NoSt]
        .into_iter()
        .map(|v| AblationColumn { name: v.name().to_string(), stack: StackConfig { variant: v, ..base.clone() } })
        .collect();
    let full = StackConfig { variant: Variant::Full, ..base.clone() };
    cols.extend(BLOCK_SWEEP.iter().map(|&k| AblationColumn { name: format!("k{k}"), stack: full.with_blocks(k) }));
    cols
}

pub const ABLATION_METRICS: [&str; 9] = ["total", "sp", "t", "embd", "norm", "id", "bg", "oracle_gap", "recovered"];

fn ablation_metrics(eval: &EvalReport) -> [f64; 9] {
    let o = &eval.overall;
    let n = eval.attributes.len().max(1) as f64;
    let gap = eval.attributes.iter().map(|a| a.text_gap()).sum::<f64>() / n;
    [o.total, o.sp, o.t, o.embd, o.norm, o.id, o.bg, gap, eval.recovered_count() as f64]
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub columns: Vec<AblationColumn>,
    pub seeds: Vec<u64>,
    /// `runs[c][s]`: metrics of column `c` at seed `s`, in
    /// [`ABLATION_METRICS`] order.
    pub runs: Vec<Vec<[f64; 9]>>,
}

impl AblationTable {
    pub fn median(&self, column: &str, metric: &str) -> Option<f64> {
        let c = self.columns.iter().position(|c| c.name == column)?;
        let m = ABLATION_METRICS.iter().position(|&x| x == metric)?;
        Some(median(&self.runs[c].iter().map(|r| r[m]).collect::<Vec<_>>()))
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        let mut f = csv_writer(&out.join(ABLATION_RUNS_FILE))?;
        writeln!(f, "variant,seed,{}", ABLATION_METRICS.join(","))?;
        for (c, col) in self.columns.iter().enumerate() {
            for (s, seed) in self.seeds.iter().enumerate() {
                writeln!(f, "{},{seed},{}", col.name, cells(&self.runs[c][s]))?;
            }
        }
        f.flush()?;
        let mut f = csv_writer(&out.join(ABLATION_SUMMARY_FILE))?;
        let names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        writeln!(f, "metric,{}", names.join(","))?;
        for metric in ABLATION_METRICS {
            let meds: Vec<f64> = names.iter().map(|n| self.median(n, metric).expect("known")).collect();
            writeln!(f, "{metric},{}", cells(&meds))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Worker cap from `FFC_THREADS`, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var("FFC_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains and evaluates every (column, seed) pair. Identical configurations
/// are trained once; jobs run on up to `threads` workers and results are
/// placed by index, so the table does not depend on scheduling.
pub fn run_ablation(config: &RunConfig, seeds: &[u64], threads: usize) -> Result<AblationTable> {
    let world = SynthWorld::new(&config.world)?;
    let columns = ablation_columns(&config.stack);
    let mut jobs: Vec<(StackConfig, u64)> = Vec::new();
    let mut slot = vec![vec![0usize; seeds.len()]; columns.len()];
    for (c, col) in columns.iter().enumerate() {
        for (s, &seed) in seeds.iter().enumerate() {
            let key = (col.stack.clone(), seed);
            slot[c][s] = match jobs.iter().position(|j| *j == key) {
                Some(i) => i,
                None => {
                    jobs.push(key);
                    jobs.len() - 1
                }
            };
        }
    }
    let results: Mutex<Vec<Option<Result<[f64; 9]>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((stack, seed)) = jobs.get(i) else { break };
                let r = fit(&world, stack, &config.train, &config.loss, *seed, None).map(|f| ablation_metrics(&f.eval));
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let results: Vec<[f64; 9]> = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_>>()?;
    let runs = slot.iter().map(|row| row.iter().map(|&i| results[i]).collect()).collect();
    Ok(AblationTable { columns, seeds: seeds.to_vec(), runs })
}

/// Plain-text table of a gradient-check run.
pub fn format_gradcheck(report: &SuiteReport) -> String {
    let mut s = format!(
        "{:<24} {:>6} {:>7} {:>7} {:>7} {:>8} {:>12}  status\n",
        "case", "trials", "probes", "skipped", "redrawn", "failures", "max_rel_err"
    );
    for c in &report.cases {
        s.push_str(&format!(
            "{:<24} {:>6} {:>7} {:>7} {:>7} {:>8} {:>12.3e}  {}\n",
            c.name,
            c.trials,
            c.probes,
            c.skipped,
            c.redrawn,
            c.failures,
            c.max_rel_err,
            if c.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}

/// Parses `LxD` for the gradient-check dimensions.
pub fn parse_dims(spec: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("dims {spec:?} are not of the form LxD"));
    let (l, d) = spec.split_once('x').ok_or_else(bad)?;
    let (l, d) = (l.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?);
    if l == 0 || d == 0 {
        return Err(contract("dims must be positive"));
    }
    Ok((l, d))
}

/// Exit code for an error: 2 for usage and configuration problems, 1 for
/// runtime and numeric failures.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Degenerate(_) | Error::NonFinite(_) | Error::Parse { .. } | Error::Io(_) => 1,
    }
}
