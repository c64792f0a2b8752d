//! A chain of `k` semantic modulation blocks refining the latent offset, plus
//! the per-layer mapper used as the zero-block baseline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_block, AlignMode, AlignmentParams, AlignmentVars};
use crate::autograd::{Tape, Var};
use crate::container;
use crate::error::{contract, Error, Result};
use crate::injection::{inject, injection_params, InjectionParams, InjectionVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoS,
    NoT,
    NoSt,
    MapperBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoS, Variant::NoT, Variant::NoSt, Variant::MapperBaseline];

    pub fn align_mode(self) -> AlignMode {
        match self {
            Variant::Full | Variant::MapperBaseline => AlignMode::FULL,
            Variant::NoS => AlignMode { scale: false, translation: true },
            Variant::NoT => AlignMode { scale: true, translation: false },
            Variant::NoSt => AlignMode { scale: false, translation: false },
        }
    }

    fn code(self) -> f64 {
        Self::ALL.iter().position(|&v| v == self).expect("listed") as f64
    }

    fn from_code(c: f64) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoS => "no_s",
            Variant::NoT => "no_t",
            Variant::NoSt => "no_st",
            Variant::MapperBaseline => "mapper_baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| contract(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    /// Number of modulation blocks.
    pub blocks: usize,
    pub layers: usize,
    pub channels: usize,
    pub embed: usize,
    pub variant: Variant,
    /// Multiplier applied to the refined offset before it is added to `w`.
    pub offset_scale: f64,
}

/// Offset scale matched to the desk world's latent variation: a freshly
/// initialized stack emits unit-std rows, which must start on the scale of
/// the per-sample spread rather than hundreds of times larger.
pub const DESK_OFFSET_SCALE: f64 = 0.005;

impl StackConfig {
    pub fn desk() -> Self {
        Self { blocks: 4, layers: 6, channels: 16, embed: 16, variant: Variant::Full, offset_scale: DESK_OFFSET_SCALE }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.embed == 0 {
            return Err(contract("layers, channels and embed must be positive"));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return Err(contract("offset_scale must be a positive finite number"));
        }
        match self.variant {
            Variant::MapperBaseline => {
                if self.blocks != 0 {
                    return Err(contract("mapper_baseline requires blocks = 0"));
                }
            }
            _ => {
                if self.blocks == 0 {
                    return Err(contract("blocks = 0 is only meaningful with variant mapper_baseline"));
                }
                if self.embed != self.channels {
                    return Err(contract(format!(
                        "channel attention needs embed ({}) equal to channels ({})",
                        self.embed, self.channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// The configuration used for a block-count sweep entry; zero blocks
    /// selects the mapper baseline.
    pub fn with_blocks(&self, blocks: usize) -> Self {
        let variant = if blocks == 0 { Variant::MapperBaseline } else { self.variant };
        Self { blocks, variant, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub alignment: AlignmentParams,
    pub injection: InjectionParams,
}

/// Four-layer per-row mapper: the first layer sees a latent row and the text
/// embedding, the rest are row-wise affine maps with `tanh` in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mapper {
    pub latent_in: Tensor,
    pub text_in: Tensor,
    pub weights: [Tensor; 3],
    pub biases: [Tensor; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulationModel {
    config: StackConfig,
    pub blocks: Vec<Block>,
    pub mapper: Option<Mapper>,
}

/// Offset and edited code produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub delta: Tensor,
    pub w_edit: Tensor,
    /// Scale vector `S` of every block, in block order.
    pub scales: Vec<Tensor>,
    /// Offset fed into each block (`Δw₀ = w` first).
    pub block_inputs: Vec<Tensor>,
    pub block_outputs: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub delta: Var,
    pub w_edit: Var,
    pub scales: Vec<Var>,
    pub block_inputs: Vec<Var>,
    /// Aligned offset `x` entering each block's injection.
    pub aligned: Vec<Var>,
    pub block_outputs: Vec<Var>,
}

/// Model parameters recorded on a tape, in [`ModulationModel::named_params`]
/// order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    blocks: Vec<(AlignmentVars, InjectionVars)>,
    mapper: Option<MapperVars>,
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
struct MapperVars {
    latent_in: Var,
    text_in: Var,
    weights: [Var; 3],
    biases: [Var; 4],
}

impl ModulationModel {
    /// Attention projections are drawn uniformly from `±1/√D`; injection maps
    /// start at zero.
    pub fn init(config: StackConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (l, d, e) = (config.layers, config.channels, config.embed);
        let blocks = (0..config.blocks)
            .map(|_| Block { alignment: AlignmentParams::init(l, d, e, rng), injection: InjectionParams::zeros(d, e) })
            .collect();
        // Every mapper layer draws N(0, 1/fan_in) weights with zero biases,
        // the effective initialization of equalized-learning-rate layers.
        let mapper = (config.variant == Variant::MapperBaseline).then(|| {
            let mut gaussian = |dims: &[usize], fan_in: usize| {
                let std = 1.0 / (fan_in as f64).sqrt();
                let n = dims.iter().product();
                Tensor::new(dims.to_vec(), (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
                    .expect("dims")
            };
            Mapper {
                latent_in: gaussian(&[d, d], d + e),
                text_in: gaussian(&[e, d], d + e),
                weights: [gaussian(&[d, d], d), gaussian(&[d, d], d), gaussian(&[d, d], d)],
                biases: [Tensor::zeros(&[d]), Tensor::zeros(&[d]), Tensor::zeros(&[d]), Tensor::zeros(&[d])],
            }
        });
        Ok(Self { config, blocks, mapper })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let a = &b.alignment;
            let j = &b.injection;
            for (name, t) in [
                ("wq", &a.wq),
                ("wk", &a.wk),
                ("wv", &a.wv),
                ("wqc", &a.wqc),
                ("gamma_weight", &j.gamma_weight),
                ("gamma_bias", &j.gamma_bias),
                ("beta_weight", &j.beta_weight),
                ("beta_bias", &j.beta_bias),
            ] {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        if let Some(m) = &self.mapper {
            out.push(("mapper.latent_in".into(), &m.latent_in));
            out.push(("mapper.text_in".into(), &m.text_in));
            for (i, w) in m.weights.iter().enumerate() {
                out.push((format!("mapper.weight{}", i + 1), w));
            }
            for (i, b) in m.biases.iter().enumerate() {
                out.push((format!("mapper.bias{i}"), b));
            }
        }
        out
    }

    /// Mutable parameters in `named_params` order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            let a = &mut b.alignment;
            let j = &mut b.injection;
            out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wqc]);
            out.extend([&mut j.gamma_weight, &mut j.gamma_bias, &mut j.beta_weight, &mut j.beta_bias]);
        }
        if let Some(m) = &mut self.mapper {
            out.push(&mut m.latent_in);
            out.push(&mut m.text_in);
            out.extend(m.weights.iter_mut());
            out.extend(m.biases.iter_mut());
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut params = Vec::new();
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let a = b.alignment.bind(tape);
                let j = b.injection.bind(tape);
                params.extend(a.all());
                params.extend(j.all());
                (a, j)
            })
            .collect();
        let mapper = self.mapper.as_ref().map(|m| {
            let v = MapperVars {
                latent_in: tape.param(m.latent_in.clone()),
                text_in: tape.param(m.text_in.clone()),
                weights: m.weights.clone().map(|w| tape.param(w)),
                biases: m.biases.clone().map(|b| tape.param(b)),
            };
            params.push(v.latent_in);
            params.push(v.text_in);
            params.extend(v.weights);
            params.extend(v.biases);
            v
        });
        BoundModel { blocks, mapper, params }
    }

    fn check_inputs(&self, w: &Tensor, e_t: &Tensor) -> Result<()> {
        let c = &self.config;
        if w.dims() != [c.layers, c.channels] {
            return Err(contract(format!("latent code must be {}×{}, got {:?}", c.layers, c.channels, w.dims())));
        }
        if e_t.dims() != [c.embed] {
            return Err(contract(format!("text embedding must have length {}", c.embed)));
        }
        Ok(())
    }

    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundModel, w: Var, e_t: Var) -> Result<ForwardVars> {
        self.check_inputs(tape.value(w), tape.value(e_t))?;
        let mode = self.config.variant.align_mode();
        let mut scales = Vec::new();
        let mut block_inputs = Vec::new();
        let mut aligned_xs = Vec::new();
        let mut block_outputs = Vec::new();
        let refined = if let Some(m) = &bound.mapper {
            mapper_forward(tape, m, w, e_t)?
        } else {
            let mut delta = w;
            for (a, j) in &bound.blocks {
                block_inputs.push(delta);
                let aligned = align_block(tape, e_t, delta, a, mode)?;
                let (beta, gamma) = injection_params(tape, e_t, j)?;
                delta = inject(tape, aligned.x, beta, gamma)?;
                aligned_xs.push(aligned.x);
                scales.push(aligned.scale);
                block_outputs.push(delta);
            }
            delta
        };
        let delta = tape.scale(refined, self.config.offset_scale);
        let w_edit = tape.add(w, delta)?;
        Ok(ForwardVars { delta, w_edit, scales, block_inputs, aligned: aligned_xs, block_outputs })
    }

    pub fn forward(&self, w: &Tensor, e_t: &Tensor) -> Result<ForwardOutput> {
        self.check_inputs(w, e_t)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (wv, ev) = (tape.constant(w.clone()), tape.constant(e_t.clone()));
        let f = self.forward_on(&mut tape, &bound, wv, ev)?;
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(ForwardOutput {
            delta: tape.value(f.delta).clone(),
            w_edit: tape.value(f.w_edit).clone(),
            scales: grab(&f.scales),
            block_inputs: grab(&f.block_inputs),
            block_outputs: grab(&f.block_outputs),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let meta = Tensor::vector(vec![
            c.blocks as f64,
            c.layers as f64,
            c.channels as f64,
            c.embed as f64,
            c.variant.code(),
            c.offset_scale,
        ]);
        let mut entries = vec![(META.to_string(), meta)];
        entries.extend(self.named_params().into_iter().map(|(n, t)| (n, t.clone())));
        container::encode(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = container::decode(bytes)?;
        let Some((name, meta)) = entries.first() else {
            return Err(Error::Parse { offset: 12, msg: "checkpoint has no entries".into() });
        };
        if name != META || meta.len() != 6 {
            return Err(Error::Parse { offset: 12, msg: format!("expected {META} entry first") });
        }
        let m = meta.data();
        let as_count = |x: f64| {
            (x >= 0.0 && x.fract() == 0.0 && x < 1e12)
                .then_some(x as usize)
                .ok_or_else(|| contract(format!("invalid size {x} in checkpoint metadata")))
        };
        let config = StackConfig {
            blocks: as_count(m[0])?,
            layers: as_count(m[1])?,
            channels: as_count(m[2])?,
            embed: as_count(m[3])?,
            variant: Variant::from_code(m[4]).ok_or_else(|| contract(format!("unknown variant code {}", m[4])))?,
            offset_scale: m[5],
        };
        // Zero-initialized skeleton gives the expected names and shapes.
        let mut model = Self::skeleton(config)?;
        let expected: Vec<(String, Vec<usize>)> =
            model.named_params().into_iter().map(|(n, t)| (n, t.dims().to_vec())).collect();
        if entries.len() - 1 != expected.len() {
            return Err(contract(format!(
                "checkpoint holds {} tensors, configuration needs {}",
                entries.len() - 1,
                expected.len()
            )));
        }
        for (((name, t), (want, dims)), slot) in entries[1..].iter().zip(&expected).zip(model.params_mut()) {
            if name != want || t.dims() != dims.as_slice() {
                return Err(contract(format!(
                    "checkpoint entry {name} {:?} does not match expected {want} {dims:?}",
                    t.dims()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    fn skeleton(config: StackConfig) -> Result<Self> {
        config.validate()?;
        let (l, d, e) = (config.layers, config.channels, config.embed);
        let blocks = (0..config.blocks)
            .map(|_| Block { alignment: AlignmentParams::zeros(l, d, e), injection: InjectionParams::zeros(d, e) })
            .collect();
        let mapper = (config.variant == Variant::MapperBaseline).then(|| Mapper {
            latent_in: Tensor::zeros(&[d, d]),
            text_in: Tensor::zeros(&[e, d]),
            weights: [Tensor::zeros(&[d, d]), Tensor::zeros(&[d, d]), Tensor::zeros(&[d, d])],
            biases: [Tensor::zeros(&[d]), Tensor::zeros(&[d]), Tensor::zeros(&[d]), Tensor::zeros(&[d])],
        });
        Ok(Self { config, blocks, mapper })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads a checkpoint and checks it against an expected configuration.
    pub fn load_for(path: &Path, config: &StackConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if model.config != *config {
            return Err(contract(format!("checkpoint configuration {:?} does not match {:?}", model.config, config)));
        }
        Ok(model)
    }
}

const META: &str = "stack.meta";

fn mapper_forward(tape: &mut Tape, m: &MapperVars, w: Var, e_t: Var) -> Result<Var> {
    let l = tape.value(w).dims()[0];
    let text = tape.affine(e_t, m.text_in, m.biases[0])?;
    let text = tape.broadcast_rows(text, l)?;
    let h = tape.matmul(w, m.latent_in)?;
    let h = tape.add(h, text)?;
    let mut h = tape.tanh(h);
    for (i, &weight) in m.weights.iter().enumerate() {
        let z = tape.matmul(h, weight)?;
        let b = tape.broadcast_rows(m.biases[i + 1], l)?;
        let z = tape.add(z, b)?;
        h = if i + 1 < m.weights.len() { tape.tanh(z) } else { z };
    }
    Ok(h)
}

/// `w_a + λ(w_b − w_a)` for `λ ∈ [0, 1]`; both endpoints are reproduced
/// exactly.
pub fn interpolate(w_a: &Tensor, w_b: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract(format!("interpolation weight {lambda} outside [0, 1]")));
    }
    if w_a.dims() != w_b.dims() {
        return Err(contract(format!("cannot interpolate {:?} and {:?}", w_a.dims(), w_b.dims())));
    }
    if lambda == 1.0 {
        return Ok(w_b.clone());
    }
    let data = w_a.data().iter().zip(w_b.data()).map(|(&a, &b)| a + lambda * (b - a)).collect();
    Tensor::new(w_a.dims().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(blocks: usize) -> StackConfig {
        StackConfig { blocks, layers: 3, channels: 4, embed: 4, variant: Variant::Full, offset_scale: 1.0 }
    }

    #[test]
    fn config_validation() {
        assert!(small(0).validate().is_err());
        assert!(small(0).with_blocks(0).validate().is_ok());
        assert!(StackConfig { embed: 5, ..small(2) }.validate().is_err());
        assert!(StackConfig { offset_scale: 0.0, ..small(2) }.validate().is_err());
        assert!(StackConfig { variant: Variant::MapperBaseline, ..small(2) }.validate().is_err());
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn output_shape_for_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = StackConfig::desk();
        for k in [0, 2, 4, 6, 10] {
            let model = ModulationModel::init(base.with_blocks(k), &mut rng).unwrap();
            let w = random(&[6, 16], &mut rng);
            let e = random(&[16], &mut rng);
            let out = model.forward(&w, &e).unwrap();
            assert_eq!(out.delta.dims(), &[6, 16]);
            assert_eq!(out.w_edit.dims(), &[6, 16]);
            assert_eq!(out.scales.len(), k);
        }
    }

    #[test]
    fn blocks_chain_raw_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = ModulationModel::init(small(3), &mut rng).unwrap();
        for b in &mut model.blocks {
            b.injection.beta_bias = random(&[4], &mut rng);
            b.injection.gamma_weight = random(&[4, 4], &mut rng);
        }
        let w = random(&[3, 4], &mut rng);
        let out = model.forward(&w, &random(&[4], &mut rng)).unwrap();
        assert!(out.block_inputs[0].bit_eq(&w));
        for i in 1..3 {
            assert!(out.block_inputs[i].bit_eq(&out.block_outputs[i - 1]));
        }
        assert!(out.delta.bit_eq(out.block_outputs.last().unwrap()));
    }

    #[test]
    fn null_injection_leaves_latent_unchanged() {
        // With 1 + γ = 0 and β = 0 every block emits a zero offset.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = ModulationModel::init(small(2), &mut rng).unwrap();
        for b in &mut model.blocks {
            b.injection.gamma_bias = Tensor::filled(&[4], -1.0);
        }
        let w = random(&[3, 4], &mut rng);
        let out = model.forward(&w, &random(&[4], &mut rng)).unwrap();
        assert!(out.delta.data().iter().all(|&x| x == 0.0));
        assert!(out.w_edit.bit_eq(&w));
    }

    #[test]
    fn zero_injection_gives_normalized_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = ModulationModel::init(small(1), &mut rng).unwrap();
        let out = model.forward(&random(&[3, 4], &mut rng), &random(&[4], &mut rng)).unwrap();
        for r in 0..3 {
            let row = out.delta.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ablations_still_inject() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random(&[3, 4], &mut rng);
        let e = random(&[4], &mut rng);
        for v in [Variant::NoS, Variant::NoT, Variant::NoSt] {
            let mut model = ModulationModel::init(StackConfig { variant: v, ..small(1) }, &mut rng).unwrap();
            model.blocks[0].injection.beta_bias = Tensor::filled(&[4], 0.5);
            let out = model.forward(&w, &e).unwrap();
            // Injected rows have mean β = 0.5 whatever the alignment does.
            for r in 0..3 {
                let mean = out.delta.row(r).iter().sum::<f64>() / 4.0;
                assert!((mean - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        assert!(interpolate(&a, &b, 0.0).unwrap().bit_eq(&a));
        assert!(interpolate(&a, &b, 1.0).unwrap().bit_eq(&b));
        let mid = interpolate(&a, &b, 0.5).unwrap();
        for ((m, x), y) in mid.data().iter().zip(a.data()).zip(b.data()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
        for lambda in [0.0, 0.13, 0.5, 0.99, 1.0] {
            assert!(interpolate(&a, &a, lambda).unwrap().bit_eq(&a));
        }
        assert!(interpolate(&a, &b, 1.5).is_err());
        assert!(interpolate(&a, &b, -0.1).is_err());
        assert!(interpolate(&a, &random(&[2, 4], &mut rng), 0.5).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_shape_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for cfg in [small(2), small(0).with_blocks(0)] {
            let model = ModulationModel::init(cfg, &mut rng).unwrap();
            let bytes = model.to_bytes();
            let back = ModulationModel::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back, model);
        }
        let model = ModulationModel::init(small(2), &mut rng).unwrap();
        let bytes = model.to_bytes();
        assert!(matches!(ModulationModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
    }

    #[test]
    fn load_for_rejects_other_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ffc");
        let model = ModulationModel::init(StackConfig::desk(), &mut rng).unwrap();
        model.save(&path).unwrap();
        let big = StackConfig { layers: 18, channels: 512, embed: 512, ..StackConfig::desk() };
        assert!(matches!(ModulationModel::load_for(&path, &big), Err(Error::Contract(_))));
        assert_eq!(ModulationModel::load_for(&path, &StackConfig::desk()).unwrap(), model);
    }
}
