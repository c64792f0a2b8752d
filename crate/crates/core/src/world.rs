//! Frozen synthetic world with known per-layer semantics.
//!
//! Image features live in `L + 2` equal bands: one per latent layer, an
//! identity band and a background band. Layer `ℓ` drives its own band
//! through `A_ℓ`; the identity and background bands are driven by two
//! designated layers. With leakage `ε > 0` every layer also reaches every
//! band outside its own support through `ε·B_ℓ`.
//!
//! ```text
//! p(w) = (A + ε·B)·vec(w)        pre-activation, D_img
//! G(w) = tanh(p(w))
//! ```
//!
//! Each attribute owns a unique host layer and a unit direction `d_a` inside
//! that layer's band; its readout is `d_a · p`. The encoder's row space
//! contains every `d_a`, so a prompt is only reachable through its host band.
//!
//! Every layer has one latent direction in the null space of the generator.
//! Latent codes sit at a large per-layer offset along it plus small visible
//! variation, so layers are distinguishable from `w` alone while edits stay
//! cheap.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::container;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Ridge added to the normal equations of the edit oracle.
pub const ORACLE_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub layers: usize,
    pub channels: usize,
    pub embed: usize,
    pub image_dim: usize,
    pub attributes: usize,
    pub epsilon: f64,
    /// Scale of the generator maps; entries are `gain·N(0,1)/√D`.
    pub generator_gain: f64,
    /// Per-entry RMS of the fixed per-layer latent mean, which lies along a
    /// direction the generator ignores.
    pub latent_mean_scale: f64,
    /// Std of the per-sample latent variation around that mean.
    pub latent_std: f64,
    /// Readout value an edit toward `±a` should reach (oracle target).
    pub attribute_target: f64,
}

impl WorldConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            layers: 6,
            channels: 16,
            embed: 16,
            image_dim: 128,
            attributes: 4,
            epsilon: 0.05,
            generator_gain: 100.0,
            latent_mean_scale: 1.0,
            latent_std: 0.005,
            attribute_target: 2.0,
        }
    }

    pub fn band(&self) -> usize {
        self.image_dim / (self.layers + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.embed == 0 {
            return Err(contract("layers, channels and embed must be positive"));
        }
        if self.attributes == 0 || self.attributes > self.layers {
            return Err(contract(format!(
                "need 1..={} attributes for {} layers, got {}",
                self.layers, self.layers, self.attributes
            )));
        }
        if self.image_dim == 0 || !self.image_dim.is_multiple_of(self.layers + 2) {
            return Err(contract(format!(
                "image_dim {} must split into {} equal bands",
                self.image_dim,
                self.layers + 2
            )));
        }
        if self.embed > self.image_dim {
            return Err(contract("embed cannot exceed image_dim"));
        }
        if self.attributes > self.embed {
            return Err(contract("attributes cannot exceed embed"));
        }
        let positive = [self.generator_gain, self.latent_std, self.attribute_target];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0))
            || !(self.epsilon.is_finite() && self.epsilon >= 0.0)
            || !(self.latent_mean_scale.is_finite() && self.latent_mean_scale >= 0.0)
        {
            return Err(contract("world scales must be finite, gain/std/target positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attribute {
    pub host_layer: usize,
    /// Unit direction in image-feature space, supported on the host band.
    pub direction: Tensor,
}

/// A prompt: push attribute `attribute` toward `sign` (±1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Prompt {
    pub attribute: usize,
    pub sign: i8,
}

impl Prompt {
    pub fn new(attribute: usize, sign: i8) -> Result<Self> {
        if sign != 1 && sign != -1 {
            return Err(contract(format!("prompt sign must be ±1, got {sign}")));
        }
        Ok(Self { attribute, sign })
    }

    /// Parses `attr<N>:+1` / `attr<N>:-1`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Config(format!("prompt {spec:?} is not of the form attr<N>:+1 or attr<N>:-1"));
        let (name, sign) = spec.split_once(':').ok_or_else(bad)?;
        let attribute = name.strip_prefix("attr").and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        let sign = match sign {
            "+1" | "1" | "+" => 1,
            "-1" | "-" => -1,
            _ => return Err(bad()),
        };
        Ok(Self { attribute, sign })
    }

    /// All `2·n` prompts of a world, attribute-major.
    pub fn all(n_attrs: usize) -> Vec<Self> {
        (0..n_attrs).flat_map(|a| [Self { attribute: a, sign: 1 }, Self { attribute: a, sign: -1 }]).collect()
    }
}

impl std::fmt::Display for Prompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "attr{}:{}", self.attribute, if self.sign > 0 { "+1" } else { "-1" })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    config: WorldConfig,
    identity_layer: usize,
    background_layer: usize,
    /// Band-local part `A`, `D_img × L·D`.
    local: Tensor,
    /// Leakage part `B`, zero wherever `A` is supported.
    leak: Tensor,
    /// `A + ε·B`.
    generator: Tensor,
    /// `D_e × D_img`, orthonormal rows.
    encoder: Tensor,
    /// `band × D_img`, supported on the identity band.
    identity_head: Tensor,
    background_mask: Vec<f64>,
    latent_mean: Tensor,
    attributes: Vec<Attribute>,
}

/// World matrices recorded as tape constants.
#[derive(Clone, Copy, Debug)]
pub struct WorldVars {
    pub generator: Var,
    pub encoder: Var,
    pub identity_head: Var,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl SynthWorld {
    pub fn new(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let (l, d, band) = (cfg.layers, cfg.channels, cfg.band());
        let n_img = cfg.image_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let identity_layer = l - 1;
        let background_layer = l.saturating_sub(2);
        // Hosts prefer layers that do not drive identity or background.
        let mut free: Vec<usize> = (0..l).filter(|&x| x != identity_layer && x != background_layer).collect();
        free.shuffle(&mut rng);
        let mut drivers = vec![background_layer, identity_layer];
        drivers.dedup();
        drivers.shuffle(&mut rng);
        let hosts: Vec<usize> = free.into_iter().chain(drivers).take(cfg.attributes).collect();

        let support = |layer: usize| {
            let mut rows = vec![layer];
            if layer == identity_layer {
                rows.push(l);
            }
            if layer == background_layer {
                rows.push(l + 1);
            }
            rows
        };
        let scale = cfg.generator_gain / (d as f64).sqrt();
        let mut local = Tensor::zeros(&[n_img, l * d]);
        let mut leak = Tensor::zeros(&[n_img, l * d]);
        for layer in 0..l {
            let own = support(layer);
            for b in 0..l + 2 {
                let target = if own.contains(&b) { &mut local } else { &mut leak };
                for r in b * band..(b + 1) * band {
                    for c in layer * d..(layer + 1) * d {
                        target.set(r, c, scale * gaussian(&mut rng));
                    }
                }
            }
        }

        let mut identity_head = Tensor::zeros(&[band, n_img]);
        for i in 0..band {
            for j in l * band..(l + 1) * band {
                identity_head.set(i, j, gaussian(&mut rng) / (band as f64).sqrt());
            }
        }

        let mut background_mask = vec![0.0; n_img];
        background_mask[(l + 1) * band..].iter_mut().for_each(|m| *m = 1.0);

        // Each layer has one direction the generator ignores; the latent mean
        // lies along it, so it carries layer identity without moving the image.
        let mut latent_mean = Tensor::zeros(&[l, d]);
        for layer in 0..l {
            let mut u: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            let cols = layer * d..(layer + 1) * d;
            for m in [&mut local, &mut leak] {
                for r in 0..n_img {
                    let dot: f64 = cols.clone().zip(&u).map(|(c, x)| m.get(r, c) * x).sum();
                    for (c, x) in cols.clone().zip(&u) {
                        m.set(r, c, m.get(r, c) - dot * x);
                    }
                }
            }
            let scale = cfg.latent_mean_scale * (d as f64).sqrt();
            for (c, x) in u.iter().enumerate() {
                latent_mean.set(layer, c, scale * x);
            }
        }

        // Directions lie in the range of the host map so the oracle can reach
        // its target exactly when there is no leakage.
        let attributes: Vec<Attribute> = hosts
            .into_iter()
            .map(|host| {
                let g: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
                let mut dir = vec![0.0; n_img];
                for (r, x) in dir.iter_mut().enumerate().skip(host * band).take(band) {
                    *x = (0..d).map(|c| local.get(r, host * d + c) * g[c]).sum();
                }
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|x| *x /= norm);
                Attribute { host_layer: host, direction: Tensor::vector(dir) }
            })
            .collect();

        // The encoder's row space contains every attribute direction, so only
        // a host band can move an embedding along its prompt; the remaining
        // rows are random, and a random rotation mixes them all.
        let mut raw = DMatrix::from_fn(n_img, cfg.embed, |_, _| gaussian(&mut rng));
        for (a, attr) in attributes.iter().enumerate() {
            raw.set_column(a, &DVector::from_column_slice(attr.direction.data()));
        }
        let basis = raw.qr().q();
        let rotation = DMatrix::from_fn(cfg.embed, cfg.embed, |_, _| gaussian(&mut rng)).qr().q();
        let rows = rotation * basis.transpose();
        let mut encoder = Tensor::zeros(&[cfg.embed, n_img]);
        for i in 0..cfg.embed {
            for j in 0..n_img {
                encoder.set(i, j, rows[(i, j)]);
            }
        }

        let generator = combine(&local, &leak, cfg.epsilon);
        Ok(Self {
            config: cfg,
            identity_layer,
            background_layer,
            local,
            leak,
            generator,
            encoder,
            identity_head,
            background_mask,
            latent_mean,
            attributes,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn identity_layer(&self) -> usize {
        self.identity_layer
    }

    pub fn background_layer(&self) -> usize {
        self.background_layer
    }

    pub fn encoder(&self) -> &Tensor {
        &self.encoder
    }

    pub fn generator_matrix(&self) -> &Tensor {
        &self.generator
    }

    pub fn latent_mean(&self) -> &Tensor {
        &self.latent_mean
    }

    /// Range of image-feature indices for band `b` (layers, then identity,
    /// then background).
    pub fn band_range(&self, b: usize) -> std::ops::Range<usize> {
        let w = self.config.band();
        b * w..(b + 1) * w
    }

    /// The same world with a different leakage strength.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let config = WorldConfig { epsilon, ..self.config.clone() };
        config.validate()?;
        Ok(Self { generator: combine(&self.local, &self.leak, epsilon), config, ..self.clone() })
    }

    pub fn sample_latent(&self, rng: &mut impl Rng) -> Tensor {
        let std = self.config.latent_std;
        self.latent_mean.map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
    }

    fn check_latent(&self, w: &Tensor) -> Result<()> {
        if w.dims() != [self.config.layers, self.config.channels] {
            return Err(contract(format!(
                "latent must be {}×{}, got {:?}",
                self.config.layers,
                self.config.channels,
                w.dims()
            )));
        }
        Ok(())
    }

    pub fn check_prompt(&self, prompt: Prompt) -> Result<()> {
        if prompt.attribute >= self.attributes.len() {
            return Err(contract(format!(
                "unknown attribute {} (world has {})",
                prompt.attribute,
                self.attributes.len()
            )));
        }
        Ok(())
    }

    /// Pre-activation `p(w)`.
    pub fn pre_activation(&self, w: &Tensor) -> Result<Tensor> {
        self.check_latent(w)?;
        let flat = w.reshape(&[w.len(), 1])?;
        self.generator.matmul(&flat)?.reshape(&[self.config.image_dim])
    }

    pub fn generate(&self, w: &Tensor) -> Result<Tensor> {
        Ok(self.pre_activation(w)?.map(f64::tanh))
    }

    /// Unit-length embedding `E·x/‖E·x‖`.
    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims() != [self.config.image_dim] {
            return Err(contract(format!("image features must have length {}", self.config.image_dim)));
        }
        let e = self.encoder.matmul(&x.reshape(&[x.len(), 1])?)?;
        let norm = e.l2_norm();
        if norm < 1e-9 {
            return Err(Error::Degenerate("image embedding has zero norm".into()));
        }
        Ok(Tensor::vector(e.data().iter().map(|v| v / norm).collect()))
    }

    pub fn text_embedding(&self, prompt: Prompt) -> Result<Tensor> {
        self.check_prompt(prompt)?;
        let s = f64::from(prompt.sign);
        self.encode_image(&self.attributes[prompt.attribute].direction.map(|x| s * x))
    }

    pub fn identity_features(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims() != [self.config.image_dim] {
            return Err(contract("identity head expects image features"));
        }
        self.identity_head.matmul(&x.reshape(&[x.len(), 1])?)?.reshape(&[self.config.band()])
    }

    /// Non-facial indicator. Input-independent, so the intersection of the
    /// masks of two images is this same mask.
    pub fn parse_mask(&self, _x: &Tensor) -> Vec<f64> {
        self.background_mask.clone()
    }

    /// Pre-activation readout `d_a · p(w)`.
    pub fn readout(&self, w: &Tensor, attribute: usize) -> Result<f64> {
        let p = self.pre_activation(w)?;
        let dir = &self
            .attributes
            .get(attribute)
            .ok_or_else(|| contract(format!("unknown attribute {attribute}")))?
            .direction;
        Ok(dir.data().iter().zip(p.data()).map(|(a, b)| a * b).sum())
    }

    /// Pre-activation shift that brings the readout of the prompted attribute
    /// to `sign · attribute_target`.
    pub fn target_shift(&self, w: &Tensor, prompt: Prompt) -> Result<Tensor> {
        self.check_prompt(prompt)?;
        let goal = f64::from(prompt.sign) * self.config.attribute_target;
        let gap = goal - self.readout(w, prompt.attribute)?;
        Ok(self.attributes[prompt.attribute].direction.map(|x| gap * x))
    }

    /// Ridge-regularized least-squares latent edit for a pre-activation shift.
    pub fn solve_edit(&self, shift: &Tensor) -> Result<Tensor> {
        if shift.dims() != [self.config.image_dim] {
            return Err(contract("shift must have image_dim entries"));
        }
        let (rows, cols) = self.generator.shape2();
        let j = DMatrix::from_row_slice(rows, cols, self.generator.data());
        let normal = j.tr_mul(&j) + DMatrix::identity(cols, cols) * ORACLE_RIDGE;
        let rhs = j.tr_mul(&DVector::from_column_slice(shift.data()));
        let chol =
            normal.cholesky().ok_or_else(|| Error::Degenerate("normal equations are not positive definite".into()))?;
        let x = chol.solve(&rhs);
        Tensor::matrix(self.config.layers, self.config.channels, x.as_slice().to_vec())
    }

    pub fn oracle_edit(&self, w: &Tensor, prompt: Prompt) -> Result<Tensor> {
        let shift = self.target_shift(w, prompt)?;
        self.solve_edit(&shift)
    }

    pub fn bind(&self, tape: &mut Tape) -> WorldVars {
        WorldVars {
            generator: tape.constant(self.generator.clone()),
            encoder: tape.constant(self.encoder.clone()),
            identity_head: tape.constant(self.identity_head.clone()),
        }
    }

    /// `G(w)` on a tape.
    pub fn generate_on(&self, tape: &mut Tape, vars: &WorldVars, w: Var) -> Result<Var> {
        let n = tape.value(w).len();
        let flat = tape.reshape(w, &[n, 1])?;
        let p = tape.matmul(vars.generator, flat)?;
        let p = tape.reshape(p, &[self.config.image_dim])?;
        Ok(tape.tanh(p))
    }

    /// Unnormalized image embedding `E·x`; callers only take cosines of it.
    pub fn embed_on(&self, tape: &mut Tape, vars: &WorldVars, x: Var) -> Result<Var> {
        project(tape, vars.encoder, x)
    }

    pub fn identity_on(&self, tape: &mut Tape, vars: &WorldVars, x: Var) -> Result<Var> {
        project(tape, vars.identity_head, x)
    }

    fn header(&self) -> String {
        let mut s = toml::to_string(&self.config).expect("config serializes");
        let _ = writeln!(s, "identity_layer = {}", self.identity_layer);
        let _ = writeln!(s, "background_layer = {}", self.background_layer);
        let hosts: Vec<String> = self.attributes.iter().map(|a| a.host_layer.to_string()).collect();
        let _ = writeln!(s, "host_layers = [{}]", hosts.join(", "));
        s
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("generator.local".to_string(), self.local.clone()),
            ("generator.leak".to_string(), self.leak.clone()),
            ("encoder".to_string(), self.encoder.clone()),
            ("identity_head".to_string(), self.identity_head.clone()),
            ("background_mask".to_string(), Tensor::vector(self.background_mask.clone())),
            ("latent_mean".to_string(), self.latent_mean.clone()),
        ];
        for (i, a) in self.attributes.iter().enumerate() {
            out.push((format!("attr{i}.direction"), a.direction.clone()));
        }
        out
    }

    /// `"FFW1" | header_len (u64 LE) | TOML header | FFC1 container`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::new();
        out.extend_from_slice(WORLD_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend(container::encode(&self.tensors()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, msg: &str| Error::Parse { offset, msg: msg.to_string() };
        if bytes.len() < 12 || &bytes[..4] != WORLD_MAGIC {
            return Err(parse(0, "missing world header"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|n| n.checked_add(12))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse(4, "header length exceeds input"))?;
        let text = std::str::from_utf8(&bytes[12..end]).map_err(|_| parse(12, "header is not UTF-8"))?;
        let header: WorldHeader = toml::from_str(text).map_err(|e| Error::Parse { offset: 12, msg: e.to_string() })?;
        let entries = container::decode(&bytes[end..]).map_err(|e| match e {
            Error::Parse { offset, msg } => Error::Parse { offset: offset + end, msg },
            other => other,
        })?;

        // Rebuilding from the seed reproduces every tensor; the stored copy is
        // checked against it so a corrupted file cannot pass silently.
        let world = Self::new(&header.config)?;
        let expected = world.tensors();
        if entries.len() != expected.len()
            || entries.iter().zip(&expected).any(|(a, b)| a.0 != b.0 || !a.1.bit_eq(&b.1))
        {
            return Err(parse(end, "stored tensors do not match the header's construction"));
        }
        let hosts: Vec<usize> = world.attributes.iter().map(|a| a.host_layer).collect();
        if header.host_layers != hosts
            || header.identity_layer != world.identity_layer
            || header.background_layer != world.background_layer
        {
            return Err(parse(12, "attribute table does not match construction"));
        }
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const WORLD_MAGIC: &[u8; 4] = b"FFW1";

#[derive(Deserialize)]
struct WorldHeader {
    #[serde(flatten)]
    config: WorldConfig,
    identity_layer: usize,
    background_layer: usize,
    host_layers: Vec<usize>,
}

fn combine(local: &Tensor, leak: &Tensor, epsilon: f64) -> Tensor {
    let data = local.data().iter().zip(leak.data()).map(|(a, b)| a + epsilon * b).collect();
    Tensor::new(local.dims().to_vec(), data).expect("same dims")
}

fn project(tape: &mut Tape, matrix: Var, x: Var) -> Result<Var> {
    let n = tape.value(x).len();
    let col = tape.reshape(x, &[n, 1])?;
    let y = tape.matmul(matrix, col)?;
    let m = tape.value(y).len();
    tape.reshape(y, &[m])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn world(epsilon: f64) -> SynthWorld {
        SynthWorld::new(&WorldConfig { epsilon, ..WorldConfig::desk() }).unwrap()
    }

    #[test]
    fn infeasible_sizes_are_rejected() {
        let base = WorldConfig::desk();
        assert!(SynthWorld::new(&WorldConfig { attributes: 7, ..base.clone() }).is_err());
        assert!(SynthWorld::new(&WorldConfig { image_dim: 100, ..base.clone() }).is_err());
        assert!(SynthWorld::new(&WorldConfig { epsilon: -0.1, ..base }).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(world(0.05).to_bytes(), world(0.05).to_bytes());
        let other = SynthWorld::new(&WorldConfig { seed: 1, ..WorldConfig::desk() }).unwrap();
        assert_ne!(other.to_bytes(), world(0.05).to_bytes());
    }

    #[test]
    fn serialization_roundtrip() {
        let w = world(0.05);
        let bytes = w.to_bytes();
        let back = SynthWorld::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(SynthWorld::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Parse { .. })));
        let mut corrupt = bytes.clone();
        let n = corrupt.len();
        corrupt[n - 1] ^= 1;
        assert!(SynthWorld::from_bytes(&corrupt).is_err());
    }

    #[test]
    fn structure_invariants() {
        let w = world(0.05);
        // Encoder rows orthonormal.
        let e = w.encoder();
        let gram = e.matmul(&e.transpose()).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_abs_diff_eq!(gram.get(i, j), if i == j { 1.0 } else { 0.0 }, epsilon = 1e-9);
            }
        }
        let mut hosts: Vec<usize> = w.attributes().iter().map(|a| a.host_layer).collect();
        hosts.sort_unstable();
        hosts.dedup();
        assert_eq!(hosts.len(), 4);
        for a in w.attributes() {
            assert_abs_diff_eq!(a.direction.l2_norm(), 1.0, epsilon = 1e-12);
            let band = w.band_range(a.host_layer);
            for (i, &x) in a.direction.data().iter().enumerate() {
                assert!(band.contains(&i) || x == 0.0);
            }
        }
    }

    #[test]
    fn latent_mean_is_invisible_to_the_generator() {
        let w = world(0.05);
        assert!(w.latent_mean().l2_norm() > 1.0);
        let p = w.pre_activation(w.latent_mean()).unwrap();
        assert!(p.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn prompts_read_only_their_host_band() {
        let w = world(0.05);
        for (a, attr) in w.attributes().iter().enumerate() {
            let e = w.text_embedding(Prompt { attribute: a, sign: 1 }).unwrap();
            // Eᵀ·e_t is the image-space direction a prompt rewards.
            let back = w.encoder().transpose().matmul(&e.reshape(&[16, 1]).unwrap()).unwrap();
            let band = w.band_range(attr.host_layer);
            for (i, (&x, &d)) in back.data().iter().zip(attr.direction.data()).enumerate() {
                assert_abs_diff_eq!(x, d, epsilon = 1e-9);
                if !band.contains(&i) {
                    assert!(x.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_latent_generates_zero() {
        let w = world(0.05);
        assert!(w.generate(&Tensor::zeros(&[6, 16])).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn without_leakage_layers_stay_in_their_bands() {
        let w = world(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = w.sample_latent(&mut rng);
        let g0 = w.generate(&base).unwrap();
        for layer in 0..6 {
            let mut moved = base.clone();
            for c in 0..16 {
                moved.set(layer, c, moved.get(layer, c) + 0.3);
            }
            let g1 = w.generate(&moved).unwrap();
            let mut allowed: Vec<usize> = w.band_range(layer).collect();
            if layer == w.identity_layer() {
                allowed.extend(w.band_range(6));
            }
            if layer == w.background_layer() {
                allowed.extend(w.band_range(7));
            }
            for i in 0..128 {
                if !allowed.contains(&i) {
                    assert_eq!(g0.data()[i], g1.data()[i], "layer {layer} leaked into {i}");
                }
            }
        }
    }

    #[test]
    fn generate_matches_scalar_oracle() {
        let w = world(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = w.sample_latent(&mut rng);
        let g = w.generate(&z).unwrap();
        let m = w.generator_matrix();
        for i in [0, 17, 64, 127] {
            let mut p = 0.0;
            for l in 0..6 {
                for c in 0..16 {
                    p += m.get(i, l * 16 + c) * z.get(l, c);
                }
            }
            assert_abs_diff_eq!(g.data()[i], p.tanh(), epsilon = 1e-14);
        }
    }

    #[test]
    fn encoder_examples() {
        let w = world(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::vector((0..128).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let y = Tensor::vector((0..128).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let ex = w.encode_image(&x).unwrap();
        assert_abs_diff_eq!(ex.l2_norm(), 1.0, epsilon = 1e-12);
        // Linear before normalization: E(x + 2y) ∝ E x + 2 E y.
        let raw = |v: &Tensor| w.encoder().matmul(&v.reshape(&[128, 1]).unwrap()).unwrap();
        let combo = Tensor::vector(x.data().iter().zip(y.data()).map(|(a, b)| a + 2.0 * b).collect());
        let lhs = raw(&combo);
        let (rx, ry) = (raw(&x), raw(&y));
        for i in 0..16 {
            assert_abs_diff_eq!(lhs.data()[i], rx.data()[i] + 2.0 * ry.data()[i], epsilon = 1e-12);
        }
        assert!(matches!(w.encode_image(&Tensor::zeros(&[128])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn text_embeddings_flip_with_sign() {
        let w = world(0.05);
        for a in 0..4 {
            let plus = w.text_embedding(Prompt { attribute: a, sign: 1 }).unwrap();
            let minus = w.text_embedding(Prompt { attribute: a, sign: -1 }).unwrap();
            assert_abs_diff_eq!(plus.l2_norm(), 1.0, epsilon = 1e-9);
            for (p, m) in plus.data().iter().zip(minus.data()) {
                assert_eq!(*p, -*m);
            }
        }
        assert!(w.text_embedding(Prompt { attribute: 4, sign: 1 }).is_err());
    }

    #[test]
    fn mask_and_identity_head() {
        let w = world(0.0);
        let x = Tensor::vector((0..128).map(|i| i as f64 / 128.0).collect());
        let m = w.parse_mask(&x);
        let both: Vec<f64> = m.iter().zip(w.parse_mask(&x.map(|v| -v))).map(|(a, b)| a * b).collect();
        assert_eq!(both, m);
        assert_eq!(m.iter().sum::<f64>(), 16.0);
        let r = w.identity_features(&x).unwrap();
        let doubled = w.identity_features(&x.map(|v| 2.0 * v)).unwrap();
        for (a, b) in r.data().iter().zip(doubled.data()) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-14);
        }
    }

    #[test]
    fn prompt_parsing() {
        assert_eq!(Prompt::parse("attr2:+1").unwrap(), Prompt { attribute: 2, sign: 1 });
        assert_eq!(Prompt::parse("attr0:-1").unwrap(), Prompt { attribute: 0, sign: -1 });
        assert!(Prompt::parse("hair:+1").is_err());
        assert!(Prompt::parse("attr1:0").is_err());
        assert_eq!(Prompt { attribute: 3, sign: -1 }.to_string(), "attr3:-1");
    }

    #[test]
    fn oracle_without_leakage_is_local() {
        let w = world(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = w.sample_latent(&mut rng);
        for (a, attr) in w.attributes().iter().enumerate() {
            let delta = w.oracle_edit(&z, Prompt { attribute: a, sign: 1 }).unwrap();
            for l in 0..6 {
                if l != attr.host_layer {
                    assert!(delta.row(l).iter().all(|x| x.abs() < 1e-8));
                }
            }
            let mut edited = z.clone();
            edited.data_mut().iter_mut().zip(delta.data()).for_each(|(x, d)| *x += d);
            assert_abs_diff_eq!(w.readout(&edited, a).unwrap(), 2.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn oracle_zero_shift_is_zero_and_residual_small() {
        let w = world(0.05);
        let zero = w.solve_edit(&Tensor::zeros(&[128])).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shift = w.target_shift(&w.sample_latent(&mut rng), Prompt { attribute: 1, sign: -1 }).unwrap();
        let delta = w.solve_edit(&shift).unwrap();
        // (JᵀJ + ρI)δ − Jᵀt by direct substitution.
        let j = w.generator_matrix();
        let jt = j.transpose();
        let d = delta.reshape(&[96, 1]).unwrap();
        let lhs = jt.matmul(&j.matmul(&d).unwrap()).unwrap();
        let rhs = jt.matmul(&shift.reshape(&[128, 1]).unwrap()).unwrap();
        let mut res = 0.0;
        for i in 0..96 {
            res += (lhs.data()[i] + ORACLE_RIDGE * d.data()[i] - rhs.data()[i]).powi(2);
        }
        assert!(res.sqrt() / rhs.l2_norm() < 1e-8);
    }

    #[test]
    fn leakage_grows_off_band_sensitivity() {
        let base = world(0.0);
        let off_band = |w: &SynthWorld| {
            let m = w.generator_matrix();
            let own = w.band_range(0);
            let mut s = 0.0;
            for r in 0..128 {
                if own.contains(&r) || (0 == w.background_layer() && r >= 112) {
                    continue;
                }
                for c in 0..16 {
                    s += m.get(r, c).powi(2);
                }
            }
            s.sqrt()
        };
        let norms: Vec<f64> = [0.0, 0.05, 0.1].iter().map(|&e| off_band(&base.with_epsilon(e).unwrap())).collect();
        assert_eq!(norms[0], 0.0);
        assert!(norms[0] < norms[1] && norms[1] < norms[2]);
    }
}
