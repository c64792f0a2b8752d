//! Semantic-preserving and text-manipulation objectives.
//!
//! ```text
//! embd = 1 − cos(E G(w′), E G(w))
//! norm = ‖Δ‖₁
//! id   = 1 − cos(R G(w′), R G(w))
//! bg   = ‖(G(w′) − G(w)) ⊙ mask‖₂
//! sp   = λ_embd·embd + λ_norm·norm + λ_id·id + λ_bg·bg
//! t    = 1 − cos(E G(w′), e_t)
//! total = λ_sp·sp + λ_t·t
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;
use crate::world::{Prompt, SynthWorld, WorldVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub embd: f64,
    pub norm: f64,
    pub id: f64,
    pub bg: f64,
    pub sp: f64,
    pub t: f64,
    pub use_id: bool,
    pub use_bg: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { embd: 1.0, norm: 1.5, id: 1.0, bg: 2.0, sp: 1.0, t: 1.5, use_id: true, use_bg: true }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.embd, self.norm, self.id, self.bg, self.sp, self.t];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(contract("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub embd: f64,
    pub norm: f64,
    pub id: f64,
    pub bg: f64,
    pub sp: f64,
    pub t: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn fields(&self) -> [f64; 7] {
        [self.total, self.sp, self.t, self.embd, self.norm, self.id, self.bg]
    }

    /// Componentwise mean, accumulated in order.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.embd += b.embd;
            acc.norm += b.norm;
            acc.id += b.id;
            acc.bg += b.bg;
            acc.sp += b.sp;
            acc.t += b.t;
            acc.total += b.total;
        }
        LossBreakdown {
            embd: acc.embd / n,
            norm: acc.norm / n,
            id: acc.id / n,
            bg: acc.bg / n,
            sp: acc.sp / n,
            t: acc.t / n,
            total: acc.total / n,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|x| x.is_finite())
    }
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub embd: Var,
    pub norm: Var,
    pub id: Option<Var>,
    pub bg: Option<Var>,
    pub sp: Var,
    pub t: Var,
    pub total: Var,
}

impl LossVars {
    pub fn read(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            embd: v(self.embd),
            norm: v(self.norm),
            id: self.id.map_or(0.0, v),
            bg: self.bg.map_or(0.0, v),
            sp: v(self.sp),
            t: v(self.t),
            total: v(self.total),
        }
    }
}

fn one_minus(tape: &mut Tape, x: Var) -> Var {
    let neg = tape.scale(x, -1.0);
    tape.add_scalar(neg, 1.0)
}

/// Everything the losses need about the unedited image, computed once per
/// sample.
#[derive(Clone, Copy, Debug)]
pub struct Reference {
    pub image: Var,
    pub embedding: Var,
    pub identity: Option<Var>,
}

pub fn reference_on(
    tape: &mut Tape,
    world: &SynthWorld,
    vars: &WorldVars,
    weights: &LossWeights,
    w: Var,
) -> Result<Reference> {
    let image = world.generate_on(tape, vars, w)?;
    let embedding = world.embed_on(tape, vars, image)?;
    let identity = if weights.use_id { Some(world.identity_on(tape, vars, image)?) } else { None };
    Ok(Reference { image, embedding, identity })
}

pub fn embd_on(tape: &mut Tape, edited_embedding: Var, reference: &Reference) -> Result<Var> {
    let c = tape.cosine_similarity(edited_embedding, reference.embedding)?;
    Ok(one_minus(tape, c))
}

pub fn id_on(tape: &mut Tape, edited_identity: Var, reference_identity: Var) -> Result<Var> {
    let c = tape.cosine_similarity(edited_identity, reference_identity)?;
    Ok(one_minus(tape, c))
}

pub fn bg_on(tape: &mut Tape, world: &SynthWorld, edited: Var, reference: Var) -> Result<Var> {
    let diff = tape.sub(edited, reference)?;
    let mask = world.parse_mask(tape.value(edited));
    tape.masked_l2(diff, &mask)
}

pub fn text_on(tape: &mut Tape, edited_embedding: Var, e_t: Var) -> Result<Var> {
    let c = tape.cosine_similarity(edited_embedding, e_t)?;
    Ok(one_minus(tape, c))
}

/// Full objective for one sample.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on(
    tape: &mut Tape,
    world: &SynthWorld,
    vars: &WorldVars,
    weights: &LossWeights,
    reference: &Reference,
    w_edit: Var,
    delta: Var,
    e_t: Var,
) -> Result<LossVars> {
    let image = world.generate_on(tape, vars, w_edit)?;
    let embedding = world.embed_on(tape, vars, image)?;
    let embd = embd_on(tape, embedding, reference)?;
    let norm = tape.l1_norm(delta);
    let id = match reference.identity {
        Some(r) => {
            let ident = world.identity_on(tape, vars, image)?;
            Some(id_on(tape, ident, r)?)
        }
        None => None,
    };
    let bg = if weights.use_bg { Some(bg_on(tape, world, image, reference.image)?) } else { None };
    let mut sp_terms = vec![(weights.embd, embd), (weights.norm, norm)];
    sp_terms.extend(id.map(|v| (weights.id, v)));
    sp_terms.extend(bg.map(|v| (weights.bg, v)));
    let sp = tape.weighted_sum(&sp_terms)?;
    let t = text_on(tape, embedding, e_t)?;
    let total = tape.weighted_sum(&[(weights.sp, sp), (weights.t, t)])?;
    Ok(LossVars { embd, norm, id, bg, sp, t, total })
}

/// Loss breakdown of an edit, outside of any training graph.
pub fn total_loss(
    world: &SynthWorld,
    weights: &LossWeights,
    w: &Tensor,
    w_edit: &Tensor,
    delta: &Tensor,
    prompt: Prompt,
) -> Result<LossBreakdown> {
    if w.dims() != w_edit.dims() || w.dims() != delta.dims() {
        return Err(contract("w, w_edit and delta must share a shape"));
    }
    let mut tape = Tape::new();
    let vars = world.bind(&mut tape);
    let wv = tape.constant(w.clone());
    let we = tape.constant(w_edit.clone());
    let dv = tape.constant(delta.clone());
    let e = tape.constant(world.text_embedding(prompt)?);
    let reference = reference_on(&mut tape, world, &vars, weights, wv)?;
    let l = total_loss_on(&mut tape, world, &vars, weights, &reference, we, dv, e)?;
    Ok(l.read(&tape))
}

/// `1 − cos(E G(w′), e_t)` alone.
pub fn text_loss(world: &SynthWorld, w_edit: &Tensor, prompt: Prompt) -> Result<f64> {
    let emb = world.encode_image(&world.generate(w_edit)?)?;
    let e_t = world.text_embedding(prompt)?;
    let dot: f64 = emb.data().iter().zip(e_t.data()).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (emb.l2_norm() * e_t.l2_norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world(epsilon: f64) -> SynthWorld {
        SynthWorld::new(&WorldConfig { epsilon, ..WorldConfig::desk() }).unwrap()
    }

    fn perturb(w: &Tensor, rng: &mut ChaCha8Rng, scale: f64) -> (Tensor, Tensor) {
        let delta = w.map(|_| scale * rng.gen_range(-1.0..1.0));
        let edit =
            Tensor::new(w.dims().to_vec(), w.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect()).unwrap();
        (edit, delta)
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn unedited_code_costs_only_text_loss() {
        let w = world(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = w.sample_latent(&mut rng);
        let p = Prompt { attribute: 0, sign: 1 };
        let weights = LossWeights::default();
        let b = total_loss(&w, &weights, &z, &z, &Tensor::zeros(&[6, 16]), p).unwrap();
        assert_abs_diff_eq!(b.embd, 0.0, epsilon = 1e-15);
        assert_eq!(b.norm, 0.0);
        assert_abs_diff_eq!(b.id, 0.0, epsilon = 1e-15);
        assert_eq!(b.bg, 0.0);
        assert_abs_diff_eq!(b.total, 1.5 * text_loss(&w, &z, p).unwrap(), epsilon = 1e-14);

        let zero = LossWeights { embd: 0.0, norm: 0.0, id: 0.0, bg: 0.0, sp: 0.0, t: 0.0, ..weights };
        let (edit, delta) = perturb(&z, &mut rng, 0.2);
        assert_eq!(total_loss(&w, &zero, &z, &edit, &delta, p).unwrap().total, 0.0);
    }

    #[test]
    fn breakdown_matches_composed_oracle() {
        let w = world(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let weights = LossWeights::default();
        for trial in 0..10 {
            let z = w.sample_latent(&mut rng);
            let (edit, delta) = perturb(&z, &mut rng, 0.3);
            let p = Prompt { attribute: trial % 4, sign: if trial % 2 == 0 { 1 } else { -1 } };
            let b = total_loss(&w, &weights, &z, &edit, &delta, p).unwrap();

            // Independent composition from scalar loops.
            let g0 = w.generate(&z).unwrap();
            let g1 = w.generate(&edit).unwrap();
            let e = w.encoder();
            let proj = |g: &Tensor| -> Vec<f64> {
                (0..16).map(|i| (0..128).map(|j| e.get(i, j) * g.data()[j]).sum()).collect()
            };
            let embd = 1.0 - cos(&proj(&g1), &proj(&g0));
            let norm: f64 = delta.data().iter().map(|x| x.abs()).sum();
            let id = 1.0 - cos(w.identity_features(&g1).unwrap().data(), w.identity_features(&g0).unwrap().data());
            let bg = (112..128).map(|j| (g1.data()[j] - g0.data()[j]).powi(2)).sum::<f64>().sqrt();
            let t = 1.0 - cos(&proj(&g1), w.text_embedding(p).unwrap().data());
            assert_abs_diff_eq!(b.embd, embd, epsilon = 1e-12);
            assert_abs_diff_eq!(b.norm, norm, epsilon = 1e-12);
            assert_abs_diff_eq!(b.id, id, epsilon = 1e-12);
            assert_abs_diff_eq!(b.bg, bg, epsilon = 1e-12);
            assert_abs_diff_eq!(b.t, t, epsilon = 1e-12);
            assert_abs_diff_eq!(b.t, text_loss(&w, &edit, p).unwrap(), epsilon = 1e-12);
            let sp = 1.0 * embd + 1.5 * norm + 1.0 * id + 2.0 * bg;
            assert_abs_diff_eq!(b.sp, sp, epsilon = 1e-10);
            assert_abs_diff_eq!(b.total, sp + 1.5 * t, epsilon = 1e-10);
            // Exact recomposition in evaluation order.
            assert_eq!(b.sp, ((b.embd + 1.5 * b.norm) + 1.0 * b.id) + 2.0 * b.bg);
            assert_eq!(b.total, 1.0 * b.sp + 1.5 * b.t);
            for c in [b.embd, b.id, b.t] {
                assert!((0.0..=2.0).contains(&c));
            }
        }
    }

    #[test]
    fn disabled_terms_are_zero() {
        let w = world(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = w.sample_latent(&mut rng);
        let (edit, delta) = perturb(&z, &mut rng, 0.3);
        let weights = LossWeights { use_id: false, use_bg: false, ..Default::default() };
        let b = total_loss(&w, &weights, &z, &edit, &delta, Prompt { attribute: 1, sign: 1 }).unwrap();
        assert_eq!((b.id, b.bg), (0.0, 0.0));
        assert_eq!(b.sp, b.embd + 1.5 * b.norm);
    }

    #[test]
    fn local_edits_without_leakage_keep_identity_and_background() {
        let w = world(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = w.sample_latent(&mut rng);
        let host = w.attributes()[0].host_layer;
        assert!(host != w.identity_layer() && host != w.background_layer());
        let mut edit = z.clone();
        for c in 0..16 {
            edit.set(host, c, edit.get(host, c) + 0.5);
        }
        let delta =
            Tensor::new(z.dims().to_vec(), edit.data().iter().zip(z.data()).map(|(a, b)| a - b).collect()).unwrap();
        let b = total_loss(&w, &LossWeights::default(), &z, &edit, &delta, Prompt { attribute: 0, sign: 1 }).unwrap();
        assert_abs_diff_eq!(b.id, 0.0, epsilon = 1e-15);
        assert_eq!(b.bg, 0.0);
    }

    #[test]
    fn text_loss_zero_when_embedding_matches() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::vector(vec![0.6, 0.8]));
        let same = tape.constant(Tensor::vector(vec![1.2, 1.6]));
        let t = text_on(&mut tape, same, e).unwrap();
        assert_abs_diff_eq!(tape.value(t).item(), 0.0, epsilon = 1e-15);
        let neg = tape.constant(Tensor::vector(vec![-0.6, -0.8]));
        let t = text_on(&mut tape, neg, e).unwrap();
        assert_abs_diff_eq!(tape.value(t).item(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn doubling_text_weight_doubles_text_share() {
        let w = world(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = w.sample_latent(&mut rng);
        let (edit, delta) = perturb(&z, &mut rng, 0.2);
        let p = Prompt { attribute: 2, sign: -1 };
        let base = LossWeights::default();
        let doubled = LossWeights { t: 3.0, ..base.clone() };
        let a = total_loss(&w, &base, &z, &edit, &delta, p).unwrap();
        let b = total_loss(&w, &doubled, &z, &edit, &delta, p).unwrap();
        assert_abs_diff_eq!(b.total - b.sp, 2.0 * (a.total - a.sp), epsilon = 1e-14);
    }
}
