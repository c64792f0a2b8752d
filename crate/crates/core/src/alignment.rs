//! Semantic alignment: cross attention between the text embedding and the
//! incoming offset, over layer positions (scale `S`) and over channels
//! (translation `T`), followed by the linear map `x = S×V + T`.
//!
//! Shapes, with `L` layers, `D` channels and an embedding of length `D`:
//!
//! ```text
//! Q_p = e·Wq              1×D
//! K   = Δ·Wk, V = Δ·Wv    L×D
//! S   = softmax(Q_p·Kᵀ)   L
//! Q_c = eᵀ·Wqc            D×L
//! A_c = softmax_row(Q_c·K) D×D
//! T   = pool_cols(A_c·Vᵀ) D
//! ```

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentParams {
    /// Position query projection, `De×D`.
    pub wq: Tensor,
    /// Shared key projection, `D×D`.
    pub wk: Tensor,
    /// Shared value projection, `D×D`.
    pub wv: Tensor,
    /// Channel query projection, `1×L`.
    pub wqc: Tensor,
}

impl AlignmentParams {
    /// Zero-mean uniform init with bound `1/√D`.
    pub fn init(layers: usize, channels: usize, embed: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let mut uniform = |dims: &[usize]| {
            let n = dims.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(dims.to_vec(), data).expect("dims")
        };
        Self {
            wq: uniform(&[embed, channels]),
            wk: uniform(&[channels, channels]),
            wv: uniform(&[channels, channels]),
            wqc: uniform(&[1, layers]),
        }
    }

    pub fn zeros(layers: usize, channels: usize, embed: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[embed, channels]),
            wk: Tensor::zeros(&[channels, channels]),
            wv: Tensor::zeros(&[channels, channels]),
            wqc: Tensor::zeros(&[1, layers]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AlignmentVars {
        AlignmentVars {
            wq: tape.param(self.wq.clone()),
            wk: tape.param(self.wk.clone()),
            wv: tape.param(self.wv.clone()),
            wqc: tape.param(self.wqc.clone()),
        }
    }

    /// Evaluates the module outside of any training graph.
    pub fn apply(&self, e_t: &Tensor, delta_prev: &Tensor, mode: AlignMode) -> Result<AlignmentOutput> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let e = tape.constant(e_t.clone());
        let d = tape.constant(delta_prev.clone());
        let out = align_block(&mut tape, e, d, &vars, mode)?;
        Ok(AlignmentOutput {
            scale: tape.value(out.scale).clone(),
            translation: tape.value(out.translation).clone(),
            x: tape.value(out.x).clone(),
            attention_p: tape.value(out.scale).clone(),
            attention_c: tape.value(out.attention_c).clone(),
        })
    }
}

/// Parameters of one block recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wqc: Var,
}

impl AlignmentVars {
    pub fn all(&self) -> [Var; 4] {
        [self.wq, self.wk, self.wv, self.wqc]
    }
}

/// Which terms of `x = S×V + T` are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignMode {
    pub scale: bool,
    pub translation: bool,
}

impl AlignMode {
    pub const FULL: Self = Self { scale: true, translation: true };
}

#[derive(Clone, Debug)]
pub struct AlignmentOutput {
    pub scale: Tensor,
    pub translation: Tensor,
    pub x: Tensor,
    pub attention_p: Tensor,
    pub attention_c: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AlignedVars {
    pub scale: Var,
    pub translation: Var,
    pub value: Var,
    pub attention_c: Var,
    pub x: Var,
}

fn check_shapes(tape: &Tape, e_t: Var, delta_prev: Var, p: &AlignmentVars) -> Result<(usize, usize)> {
    let dp = tape.value(delta_prev).dims();
    let [l, d] = dp else {
        return Err(contract(format!("offset must be L×D, got {dp:?}")));
    };
    let (l, d) = (*l, *d);
    let e = tape.value(e_t).dims();
    let wq = tape.value(p.wq).dims();
    if e.len() != 1 || wq != [e[0], d] {
        return Err(contract(format!("embedding {e:?} does not fit Wq {wq:?} for D={d}")));
    }
    if tape.value(p.wk).dims() != [d, d] || tape.value(p.wv).dims() != [d, d] {
        return Err(contract(format!("Wk/Wv must be {d}×{d}")));
    }
    if tape.value(p.wqc).dims() != [1, l] {
        return Err(contract(format!("Wqc must be 1×{l}")));
    }
    Ok((l, d))
}

fn keys(tape: &mut Tape, delta_prev: Var, p: &AlignmentVars) -> Result<Var> {
    tape.matmul(delta_prev, p.wk)
}

/// Scale `S ∈ R^L`: softmax over layer positions of `Q_p·Kᵀ`.
pub fn position_attention(tape: &mut Tape, e_t: Var, delta_prev: Var, p: &AlignmentVars) -> Result<Var> {
    check_shapes(tape, e_t, delta_prev, p)?;
    let k = keys(tape, delta_prev, p)?;
    position_from_keys(tape, e_t, k, p)
}

fn position_from_keys(tape: &mut Tape, e_t: Var, k: Var, p: &AlignmentVars) -> Result<Var> {
    let n = tape.value(e_t).len();
    let l = tape.value(k).dims()[0];
    let e_row = tape.reshape(e_t, &[1, n])?;
    let q = tape.matmul(e_row, p.wq)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let s = tape.softmax_row(logits)?;
    tape.reshape(s, &[l])
}

/// Translation `T ∈ R^D` and the `D×D` channel attention map.
pub fn channel_attention(tape: &mut Tape, e_t: Var, delta_prev: Var, p: &AlignmentVars) -> Result<(Var, Var)> {
    check_shapes(tape, e_t, delta_prev, p)?;
    let k = keys(tape, delta_prev, p)?;
    let v = tape.matmul(delta_prev, p.wv)?;
    channel_from_kv(tape, e_t, k, v, p)
}

fn channel_from_kv(tape: &mut Tape, e_t: Var, k: Var, v: Var, p: &AlignmentVars) -> Result<(Var, Var)> {
    let n = tape.value(e_t).len();
    let d = tape.value(k).dims()[1];
    if n != d {
        return Err(contract(format!("channel attention needs embedding length {n} to equal channel count {d}")));
    }
    let e_col = tape.reshape(e_t, &[n, 1])?;
    let qc = tape.matmul(e_col, p.wqc)?;
    let logits = tape.matmul(qc, k)?;
    let attn = tape.softmax_row(logits)?;
    let vt = tape.transpose(v)?;
    let mixed = tape.matmul(attn, vt)?;
    Ok((tape.row_mean(mixed), attn))
}

/// `x[ℓ, c] = S[ℓ]·V[ℓ, c] + T[c]`, with either term switched off by `mode`.
pub fn align(tape: &mut Tape, value: Var, scale: Var, translation: Var, mode: AlignMode) -> Result<Var> {
    let [l, d] = *tape.value(value).dims() else {
        return Err(contract("value must be L×D"));
    };
    if tape.value(scale).dims() != [l] || tape.value(translation).dims() != [d] {
        return Err(contract(format!("S must have length {l} and T length {d}")));
    }
    let scaled = if mode.scale {
        let s = tape.broadcast_cols(scale, d)?;
        tape.mul(s, value)?
    } else {
        value
    };
    if mode.translation {
        let t = tape.broadcast_rows(translation, l)?;
        tape.add(scaled, t)
    } else {
        Ok(scaled)
    }
}

/// Full alignment module: shared keys and values feed both attention paths.
pub fn align_block(
    tape: &mut Tape,
    e_t: Var,
    delta_prev: Var,
    p: &AlignmentVars,
    mode: AlignMode,
) -> Result<AlignedVars> {
    check_shapes(tape, e_t, delta_prev, p)?;
    let k = keys(tape, delta_prev, p)?;
    let v = tape.matmul(delta_prev, p.wv)?;
    let scale = position_from_keys(tape, e_t, k, p)?;
    let (translation, attention_c) = channel_from_kv(tape, e_t, k, v, p)?;
    let x = align(tape, v, scale, translation, mode)?;
    Ok(AlignedVars { scale, translation, value: v, attention_c, x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_keys_give_uniform_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = AlignmentParams::init(5, 4, 4, &mut rng);
        p.wk = Tensor::zeros(&[4, 4]);
        let out = p.apply(&random(&[4], &mut rng), &random(&[5, 4], &mut rng), AlignMode::FULL).unwrap();
        for &s in out.scale.data() {
            assert_abs_diff_eq!(s, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn scalar_position_attention() {
        let p = AlignmentParams {
            wq: Tensor::from_rows(&[&[1.0]]),
            wk: Tensor::from_rows(&[&[1.0]]),
            wv: Tensor::from_rows(&[&[1.0]]),
            wqc: Tensor::from_rows(&[&[1.0, 1.0]]),
        };
        let out = p.apply(&Tensor::vector(vec![1.0]), &Tensor::from_rows(&[&[1.0], &[0.0]]), AlignMode::FULL).unwrap();
        assert_abs_diff_eq!(out.scale.data()[0], 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(out.scale.data()[1], 0.26894, epsilon = 1e-5);
    }

    #[test]
    fn zero_values_give_zero_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = AlignmentParams::init(3, 4, 4, &mut rng);
        p.wv = Tensor::zeros(&[4, 4]);
        let out = p.apply(&random(&[4], &mut rng), &random(&[3, 4], &mut rng), AlignMode::FULL).unwrap();
        assert!(out.translation.data().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn channel_attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = AlignmentParams::init(3, 4, 4, &mut rng);
            let out = p.apply(&random(&[4], &mut rng), &random(&[3, 4], &mut rng), AlignMode::FULL).unwrap();
            for r in 0..4 {
                let row = out.attention_c.row(r);
                assert!(row.iter().all(|&a| a >= 0.0));
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn translation_is_convex_mix_for_single_layer() {
        // D=2, L=1, V=[[1,2]]: each T[c] = a_c0·1 + a_c1·2 with a_c a distribution.
        let p = AlignmentParams {
            wq: Tensor::identity(2),
            wk: Tensor::from_rows(&[&[0.5, -0.25], &[1.0, 0.75]]),
            wv: Tensor::identity(2),
            wqc: Tensor::from_rows(&[&[2.0]]),
        };
        let e = Tensor::vector(vec![0.6, -0.8]);
        let delta = Tensor::from_rows(&[&[1.0, 2.0]]);
        let out = p.apply(&e, &delta, AlignMode::FULL).unwrap();
        // K = [[1·0.5 + 2·1, 1·(-0.25) + 2·0.75]] = [[2.5, 1.25]]
        let k = [2.5, 1.25];
        for c in 0..2 {
            let q = e.data()[c] * 2.0;
            let (z0, z1) = ((q * k[0]).exp(), (q * k[1]).exp());
            let expect = (z0 * 1.0 + z1 * 2.0) / (z0 + z1);
            assert_abs_diff_eq!(out.translation.data()[c], expect, epsilon = 1e-14);
            assert!(expect > 1.0 && expect < 2.0);
        }
    }

    #[test]
    fn align_one_hot_and_zero_value() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let s = t.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let tr = t.constant(Tensor::zeros(&[2]));
        let x = align(&mut t, v, s, tr, AlignMode::FULL).unwrap();
        assert_eq!(t.value(x).data(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);

        let zero = t.constant(Tensor::zeros(&[3, 2]));
        let s = t.constant(Tensor::vector(vec![0.2, 0.5, 0.3]));
        let tr = t.constant(Tensor::vector(vec![-1.0, 7.0]));
        let x = align(&mut t, zero, s, tr, AlignMode::FULL).unwrap();
        for r in 0..3 {
            assert_eq!(t.value(x).row(r), &[-1.0, 7.0]);
        }
    }

    #[test]
    fn ablation_modes() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = t.constant(Tensor::vector(vec![0.25, 0.75]));
        let tr = t.constant(Tensor::vector(vec![10.0, 20.0]));
        let run = |t: &mut Tape, scale, translation| {
            let x = align(t, v, s, tr, AlignMode { scale, translation }).unwrap();
            t.value(x).data().to_vec()
        };
        assert_eq!(run(&mut t, true, true), vec![10.25, 20.5, 12.25, 23.0]);
        assert_eq!(run(&mut t, false, true), vec![11.0, 22.0, 13.0, 24.0]);
        assert_eq!(run(&mut t, true, false), vec![0.25, 0.5, 2.25, 3.0]);
        assert_eq!(run(&mut t, false, false), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AlignmentParams::init(3, 4, 4, &mut rng);
        assert!(p.apply(&random(&[5], &mut rng), &random(&[3, 4], &mut rng), AlignMode::FULL).is_err());
        assert!(p.apply(&random(&[4], &mut rng), &random(&[2, 4], &mut rng), AlignMode::FULL).is_err());
    }
}
