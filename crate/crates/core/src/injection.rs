//! Semantic injection: `Δ = (1 + γ)·(x − μ)/σ + β` with per-layer statistics
//! and channel-wise `γ`, `β` produced from the text embedding by two affine
//! maps.

use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionParams {
    pub gamma_weight: Tensor,
    pub gamma_bias: Tensor,
    pub beta_weight: Tensor,
    pub beta_bias: Tensor,
}

impl InjectionParams {
    /// All-zero affine maps, so `γ = β = 0` for every embedding.
    pub fn zeros(channels: usize, embed: usize) -> Self {
        Self {
            gamma_weight: Tensor::zeros(&[embed, channels]),
            gamma_bias: Tensor::zeros(&[channels]),
            beta_weight: Tensor::zeros(&[embed, channels]),
            beta_bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> InjectionVars {
        InjectionVars {
            gamma_weight: tape.param(self.gamma_weight.clone()),
            gamma_bias: tape.param(self.gamma_bias.clone()),
            beta_weight: tape.param(self.beta_weight.clone()),
            beta_bias: tape.param(self.beta_bias.clone()),
        }
    }

    /// `(β, γ)` for one embedding.
    pub fn params_for(&self, e_t: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let e = tape.constant(e_t.clone());
        let (beta, gamma) = injection_params(&mut tape, e, &vars)?;
        Ok((tape.value(beta).clone(), tape.value(gamma).clone()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InjectionVars {
    pub gamma_weight: Var,
    pub gamma_bias: Var,
    pub beta_weight: Var,
    pub beta_bias: Var,
}

impl InjectionVars {
    pub fn all(&self) -> [Var; 4] {
        [self.gamma_weight, self.gamma_bias, self.beta_weight, self.beta_bias]
    }
}

/// Returns `(β, γ)`.
pub fn injection_params(tape: &mut Tape, e_t: Var, p: &InjectionVars) -> Result<(Var, Var)> {
    let beta = tape.affine(e_t, p.beta_weight, p.beta_bias)?;
    let gamma = tape.affine(e_t, p.gamma_weight, p.gamma_bias)?;
    Ok((beta, gamma))
}

pub fn inject(tape: &mut Tape, x: Var, beta: Var, gamma: Var) -> Result<Var> {
    let [l, d] = *tape.value(x).dims() else {
        return Err(contract("inject expects an L×D input"));
    };
    if tape.value(beta).dims() != [d] || tape.value(gamma).dims() != [d] {
        return Err(contract(format!("β and γ must have length {d}")));
    }
    let (mean, std) = tape.row_stats(x);
    let mean = tape.broadcast_cols(mean, d)?;
    let std = tape.broadcast_cols(std, d)?;
    let centered = tape.sub(x, mean)?;
    let normalized = tape.div(centered, std)?;
    let one_plus = tape.add_scalar(gamma, 1.0);
    let gain = tape.broadcast_rows(one_plus, l)?;
    let shift = tape.broadcast_rows(beta, l)?;
    let scaled = tape.mul(gain, normalized)?;
    tape.add(scaled, shift)
}

/// Value-level `inject` for fixed `β`, `γ`.
pub fn inject_values(x: &Tensor, beta: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, b, g) = (tape.constant(x.clone()), tape.constant(beta.clone()), tape.constant(gamma.clone()));
    let out = inject(&mut tape, x, b, g)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_maps_give_zero_params() {
        let p = InjectionParams::zeros(3, 3);
        let (b, g) = p.params_for(&Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        assert_eq!(b.data(), &[0.0; 3]);
        assert_eq!(g.data(), &[0.0; 3]);
    }

    #[test]
    fn identity_weights_reproduce_embedding() {
        let mut p = InjectionParams::zeros(3, 3);
        p.beta_weight = Tensor::identity(3);
        p.gamma_weight = Tensor::identity(3);
        let e = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let (b, g) = p.params_for(&e).unwrap();
        assert_eq!(b, e);
        assert_eq!(g, e);
    }

    #[test]
    fn affine_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = |dims: &[usize]| {
            let n = dims.iter().product();
            Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let p = InjectionParams {
            gamma_weight: r(&[3, 2]),
            gamma_bias: r(&[2]),
            beta_weight: r(&[3, 2]),
            beta_bias: r(&[2]),
        };
        let e = r(&[3]);
        let (b, g) = p.params_for(&e).unwrap();
        for c in 0..2 {
            let mut gb = p.beta_bias.data()[c];
            let mut gg = p.gamma_bias.data()[c];
            for i in 0..3 {
                gb += e.data()[i] * p.beta_weight.get(i, c);
                gg += e.data()[i] * p.gamma_weight.get(i, c);
            }
            assert_abs_diff_eq!(b.data()[c], gb, epsilon = 1e-15);
            assert_abs_diff_eq!(g.data()[c], gg, epsilon = 1e-15);
        }
    }

    #[test]
    fn inject_examples() {
        let x = Tensor::from_rows(&[&[1.0, 3.0]]);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(inject_values(&x, &zero, &zero).unwrap().data(), &[-1.0, 1.0]);
        let out = inject_values(&x, &Tensor::filled(&[2], 2.0), &Tensor::filled(&[2], 1.0)).unwrap();
        assert_eq!(out.data(), &[0.0, 4.0]);
        let flat = Tensor::from_rows(&[&[5.0, 5.0]]);
        let beta = Tensor::vector(vec![0.7, -0.2]);
        assert_eq!(inject_values(&flat, &beta, &zero).unwrap().data(), &[0.7, -0.2]);
    }

    #[test]
    fn rejects_mismatched_modulation() {
        let x = Tensor::from_rows(&[&[1.0, 3.0]]);
        assert!(inject_values(&x, &Tensor::zeros(&[3]), &Tensor::zeros(&[2])).is_err());
    }
}
