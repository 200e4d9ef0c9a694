//! Diagonal-Gaussian helpers shared by both information-bottleneck heads.
//!
//! Encoders emit log-variance; `σ = exp(½·logvar)` is always positive.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_sigma(sigma: &[f64]) -> Result<()> {
    match sigma.iter().position(|&s| !(s > 0.0)) {
        Some(index) => Err(Error::NonPositiveSigma {
            index,
            value: sigma[index],
        }),
        None => Ok(()),
    }
}

/// `KL(𝒩(μ, diag σ²) ‖ 𝒩(0, I)) = Σ ½(μ² + σ² − 1 − 2 ln σ)`.
pub fn kl_diag_to_standard(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::invalid(format!(
            "mu has {} entries, sigma has {}",
            mu.len(),
            sigma.len()
        )));
    }
    check_sigma(sigma)?;
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum())
}

/// `KL(p ‖ q)` between two diagonal Gaussians.
pub fn kl_diag(mu_p: &[f64], sigma_p: &[f64], mu_q: &[f64], sigma_q: &[f64]) -> Result<f64> {
    let n = mu_p.len();
    if sigma_p.len() != n || mu_q.len() != n || sigma_q.len() != n {
        return Err(Error::invalid("kl_diag: length mismatch"));
    }
    check_sigma(sigma_p)?;
    check_sigma(sigma_q)?;
    Ok((0..n)
        .map(|d| {
            let (vp, vq) = (sigma_p[d] * sigma_p[d], sigma_q[d] * sigma_q[d]);
            let dm = mu_p[d] - mu_q[d];
            0.5 * ((vp + dm * dm) / vq - 1.0 + (vq / vp).ln())
        })
        .sum())
}

/// `KL(p‖q) + KL(q‖p)`.
pub fn symmetric_kl_diag(
    mu_p: &[f64],
    sigma_p: &[f64],
    mu_q: &[f64],
    sigma_q: &[f64],
) -> Result<f64> {
    Ok(kl_diag(mu_p, sigma_p, mu_q, sigma_q)? + kl_diag(mu_q, sigma_q, mu_p, sigma_p)?)
}

/// `μ + σ ⊙ ε` with `ε ~ 𝒩(0, I)`.
pub fn reparam_sample(mu: &[f64], sigma: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if mu.len() != sigma.len() {
        return Err(Error::invalid("reparam_sample: length mismatch"));
    }
    check_sigma(sigma)?;
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + s * eps
        })
        .collect())
}

/// Standard-normal noise tensor.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Traced `μ + σ ⊙ ε`; differentiable in both `mu` and `sigma`.
pub fn reparam_sample_var(tape: &mut Tape, mu: Var, sigma: Var, eps: &Tensor) -> Result<Var> {
    check_sigma(tape.value(sigma).data())?;
    let e = tape.constant(eps.clone());
    let noise = tape.mul(sigma, e)?;
    tape.add(mu, noise)
}

/// `σ = exp(½·logvar)`.
pub fn sigma_from_logvar(tape: &mut Tape, logvar: Var) -> Var {
    let half = tape.scale(logvar, 0.5);
    tape.exp(half)
}

/// Per-row KL to the standard normal from `(mu, logvar)` rows, as an `n x 1` column.
pub fn kl_rows_to_standard(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.shift(s, -1.0);
    let ones = tape.constant(Tensor::ones(tape.shape(mu)[1], 1));
    let per_row = tape.matmul(s, ones)?;
    Ok(tape.scale(per_row, 0.5))
}
