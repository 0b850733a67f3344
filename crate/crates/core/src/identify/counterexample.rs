//! Explicit pairs of distinct parameters with matching moments.

use crate::error::{Error, Result};
use crate::numeric::max_abs_diff;
use crate::params::{ApRwParams, ApcRwParams, ConstraintSet, FullyParametricApcParams, LOADING_DISTINCT_TOL};

/// Two age-period random-walk parameters with zero drift whose mean grids
/// coincide: `alpha~_x = alpha_x + c (beta_x - beta~_x)`.
pub fn counterexample_ap_means_mu0(
    alpha: &[f64],
    beta: &[f64],
    beta_tilde: &[f64],
    c: f64,
    sigma2_e: f64,
    sigma2_eps: f64,
) -> Result<(ApRwParams, ApRwParams)> {
    let a = ApRwParams::new(alpha.to_vec(), beta.to_vec(), 0.0, sigma2_e, sigma2_eps)?;
    if beta_tilde.len() != beta.len() {
        return Err(Error::InvalidParams("beta and beta_tilde differ in length".into()));
    }
    if max_abs_diff(beta, beta_tilde) <= LOADING_DISTINCT_TOL {
        return Err(Error::InvalidParams("the construction needs beta ≠ beta_tilde".into()));
    }
    if !c.is_finite() {
        return Err(Error::InvalidParams(format!("c={c} is not finite")));
    }
    let alpha_tilde = alpha
        .iter()
        .zip(beta.iter().zip(beta_tilde))
        .map(|(a, (b, bt))| a + c * (b - bt))
        .collect();
    let b = ApRwParams::new(alpha_tilde, beta_tilde.to_vec(), 0.0, sigma2_e, sigma2_eps)?;
    Ok((a, b))
}

/// The two fully parametric cohort parameterisations with identical
/// predictors on the whole panel, for `X > 2`, `T > 2`.
///
/// Shared part: `alpha_x = -(x + 2)`, uniform period loadings and
/// `kappa = (0, 1, -1, 0, ...)`, which satisfy both constraint sets.
pub fn counterexample_apc_fullyparam(
    max_age: usize,
    periods: usize,
) -> Result<(FullyParametricApcParams, FullyParametricApcParams)> {
    if max_age <= 2 || periods <= 2 {
        return Err(Error::Dimension(format!(
            "the construction needs X > 2 and T > 2, got X={max_age}, T={periods}"
        )));
    }
    let n = max_age + 1;
    let alpha: Vec<f64> = (0..n).map(|x| -(x as f64 + 2.0)).collect();
    let beta1 = vec![1.0 / n as f64; n];
    let mut kappa = vec![0.0; periods];
    kappa[1] = 1.0;
    kappa[2] = -1.0;

    let cohort = |b0: f64, b1: f64, iota_zero: f64, iota_last: f64| {
        let mut beta0 = vec![0.0; n];
        beta0[0] = b0;
        beta0[1] = b1;
        // iota_{1-X} at position 0, iota_0 at X-1, iota_T at T+X-1
        let mut iota = vec![0.0; periods + max_age];
        iota[0] = -2.0;
        iota[max_age - 1] = iota_zero;
        iota[periods + max_age - 1] = iota_last;
        (beta0, iota)
    };
    let (beta0_a, iota_a) = cohort(0.75, 0.25, 1.0, 1.0);
    let (beta0_b, iota_b) = cohort(0.5, 0.5, 0.5, 1.5);
    let a = FullyParametricApcParams {
        alpha: alpha.clone(),
        beta0: beta0_a,
        beta1: beta1.clone(),
        kappa: kappa.clone(),
        iota: iota_a,
        constraints: ConstraintSet::B,
    };
    let b = FullyParametricApcParams {
        alpha,
        beta0: beta0_b,
        beta1,
        kappa,
        iota: iota_b,
        constraints: ConstraintSet::B,
    };
    Ok((a, b))
}

/// Swaps the two drifts of a cohort model whose loadings coincide and
/// moves the offset into `alpha`.
pub fn counterexample_apc_equal_loadings(p: &ApcRwParams) -> Result<(ApcRwParams, ApcRwParams)> {
    let verdict = p.validate_with(false);
    if !verdict.is_ok() {
        return Err(Error::InvalidParams(verdict.to_string()));
    }
    if max_abs_diff(&p.beta0, &p.beta1) > LOADING_DISTINCT_TOL {
        return Err(Error::InvalidParams("the drift swap needs beta0 = beta1".into()));
    }
    if p.mu0 == p.mu1 {
        return Err(Error::InvalidParams("the drift swap needs mu0 ≠ mu1".into()));
    }
    let x_max = p.alpha.len() - 1;
    let mut b = p.clone();
    b.mu0 = p.mu1;
    b.mu1 = p.mu0;
    for x in 0..=x_max {
        let lag = (x_max - x) as f64;
        b.alpha[x] = p.alpha[x] - lag * b.beta0[x] * b.mu0 + lag * b.beta1[x] * p.mu0;
    }
    Ok((p.clone(), b))
}

/// With a single age the two innovation variances only enter through their
/// sum, so `z` can be moved from one to the other.
pub fn counterexample_apc_x0_variance_trade(p: &ApcRwParams, z: f64) -> Result<(ApcRwParams, ApcRwParams)> {
    if p.alpha.len() != 1 {
        return Err(Error::Dimension(format!("the variance trade needs X = 0, got X={}", p.alpha.len() as i64 - 1)));
    }
    let verdict = p.validate_with(false);
    if !verdict.is_ok() {
        return Err(Error::InvalidParams(verdict.to_string()));
    }
    if !(z > -p.sigma2_e0 && z < p.sigma2_e1) {
        return Err(Error::InvalidParams(format!(
            "z={z} outside the open interval ({}, {})",
            -p.sigma2_e0, p.sigma2_e1
        )));
    }
    let mut b = p.clone();
    b.sigma2_e0 = p.sigma2_e0 + z;
    b.sigma2_e1 = p.sigma2_e1 - z;
    Ok((p.clone(), b))
}
