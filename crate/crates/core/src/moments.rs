//! Exact first and second moments of the plug-in models.
//!
//! Each family's covariance factors into loadings times a latent-process
//! kernel plus an Iverson-bracket measurement term. The latent kernels are
//! available both in closed form ([`LatentProcess::cov`]) and as a direct
//! double sum over innovation covariances ([`LatentProcess::cov_doublesum`]),
//! which serves as an independent oracle for the closed forms.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{
    ApArima011Params, ApArima110Params, ApRwParams, ApcRwParams, InitialConditions, ModelParams,
    PanelDims,
};

/// Latent period process of an age-period model (levels, without drift).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "snake_case")]
pub enum LatentProcess {
    RandomWalk { sigma2: f64 },
    Arima110 { rho: f64, sigma2: f64 },
    Arima011 { phi: f64, sigma2: f64 },
}

impl LatentProcess {
    /// Closed-form `Cov(y_t, y_q)` for `t, q >= 1`.
    pub fn cov(&self, t: usize, q: usize) -> f64 {
        match *self {
            LatentProcess::RandomWalk { sigma2 } => sigma2 * t.min(q) as f64,
            LatentProcess::Arima110 { rho, sigma2 } => cov_latent_arima110(rho, sigma2, t, q),
            LatentProcess::Arima011 { phi, sigma2 } => cov_latent_arima011(phi, sigma2, t, q),
        }
    }

    /// `Cov(y_t, y_q)` by summing innovation-level covariances over
    /// `s = 1..=t`, `r = 1..=q`.
    pub fn cov_doublesum(&self, t: usize, q: usize) -> f64 {
        let mut acc = 0.0;
        for s in 1..=t as i64 {
            for r in 1..=q as i64 {
                acc += match *self {
                    LatentProcess::RandomWalk { sigma2 } => {
                        if s == r {
                            sigma2
                        } else {
                            0.0
                        }
                    }
                    // stationary AR(1) autocovariance of the differences
                    LatentProcess::Arima110 { rho, sigma2 } => {
                        sigma2 * rho.powi((s - r).abs() as i32) / (1.0 - rho * rho)
                    }
                    // E[A(s, r)] with A(s,r) = (e_s + phi e_{s-1})(e_r + phi e_{r-1})
                    LatentProcess::Arima011 { phi, sigma2 } => {
                        let mut e = 0.0;
                        if s == r {
                            e += 1.0 + phi * phi;
                        }
                        if s - 1 == r {
                            e += phi;
                        }
                        if s == r - 1 {
                            e += phi;
                        }
                        sigma2 * e
                    }
                };
            }
        }
        acc
    }

    fn unit(&self) -> LatentProcess {
        match *self {
            LatentProcess::RandomWalk { .. } => LatentProcess::RandomWalk { sigma2: 1.0 },
            LatentProcess::Arima110 { rho, .. } => LatentProcess::Arima110 { rho, sigma2: 1.0 },
            LatentProcess::Arima011 { phi, .. } => LatentProcess::Arima011 { phi, sigma2: 1.0 },
        }
    }

    /// Kernel with unit innovation variance.
    pub fn unit_kernel(&self) -> LatentProcess {
        self.unit()
    }
}

/// Oracle for the latent covariance: direct double summation.
pub fn oracle_cov_doublesum(process: LatentProcess, t: usize, q: usize) -> f64 {
    process.cov_doublesum(t, q)
}

/// Covariance of an ARIMA(1,1,0) process in levels with stationary history.
///
/// `(t∧q) σ²/(1-ρ)² - σ² ρ (ρ^{t∨q} - ρ^{|t-q|} + ρ^{t∧q} - 1) / ((ρ-1)³(ρ+1))`
pub fn cov_latent_arima110(rho: f64, sigma2: f64, t: usize, q: usize) -> f64 {
    let (lo, hi) = (t.min(q), t.max(q));
    let gap = hi - lo;
    let m = lo as f64;
    let num = rho.powi(hi as i32) - rho.powi(gap as i32) + rho.powi(lo as i32) - 1.0;
    let den = (rho - 1.0).powi(3) * (rho + 1.0);
    m * sigma2 / ((1.0 - rho) * (1.0 - rho)) - sigma2 * rho * num / den
}

/// Covariance of an ARIMA(0,1,1) process in levels:
/// `σ² [(t∧q)(φ+1)² - (1 + [t=q]) φ]`.
pub fn cov_latent_arima011(phi: f64, sigma2: f64, t: usize, q: usize) -> f64 {
    let m = t.min(q) as f64;
    let same = if t == q { 1.0 } else { 0.0 };
    sigma2 * (m * (phi + 1.0) * (phi + 1.0) - (1.0 + same) * phi)
}

fn check_age(n_ages: usize, x: usize) -> Result<()> {
    if x >= n_ages {
        return Err(Error::IndexOutOfRange(format!("age {x} outside 0..={}", n_ages as i64 - 1)));
    }
    Ok(())
}

fn check_period(t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::IndexOutOfRange("periods start at 1".into()));
    }
    Ok(())
}

fn noise(x: usize, y: usize, s: usize, t: usize, sigma2_eps: f64) -> f64 {
    if x == y && s == t {
        sigma2_eps
    } else {
        0.0
    }
}

pub fn mean_ap_rw(p: &ApRwParams, init: &InitialConditions, x: usize, t: usize) -> Result<f64> {
    check_age(p.alpha.len(), x)?;
    check_period(t)?;
    Ok(ap_mean(&p.alpha, &p.beta, p.mu, init.c, x, t))
}

fn ap_mean(alpha: &[f64], beta: &[f64], mu: f64, c: f64, x: usize, t: usize) -> f64 {
    alpha[x] + beta[x] * mu * t as f64 + beta[x] * c
}

pub fn cov_ap_rw(p: &ApRwParams, x: usize, y: usize, s: usize, t: usize) -> Result<f64> {
    check_age(p.beta.len(), x)?;
    check_age(p.beta.len(), y)?;
    check_period(s)?;
    check_period(t)?;
    let latent = LatentProcess::RandomWalk { sigma2: p.sigma2_e };
    Ok(p.beta[x] * p.beta[y] * latent.cov(s, t) + noise(x, y, s, t, p.sigma2_eps))
}

pub fn cov_ap_arima110(p: &ApArima110Params, x: usize, y: usize, s: usize, t: usize) -> Result<f64> {
    check_age(p.beta.len(), x)?;
    check_age(p.beta.len(), y)?;
    check_period(s)?;
    check_period(t)?;
    Ok(p.beta[x] * p.beta[y] * cov_latent_arima110(p.rho, p.sigma2_e, s, t)
        + noise(x, y, s, t, p.sigma2_eps))
}

pub fn cov_ap_arima011(p: &ApArima011Params, x: usize, y: usize, s: usize, t: usize) -> Result<f64> {
    check_age(p.beta.len(), x)?;
    check_age(p.beta.len(), y)?;
    check_period(s)?;
    check_period(t)?;
    Ok(p.beta[x] * p.beta[y] * cov_latent_arima011(p.phi, p.sigma2_e, s, t)
        + noise(x, y, s, t, p.sigma2_eps))
}

/// Mean of the cohort model. Requires the panel's `X` through `p.alpha`.
pub fn mean_apc_rw(p: &ApcRwParams, init: &InitialConditions, x: usize, t: usize) -> Result<f64> {
    check_age(p.alpha.len(), x)?;
    check_period(t)?;
    let x_max = (p.alpha.len() - 1) as f64;
    let cohort_age = t as f64 - x as f64 + x_max;
    Ok(p.alpha[x]
        + p.beta0[x] * init.c0
        + p.beta0[x] * p.mu0 * cohort_age
        + p.beta1[x] * init.c1
        + p.beta1[x] * p.mu1 * t as f64)
}

pub fn cov_apc_rw(p: &ApcRwParams, x: usize, y: usize, s: usize, t: usize) -> Result<f64> {
    check_age(p.alpha.len(), x)?;
    check_age(p.alpha.len(), y)?;
    check_period(s)?;
    check_period(t)?;
    let x_max = p.alpha.len() - 1;
    // s - x + X >= 1 because x <= X and s >= 1
    let cohort = (s + x_max - x).min(t + x_max - y) as f64;
    let period = s.min(t) as f64;
    Ok(p.beta0[x] * p.beta0[y] * p.sigma2_e0 * cohort
        + p.beta1[x] * p.beta1[y] * p.sigma2_e1 * period
        + noise(x, y, s, t, p.sigma2_eps))
}

/// Latent process of an age-period family, `None` for the cohort model.
pub fn latent_of(params: &ModelParams) -> Option<LatentProcess> {
    match params {
        ModelParams::ApRw(p) => Some(LatentProcess::RandomWalk { sigma2: p.sigma2_e }),
        ModelParams::ApArima110(p) => Some(LatentProcess::Arima110 { rho: p.rho, sigma2: p.sigma2_e }),
        ModelParams::ApArima011(p) => Some(LatentProcess::Arima011 { phi: p.phi, sigma2: p.sigma2_e }),
        ModelParams::ApcRw(_) => None,
    }
}

/// `f_θ(x, t)` for any family.
pub fn mean(params: &ModelParams, init: &InitialConditions, x: usize, t: usize) -> Result<f64> {
    match params {
        ModelParams::ApRw(p) => mean_ap_rw(p, init, x, t),
        ModelParams::ApArima110(p) => {
            check_age(p.alpha.len(), x)?;
            check_period(t)?;
            Ok(ap_mean(&p.alpha, &p.beta, p.mu, init.c, x, t))
        }
        ModelParams::ApArima011(p) => {
            check_age(p.alpha.len(), x)?;
            check_period(t)?;
            Ok(ap_mean(&p.alpha, &p.beta, p.mu, init.c, x, t))
        }
        ModelParams::ApcRw(p) => mean_apc_rw(p, init, x, t),
    }
}

/// `g_θ(x, y, s, t)` for any family.
pub fn cov(params: &ModelParams, x: usize, y: usize, s: usize, t: usize) -> Result<f64> {
    match params {
        ModelParams::ApRw(p) => cov_ap_rw(p, x, y, s, t),
        ModelParams::ApArima110(p) => cov_ap_arima110(p, x, y, s, t),
        ModelParams::ApArima011(p) => cov_ap_arima011(p, x, y, s, t),
        ModelParams::ApcRw(p) => cov_apc_rw(p, x, y, s, t),
    }
}

/// Which moments enter a comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentScope {
    MeansOnly,
    Full,
}

/// Dense means and covariances over the whole panel.
///
/// Covariances are indexed by the flattened cell position
/// [`PanelDims::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct MomentGrid {
    pub dims: PanelDims,
    /// `(X+1) x T`, entry `(x, t-1)`.
    pub means: DMatrix<f64>,
    /// `N x N` with `N = (X+1) T`.
    pub covs: DMatrix<f64>,
}

impl MomentGrid {
    pub fn mean(&self, x: usize, t: usize) -> f64 {
        self.means[(x, t - 1)]
    }

    pub fn cov(&self, x: usize, y: usize, s: usize, t: usize) -> f64 {
        self.covs[(self.dims.index(x, s), self.dims.index(y, t))]
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.covs.nrows();
        (0..n).all(|i| (0..i).all(|j| self.covs[(i, j)] == self.covs[(j, i)]))
    }

    /// Smallest eigenvalue of the covariance matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.covs.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// PSD up to `-1e-8 * trace`.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -1e-8 * self.covs.trace()
    }

    /// Max absolute difference of means (and covariances, for `Full`).
    pub fn residual(&self, other: &MomentGrid, scope: MomentScope) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Input("moment grids have different panel dimensions".into()));
        }
        let mean_res = self.mean_residual(other);
        Ok(match scope {
            MomentScope::MeansOnly => mean_res,
            MomentScope::Full => mean_res.max(self.cov_residual(other)),
        })
    }

    pub fn mean_residual(&self, other: &MomentGrid) -> f64 {
        (&self.means - &other.means).amax()
    }

    pub fn cov_residual(&self, other: &MomentGrid) -> f64 {
        (&self.covs - &other.covs).amax()
    }

    /// Largest absolute entry, used to scale tolerances.
    pub fn scale(&self) -> f64 {
        self.means.amax().max(self.covs.amax()).max(1.0)
    }

    pub fn to_serial(&self) -> SerialGrid {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        SerialGrid { dims: self.dims, means: rows(&self.means), covs: rows(&self.covs) }
    }

    pub fn from_serial(s: &SerialGrid) -> Result<Self> {
        let n = s.dims.n_cells();
        if s.means.len() != s.dims.n_ages() || s.means.iter().any(|r| r.len() != s.dims.periods()) {
            return Err(Error::Input("means block does not match dims".into()));
        }
        if s.covs.len() != n || s.covs.iter().any(|r| r.len() != n) {
            return Err(Error::Input("covariance block does not match dims".into()));
        }
        let means = DMatrix::from_fn(s.dims.n_ages(), s.dims.periods(), |i, j| s.means[i][j]);
        let covs = DMatrix::from_fn(n, n, |i, j| s.covs[i][j]);
        Ok(MomentGrid { dims: s.dims, means, covs })
    }

    /// Long-format covariance rows `(x, y, s, t, value)`.
    pub fn long_cov_rows(&self) -> Vec<(usize, usize, usize, usize, f64)> {
        let d = self.dims;
        let mut out = Vec::with_capacity(d.n_cells() * d.n_cells());
        for x in 0..d.n_ages() {
            for y in 0..d.n_ages() {
                for s in 1..=d.periods() {
                    for t in 1..=d.periods() {
                        out.push((x, y, s, t, self.cov(x, y, s, t)));
                    }
                }
            }
        }
        out
    }
}

/// Row-major, serialisable form of a [`MomentGrid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerialGrid {
    pub dims: PanelDims,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<f64>>,
}

/// Evaluates `f_θ` and `g_θ` on the whole panel.
pub fn moment_grid(params: &ModelParams, init: &InitialConditions, dims: &PanelDims) -> Result<MomentGrid> {
    params.check_dims(dims)?;
    let (na, tp) = (dims.n_ages(), dims.periods());
    let mut means = DMatrix::zeros(na, tp);
    for x in 0..na {
        for t in 1..=tp {
            means[(x, t - 1)] = mean(params, init, x, t)?;
        }
    }
    let n = dims.n_cells();
    let mut covs = DMatrix::zeros(n, n);
    match latent_of(params) {
        Some(latent) => {
            // latent table once, then loadings; identical arithmetic to cov_ap_*
            let table: Vec<f64> = (1..=tp)
                .flat_map(|s| (1..=tp).map(move |t| latent.cov(s, t)))
                .collect();
            let (beta, s2eps) = ap_loadings(params);
            for x in 0..na {
                for s in 1..=tp {
                    let i = dims.index(x, s);
                    for y in x..na {
                        for t in 1..=tp {
                            let j = dims.index(y, t);
                            if j < i {
                                continue;
                            }
                            let v = beta[x] * beta[y] * table[(s - 1) * tp + (t - 1)]
                                + noise(x, y, s, t, s2eps);
                            covs[(i, j)] = v;
                            covs[(j, i)] = v;
                        }
                    }
                }
            }
        }
        None => {
            for x in 0..na {
                for s in 1..=tp {
                    let i = dims.index(x, s);
                    for y in x..na {
                        for t in 1..=tp {
                            let j = dims.index(y, t);
                            if j < i {
                                continue;
                            }
                            let v = cov(params, x, y, s, t)?;
                            covs[(i, j)] = v;
                            covs[(j, i)] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(MomentGrid { dims: *dims, means, covs })
}

fn ap_loadings(params: &ModelParams) -> (&[f64], f64) {
    match params {
        ModelParams::ApRw(p) => (&p.beta, p.sigma2_eps),
        ModelParams::ApArima110(p) => (&p.beta, p.sigma2_eps),
        ModelParams::ApArima011(p) => (&p.beta, p.sigma2_eps),
        ModelParams::ApcRw(_) => unreachable!("cohort model has no single loading vector"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Family;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const COEFS: [f64; 5] = [-0.9, -0.5, 0.0, 0.5, 0.9];

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn ap(beta: Vec<f64>, mu: f64, s2e: f64, s2eps: f64, alpha: Vec<f64>) -> ApRwParams {
        ApRwParams { alpha, beta, mu, sigma2_e: s2e, sigma2_eps: s2eps }
    }

    #[test]
    fn mean_ap_rw_examples() {
        let p = ap(vec![0.3, 0.7], 0.1, 1.0, 1.0, vec![-1.0, -2.0]);
        let init = InitialConditions::default();
        assert!(close(mean_ap_rw(&p, &init, 1, 10).unwrap(), -1.3, 1e-14));
        let p0 = ap(vec![0.3, 0.7], 0.0, 1.0, 1.0, vec![-1.0, -2.0]);
        assert_eq!(mean_ap_rw(&p0, &init, 0, 7).unwrap(), -1.0);
        let p5 = ap(vec![0.5, 0.5], 0.0, 1.0, 1.0, vec![0.0, 0.0]);
        let init5 = InitialConditions { c: 5.0, ..Default::default() };
        assert_eq!(mean_ap_rw(&p5, &init5, 1, 3).unwrap(), 2.5);
        assert!(mean_ap_rw(&p5, &init5, 2, 3).is_err());
        assert!(mean_ap_rw(&p5, &init5, 0, 0).is_err());
    }

    #[test]
    fn cov_ap_rw_examples() {
        let p = ap(vec![0.5, 0.5], 0.0, 4.0, 1.0, vec![0.0, 0.0]);
        assert!(close(cov_ap_rw(&p, 0, 0, 3, 3).unwrap(), 4.0, 1e-14));
        // oracle: beta_x beta_y times the double sum of innovation covariances
        let oracle = 0.25 * oracle_cov_doublesum(LatentProcess::RandomWalk { sigma2: 4.0 }, 3, 3) + 1.0;
        assert!(close(oracle, 4.0, 1e-14));
        let q = ap(vec![0.5, 0.5], 0.0, 1.0, 1.0, vec![0.0, 0.0]);
        assert!(close(cov_ap_rw(&q, 0, 1, 2, 3).unwrap(), 0.5, 1e-14));
        let z = ap(vec![0.0, 1.0], 0.0, 1.0, 1.0, vec![0.0, 0.0]);
        for s in 1..5 {
            for t in 1..5 {
                assert_eq!(cov_ap_rw(&z, 0, 1, s, t).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn mean_apc_rw_examples() {
        let init = InitialConditions::default();
        let p = ApcRwParams {
            alpha: vec![0.0, 0.0],
            beta0: vec![0.2, 0.8],
            beta1: vec![0.6, 0.4],
            mu0: 1.0,
            mu1: 2.0,
            sigma2_e0: 1.0,
            sigma2_e1: 1.0,
            sigma2_eps: 1.0,
        };
        assert!(close(mean_apc_rw(&p, &init, 0, 3).unwrap(), 4.4, 1e-14));
        // x = X: cohort age offset vanishes
        let at_x = mean_apc_rw(&p, &init, 1, 3).unwrap();
        assert!(close(at_x, 0.8 * 3.0 + 0.4 * 2.0 * 3.0, 1e-14));
        let mut flat = p.clone();
        flat.alpha = vec![-3.0, -2.0];
        flat.mu0 = 0.0;
        flat.mu1 = 0.0;
        assert_eq!(mean_apc_rw(&flat, &init, 1, 5).unwrap(), -2.0);
    }

    fn apc(beta0: Vec<f64>, beta1: Vec<f64>, s0: f64, s1: f64, eps: f64) -> ApcRwParams {
        ApcRwParams {
            alpha: vec![0.0; beta0.len()],
            beta0,
            beta1,
            mu0: 0.0,
            mu1: 0.0,
            sigma2_e0: s0,
            sigma2_e1: s1,
            sigma2_eps: eps,
        }
    }

    /// Cohort covariance by summing over both innovation streams directly.
    fn apc_doublesum(p: &ApcRwParams, x: usize, y: usize, s: usize, t: usize) -> f64 {
        let xm = p.alpha.len() - 1;
        let mut cohort = 0.0;
        for r1 in 1..=(s + xm - x) {
            for r2 in 1..=(t + xm - y) {
                if r1 == r2 {
                    cohort += p.sigma2_e0;
                }
            }
        }
        let period = LatentProcess::RandomWalk { sigma2: p.sigma2_e1 }.cov_doublesum(s, t);
        let eps = if x == y && s == t { p.sigma2_eps } else { 0.0 };
        p.beta0[x] * p.beta0[y] * cohort + p.beta1[x] * p.beta1[y] * period + eps
    }

    #[test]
    fn cov_apc_rw_examples() {
        // X = 0: both loadings are 1
        let p = apc(vec![1.0], vec![1.0], 0.7, 1.3, 0.2);
        for s in 1..6 {
            for t in 1..6 {
                let want = 2.0 * s.min(t) as f64 + if s == t { 0.2 } else { 0.0 };
                assert!(close(cov_apc_rw(&p, 0, 0, s, t).unwrap(), want, 1e-13));
            }
        }
        // same cohort, X = 1, x = 0, y = 1, s = 2, t = 3
        let q = apc(vec![0.4, 0.6], vec![0.9, 0.1], 1.5, 0.5, 0.3);
        let want = 0.4 * 0.6 * 1.5 * 3.0 + 0.9 * 0.1 * 0.5 * 2.0;
        assert!(close(cov_apc_rw(&q, 0, 1, 2, 3).unwrap(), want, 1e-14));
        assert!(close(apc_doublesum(&q, 0, 1, 2, 3), want, 1e-14));
        // all loadings zero at x
        let z = apc(vec![0.0, 1.0], vec![0.0, 1.0], 1.0, 1.0, 1.0);
        assert_eq!(cov_apc_rw(&z, 0, 1, 2, 4).unwrap(), 0.0);
    }

    #[test]
    fn cov_apc_matches_doublesum_on_grid() {
        let p = apc(vec![0.1, 0.5, -0.2, 0.6], vec![0.3, 0.3, 0.2, 0.2], 0.8, 1.7, 0.4);
        for x in 0..4 {
            for y in 0..4 {
                for s in 1..=7 {
                    for t in 1..=7 {
                        let a = cov_apc_rw(&p, x, y, s, t).unwrap();
                        let b = apc_doublesum(&p, x, y, s, t);
                        assert!(close(a, b, 1e-12), "{x} {y} {s} {t}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn arima110_latent_examples() {
        for t in 1..8 {
            for q in 1..8 {
                assert_eq!(cov_latent_arima110(0.0, 2.0, t, q), 2.0 * t.min(q) as f64);
            }
        }
        assert!(close(cov_latent_arima110(0.5, 1.0, 1, 1), 4.0 / 3.0, 1e-14));
        assert!(close(cov_latent_arima110(0.5, 1.0, 2, 1), 2.0, 1e-14));
        let orc = LatentProcess::Arima110 { rho: 0.5, sigma2: 1.0 };
        assert!(close(orc.cov_doublesum(1, 1), 4.0 / 3.0, 1e-14));
        assert!(close(orc.cov_doublesum(2, 1), 2.0, 1e-14));
    }

    #[test]
    fn arima011_latent_examples() {
        assert!(close(cov_latent_arima011(0.5, 1.0, 1, 1), 1.25, 1e-15));
        assert!(close(cov_latent_arima011(0.5, 1.0, 2, 1), 1.75, 1e-15));
        let orc = LatentProcess::Arima011 { phi: 0.5, sigma2: 1.0 };
        assert!(close(orc.cov_doublesum(1, 1), 1.25, 1e-15));
        assert!(close(orc.cov_doublesum(2, 1), 1.75, 1e-15));
        for t in 1..8 {
            for q in 1..8 {
                assert_eq!(cov_latent_arima011(0.0, 3.0, t, q), 3.0 * t.min(q) as f64);
            }
        }
    }

    #[test]
    fn closed_forms_match_doublesum_oracles() {
        for &c in &COEFS {
            let a = LatentProcess::Arima110 { rho: c, sigma2: 1.3 };
            let m = LatentProcess::Arima011 { phi: c, sigma2: 1.3 };
            for t in 1..=50 {
                for q in 1..=50 {
                    assert!(close(a.cov(t, q), a.cov_doublesum(t, q), 1e-9), "rho={c} t={t} q={q}");
                    assert!(close(m.cov(t, q), m.cov_doublesum(t, q), 1e-9), "phi={c} t={t} q={q}");
                }
            }
        }
    }

    #[test]
    fn arima110_closed_form_is_accurate_for_tiny_rho() {
        for &rho in &[1e-3, -1e-4, 1e-5, 3e-7, -1e-9] {
            let a = LatentProcess::Arima110 { rho, sigma2: 1.0 };
            for t in [1, 2, 17, 50] {
                for q in [1, 3, 50] {
                    assert!(close(a.cov(t, q), a.cov_doublesum(t, q), 1e-11), "{rho} {t} {q}");
                }
            }
        }
    }

    #[test]
    fn ap_arima_examples() {
        let p = ApArima110Params {
            alpha: vec![0.0],
            beta: vec![1.0],
            mu: 0.0,
            rho: 0.5,
            sigma2_e: 1.0,
            sigma2_eps: 2.0,
        };
        assert!(close(cov_ap_arima110(&p, 0, 0, 1, 1).unwrap(), 4.0 / 3.0 + 2.0, 1e-14));
        let q = ApArima011Params {
            alpha: vec![0.0, 0.0],
            beta: vec![0.5, 0.5],
            mu: 0.0,
            phi: 0.5,
            sigma2_e: 1.0,
            sigma2_eps: 0.3,
        };
        assert!(close(cov_ap_arima011(&q, 0, 1, 2, 1).unwrap(), 0.25 * 1.75, 1e-15));
        assert!(close(cov_ap_arima011(&q, 1, 1, 1, 1).unwrap(), 0.25 * 1.25 + 0.3, 1e-15));
        let zero = ApArima110Params { beta: vec![0.0, 1.0], alpha: vec![0.0, 0.0], ..p };
        assert_eq!(cov_ap_arima110(&zero, 0, 1, 3, 2).unwrap(), 0.0);
    }

    #[test]
    fn arima_families_degenerate_to_random_walk_exactly() {
        let alpha = vec![-3.0, -2.5, -1.0];
        let beta = vec![0.2, 0.5, 0.3];
        let rw = ap(beta.clone(), 0.1, 0.7, 0.05, alpha.clone());
        let a110 = ApArima110Params {
            alpha: alpha.clone(),
            beta: beta.clone(),
            mu: 0.1,
            rho: 0.0,
            sigma2_e: 0.7,
            sigma2_eps: 0.05,
        };
        let a011 = ApArima011Params { alpha, beta, mu: 0.1, phi: 0.0, sigma2_e: 0.7, sigma2_eps: 0.05 };
        for x in 0..3 {
            for y in 0..3 {
                for s in 1..=12 {
                    for t in 1..=12 {
                        let r = cov_ap_rw(&rw, x, y, s, t).unwrap();
                        assert_eq!(r, cov_ap_arima110(&a110, x, y, s, t).unwrap());
                        assert_eq!(r, cov_ap_arima011(&a011, x, y, s, t).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn random_walk_variance_is_affine_in_t() {
        let p = ap(vec![0.3, -0.2, 0.9], 0.0, 1.7, 0.4, vec![0.0; 3]);
        for x in 0..3 {
            let v: Vec<f64> = (1..=30).map(|t| cov_ap_rw(&p, x, x, t, t).unwrap()).collect();
            for w in v.windows(3) {
                assert!((w[2] - 2.0 * w[1] + w[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn arima110_variance_second_difference_is_geometric() {
        // Δ²Var(t) = 2 β² σ² ρ^{t-1} / (1 - ρ²), checked against the double sum
        for &rho in &[-0.8, -0.3, 0.4, 0.7] {
            let (b, s2) = (0.6, 1.4);
            let proc_ = LatentProcess::Arima110 { rho, sigma2: s2 };
            let var = |t: usize| b * b * proc_.cov_doublesum(t, t);
            for t in 3..=20 {
                let d2 = var(t) - 2.0 * var(t - 1) + var(t - 2);
                let want = 2.0 * b * b * s2 * rho.powi(t as i32 - 1) / (1.0 - rho * rho);
                let p = ApArima110Params {
                    alpha: vec![0.0],
                    beta: vec![1.0],
                    mu: 0.0,
                    rho,
                    sigma2_e: s2,
                    sigma2_eps: 0.1,
                };
                let v = |t: usize| b * b * cov_ap_arima110(&p, 0, 0, t, t).unwrap();
                let d2_closed = v(t) - 2.0 * v(t - 1) + v(t - 2);
                assert!(close(d2, want, 1e-10), "rho={rho} t={t}: {d2} vs {want}");
                assert!(close(d2_closed, want, 1e-10));
            }
        }
    }

    #[test]
    fn small_grid_example() {
        let p: ModelParams = ap(vec![1.0], 0.2, 0.8, 0.1, vec![-2.0]).into();
        let init = InitialConditions { c: 0.5, ..Default::default() };
        let g = moment_grid(&p, &init, &PanelDims::new(0, 1).unwrap()).unwrap();
        assert!(close(g.means[(0, 0)], -2.0 + 0.2 + 0.5, 1e-15));
        assert!(close(g.covs[(0, 0)], 0.9, 1e-15));
        assert!(moment_grid(&p, &init, &PanelDims::new(1, 3).unwrap()).is_err());
    }

    #[test]
    fn grid_entries_match_kernels() {
        let p: ModelParams = ApArima011Params {
            alpha: vec![-1.0, -2.0, -3.0],
            beta: vec![0.2, 0.3, 0.5],
            mu: -0.05,
            phi: 0.3,
            sigma2_e: 0.9,
            sigma2_eps: 0.2,
        }
        .into();
        let d = PanelDims::new(2, 5).unwrap();
        let g = moment_grid(&p, &InitialConditions::default(), &d).unwrap();
        for x in 0..3 {
            for y in 0..3 {
                for s in 1..=5 {
                    for t in 1..=5 {
                        assert_eq!(g.cov(x, y, s, t), cov(&p, x, y, s, t).unwrap());
                    }
                }
            }
        }
    }

    fn random_params(rng: &mut ChaCha8Rng, family: Family, n_ages: usize) -> ModelParams {
        let alpha: Vec<f64> = (0..n_ages).map(|_| rng.random_range(-6.0..-1.0)).collect();
        let beta = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let raw: Vec<f64> = (0..n_ages).map(|_| rng.random_range(-0.3..1.0)).collect();
            let s: f64 = raw.iter().sum();
            if s.abs() < 0.1 {
                vec![1.0 / n_ages as f64; n_ages]
            } else {
                raw.iter().map(|b| b / s).collect()
            }
        };
        let mu = rng.random_range(-1.0..1.0);
        let s2e = rng.random_range(0.05..2.0);
        let s2eps = rng.random_range(0.01..0.5);
        match family {
            Family::ApRw => ap(beta(rng), mu, s2e, s2eps, alpha).into(),
            Family::ApArima110 => ApArima110Params {
                beta: beta(rng),
                alpha,
                mu,
                rho: rng.random_range(-0.95..0.95),
                sigma2_e: s2e,
                sigma2_eps: s2eps,
            }
            .into(),
            Family::ApArima011 => ApArima011Params {
                beta: beta(rng),
                alpha,
                mu,
                phi: rng.random_range(-0.95..0.95),
                sigma2_e: s2e,
                sigma2_eps: s2eps,
            }
            .into(),
            Family::ApcRw => ApcRwParams {
                beta0: beta(rng),
                beta1: beta(rng),
                alpha,
                mu0: mu,
                mu1: rng.random_range(-1.0..1.0),
                sigma2_e0: s2e,
                sigma2_e1: rng.random_range(0.05..2.0),
                sigma2_eps: s2eps,
            }
            .into(),
        }
    }

    #[test]
    fn hundred_random_grids_are_symmetric_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fams = [Family::ApRw, Family::ApArima110, Family::ApArima011, Family::ApcRw];
        for i in 0..100 {
            let fam = fams[i % 4];
            let n_ages = 1 + i % 4;
            let p = random_params(&mut rng, fam, n_ages);
            let d = PanelDims::new(n_ages - 1, 2 + i % 9).unwrap();
            let g = moment_grid(&p, &InitialConditions::default(), &d).unwrap();
            assert!(g.is_symmetric());
            assert!(g.is_psd(), "{fam}: min eig {}", g.min_eigenvalue());
            let s2eps = match &p {
                ModelParams::ApRw(q) => q.sigma2_eps,
                ModelParams::ApArima110(q) => q.sigma2_eps,
                ModelParams::ApArima011(q) => q.sigma2_eps,
                ModelParams::ApcRw(q) => q.sigma2_eps,
            };
            for k in 0..d.n_cells() {
                assert!(g.covs[(k, k)] >= s2eps);
            }
        }
    }

    #[test]
    fn serial_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, Family::ApcRw, 3);
        let d = PanelDims::new(2, 4).unwrap();
        let g = moment_grid(&p, &InitialConditions::default(), &d).unwrap();
        let back = MomentGrid::from_serial(&g.to_serial()).unwrap();
        assert_eq!(back, g);
        assert_eq!(g.long_cov_rows().len(), 144);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kernels_are_symmetric(seed in any::<u64>(), fam in 0usize..4, n_ages in 1usize..6, tp in 1usize..30) {
            let fams = [Family::ApRw, Family::ApArima110, Family::ApArima011, Family::ApcRw];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, fams[fam], n_ages);
            for _ in 0..50 {
                let x = rng.random_range(0..n_ages);
                let y = rng.random_range(0..n_ages);
                let s = rng.random_range(1..=tp);
                let t = rng.random_range(1..=tp);
                prop_assert_eq!(cov(&p, x, y, s, t).unwrap(), cov(&p, y, x, t, s).unwrap());
            }
        }
    }
}
