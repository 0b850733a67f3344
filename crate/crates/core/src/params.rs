//! Parameter spaces of the plug-in age-period and age-period-cohort models.
//!
//! Every family carries its own parameter vector. Loadings are normalised to
//! sum to one, variances are strictly positive and the ARIMA coefficients lie
//! strictly inside `(-1, 1)`. Starting values of the latent processes are not
//! parameters; they live in [`InitialConditions`] and are treated as known.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

/// Relative tolerance for the sum-to-one constraint on loadings.
pub const SUM_TOL: f64 = 1e-12;
/// Cohort and period loadings closer than this (max-norm) count as equal.
pub const LOADING_DISTINCT_TOL: f64 = 1e-12;
/// Simulation and recovery refuse |rho|, |phi| beyond this guard band.
pub const DEFAULT_COEF_GUARD: f64 = 0.999;

/// Panel dimensions: ages `0..=X`, periods `1..=T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDims")]
pub struct PanelDims {
    #[serde(rename = "X")]
    max_age: usize,
    #[serde(rename = "T")]
    periods: usize,
}

#[derive(Deserialize)]
struct RawDims {
    #[serde(rename = "X")]
    max_age: usize,
    #[serde(rename = "T")]
    periods: usize,
}

impl TryFrom<RawDims> for PanelDims {
    type Error = Error;
    fn try_from(raw: RawDims) -> Result<Self> {
        PanelDims::new(raw.max_age, raw.periods)
    }
}

impl PanelDims {
    pub fn new(max_age: usize, periods: usize) -> Result<Self> {
        if periods == 0 {
            return Err(Error::InvalidParams("T must be at least 1".into()));
        }
        Ok(PanelDims { max_age, periods })
    }

    /// Maximal age index `X`.
    pub fn max_age(&self) -> usize {
        self.max_age
    }

    /// Number of periods `T`.
    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn n_ages(&self) -> usize {
        self.max_age + 1
    }

    pub fn n_cells(&self) -> usize {
        self.n_ages() * self.periods
    }

    /// Flattened position of cell `(x, t)`, with `t` one-based.
    pub fn index(&self, x: usize, t: usize) -> usize {
        x * self.periods + (t - 1)
    }

    pub fn check_cell(&self, x: usize, t: usize) -> Result<()> {
        if x > self.max_age || t == 0 || t > self.periods {
            return Err(Error::IndexOutOfRange(format!(
                "cell (x={x}, t={t}) outside ages 0..={} and periods 1..={}",
                self.max_age, self.periods
            )));
        }
        Ok(())
    }
}

/// Known starting values of the latent processes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialConditions {
    /// `kappa_0` of the age-period models.
    pub c: f64,
    /// `iota_{-X}` of the cohort model.
    pub c0: f64,
    /// `kappa_0` of the cohort model.
    pub c1: f64,
}

impl InitialConditions {
    pub fn new(c: f64, c0: f64, c1: f64) -> Result<Self> {
        let init = InitialConditions { c, c0, c1 };
        if ![c, c0, c1].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParams(
                "initial conditions must be finite".into(),
            ));
        }
        Ok(init)
    }
}

/// A single violated constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub violations: Vec<Violation>,
}

impl ValidationVerdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, constraint: &str, detail: String) {
        self.violations.push(Violation {
            constraint: constraint.to_string(),
            detail,
        });
    }

    fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidParams(self.to_string()))
        }
    }

    fn check_loadings(&mut self, name: &str, beta: &[f64]) {
        if beta.iter().any(|b| !b.is_finite()) {
            self.push(name, format!("{name} has non-finite entries"));
            return;
        }
        let sum = compensated_sum(beta);
        let scale = beta.iter().map(|b| b.abs()).sum::<f64>().max(1.0);
        if (sum - 1.0).abs() > SUM_TOL * scale {
            self.push(&format!("sum({name})=1"), format!("sum({name})={sum}≠1"));
        }
    }

    fn check_positive(&mut self, name: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(&format!("{name}>0"), format!("{name}={v} is not a positive real"));
        }
    }

    fn check_finite(&mut self, name: &str, values: &[f64]) {
        if values.iter().any(|v| !v.is_finite()) {
            self.push(&format!("{name} finite"), format!("{name} has non-finite entries"));
        }
    }

    fn check_open_unit(&mut self, name: &str, v: f64) {
        if !(v.abs() < 1.0) {
            self.push(&format!("|{name}|<1"), format!("{name}={v} outside (-1, 1)"));
        }
    }

    fn check_len(&mut self, name: &str, len: usize, expected: usize) {
        if len != expected {
            self.push(
                &format!("len({name})"),
                format!("{name} has length {len}, expected {expected}"),
            );
        }
    }
}

impl fmt::Display for ValidationVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<_> = self.violations.iter().map(|v| v.detail.as_str()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Age-period model with a random walk with drift as latent period factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApRwParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: f64,
    pub sigma2_e: f64,
    pub sigma2_eps: f64,
}

impl ApRwParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, mu: f64, sigma2_e: f64, sigma2_eps: f64) -> Result<Self> {
        let p = ApRwParams { alpha, beta, mu, sigma2_e, sigma2_eps };
        p.validate().into_result()?;
        Ok(p)
    }

    pub fn validate(&self) -> ValidationVerdict {
        let mut v = ValidationVerdict::default();
        check_ap_common(&mut v, &self.alpha, &self.beta, self.mu, self.sigma2_e, self.sigma2_eps);
        v
    }
}

fn check_ap_common(v: &mut ValidationVerdict, alpha: &[f64], beta: &[f64], mu: f64, s2e: f64, s2eps: f64) {
    if alpha.is_empty() {
        v.push("len(alpha)", "alpha must have at least one age".into());
    }
    v.check_len("beta", beta.len(), alpha.len());
    v.check_finite("alpha", alpha);
    v.check_finite("mu", &[mu]);
    v.check_loadings("beta", beta);
    v.check_positive("sigma2_e", s2e);
    v.check_positive("sigma2_eps", s2eps);
}

/// Age-period model with an ARIMA(1,1,0) latent period factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApArima110Params {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: f64,
    pub rho: f64,
    pub sigma2_e: f64,
    pub sigma2_eps: f64,
}

impl ApArima110Params {
    pub fn new(
        alpha: Vec<f64>,
        beta: Vec<f64>,
        mu: f64,
        rho: f64,
        sigma2_e: f64,
        sigma2_eps: f64,
    ) -> Result<Self> {
        let p = ApArima110Params { alpha, beta, mu, rho, sigma2_e, sigma2_eps };
        p.validate().into_result()?;
        Ok(p)
    }

    pub fn validate(&self) -> ValidationVerdict {
        let mut v = ValidationVerdict::default();
        check_ap_common(&mut v, &self.alpha, &self.beta, self.mu, self.sigma2_e, self.sigma2_eps);
        v.check_open_unit("rho", self.rho);
        v
    }
}

/// Age-period model with an ARIMA(0,1,1) latent period factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApArima011Params {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: f64,
    pub phi: f64,
    pub sigma2_e: f64,
    pub sigma2_eps: f64,
}

impl ApArima011Params {
    pub fn new(
        alpha: Vec<f64>,
        beta: Vec<f64>,
        mu: f64,
        phi: f64,
        sigma2_e: f64,
        sigma2_eps: f64,
    ) -> Result<Self> {
        let p = ApArima011Params { alpha, beta, mu, phi, sigma2_e, sigma2_eps };
        p.validate().into_result()?;
        Ok(p)
    }

    pub fn validate(&self) -> ValidationVerdict {
        let mut v = ValidationVerdict::default();
        check_ap_common(&mut v, &self.alpha, &self.beta, self.mu, self.sigma2_e, self.sigma2_eps);
        v.check_open_unit("phi", self.phi);
        v
    }
}

/// Age-period-cohort model with independent random walks for the cohort
/// (`iota`) and period (`kappa`) factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApcRwParams {
    pub alpha: Vec<f64>,
    /// Cohort loadings.
    pub beta0: Vec<f64>,
    /// Period loadings.
    pub beta1: Vec<f64>,
    pub mu0: f64,
    pub mu1: f64,
    pub sigma2_e0: f64,
    pub sigma2_e1: f64,
    pub sigma2_eps: f64,
}

impl ApcRwParams {
    pub fn new(
        alpha: Vec<f64>,
        beta0: Vec<f64>,
        beta1: Vec<f64>,
        (mu0, mu1): (f64, f64),
        (sigma2_e0, sigma2_e1, sigma2_eps): (f64, f64, f64),
    ) -> Result<Self> {
        let p = ApcRwParams { alpha, beta0, beta1, mu0, mu1, sigma2_e0, sigma2_e1, sigma2_eps };
        p.validate().into_result()?;
        Ok(p)
    }

    pub fn validate(&self) -> ValidationVerdict {
        self.validate_with(true)
    }

    /// Validation with the `beta0 != beta1` exclusion optionally lifted.
    pub fn validate_with(&self, require_distinct_loadings: bool) -> ValidationVerdict {
        let mut v = ValidationVerdict::default();
        if self.alpha.is_empty() {
            v.push("len(alpha)", "alpha must have at least one age".into());
        }
        v.check_len("beta0", self.beta0.len(), self.alpha.len());
        v.check_len("beta1", self.beta1.len(), self.alpha.len());
        v.check_finite("alpha", &self.alpha);
        v.check_finite("mu", &[self.mu0, self.mu1]);
        v.check_loadings("beta0", &self.beta0);
        v.check_loadings("beta1", &self.beta1);
        v.check_positive("sigma2_e0", self.sigma2_e0);
        v.check_positive("sigma2_e1", self.sigma2_e1);
        v.check_positive("sigma2_eps", self.sigma2_eps);
        if require_distinct_loadings && self.beta0.len() == self.beta1.len() {
            let diff = crate::numeric::max_abs_diff(&self.beta0, &self.beta1);
            if diff <= LOADING_DISTINCT_TOL {
                v.push("beta0≠beta1", "beta0 = beta1 excluded".into());
            }
        }
        v
    }
}

/// Which identifying restrictions a fully parametric cohort model claims.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSet {
    /// `sum(beta0) = sum(beta1) = 1`, `kappa_1 = 0`, `beta1 > 0`.
    A,
    /// `sum(beta0) = sum(beta1) = 1`, `sum(kappa) = 0`, `sum(iota) = 0`.
    B,
}

/// Classical cohort model with `kappa` and `iota` as parameter vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullyParametricApcParams {
    pub alpha: Vec<f64>,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    /// `kappa_1..kappa_T`.
    pub kappa: Vec<f64>,
    /// `iota_{1-X}..iota_T`, length `T + X`.
    pub iota: Vec<f64>,
    pub constraints: ConstraintSet,
}

impl FullyParametricApcParams {
    pub fn dims(&self) -> Result<PanelDims> {
        if self.alpha.is_empty() {
            return Err(Error::InvalidParams("alpha must have at least one age".into()));
        }
        PanelDims::new(self.alpha.len() - 1, self.kappa.len())
    }

    /// `iota_h` for cohort index `h` in `1-X..=T`.
    pub fn iota_at(&self, h: i64) -> f64 {
        let x_max = self.alpha.len() as i64 - 1;
        self.iota[(h + x_max - 1) as usize]
    }

    pub fn validate(&self) -> ValidationVerdict {
        self.validate_against(self.constraints)
    }

    pub fn validate_against(&self, set: ConstraintSet) -> ValidationVerdict {
        let mut v = ValidationVerdict::default();
        let n = self.alpha.len();
        v.check_len("beta0", self.beta0.len(), n);
        v.check_len("beta1", self.beta1.len(), n);
        if n > 0 {
            v.check_len("iota", self.iota.len(), self.kappa.len() + n - 1);
        }
        v.check_loadings("beta0", &self.beta0);
        v.check_loadings("beta1", &self.beta1);
        match set {
            ConstraintSet::A => {
                if self.kappa.first().copied() != Some(0.0) {
                    v.push("kappa_1=0", format!("kappa_1={:?}≠0", self.kappa.first()));
                }
                if let Some((x, b)) = self.beta1.iter().enumerate().find(|(_, b)| **b <= 0.0) {
                    v.push("beta1>0", format!("beta1[{x}]={b} is not positive"));
                }
            }
            ConstraintSet::B => {
                let sk = compensated_sum(&self.kappa);
                if sk.abs() > SUM_TOL * self.kappa.iter().map(|k| k.abs()).sum::<f64>().max(1.0) {
                    v.push("sum(kappa)=0", format!("sum(kappa)={sk}≠0"));
                }
                let si = compensated_sum(&self.iota);
                if si.abs() > SUM_TOL * self.iota.iter().map(|k| k.abs()).sum::<f64>().max(1.0) {
                    v.push("sum(iota)=0", format!("sum(iota)={si}≠0"));
                }
            }
        }
        v
    }

    /// `alpha_x + beta1_x kappa_t + beta0_x iota_{t-x}` on the whole panel,
    /// rows are ages and columns periods.
    pub fn predictor_grid(&self) -> Result<Vec<Vec<f64>>> {
        let dims = self.dims()?;
        Ok((0..dims.n_ages())
            .map(|x| {
                (1..=dims.periods())
                    .map(|t| {
                        self.alpha[x]
                            + self.beta1[x] * self.kappa[t - 1]
                            + self.beta0[x] * self.iota_at(t as i64 - x as i64)
                    })
                    .collect()
            })
            .collect())
    }

    /// Cohort product term `beta0_x iota_{t-x}` on the whole panel.
    pub fn cohort_product_grid(&self) -> Result<Vec<Vec<f64>>> {
        let dims = self.dims()?;
        Ok((0..dims.n_ages())
            .map(|x| {
                (1..=dims.periods())
                    .map(|t| self.beta0[x] * self.iota_at(t as i64 - x as i64))
                    .collect()
            })
            .collect())
    }
}

/// Model family tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ApRw,
    ApArima110,
    ApArima011,
    ApcRw,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::ApRw => "ap_rw",
            Family::ApArima110 => "ap_arima110",
            Family::ApArima011 => "ap_arima011",
            Family::ApcRw => "apc_rw",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ap_rw" | "ap-rw" => Ok(Family::ApRw),
            "ap_arima110" | "ap-arima110" => Ok(Family::ApArima110),
            "ap_arima011" | "ap-arima011" => Ok(Family::ApArima011),
            "apc_rw" | "apc-rw" => Ok(Family::ApcRw),
            other => Err(Error::Input(format!("unknown model family `{other}`"))),
        }
    }
}

/// A parameter value of any of the four plug-in families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelParams {
    ApRw(ApRwParams),
    ApArima110(ApArima110Params),
    ApArima011(ApArima011Params),
    ApcRw(ApcRwParams),
}

impl From<ApRwParams> for ModelParams {
    fn from(p: ApRwParams) -> Self {
        ModelParams::ApRw(p)
    }
}

impl From<ApArima110Params> for ModelParams {
    fn from(p: ApArima110Params) -> Self {
        ModelParams::ApArima110(p)
    }
}

impl From<ApArima011Params> for ModelParams {
    fn from(p: ApArima011Params) -> Self {
        ModelParams::ApArima011(p)
    }
}

impl From<ApcRwParams> for ModelParams {
    fn from(p: ApcRwParams) -> Self {
        ModelParams::ApcRw(p)
    }
}

impl ModelParams {
    pub fn family(&self) -> Family {
        match self {
            ModelParams::ApRw(_) => Family::ApRw,
            ModelParams::ApArima110(_) => Family::ApArima110,
            ModelParams::ApArima011(_) => Family::ApArima011,
            ModelParams::ApcRw(_) => Family::ApcRw,
        }
    }

    pub fn alpha(&self) -> &[f64] {
        match self {
            ModelParams::ApRw(p) => &p.alpha,
            ModelParams::ApArima110(p) => &p.alpha,
            ModelParams::ApArima011(p) => &p.alpha,
            ModelParams::ApcRw(p) => &p.alpha,
        }
    }

    pub fn n_ages(&self) -> usize {
        self.alpha().len()
    }

    pub fn validate(&self) -> ValidationVerdict {
        match self {
            ModelParams::ApRw(p) => p.validate(),
            ModelParams::ApArima110(p) => p.validate(),
            ModelParams::ApArima011(p) => p.validate(),
            ModelParams::ApcRw(p) => p.validate(),
        }
    }

    /// Errors unless the parameter vectors fit `dims`.
    pub fn check_dims(&self, dims: &PanelDims) -> Result<()> {
        if self.n_ages() != dims.n_ages() {
            return Err(Error::InvalidParams(format!(
                "parameters cover {} ages but the panel has X+1={}",
                self.n_ages(),
                dims.n_ages()
            )));
        }
        Ok(())
    }

    /// Canonical flattening used for parameter distances: alpha, loadings,
    /// drifts, log-variances, then rho or phi.
    pub fn canonical_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            ModelParams::ApRw(p) => {
                out.extend(&p.alpha);
                out.extend(&p.beta);
                out.push(p.mu);
                out.extend([p.sigma2_e.ln(), p.sigma2_eps.ln()]);
            }
            ModelParams::ApArima110(p) => {
                out.extend(&p.alpha);
                out.extend(&p.beta);
                out.push(p.mu);
                out.extend([p.sigma2_e.ln(), p.sigma2_eps.ln()]);
                out.push(p.rho);
            }
            ModelParams::ApArima011(p) => {
                out.extend(&p.alpha);
                out.extend(&p.beta);
                out.push(p.mu);
                out.extend([p.sigma2_e.ln(), p.sigma2_eps.ln()]);
                out.push(p.phi);
            }
            ModelParams::ApcRw(p) => {
                out.extend(&p.alpha);
                out.extend(&p.beta0);
                out.extend(&p.beta1);
                out.extend([p.mu0, p.mu1]);
                out.extend([p.sigma2_e0.ln(), p.sigma2_e1.ln(), p.sigma2_eps.ln()]);
            }
        }
        out
    }

    /// All parameters on their natural scale (variances untransformed), in
    /// the same order as [`ModelParams::canonical_vector`].
    pub fn raw_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            ModelParams::ApRw(p) => {
                out.extend(&p.alpha);
                out.extend(&p.beta);
                out.extend([p.mu, p.sigma2_e, p.sigma2_eps]);
            }
            ModelParams::ApArima110(p) => {
                out.extend(&p.alpha);
                out.extend(&p.beta);
                out.extend([p.mu, p.sigma2_e, p.sigma2_eps, p.rho]);
            }
            ModelParams::ApArima011(p) => {
                out.extend(&p.alpha);
                out.extend(&p.beta);
                out.extend([p.mu, p.sigma2_e, p.sigma2_eps, p.phi]);
            }
            ModelParams::ApcRw(p) => {
                out.extend(&p.alpha);
                out.extend(&p.beta0);
                out.extend(&p.beta1);
                out.extend([p.mu0, p.mu1, p.sigma2_e0, p.sigma2_e1, p.sigma2_eps]);
            }
        }
        out
    }
}

/// Max-norm distance between two parameter values over the canonical
/// flattening. Errors on family or length mismatch.
pub fn param_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    if a.family() != b.family() {
        return Err(Error::FamilyMismatch(format!("{} vs {}", a.family(), b.family())));
    }
    let (va, vb) = (a.canonical_vector(), b.canonical_vector());
    if va.len() != vb.len() {
        return Err(Error::FamilyMismatch("parameter vectors of different length".into()));
    }
    Ok(crate::numeric::max_abs_diff(&va, &vb))
}

/// Max absolute componentwise error on the natural parameter scale.
pub fn raw_param_error(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    if a.family() != b.family() {
        return Err(Error::FamilyMismatch(format!("{} vs {}", a.family(), b.family())));
    }
    Ok(crate::numeric::max_abs_diff(&a.raw_vector(), &b.raw_vector()))
}

/// Rescales raw loadings so they sum to one.
pub fn normalize_betas(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() || raw.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidParams("loadings must be a non-empty finite vector".into()));
    }
    let sum = compensated_sum(raw);
    let scale: f64 = raw.iter().map(|b| b.abs()).sum();
    if sum == 0.0 || sum.abs() <= 1e-14 * scale {
        return Err(Error::InvalidParams(format!(
            "cannot normalise loadings with zero sum (sum={sum})"
        )));
    }
    let mut out: Vec<f64> = raw.iter().map(|b| b / sum).collect();
    // push the rounding residue into the largest component
    let resid = 1.0 - compensated_sum(&out);
    if resid != 0.0 {
        let k = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        out[k] += resid;
    }
    Ok(out)
}

/// On-disk parameter file: the parameter object plus panel and start values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    #[serde(flatten)]
    pub params: ModelParams,
    pub dims: PanelDims,
    #[serde(default)]
    pub init: InitialConditions,
}

impl ParamFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamFile = serde_json::from_str(text)?;
        let verdict = file.params.validate();
        if !verdict.is_ok() {
            return Err(Error::InvalidParams(verdict.to_string()));
        }
        file.params.check_dims(&file.dims)?;
        Ok(file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rw(beta: Vec<f64>) -> ApRwParams {
        ApRwParams { alpha: vec![0.0; beta.len()], beta, mu: 0.0, sigma2_e: 1.0, sigma2_eps: 1.0 }
    }

    #[test]
    fn valid_ap_rw_passes() {
        assert!(rw(vec![0.5, 0.5]).validate().is_ok());
    }

    #[test]
    fn loading_sum_violation_is_named() {
        let v = rw(vec![0.5, 0.6]).validate();
        assert_eq!(v.violations.len(), 1);
        assert_eq!(v.violations[0].constraint, "sum(beta)=1");
        assert!(v.violations[0].detail.contains("sum(beta)=1.1≠1"), "{}", v);
    }

    #[test]
    fn non_positive_variances_flagged() {
        let mut p = rw(vec![1.0]);
        p.sigma2_e = 0.0;
        p.sigma2_eps = -1.0;
        let v = p.validate();
        assert_eq!(v.violations.len(), 2);
        assert!(ApRwParams::new(vec![0.0], vec![1.0], 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn equal_cohort_and_period_loadings_are_excluded() {
        let p = ApcRwParams {
            alpha: vec![0.0, 0.0],
            beta0: vec![0.3, 0.7],
            beta1: vec![0.3, 0.7],
            mu0: 0.0,
            mu1: 0.0,
            sigma2_e0: 1.0,
            sigma2_e1: 1.0,
            sigma2_eps: 1.0,
        };
        let v = p.validate();
        assert_eq!(v.violations.len(), 1);
        assert_eq!(v.violations[0].detail, "beta0 = beta1 excluded");
        assert!(p.validate_with(false).is_ok());
    }

    #[test]
    fn arima_coefficients_open_interval() {
        let p = ApArima110Params {
            alpha: vec![0.0],
            beta: vec![1.0],
            mu: 0.0,
            rho: 1.0,
            sigma2_e: 1.0,
            sigma2_eps: 1.0,
        };
        assert!(!p.validate().is_ok());
        let q = ApArima011Params {
            alpha: vec![0.0],
            beta: vec![1.0],
            mu: 0.0,
            phi: -0.9999,
            sigma2_e: 1.0,
            sigma2_eps: 1.0,
        };
        assert!(q.validate().is_ok());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_betas(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(normalize_betas(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(normalize_betas(&[0.5, -0.5]).is_err());
    }

    #[test]
    fn dims_reject_zero_periods() {
        assert!(PanelDims::new(3, 0).is_err());
        let d = PanelDims::new(2, 4).unwrap();
        assert!(d.check_cell(2, 4).is_ok());
        assert!(d.check_cell(3, 1).is_err());
        assert!(d.check_cell(0, 0).is_err());
        assert_eq!(d.index(1, 1), 4);
    }

    #[test]
    fn param_file_round_trip() {
        let json = r#"{
            "model": "ap_arima011",
            "alpha": [-4.0, -3.0],
            "beta": [0.4, 0.6],
            "mu": -0.1,
            "phi": 0.3,
            "sigma2_e": 0.5,
            "sigma2_eps": 0.01,
            "dims": {"X": 1, "T": 6},
            "init": {"c": 0.5}
        }"#;
        let f = ParamFile::from_json(json).unwrap();
        assert_eq!(f.params.family(), Family::ApArima011);
        assert_eq!(f.dims.periods(), 6);
        assert_eq!(f.init.c, 0.5);
        let back = ParamFile::from_json(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn param_file_rejects_length_mismatch_and_invalid_values() {
        let bad_dims = r#"{"model":"ap_rw","alpha":[0,0],"beta":[0.5,0.5],"mu":0,
            "sigma2_e":1,"sigma2_eps":1,"dims":{"X":2,"T":3}}"#;
        assert!(ParamFile::from_json(bad_dims).is_err());
        let bad_beta = r#"{"model":"ap_rw","alpha":[0,0],"beta":[0.5,0.6],"mu":0,
            "sigma2_e":1,"sigma2_eps":1,"dims":{"X":1,"T":3}}"#;
        assert!(ParamFile::from_json(bad_beta).is_err());
    }

    proptest! {
        #[test]
        fn normalised_loadings_always_validate(raw in prop::collection::vec(-10.0f64..10.0, 1..8)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s.abs() > 1e-9);
            let beta = normalize_betas(&raw).unwrap();
            let p = rw(beta);
            prop_assert!(p.validate().is_ok(), "{}", p.validate());
        }
    }
}
