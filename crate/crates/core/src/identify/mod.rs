//! Identifiability of the plug-in models from their first two moments.
//!
//! * [`check_equivalence`] compares the moment grids of two parameter values.
//! * [`counterexample`] builds observationally equivalent pairs for the
//!   configurations that are not identified.
//! * [`recover`] inverts exact moment grids back to parameters.
//! * [`search`] looks numerically for a distinct parameter with the same
//!   moments.

pub mod counterexample;
pub mod recover;
pub mod search;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{moment_grid, MomentGrid, MomentScope};
use crate::params::{param_distance, Family, InitialConditions, ModelParams, PanelDims, ValidationVerdict};

pub use counterexample::{
    counterexample_ap_means_mu0, counterexample_apc_equal_loadings, counterexample_apc_fullyparam,
    counterexample_apc_x0_variance_trade,
};
pub use recover::{
    recover, recover_ap_arima011, recover_ap_arima110, recover_ap_rw, recover_apc_rw, RecoveryOptions,
    RecoveryResult, RecoveryStep,
};
pub use search::{search_equivalent, SearchOptions, SearchReport};

/// Largest moment residual still called equivalent.
pub const DEFAULT_EPSILON_M: f64 = 1e-10;
/// Smallest parameter distance that counts as a different parameter.
pub const DEFAULT_DELTA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Equivalent,
    Distinct,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceTolerances {
    pub epsilon_m: f64,
    pub delta: f64,
}

impl Default for EquivalenceTolerances {
    fn default() -> Self {
        EquivalenceTolerances { epsilon_m: DEFAULT_EPSILON_M, delta: DEFAULT_DELTA }
    }
}

pub fn verdict_for(residual: f64, distance: f64, tol: &EquivalenceTolerances) -> Verdict {
    if residual <= tol.epsilon_m {
        Verdict::Equivalent
    } else if distance >= tol.delta {
        Verdict::Distinct
    } else {
        Verdict::Inconclusive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub family: Family,
    pub theta_a: ModelParams,
    pub theta_b: ModelParams,
    pub scope: MomentScope,
    pub mean_residual: f64,
    /// `None` when only means were compared.
    pub cov_residual: Option<f64>,
    pub moment_residual: f64,
    pub param_distance: f64,
    pub tolerances: EquivalenceTolerances,
    pub verdict: Verdict,
}

/// Validation that admits the cohort model with equal loadings, the one
/// configuration the counterexamples deliberately step outside of.
pub(crate) fn validate_lenient(p: &ModelParams) -> ValidationVerdict {
    match p {
        ModelParams::ApcRw(q) => q.validate_with(false),
        other => other.validate(),
    }
}

pub(crate) fn require_valid(p: &ModelParams, what: &str, lenient: bool) -> Result<()> {
    let v = if lenient { validate_lenient(p) } else { p.validate() };
    if v.is_ok() {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("{what}: {v}")))
    }
}

/// Compares two parameter values through their moment grids.
pub fn check_equivalence(
    theta_a: &ModelParams,
    theta_b: &ModelParams,
    init: &InitialConditions,
    dims: &PanelDims,
    scope: MomentScope,
    tol: &EquivalenceTolerances,
) -> Result<EquivalenceReport> {
    if theta_a.family() != theta_b.family() {
        return Err(Error::FamilyMismatch(format!("{} vs {}", theta_a.family(), theta_b.family())));
    }
    require_valid(theta_a, "theta_a", true)?;
    require_valid(theta_b, "theta_b", true)?;
    let ga = moment_grid(theta_a, init, dims)?;
    let gb = moment_grid(theta_b, init, dims)?;
    report_from_grids(theta_a, theta_b, &ga, &gb, scope, tol)
}

pub(crate) fn report_from_grids(
    theta_a: &ModelParams,
    theta_b: &ModelParams,
    ga: &MomentGrid,
    gb: &MomentGrid,
    scope: MomentScope,
    tol: &EquivalenceTolerances,
) -> Result<EquivalenceReport> {
    let mean_residual = ga.mean_residual(gb);
    let cov_residual = match scope {
        MomentScope::MeansOnly => None,
        MomentScope::Full => Some(ga.cov_residual(gb)),
    };
    let moment_residual = ga.residual(gb, scope)?;
    let distance = param_distance(theta_a, theta_b)?;
    Ok(EquivalenceReport {
        family: theta_a.family(),
        theta_a: theta_a.clone(),
        theta_b: theta_b.clone(),
        scope,
        mean_residual,
        cov_residual,
        moment_residual,
        param_distance: distance,
        tolerances: *tol,
        verdict: verdict_for(moment_residual, distance, tol),
    })
}
