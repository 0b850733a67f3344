//! Numerical search for observationally equivalent parameters.
//!
//! Minimises the squared moment mismatch to a target parameter over
//! unconstrained coordinates, with an exterior penalty that keeps the
//! candidate at least `delta` away from the target. Each start runs a
//! Nelder-Mead simplex and then a Levenberg-Marquardt polish with a
//! finite-difference Jacobian. A negative result is evidence, not proof.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{report_from_grids, require_valid, validate_lenient, EquivalenceReport, EquivalenceTolerances};
use crate::error::Result;
use crate::moments::{moment_grid, MomentGrid, MomentScope};
use crate::params::{
    param_distance, ApArima011Params, ApArima110Params, ApRwParams, ApcRwParams, Family, InitialConditions,
    ModelParams, PanelDims,
};
use crate::simulate::RngSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Minimum parameter distance of a candidate.
    pub delta: f64,
    pub epsilon_m: f64,
    /// Best residuals above this mean no equivalent was found.
    pub report_threshold: f64,
    pub n_starts: usize,
    /// Objective evaluations per start.
    pub max_evals: usize,
    /// Admit equal cohort and period loadings in the search space.
    pub lift_distinct_loadings: bool,
    pub scope: MomentScope,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            delta: 1e-3,
            epsilon_m: super::DEFAULT_EPSILON_M,
            report_threshold: 1e-6,
            n_starts: 32,
            max_evals: 50_000,
            lift_distinct_loadings: false,
            scope: MomentScope::Full,
        }
    }
}

/// Jitter scales cycled over the starts.
pub const JITTER_SCALES: [f64; 3] = [1e-2, 1e-1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub index: usize,
    pub jitter_scale: f64,
    pub evaluations: usize,
    /// Max moment residual of the final candidate, infinite if infeasible.
    pub residual: f64,
    pub distance: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub family: Family,
    pub theta: ModelParams,
    pub options: SearchOptions,
    pub rng: RngSpec,
    pub starts: Vec<StartOutcome>,
    pub best_start: Option<usize>,
    pub best: Option<EquivalenceReport>,
    pub equivalent_found: bool,
    pub conclusion: String,
}

/// Maps parameters to unconstrained coordinates and back: free loadings
/// (last one is one minus the rest), log variances, atanh of rho or phi.
#[derive(Clone, Copy, Debug)]
struct Codec {
    family: Family,
    n: usize,
}

fn free_loadings(beta: &[f64]) -> &[f64] {
    &beta[..beta.len() - 1]
}

fn full_loadings(free: &[f64]) -> Vec<f64> {
    let mut b = free.to_vec();
    b.push(1.0 - free.iter().sum::<f64>());
    b
}

fn exp_clamped(v: f64) -> f64 {
    v.clamp(-700.0, 700.0).exp()
}

fn tanh_clamped(v: f64) -> f64 {
    v.clamp(-15.0, 15.0).tanh()
}

impl Codec {
    fn encode(&self, p: &ModelParams) -> Vec<f64> {
        let mut z = Vec::new();
        match p {
            ModelParams::ApRw(q) => {
                z.extend(&q.alpha);
                z.extend(free_loadings(&q.beta));
                z.extend([q.mu, q.sigma2_e.ln(), q.sigma2_eps.ln()]);
            }
            ModelParams::ApArima110(q) => {
                z.extend(&q.alpha);
                z.extend(free_loadings(&q.beta));
                z.extend([q.mu, q.sigma2_e.ln(), q.sigma2_eps.ln(), q.rho.atanh()]);
            }
            ModelParams::ApArima011(q) => {
                z.extend(&q.alpha);
                z.extend(free_loadings(&q.beta));
                z.extend([q.mu, q.sigma2_e.ln(), q.sigma2_eps.ln(), q.phi.atanh()]);
            }
            ModelParams::ApcRw(q) => {
                z.extend(&q.alpha);
                z.extend(free_loadings(&q.beta0));
                z.extend(free_loadings(&q.beta1));
                z.extend([q.mu0, q.mu1, q.sigma2_e0.ln(), q.sigma2_e1.ln(), q.sigma2_eps.ln()]);
            }
        }
        z
    }

    fn decode(&self, z: &[f64]) -> ModelParams {
        let n = self.n;
        let alpha = z[..n].to_vec();
        let beta = full_loadings(&z[n..2 * n - 1]);
        let r = &z[2 * n - 1..];
        match self.family {
            Family::ApRw => ApRwParams {
                alpha,
                beta,
                mu: r[0],
                sigma2_e: exp_clamped(r[1]),
                sigma2_eps: exp_clamped(r[2]),
            }
            .into(),
            Family::ApArima110 => ApArima110Params {
                alpha,
                beta,
                mu: r[0],
                rho: tanh_clamped(r[3]),
                sigma2_e: exp_clamped(r[1]),
                sigma2_eps: exp_clamped(r[2]),
            }
            .into(),
            Family::ApArima011 => ApArima011Params {
                alpha,
                beta,
                mu: r[0],
                phi: tanh_clamped(r[3]),
                sigma2_e: exp_clamped(r[1]),
                sigma2_eps: exp_clamped(r[2]),
            }
            .into(),
            Family::ApcRw => {
                let beta1 = full_loadings(&r[..n - 1]);
                let s = &r[n - 1..];
                ApcRwParams {
                    alpha,
                    beta0: beta,
                    beta1,
                    mu0: s[0],
                    mu1: s[1],
                    sigma2_e0: exp_clamped(s[2]),
                    sigma2_e1: exp_clamped(s[3]),
                    sigma2_eps: exp_clamped(s[4]),
                }
                .into()
            }
        }
    }
}

struct Problem<'a> {
    codec: Codec,
    theta: &'a ModelParams,
    target: &'a MomentGrid,
    init: &'a InitialConditions,
    dims: &'a PanelDims,
    opts: &'a SearchOptions,
    penalty_weight: f64,
}

impl Problem<'_> {
    fn grid(&self, cand: &ModelParams) -> Option<MomentGrid> {
        moment_grid(cand, self.init, self.dims).ok()
    }

    /// Moment differences followed by the distance penalty.
    fn residuals(&self, z: &[f64]) -> Option<Vec<f64>> {
        let cand = self.codec.decode(z);
        let g = self.grid(&cand)?;
        let mut r: Vec<f64> = g.means.iter().zip(self.target.means.iter()).map(|(a, b)| a - b).collect();
        if self.opts.scope == MomentScope::Full {
            let n = g.covs.nrows();
            for i in 0..n {
                for j in i..n {
                    r.push(g.covs[(i, j)] - self.target.covs[(i, j)]);
                }
            }
        }
        let dist = param_distance(&cand, self.theta).ok()?;
        r.push(self.penalty_weight * (self.opts.delta - dist).max(0.0));
        if r.iter().all(|v| v.is_finite()) {
            Some(r)
        } else {
            None
        }
    }

    fn cost(&self, z: &[f64]) -> f64 {
        self.residuals(z).map_or(f64::INFINITY, |r| r.iter().map(|v| v * v).sum())
    }
}

fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, budget: usize) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let mut evals = 0;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step * x[i].abs().max(1.0);
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while evals < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-30 + 1e-15 * best.abs() && size < 1e-12 {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (c - w)).collect()
        };
        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let x = along(rho);
                let fx = eval(&x, &mut evals);
                (x, fx)
            } else {
                let x = along(-rho);
                let fx = eval(&x, &mut evals);
                (x, fx)
            };
            if fc < fr.min(worst) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    v.0 = x_best.iter().zip(&v.0).map(|(b, x)| b + sigma * (x - b)).collect();
                    v.1 = eval(&v.0, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    (x, fx, evals)
}

/// Levenberg-Marquardt on the residual vector, forward-difference Jacobian.
fn levenberg_marquardt(p: &Problem, x0: Vec<f64>, budget: usize) -> (Vec<f64>, usize) {
    let n = x0.len();
    let mut evals = 0;
    let mut x = x0;
    let Some(mut r) = p.residuals(&x) else { return (x, 1) };
    evals += 1;
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = 1e-3;
    for _ in 0..100 {
        if evals + n + 1 > budget || cost == 0.0 {
            break;
        }
        let m = r.len();
        let mut jac = DMatrix::zeros(m, n);
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xh = x.clone();
            xh[j] += h;
            evals += 1;
            let Some(rh) = p.residuals(&xh) else { return (x, evals) };
            for i in 0..m {
                jac[(i, j)] = (rh[i] - r[i]) / h;
            }
        }
        let rv = DVector::from_vec(r.clone());
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * rv;
        let mut improved = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * (jtj[(k, k)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            evals += 1;
            if let Some(rn) = p.residuals(&xn) {
                let cn: f64 = rn.iter().map(|v| v * v).sum();
                if cn < cost {
                    x = xn;
                    r = rn;
                    cost = cn;
                    lambda = (lambda / 3.0).max(1e-15);
                    improved = true;
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    (x, evals)
}

/// Pushes a candidate out along the ray from the target until it is at
/// least `delta` away.
fn push_out(p: &Problem, z0: &[f64], z: Vec<f64>) -> Option<Vec<f64>> {
    let dist = |z: &[f64]| param_distance(&p.codec.decode(z), p.theta).unwrap_or(0.0);
    if dist(&z) >= p.opts.delta {
        return Some(z);
    }
    let at = |lam: f64| -> Vec<f64> { z0.iter().zip(&z).map(|(a, b)| a + lam * (b - a)).collect() };
    let mut hi = 1.0;
    while dist(&at(hi)) < p.opts.delta {
        hi *= 2.0;
        if hi > 1e12 {
            return None;
        }
    }
    let mut lo = hi / 2.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if dist(&at(mid)) >= p.opts.delta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(at(hi))
}

/// Multi-start search for a parameter at distance at least `delta` from
/// `theta` with the same moments.
pub fn search_equivalent(
    theta: &ModelParams,
    init: &InitialConditions,
    dims: &PanelDims,
    opts: &SearchOptions,
    rng: RngSpec,
) -> Result<SearchReport> {
    require_valid(theta, "theta", opts.lift_distinct_loadings)?;
    if !(opts.delta > 0.0) {
        return Err(crate::Error::InvalidParams(format!("delta must be positive, got {}", opts.delta)));
    }
    let target = moment_grid(theta, init, dims)?;
    let codec = Codec { family: theta.family(), n: theta.n_ages() };
    let problem = Problem {
        codec,
        theta,
        target: &target,
        init,
        dims,
        opts,
        penalty_weight: 10.0 * target.scale(),
    };
    let z0 = codec.encode(theta);
    let tol = EquivalenceTolerances { epsilon_m: opts.epsilon_m, delta: opts.delta };

    let runs: Vec<(StartOutcome, Option<ModelParams>)> = (0..opts.n_starts)
        .into_par_iter()
        .map(|k| {
            let scale = JITTER_SCALES[k % JITTER_SCALES.len()];
            let mut r = rng.replicate(k as u64).rng();
            let start: Vec<f64> = z0
                .iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    v + scale * e
                })
                .collect();
            let f = |z: &[f64]| problem.cost(z);
            let nm_budget = opts.max_evals * 4 / 5;
            let (z_nm, _, e1) = nelder_mead(&f, &start, scale.max(0.05), nm_budget);
            let (z_lm, e2) = levenberg_marquardt(&problem, z_nm, opts.max_evals.saturating_sub(e1));
            let cand = push_out(&problem, &z0, z_lm).map(|z| codec.decode(&z));
            let cand = cand.filter(|c| {
                let v = if opts.lift_distinct_loadings { validate_lenient(c) } else { c.validate() };
                v.is_ok()
            });
            let (residual, distance) = match &cand {
                Some(c) => {
                    let res = problem
                        .grid(c)
                        .and_then(|g| g.residual(&target, opts.scope).ok())
                        .unwrap_or(f64::INFINITY);
                    (res, param_distance(c, theta).unwrap_or(0.0))
                }
                None => (f64::INFINITY, 0.0),
            };
            let outcome = StartOutcome {
                index: k,
                jitter_scale: scale,
                evaluations: e1 + e2,
                residual: if residual.is_nan() { f64::INFINITY } else { residual },
                distance,
                feasible: cand.is_some(),
            };
            (outcome, cand)
        })
        .collect();

    // best by residual, ties to the lower start index
    let best_idx = runs
        .iter()
        .enumerate()
        .filter(|(_, (o, c))| o.feasible && c.is_some())
        .min_by(|a, b| a.1 .0.residual.total_cmp(&b.1 .0.residual).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    let best = match best_idx {
        Some(i) => {
            let cand = runs[i].1.as_ref().expect("filtered on Some");
            let g = moment_grid(cand, init, dims)?;
            Some(report_from_grids(theta, cand, &target, &g, opts.scope, &tol)?)
        }
        None => None,
    };
    let best_res = best.as_ref().map_or(f64::INFINITY, |b| b.moment_residual);
    let equivalent_found = best_res <= opts.report_threshold;
    let conclusion = if equivalent_found {
        format!(
            "equivalent parameter found: residual {best_res:e} at distance {:e}",
            best.as_ref().map_or(0.0, |b| b.param_distance)
        )
    } else {
        format!(
            "no equivalent found: best residual {best_res:e} exceeds {:e}; supports the identifiability theorem (numerical evidence, not a proof)",
            opts.report_threshold
        )
    };
    Ok(SearchReport {
        family: theta.family(),
        theta: theta.clone(),
        options: *opts,
        rng,
        starts: runs.into_iter().map(|(o, _)| o).collect(),
        best_start: best_idx,
        best,
        equivalent_found,
        conclusion,
    })
}
