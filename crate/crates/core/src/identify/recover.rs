//! Constructive inversion of exact moment grids.
//!
//! Every routine reads loading products off the covariance grid, fixes scale
//! and sign with the sum-to-one restriction, then reads drifts and
//! intercepts off the means. Noiseless grids use two-point differences; the
//! `noisy` option switches to least squares over all available points and
//! skips the exactness checks.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{moment_grid, LatentProcess, MomentGrid, MomentScope};
use crate::numeric::affine_lsq;
use crate::params::{
    normalize_betas, ApArima011Params, ApArima110Params, ApRwParams, ApcRwParams, Family, InitialConditions,
    ModelParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOptions {
    /// Least squares instead of exact differencing.
    pub noisy: bool,
    /// Loadings below this magnitude are treated as zero.
    pub zero_tol: f64,
    /// Relative tolerance (times the grid scale) for exactness checks.
    pub consistency_tol: f64,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions { noisy: false, zero_tol: 1e-10, consistency_tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStep {
    pub step: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch: Option<String>,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub theta_hat: ModelParams,
    /// Max absolute difference between the input grid and the grid of
    /// `theta_hat`.
    pub residual: f64,
    pub steps: Vec<RecoveryStep>,
}

#[derive(Default)]
struct Log(Vec<RecoveryStep>);

impl Log {
    fn push(&mut self, step: &str, branch: Option<String>, values: &[(String, f64)]) {
        self.0.push(RecoveryStep {
            step: step.to_string(),
            branch,
            values: values.iter().cloned().collect(),
        });
    }
}

fn named(prefix: &str, v: &[f64]) -> Vec<(String, f64)> {
    v.iter().enumerate().map(|(i, x)| (format!("{prefix}[{i}]"), *x)).collect()
}

struct Ctx<'a> {
    grid: &'a MomentGrid,
    opts: RecoveryOptions,
    scale: f64,
}

impl<'a> Ctx<'a> {
    fn new(grid: &'a MomentGrid, opts: &RecoveryOptions) -> Self {
        Ctx { grid, opts: *opts, scale: grid.scale() }
    }

    fn tol(&self) -> f64 {
        self.opts.consistency_tol * self.scale
    }

    /// `(slope, intercept)` of a sequence that must be affine in `t`.
    fn affine(&self, points: &[(f64, f64)], what: &str) -> Result<(f64, f64)> {
        if self.opts.noisy || points.len() < 2 {
            return Ok(affine_lsq(points));
        }
        let ((t1, y1), (t2, y2)) = (points[0], points[1]);
        let slope = (y2 - y1) / (t2 - t1);
        let intercept = y1 - slope * t1;
        let dev = points
            .iter()
            .map(|(t, y)| (y - intercept - slope * t).abs())
            .fold(0.0, f64::max);
        if dev > self.tol() {
            return Err(Error::Numerical(format!(
                "{what} is not affine in t (deviation {dev:e}), grid inconsistent with the family"
            )));
        }
        Ok((slope, intercept))
    }

    fn var_points(&self, x: usize) -> Vec<(f64, f64)> {
        (1..=self.grid.dims.periods())
            .map(|t| (t as f64, self.grid.cov(x, x, t, t)))
            .collect()
    }
}

/// Loadings (sum one) and factor variance from a rank-one product matrix
/// `Q_xy = beta_x beta_y sigma2`.
fn loadings_from_products(ctx: &Ctx, q: &DMatrix<f64>, label: &str, log: &mut Log) -> Result<(Vec<f64>, f64)> {
    let n = q.nrows();
    let p = (0..n).max_by(|&a, &b| q[(a, a)].total_cmp(&q[(b, b)])).unwrap_or(0);
    let qpp = q[(p, p)];
    if !(qpp > 0.0) {
        return Err(Error::Numerical(format!("{label}: no positive squared loading product, grid inconsistent")));
    }
    let w: Vec<f64> = (0..n).map(|x| q[(x, p)] / qpp.sqrt()).collect();
    let s: f64 = w.iter().sum();
    let wabs: f64 = w.iter().map(|v| v.abs()).sum();
    if s.abs() <= self_zero(ctx) * wabs {
        return Err(Error::Numerical(format!("{label}: loadings would sum to zero, sum-to-one cannot hold")));
    }
    if !ctx.opts.noisy {
        let mut dev: f64 = 0.0;
        for x in 0..n {
            for y in 0..n {
                dev = dev.max((q[(x, y)] - w[x] * w[y]).abs());
            }
        }
        if dev > ctx.tol() {
            return Err(Error::Numerical(format!(
                "{label}: loading products are not rank one (deviation {dev:e})"
            )));
        }
    }
    let mut beta: Vec<f64> = w.iter().map(|v| v / s).collect();
    let zeros: Vec<usize> = (0..n).filter(|&x| beta[x].abs() < ctx.opts.zero_tol).collect();
    let branch = if zeros.is_empty() {
        None
    } else {
        for &x in &zeros {
            beta[x] = 0.0;
        }
        beta = normalize_betas(&beta)?;
        Some(format!("zero loading at ages {zeros:?}"))
    };
    let sign = if w[p] * s > 0.0 { "+" } else { "-" };
    let mut vals = vec![("pivot_age".to_string(), p as f64), ("sigma2".to_string(), s * s)];
    vals.extend(named("beta", &beta));
    log.push(
        &format!("{label}: scale and sign from sum-to-one (pivot loading sign {sign})"),
        branch,
        &vals,
    );
    Ok((beta, s * s))
}

fn self_zero(ctx: &Ctx) -> f64 {
    ctx.opts.zero_tol
}

/// Intercepts and drift of the age-period mean `alpha + beta (c + mu t)`.
fn ap_means(ctx: &Ctx, beta: &[f64], c: f64, log: &mut Log) -> Result<(Vec<f64>, f64)> {
    let g = ctx.grid;
    let n = g.dims.n_ages();
    let mut slopes = Vec::with_capacity(n);
    let mut intercepts = Vec::with_capacity(n);
    for x in 0..n {
        let pts: Vec<(f64, f64)> = (1..=g.dims.periods()).map(|t| (t as f64, g.mean(x, t))).collect();
        let (s, i) = ctx.affine(&pts, &format!("mean of age {x}"))?;
        slopes.push(s);
        intercepts.push(i);
    }
    // slopes are beta_x mu and the loadings sum to one
    let mu: f64 = slopes.iter().sum();
    let alpha: Vec<f64> = (0..n).map(|x| intercepts[x] - beta[x] * c).collect();
    let mut vals = vec![("mu".to_string(), mu)];
    vals.extend(named("alpha", &alpha));
    log.push("means: drift from summed slopes, intercepts give alpha", None, &vals);
    Ok((alpha, mu))
}

fn finish(
    theta_hat: ModelParams,
    grid: &MomentGrid,
    init: &InitialConditions,
    ctx: &Ctx,
    mut log: Log,
) -> Result<RecoveryResult> {
    let verdict = theta_hat.validate();
    if !verdict.is_ok() {
        return Err(Error::Numerical(format!("recovered parameters are outside the parameter space: {verdict}")));
    }
    let rebuilt = moment_grid(&theta_hat, init, &grid.dims)?;
    let residual = rebuilt.residual(grid, MomentScope::Full)?;
    log.push("reconstruction", None, &[("residual".to_string(), residual)]);
    if !ctx.opts.noisy && residual > ctx.tol() {
        return Err(Error::Numerical(format!(
            "grid inconsistent with the {} family: reconstruction residual {residual:e}",
            theta_hat.family()
        )));
    }
    Ok(RecoveryResult { theta_hat, residual, steps: log.0 })
}

fn check_ages(grid: &MomentGrid) -> Result<()> {
    if grid.means.nrows() != grid.dims.n_ages() || grid.covs.nrows() != grid.dims.n_cells() {
        return Err(Error::Input("moment grid blocks do not match its dims".into()));
    }
    Ok(())
}

/// Products `beta_x beta_y sigma2` from the time-off-diagonal covariance
/// `g(x, y, 1, 2) = P_xy k(1, 2)`, which carries no measurement noise.
fn products_from_kernel(ctx: &Ctx, kernel: &LatentProcess) -> DMatrix<f64> {
    let g = ctx.grid;
    let (n, tp) = (g.dims.n_ages(), g.dims.periods());
    DMatrix::from_fn(n, n, |x, y| {
        if ctx.opts.noisy {
            let (mut num, mut den) = (0.0, 0.0);
            for s in 1..=tp {
                for t in 1..=tp {
                    if s != t {
                        let k = kernel.cov(s, t);
                        num += g.cov(x, y, s, t) * k;
                        den += k * k;
                    }
                }
            }
            num / den
        } else {
            g.cov(x, y, 1, 2) / kernel.cov(1, 2)
        }
    })
}

/// Measurement variance from the age with the smallest loading product.
fn noise_from_variance(ctx: &Ctx, p: &DMatrix<f64>, kernel: &LatentProcess, log: &mut Log) -> Result<f64> {
    let g = ctx.grid;
    let n = g.dims.n_ages();
    let x = (0..n).min_by(|&a, &b| p[(a, a)].abs().total_cmp(&p[(b, b)].abs())).unwrap_or(0);
    let e = if ctx.opts.noisy {
        let tp = g.dims.periods();
        (1..=tp).map(|t| g.cov(x, x, t, t) - p[(x, x)] * kernel.cov(t, t)).sum::<f64>() / tp as f64
    } else {
        g.cov(x, x, 1, 1) - p[(x, x)] * kernel.cov(1, 1)
    };
    if !(e > 0.0) {
        return Err(Error::Numerical(format!("measurement variance {e} is not positive")));
    }
    log.push(
        "measurement variance from the variance at t=1",
        Some(format!("age {x} (smallest loading product)")),
        &[("sigma2_eps".to_string(), e)],
    );
    Ok(e)
}

/// Age-period model with a random-walk period factor, `T >= 2`.
pub fn recover_ap_rw(grid: &MomentGrid, init: &InitialConditions, opts: &RecoveryOptions) -> Result<RecoveryResult> {
    check_ages(grid)?;
    let d = grid.dims;
    if d.periods() < 2 {
        return Err(Error::Dimension(format!("random-walk recovery needs T >= 2, got T={}", d.periods())));
    }
    let ctx = Ctx::new(grid, opts);
    let mut log = Log::default();
    let n = d.n_ages();
    let mut p = DMatrix::zeros(n, n);
    let mut intercepts = vec![0.0; n];
    for x in 0..n {
        for y in x..n {
            let pts: Vec<(f64, f64)> = (1..=d.periods()).map(|t| (t as f64, grid.cov(x, y, t, t))).collect();
            let (slope, icpt) = ctx.affine(&pts, &format!("covariance of ages ({x},{y})"))?;
            p[(x, y)] = slope;
            p[(y, x)] = slope;
            if x == y {
                intercepts[x] = icpt;
            } else if !opts.noisy && icpt.abs() > ctx.tol() {
                return Err(Error::Numerical(format!(
                    "cross-age covariance ({x},{y}) has intercept {icpt:e}, expected 0"
                )));
            }
        }
    }
    let xs = (0..n).min_by(|&a, &b| p[(a, a)].total_cmp(&p[(b, b)])).unwrap_or(0);
    let sigma2_eps = if opts.noisy { intercepts.iter().sum::<f64>() / n as f64 } else { intercepts[xs] };
    if !(sigma2_eps > 0.0) {
        return Err(Error::Numerical(format!("variance intercept {sigma2_eps} is not positive")));
    }
    let branch = if p[(xs, xs)].abs() < opts.zero_tol * ctx.scale {
        format!("age {xs} has zero loading, variance is flat there")
    } else {
        format!("intercept of age {xs}")
    };
    let mut vals = named("slope", &(0..n).map(|x| p[(x, x)]).collect::<Vec<_>>());
    vals.push(("sigma2_eps".to_string(), sigma2_eps));
    log.push("variance affine in t: slopes beta_x^2 sigma2_e, intercept sigma2_eps", Some(branch), &vals);

    let (beta, sigma2_e) = loadings_from_products(&ctx, &p, "period loadings", &mut log)?;
    let (alpha, mu) = ap_means(&ctx, &beta, init.c, &mut log)?;
    let theta = ApRwParams { alpha, beta, mu, sigma2_e, sigma2_eps };
    finish(theta.into(), grid, init, &ctx, log)
}

/// Age-period model with an ARIMA(1,1,0) period factor, `T >= 4`.
pub fn recover_ap_arima110(
    grid: &MomentGrid,
    init: &InitialConditions,
    opts: &RecoveryOptions,
) -> Result<RecoveryResult> {
    check_ages(grid)?;
    let d = grid.dims;
    if d.periods() < 4 {
        return Err(Error::Dimension(format!("ARIMA(1,1,0) recovery needs T >= 4, got T={}", d.periods())));
    }
    let ctx = Ctx::new(grid, opts);
    let mut log = Log::default();
    let n = d.n_ages();
    // second differences of the variance, index t-2 for t = 2..T-1
    let second: Vec<Vec<f64>> = (0..n)
        .map(|x| {
            let v = ctx.var_points(x);
            (1..d.periods() - 1).map(|i| v[i + 1].1 - 2.0 * v[i].1 + v[i - 1].1).collect()
        })
        .collect();
    let xs = (0..n).max_by(|&a, &b| second[a][0].abs().total_cmp(&second[b][0].abs())).unwrap_or(0);
    let lead = second[xs][0];
    if lead.abs() <= ctx.tol() {
        log.push(
            "second differences of the variance vanish",
            Some("rho = 0, random-walk branch".into()),
            &[("max_abs_second_difference".to_string(), lead.abs())],
        );
        let rw = recover_ap_rw(grid, init, opts)?;
        let ModelParams::ApRw(p) = rw.theta_hat else { unreachable!() };
        let mut steps = log.0;
        steps.extend(rw.steps);
        let theta = ApArima110Params {
            alpha: p.alpha,
            beta: p.beta,
            mu: p.mu,
            rho: 0.0,
            sigma2_e: p.sigma2_e,
            sigma2_eps: p.sigma2_eps,
        };
        return finish(theta.into(), grid, init, &ctx, Log(steps));
    }
    let rho = if opts.noisy {
        let (mut num, mut den) = (0.0, 0.0);
        for row in &second {
            for w in row.windows(2) {
                num += w[0] * w[1];
                den += w[0] * w[0];
            }
        }
        num / den
    } else {
        let rho = second[xs][1] / lead;
        for (x, row) in second.iter().enumerate() {
            for w in row.windows(2) {
                let dev = (w[1] - rho * w[0]).abs();
                if dev > ctx.tol() {
                    return Err(Error::Numerical(format!(
                        "ratios of successive second differences are not constant at age {x} (deviation {dev:e})"
                    )));
                }
            }
        }
        rho
    };
    if !(rho.abs() < 1.0) {
        return Err(Error::Numerical(format!("autoregressive root {rho} is outside (-1, 1)")));
    }
    log.push(
        "rho from the ratio of successive second differences of the variance",
        Some(format!("age {xs}")),
        &[("rho".to_string(), rho)],
    );
    let kernel = LatentProcess::Arima110 { rho, sigma2: 1.0 };
    let p = products_from_kernel(&ctx, &kernel);
    let sigma2_eps = noise_from_variance(&ctx, &p, &kernel, &mut log)?;
    let (beta, sigma2_e) = loadings_from_products(&ctx, &p, "period loadings", &mut log)?;
    let (alpha, mu) = ap_means(&ctx, &beta, init.c, &mut log)?;
    let theta = ApArima110Params { alpha, beta, mu, rho, sigma2_e, sigma2_eps };
    finish(theta.into(), grid, init, &ctx, log)
}

/// Both roots of `phi / (1 + phi)^2 = r`; the first is the invertible one.
pub fn ma1_roots(r: f64) -> Result<(f64, Option<f64>)> {
    let disc = 1.0 - 4.0 * r;
    if !(disc > 0.0) {
        return Err(Error::Numerical(format!(
            "ratio {r} >= 1/4 leaves no invertible moving-average root"
        )));
    }
    // rationalised form of ((1 - 2r) - sqrt(1 - 4r)) / (2r), exact at r = 0
    let phi = 2.0 * r / ((1.0 - 2.0 * r) + disc.sqrt());
    Ok((phi, if phi == 0.0 { None } else { Some(1.0 / phi) }))
}

/// Age-period model with an ARIMA(0,1,1) period factor, `T >= 2`.
pub fn recover_ap_arima011(
    grid: &MomentGrid,
    init: &InitialConditions,
    opts: &RecoveryOptions,
) -> Result<RecoveryResult> {
    check_ages(grid)?;
    let d = grid.dims;
    if d.periods() < 2 {
        return Err(Error::Dimension(format!("ARIMA(0,1,1) recovery needs T >= 2, got T={}", d.periods())));
    }
    let ctx = Ctx::new(grid, opts);
    let mut log = Log::default();
    let n = d.n_ages();
    let fit = |x: usize, y: usize| -> (f64, f64) {
        let pts: Vec<(f64, f64)> = (1..=d.periods()).map(|t| (t as f64, grid.cov(x, y, t, t))).collect();
        if opts.noisy {
            affine_lsq(&pts)
        } else {
            let slope = pts[1].1 - pts[0].1;
            (slope, pts[0].1 - slope)
        }
    };
    let mut cross: Option<(usize, usize, f64, f64)> = None;
    for x in 0..n {
        for y in x + 1..n {
            let (a, c) = fit(x, y);
            if a.abs() > ctx.tol() && cross.is_none_or(|(_, _, best, _)| a.abs() > best.abs()) {
                cross = Some((x, y, a, c));
            }
        }
    }
    let (r, branch) = match cross {
        // slope P (1+phi)^2, intercept -2 P phi
        Some((x, y, a, c)) => (-c / (2.0 * a), format!("cross-age route, ages ({x},{y})")),
        None => {
            // same-age route: a - g(x,x,1,2) = P phi
            let x = (0..n).max_by(|&a, &b| fit(a, a).0.total_cmp(&fit(b, b).0)).unwrap_or(0);
            let (a, _) = fit(x, x);
            if !(a > 0.0) {
                return Err(Error::Numerical("variance slope is not positive, grid inconsistent".into()));
            }
            (
                (a - grid.cov(x, x, 1, 2)) / a,
                format!("same-age route, age {x} (no cross-age product available)"),
            )
        }
    };
    let (phi, other) = ma1_roots(r)?;
    let mut vals = vec![("ratio".to_string(), r), ("phi".to_string(), phi)];
    if let Some(o) = other {
        vals.push(("rejected_root".to_string(), o));
    }
    let root_note = if other.is_none() { "; phi = 0 is the unique root" } else { "" };
    log.push(
        "phi from the quadratic in the covariance slope and intercept; invertible root kept",
        Some(format!("{branch}{root_note}")),
        &vals,
    );
    let kernel = LatentProcess::Arima011 { phi, sigma2: 1.0 };
    let p = products_from_kernel(&ctx, &kernel);
    let sigma2_eps = noise_from_variance(&ctx, &p, &kernel, &mut log)?;
    let (beta, sigma2_e) = loadings_from_products(&ctx, &p, "period loadings", &mut log)?;
    let (alpha, mu) = ap_means(&ctx, &beta, init.c, &mut log)?;
    let theta = ApArima011Params { alpha, beta, mu, phi, sigma2_e, sigma2_eps };
    finish(theta.into(), grid, init, &ctx, log)
}

/// Age-period-cohort model with random-walk period and cohort factors,
/// `X > 0` and `T > X + 2`.
pub fn recover_apc_rw(grid: &MomentGrid, init: &InitialConditions, opts: &RecoveryOptions) -> Result<RecoveryResult> {
    check_ages(grid)?;
    let d = grid.dims;
    let (xm, tp) = (d.max_age(), d.periods());
    if xm == 0 {
        return Err(Error::Dimension(
            "cohort recovery needs X > 0: with a single age the two factor variances trade off".into(),
        ));
    }
    if tp <= xm + 2 {
        return Err(Error::Dimension(format!("cohort recovery needs T > X + 2, got X={xm}, T={tp}")));
    }
    let ctx = Ctx::new(grid, opts);
    let mut log = Log::default();
    let n = d.n_ages();

    // variance: (Q0 + Q1) t + Q0 (X - x) + sigma2_eps
    let mut total = vec![0.0; n];
    let mut icpt = vec![0.0; n];
    for x in 0..n {
        let (s, i) = ctx.affine(&ctx.var_points(x), &format!("variance of age {x}"))?;
        total[x] = s;
        icpt[x] = i;
    }
    let sigma2_eps = icpt[xm];
    if !(sigma2_eps > 0.0) {
        return Err(Error::Numerical(format!("measurement variance {sigma2_eps} is not positive")));
    }
    let mut q0 = DMatrix::zeros(n, n);
    let mut q1 = DMatrix::zeros(n, n);
    for x in 0..xm {
        q0[(x, x)] = (icpt[x] - sigma2_eps) / (xm - x) as f64;
        q1[(x, x)] = total[x] - q0[(x, x)];
    }
    let mut vals = vec![("sigma2_eps".to_string(), sigma2_eps), ("total_slope_oldest".to_string(), total[xm])];
    vals.extend(named("cohort_sq", &(0..xm).map(|x| q0[(x, x)]).collect::<Vec<_>>()));
    log.push("variance affine in t; oldest age gives sigma2_eps", None, &vals);

    for x in 0..n {
        for y in x + 1..n {
            let (slope, intercept) = if y < xm {
                // same period: intercept Q0 (X - y)
                let pts: Vec<(f64, f64)> = (1..=tp).map(|t| (t as f64, grid.cov(x, y, t, t))).collect();
                let (s, i) = ctx.affine(&pts, &format!("covariance of ages ({x},{y})"))?;
                (s, i / (xm - y) as f64)
            } else {
                // oldest age against age X-k at lag k+1: intercept k Q0
                let k = xm - x;
                let pts: Vec<(f64, f64)> =
                    (1..=tp - k - 1).map(|t| (t as f64, grid.cov(xm, x, t + k + 1, t))).collect();
                let (s, i) = ctx.affine(&pts, &format!("lagged covariance of ages ({xm},{x})"))?;
                (s, i / k as f64)
            };
            q0[(x, y)] = intercept;
            q0[(y, x)] = intercept;
            q1[(x, y)] = slope - intercept;
            q1[(y, x)] = slope - intercept;
        }
    }
    log.push(
        "cross-age products: same-period intercepts, oldest age via lagged covariances",
        None,
        &named("cohort_oldest_row", &(0..n).map(|y| q0[(xm, y)]).collect::<Vec<_>>()),
    );

    // complete the oldest diagonal entry from whichever factor has a usable pivot
    let piv = |q: &DMatrix<f64>| (0..xm).max_by(|&a, &b| q[(a, a)].total_cmp(&q[(b, b)])).unwrap_or(0);
    let (p0, p1) = (piv(&q0), piv(&q1));
    let (v0, v1) = (q0[(p0, p0)], q1[(p1, p1)]);
    let branch = if v0 >= v1 && v0 > ctx.tol() {
        q0[(xm, xm)] = q0[(xm, p0)] * q0[(xm, p0)] / v0;
        q1[(xm, xm)] = total[xm] - q0[(xm, xm)];
        format!("cohort pivot at age {p0}")
    } else if v1 > ctx.tol() {
        q1[(xm, xm)] = q1[(xm, p1)] * q1[(xm, p1)] / v1;
        q0[(xm, xm)] = total[xm] - q1[(xm, xm)];
        format!("period pivot at age {p1} (cohort loadings vanish below the oldest age)")
    } else {
        return Err(Error::Numerical(
            "both loading vectors vanish below the oldest age, so they coincide; outside the parameter space".into(),
        ));
    };
    log.push(
        "oldest-age split by rank-one completion",
        Some(branch),
        &[("cohort_sq_oldest".to_string(), q0[(xm, xm)]), ("period_sq_oldest".to_string(), q1[(xm, xm)])],
    );

    let (beta0, sigma2_e0) = loadings_from_products(&ctx, &q0, "cohort loadings", &mut log)?;
    let (beta1, sigma2_e1) = loadings_from_products(&ctx, &q1, "period loadings", &mut log)?;

    // mean slope in t: beta0_x mu0 + beta1_x mu1
    let mut slopes = vec![0.0; n];
    let mut inter = vec![0.0; n];
    for x in 0..n {
        let pts: Vec<(f64, f64)> = (1..=tp).map(|t| (t as f64, grid.mean(x, t))).collect();
        let (s, i) = ctx.affine(&pts, &format!("mean of age {x}"))?;
        slopes[x] = s;
        inter[x] = i;
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let (a00, a01, a11) = (dot(&beta0, &beta0), dot(&beta0, &beta1), dot(&beta1, &beta1));
    let det = a00 * a11 - a01 * a01;
    if det <= 1e-12 * a00 * a11 {
        return Err(Error::Numerical(
            "cohort and period loadings are proportional, the two drifts cannot be separated".into(),
        ));
    }
    let (r0, r1) = (dot(&beta0, &slopes), dot(&beta1, &slopes));
    let mu0 = (a11 * r0 - a01 * r1) / det;
    let mu1 = (a00 * r1 - a01 * r0) / det;
    let alpha: Vec<f64> = (0..n)
        .map(|x| inter[x] - beta0[x] * (init.c0 + mu0 * (xm - x) as f64) - beta1[x] * init.c1)
        .collect();
    let mut vals = vec![("mu0".to_string(), mu0), ("mu1".to_string(), mu1)];
    vals.extend(named("alpha", &alpha));
    log.push("drifts from the 2x2 system of mean slopes, then alpha", None, &vals);

    let theta = ApcRwParams { alpha, beta0, beta1, mu0, mu1, sigma2_e0, sigma2_e1, sigma2_eps };
    finish(theta.into(), grid, init, &ctx, log)
}

/// Dispatches on the family tag.
pub fn recover(
    family: Family,
    grid: &MomentGrid,
    init: &InitialConditions,
    opts: &RecoveryOptions,
) -> Result<RecoveryResult> {
    match family {
        Family::ApRw => recover_ap_rw(grid, init, opts),
        Family::ApArima110 => recover_ap_arima110(grid, init, opts),
        Family::ApArima011 => recover_ap_arima011(grid, init, opts),
        Family::ApcRw => recover_apc_rw(grid, init, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::counterexample::{counterexample_ap_means_mu0, counterexample_apc_equal_loadings};
    use crate::params::{raw_param_error, PanelDims};
    use crate::simulate::RngSpec;
    use rand::Rng;

    fn loadings(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        loop {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..1.0)).collect();
            let s: f64 = w.iter().sum();
            if s > 0.5 {
                return normalize_betas(&w).unwrap();
            }
        }
    }

    fn round_trip(theta: ModelParams, init: &InitialConditions, dims: &PanelDims) -> f64 {
        let g = moment_grid(&theta, init, dims).unwrap();
        let r = recover(theta.family(), &g, init, &RecoveryOptions::default()).unwrap();
        raw_param_error(&theta, &r.theta_hat).unwrap()
    }

    #[test]
    fn rw_round_trip_random() {
        let mut rng = RngSpec::new(1, 0).rng();
        for _ in 0..100 {
            let xm = rng.random_range(0..=4);
            let tp = rng.random_range(2..=30);
            let n = xm + 1;
            let theta = ApRwParams {
                alpha: (0..n).map(|_| rng.random_range(-9.0..-1.0)).collect(),
                beta: loadings(&mut rng, n),
                mu: rng.random_range(-1.0..1.0),
                sigma2_e: rng.random_range(0.05..2.0),
                sigma2_eps: rng.random_range(0.01..1.0),
            };
            let init = InitialConditions { c: rng.random_range(-2.0..2.0), ..Default::default() };
            let err = round_trip(theta.into(), &init, &PanelDims::new(xm, tp).unwrap());
            assert!(err < 1e-8, "X={xm} T={tp}: {err}");
        }
    }

    #[test]
    fn rw_single_age_forces_unit_loading() {
        let theta = ApRwParams { alpha: vec![-3.0], beta: vec![1.0], mu: 0.2, sigma2_e: 0.7, sigma2_eps: 0.1 };
        let g = moment_grid(&theta.clone().into(), &InitialConditions::default(), &PanelDims::new(0, 2).unwrap()).unwrap();
        let r = recover_ap_rw(&g, &InitialConditions::default(), &Default::default()).unwrap();
        let ModelParams::ApRw(p) = r.theta_hat else { panic!() };
        assert_eq!(p.beta, vec![1.0]);
        assert!((p.sigma2_e - 0.7).abs() < 1e-12);
    }

    #[test]
    fn rw_zero_loading_branch_is_logged() {
        let theta = ApRwParams {
            alpha: vec![-3.0, -2.0, -1.0],
            beta: vec![0.0, 0.4, 0.6],
            mu: 0.2,
            sigma2_e: 0.7,
            sigma2_eps: 0.1,
        };
        let g = moment_grid(&theta.clone().into(), &InitialConditions::default(), &PanelDims::new(2, 5).unwrap()).unwrap();
        let r = recover_ap_rw(&g, &InitialConditions::default(), &Default::default()).unwrap();
        assert!(r.steps.iter().any(|s| s.branch.as_deref().is_some_and(|b| b.contains("zero loading"))));
        assert!(raw_param_error(&theta.into(), &r.theta_hat).unwrap() < 1e-10);
    }

    #[test]
    fn covariances_expose_the_mean_impostor() {
        let (a, b) = counterexample_ap_means_mu0(&[0.0, 0.0], &[0.3, 0.7], &[0.6, 0.4], 2.0, 1.0, 0.1).unwrap();
        let init = InitialConditions { c: 2.0, ..Default::default() };
        let g = moment_grid(&a.clone().into(), &init, &PanelDims::new(1, 4).unwrap()).unwrap();
        let r = recover_ap_rw(&g, &init, &Default::default()).unwrap();
        assert!(raw_param_error(&a.into(), &r.theta_hat).unwrap() < 1e-10);
        assert!(raw_param_error(&b.into(), &r.theta_hat).unwrap() > 0.1);
    }

    #[test]
    fn rw_rejects_other_families() {
        let theta = ApArima110Params {
            alpha: vec![-3.0, -2.0],
            beta: vec![0.5, 0.5],
            mu: 0.0,
            rho: 0.6,
            sigma2_e: 1.0,
            sigma2_eps: 0.1,
        };
        let g = moment_grid(&theta.into(), &InitialConditions::default(), &PanelDims::new(1, 6).unwrap()).unwrap();
        assert!(matches!(recover_ap_rw(&g, &InitialConditions::default(), &Default::default()), Err(Error::Numerical(_))));
    }

    #[test]
    fn arima110_round_trip_grid() {
        let mut rng = RngSpec::new(2, 0).rng();
        for rho in [-0.8, -0.3, 0.0, 0.3, 0.8] {
            for xm in [0, 1, 3] {
                for tp in [4, 10, 30] {
                    let n = xm + 1;
                    let theta = ApArima110Params {
                        alpha: (0..n).map(|_| rng.random_range(-9.0..-1.0)).collect(),
                        beta: loadings(&mut rng, n),
                        mu: rng.random_range(-1.0..1.0),
                        rho,
                        sigma2_e: rng.random_range(0.05..2.0),
                        sigma2_eps: rng.random_range(0.01..1.0),
                    };
                    let init = InitialConditions { c: 0.5, ..Default::default() };
                    let err = round_trip(theta.into(), &init, &PanelDims::new(xm, tp).unwrap());
                    assert!(err < 1e-6, "rho={rho} X={xm} T={tp}: {err}");
                }
            }
        }
    }

    #[test]
    fn arima110_zero_rho_takes_random_walk_branch() {
        let theta = ApArima110Params {
            alpha: vec![-3.0, -2.0],
            beta: vec![0.5, 0.5],
            mu: 0.0,
            rho: 0.0,
            sigma2_e: 1.0,
            sigma2_eps: 0.1,
        };
        let g = moment_grid(&theta.into(), &InitialConditions::default(), &PanelDims::new(1, 5).unwrap()).unwrap();
        let r = recover_ap_arima110(&g, &InitialConditions::default(), &Default::default()).unwrap();
        let ModelParams::ApArima110(p) = &r.theta_hat else { panic!() };
        assert!(p.rho.abs() < 1e-8);
        assert!(r.steps[0].branch.as_deref().unwrap().contains("random-walk"));
        assert!(recover_ap_arima110(
            &moment_grid(&r.theta_hat, &InitialConditions::default(), &PanelDims::new(1, 3).unwrap()).unwrap(),
            &InitialConditions::default(),
            &Default::default()
        )
        .is_err());
    }

    #[test]
    fn quadratic_roots() {
        // phi = 0.5 gives r = 0.5 / 2.25; roots 0.5 and 2
        let (phi, other) = ma1_roots(0.5 / 2.25).unwrap();
        assert!((phi - 0.5).abs() < 1e-15);
        assert!((other.unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(ma1_roots(0.0).unwrap(), (0.0, None));
        assert!(ma1_roots(0.25).is_err());
        assert!(ma1_roots(0.3).is_err());
        for phi in [-0.99, -0.9, -0.4, 0.4, 0.9, 0.99] {
            let r = phi / ((1.0 + phi) * (1.0 + phi));
            let (got, _) = ma1_roots(r).unwrap();
            assert!(got.abs() < 1.0 && (got - phi).abs() < 1e-6, "{phi} -> {got}");
        }
    }

    #[test]
    fn arima011_round_trip_grid() {
        let mut rng = RngSpec::new(3, 0).rng();
        for phi in [-0.9, -0.4, 0.0, 0.4, 0.9] {
            for xm in [0, 2] {
                for tp in [2, 10, 30] {
                    let n = xm + 1;
                    let theta = ApArima011Params {
                        alpha: (0..n).map(|_| rng.random_range(-9.0..-1.0)).collect(),
                        beta: loadings(&mut rng, n),
                        mu: rng.random_range(-1.0..1.0),
                        phi,
                        sigma2_e: rng.random_range(0.05..2.0),
                        sigma2_eps: rng.random_range(0.01..1.0),
                    };
                    let init = InitialConditions { c: -0.5, ..Default::default() };
                    let err = round_trip(theta.into(), &init, &PanelDims::new(xm, tp).unwrap());
                    assert!(err < 1e-6, "phi={phi} X={xm} T={tp}: {err}");
                }
            }
        }
    }

    fn random_apc(rng: &mut impl Rng, xm: usize) -> ApcRwParams {
        let n = xm + 1;
        ApcRwParams {
            alpha: (0..n).map(|_| rng.random_range(-9.0..-1.0)).collect(),
            beta0: loadings(rng, n),
            beta1: loadings(rng, n),
            mu0: rng.random_range(-1.0..1.0),
            mu1: rng.random_range(-1.0..1.0),
            sigma2_e0: rng.random_range(0.05..2.0),
            sigma2_e1: rng.random_range(0.05..2.0),
            sigma2_eps: rng.random_range(0.01..1.0),
        }
    }

    #[test]
    fn apc_round_trip_random() {
        let mut rng = RngSpec::new(4, 0).rng();
        for i in 0..100 {
            let xm = 1 + i % 3;
            let theta = random_apc(&mut rng, xm);
            let init = InitialConditions { c: 0.0, c0: rng.random_range(-1.0..1.0), c1: rng.random_range(-1.0..1.0) };
            let err = round_trip(theta.into(), &init, &PanelDims::new(xm, xm + 4).unwrap());
            assert!(err < 1e-7, "X={xm}: {err}");
        }
    }

    #[test]
    fn apc_period_pivot_branch() {
        let theta = ApcRwParams {
            alpha: vec![-3.0, -2.0, -1.0],
            beta0: vec![0.0, 0.0, 1.0],
            beta1: vec![0.2, 0.3, 0.5],
            mu0: 0.1,
            mu1: -0.2,
            sigma2_e0: 0.5,
            sigma2_e1: 0.8,
            sigma2_eps: 0.1,
        };
        let init = InitialConditions::default();
        let g = moment_grid(&theta.clone().into(), &init, &PanelDims::new(2, 5).unwrap()).unwrap();
        let r = recover_apc_rw(&g, &init, &Default::default()).unwrap();
        assert!(r.steps.iter().any(|s| s.branch.as_deref().is_some_and(|b| b.starts_with("period pivot"))));
        assert!(raw_param_error(&theta.into(), &r.theta_hat).unwrap() < 1e-9);
    }

    #[test]
    fn apc_refusals() {
        let mut rng = RngSpec::new(5, 0).rng();
        let init = InitialConditions::default();
        let single = ApcRwParams {
            alpha: vec![-1.0],
            beta0: vec![1.0],
            beta1: vec![1.0],
            mu0: 0.1,
            mu1: 0.2,
            sigma2_e0: 1.0,
            sigma2_e1: 2.0,
            sigma2_eps: 0.1,
        };
        let g = moment_grid(&single.into(), &init, &PanelDims::new(0, 6).unwrap()).unwrap();
        assert!(matches!(recover_apc_rw(&g, &init, &Default::default()), Err(Error::Dimension(_))));
        for xm in 1..=3 {
            let theta: ModelParams = random_apc(&mut rng, xm).into();
            for tp in [xm + 1, xm + 2] {
                let g = moment_grid(&theta, &init, &PanelDims::new(xm, tp).unwrap()).unwrap();
                assert!(matches!(recover_apc_rw(&g, &init, &Default::default()), Err(Error::Dimension(_))));
            }
        }
    }

    #[test]
    fn apc_equal_loadings_is_not_silently_recovered() {
        let p = ApcRwParams {
            alpha: vec![-2.0, -1.0],
            beta0: vec![0.4, 0.6],
            beta1: vec![0.4, 0.6],
            mu0: 0.3,
            mu1: -0.1,
            sigma2_e0: 0.5,
            sigma2_e1: 0.7,
            sigma2_eps: 0.1,
        };
        let (a, _) = counterexample_apc_equal_loadings(&p).unwrap();
        let init = InitialConditions::default();
        let g = moment_grid(&a.into(), &init, &PanelDims::new(1, 6).unwrap()).unwrap();
        assert!(matches!(recover_apc_rw(&g, &init, &Default::default()), Err(Error::Numerical(_))));
    }

    #[test]
    fn small_perturbations_move_estimates_little() {
        let mut rng = RngSpec::new(6, 0).rng();
        let init = InitialConditions::default();
        let cases: Vec<(ModelParams, PanelDims)> = vec![
            (
                ApRwParams { alpha: vec![-3.0, -2.0, -1.0], beta: vec![0.2, 0.3, 0.5], mu: 0.1, sigma2_e: 0.6, sigma2_eps: 0.2 }.into(),
                PanelDims::new(2, 8).unwrap(),
            ),
            (
                ApArima110Params { alpha: vec![-3.0, -2.0], beta: vec![0.4, 0.6], mu: 0.1, rho: 0.5, sigma2_e: 0.6, sigma2_eps: 0.2 }.into(),
                PanelDims::new(1, 8).unwrap(),
            ),
            (
                ApArima011Params { alpha: vec![-3.0, -2.0], beta: vec![0.4, 0.6], mu: 0.1, phi: -0.4, sigma2_e: 0.6, sigma2_eps: 0.2 }.into(),
                PanelDims::new(1, 8).unwrap(),
            ),
            (random_apc(&mut rng, 2).into(), PanelDims::new(2, 6).unwrap()),
        ];
        for (theta, dims) in cases {
            let mut g = moment_grid(&theta, &init, &dims).unwrap();
            let n = g.covs.nrows();
            for i in 0..n {
                for j in i..n {
                    let e = rng.random_range(-1e-10..1e-10);
                    g.covs[(i, j)] += e;
                    if i != j {
                        g.covs[(j, i)] += e;
                    }
                }
            }
            for v in g.means.iter_mut() {
                *v += rng.random_range(-1e-10..1e-10);
            }
            let r = recover(theta.family(), &g, &init, &Default::default()).unwrap();
            let err = raw_param_error(&theta, &r.theta_hat).unwrap();
            assert!(err < 1e-6, "{}: {err}", theta.family());
        }
    }

    #[test]
    fn least_squares_mode_agrees_on_exact_grids() {
        let theta: ModelParams =
            ApArima011Params { alpha: vec![-3.0, -2.0], beta: vec![0.4, 0.6], mu: 0.1, phi: 0.3, sigma2_e: 0.6, sigma2_eps: 0.2 }.into();
        let init = InitialConditions::default();
        let g = moment_grid(&theta, &init, &PanelDims::new(1, 9).unwrap()).unwrap();
        let opts = RecoveryOptions { noisy: true, ..Default::default() };
        let r = recover(theta.family(), &g, &init, &opts).unwrap();
        assert!(raw_param_error(&theta, &r.theta_hat).unwrap() < 1e-8);
    }
}
