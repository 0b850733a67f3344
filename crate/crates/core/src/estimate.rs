//! Classical two-step Lee-Carter estimation and the demonstrations of why its
//! ad hoc constraints clash with a stochastic period factor.

use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::{simulate_kappa_rw, InnovationLaw, RngSpec, Surface};

/// Time-series model fitted to the estimated period factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Model {
    Rw,
    Arima110,
    Arima011,
}

impl FromStr for Stage2Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rw" => Ok(Stage2Model::Rw),
            "arima110" => Ok(Stage2Model::Arima110),
            "arima011" => Ok(Stage2Model::Arima011),
            other => Err(Error::Input(format!("unknown second-stage model `{other}` (rw|arima110|arima011)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum SecondStage {
    Rw { mu: f64, sigma2_e: f64, mu_se: f64 },
    Arima110 { mu: f64, rho: f64, sigma2_e: f64, rho_se: f64 },
    Arima011 { mu: f64, phi: f64, sigma2_e: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub kappa_hat: Vec<f64>,
    pub second_stage: Option<SecondStage>,
    /// Mean squared residual of the rank-1 reconstruction.
    pub residual_sigma2: f64,
}

impl FitResult {
    pub fn fitted(&self, x: usize, t: usize) -> f64 {
        self.alpha_hat[x] + self.beta_hat[x] * self.kappa_hat[t - 1]
    }
}

/// Row means, then the leading singular triple of the row-centred matrix,
/// rescaled so the loadings sum to one and the period factor sums to zero.
pub fn fit_lee_carter_stage1(surface: &Surface) -> Result<FitResult> {
    let m = &surface.values;
    let (na, tp) = (m.nrows(), m.ncols());
    if tp < 2 {
        return Err(Error::Dimension(format!("stage 1 needs T >= 2, got T={tp}")));
    }
    let mut alpha: Vec<f64> = (0..na).map(|x| m.row(x).sum() / tp as f64).collect();
    let z = DMatrix::from_fn(na, tp, |x, t| m[(x, t)] - alpha[x]);
    let scale = m.amax().max(1.0);
    if z.amax() <= 1e-14 * scale {
        return Err(Error::Numerical("centred surface is zero, loadings are undefined".into()));
    }
    // leading singular vector from the smaller Gram matrix
    let u = if na <= tp {
        leading_eigenvector(&(&z * z.transpose()))
    } else {
        &z * leading_eigenvector(&(z.transpose() * &z))
    };
    let usum = u.sum();
    if usum.abs() <= 1e-12 * u.amax() {
        return Err(Error::Numerical(
            "leading age loading vector sums to zero, the sum-to-one scaling is undefined".into(),
        ));
    }
    let beta: Vec<f64> = u.iter().map(|b| b / usum).collect();
    // least-squares period factor given the loadings
    let bb: f64 = beta.iter().map(|b| b * b).sum();
    let mut kappa: Vec<f64> = (0..tp)
        .map(|t| (0..na).map(|x| beta[x] * z[(x, t)]).sum::<f64>() / bb)
        .collect();

    let shift = kappa.iter().sum::<f64>() / tp as f64;
    for k in kappa.iter_mut() {
        *k -= shift;
    }
    for (a, b) in alpha.iter_mut().zip(&beta) {
        *a += b * shift;
    }
    let head: f64 = kappa[..tp - 1].iter().sum();
    kappa[tp - 1] = -head;

    let mut beta = beta;
    let bhead: f64 = beta[..na - 1].iter().sum();
    beta[na - 1] = 1.0 - bhead;

    let mut ss = 0.0;
    for x in 0..na {
        for t in 0..tp {
            let r = m[(x, t)] - alpha[x] - beta[x] * kappa[t];
            ss += r * r;
        }
    }
    Ok(FitResult {
        alpha_hat: alpha,
        beta_hat: beta,
        kappa_hat: kappa,
        second_stage: None,
        residual_sigma2: ss / (na * tp) as f64,
    })
}

fn leading_eigenvector(gram: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    let eig = gram.clone().symmetric_eigen();
    let i = eig.eigenvalues.imax();
    eig.eigenvectors.column(i).into_owned()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fits the chosen time-series model to the first differences of `kappa`.
pub fn fit_stage2(kappa: &[f64], model: Stage2Model) -> Result<SecondStage> {
    let need = match model {
        Stage2Model::Rw => 3,
        _ => 4,
    };
    if kappa.len() < need {
        return Err(Error::Dimension(format!(
            "{model:?} second stage needs at least {need} periods, got {}",
            kappa.len()
        )));
    }
    let d: Vec<f64> = kappa.windows(2).map(|w| w[1] - w[0]).collect();
    let n = d.len() as f64;
    let mu = mean(&d);
    match model {
        Stage2Model::Rw => {
            let var = d.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0);
            Ok(SecondStage::Rw { mu, sigma2_e: var, mu_se: (var / n).sqrt() })
        }
        Stage2Model::Arima110 => {
            let (lag, cur) = (&d[..d.len() - 1], &d[1..]);
            let (ml, mc) = (mean(lag), mean(cur));
            let sxx: f64 = lag.iter().map(|v| (v - ml) * (v - ml)).sum();
            if sxx <= 1e-300 {
                return Err(Error::Numerical("differences are constant, autoregression is undefined".into()));
            }
            let sxy: f64 = lag.iter().zip(cur).map(|(a, b)| (a - ml) * (b - mc)).sum();
            let rho = sxy / sxx;
            let a = mc - rho * ml;
            let m = cur.len() as f64;
            let rss: f64 = lag.iter().zip(cur).map(|(l, c)| (c - a - rho * l).powi(2)).sum();
            let sigma2_e = rss / (m - 2.0).max(1.0);
            let mu = if (1.0 - rho).abs() > 1e-12 { a / (1.0 - rho) } else { mu };
            Ok(SecondStage::Arima110 { mu, rho, sigma2_e, rho_se: (sigma2_e / sxx).sqrt() })
        }
        Stage2Model::Arima011 => {
            let g0 = d.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            if g0 <= 1e-300 {
                return Err(Error::Numerical("differences are constant, MA(1) moments are undefined".into()));
            }
            let g1 = d.windows(2).map(|w| (w[0] - mu) * (w[1] - mu)).sum::<f64>() / n;
            let r = g1 / g0;
            if r.abs() > 0.5 {
                return Err(Error::Numerical(format!(
                    "lag-one autocorrelation {r} exceeds 0.5 in magnitude, no invertible MA(1) root"
                )));
            }
            let phi = if r == 0.0 { 0.0 } else { (1.0 - (1.0 - 4.0 * r * r).sqrt()) / (2.0 * r) };
            Ok(SecondStage::Arima011 { mu, phi, sigma2_e: g0 / (1.0 + phi * phi) })
        }
    }
}

/// Stage 1 followed by the chosen second stage.
pub fn fit_two_step(surface: &Surface, model: Stage2Model) -> Result<FitResult> {
    let mut fit = fit_lee_carter_stage1(surface)?;
    fit.second_stage = Some(fit_stage2(&fit.kappa_hat, model)?);
    Ok(fit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

fn histogram(v: &[f64], bins: usize) -> Histogram {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for x in v {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionBelow {
    pub tol: f64,
    pub count: usize,
    pub fraction: f64,
}

/// How the sum of a random-walk path over the window is distributed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionalReport {
    pub mu: f64,
    pub sigma2_e: f64,
    pub c: f64,
    pub periods: usize,
    pub n_reps: usize,
    pub rng: RngSpec,
    pub sum_mean: f64,
    pub sum_mean_exact: f64,
    pub sum_mean_se: f64,
    pub sum_var: f64,
    pub sum_var_exact: f64,
    pub sum_var_se: f64,
    pub sum_var_z: f64,
    pub min_abs_sum: f64,
    pub fractions_below: Vec<FractionBelow>,
    pub histogram: Histogram,
    #[serde(skip)]
    pub sums: Vec<f64>,
}

impl DistributionalReport {
    /// One row per replicate: `rep,sum`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["rep", "sum"])?;
        for (i, s) in self.sums.iter().enumerate() {
            wr.write_record([i.to_string(), format!("{s:.16e}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub const DEMO_TOLS: [f64; 2] = [1e-3, 1e-6];

/// Simulates `n_reps` random-walk paths and checks how often their window
/// sum lands near zero, the value the ad hoc constraint demands.
pub fn demo_distributional_constraint(
    mu: f64,
    sigma2_e: f64,
    c: f64,
    periods: usize,
    n_reps: usize,
    rng: RngSpec,
    law: InnovationLaw,
) -> Result<DistributionalReport> {
    if n_reps < 1000 {
        return Err(Error::InvalidParams(format!("need at least 1000 replicates, got {n_reps}")));
    }
    if periods < 1 {
        return Err(Error::InvalidParams("T must be at least 1".into()));
    }
    if !(sigma2_e > 0.0) || !mu.is_finite() || !c.is_finite() {
        return Err(Error::InvalidParams("need sigma2_e > 0 and finite mu, c".into()));
    }
    law.check()?;
    let sums: Vec<f64> = (0..n_reps as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.replicate(i).rng();
            simulate_kappa_rw(mu, sigma2_e, c, periods, law, &mut r).iter().sum()
        })
        .collect();
    let n = n_reps as f64;
    let m = mean(&sums);
    let var = sums.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (n - 1.0);
    let m4 = sums.iter().map(|s| (s - m).powi(4)).sum::<f64>() / n;
    let var_se = ((m4 - var * var).max(0.0) / n).sqrt();
    let mut exact_var = 0.0;
    for s in 1..=periods {
        for t in 1..=periods {
            exact_var += sigma2_e * s.min(t) as f64;
        }
    }
    let tf = periods as f64;
    let fractions_below = DEMO_TOLS
        .iter()
        .map(|&tol| {
            let count = sums.iter().filter(|s| s.abs() < tol).count();
            FractionBelow { tol, count, fraction: count as f64 / n }
        })
        .collect();
    Ok(DistributionalReport {
        mu,
        sigma2_e,
        c,
        periods,
        n_reps,
        rng,
        sum_mean: m,
        sum_mean_exact: c * tf + mu * tf * (tf + 1.0) / 2.0,
        sum_mean_se: (var / n).sqrt(),
        sum_var: var,
        sum_var_exact: exact_var,
        sum_var_se: var_se,
        sum_var_z: if var_se > 0.0 { (var - exact_var) / var_se } else { 0.0 },
        min_abs_sum: sums.iter().map(|s| s.abs()).fold(f64::INFINITY, f64::min),
        fractions_below,
        histogram: histogram(&sums, 20),
        sums,
    })
}

/// What re-estimation and constrained updating do to the period factor
/// when one more year of data arrives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicReport {
    pub periods: usize,
    pub kappa_short: Vec<f64>,
    pub kappa_long: Vec<f64>,
    /// `max_t<=T |kappa_long_t - kappa_short_t|`.
    pub max_kappa_change: f64,
    pub max_beta_change: f64,
    /// Sequential sum of the short-window factor.
    pub short_window_sum: f64,
    /// Values forced on the next periods by holding the past fixed and
    /// re-imposing the zero-sum constraint each period.
    pub forced_next: Vec<f64>,
    pub forced_all_zero: bool,
}

pub const DYNAMIC_HORIZON: usize = 5;

pub fn demo_dynamic_constraint(short: &Surface, long: &Surface) -> Result<DynamicReport> {
    let (ds, dl) = (short.dims, long.dims);
    if ds.n_ages() != dl.n_ages() || dl.periods() != ds.periods() + 1 {
        return Err(Error::Input(format!(
            "window mismatch: long surface must have the same ages and one more period ({}x{} vs {}x{})",
            ds.n_ages(),
            ds.periods(),
            dl.n_ages(),
            dl.periods()
        )));
    }
    if long.values.columns(0, ds.periods()) != short.values {
        return Err(Error::Input("window mismatch: long surface does not extend the short one".into()));
    }
    let fs = fit_lee_carter_stage1(short)?;
    let fl = fit_lee_carter_stage1(long)?;
    let max_kappa_change = fs
        .kappa_hat
        .iter()
        .zip(&fl.kappa_hat)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let max_beta_change = fs
        .beta_hat
        .iter()
        .zip(&fl.beta_hat)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut path = fs.kappa_hat.clone();
    let short_window_sum: f64 = path.iter().sum();
    let mut forced_next = Vec::with_capacity(DYNAMIC_HORIZON);
    for _ in 0..DYNAMIC_HORIZON {
        let s: f64 = path.iter().sum();
        let next = 0.0 - s;
        forced_next.push(next);
        path.push(next);
    }
    Ok(DynamicReport {
        periods: ds.periods(),
        kappa_short: fs.kappa_hat,
        kappa_long: fl.kappa_hat,
        max_kappa_change,
        max_beta_change,
        short_window_sum,
        forced_all_zero: forced_next.iter().all(|v| *v == 0.0),
        forced_next,
    })
}
