//! Seeded simulation of latent paths and mortality surfaces, and Monte Carlo
//! sample moments.
//!
//! Randomness comes from ChaCha8 with a 64-bit seed and a 64-bit stream id,
//! so every replicate owns an independent substream and results do not depend
//! on thread scheduling.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::MomentGrid;
use crate::params::{
    ApcRwParams, InitialConditions, ModelParams, PanelDims, DEFAULT_COEF_GUARD,
};

/// Seed plus stream selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
    pub stream: u64,
}

impl RngSpec {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngSpec { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Spec for replicate `i` below this one. Streams of different bases do
    /// not collide for fewer than 2^32 replicates.
    pub fn replicate(&self, i: u64) -> RngSpec {
        RngSpec { seed: self.seed, stream: (self.stream << 32) | (i & 0xffff_ffff) }
    }
}

/// Law of the innovations and measurement errors, always scaled to unit
/// variance before multiplying by the standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum InnovationLaw {
    #[default]
    Gaussian,
    Uniform,
    StudentT { df: f64 },
}

impl InnovationLaw {
    pub fn check(&self) -> Result<()> {
        if let InnovationLaw::StudentT { df } = self {
            if !(*df > 4.0) {
                return Err(Error::InvalidParams(format!(
                    "Student-t innovations need df > 4 for finite fourth moments, got {df}"
                )));
            }
        }
        Ok(())
    }

    /// One unit-variance draw.
    pub fn draw_unit(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            InnovationLaw::Gaussian => StandardNormal.sample(rng),
            InnovationLaw::Uniform => {
                let half = 3f64.sqrt();
                Uniform::new(-half, half).expect("valid bounds").sample(rng)
            }
            InnovationLaw::StudentT { df } => {
                let t: f64 = StudentT::new(df).expect("df checked").sample(rng);
                t / (df / (df - 2.0)).sqrt()
            }
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng, sd: f64) -> f64 {
        sd * self.draw_unit(rng)
    }
}

/// Knobs shared by the simulators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub law: InnovationLaw,
    /// Largest |rho| or |phi| accepted.
    pub coef_guard: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { law: InnovationLaw::Gaussian, coef_guard: DEFAULT_COEF_GUARD }
    }
}

fn check_guard(name: &str, v: f64, guard: f64) -> Result<()> {
    if !(v.abs() < guard) {
        return Err(Error::InvalidParams(format!(
            "|{name}|={} outside the simulation guard band |{name}| < {guard}",
            v.abs()
        )));
    }
    Ok(())
}

/// `kappa_t = c + mu t + sum_{l<=t} e_l`, `t = 1..=T`.
pub fn simulate_kappa_rw(
    mu: f64,
    sigma2_e: f64,
    c: f64,
    periods: usize,
    law: InnovationLaw,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let sd = sigma2_e.sqrt();
    let mut level = 0.0;
    (1..=periods)
        .map(|t| {
            level += law.draw(rng, sd);
            c + mu * t as f64 + level
        })
        .collect()
}

/// ARIMA(1,1,0) levels with the AR(1) differences started from their
/// stationary law, which reproduces the infinite moving-average history.
pub fn simulate_kappa_arima110(
    mu: f64,
    rho: f64,
    sigma2_e: f64,
    c: f64,
    periods: usize,
    opts: &SimOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_guard("rho", rho, opts.coef_guard)?;
    let sd = sigma2_e.sqrt();
    let mut u = opts.law.draw(rng, (sigma2_e / (1.0 - rho * rho)).sqrt());
    let mut level = 0.0;
    Ok((1..=periods)
        .map(|t| {
            u = rho * u + opts.law.draw(rng, sd);
            level += u;
            c + mu * t as f64 + level
        })
        .collect())
}

/// ARIMA(0,1,1) levels: `kappa_t = c + mu t + sum_{s<=t} (e_s + phi e_{s-1})`.
pub fn simulate_kappa_arima011(
    mu: f64,
    phi: f64,
    sigma2_e: f64,
    c: f64,
    periods: usize,
    opts: &SimOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_guard("phi", phi, opts.coef_guard)?;
    let sd = sigma2_e.sqrt();
    let mut prev = opts.law.draw(rng, sd);
    let mut level = 0.0;
    Ok((1..=periods)
        .map(|t| {
            let e = opts.law.draw(rng, sd);
            level += e + phi * prev;
            prev = e;
            c + mu * t as f64 + level
        })
        .collect())
}

/// Period and cohort factor paths of the cohort model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortPaths {
    /// `kappa_1..kappa_T`.
    pub kappa: Vec<f64>,
    /// `iota_h` for `h = 1-X..=T`, position `h + X - 1`.
    pub iota: Vec<f64>,
}

impl CohortPaths {
    pub fn iota_at(&self, h: i64, max_age: usize) -> f64 {
        self.iota[(h + max_age as i64 - 1) as usize]
    }
}

/// Two independent random walks: the period factor from `c1` and the cohort
/// factor from `iota_{-X} = c0`, the latter generated along cohort index.
pub fn simulate_cohort_paths(
    p: &ApcRwParams,
    init: &InitialConditions,
    dims: &PanelDims,
    law: InnovationLaw,
    rng: &mut ChaCha8Rng,
) -> CohortPaths {
    let kappa = simulate_kappa_rw(p.mu1, p.sigma2_e1, init.c1, dims.periods(), law, rng);
    // iota_{h} with j = h + X steps from iota_{-X}
    let iota = simulate_kappa_rw(p.mu0, p.sigma2_e0, init.c0, dims.periods() + dims.max_age(), law, rng);
    CohortPaths { kappa, iota }
}

/// A panel of log central death rates, ages in rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub dims: PanelDims,
    pub values: DMatrix<f64>,
}

impl Surface {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Input("empty surface".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("surface has non-finite entries".into()));
        }
        let dims = PanelDims::new(values.nrows() - 1, values.ncols())?;
        Ok(Surface { dims, values })
    }

    pub fn get(&self, x: usize, t: usize) -> f64 {
        self.values[(x, t - 1)]
    }

    /// Flattened in [`PanelDims::index`] order.
    pub fn flatten(&self) -> DVector<f64> {
        let d = self.dims;
        DVector::from_fn(d.n_cells(), |k, _| self.values[(k / d.periods(), k % d.periods())])
    }

    /// Tab-separated: header `age` then years `1..T`, one row per age.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().delimiter(b'\t').from_writer(w);
        let mut header = vec!["age".to_string()];
        header.extend((1..=self.dims.periods()).map(|t| t.to_string()));
        wr.write_record(&header)?;
        for x in 0..self.dims.n_ages() {
            let mut row = vec![x.to_string()];
            row.extend(self.values.row(x).iter().map(|v| format!("{v:.16e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the tab-separated layout written by [`Surface::write_csv`];
    /// comma-separated input is accepted too.
    pub fn read_csv<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let first = text.lines().next().unwrap_or("");
        let delim = if first.contains('\t') { b'\t' } else { b',' };
        let mut rd = csv::ReaderBuilder::new()
            .delimiter(delim)
            .has_headers(true)
            .from_reader(text.as_bytes());
        let n_years = rd.headers()?.len().saturating_sub(1);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != n_years + 1 {
                return Err(Error::Input(format!("row {i} has {} fields, expected {}", rec.len(), n_years + 1)));
            }
            let age: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("row {i}: bad age `{}`", &rec[0])))?;
            if age != i {
                return Err(Error::Input(format!("row {i}: ages must run 0..X in order, got {age}")));
            }
            let vals = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Input(format!("row {i}: bad value `{f}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(vals);
        }
        if rows.is_empty() || n_years == 0 {
            return Err(Error::Input("surface file has no data".into()));
        }
        Surface::new(DMatrix::from_fn(rows.len(), n_years, |i, j| rows[i][j]))
    }
}

/// One draw of the whole panel. The latent path is shared by all ages.
pub fn simulate_surface(
    params: &ModelParams,
    init: &InitialConditions,
    dims: &PanelDims,
    opts: &SimOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Surface> {
    params.check_dims(dims)?;
    opts.law.check()?;
    let (na, tp) = (dims.n_ages(), dims.periods());
    let mut values = DMatrix::zeros(na, tp);
    match params {
        ModelParams::ApcRw(p) => {
            let paths = simulate_cohort_paths(p, init, dims, opts.law, rng);
            let sd = p.sigma2_eps.sqrt();
            for x in 0..na {
                for t in 1..=tp {
                    let iota = paths.iota_at(t as i64 - x as i64, dims.max_age());
                    values[(x, t - 1)] = p.alpha[x]
                        + p.beta0[x] * iota
                        + p.beta1[x] * paths.kappa[t - 1]
                        + opts.law.draw(rng, sd);
                }
            }
        }
        _ => {
            let (alpha, beta, s2eps, kappa) = match params {
                ModelParams::ApRw(p) => (
                    &p.alpha,
                    &p.beta,
                    p.sigma2_eps,
                    simulate_kappa_rw(p.mu, p.sigma2_e, init.c, tp, opts.law, rng),
                ),
                ModelParams::ApArima110(p) => (
                    &p.alpha,
                    &p.beta,
                    p.sigma2_eps,
                    simulate_kappa_arima110(p.mu, p.rho, p.sigma2_e, init.c, tp, opts, rng)?,
                ),
                ModelParams::ApArima011(p) => (
                    &p.alpha,
                    &p.beta,
                    p.sigma2_eps,
                    simulate_kappa_arima011(p.mu, p.phi, p.sigma2_e, init.c, tp, opts, rng)?,
                ),
                ModelParams::ApcRw(_) => unreachable!(),
            };
            let sd = s2eps.sqrt();
            for x in 0..na {
                for t in 1..=tp {
                    values[(x, t - 1)] = alpha[x] + beta[x] * kappa[t - 1] + opts.law.draw(rng, sd);
                }
            }
        }
    }
    Surface::new(values)
}

/// Monte Carlo sample moments with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct McMoments {
    pub dims: PanelDims,
    pub mean_hat: DMatrix<f64>,
    /// Unbiased sample covariance over flattened cells.
    pub cov_hat: DMatrix<f64>,
    pub n_reps: usize,
    pub se_mean: DMatrix<f64>,
    /// Normal-theory standard errors `sqrt((c_ii c_jj + c_ij^2) / n)`.
    pub se_cov: DMatrix<f64>,
}

/// Sample moments over `n_reps` independent surfaces, replicate `i` drawing
/// from `rng.replicate(i)`.
pub fn mc_moments(
    params: &ModelParams,
    init: &InitialConditions,
    dims: &PanelDims,
    n_reps: usize,
    rng: RngSpec,
    opts: &SimOptions,
) -> Result<McMoments> {
    if n_reps < 100 {
        return Err(Error::InvalidParams(format!("need at least 100 replicates, got {n_reps}")));
    }
    params.check_dims(dims)?;
    let draws: Vec<DVector<f64>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.replicate(i).rng();
            simulate_surface(params, init, dims, opts, &mut r).map(|s| s.flatten())
        })
        .collect::<Result<_>>()?;
    let n = dims.n_cells();
    let nf = n_reps as f64;
    let mut mean = DVector::zeros(n);
    for d in &draws {
        mean += d;
    }
    mean /= nf;
    // centered cross-products, chunked for a deterministic reduction order
    let chunk = 256;
    let partials: Vec<DMatrix<f64>> = draws
        .par_chunks(chunk)
        .map(|ch| {
            let mut acc = DMatrix::zeros(n, n);
            for d in ch {
                let c = d - &mean;
                acc.ger(1.0, &c, &c, 1.0);
            }
            acc
        })
        .collect();
    let mut cov = DMatrix::zeros(n, n);
    for p in partials {
        cov += p;
    }
    cov /= nf - 1.0;
    let se_mean_flat = DVector::from_fn(n, |k, _| (cov[(k, k)] / nf).sqrt());
    let se_cov = DMatrix::from_fn(n, n, |i, j| {
        ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)] * cov[(i, j)]) / nf).sqrt()
    });
    let unflat = |v: &DVector<f64>| DMatrix::from_fn(dims.n_ages(), dims.periods(), |x, t| v[dims.index(x, t + 1)]);
    Ok(McMoments {
        dims: *dims,
        mean_hat: unflat(&mean),
        cov_hat: cov,
        n_reps,
        se_mean: unflat(&se_mean_flat),
        se_cov,
    })
}

/// Agreement between Monte Carlo moments and an exact grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McComparison {
    pub n_reps: usize,
    pub z_threshold: f64,
    pub mean_entries: usize,
    pub mean_within: usize,
    pub mean_fraction_within: f64,
    pub cov_entries: usize,
    pub cov_within: usize,
    pub cov_fraction_within: f64,
    pub max_abs_z_mean: f64,
    pub max_abs_z_cov: f64,
}

/// Counts entries within `z` standard errors of the exact moments. The
/// covariance count runs over the upper triangle including the diagonal.
pub fn compare_mc(mc: &McMoments, grid: &MomentGrid, z: f64) -> Result<McComparison> {
    if mc.dims != grid.dims {
        return Err(Error::Input("Monte Carlo and exact grids differ in dims".into()));
    }
    let zscore = |est: f64, exact: f64, se: f64| {
        if se > 0.0 {
            ((est - exact) / se).abs()
        } else if est == exact {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let (mut mw, mut mz) = (0, 0.0f64);
    for x in 0..grid.dims.n_ages() {
        for t in 0..grid.dims.periods() {
            let zz = zscore(mc.mean_hat[(x, t)], grid.means[(x, t)], mc.se_mean[(x, t)]);
            mz = mz.max(zz);
            if zz <= z {
                mw += 1;
            }
        }
    }
    let n = grid.dims.n_cells();
    let (mut cw, mut cz, mut cn) = (0, 0.0f64, 0);
    for i in 0..n {
        for j in i..n {
            let zz = zscore(mc.cov_hat[(i, j)], grid.covs[(i, j)], mc.se_cov[(i, j)]);
            cz = cz.max(zz);
            cn += 1;
            if zz <= z {
                cw += 1;
            }
        }
    }
    let me = grid.dims.n_cells();
    Ok(McComparison {
        n_reps: mc.n_reps,
        z_threshold: z,
        mean_entries: me,
        mean_within: mw,
        mean_fraction_within: mw as f64 / me as f64,
        cov_entries: cn,
        cov_within: cw,
        cov_fraction_within: cw as f64 / cn as f64,
        max_abs_z_mean: mz,
        max_abs_z_cov: cz,
    })
}
