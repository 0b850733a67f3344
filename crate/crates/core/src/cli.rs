//! Command line front end.
//!
//! Exit codes: 0 success, 1 input or validation error, 2 numerical
//! diagnostic (including failed acceptance criteria).

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::error::Error;
use crate::estimate::{demo_distributional_constraint, demo_dynamic_constraint, fit_lee_carter_stage1, fit_two_step, Stage2Model};
use crate::identify::{
    check_equivalence, counterexample_ap_means_mu0, counterexample_apc_equal_loadings, counterexample_apc_fullyparam,
    counterexample_apc_x0_variance_trade, recover, search_equivalent, validate_lenient, EquivalenceReport,
    EquivalenceTolerances, RecoveryOptions, SearchOptions, DEFAULT_DELTA, DEFAULT_EPSILON_M,
};
use crate::moments::{moment_grid, MomentGrid, MomentScope, SerialGrid};
use crate::params::{
    normalize_betas, raw_param_error, ApcRwParams, Family, FullyParametricApcParams, InitialConditions, ModelParams,
    PanelDims, ParamFile,
};
use crate::report::{to_json, Header, Report};
use crate::simulate::{compare_mc, mc_moments, simulate_surface, InnovationLaw, RngSpec, SimOptions, Surface};
use crate::theorems::{self, SuiteConfig};

const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Parser, Serialize)]
#[command(name = "lcid", version, about = "Plug-in Lee-Carter models: moments, simulation, fitting and identifiability checks")]
struct Cli {
    /// Master seed; defaults to $LCID_SEED, then to a fixed value.
    #[arg(long, env = "LCID_SEED", default_value_t = DEFAULT_SEED, global = true)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Leave the wall-clock timestamp and timings out of reports.
    #[arg(long, global = true)]
    no_timestamp: bool,
    /// Output file (default: standard output).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Exact mean and covariance grids of a parameter file.
    Moments(ParamArgs),
    /// Draw one surface of log rates.
    Simulate(SimulateArgs),
    /// Compare Monte Carlo moments with the exact grids.
    McValidate(McArgs),
    /// Two-step Lee-Carter fit of a surface.
    Fit(FitArgs),
    /// Demonstrations of the ad hoc zero-sum constraint.
    #[command(subcommand)]
    Demo(DemoCommand),
    /// Identifiability checks, counterexamples, recovery and search.
    #[command(subcommand)]
    Identify(IdentifyCommand),
    /// Run the verification suite and print a pass/fail table.
    Theorems(TheoremsArgs),
}

#[derive(Args, Serialize)]
struct ParamArgs {
    /// Parameter JSON file.
    #[arg(long)]
    params: PathBuf,
    #[command(flatten)]
    overrides: PanelOverrides,
}

#[derive(Args, Serialize, Default)]
struct PanelOverrides {
    /// Maximal age index.
    #[arg(long = "X")]
    max_age: Option<usize>,
    /// Number of periods.
    #[arg(long = "T")]
    periods: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    c: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    c0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    c1: Option<f64>,
}

#[derive(Args, Serialize)]
struct LawArgs {
    #[arg(long, value_enum, default_value_t = LawKind::Gaussian)]
    law: LawKind,
    /// Degrees of freedom of the Student-t law.
    #[arg(long, default_value_t = 5.0)]
    df: f64,
}

impl LawArgs {
    fn law(&self) -> InnovationLaw {
        match self.law {
            LawKind::Gaussian => InnovationLaw::Gaussian,
            LawKind::Uniform => InnovationLaw::Uniform,
            LawKind::StudentT => InnovationLaw::StudentT { df: self.df },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LawKind {
    Gaussian,
    Uniform,
    StudentT,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    law: LawArgs,
}

#[derive(Args, Serialize)]
struct McArgs {
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value_t = 10_000)]
    n_reps: usize,
    /// Standard-error band for the comparison.
    #[arg(long, default_value_t = 4.0)]
    z: f64,
    #[command(flatten)]
    law: LawArgs,
}

#[derive(Args, Serialize)]
struct FitArgs {
    /// Surface CSV (tab or comma separated).
    #[arg(long)]
    surface: PathBuf,
    /// Second-stage model: rw, arima110 or arima011. Omit for stage one only.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DemoCommand {
    /// How often a simulated random-walk window sums to zero.
    Distributional(DistributionalArgs),
    /// What the zero-sum constraint forces on the next periods.
    Dynamic(DynamicArgs),
}

#[derive(Args, Serialize)]
struct DistributionalArgs {
    #[arg(long, default_value_t = -0.2, allow_hyphen_values = true)]
    mu: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma2_e: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    c: f64,
    #[arg(long = "T", default_value_t = 20)]
    periods: usize,
    #[arg(long, default_value_t = 100_000)]
    n_reps: usize,
    /// Also write every simulated sum to this CSV file.
    #[arg(long)]
    sums_csv: Option<PathBuf>,
    #[command(flatten)]
    law: LawArgs,
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["surface", "params"])))]
struct DynamicArgs {
    /// Long-window surface; the short window drops its last period.
    #[arg(long)]
    surface: Option<PathBuf>,
    /// Parameter file used to simulate the long window.
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    overrides: PanelOverrides,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum IdentifyCommand {
    /// Compare the moments of two parameter files.
    Check(CheckArgs),
    /// Build an observationally equivalent pair.
    Counterexample(CounterexampleArgs),
    /// Invert exact moments back to parameters.
    Recover(RecoverArgs),
    /// Numerical search for a distinct parameter with the same moments.
    Search(SearchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScopeArg {
    Full,
    MeansOnly,
}

impl From<ScopeArg> for MomentScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Full => MomentScope::Full,
            ScopeArg::MeansOnly => MomentScope::MeansOnly,
        }
    }
}

#[derive(Args, Serialize)]
struct ToleranceArgs {
    /// Largest moment residual called equivalent.
    #[arg(long, default_value_t = DEFAULT_EPSILON_M)]
    epsilon_m: f64,
    /// Smallest parameter distance called distinct.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
}

#[derive(Args, Serialize)]
struct CheckArgs {
    #[command(flatten)]
    params: ParamArgs,
    /// Second parameter file; its panel and start values are ignored.
    #[arg(long)]
    against: PathBuf,
    #[arg(long, value_enum, default_value_t = ScopeArg::Full)]
    scope: ScopeArg,
    #[command(flatten)]
    tol: ToleranceArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum CounterexampleKind {
    /// Zero drift: mean grids coincide for different loadings.
    ApMu0,
    /// Fully parametric cohort model with two parameterisations.
    ApcExample1,
    /// Cohort model with equal loadings: drifts swap.
    ApcEqualLoadings,
    /// Cohort model with a single age: variances trade.
    ApcX0Trade,
}

#[derive(Args, Serialize)]
struct CounterexampleArgs {
    #[arg(value_enum)]
    kind: CounterexampleKind,
    /// Base parameters (cohort kinds only).
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    overrides: PanelOverrides,
    /// Amount moved between the variances.
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    z: f64,
    #[command(flatten)]
    tol: ToleranceArgs,
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["params", "grid"])))]
struct RecoverArgs {
    /// Parameter file; its exact grid is inverted and compared with it.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Moment grid JSON, bare or as written by `moments`.
    #[arg(long, requires = "model")]
    grid: Option<PathBuf>,
    /// Family of the grid: ap-rw, ap-arima110, ap-arima011, apc-rw.
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    overrides: PanelOverrides,
    /// Least squares over all moments instead of exact differencing.
    #[arg(long)]
    noisy: bool,
    #[arg(long, default_value_t = 1e-10)]
    zero_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    consistency_tol: f64,
}

#[derive(Args, Serialize)]
struct SearchArgs {
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON_M)]
    epsilon_m: f64,
    /// Best residuals above this mean no equivalent was found.
    #[arg(long, default_value_t = 1e-6)]
    report_threshold: f64,
    #[arg(long, default_value_t = 32)]
    n_starts: usize,
    #[arg(long, default_value_t = 50_000)]
    max_evals: usize,
    /// Admit equal cohort and period loadings.
    #[arg(long)]
    lift: bool,
    #[arg(long, value_enum, default_value_t = ScopeArg::Full)]
    scope: ScopeArg,
}

#[derive(Args, Serialize)]
struct TheoremsArgs {
    /// Smaller sample sizes.
    #[arg(long)]
    quick: bool,
    /// Run only these criteria (1-9).
    #[arg(long = "criterion")]
    criteria: Vec<u8>,
}

/// Runs the tool on `argv` (program name first) with the process streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut io::stdout(), &mut io::stderr())
}

/// Like [`run`] with both streams discarded; artifacts still go to `--out`.
pub fn run_quiet<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut io::sink(), &mut io::sink())
}

pub fn run_with<I, T>(argv: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: thread pool: {e}");
            return 1;
        }
    };
    let threads = pool.current_num_threads();
    let mut ctx = Ctx { cli: &cli, threads, stdout, stderr };
    match pool.install(|| dispatch(&mut ctx)) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(ctx.stderr, "error: {e:#}");
            e.downcast_ref::<Error>().map(Error::exit_code).unwrap_or(1)
        }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    threads: usize,
    stdout: &'a mut (dyn Write + Send),
    stderr: &'a mut (dyn Write + Send),
}

type CmdResult = anyhow::Result<i32>;

impl Ctx<'_> {
    fn format(&self, default: Format) -> Format {
        self.cli.format.unwrap_or(default)
    }

    fn header(&self, command: &str) -> anyhow::Result<Header> {
        let config = serde_json::to_value(self.cli)?;
        Ok(Header::new(command, self.cli.seed, self.threads, config, !self.cli.no_timestamp))
    }

    fn write_bytes(&mut self, bytes: &[u8]) -> anyhow::Result<()> {
        match &self.cli.out {
            Some(path) => std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?,
            None => self.stdout.write_all(bytes)?,
        }
        Ok(())
    }

    fn emit_json<T: Serialize>(&mut self, command: &str, result: &T) -> anyhow::Result<()> {
        let header = self.header(command)?;
        let text = to_json(&Report { header: &header, result })?;
        self.write_bytes(text.as_bytes())
    }

    fn emit_csv(&mut self, f: impl FnOnce(&mut Vec<u8>) -> crate::Result<()>) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write_bytes(&buf)
    }

    fn rng(&self, stream: u64) -> RngSpec {
        RngSpec::new(self.cli.seed, stream)
    }
}

fn dispatch(ctx: &mut Ctx<'_>) -> CmdResult {
    match &ctx.cli.command {
        Command::Moments(a) => cmd_moments(ctx, a),
        Command::Simulate(a) => cmd_simulate(ctx, a),
        Command::McValidate(a) => cmd_mc_validate(ctx, a),
        Command::Fit(a) => cmd_fit(ctx, a),
        Command::Demo(DemoCommand::Distributional(a)) => cmd_demo_distributional(ctx, a),
        Command::Demo(DemoCommand::Dynamic(a)) => cmd_demo_dynamic(ctx, a),
        Command::Identify(IdentifyCommand::Check(a)) => cmd_check(ctx, a),
        Command::Identify(IdentifyCommand::Counterexample(a)) => cmd_counterexample(ctx, a),
        Command::Identify(IdentifyCommand::Recover(a)) => cmd_recover(ctx, a),
        Command::Identify(IdentifyCommand::Search(a)) => cmd_search(ctx, a),
        Command::Theorems(a) => cmd_theorems(ctx, a),
    }
}

fn json_only(ctx: &Ctx<'_>, command: &str) -> anyhow::Result<()> {
    if ctx.format(Format::Json) == Format::Csv {
        return Err(Error::Input(format!("`{command}` writes JSON only")).into());
    }
    Ok(())
}

/// Parameters, panel and start values after applying the overrides.
struct Loaded {
    params: ModelParams,
    dims: PanelDims,
    init: InitialConditions,
}

fn apply_overrides(dims: PanelDims, init: InitialConditions, o: &PanelOverrides) -> crate::Result<(PanelDims, InitialConditions)> {
    let dims = PanelDims::new(o.max_age.unwrap_or(dims.max_age()), o.periods.unwrap_or(dims.periods()))?;
    let init = InitialConditions::new(o.c.unwrap_or(init.c), o.c0.unwrap_or(init.c0), o.c1.unwrap_or(init.c1))?;
    Ok((dims, init))
}

/// Reads a parameter file. `lenient` admits cohort models with equal
/// loadings.
fn load_params(path: &Path, o: &PanelOverrides, lenient: bool) -> anyhow::Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ParamFile = serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))?;
    let verdict = if lenient { validate_lenient(&file.params) } else { file.params.validate() };
    if !verdict.is_ok() {
        return Err(Error::InvalidParams(verdict.to_string())).with_context(|| format!("validating {}", path.display()));
    }
    let (dims, init) = apply_overrides(file.dims, file.init, o)?;
    file.params.check_dims(&dims)?;
    Ok(Loaded { params: file.params, dims, init })
}

fn read_surface(path: &Path) -> anyhow::Result<Surface> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Surface::read_csv(BufReader::new(f))
        .map_err(|e| match e {
            Error::Csv(_) | Error::Io(_) => Error::Input(e.to_string()),
            other => other,
        })
        .with_context(|| format!("reading surface {}", path.display()))
}

fn write_moments_csv(grid: &MomentGrid, w: &mut Vec<u8>) -> crate::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x", "y", "s", "t", "value"])?;
    for (x, y, s, t, v) in grid.long_cov_rows() {
        wr.write_record([x.to_string(), y.to_string(), s.to_string(), t.to_string(), format!("{v:.16e}")])?;
    }
    wr.flush()?;
    Ok(())
}

fn write_means_csv(grid: &MomentGrid, w: &mut Vec<u8>) -> crate::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x", "t", "value"])?;
    for x in 0..grid.dims.n_ages() {
        for t in 1..=grid.dims.periods() {
            wr.write_record([x.to_string(), t.to_string(), format!("{:.16e}", grid.mean(x, t))])?;
        }
    }
    wr.flush()?;
    Ok(())
}

fn cmd_moments(ctx: &mut Ctx<'_>, a: &ParamArgs) -> CmdResult {
    let l = load_params(&a.params, &a.overrides, true)?;
    let grid = moment_grid(&l.params, &l.init, &l.dims)?;
    match ctx.format(Format::Json) {
        Format::Json => ctx.emit_json("moments", &grid.to_serial())?,
        Format::Csv => {
            let Some(out) = ctx.cli.out.clone() else {
                return Err(Error::Input("CSV moments need --out (means go to <out>.means.csv)".into()).into());
            };
            ctx.emit_csv(|w| write_moments_csv(&grid, w))?;
            let mut means = Vec::new();
            write_means_csv(&grid, &mut means)?;
            let mut path = out.into_os_string();
            path.push(".means.csv");
            std::fs::write(&path, means)?;
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct SurfaceReport<'a> {
    dims: PanelDims,
    rng: RngSpec,
    values: &'a [Vec<f64>],
}

fn cmd_simulate(ctx: &mut Ctx<'_>, a: &SimulateArgs) -> CmdResult {
    let l = load_params(&a.params.params, &a.params.overrides, true)?;
    let opts = SimOptions { law: a.law.law(), ..Default::default() };
    let spec = ctx.rng(0);
    let surface = simulate_surface(&l.params, &l.init, &l.dims, &opts, &mut spec.rng())?;
    match ctx.format(Format::Csv) {
        Format::Csv => ctx.emit_csv(|w| surface.write_csv(w))?,
        Format::Json => {
            let rows: Vec<Vec<f64>> = surface.values.row_iter().map(|r| r.iter().copied().collect()).collect();
            ctx.emit_json("simulate", &SurfaceReport { dims: surface.dims, rng: spec, values: &rows })?
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct McReport {
    rng: RngSpec,
    comparison: crate::simulate::McComparison,
    mean_target_fraction: f64,
    cov_target_fraction: f64,
    passed: bool,
}

fn cmd_mc_validate(ctx: &mut Ctx<'_>, a: &McArgs) -> CmdResult {
    json_only(ctx, "mc-validate")?;
    let l = load_params(&a.params.params, &a.params.overrides, true)?;
    let opts = SimOptions { law: a.law.law(), ..Default::default() };
    let spec = ctx.rng(0);
    let mc = mc_moments(&l.params, &l.init, &l.dims, a.n_reps, spec, &opts)?;
    let comparison = compare_mc(&mc, &moment_grid(&l.params, &l.init, &l.dims)?, a.z)?;
    let passed = comparison.mean_fraction_within >= 0.99 && comparison.cov_fraction_within >= 0.98;
    let report = McReport { rng: spec, comparison, mean_target_fraction: 0.99, cov_target_fraction: 0.98, passed };
    ctx.emit_json("mc-validate", &report)?;
    Ok(0)
}

fn cmd_fit(ctx: &mut Ctx<'_>, a: &FitArgs) -> CmdResult {
    let surface = read_surface(&a.surface)?;
    let fit = match &a.model {
        Some(m) => fit_two_step(&surface, m.parse::<Stage2Model>()?)?,
        None => fit_lee_carter_stage1(&surface)?,
    };
    match ctx.format(Format::Json) {
        Format::Json => ctx.emit_json("fit", &fit)?,
        Format::Csv => ctx.emit_csv(|w| {
            let mut wr = csv::Writer::from_writer(w);
            wr.write_record(["series", "index", "value"])?;
            let series = [("alpha", &fit.alpha_hat, 0), ("beta", &fit.beta_hat, 0), ("kappa", &fit.kappa_hat, 1)];
            for (name, values, base) in series {
                for (i, v) in values.iter().enumerate() {
                    wr.write_record([name.to_string(), (i + base).to_string(), format!("{v:.16e}")])?;
                }
            }
            wr.flush()?;
            Ok(())
        })?,
    }
    Ok(0)
}

fn cmd_demo_distributional(ctx: &mut Ctx<'_>, a: &DistributionalArgs) -> CmdResult {
    let spec = ctx.rng(0);
    let rep = demo_distributional_constraint(a.mu, a.sigma2_e, a.c, a.periods, a.n_reps, spec, a.law.law())?;
    if let Some(path) = &a.sums_csv {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        rep.write_csv(BufWriter::new(f))?;
    }
    match ctx.format(Format::Json) {
        Format::Json => ctx.emit_json("demo distributional", &rep)?,
        Format::Csv => ctx.emit_csv(|w| rep.write_csv(w))?,
    }
    Ok(0)
}

fn cmd_demo_dynamic(ctx: &mut Ctx<'_>, a: &DynamicArgs) -> CmdResult {
    json_only(ctx, "demo dynamic")?;
    let long = match (&a.surface, &a.params) {
        (Some(s), _) => read_surface(s)?,
        (None, Some(p)) => {
            let l = load_params(p, &a.overrides, true)?;
            simulate_surface(&l.params, &l.init, &l.dims, &SimOptions::default(), &mut ctx.rng(0).rng())?
        }
        (None, None) => bail!(Error::Input("give --surface or --params".into())),
    };
    let short = theorems::drop_last_period(&long)?;
    let rep = demo_dynamic_constraint(&short, &long)?;
    ctx.emit_json("demo dynamic", &rep)?;
    Ok(0)
}

fn cmd_check(ctx: &mut Ctx<'_>, a: &CheckArgs) -> CmdResult {
    json_only(ctx, "identify check")?;
    let l = load_params(&a.params.params, &a.params.overrides, true)?;
    let b = load_params(&a.against, &PanelOverrides::default(), true)?;
    let tol = EquivalenceTolerances { epsilon_m: a.tol.epsilon_m, delta: a.tol.delta };
    let rep = check_equivalence(&l.params, &b.params, &l.init, &l.dims, a.scope.into(), &tol)?;
    ctx.emit_json("identify check", &rep)?;
    Ok(0)
}

#[derive(Serialize)]
struct MeansCounterexample {
    means: EquivalenceReport,
    full: EquivalenceReport,
}

#[derive(Serialize)]
struct FullyParametricCounterexample {
    theta_a: FullyParametricApcParams,
    theta_b: FullyParametricApcParams,
    predictor_residual: f64,
    product_residual: f64,
    param_distance: f64,
    distinct: bool,
}

fn grid_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

fn default_cohort_base(n: usize) -> crate::Result<ApcRwParams> {
    let w: Vec<f64> = (1..=n).map(|k| k as f64).collect();
    let beta = normalize_betas(&w)?;
    Ok(ApcRwParams {
        alpha: (0..n).map(|x| -3.0 + 0.5 * x as f64).collect(),
        beta0: beta.clone(),
        beta1: beta,
        mu0: 0.3,
        mu1: -0.1,
        sigma2_e0: 1.0,
        sigma2_e1: 2.0,
        sigma2_eps: 0.1,
    })
}

fn cohort_base(a: &CounterexampleArgs, default_x: usize, default_t: usize) -> anyhow::Result<(ApcRwParams, PanelDims, InitialConditions)> {
    match &a.params {
        Some(path) => {
            let l = load_params(path, &a.overrides, true)?;
            match l.params {
                ModelParams::ApcRw(p) => Ok((p, l.dims, l.init)),
                other => Err(Error::FamilyMismatch(format!("expected apc_rw parameters, got {}", other.family())).into()),
            }
        }
        None => {
            let start = PanelDims::new(default_x, default_t)?;
            let (dims, init) = apply_overrides(start, InitialConditions { c: 0.0, c0: 0.4, c1: -0.2 }, &a.overrides)?;
            Ok((default_cohort_base(dims.n_ages())?, dims, init))
        }
    }
}

fn cmd_counterexample(ctx: &mut Ctx<'_>, a: &CounterexampleArgs) -> CmdResult {
    json_only(ctx, "identify counterexample")?;
    let tol = EquivalenceTolerances { epsilon_m: a.tol.epsilon_m, delta: a.tol.delta };
    let o = &a.overrides;
    match a.kind {
        CounterexampleKind::ApMu0 => {
            let dims = PanelDims::new(o.max_age.unwrap_or(1), o.periods.unwrap_or(6))?;
            let n = dims.n_ages();
            let beta = normalize_betas(&(1..=n).map(|k| k as f64).collect::<Vec<_>>())?;
            let beta_tilde: Vec<f64> = beta.iter().rev().copied().collect();
            let alpha: Vec<f64> = (0..n).map(|x| -(x as f64 + 2.0)).collect();
            let c = o.c.unwrap_or(2.0);
            let (p, q) = counterexample_ap_means_mu0(&alpha, &beta, &beta_tilde, c, 1.0, 0.1)?;
            let init = InitialConditions { c, ..Default::default() };
            let (p, q): (ModelParams, ModelParams) = (p.into(), q.into());
            let means = check_equivalence(&p, &q, &init, &dims, MomentScope::MeansOnly, &tol)?;
            let full = check_equivalence(&p, &q, &init, &dims, MomentScope::Full, &tol)?;
            ctx.emit_json("identify counterexample ap-mu0", &MeansCounterexample { means, full })?;
        }
        CounterexampleKind::ApcExample1 => {
            let (p, q) = counterexample_apc_fullyparam(o.max_age.unwrap_or(3), o.periods.unwrap_or(5))?;
            let predictor_residual = grid_gap(&p.predictor_grid()?, &q.predictor_grid()?);
            let product_residual = grid_gap(&p.cohort_product_grid()?, &q.cohort_product_grid()?);
            let param_distance = crate::numeric::max_abs_diff(&p.beta0, &q.beta0)
                .max(crate::numeric::max_abs_diff(&p.iota, &q.iota));
            let rep = FullyParametricCounterexample {
                theta_a: p,
                theta_b: q,
                predictor_residual,
                product_residual,
                param_distance,
                distinct: param_distance >= tol.delta,
            };
            ctx.emit_json("identify counterexample apc-example1", &rep)?;
        }
        CounterexampleKind::ApcEqualLoadings => {
            let (base, dims, init) = cohort_base(a, 2, 8)?;
            let (p, q) = counterexample_apc_equal_loadings(&base)?;
            let rep = check_equivalence(&p.into(), &q.into(), &init, &dims, MomentScope::Full, &tol)?;
            ctx.emit_json("identify counterexample apc-equal-loadings", &rep)?;
        }
        CounterexampleKind::ApcX0Trade => {
            let (base, dims, init) = cohort_base(a, 0, 8)?;
            let (p, q) = counterexample_apc_x0_variance_trade(&base, a.z)?;
            let rep = check_equivalence(&p.into(), &q.into(), &init, &dims, MomentScope::Full, &tol)?;
            ctx.emit_json("identify counterexample apc-x0-trade", &rep)?;
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct RecoverReport {
    family: Family,
    result: crate::identify::RecoveryResult,
    /// Largest error against the input parameters, when they are known.
    param_error: Option<f64>,
}

/// Accepts a bare grid or a report whose `result` is a grid.
fn read_grid(path: &Path) -> anyhow::Result<SerialGrid> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).map_err(Error::from)?;
    let inner = match v.get("result") {
        Some(r) => r.clone(),
        None => v,
    };
    serde_json::from_value(inner).map_err(Error::from).with_context(|| format!("parsing grid {}", path.display()))
}

fn cmd_recover(ctx: &mut Ctx<'_>, a: &RecoverArgs) -> CmdResult {
    json_only(ctx, "identify recover")?;
    let opts = RecoveryOptions { noisy: a.noisy, zero_tol: a.zero_tol, consistency_tol: a.consistency_tol };
    let (family, grid, init, truth) = match (&a.params, &a.grid) {
        (Some(p), _) => {
            let l = load_params(p, &a.overrides, true)?;
            let grid = moment_grid(&l.params, &l.init, &l.dims)?;
            (l.params.family(), grid, l.init, Some(l.params))
        }
        (None, Some(g)) => {
            let model = a.model.as_deref().ok_or_else(|| anyhow!(Error::Input("--grid needs --model".into())))?;
            let family: Family = model.parse()?;
            let grid = MomentGrid::from_serial(&read_grid(g)?)?;
            let (_, init) = apply_overrides(grid.dims, InitialConditions::default(), &a.overrides)?;
            (family, grid, init, None)
        }
        (None, None) => bail!(Error::Input("give --params or --grid".into())),
    };
    let result = recover(family, &grid, &init, &opts)?;
    let param_error = truth.map(|t| raw_param_error(&t, &result.theta_hat)).transpose()?;
    ctx.emit_json("identify recover", &RecoverReport { family, result, param_error })?;
    Ok(0)
}

fn cmd_search(ctx: &mut Ctx<'_>, a: &SearchArgs) -> CmdResult {
    json_only(ctx, "identify search")?;
    let l = load_params(&a.params.params, &a.params.overrides, a.lift)?;
    let opts = SearchOptions {
        delta: a.delta,
        epsilon_m: a.epsilon_m,
        report_threshold: a.report_threshold,
        n_starts: a.n_starts,
        max_evals: a.max_evals,
        lift_distinct_loadings: a.lift,
        scope: a.scope.into(),
    };
    let rep = search_equivalent(&l.params, &l.init, &l.dims, &opts, ctx.rng(0))?;
    ctx.emit_json("identify search", &rep)?;
    Ok(0)
}

fn cmd_theorems(ctx: &mut Ctx<'_>, a: &TheoremsArgs) -> CmdResult {
    json_only(ctx, "theorems")?;
    let cfg = if a.quick { SuiteConfig::quick(ctx.cli.seed) } else { SuiteConfig::full(ctx.cli.seed) };
    let ids: Vec<u8> = if a.criteria.is_empty() { (1..=9).collect() } else { a.criteria.clone() };
    let mut outcomes = Vec::new();
    for id in ids {
        let Some(o) = theorems::run_criterion(id, &cfg) else {
            bail!(Error::Input(format!("no criterion {id}; choose 1-9")));
        };
        writeln!(ctx.stderr, "{}", o.line())?;
        outcomes.push(o);
    }
    let all_passed = outcomes.iter().all(|o| o.passed);
    let mut rows = serde_json::to_value(&outcomes)?;
    if ctx.cli.no_timestamp {
        if let Value::Array(items) = &mut rows {
            for item in items {
                if let Value::Object(m) = item {
                    m.remove("elapsed_secs");
                }
            }
        }
    }
    let result = serde_json::json!({ "config": cfg, "criteria": rows, "all_passed": all_passed });
    ctx.emit_json("theorems", &result)?;
    Ok(if all_passed { 0 } else { 2 })
}
