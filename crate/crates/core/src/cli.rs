//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{self, CvConfig, HeldoutConfig};
use crate::fit::{self, FitConfig, FittedModel, Mode, ModelKind, PosteriorMoments};
use crate::io::{self, LoadedParams, ParamsFile, Provenance};
use crate::likelihood::{ApmModel, GapmModel, LatentModel};
use crate::mala::MalaConfig;
use crate::marginal::{self, DEFAULT_DRAWS};
use crate::model::{ApmParams, Dataset, GapmParams, KnotGrid, QMatrix};
use crate::simgen::{self, SimModel, Truth};

#[derive(Debug, Parser)]
#[command(
    name = "gapm",
    version,
    about = "Partial-mastery cognitive diagnosis models"
)]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Simulate responses from a known model.
    Simulate(SimulateArgs),
    /// Fit a model to a response matrix.
    Fit(FitArgs),
    /// Marginal log-likelihood of data under fitted parameters.
    Marglik(MarglikArgs),
    /// Recovery metrics and held-out comparison.
    Eval(EvalArgs),
    /// Choose the number of attributes by cross-validation.
    Cv(CvArgs),
    /// Tabulate fitted item response functions on a grid.
    IrfGrid(IrfGridArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    Gapm,
    Apm,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MarglikMethod {
    /// Importance sampling around posterior moments.
    Is,
    /// Tensor Gauss-Hermite quadrature (K <= 3).
    Quad,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "gapm")]
    pub model: ModelArg,
    /// `builtin:Q3`, `builtin:Q5` or a CSV path.
    #[arg(long, default_value = "builtin:Q3")]
    pub q: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Equicorrelation of the latent Gaussian copula.
    #[arg(long, default_value_t = 0.7)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub responses: PathBuf,
    /// `builtin:Q3`, `builtin:Q5` or a CSV path.
    #[arg(long, conflicts_with = "exploratory")]
    pub q: Option<String>,
    /// Let every item load on every attribute; requires `--k`.
    #[arg(long, requires = "k")]
    pub exploratory: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value = "gapm")]
    pub model: ModelArg,
    /// Preset (`k1`, `k0`, `k2`, `ecpe`) or comma-separated interior knots.
    #[arg(long, default_value = "k1")]
    pub knots: String,
    #[arg(long, default_value_t = 20000)]
    pub iterations: u64,
    /// Defaults to half the iterations.
    #[arg(long)]
    pub burn_in: Option<u64>,
    /// Every step-size constant becomes this value divided by N.
    #[arg(long)]
    pub step_constant: Option<f64>,
    /// Fixed Langevin step size.
    #[arg(long)]
    pub mala_step: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Reload params.json, check every constraint and the byte-exact round trip.
    #[arg(long)]
    pub validate: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct HeldoutArgs {
    /// Importance draws per individual.
    #[arg(long, default_value_t = DEFAULT_DRAWS)]
    pub draws: usize,
    /// Langevin steps per individual for proposal moments.
    #[arg(long, default_value_t = 1000)]
    pub moment_iterations: u64,
    #[arg(long, default_value_t = 200)]
    pub moment_burn_in: u64,
}

impl HeldoutArgs {
    fn config(&self, seed: u64) -> HeldoutConfig {
        HeldoutConfig {
            moment_iterations: self.moment_iterations,
            moment_burn_in: self.moment_burn_in,
            draws: self.draws,
            seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MarglikArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    /// Posterior moments from `fit`; computed with frozen parameters if absent.
    #[arg(long)]
    pub moments: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "is")]
    pub method: MarglikMethod,
    /// Quadrature nodes per dimension.
    #[arg(long, default_value_t = 20)]
    pub nodes: usize,
    #[command(flatten)]
    pub heldout: HeldoutArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "marglik.json")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// truth.json from `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// scores.csv from `fit`; needs `--u`.
    #[arg(long, requires = "u")]
    pub scores: Option<PathBuf>,
    /// u_true.csv from `simulate`.
    #[arg(long)]
    pub u: Option<PathBuf>,
    /// Match estimated attributes to true ones before scoring.
    #[arg(long)]
    pub align: bool,
    #[arg(long, default_value_t = eval::DEFAULT_ISE_POINTS)]
    pub ise_points: usize,
    /// Parameters of the other model, for the held-out difference D.
    #[arg(long, requires = "test")]
    pub compare: Option<PathBuf>,
    /// Held-out responses.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[command(flatten)]
    pub heldout: HeldoutArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "metrics.json")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CvArgs {
    #[arg(long)]
    pub responses: PathBuf,
    /// Candidate attribute counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub candidates: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub splits: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value = "k1")]
    pub knots: String,
    #[arg(long, default_value_t = 2000)]
    pub iterations: u64,
    #[arg(long)]
    pub burn_in: Option<u64>,
    #[command(flatten)]
    pub heldout: HeldoutArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "cve.json")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IrfGridArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// Points per axis.
    #[arg(long, default_value_t = 41)]
    pub grid_res: usize,
    #[arg(long, default_value = "irf")]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            i32::from(e.exit_code())
        }
    }
}

/// Runs a parsed command, inside a dedicated pool when `--threads` is set.
pub fn execute(cli: &Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(Error::Config("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    let prov = |seed| Provenance::new(seed, cmd);
    match cmd {
        Command::Simulate(a) => simulate(a, &prov(a.seed)?),
        Command::Fit(a) => fit_cmd(a, &prov(a.seed)?),
        Command::Marglik(a) => marglik(a, &prov(a.seed)?),
        Command::Eval(a) => eval_cmd(a, &prov(a.seed)?),
        Command::Cv(a) => cv(a, &prov(a.seed)?),
        Command::IrfGrid(a) => irf_grid(a, &prov(0)?),
    }
}

/// `builtin:NAME` or a CSV path.
pub fn load_q(source: &str) -> Result<QMatrix> {
    match source.strip_prefix("builtin:") {
        Some(name) => simgen::builtin_q(name),
        None => io::read_q(Path::new(source)),
    }
}

/// A preset name or a comma-separated list of interior knots.
pub fn parse_knots(spec: &str) -> Result<KnotGrid> {
    if spec.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
        return KnotGrid::preset(spec);
    }
    let interior = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("knot `{}`: {e}", s.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    KnotGrid::from_interior(&interior)
}

fn burn_in(iterations: u64, burn_in: Option<u64>) -> u64 {
    burn_in.unwrap_or(iterations / 2)
}

fn columns(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|c| format!("{prefix}{c}")).collect()
}

fn simulate(a: &SimulateArgs, prov: &Provenance) -> Result<()> {
    let q = load_q(&a.q)?;
    let model = match a.model {
        ModelArg::Gapm => SimModel::Gapm,
        ModelArg::Apm => SimModel::Apm,
    };
    let sim = simgen::simulate(model, &q, a.n, a.sigma, a.seed)?;
    fs::create_dir_all(&a.out)?;
    io::write_binary(
        &a.out.join("responses.csv"),
        sim.data.rows().map(<[u8]>::to_vec),
        prov,
    )?;
    io::write_binary(&a.out.join("q.csv"), q.rows().into_iter(), prov)?;
    io::write_json(&a.out.join("truth.json"), &sim.truth, prov)?;
    io::write_table(
        &a.out.join("u_true.csv"),
        &columns("u", q.attributes()),
        &sim.u,
        prov,
    )?;
    log::info!(
        "simulated {} x {} responses into {}",
        a.n,
        q.items(),
        a.out.display()
    );
    Ok(())
}

fn fit_cmd(a: &FitArgs, prov: &Provenance) -> Result<()> {
    let data = io::read_responses(&a.responses)?;
    let (q, mode) = match (&a.q, a.exploratory, a.k) {
        (Some(src), false, _) => (load_q(src)?, Mode::Confirmatory),
        (None, true, Some(k)) if k > 0 => {
            (QMatrix::exploratory(data.items(), k), Mode::Exploratory)
        }
        (None, true, _) => return Err(Error::Config("--exploratory needs a positive --k".into())),
        _ => return Err(Error::Config("give either --q or --exploratory --k".into())),
    };
    if q.items() != data.items() {
        return Err(Error::Shape(format!(
            "responses have {} items but the Q-matrix has {} rows",
            data.items(),
            q.items()
        )));
    }
    let k = q.attributes();
    let kind = match a.model {
        ModelArg::Gapm => ModelKind::Gapm,
        ModelArg::Apm => ModelKind::Apm,
    };
    let n = data.individuals();
    let mut cfg = FitConfig::new(
        kind,
        a.iterations,
        burn_in(a.iterations, a.burn_in),
        n,
        k,
        a.seed,
    );
    cfg.mode = mode;
    cfg.checkpoint_every = a.checkpoint_every;
    if let Some(c) = a.step_constant {
        let mu = c / n as f64;
        let s = &mut cfg.schedule;
        (s.mu_alpha, s.mu_theta, s.mu_l, s.mu_delta) = (mu, mu, mu, mu);
    }
    if let Some(h) = a.mala_step {
        cfg.mala = MalaConfig::fixed(h);
    }
    let grid = Arc::new(parse_knots(&a.knots)?);
    let fitted = fit::fit(&data, &q, &grid, &cfg, kind)?;
    let q = fit::effective_q(&q, mode);

    fs::create_dir_all(&a.out)?;
    let params_path = a.out.join("params.json");
    let (params_file, summary) = match &fitted {
        FittedModel::Gapm(r) => (ParamsFile::from_gapm(&q, &r.params)?, FitSummary::of(r)),
        FittedModel::Apm(r) => (ParamsFile::from_apm(&q, &r.params), FitSummary::of(r)),
    };
    io::write_json(&params_path, &params_file, prov)?;
    io::write_table(
        &a.out.join("scores.csv"),
        &columns("u", k),
        summary.eap_scores,
        prov,
    )?;
    io::write_json(&a.out.join("moments.json"), summary.moments, prov)?;
    let mut log = format!(
        "# seed={} config_digest={}\n",
        prov.seed, prov.config_digest
    );
    log.extend(summary.trajectory.iter().map(|l| format!("{l}\n")));
    log.push_str(&format!(
        "acceptance_rate={:.6} early_loglik={:.6} late_loglik={:.6} numerical_warnings={}\n",
        summary.acceptance_rate,
        summary.early_loglik,
        summary.late_loglik,
        summary.numerical_warnings
    ));
    log.extend(summary.warnings.iter().map(|w| format!("warning: {w}\n")));
    fs::write(a.out.join("fit_log.txt"), log)?;
    for w in summary.warnings {
        log::warn!("{w}");
    }

    if a.validate {
        validate_params(&params_path)?;
        log::info!("{} passed validation", params_path.display());
    }
    log::info!("fit written to {}", a.out.display());
    Ok(())
}

struct FitSummary<'a> {
    eap_scores: &'a [Vec<f64>],
    moments: &'a PosteriorMoments,
    trajectory: Vec<String>,
    acceptance_rate: f64,
    early_loglik: f64,
    late_loglik: f64,
    numerical_warnings: u64,
    warnings: &'a [String],
}

impl<'a> FitSummary<'a> {
    fn of<P>(r: &'a fit::FitResult<P>) -> Self {
        FitSummary {
            eap_scores: &r.eap_scores,
            moments: &r.moments,
            trajectory: r.trajectory.iter().map(ToString::to_string).collect(),
            acceptance_rate: r.acceptance_rate,
            early_loglik: r.early_loglik,
            late_loglik: r.late_loglik,
            numerical_warnings: r.numerical_warnings,
            warnings: &r.warnings,
        }
    }
}

/// Reloads a parameter file, checks every constraint and that writing it
/// again reproduces the same bytes.
pub fn validate_params(path: &Path) -> Result<LoadedParams> {
    let text = fs::read_to_string(path)?;
    let (file, prov): (ParamsFile, Provenance) = io::read_json(path)?;
    let loaded = file.load()?;
    let again = match &loaded {
        LoadedParams::Gapm(q, p) => ParamsFile::from_gapm(q, p)?,
        LoadedParams::Apm(q, p) => ParamsFile::from_apm(q, p),
    };
    if io::to_json(&again, &prov)? != text {
        return Err(Error::InvalidState(format!(
            "{} does not re-serialize identically",
            path.display()
        )));
    }
    Ok(loaded)
}

fn load_params(path: &Path) -> Result<LoadedParams> {
    let (file, _): (ParamsFile, Provenance) = io::read_json(path)?;
    file.load()
}

#[derive(Serialize)]
struct MarglikReport {
    method: MarglikMethod,
    loglik: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_unit: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_unit_se: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fallbacks: Option<Vec<usize>>,
}

fn marglik_with<M: LatentModel>(
    model: &M,
    data: &Dataset,
    a: &MarglikArgs,
) -> Result<MarglikReport> {
    if model.items() != data.items() {
        return Err(Error::Shape(format!(
            "responses have {} items but the parameters describe {}",
            data.items(),
            model.items()
        )));
    }
    if let MarglikMethod::Quad = a.method {
        return Ok(MarglikReport {
            method: a.method,
            loglik: marginal::quad_loglik(model, data, a.nodes)?,
            se: None,
            per_unit: None,
            per_unit_se: None,
            fallbacks: None,
        });
    }
    let est = match &a.moments {
        Some(path) => {
            let (moments, _): (PosteriorMoments, Provenance) = io::read_json(path)?;
            marginal::is_loglik(model, data, &moments, a.heldout.draws, a.seed)?
        }
        None => {
            let mala = MalaConfig::default_for(model.attributes());
            eval::heldout_loglik(model, data, &mala, &a.heldout.config(a.seed))?
        }
    };
    Ok(MarglikReport {
        method: a.method,
        loglik: est.loglik,
        se: Some(est.se()),
        per_unit: Some(est.per_unit),
        per_unit_se: Some(est.per_unit_se),
        fallbacks: Some(est.fallbacks),
    })
}

fn marglik(a: &MarglikArgs, prov: &Provenance) -> Result<()> {
    let data = io::read_responses(&a.responses)?;
    let report = match load_params(&a.params)? {
        LoadedParams::Gapm(q, p) => marglik_with(&GapmModel::new(q, p)?, &data, a)?,
        LoadedParams::Apm(q, p) => marglik_with(&ApmModel::new(q, p)?, &data, a)?,
    };
    log::info!("marginal log-likelihood {:.6}", report.loglik);
    write_output(&a.out, &report, prov)
}

fn write_output<T: Serialize>(path: &Path, body: &T, prov: &Provenance) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    io::write_json(path, body, prov)
}

#[derive(Serialize, Default)]
struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    item_ise: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    av_ise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spearman: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    av_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    permutation: Option<Vec<usize>>,
    /// Squared error of each estimated latent correlation, upper triangle.
    #[serde(skip_serializing_if = "Option::is_none")]
    corr_sq_error: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    corr_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout: Option<eval::HoldoutResult>,
}

fn truth_metrics(a: &EvalArgs, loaded: &LoadedParams, path: &Path, m: &mut Metrics) -> Result<()> {
    let (truth, _): (Truth, Provenance) = io::read_json(path)?;
    let (q, corr): (&QMatrix, Vec<f64>) = match loaded {
        LoadedParams::Gapm(q, p) => (q, p.chol.correlation()),
        LoadedParams::Apm(q, p) => (q, eval::to_correlation(&p.cov_chol.gram(), q.attributes())),
    };
    let k = truth.q().attributes();
    if q.attributes() != k || q.items() != truth.q().items() {
        return Err(Error::Shape(
            "fitted and true designs differ in size".into(),
        ));
    }
    let irf = |j: usize, u: &[f64]| match loaded {
        LoadedParams::Gapm(q, p) => p.irf(q, j, u),
        LoadedParams::Apm(q, p) => p.irf(q, j, u),
    };
    let true_corr = match &truth {
        Truth::Gapm(t) => &t.corr,
        Truth::Apm(t) => &t.corr,
    };
    let (ise, corr_est) = match (&a.scores, &a.u) {
        (Some(scores), Some(u)) => {
            let scores = io::read_table(scores)?;
            let u = io::read_table(u)?;
            let r = eval::recovery(
                &scores,
                f64::NAN,
                irf,
                corr,
                &truth,
                &u,
                a.align,
                a.ise_points,
                a.seed,
            )?;
            m.spearman = Some(r.spearman);
            m.av_c = Some(r.av_c);
            m.permutation = Some(r.permutation);
            ((r.item_ise, r.av_ise), r.correlations)
        }
        _ => {
            let ise = eval::item_ise(irf, &truth, a.ise_points, a.seed)?;
            let av = ise.iter().sum::<f64>() / ise.len().max(1) as f64;
            ((ise, av), eval::off_diagonal(&corr, k))
        }
    };
    m.item_ise = Some(ise.0);
    m.av_ise = Some(ise.1);
    let sq: Vec<f64> = corr_est
        .iter()
        .zip(eval::off_diagonal(true_corr, k))
        .map(|(e, t)| (e - t).powi(2))
        .collect();
    if !sq.is_empty() {
        m.corr_mse = Some(sq.iter().sum::<f64>() / sq.len() as f64);
    }
    m.corr_sq_error = Some(sq);
    Ok(())
}

fn eval_cmd(a: &EvalArgs, prov: &Provenance) -> Result<()> {
    let loaded = load_params(&a.params)?;
    let mut m = Metrics::default();
    if let Some(path) = &a.truth {
        truth_metrics(a, &loaded, path, &mut m)?;
    }
    if let (Some(other), Some(test)) = (&a.compare, &a.test) {
        let test = io::read_responses(test)?;
        let (q, g, ap) = match (loaded, load_params(other)?) {
            (LoadedParams::Gapm(q, g), LoadedParams::Apm(qa, ap))
            | (LoadedParams::Apm(qa, ap), LoadedParams::Gapm(q, g)) => {
                if qa.items() != q.items() || qa.attributes() != q.attributes() {
                    return Err(Error::Shape(
                        "compared models have different designs".into(),
                    ));
                }
                (q, g, ap)
            }
            _ => {
                return Err(Error::Config(
                    "--compare needs one generalized and one additive parameter file".into(),
                ))
            }
        };
        if q.items() != test.items() {
            return Err(Error::Shape(
                "test responses do not match the fitted items".into(),
            ));
        }
        m.heldout = Some(heldout(&q, &g, &ap, &test, a)?);
    }
    write_output(&a.out, &m, prov)
}

fn heldout(
    q: &QMatrix,
    g: &GapmParams,
    ap: &ApmParams,
    test: &Dataset,
    a: &EvalArgs,
) -> Result<eval::HoldoutResult> {
    let mala = MalaConfig::default_for(q.attributes());
    let r = eval::compare_heldout(q, g, ap, test, &mala, &a.heldout.config(a.seed))?;
    log::info!("held-out D = {:.4} (se {:.4})", r.d, r.se);
    Ok(r)
}

fn cv(a: &CvArgs, prov: &Provenance) -> Result<()> {
    let data = io::read_responses(&a.responses)?;
    let grid = Arc::new(parse_knots(&a.knots)?);
    let cfg = CvConfig {
        candidates: a.candidates.clone(),
        splits: a.splits,
        train_fraction: a.train_fraction,
        iterations: a.iterations,
        burn_in: burn_in(a.iterations, a.burn_in),
        heldout: a.heldout.config(a.seed),
        seed: a.seed,
    };
    let result = eval::cv_select_k(&data, &grid, &cfg)?;
    log::info!("selected K = {}", result.k_hat);
    write_output(&a.out, &result, prov)
}

fn irf_grid(a: &IrfGridArgs, prov: &Provenance) -> Result<()> {
    if a.grid_res < 2 {
        return Err(Error::Config("--grid-res must be at least 2".into()));
    }
    let loaded = load_params(&a.params)?;
    type Irf<'a> = Box<dyn Fn(usize, &[f64]) -> f64 + 'a>;
    let (q, irf): (&QMatrix, Irf) = match &loaded {
        LoadedParams::Gapm(q, p) => (q, Box::new(move |j, u| p.irf(q, j, u))),
        LoadedParams::Apm(q, p) => (q, Box::new(move |j, u| p.irf(q, j, u))),
    };
    let k = q.attributes();
    let axis: Vec<f64> = (0..a.grid_res)
        .map(|i| i as f64 / (a.grid_res - 1) as f64)
        .collect();
    fs::create_dir_all(&a.out)?;
    let width = q.items().to_string().len();
    for j in 0..q.items() {
        let (header, rows): (Vec<String>, Vec<Vec<f64>>) = match k {
            1 => (
                vec!["u1".into(), "pi".into()],
                axis.iter().map(|&u| vec![u, irf(j, &[u])]).collect(),
            ),
            2 => (
                vec!["u1".into(), "u2".into(), "pi".into()],
                axis.iter()
                    .flat_map(|&u1| axis.iter().map(move |&u2| (u1, u2)))
                    .map(|(u1, u2)| vec![u1, u2, irf(j, &[u1, u2])])
                    .collect(),
            ),
            _ => (
                vec!["attribute".into(), "u".into(), "pi".into()],
                (0..k)
                    .flat_map(|c| axis.iter().map(move |&v| (c, v)))
                    .map(|(c, v)| {
                        let mut u = vec![0.5; k];
                        u[c] = v;
                        vec![(c + 1) as f64, v, irf(j, &u)]
                    })
                    .collect(),
            ),
        };
        io::write_table(
            &a.out.join(format!("item_{:0width$}.csv", j + 1)),
            &header,
            &rows,
            prov,
        )?;
    }
    log::info!("wrote {} item grids to {}", q.items(), a.out.display());
    Ok(())
}
