//! `lyocert`: file-based pipeline from data generation to safety-filtered runs.
//!
//! Every command reads one JSON config (optional; defaults apply), writes a
//! `run_manifest.json` into `--out` before doing any work, and writes each
//! output once through a temp-file rename.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lyocert::certify::{validate_certificate, ValidationCounts};
use lyocert::dataio::{differentiate, fmt_f64, load_dataset, DatasetManifest};
use lyocert::sim::{generate_training_data, run_scenario, sweep_table, DataGenConfig, ScenarioConfig};
use lyocert::{
    bisect_lambda, chernoff_bound, train, BisectionConfig, Certificate, CertificateRecord, Execution, Role,
    SafetySpec, TrainConfig,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

const MANIFEST_FILE: &str = "run_manifest.json";
/// Tie tolerance for the sweep monotonicity verdicts.
const SWEEP_TIE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "lyocert", version, about = "Certify decay rates from trajectory data and filter velocities for safety")]
struct Cli {
    /// JSON config for the subcommand; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the plant and write tracking-error trajectories plus a manifest.
    Gen(GenArgs),
    /// Train one candidate at a fixed decay rate.
    Train(TrainArgs),
    /// Bisect for the largest certifiable decay rate and extract the slack.
    Certify(CertifyArgs),
    /// Count held-out violations and bound the true violation rate.
    Bound(BoundArgs),
    /// Run one closed-loop scenario through the safety filter.
    Run(RunArgs),
    /// Sweep α × ε and report min_h with monotonicity verdicts.
    Sweep(SweepArgs),
    /// Parse and validate a config or artifact without running anything.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of trajectories.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum, default_value_t = RoleArg::Train)]
    role: RoleArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Train,
    Test,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct CertifyArgs {
    /// Training dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    resolution: Option<f64>,
}

#[derive(Args)]
struct BoundArgs {
    /// Certificate JSON.
    #[arg(long)]
    cert: PathBuf,
    /// Held-out dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Certificate JSON, used for the initial-set check and the α < λ check.
    #[arg(long)]
    cert: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Slack ε; `cert` takes the certificate's value.
    #[arg(long)]
    epsilon: Option<String>,
    /// Bypass the safety filter.
    #[arg(long)]
    no_filter: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    cert: Option<PathBuf>,
    /// Comma-separated α grid.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 4.0])]
    alphas: Vec<f64>,
    /// Comma-separated ε grid; `cert` stands for the certificate's ε.
    #[arg(long, value_delimiter = ',', default_values = ["cert", "0.04", "0.06", "0.07", "0.08"])]
    epsilons: Vec<String>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_enum, default_value_t = Kind::Auto)]
    kind: Kind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Auto,
    Datagen,
    Train,
    Bisection,
    Scenario,
    Safety,
    Certificate,
    Manifest,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<&'a Path>,
    seed: Option<u64>,
    output_dir: &'a Path,
    tool_version: &'a str,
    started_unix: u64,
}

/// A failure carrying its process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn config(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, err: err.into() }
    }
    fn certification(err: anyhow::Error) -> Self {
        Self { code: 3, err }
    }
    fn infeasible(err: anyhow::Error) -> Self {
        Self { code: 4, err }
    }
}

impl From<lyocert::Error> for Failure {
    fn from(e: lyocert::Error) -> Self {
        Failure::config(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = lyocert::exec::init_thread_pool_from_env() {
        log::debug!("worker pool capped at {n} threads");
    }
    // Usage errors are config errors too.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let name = match &cli.command {
        Command::Gen(_) => "gen",
        Command::Train(_) => "train",
        Command::Certify(_) => "certify",
        Command::Bound(_) => "bound",
        Command::Run(_) => "run",
        Command::Sweep(_) => "sweep",
        Command::Validate(_) => "validate",
    };
    if let Command::Validate(a) = &cli.command {
        return cmd_validate(cli, a);
    }
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))
        .map_err(Failure::config)?;
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = RunManifest {
        command: name,
        config_path: cli.config.as_deref(),
        seed: cli.seed,
        output_dir: &cli.out,
        tool_version: env!("CARGO_PKG_VERSION"),
        started_unix,
    };
    write_json(&cli.out, MANIFEST_FILE, &manifest)?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Certify(a) => cmd_certify(cli, a),
        Command::Bound(a) => cmd_bound(cli, a),
        Command::Run(a) => cmd_run(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Validate(_) => unreachable!(),
    }
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::config)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::config)
}

fn load_config<T: DeserializeOwned + Default>(cli: &Cli) -> Result<T, Failure> {
    cli.config.as_deref().map_or_else(|| Ok(T::default()), load_json)
}

/// Loads a dataset, differentiating any trajectory stored without derivative columns.
fn load_data(manifest: &Path) -> Result<lyocert::Dataset, Failure> {
    let ds = load_dataset(manifest, Execution::Parallel)?;
    if ds.has_derivatives() {
        return Ok(ds);
    }
    let role = ds.role();
    let trajs = ds
        .trajectories()
        .iter()
        .map(|t| if t.has_derivatives() { Ok(t.clone()) } else { differentiate(t) })
        .collect::<lyocert::Result<Vec<_>>>()?;
    Ok(lyocert::Dataset::new(trajs, role)?)
}

fn load_certificate(path: &Path) -> Result<Certificate, Failure> {
    let rec: CertificateRecord = load_json(path)?;
    rec.to_certificate()
        .with_context(|| format!("certificate {}", path.display()))
        .map_err(Failure::config)
}

/// Writes `bytes` to `dir/name` via a sibling temp file and a rename.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> CmdResult {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)
        .and_then(|()| fs::rename(&tmp, &target))
        .with_context(|| format!("writing {}", target.display()))
        .map_err(Failure::config)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::config)?;
    text.push('\n');
    write_atomic(dir, name, text.as_bytes())
}

fn loss_history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, fmt_f64(*l));
    }
    out
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> CmdResult {
    let mut cfg: DataGenConfig = load_config(cli)?;
    if let Some(n) = a.n {
        cfg.n_trajectories = n;
    }
    if cfg.n_trajectories == 0 {
        return Err(Failure::config(anyhow!("n must be ≥ 1")));
    }
    if let Some(s) = cli.seed {
        cfg.plant.seed = s;
    }
    let role = match a.role {
        RoleArg::Train => Role::Train,
        RoleArg::Test => Role::Test,
    };
    let ds = generate_training_data(&cfg)?.with_role(role);
    let width = ds.len().to_string().len().max(3);
    let prefix = match role {
        Role::Train => "train",
        Role::Test => "test",
    };
    let mut files = Vec::with_capacity(ds.len());
    for (i, t) in ds.trajectories().iter().enumerate() {
        let name = format!("{prefix}_{i:0width$}.csv");
        let mut buf = Vec::new();
        t.write_csv(&mut buf)?;
        write_atomic(&cli.out, &name, &buf)?;
        files.push(PathBuf::from(name));
    }
    let manifest = DatasetManifest { dt: cfg.plant.dt, files, role };
    write_json(&cli.out, "manifest.json", &manifest)?;
    log::info!("wrote {} trajectories ({} samples) to {}", ds.len(), ds.sample_count(), cli.out.display());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let mut cfg: TrainConfig = load_config(cli)?;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = load_data(&a.data)?;
    let r = train(&ds, &cfg)?;
    let rec = CertificateRecord::from_candidate(&r.candidate, cfg.lambda, cfg.gamma, cfg.seed);
    write_json(&cli.out, "candidate.json", &rec)?;
    write_atomic(&cli.out, "loss_history.csv", loss_history_csv(&r.loss_history).as_bytes())?;
    if !r.converged {
        return Err(Failure::certification(anyhow!(
            "training at λ = {} did not reach zero loss in {} restarts (final loss {})",
            cfg.lambda,
            cfg.restarts,
            r.final_loss
        )));
    }
    log::info!("converged at λ = {} after {} epochs", cfg.lambda, r.epochs_used);
    Ok(())
}

fn cmd_certify(cli: &Cli, a: &CertifyArgs) -> CmdResult {
    let mut cfg: BisectionConfig = load_config(cli)?;
    if let Some(v) = a.lambda_min {
        cfg.lambda_min = v;
    }
    if let Some(v) = a.lambda_max {
        cfg.lambda_max = v;
    }
    if let Some(v) = a.resolution {
        cfg.resolution = v;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let ds = load_data(&a.data)?;
    let cert = bisect_lambda(&ds, &cfg)?;
    write_json(&cli.out, "certificate.json", &CertificateRecord::from(&cert))?;
    write_atomic(&cli.out, "loss_history.csv", loss_history_csv(&cert.loss_history).as_bytes())?;
    if cert.never_converged {
        return Err(Failure::certification(anyhow!(
            "no decay rate in [{}, {}] could be certified",
            cfg.lambda_min,
            cfg.lambda_max
        )));
    }
    log::info!("λ_best = {}, ε = {}", cert.lambda_best, cert.epsilon);
    Ok(())
}

fn cmd_bound(cli: &Cli, a: &BoundArgs) -> CmdResult {
    if !(a.delta > 0.0 && a.delta <= 1.0) {
        return Err(Failure::config(anyhow!("delta must lie in (0, 1], got {}", a.delta)));
    }
    let cert = load_certificate(&a.cert)?;
    let test = load_data(&a.data)?;
    if test.role() != Role::Test {
        log::warn!("{} is not marked as a test dataset", a.data.display());
    }
    let counts: ValidationCounts = validate_certificate(&cert, &test)?;
    let report = chernoff_bound(counts.violations as u64, counts.total as u64, a.delta)?;
    write_json(&cli.out, "bound.json", &report)?;
    write_json(&cli.out, "validation.json", &counts)?;
    log::info!(
        "{} of {} samples violate the certificate ({} of {} trajectories); c̄ = {}",
        counts.violations,
        counts.total,
        counts.trajectories_violated,
        counts.trajectories,
        report.c_bar
    );
    Ok(())
}

fn parse_epsilon(token: &str, cert: Option<&Certificate>) -> Result<f64, Failure> {
    if token.trim() == "cert" {
        return cert
            .map(|c| c.epsilon)
            .ok_or_else(|| Failure::config(anyhow!("ε = cert requires --cert")));
    }
    token
        .trim()
        .parse()
        .map_err(|_| Failure::config(anyhow!("invalid ε value {token:?}")))
}

fn scenario(cli: &Cli) -> Result<ScenarioConfig, Failure> {
    let mut cfg: ScenarioConfig = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.plant.seed = s;
    }
    Ok(cfg)
}

fn warn_alpha(alpha: f64, cert: Option<&Certificate>) {
    if let Some(c) = cert {
        if alpha >= c.lambda_best {
            log::warn!("α = {alpha} is not below the certified λ = {}; the safety guarantee does not apply", c.lambda_best);
        }
    }
}

fn cmd_run(cli: &Cli, a: &RunArgs) -> CmdResult {
    let cert = a.cert.as_deref().map(load_certificate).transpose()?;
    let mut cfg = scenario(cli)?;
    let alpha = a.alpha.unwrap_or(cfg.spec.alpha);
    let epsilon = match &a.epsilon {
        Some(t) => parse_epsilon(t, cert.as_ref())?,
        None => cfg.spec.epsilon,
    };
    cfg.spec = cfg.spec.with_params(alpha, epsilon)?;
    if a.no_filter {
        cfg.filter_enabled = false;
    }
    cfg.validate()?;
    warn_alpha(alpha, cert.as_ref());
    let r = run_scenario(&cfg, cert.as_ref())?;
    let mut trace = Vec::new();
    r.write_trace_csv(&mut trace)?;
    write_atomic(&cli.out, "trace.csv", &trace)?;
    write_json(&cli.out, "summary.json", &r.summary())?;
    if r.halted() {
        return Err(Failure::infeasible(anyhow!("safety filter failed: {:?}", r.events)));
    }
    log::info!(
        "min_h = {}, tolerance {}, filter active on {:.1}% of steps",
        r.min_h,
        r.tolerance(),
        100.0 * r.filter_activity
    );
    Ok(())
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> CmdResult {
    let cert = a.cert.as_deref().map(load_certificate).transpose()?;
    let base = scenario(cli)?;
    base.validate()?;
    let mut alphas = a.alphas.clone();
    let mut epsilons = a
        .epsilons
        .iter()
        .map(|t| parse_epsilon(t, cert.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    for grid in [&mut alphas, &mut epsilons] {
        grid.sort_by(f64::total_cmp);
        grid.dedup();
    }
    for &al in &alphas {
        warn_alpha(al, cert.as_ref());
    }
    let table = sweep_table(&base, &alphas, &epsilons, cert.as_ref(), Execution::Parallel)?;
    let verdicts = table.verdict_lines(SWEEP_TIE);
    write_atomic(&cli.out, "sweep.csv", table.to_csv().as_bytes())?;
    write_json(&cli.out, "sweep.json", &table)?;
    write_atomic(&cli.out, "verdicts.txt", (verdicts.join("\n") + "\n").as_bytes())?;
    print!("{}", table.to_csv());
    for v in &verdicts {
        println!("{v}");
    }
    Ok(())
}

fn detect_kind(v: &serde_json::Value) -> Kind {
    let has = |k: &str| v.get(k).is_some();
    if has("L") {
        Kind::Certificate
    } else if has("files") {
        Kind::Manifest
    } else if has("waypoints") {
        Kind::Scenario
    } else if has("obstacles") {
        Kind::Safety
    } else if has("lambda_min") || has("lambda_max") || has("resolution") || has("train") {
        Kind::Bisection
    } else if has("n_trajectories") || has("plant") || has("reference_velocity") {
        Kind::Datagen
    } else {
        Kind::Train
    }
}

fn check<T: DeserializeOwned>(v: serde_json::Value) -> Result<T, Failure> {
    serde_json::from_value(v).map_err(Failure::config)
}

fn cmd_validate(cli: &Cli, a: &ValidateArgs) -> CmdResult {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::config(anyhow!("validate needs --config")))?;
    let value: serde_json::Value = load_json(path)?;
    let kind = if a.kind == Kind::Auto { detect_kind(&value) } else { a.kind };
    match kind {
        Kind::Datagen => check::<DataGenConfig>(value)?.validate()?,
        Kind::Train => check::<TrainConfig>(value)?.validate()?,
        Kind::Bisection => check::<BisectionConfig>(value)?.validate()?,
        Kind::Scenario => check::<ScenarioConfig>(value)?.validate()?,
        Kind::Safety => check::<SafetySpec>(value)?.validate()?,
        Kind::Certificate => {
            let cert = check::<CertificateRecord>(value)?.to_certificate()?;
            if !(cert.epsilon >= 0.0 && cert.lambda_best >= 0.0) {
                return Err(Failure::config(anyhow!("certificate needs λ ≥ 0 and ε ≥ 0")));
            }
        }
        Kind::Manifest => {
            load_dataset(path, Execution::Parallel)?;
        }
        Kind::Auto => unreachable!(),
    }
    println!("ok: {} is a valid {kind:?} file", path.display());
    Ok(())
}
