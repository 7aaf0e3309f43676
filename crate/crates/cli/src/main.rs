use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use threepart::chain_io::{self, write_atomic, SIGMA_FREE};
use threepart::dataset::{build_dataset, ColumnSpec, Table};
use threepart::diagnostics::{quantile, DiagnosticReport};
use threepart::model::{Dataset, Equation, PriorSpec};
use threepart::pipeline::{run_pipeline, PipelineConfig};
use threepart::policy::{self, ScenarioGrid};
use threepart::sampler::{ChainConfig, ChainStore, GibbsSampler, Step2Set};
use threepart::synthetic::{generate, GeneratorSpec};
use threepart::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "threepart", version, about = "Three-part demand model with incidental truncation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the modelling file from raw survey answers (prices, varieties, risk).
    Impute(ImputeArgs),
    /// Run the Gibbs sampler, one thread per chain.
    Fit(FitArgs),
    /// Convergence diagnostics for chain files.
    Diagnose(DiagnoseArgs),
    /// Generate a synthetic dataset from known parameters.
    Simulate(SimulateArgs),
    /// Predictive probabilities and consumption for representative individuals.
    Predict(PredictArgs),
    /// Scenario tables and tax revenue over a weighted population.
    Policy(PolicyArgs),
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Column spec (JSON) mapping the CSV to model roles.
    #[arg(long)]
    columns: PathBuf,
    /// Optional prior overrides (JSON).
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long, default_value_t = 6_000)]
    iterations: usize,
    #[arg(long, default_value_t = 1_000)]
    burn_in: usize,
    #[arg(long, default_value_t = 5)]
    thin: usize,
    #[arg(long, default_value_t = 1)]
    chains: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Observations whose use error enters the second covariance step.
    #[arg(long, value_enum, default_value_t = Step2Arg::Accessed)]
    step2: Step2Arg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Step2Arg {
    Accessed,
    AccessOnly,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Chain CSV files, or directories holding chain_*.csv.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator spec (JSON); defaults to the built-in recovery design.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Records for the built-in design.
    #[arg(long, default_value_t = 2500)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Chain CSV files or directories; draws are pooled.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Scenario grid (JSON) with profiles and scenarios.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Weighted population CSV.
    #[arg(long)]
    population: PathBuf,
    /// Column spec for the population file.
    #[arg(long)]
    columns: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Model(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Model(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Model(e) => match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Model(e) => e.fmt(f),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Impute(a) => impute(a),
        Command::Fit(a) => fit(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Simulate(a) => simulate(a),
        Command::Predict(a) => predict(a),
        Command::Policy(a) => run_policy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn existing(path: &Path) -> Outcome<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Outcome {
    Ok(write_atomic(&dir.join(name), bytes.as_ref())?)
}

fn json<T: Serialize>(value: &T) -> Outcome<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    v.push(b'\n');
    Ok(v)
}

fn impute(a: ImputeArgs) -> Outcome {
    let table = Table::from_path(existing(&a.input)?)?;
    let cfg = PipelineConfig::from_path(existing(&a.config)?)?;
    let (prepared, report) = run_pipeline(&table, &cfg)?;
    write(&a.out, "prepared.csv", prepared.to_csv()?)?;
    write(&a.out, "pipeline_report.json", json(&report)?)?;
    println!(
        "{} rows, {} consumers, {} excluded; imputation levels {:?}",
        report.rows, report.consumers, report.excluded, report.imputation_levels
    );
    Ok(())
}

/// Prior overrides on top of the vague default.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorOverrides {
    theta_mean: Option<Vec<f64>>,
    /// Common prior variance of every location coefficient.
    theta_variance: Option<f64>,
    omega_scale: Option<[[f64; 3]; 3]>,
    omega_dof: Option<f64>,
}

fn prior_for(path: Option<&Path>, n_coef: usize) -> Outcome<PriorSpec> {
    let mut prior = PriorSpec::vague(n_coef);
    let Some(path) = path else { return Ok(prior) };
    let o: PriorOverrides =
        serde_json::from_slice(&std::fs::read(existing(path)?).map_err(Error::from)?).map_err(Error::from)?;
    if let Some(m) = o.theta_mean {
        if m.len() != n_coef {
            return Err(Failure::Usage(format!("theta_mean needs {n_coef} values, got {}", m.len())));
        }
        prior.theta_mean = m.into();
    }
    if let Some(v) = o.theta_variance {
        prior.theta_cov = nalgebra::DMatrix::identity(n_coef, n_coef) * v;
    }
    if let Some(r) = o.omega_scale {
        prior.omega_scale = nalgebra::Matrix3::from_fn(|i, j| r[i][j]);
    }
    if let Some(d) = o.omega_dof {
        prior.omega_dof = d;
    }
    prior.validate(n_coef)?;
    Ok(prior)
}

fn load_dataset(input: &Path, columns: &Path) -> Outcome<Dataset> {
    let table = Table::from_path(existing(input)?)?;
    let spec = ColumnSpec::from_path(existing(columns)?)?;
    let (dataset, report) = build_dataset(&table, &spec)?;
    if !report.forced_access.is_empty() {
        eprintln!(
            "note: {} rows report use without access; access set to 1",
            report.forced_access.len()
        );
    }
    Ok(dataset)
}

#[derive(Serialize)]
struct ParamSummary {
    parameter: String,
    mean: f64,
    sd: f64,
    lower: f64,
    upper: f64,
}

fn summarize(chain: &ChainStore) -> Vec<ParamSummary> {
    let mut names = chain_io::location_names(&chain.meta.columns);
    names.extend(SIGMA_FREE.iter().map(|s| s.to_string()));
    names
        .into_iter()
        .filter_map(|name| {
            let x = chain.series(&name)?;
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let sd = if n > 1.0 {
                (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Some(ParamSummary { lower: quantile(&x, 0.025), upper: quantile(&x, 0.975), parameter: name, mean, sd })
        })
        .collect()
}

/// Regressors as rows, equations as columns, posterior sd in parentheses.
fn summary_text(chain: &ChainStore, rows: &[ParamSummary], chains: usize) -> String {
    let m = &chain.meta;
    let by_name: BTreeMap<&str, &ParamSummary> = rows.iter().map(|r| (r.parameter.as_str(), r)).collect();
    let mut regressors: Vec<&str> = Vec::new();
    for eq in Equation::ALL {
        for n in m.columns.names(eq) {
            if !regressors.contains(&n.as_str()) {
                regressors.push(n);
            }
        }
    }
    let width = regressors.iter().map(|s| s.len()).max().unwrap_or(8).max(12);
    let mut out = format!(
        "{chains} chain(s), {} retained draws; N = {} (no access {}, access only {}, users {})\n\n",
        chain.len(),
        m.n_obs,
        m.group_counts[0],
        m.group_counts[1],
        m.group_counts[2]
    );
    out += &format!("{:<width$} {:>20} {:>20} {:>20}\n", "", "Access", "Use", "Quantity");
    for r in &regressors {
        let cell = |eq: Equation| {
            by_name
                .get(format!("theta[{}:{r}]", eq.tag()).as_str())
                .map_or(String::new(), |p| format!("{:.3} ({:.3})", p.mean, p.sd))
        };
        out += &format!(
            "{r:<width$} {:>20} {:>20} {:>20}\n",
            cell(Equation::Access),
            cell(Equation::Use),
            cell(Equation::Quantity)
        );
    }
    out += "\n";
    for s in SIGMA_FREE {
        if let Some(p) = by_name.get(s) {
            out += &format!("{s:<width$} {:.3} ({:.3}) [{:.3}, {:.3}]\n", p.mean, p.sd, p.lower, p.upper);
        }
    }
    if m.variance_repairs > 0 {
        out += &format!("\nvariance repairs: {}\n", m.variance_repairs);
    }
    out
}

fn summary_csv(rows: &[ParamSummary]) -> Outcome<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.into_inner().map_err(|e| Failure::Model(Error::Io(std::io::Error::other(e.to_string()))))
}

#[derive(Serialize)]
struct Timing {
    chains: Vec<f64>,
    total_seconds: f64,
}

fn fit(a: FitArgs) -> Outcome {
    if a.chains == 0 {
        return Err(Failure::Usage("--chains must be positive".into()));
    }
    let base = ChainConfig {
        step2: match a.step2 {
            Step2Arg::Accessed => Step2Set::Accessed,
            Step2Arg::AccessOnly => Step2Set::AccessOnly,
        },
        ..ChainConfig::new(a.iterations, a.burn_in, a.thin, a.seed)
    };
    base.validate()?;
    let dataset = load_dataset(&a.input, &a.columns)?;
    let prior = prior_for(a.prior.as_deref(), dataset.columns().total())?;
    let sampler = GibbsSampler::new(&dataset, prior)?.with_step2(base.step2);

    let start = Instant::now();
    let chains: Vec<threepart::Result<ChainStore>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..a.chains)
            .map(|k| {
                let cfg = ChainConfig { chain: k as u64, ..base };
                let sampler = &sampler;
                s.spawn(move || sampler.run(&cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let total = start.elapsed();
    let chains = chains.into_iter().collect::<threepart::Result<Vec<_>>>()?;

    for (k, c) in chains.iter().enumerate() {
        chain_io::save_chain(c, &a.out.join(format!("chain_{k}.csv")))?;
    }
    let timing = Timing {
        chains: chains.iter().map(|c| c.wall_time.as_secs_f64()).collect(),
        total_seconds: total.as_secs_f64(),
    };
    write(&a.out, "timing.json", json(&timing)?)?;

    let pooled = chain_io::pool(chains)?;
    let rows = summarize(&pooled);
    let text = summary_text(&pooled, &rows, a.chains);
    write(&a.out, "summary.txt", &text)?;
    match a.format {
        Format::Csv => write(&a.out, "summary.csv", summary_csv(&rows)?)?,
        Format::Json => write(&a.out, "summary.json", json(&rows)?)?,
    }
    print!("{text}");
    Ok(())
}

fn chain_files(inputs: &[PathBuf]) -> Outcome<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(Error::from)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    name.starts_with("chain_") && name.ends_with(".csv")
                })
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Failure::Usage(format!("no chain_*.csv in {}", p.display())));
            }
            files.extend(found);
        } else {
            files.push(existing(p)?.to_path_buf());
        }
    }
    Ok(files)
}

fn load_chains(inputs: &[PathBuf]) -> Outcome<Vec<ChainStore>> {
    chain_files(inputs)?
        .iter()
        .map(|f| chain_io::load_chain(f).map_err(Failure::from))
        .collect()
}

#[derive(Serialize)]
struct ChainDiagnostics {
    chain: String,
    report: DiagnosticReport,
}

fn diagnose(a: DiagnoseArgs) -> Outcome {
    let files = chain_files(&a.input)?;
    let mut text = String::new();
    let mut all = Vec::new();
    for f in &files {
        let chain = chain_io::load_chain(f)?;
        let mut names = chain_io::location_names(&chain.meta.columns);
        names.extend(SIGMA_FREE.iter().map(|s| s.to_string()));
        let series: Vec<(String, Vec<f64>)> =
            names.into_iter().filter_map(|n| chain.series(&n).map(|x| (n, x))).collect();
        let report = DiagnosticReport::from_series(series.iter().map(|(n, x)| (n.as_str(), x.as_slice())));
        let label = f.file_name().map_or_else(|| f.display().to_string(), |n| n.to_string_lossy().into_owned());
        text += &format!("== {label} ==\n{}\n", report.to_text());
        all.push(ChainDiagnostics { chain: label, report });
    }
    write(&a.out, "diagnostics.txt", &text)?;
    write(&a.out, "diagnostics.json", json(&all)?)?;
    print!("{text}");
    Ok(())
}

fn simulate(a: SimulateArgs) -> Outcome {
    let spec = match &a.input {
        Some(p) => serde_json::from_slice::<GeneratorSpec>(&std::fs::read(existing(p)?).map_err(Error::from)?)
            .map_err(Error::from)?,
        None => GeneratorSpec::recovery_design(a.n, a.seed),
    };
    let syn = generate(&spec)?;
    let (bytes, columns) = syn.to_csv()?;
    write(&a.out, "synthetic.csv", bytes)?;
    write(&a.out, "columns.json", json(&columns)?)?;
    write(&a.out, "generator.json", json(&spec)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "u_access", "u_use", "y", "e_access", "e_use", "e_quantity"])
        .map_err(Error::from)?;
    for t in &syn.truth {
        let row = [t.u_access, t.u_use, t.y, t.errors[0], t.errors[1], t.errors[2]];
        w.write_record(std::iter::once(t.id.to_string()).chain(row.iter().map(f64::to_string)))
            .map_err(Error::from)?;
    }
    let truth = w
        .into_inner()
        .map_err(|e| Failure::Model(Error::Io(std::io::Error::other(e.to_string()))))?;
    write(&a.out, "truth.csv", truth)?;
    let p = &syn.partition;
    println!(
        "{} records: no access {}, access only {}, users {}",
        p.len(),
        p.count(threepart::model::Group::NoAccess),
        p.count(threepart::model::Group::AccessOnly),
        p.count(threepart::model::Group::User)
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Outcome {
    let grid = ScenarioGrid::from_path(existing(&a.scenario)?)?;
    if grid.profiles.is_empty() || grid.scenarios.is_empty() {
        return Err(Failure::Usage("scenario file needs at least one profile and one scenario".into()));
    }
    let chain = chain_io::pool(load_chains(&a.input)?)?;
    let rows = policy::run_scenarios(&grid, &chain, a.seed)?;
    let text = policy::scenario_table_text(&rows);
    write(&a.out, "predictions.txt", &text)?;
    match a.format {
        Format::Csv => write(&a.out, "predictions.csv", policy::scenario_table_csv(&rows)?)?,
        Format::Json => write(&a.out, "predictions.json", json(&rows)?)?,
    }
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct ElasticityRow {
    group: String,
    #[serde(flatten)]
    summary: policy::Summary,
}

fn run_policy(a: PolicyArgs) -> Outcome {
    let grid = ScenarioGrid::from_path(existing(&a.scenario)?)?;
    let chain = chain_io::pool(load_chains(&a.input)?)?;
    let population = load_dataset(&a.population, &a.columns)?;

    let mut text = String::new();
    if !grid.profiles.is_empty() && !grid.scenarios.is_empty() {
        let rows = policy::run_scenarios(&grid, &chain, a.seed)?;
        text += &policy::scenario_table_text(&rows);
        text += "\n";
        match a.format {
            Format::Csv => write(&a.out, "scenarios.csv", policy::scenario_table_csv(&rows)?)?,
            Format::Json => write(&a.out, "scenarios.json", json(&rows)?)?,
        }
    }
    if !grid.revenue.is_empty() {
        let rows = policy::run_revenue(&grid, &population, &chain, a.seed)?;
        text += &policy::revenue_table_text(&rows);
        match a.format {
            Format::Csv => write(&a.out, "revenue.csv", policy::revenue_table_csv(&rows)?)?,
            Format::Json => write(&a.out, "revenue.json", json(&rows)?)?,
        }
    }
    if let Some(lp) = grid.layout.log_price.as_deref() {
        if chain.meta.columns.position(Equation::Quantity, lp).is_some() {
            let mut rows = vec![ElasticityRow { group: "base".into(), summary: policy::elasticity(&chain, lp, None)? }];
            for (inter, group) in &grid.layout.price_interactions {
                if chain.meta.columns.position(Equation::Quantity, inter).is_some() {
                    rows.push(ElasticityRow {
                        group: group.clone(),
                        summary: policy::elasticity(&chain, lp, Some(inter))?,
                    });
                }
            }
            text += "\nPrice elasticity of quantity\n";
            for r in &rows {
                let s = &r.summary;
                text += &format!("{:<16} {:>7.3} ({:.3}) [{:.3}, {:.3}]\n", r.group, s.mean, s.sd, s.lower, s.upper);
            }
            write(&a.out, "elasticity.json", json(&rows)?)?;
        }
    }
    if text.is_empty() {
        return Err(Failure::Usage("scenario file has nothing to compute".into()));
    }
    write(&a.out, "policy.txt", &text)?;
    print!("{text}");
    Ok(())
}
