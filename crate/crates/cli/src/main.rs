//! `nslfa` command-line tool.
//!
//! Exit codes: 0 success, 1 input or runtime error, 2 non-identifiable
//! design reported by `check-q`.

mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nslfa::identifiability::identifiability_report;
use nslfa::inference::XPrior;
use nslfa::oil::{run_oil, OilConfig, OIL_FEATURES};
use nslfa::optim::Optimizer;
use nslfa::simulation::{gen_data, gen_design, run_replications, ScenarioSpec, SimMethod};
use nslfa::{fit, predict_links, Dataset, DesignMatrix, FitConfig, FitResult, Init, LabelColumn, Method};
use serde::{Deserialize, Serialize};

use manifest::Recorder;

const FIT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "nslfa", version, about = "Nonlinear structured latent factor analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report per-factor structural identifiability of a design matrix.
    CheckQ {
        /// J×K CSV of 0/1 entries.
        design: PathBuf,
    },
    /// Fit scores, loadings, hyperparameters and links.
    Fit(FitArgs),
    /// Run the replication study for a named scenario.
    Simulate(SimulateArgs),
    /// Compare linear and nonlinear 2-d embeddings of labelled oil-flow data.
    Oil(OilArgs),
    /// Write one synthetic data set of a named scenario.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// N×J data CSV.
    data: PathBuf,
    /// J×K design CSV.
    design: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    /// Number of factors; defaults to the design width.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    x_prior: Option<XPrior>,
    #[arg(long)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    init: Option<Init>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write link curves on a grid of this many points per item.
    #[arg(long, value_name = "G")]
    links: Option<usize>,
    /// JSON or TOML file with fit settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "nslfa-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    scenario: String,
    /// Comma-separated item counts.
    #[arg(long = "J", value_delimiter = ',')]
    j: Option<Vec<usize>>,
    #[arg(long, conflicts_with = "full")]
    reps: Option<usize>,
    /// 100 replications.
    #[arg(long)]
    full: bool,
    #[arg(long, value_delimiter = ',', default_value = "nslfa,lfa")]
    methods: Vec<SimMethod>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON or TOML file with `scenario` and `fit` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "nslfa-out")]
    out: PathBuf,
}

#[derive(Args)]
struct OilArgs {
    /// 12 feature columns followed by a class label column.
    data: PathBuf,
    /// Rows to sample; 0 keeps all.
    #[arg(long, default_value_t = 100)]
    subsample: usize,
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "nslfa-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    scenario: String,
    #[arg(long = "J")]
    j: usize,
    /// Rows; defaults to 5J.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "nslfa-out")]
    out: PathBuf,
}

/// Fit output document.
#[derive(Serialize)]
struct FitDocument<'a> {
    schema_version: u32,
    run_id: &'a str,
    seed: u64,
    config: &'a FitConfig,
    design: &'a DesignMatrix,
    identifiable: Vec<bool>,
    result: &'a FitResult,
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct SimulateFile {
    scenario: Option<ScenarioSpec>,
    fit: Option<FitConfig>,
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        Ok(toml::from_str(&text)?)
    } else {
        Ok(serde_json::from_str(&text)?)
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn matrix_csv(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s.into_bytes()
}

fn num_rows(m: &nslfa::nalgebra::DMatrix<f64>) -> impl Iterator<Item = Vec<String>> + '_ {
    m.row_iter().map(|r| r.iter().map(|v| format!("{v}")).collect())
}

fn check_q(design: &Path) -> Result<ExitCode> {
    let q = DesignMatrix::read_csv(open(design)?)?;
    let report = identifiability_report(&q)?;
    let set = |v: &[usize]| format!("{{{}}}", v.iter().map(|k| (k + 1).to_string()).collect::<Vec<_>>().join(","));
    let mut out = std::io::stdout().lock();
    writeln!(out, "design: {} items, {} factors", q.items(), q.factors())?;
    writeln!(out, "{:<8}{:<14}{}", "factor", "identifiable", "intersection")?;
    for v in &report.verdicts {
        let witness = if v.witness.is_empty() { "{} (factor unmeasured)".into() } else { set(&v.witness) };
        writeln!(out, "{:<8}{:<14}{}", v.factor + 1, if v.identifiable { "yes" } else { "no" }, witness)?;
    }
    writeln!(out, "items loading on exactly S:")?;
    for m in &report.measured {
        writeln!(out, "  S = {}: items {}", set(&m.subset), set(&m.items))?;
    }
    Ok(if report.all_identifiable() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn fit_cmd(a: FitArgs) -> Result<ExitCode> {
    let y = Dataset::read_csv(open(&a.data)?, LabelColumn::Auto)?;
    let q = DesignMatrix::read_csv(open(&a.design)?)?;
    let mut cfg: FitConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => FitConfig { k: q.factors(), ..FitConfig::default() },
    };
    if a.config.is_none() || a.k.is_some() {
        cfg.k = a.k.unwrap_or(q.factors());
    }
    cfg.method = a.method.unwrap_or(cfg.method);
    cfg.prior.x_prior = a.x_prior.unwrap_or(cfg.prior.x_prior);
    cfg.optimizer = a.optimizer.unwrap_or(cfg.optimizer);
    cfg.init = a.init.unwrap_or(cfg.init);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if y.j() != q.items() {
        return Err(nslfa::Error::DimensionMismatch { data: y.j(), design: q.items() }.into());
    }

    let report = identifiability_report(&q)?;
    for k in report.non_identifiable() {
        log::warn!("factor {} is not structurally identifiable under this design", k + 1);
    }
    let mut inputs = vec![a.data.as_path(), a.design.as_path()];
    if let Some(c) = &a.config {
        inputs.push(c);
    }
    let mut rec = Recorder::new("fit", &cfg, cfg.seed, &inputs)?;
    let res = fit(&y, &q, &cfg)?;
    fs::create_dir_all(&a.out)?;
    let doc = FitDocument {
        schema_version: FIT_SCHEMA_VERSION,
        run_id: &rec.run_id.clone(),
        seed: cfg.seed,
        config: &cfg,
        design: &q,
        identifiable: report.per_factor,
        result: &res,
    };
    rec.write(a.out.join("fit.json"), &serde_json::to_vec_pretty(&doc)?)?;
    if let Some(g) = a.links {
        rec.write_csv(a.out.join("links.csv"), &link_curves(&res, g)?)?;
    }
    println!(
        "{} fit: {} iterations ({:?}), marginal log-likelihood {:.4}, theta w={:.4} tau={:.4} sigma2={:.4}",
        match cfg.method {
            Method::JointMap => "joint-map",
            Method::Iterative => "iterative",
        },
        res.iterations,
        res.converged,
        res.marginal_loglik,
        res.theta_hat.w,
        res.theta_hat.tau,
        res.theta_hat.sigma2
    );
    let m = rec.finish(&a.out)?;
    println!("wrote {}", m.display());
    Ok(ExitCode::SUCCESS)
}

/// Per item, the link on `g` equispaced points spanning the observed
/// indices widened by 10% on each side.
fn link_curves(res: &FitResult, g: usize) -> Result<Vec<u8>> {
    if g < 2 {
        bail!("--links needs at least 2 grid points");
    }
    let t = &res.x_hat.x * res.a_hat.a.transpose();
    let mut rows = Vec::new();
    for j in 0..t.ncols() {
        let col = t.column(j);
        let (lo, hi) = (col.min(), col.max());
        let pad = 0.1 * (hi - lo);
        let grid: Vec<f64> = (0..g).map(|s| lo - pad + (hi - lo + 2.0 * pad) * s as f64 / (g - 1) as f64).collect();
        for (s, f) in grid.iter().zip(predict_links(res, &grid, j)?) {
            rows.push(vec![(j + 1).to_string(), format!("{s}"), format!("{f}")]);
        }
    }
    Ok(matrix_csv(&["item".into(), "t".into(), "f".into()], rows.into_iter()))
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let file: SimulateFile = match &a.config {
        Some(p) => read_config(p)?,
        None => SimulateFile::default(),
    };
    ScenarioSpec::new(&a.scenario)?;
    let mut spec = ScenarioSpec { name: a.scenario.clone(), ..file.scenario.unwrap_or_default() };
    if let Some(j) = a.j {
        spec.j_list = j;
    }
    if a.full {
        spec.replications = 100;
    } else if let Some(r) = a.reps {
        spec.replications = r;
    }
    spec.seed = a.seed.unwrap_or(spec.seed);
    let cfg = file.fit.unwrap_or_default();

    #[derive(Serialize)]
    struct Effective<'a> {
        scenario: &'a ScenarioSpec,
        methods: Vec<&'static str>,
        fit: &'a FitConfig,
    }
    let effective = Effective { scenario: &spec, methods: a.methods.iter().map(|m| m.name()).collect(), fit: &cfg };
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    let mut rec = Recorder::new("simulate", &effective, spec.seed, &inputs)?;
    let table = run_replications(&spec, &a.methods, &cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    rec.write_csv(a.out.join("table.csv"), &csv)?;
    let report = table.report();
    rec.write(a.out.join("report.txt"), report.as_bytes())?;
    let mut jsonl = Vec::new();
    table.write_jsonl(&mut jsonl)?;
    rec.write(a.out.join("replications.jsonl"), &jsonl)?;
    print!("{report}");
    let failed = table.records.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        println!("{failed} replications failed; see replications.jsonl");
    }
    rec.finish(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn oil(a: OilArgs) -> Result<ExitCode> {
    // numeric class codes look like a 13th feature
    let mut data = Dataset::read_csv(open(&a.data)?, LabelColumn::Auto)?;
    if data.labels.is_none() && data.j() == OIL_FEATURES + 1 {
        data = Dataset::read_csv(open(&a.data)?, LabelColumn::Last)?;
    }
    let cfg = OilConfig {
        subsample: (a.subsample > 0).then_some(a.subsample),
        threshold: a.threshold,
        seed: a.seed,
        ..OilConfig::default()
    };
    let mut rec = Recorder::new("oil", &cfg, a.seed, &[&a.data])?;
    let r = run_oil(&data, &cfg)?;
    fs::create_dir_all(&a.out)?;
    for (name, z) in [("lfa_embedding.csv", &r.lfa_embedding), ("nslfa_embedding.csv", &r.nslfa_embedding)] {
        let rows = r.rows.iter().zip(&r.labels).zip(z.row_iter()).map(|((i, l), z)| {
            let mut v = vec![(i + 1).to_string(), l.clone()];
            v.extend(z.iter().map(|x| format!("{x}")));
            v
        });
        rec.write_csv(a.out.join(name), &matrix_csv(&["row".into(), "label".into(), "z1".into(), "z2".into()], rows))?;
    }
    let design = r.design.to_rows().into_iter().map(|row| row.iter().map(u8::to_string).collect());
    let header: Vec<String> = (1..=r.design.factors()).map(|k| format!("f{k}")).collect();
    rec.write_csv(a.out.join("design.csv"), &matrix_csv(&header, design))?;
    #[derive(Serialize)]
    struct Errors {
        run_id: String,
        points: usize,
        lfa_errors: usize,
        nslfa_errors: usize,
    }
    let errors = Errors { run_id: rec.run_id.clone(), points: r.rows.len(), lfa_errors: r.lfa_errors, nslfa_errors: r.nslfa_errors };
    rec.write(a.out.join("oil.json"), &serde_json::to_vec_pretty(&errors)?)?;
    println!("nearest-neighbour errors on {} points: linear FA {}, NSLFA {}", r.rows.len(), r.lfa_errors, r.nslfa_errors);
    rec.finish(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let spec = ScenarioSpec { seed: a.seed, ..ScenarioSpec::new(&a.scenario)? };
    let q = gen_design(&a.scenario, a.j)?;
    let n = a.n.unwrap_or(spec.n_per_item * a.j);
    let mut rec = Recorder::new("generate", &spec, a.seed, &[])?;
    let d = gen_data(&q, n, &spec, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let names = |p: &str, m: usize| (1..=m).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    rec.write_csv(a.out.join("y.csv"), &matrix_csv(&names("y", a.j), num_rows(&d.dataset.y)))?;
    let qrows = q.to_rows().into_iter().map(|r| r.iter().map(u8::to_string).collect());
    rec.write_csv(a.out.join("q.csv"), &matrix_csv(&names("f", q.factors()), qrows))?;
    rec.write_csv(a.out.join("x_true.csv"), &matrix_csv(&names("x", q.factors()), num_rows(&d.x_true)))?;
    rec.write_csv(a.out.join("a_true.csv"), &matrix_csv(&names("a", q.factors()), num_rows(&d.a_true)))?;
    rec.write_csv(a.out.join("f_true.csv"), &matrix_csv(&names("f", a.j), num_rows(&d.f_true)))?;
    rec.finish(&a.out)?;
    println!("wrote {n}x{} data to {}", a.j, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NSLFA_THREADS") {
        let n: usize = v.parse().with_context(|| format!("NSLFA_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::CheckQ { design } => check_q(&design),
        Command::Fit(a) => fit_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::Oil(a) => oil(a),
        Command::Generate(a) => generate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
