//! Synthetic scenarios with logistic links and the replication harness.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_linear_fa, fit_unconstrained, LinearFaConfig};
use crate::error::{Error, Result};
use crate::estimator::{fit, FitConfig, Method};
use crate::metrics::{evaluate, mean, EvalSummary};
use crate::model::{Dataset, DesignMatrix};

pub const SCENARIOS: [&str; 6] = ["k2-scenario1", "k2-scenario2", "k3-scenario1", "k3-scenario2", "k5-scenario1", "k5-scenario2"];

fn pattern(name: &str) -> Result<Vec<Vec<u8>>> {
    let rows: &[&[u8]] = match name {
        "k2-scenario1" => &[&[1, 0], &[0, 1]],
        "k2-scenario2" => &[&[1, 0], &[1, 1]],
        "k3-scenario1" => &[&[1, 1, 0], &[1, 0, 1], &[0, 1, 1]],
        "k3-scenario2" => &[&[1, 0, 0], &[1, 0, 1], &[0, 1, 1]],
        "k5-scenario1" => &[
            &[1, 1, 1, 0, 0],
            &[0, 1, 1, 1, 0],
            &[0, 0, 1, 1, 1],
            &[1, 0, 0, 1, 1],
            &[1, 1, 0, 0, 1],
        ],
        "k5-scenario2" => &[
            &[1, 1, 1, 1, 0],
            &[0, 1, 1, 1, 0],
            &[0, 0, 1, 1, 1],
            &[1, 0, 0, 1, 1],
            &[1, 1, 0, 0, 1],
        ],
        _ => return Err(Error::UnknownScenario(name.to_string())),
    };
    Ok(rows.iter().map(|r| r.to_vec()).collect())
}

/// Number of factors of a named scenario.
pub fn scenario_factors(name: &str) -> Result<usize> {
    Ok(pattern(name)?[0].len())
}

/// Builds the block design of a named scenario: the pattern's rows are
/// repeated contiguously, `J / blocks` times each.
pub fn gen_design(name: &str, j: usize) -> Result<DesignMatrix> {
    let p = pattern(name)?;
    let blocks = p.len();
    if j == 0 || j % blocks != 0 {
        return Err(Error::IndivisibleJ { j, blocks });
    }
    let rows: Vec<Vec<u8>> = p.iter().flat_map(|r| std::iter::repeat_n(r.clone(), j / blocks)).collect();
    DesignMatrix::try_from(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub name: String,
    pub j_list: Vec<usize>,
    /// `N = n_per_item · J`.
    pub n_per_item: usize,
    pub sigma2_true: f64,
    pub radius: f64,
    /// Free loadings with smaller magnitude are redrawn.
    pub min_abs_loading: f64,
    /// Lower bound on `σ_K(X) / √N` for accepted score draws.
    pub min_gamma: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            name: "k2-scenario1".into(),
            j_list: vec![6, 10, 20],
            n_per_item: 5,
            sigma2_true: 0.25,
            radius: 2.5,
            min_abs_loading: 0.1,
            min_gamma: 0.05,
            replications: 20,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn new(name: &str) -> Result<Self> {
        pattern(name)?;
        Ok(ScenarioSpec { name: name.to_string(), ..Default::default() })
    }

    pub fn factors(&self) -> Result<usize> {
        scenario_factors(&self.name)
    }
}

/// One synthetic draw with its generating truth.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: Dataset,
    pub x_true: DMatrix<f64>,
    pub a_true: DMatrix<f64>,
    pub f_true: DMatrix<f64>,
}

/// Uniform draw from the `d`-ball of the given radius.
pub fn uniform_ball<R: Rng + ?Sized>(rng: &mut R, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
            return g.into_iter().map(|v| v * r / norm).collect();
        }
    }
}

pub fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

const MAX_DRAWS: usize = 10;

pub fn gen_data(q: &DesignMatrix, n: usize, spec: &ScenarioSpec, seed: u64) -> Result<SimData> {
    if n < 2 {
        return Err(Error::TooFewRows { min: 2, got: n });
    }
    let k = q.factors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_true = None;
    for _ in 0..MAX_DRAWS {
        let mut x = DMatrix::zeros(n, k);
        for i in 0..n {
            for (kk, v) in uniform_ball(&mut rng, k, spec.radius).into_iter().enumerate() {
                x[(i, kk)] = v;
            }
        }
        let smin = x.singular_values().min();
        if n >= k && smin / (n as f64).sqrt() > spec.min_gamma {
            x_true = Some(x);
            break;
        }
    }
    let x_true = x_true.ok_or(Error::DegenerateDraw(MAX_DRAWS))?;

    let mut a_true = DMatrix::zeros(q.items(), k);
    for j in 0..q.items() {
        let free = q.free_factors(j);
        let v = loop {
            let v = uniform_ball(&mut rng, free.len(), spec.radius);
            if v.iter().all(|c| c.abs() >= spec.min_abs_loading) {
                break v;
            }
        };
        for (&kk, c) in free.iter().zip(v) {
            a_true[(j, kk)] = c;
        }
    }
    let f_true = (&x_true * a_true.transpose()).map(logistic);
    let noise = Normal::new(0.0, spec.sigma2_true.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let y = f_true.map(|f| f + noise.sample(&mut rng));
    Ok(SimData { dataset: Dataset::new(y)?, x_true, a_true, f_true })
}

/// Seed of replication `rep` at item count `j`, independent of execution order.
pub fn replication_seed(seed: u64, j: usize, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((j as u64) << 32) | rep as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMethod {
    NslfaJoint,
    NslfaIterative,
    LinearFa,
    Unconstrained,
}

impl SimMethod {
    pub fn name(self) -> &'static str {
        match self {
            SimMethod::NslfaJoint => "nslfa-joint",
            SimMethod::NslfaIterative => "nslfa-iterative",
            SimMethod::LinearFa => "linear-fa",
            SimMethod::Unconstrained => "unconstrained",
        }
    }
}

impl std::str::FromStr for SimMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nslfa-joint" | "joint-map" => Ok(SimMethod::NslfaJoint),
            "nslfa" | "nslfa-iterative" | "iterative" => Ok(SimMethod::NslfaIterative),
            "linear-fa" | "lfa" => Ok(SimMethod::LinearFa),
            "unconstrained" | "gplvm" => Ok(SimMethod::Unconstrained),
            _ => Err(Error::InvalidConfig(format!("unknown method `{s}`"))),
        }
    }
}

/// Fits one method to one draw and scores it against the truth.
pub fn run_method(method: SimMethod, data: &SimData, q: &DesignMatrix, cfg: &FitConfig) -> Result<EvalSummary> {
    let k = q.factors();
    let (x, a, f) = match method {
        SimMethod::NslfaJoint | SimMethod::NslfaIterative => {
            let m = if method == SimMethod::NslfaJoint { Method::JointMap } else { Method::Iterative };
            let r = fit(&data.dataset, q, &FitConfig { method: m, k, ..cfg.clone() })?;
            (r.x_hat.x, r.a_hat.a, Some(r.f_hat))
        }
        SimMethod::Unconstrained => {
            let r = fit_unconstrained(&data.dataset, k, &FitConfig { k, ..cfg.clone() })?;
            (r.x_hat.x, r.a_hat.a, Some(r.f_hat))
        }
        SimMethod::LinearFa => {
            let r = fit_linear_fa(&data.dataset, q, &LinearFaConfig::default())?;
            (r.x_hat, r.a_hat, None)
        }
    };
    evaluate(&data.x_true, &data.a_true, &data.f_true, &x, &a, f.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub scenario: String,
    pub j: usize,
    pub n: usize,
    pub method: SimMethod,
    pub replication: usize,
    pub seed: u64,
    pub outcome: std::result::Result<EvalSummary, String>,
}

/// Averaged metrics of one (J, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub j: usize,
    pub n: usize,
    pub method: SimMethod,
    pub completed: usize,
    pub failed: usize,
    pub corr: Vec<f64>,
    pub sin: Vec<f64>,
    pub d_xa: f64,
    pub d_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub scenario: String,
    pub factors: usize,
    pub rows: Vec<SummaryRow>,
    pub records: Vec<ReplicationRecord>,
}

/// Runs every (J, method, replication) job in the thread pool and averages
/// the successful ones. Failed fits are recorded, not fatal.
pub fn run_replications(spec: &ScenarioSpec, methods: &[SimMethod], cfg: &FitConfig) -> Result<SummaryTable> {
    let k = spec.factors()?;
    let mut jobs = Vec::new();
    for &j in &spec.j_list {
        gen_design(&spec.name, j)?;
        for &m in methods {
            for rep in 0..spec.replications {
                jobs.push((j, m, rep));
            }
        }
    }
    let records: Vec<ReplicationRecord> = jobs
        .par_iter()
        .map(|&(j, method, rep)| {
            let seed = replication_seed(spec.seed, j, rep);
            let n = spec.n_per_item * j;
            let outcome = gen_design(&spec.name, j)
                .and_then(|q| {
                    let data = gen_data(&q, n, spec, seed)?;
                    run_method(method, &data, &q, &FitConfig { seed, ..cfg.clone() })
                })
                .map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("{} J={j} {} replication {rep} failed: {e}", spec.name, method.name());
            }
            ReplicationRecord { scenario: spec.name.clone(), j, n, method, replication: rep, seed, outcome }
        })
        .collect();

    let mut rows = Vec::new();
    if spec.replications > 0 {
        for &j in &spec.j_list {
            for &m in methods {
                let cell: Vec<&ReplicationRecord> = records.iter().filter(|r| r.j == j && r.method == m).collect();
                let ok: Vec<&EvalSummary> = cell.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
                let avg = |f: &dyn Fn(&EvalSummary) -> f64| mean(&ok.iter().map(|e| f(e)).collect::<Vec<_>>());
                let d_f = if ok.iter().all(|e| e.d_f.is_some()) && !ok.is_empty() {
                    Some(avg(&|e| e.d_f.unwrap()))
                } else {
                    None
                };
                rows.push(SummaryRow {
                    j,
                    n: spec.n_per_item * j,
                    method: m,
                    completed: ok.len(),
                    failed: cell.len() - ok.len(),
                    corr: (0..k).map(|kk| avg(&|e| e.corr[kk])).collect(),
                    sin: (0..k).map(|kk| avg(&|e| e.sin[kk])).collect(),
                    d_xa: avg(&|e| e.d_xa),
                    d_f,
                });
            }
        }
    }
    Ok(SummaryTable { scenario: spec.name.clone(), factors: k, rows, records })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

impl SummaryTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method".to_string(), "J".into(), "N".into(), "completed".into(), "failed".into()];
        header.extend((1..=self.factors).map(|k| format!("corr_x{k}")));
        header.extend((1..=self.factors).map(|k| format!("sin_x{k}")));
        header.extend(["d_xa".to_string(), "d_f".into()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.method.name().to_string(), r.j.to_string(), r.n.to_string(), r.completed.to_string(), r.failed.to_string()];
            rec.extend(r.corr.iter().chain(&r.sin).map(|v| format!("{v:.4}")));
            rec.push(format!("{:.4}", r.d_xa));
            rec.push(fmt_opt(r.d_f));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fixed-width report in the layout of the benchmark tables.
    pub fn report(&self) -> String {
        let k = self.factors;
        let mut s = format!("scenario {}\n", self.scenario);
        s.push_str(&format!("{:<16}{:>5}{:>6}", "method", "J", "N"));
        for kk in 1..=k {
            s.push_str(&format!("{:>9}", format!("Corr_x{kk}")));
        }
        for kk in 1..=k {
            s.push_str(&format!("{:>9}", format!("Sin_x{kk}")));
        }
        s.push_str(&format!("{:>9}{:>9}{:>8}\n", "d_XA", "d_f", "failed"));
        for r in &self.rows {
            s.push_str(&format!("{:<16}{:>5}{:>6}", r.method.name(), r.j, r.n));
            for v in r.corr.iter().chain(&r.sin) {
                s.push_str(&format!("{v:>9.3}"));
            }
            s.push_str(&format!("{:>9.3}{:>9}{:>8}\n", r.d_xa, r.d_f.map_or("-".into(), |v| format!("{v:.3}")), r.failed));
        }
        s
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}
