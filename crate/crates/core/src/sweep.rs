//! Seeded density sweeps over the drift fixture, their CSV files and the
//! regression checks run on them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::TiePolicy;
use crate::error::{Error, Result};
use crate::eval::{
    compare_prepared, default_top_k, prepare_documents, sweep_rows, EvalOptions, EvalReport, GlobalStats, MeanSe,
    SweepRow, SWEEP_HEADER,
};
use crate::fixture::{build_drift_fixture, DriftConfig};
use crate::importance::ImportanceStats;
use crate::model::{Model, TokenId};
use crate::pruning::Method;

/// `round(density · m)`, rejected when it falls outside `[1, m]`.
pub fn density_to_k(density: f64, m: usize) -> Result<usize> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::validation(format!("density must lie in (0, 1], got {density}")));
    }
    let k = (density * m as f64).round() as usize;
    if k == 0 {
        return Err(Error::validation(format!("density {density} keeps no units of {m}")));
    }
    Ok(k.min(m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub densities: Vec<f64>,
    pub methods: Vec<Method>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Fixture settings; the seed fields are overwritten per run.
    pub base: DriftConfig,
    pub top_k: Option<usize>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.densities.is_empty() || self.methods.is_empty() || self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(Error::validation("sweep needs at least one density, method, lambda and seed"));
        }
        for &l in &self.lambdas {
            crate::aggregation::check_lambda(l)?;
        }
        for &d in &self.densities {
            density_to_k(d, self.base.spec.ffn_width)?;
        }
        self.base.validate()
    }
}

/// One measurement of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub density: f64,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

pub const SEED_HEADER: [&str; 5] = ["seed", "density", "method", "metric", "value"];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    /// Across-seed mean and standard error of the per-seed means.
    pub rows: Vec<SweepRow>,
    pub per_seed: Vec<SeedRow>,
}

/// Row label of a method; fused methods carry λ when several are swept.
pub fn method_label(method: Method, lambda: f64, many_lambdas: bool) -> String {
    if many_lambdas && matches!(method, Method::AGlass | Method::IGlass) {
        format!("{}@{}", method.name(), lambda)
    } else {
        method.name().to_string()
    }
}

/// Inputs of a sweep over one model.
pub struct SweepInputs<'a> {
    pub seed: u64,
    pub model: &'a Model,
    pub documents: &'a [Vec<TokenId>],
    pub prompt_len: usize,
    pub globals: GlobalStats<'a>,
}

/// Per-seed rows for one model across densities, methods and lambdas.
pub fn sweep_model(inputs: &SweepInputs<'_>, cfg: &SweepConfig) -> Result<Vec<SeedRow>> {
    let m = inputs.model.ffn_width();
    let opts = EvalOptions {
        top_k: cfg.top_k.unwrap_or_else(|| default_top_k(inputs.model.vocab_size())),
        gen_len: None,
        tie_policy: TiePolicy::default(),
    };
    let prepared = prepare_documents(inputs.model, inputs.documents, inputs.prompt_len, &opts)?;
    let many = cfg.lambdas.len() > 1;
    let mut out = Vec::new();
    for &density in &cfg.densities {
        let k = density_to_k(density, m)?;
        for (li, &lambda) in cfg.lambdas.iter().enumerate() {
            // single-source methods do not depend on λ
            let methods: Vec<Method> = cfg
                .methods
                .iter()
                .copied()
                .filter(|m| li == 0 || matches!(m, Method::AGlass | Method::IGlass))
                .collect();
            if methods.is_empty() {
                continue;
            }
            let report = compare_prepared(inputs.model, &prepared, k, lambda, &methods, inputs.globals, &opts)?;
            for row in sweep_rows(&report) {
                if row.method == "dense" {
                    continue;
                }
                let method: Method = row.method.parse()?;
                out.push(SeedRow {
                    seed: inputs.seed,
                    density,
                    method: method_label(method, lambda, many),
                    metric: row.metric,
                    value: row.mean,
                });
            }
        }
    }
    Ok(out)
}

/// Build the drift fixture for every seed and sweep it.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let fcfg = cfg.base.reseeded(seed);
        let f = build_drift_fixture(&fcfg)?;
        let inputs = SweepInputs {
            seed,
            model: &f.model,
            documents: &f.documents,
            prompt_len: fcfg.prompt_len,
            globals: GlobalStats { activation: Some(&f.global_activation), impact: Some(&f.global_impact) },
        };
        log::info!("sweep seed {seed}");
        per_seed.extend(sweep_model(&inputs, cfg)?);
    }
    Ok(SweepOutput { rows: aggregate(&per_seed), per_seed })
}

/// Sweep a single, already built model with its own documents and stats.
pub fn sweep_single(
    model: &Model,
    documents: &[Vec<TokenId>],
    prompt_len: usize,
    activation: Option<&ImportanceStats>,
    impact: Option<&ImportanceStats>,
    cfg: &SweepConfig,
) -> Result<SweepOutput> {
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let inputs = SweepInputs { seed, model, documents, prompt_len, globals: GlobalStats { activation, impact } };
    let per_seed = sweep_model(&inputs, cfg)?;
    Ok(SweepOutput { rows: aggregate(&per_seed), per_seed })
}

/// Mean and standard error over seeds, keeping first-appearance order.
pub fn aggregate(per_seed: &[SeedRow]) -> Vec<SweepRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), (f64, Vec<f64>)> = BTreeMap::new();
    for r in per_seed {
        let key = (r.density.to_string(), r.method.clone(), r.metric.clone());
        let e = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (r.density, Vec::new())
        });
        e.1.push(r.value);
    }
    order
        .into_iter()
        .map(|key| {
            let (density, vals) = &groups[&key];
            let s = MeanSe::of(vals);
            SweepRow { density: *density, method: key.1, metric: key.2, mean: s.mean, stderr: s.stderr }
        })
        .collect()
}

pub fn per_seed_csv(rows: &[SeedRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SEED_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.seed.to_string(), r.density.to_string(), r.method.clone(), r.metric.clone(), r.value.to_string()])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        Error::Io(std::io::Error::other(e.to_string()))
    } else {
        Error::Schema(format!("csv: {e}"))
    }
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let got: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if got != header {
        return Err(Error::Schema(format!("unexpected CSV header {got:?}, expected {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    read_csv(path, &SWEEP_HEADER)
}

pub fn read_per_seed_csv(path: &Path) -> Result<Vec<SeedRow>> {
    read_csv(path, &SEED_HEADER)
}

fn lookup(rows: &[SeedRow], seed: u64, density: f64, method: &str, metric: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.seed == seed && (r.density - density).abs() < 1e-12 && r.method == method && r.metric == metric)
        .map(|r| r.value)
}

/// Outcome of comparing a candidate method against a baseline seed by seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GapCheck {
    pub density: f64,
    pub wins: usize,
    pub seeds: usize,
    pub losing_seeds: Vec<u64>,
}

impl GapCheck {
    pub fn fraction(&self) -> f64 {
        if self.seeds == 0 {
            0.0
        } else {
            self.wins as f64 / self.seeds as f64
        }
    }
}

/// For each seed, does `candidate`'s `metric` stay at or below `baseline`'s
/// at `density`? Seeds missing either row are an error.
pub fn check_gap(rows: &[SeedRow], candidate: &str, baseline: &str, density: f64, metric: &str) -> Result<GapCheck> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut check = GapCheck { density, wins: 0, seeds: seeds.len(), losing_seeds: Vec::new() };
    for s in seeds {
        let c = lookup(rows, s, density, candidate, metric);
        let b = lookup(rows, s, density, baseline, metric);
        match (c, b) {
            (Some(c), Some(b)) if c <= b => check.wins += 1,
            (Some(_), Some(_)) => check.losing_seeds.push(s),
            _ => {
                return Err(Error::validation(format!(
                    "seed {s} lacks {candidate} or {baseline} {metric} at density {density}"
                )))
            }
        }
    }
    Ok(check)
}

/// Densities at which the aggregated `metric` of `method` increases from the
/// previous (smaller) density; empty means non-increasing throughout.
pub fn monotone_violations(rows: &[SweepRow], method: &str, metric: &str) -> Vec<f64> {
    let mut pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.method == method && r.metric == metric).map(|r| (r.density, r.mean)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2).filter(|w| w[1].1 > w[0].1).map(|w| w[1].0).collect()
}

/// Rows of a single eval report in the sweep layout.
pub fn report_rows(report: &EvalReport) -> Vec<SweepRow> {
    sweep_rows(report)
}
