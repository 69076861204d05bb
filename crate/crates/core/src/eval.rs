//! Verification metrics, baseline topologies and the Monte Carlo harness.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::ldf::rx;
use crate::likelihood::{Likelihood, ModelKind, Objective};
use crate::pipeline::{threshold, verify_map, verify_ml, MapConfig, VerifyConfig};
use crate::round::spanning_forest;
use crate::stats::{
    model_covariance_detailed, sample_covariance, simulate_voltages, InjectionStatistics, VoltageDataset,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    pub line_errors: usize,
    pub error_probability: f64,
    /// Over switchable lines; 1 when none is active.
    pub true_positive_rate: f64,
    /// Over switchable lines; 0 when all are active.
    pub false_positive_rate: f64,
}

impl VerificationMetrics {
    pub fn nan() -> Self {
        Self {
            line_errors: 0,
            error_probability: f64::NAN,
            true_positive_rate: f64::NAN,
            false_positive_rate: f64::NAN,
        }
    }
}

/// Line-status mismatches over all lines; TPR/FPR over the lines flagged in
/// `switchable`, with active lines as positives.
pub fn compare_topologies(
    b_hat: &DVector<f64>,
    b_true: &DVector<f64>,
    switchable: &[bool],
) -> Result<VerificationMetrics> {
    if b_hat.len() != b_true.len() {
        return Err(Error::LengthMismatch {
            expected: b_true.len(),
            got: b_hat.len(),
        });
    }
    if switchable.len() != b_true.len() {
        return Err(Error::LengthMismatch {
            expected: b_true.len(),
            got: switchable.len(),
        });
    }
    let (mut errors, mut tp, mut fp, mut pos, mut neg) = (0, 0, 0, 0, 0);
    for ((&h, &t), &s) in b_hat.iter().zip(b_true.iter()).zip(switchable) {
        let (h, t) = (h > 0.5, t > 0.5);
        errors += usize::from(h != t);
        if s {
            if t {
                pos += 1;
                tp += usize::from(h);
            } else {
                neg += 1;
                fp += usize::from(h);
            }
        }
    }
    let le = b_true.len().max(1);
    Ok(VerificationMetrics {
        line_errors: errors,
        error_probability: errors as f64 / le as f64,
        true_positive_rate: if pos == 0 { 1.0 } else { tp as f64 / pos as f64 },
        false_positive_rate: if neg == 0 { 0.0 } else { fp as f64 / neg as f64 },
    })
}

pub fn switchable_mask(grid: &GridModel) -> Vec<bool> {
    grid.lines().iter().map(|l| l.switchable).collect()
}

/// Spanning forest under i.i.d. uniform weights plus `total − N` further
/// lines chosen uniformly.
pub fn random_feasible_topology<R: Rng + ?Sized>(grid: &GridModel, total: usize, rng: &mut R) -> Result<DVector<f64>> {
    let w = DVector::from_fn(grid.num_lines(), |_, _| rng.random::<f64>());
    let forest = spanning_forest(grid, &w, grid.n())?;
    if total < grid.n() || total > grid.num_lines() {
        return Err(Error::InvalidInput(format!(
            "line count {total} outside {}..={}",
            grid.n(),
            grid.num_lines()
        )));
    }
    let mut rest: Vec<usize> = (0..grid.num_lines()).filter(|&k| forest[k] == 0.0).collect();
    let mut b = forest;
    for _ in grid.n()..total {
        let pick = rest.swap_remove(rng.random_range(0..rest.len()));
        b[pick] = 1.0;
    }
    Ok(b)
}

/// Inverse-covariance baseline: score lines from the pseudo-inverse `P` of
/// the sample covariance and keep a maximum-weight spanning forest.
///
/// A line between load buses `i, j` scores `−P_ij`; a line from a substation
/// to load bus `i` scores the row sum `Σ_j P_ij`, the entry the removed
/// substation column would carry if `P` were a grounded Laplacian.
pub fn inverse_covariance_topology(grid: &GridModel, sample_cov: &DMatrix<f64>, total: usize) -> Result<DVector<f64>> {
    if sample_cov.shape() != (grid.n(), grid.n()) {
        return Err(Error::LengthMismatch {
            expected: grid.n(),
            got: sample_cov.nrows(),
        });
    }
    let scale = sample_cov.amax().max(f64::MIN_POSITIVE);
    let p = sample_cov
        .clone()
        .pseudo_inverse(1e-12 * scale)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let scores = DVector::from_iterator(
        grid.num_lines(),
        grid.all_ends().iter().map(|e| match (e.plus, e.minus) {
            (Some(i), Some(j)) => -p[(i, j)],
            (Some(i), None) | (None, Some(i)) => p.row(i).sum(),
            (None, None) => f64::NEG_INFINITY,
        }),
    );
    spanning_forest(grid, &scores, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    MlDetailed,
    MlSimplified,
    Map,
    Random,
    InverseCovariance,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::MlDetailed,
        Scheme::MlSimplified,
        Scheme::Map,
        Scheme::Random,
        Scheme::InverseCovariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::MlDetailed => "ml_detailed",
            Scheme::MlSimplified => "ml_simplified",
            Scheme::Map => "map",
            Scheme::Random => "random",
            Scheme::InverseCovariance => "inverse_covariance",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloConfig {
    pub runs: usize,
    pub t_grid: Vec<usize>,
    pub schemes: Vec<Scheme>,
    /// Lines beyond a spanning forest in each random true topology.
    pub extra_lines: usize,
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    pub verify: VerifyConfig,
    /// MAP settings; the step size is rescaled per T as in [`MapConfig::for_grid`]
    /// unless `map_step` is set.
    pub map: MapConfig,
    pub map_step: Option<f64>,
    pub priors: Vec<f64>,
    /// Thresholds for the MAP ROC sweep.
    pub thresholds: Vec<f64>,
    /// Replace the sample covariance by the ensemble covariance.
    pub asymptotic: bool,
}

impl MonteCarloConfig {
    pub fn for_grid(grid: &GridModel) -> Self {
        Self {
            runs: 30,
            t_grid: vec![10, 50, 200, 500],
            schemes: vec![Scheme::MlDetailed, Scheme::Random],
            extra_lines: 0,
            seed: 0,
            jobs: 0,
            verify: VerifyConfig::for_grid(grid),
            map: MapConfig::for_grid(grid, 1),
            map_step: None,
            priors: vec![0.5; grid.num_lines()],
            thresholds: default_thresholds(),
            asymptotic: false,
        }
    }
}

/// `0.05, 0.10, …, 0.60`
pub fn default_thresholds() -> Vec<f64> {
    (1..=12).map(|k| k as f64 * 0.05).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub run: usize,
    pub scheme: Scheme,
    pub t: usize,
    pub metrics: VerificationMetrics,
    pub runtime_ms: f64,
    pub objective_relaxed: f64,
    pub objective_binary: f64,
    /// The estimated topology reaches every bus from a substation.
    pub rank_ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RocPoint {
    pub run: usize,
    pub t: usize,
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MonteCarloResult {
    pub records: Vec<RunRecord>,
    pub roc: Vec<RocPoint>,
}

/// Independent, well-mixed seed per run.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ (run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).random()
}

/// Simulates once per run at the largest T and verifies on prefixes.
pub fn monte_carlo(
    grid: &GridModel,
    stats: &InjectionStatistics,
    config: &MonteCarloConfig,
) -> Result<MonteCarloResult> {
    if config.t_grid.is_empty() || config.t_grid.contains(&0) {
        return Err(Error::InvalidInput("sample counts must be positive".into()));
    }
    if config.schemes.is_empty() {
        return Err(Error::InvalidInput("no scheme selected".into()));
    }
    let total = grid.n() + config.extra_lines;
    if total > grid.num_lines() {
        return Err(Error::InvalidInput(format!(
            "{} extra lines exceed the {} non-tree candidates",
            config.extra_lines,
            grid.num_lines() - grid.n()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let per_run: Vec<MonteCarloResult> = pool.install(|| {
        (0..config.runs)
            .into_par_iter()
            .map(|run| one_run(grid, stats, config, run))
            .collect()
    });
    let mut out = MonteCarloResult::default();
    for r in per_run {
        out.records.extend(r.records);
        out.roc.extend(r.roc);
    }
    Ok(out)
}

fn failed(run: usize, scheme: Scheme, t: usize, message: String) -> RunRecord {
    RunRecord {
        run,
        scheme,
        t,
        metrics: VerificationMetrics::nan(),
        runtime_ms: f64::NAN,
        objective_relaxed: f64::NAN,
        objective_binary: f64::NAN,
        rank_ok: false,
        error: Some(message),
    }
}

/// True topology, the simulated magnitudes (none when asymptotic) and the
/// ensemble covariance for one run.
type RunData = (DVector<f64>, Option<DMatrix<f64>>, DMatrix<f64>);

fn run_data(
    grid: &GridModel,
    stats: &InjectionStatistics,
    config: &MonteCarloConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RunData> {
    let total = grid.n() + config.extra_lines;
    let truth = random_feasible_topology(grid, total, rng)?;
    let t_max = *config.t_grid.iter().max().unwrap();
    let sim_seed: u64 = rng.random();
    let raw = if config.asymptotic {
        None
    } else {
        Some(simulate_voltages(
            grid,
            &truth,
            stats,
            t_max,
            sim_seed,
            config.verify.mode,
        )?)
    };
    let ensemble = model_covariance_detailed(&rx(grid, &truth, config.verify.mode)?, stats);
    Ok((truth, raw, ensemble))
}

fn one_run(grid: &GridModel, stats: &InjectionStatistics, config: &MonteCarloConfig, run: usize) -> MonteCarloResult {
    let seed = run_seed(config.seed, run);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = grid.n() + config.extra_lines;
    let mask = switchable_mask(grid);
    let mut out = MonteCarloResult::default();
    let data = run_data(grid, stats, config, &mut rng);
    let baseline_seed: u64 = rng.random();

    for &t in &config.t_grid {
        let prepared = data
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|(truth, raw, ensemble)| {
                let dataset = match raw {
                    Some(raw) => sample_covariance(&raw.rows(0, t + 1).into_owned()).map_err(|e| e.to_string())?,
                    None => VoltageDataset::from_covariance(ensemble.clone(), t),
                };
                Ok((truth, dataset))
            });
        let (truth, dataset) = match prepared {
            Ok(p) => p,
            Err(message) => {
                for &s in &config.schemes {
                    out.records.push(failed(run, s, t, message.clone()));
                }
                continue;
            }
        };
        let detailed = Likelihood::new(grid, stats, &dataset, ModelKind::Detailed, config.verify.mode);
        for &scheme in &config.schemes {
            let start = Instant::now();
            let outcome: Result<(DVector<f64>, f64, f64)> = match scheme {
                Scheme::MlDetailed | Scheme::MlSimplified => {
                    let model = if scheme == Scheme::MlDetailed {
                        ModelKind::Detailed
                    } else {
                        ModelKind::Simplified
                    };
                    let cfg = VerifyConfig {
                        model,
                        ..config.verify.clone()
                    }
                    .with_total_lines(total)
                    .with_seed(seed);
                    verify_ml(grid, stats, &dataset, &cfg).map(|v| {
                        (
                            v.rounding.b_binary.clone(),
                            v.objective_relaxed,
                            v.rounding.objective_at_binary,
                        )
                    })
                }
                Scheme::Map => {
                    let mut cfg = config.map.clone();
                    cfg.solver.step_size = config
                        .map_step
                        .unwrap_or_else(|| MapConfig::for_grid(grid, t).solver.step_size);
                    cfg.solver.seed = seed;
                    verify_map(grid, stats, &dataset, &config.priors, &cfg).map(|m| {
                        for &thr in &config.thresholds {
                            let b = threshold(&m.b_relaxed, thr);
                            if let Ok(metrics) = compare_topologies(&b, truth, &mask) {
                                out.roc.push(RocPoint {
                                    run,
                                    t,
                                    threshold: thr,
                                    tpr: metrics.true_positive_rate,
                                    fpr: metrics.false_positive_rate,
                                });
                            }
                        }
                        (m.b_hat, m.objective_relaxed, m.objective_binary)
                    })
                }
                Scheme::Random => {
                    let mut brng = ChaCha8Rng::seed_from_u64(baseline_seed ^ t as u64);
                    random_feasible_topology(grid, total, &mut brng).map(|b| {
                        let f = detailed.as_ref().map_or(f64::NAN, |l| l.value(&b));
                        (b, f64::NAN, f)
                    })
                }
                Scheme::InverseCovariance => inverse_covariance_topology(grid, dataset.sample_cov(), total).map(|b| {
                    let f = detailed.as_ref().map_or(f64::NAN, |l| l.value(&b));
                    (b, f64::NAN, f)
                }),
            };
            let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
            out.records.push(
                match outcome.and_then(|(b, fr, fb)| {
                    compare_topologies(&b, truth, &mask).map(|m| (m, fr, fb, grid.support_rank_ok(&b, 0.5)))
                }) {
                    Ok((metrics, objective_relaxed, objective_binary, rank_ok)) => RunRecord {
                        run,
                        scheme,
                        t,
                        metrics,
                        runtime_ms,
                        objective_relaxed,
                        objective_binary,
                        rank_ok,
                        error: None,
                    },
                    Err(e) => failed(run, scheme, t, e.to_string()),
                },
            );
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub scheme: Scheme,
    pub t: usize,
    pub runs_ok: usize,
    pub runs_failed: usize,
    pub mean_error_probability: f64,
    pub mean_tpr: f64,
    pub mean_fpr: f64,
    pub mean_runtime_ms: f64,
}

/// Means over successful runs per (scheme, T), sorted by scheme then T.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Scheme, usize)> = records.iter().map(|r| (r.scheme, r.t)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(scheme, t)| {
            let group: Vec<&RunRecord> = records.iter().filter(|r| r.scheme == scheme && r.t == t).collect();
            let ok: Vec<&&RunRecord> = group.iter().filter(|r| r.error.is_none()).collect();
            let mean = |f: &dyn Fn(&RunRecord) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            SummaryRow {
                scheme,
                t,
                runs_ok: ok.len(),
                runs_failed: group.len() - ok.len(),
                mean_error_probability: mean(&|r| r.metrics.error_probability),
                mean_tpr: mean(&|r| r.metrics.true_positive_rate),
                mean_fpr: mean(&|r| r.metrics.false_positive_rate),
                mean_runtime_ms: mean(&|r| r.runtime_ms),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RocRow {
    pub t: usize,
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Mean TPR/FPR per (T, threshold), thresholds ascending.
pub fn roc_curve(points: &[RocPoint]) -> Vec<RocRow> {
    let mut keys: Vec<(usize, f64)> = points.iter().map(|p| (p.t, p.threshold)).collect();
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    keys.dedup();
    keys.into_iter()
        .map(|(t, thr)| {
            let g: Vec<&RocPoint> = points.iter().filter(|p| p.t == t && p.threshold == thr).collect();
            let n = g.len() as f64;
            RocRow {
                t,
                threshold: thr,
                tpr: g.iter().map(|p| p.tpr).sum::<f64>() / n,
                fpr: g.iter().map(|p| p.fpr).sum::<f64>() / n,
            }
        })
        .collect()
}

/// True when, for every T, TPR and FPR are both non-increasing in the
/// threshold (raising the threshold only removes lines).
pub fn roc_is_monotone(rows: &[RocRow]) -> bool {
    rows.windows(2)
        .filter(|w| w[0].t == w[1].t)
        .all(|w| w[1].threshold > w[0].threshold && w[1].tpr <= w[0].tpr + 1e-12 && w[1].fpr <= w[0].fpr + 1e-12)
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

pub const RECORD_COLUMNS: [&str; 10] = [
    "run",
    "scheme",
    "T",
    "line_errors",
    "error_probability",
    "tpr",
    "fpr",
    "runtime_ms",
    "objective_relaxed",
    "objective_binary",
];

/// Per-run table. `include_runtime = false` blanks the wall-clock column so
/// the output is byte-reproducible.
pub fn format_records_csv(records: &[RunRecord], include_runtime: bool) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RECORD_COLUMNS).unwrap();
    for r in records {
        let failed = r.error.is_some();
        w.write_record([
            r.run.to_string(),
            r.scheme.to_string(),
            r.t.to_string(),
            if failed {
                "NaN".into()
            } else {
                r.metrics.line_errors.to_string()
            },
            num(r.metrics.error_probability),
            num(r.metrics.true_positive_rate),
            num(r.metrics.false_positive_rate),
            if include_runtime {
                num(r.runtime_ms)
            } else {
                "NaN".into()
            },
            num(r.objective_relaxed),
            num(r.objective_binary),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn format_summary_csv(rows: &[SummaryRow], include_runtime: bool) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "scheme",
        "T",
        "runs_ok",
        "runs_failed",
        "error_probability",
        "tpr",
        "fpr",
        "runtime_ms",
    ])
    .unwrap();
    for r in rows {
        w.write_record([
            r.scheme.to_string(),
            r.t.to_string(),
            r.runs_ok.to_string(),
            r.runs_failed.to_string(),
            num(r.mean_error_probability),
            num(r.mean_tpr),
            num(r.mean_fpr),
            if include_runtime {
                num(r.mean_runtime_ms)
            } else {
                "NaN".into()
            },
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn format_roc_csv(rows: &[RocRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["T", "threshold", "tpr", "fpr"]).unwrap();
    for r in rows {
        w.write_record([r.t.to_string(), num(r.threshold), num(r.tpr), num(r.fpr)])
            .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}
