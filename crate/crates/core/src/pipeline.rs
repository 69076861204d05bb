//! End-to-end verification: solve the relaxed problem, then round.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::ldf::Mode;
use crate::likelihood::{Likelihood, MapObjective, ModelKind, Objective};
use crate::round::{round, RoundingMethod, RoundingReport};
use crate::solve::{pgd, solve_convex, Constraint, ConvexSolver, Init, SolverConfig, SolverResult};
use crate::stats::{InjectionStatistics, VoltageDataset};

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub model: ModelKind,
    pub mode: Mode,
    pub convex_solver: ConvexSolver,
    pub rounding: RoundingMethod,
    pub bernoulli_samples: usize,
    /// Convex stage (simplified model).
    pub convex: SolverConfig,
    /// Non-convex stage (detailed model), initialized from the convex result.
    /// Defaults to a tight tolerance: the relative-decrease test otherwise
    /// fires on the first slow iteration of an ill-conditioned descent.
    pub detailed: SolverConfig,
}

impl VerifyConfig {
    pub fn for_grid(grid: &GridModel) -> Self {
        Self {
            model: ModelKind::Detailed,
            mode: Mode::Radial,
            convex_solver: ConvexSolver::Fw,
            rounding: RoundingMethod::SpanningForest,
            bernoulli_samples: 2000,
            convex: SolverConfig {
                tol: 1e-6,
                max_iters: 2000,
                ..SolverConfig::for_grid(grid)
            },
            detailed: SolverConfig {
                tol: 1e-12,
                max_iters: 20_000,
                ..SolverConfig::for_grid(grid)
            },
        }
    }

    pub fn with_total_lines(mut self, total: usize) -> Self {
        self.convex.total_lines = total;
        self.detailed.total_lines = total;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.convex.seed = seed;
        self.detailed.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Verification {
    pub convex: SolverResult,
    /// Present for the detailed model.
    pub detailed: Option<SolverResult>,
    pub rounding: RoundingReport,
    /// Objective of the final relaxed solution under the selected model.
    pub objective_relaxed: f64,
}

impl Verification {
    pub fn relaxed(&self) -> &SolverResult {
        self.detailed.as_ref().unwrap_or(&self.convex)
    }

    pub fn b_hat(&self) -> &DVector<f64> {
        &self.rounding.b_binary
    }
}

/// ML verification: convex simplified solve, optional detailed refinement,
/// rounding under the selected model's objective.
pub fn verify_ml(
    grid: &GridModel,
    stats: &InjectionStatistics,
    dataset: &VoltageDataset,
    config: &VerifyConfig,
) -> Result<Verification> {
    let simplified = Likelihood::new(grid, stats, dataset, ModelKind::Simplified, config.mode)?;
    let convex = solve_convex(&simplified, config.convex_solver, &config.convex)?;
    let total = config.convex.total_lines;
    let (detailed, objective_relaxed, rounding) = match config.model {
        ModelKind::Simplified => {
            let r = round(
                config.rounding,
                grid,
                &simplified,
                &convex.b_relaxed,
                total,
                config.bernoulli_samples,
                config.convex.seed,
            )?;
            (None, convex.objective, r)
        }
        ModelKind::Detailed => {
            let lik = Likelihood::new(grid, stats, dataset, ModelKind::Detailed, config.mode)?;
            let cfg = SolverConfig {
                init: Init::Explicit(convex.b_relaxed.clone()),
                ..config.detailed.clone()
            };
            let res = pgd(&lik, Constraint::CappedSimplex { total: total as f64 }, &cfg)?;
            let r = round(
                config.rounding,
                grid,
                &lik,
                &res.b_relaxed,
                total,
                config.bernoulli_samples,
                cfg.seed,
            )?;
            let obj = res.objective;
            (Some(res), obj, r)
        }
    };
    Ok(Verification {
        convex,
        detailed,
        rounding,
        objective_relaxed,
    })
}

#[derive(Debug, Clone)]
pub struct MapConfig {
    pub model: ModelKind,
    pub mode: Mode,
    /// Box-constrained PGD settings; `total_lines` is ignored.
    pub solver: SolverConfig,
    pub threshold: f64,
}

impl MapConfig {
    /// The likelihood term carries the factor T/2, so the default step is the
    /// per-size MAP step divided by T/2; this keeps the effective step on the
    /// likelihood gradient independent of the sample count.
    pub fn for_grid(grid: &GridModel, t: usize) -> Self {
        Self {
            model: ModelKind::Detailed,
            mode: Mode::Radial,
            solver: SolverConfig {
                step_size: SolverConfig::default_map_step(grid.num_buses()) / (t.max(1) as f64 / 2.0),
                ..SolverConfig::for_grid(grid)
            },
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapVerification {
    /// Full-length relaxed vector (hard-prior lines at their pinned value).
    pub b_relaxed: DVector<f64>,
    pub result: SolverResult,
    pub b_hat: DVector<f64>,
    pub objective_relaxed: f64,
    pub objective_binary: f64,
    pub free_lines: Vec<usize>,
}

/// `1[b_ℓ ≥ threshold]`
pub fn threshold(b: &DVector<f64>, thr: f64) -> DVector<f64> {
    b.map(|v| if v >= thr { 1.0 } else { 0.0 })
}

pub fn verify_map(
    grid: &GridModel,
    stats: &InjectionStatistics,
    dataset: &VoltageDataset,
    priors: &[f64],
    config: &MapConfig,
) -> Result<MapVerification> {
    if !(0.0..=1.0).contains(&config.threshold) {
        return Err(Error::InvalidInput(format!(
            "threshold {} outside [0, 1]",
            config.threshold
        )));
    }
    let lik = Likelihood::new(grid, stats, dataset, config.model, config.mode)?;
    let map = MapObjective::new(&lik, priors, dataset.t())?;
    let free = map.free_lines().to_vec();
    let (result, b_relaxed) = if free.is_empty() {
        let b = map.expand(&DVector::zeros(0));
        let v = map.value(&DVector::zeros(0));
        let res = SolverResult {
            b_relaxed: DVector::zeros(0),
            objective: v,
            objective_trace: vec![v],
            gap_trace: Vec::new(),
            grad_norm_final: 0.0,
            iterations_used: 0,
            converged: true,
            stationarity_residual: 0.0,
        };
        (res, b)
    } else {
        let init = match &config.solver.init {
            Init::Explicit(b) if b.len() == grid.num_lines() => Init::Explicit(map.restrict(b)),
            other => other.clone(),
        };
        let cfg = SolverConfig {
            init,
            total_lines: free.len(),
            ..config.solver.clone()
        };
        let res = pgd(&map, Constraint::Box, &cfg)?;
        let b = map.expand(&res.b_relaxed);
        (res, b)
    };
    let b_hat = threshold(&b_relaxed, config.threshold);
    let objective_binary = map.value(&map.restrict(&b_hat));
    Ok(MapVerification {
        objective_relaxed: result.objective,
        b_relaxed,
        result,
        b_hat,
        objective_binary,
        free_lines: free,
    })
}
