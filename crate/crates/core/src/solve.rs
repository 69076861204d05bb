//! First-order solvers over the relaxed feasible sets.
//!
//! * projected gradient descent over the capped simplex
//!   `{b ∈ [0,1]^n : 1ᵀb = L}` or over the box `[0,1]^n`
//! * Frank-Wolfe over the capped simplex for the convex simplified model
//! * the two-stage detailed pipeline: convex problem first, its solution
//!   initializes PGD on the non-convex likelihood

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::ldf::Mode;
use crate::likelihood::{Likelihood, ModelKind, Objective};
use crate::stats::{InjectionStatistics, VoltageDataset};

/// Halvings allowed per PGD step while every trial lands on +∞.
pub const MAX_HALVINGS: usize = 30;

/// Sufficient-decrease constant for the backtracking rule.
pub const ARMIJO: f64 = 1e-4;

/// Backtracking limit once some trial step has a finite objective.
const LINE_SEARCH_HALVINGS: usize = 100;

const BISECTION_ITERS: usize = 200;
const BISECTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    Explicit(DVector<f64>),
    /// `(L/Le)·1`, or `½·1` for the box.
    #[default]
    Uniform,
    /// Uniform in `[0, 1]` from the config seed (then projected).
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Target number of active lines.
    pub total_lines: usize,
    pub seed: u64,
    pub init: Init,
    /// Backtrack (halve μ) until the step decreases the objective by at
    /// least `ARMIJO·∇fᵀΔb`. Off: plain fixed-step iterations that only
    /// back off from infinite objectives.
    pub line_search: bool,
}

impl SolverConfig {
    /// Step size defaults keyed by grid size: 0.007 up to 60 buses, 0.0005 beyond.
    pub fn default_step(num_buses: usize) -> f64 {
        if num_buses <= 60 {
            0.007
        } else {
            0.0005
        }
    }

    /// MAP step size defaults keyed by grid size: 0.08 up to 60 buses, 0.001 beyond.
    pub fn default_map_step(num_buses: usize) -> f64 {
        if num_buses <= 60 {
            0.08
        } else {
            0.001
        }
    }

    pub fn for_grid(grid: &GridModel) -> Self {
        Self {
            step_size: Self::default_step(grid.num_buses()),
            max_iters: 5000,
            tol: 1e-7,
            total_lines: grid.n(),
            seed: 0,
            init: Init::Uniform,
            line_search: true,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidInput("step size must be > 0".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("tolerance must be > 0".into()));
        }
        if self.total_lines == 0 || self.total_lines > dim {
            return Err(Error::InvalidInput(format!(
                "target line count {} must lie in 1..={dim}",
                self.total_lines
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    /// `b ∈ [0,1]^n`, `1ᵀb = total`
    CappedSimplex { total: f64 },
    /// `b ∈ [0,1]^n`
    Box,
}

impl Constraint {
    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        match *self {
            Constraint::CappedSimplex { total } => project_capped_simplex(y, total),
            Constraint::Box => project_box(y),
        }
    }

    /// Minimizer of `gᵀv` over the feasible set; ties go to the lowest index.
    pub fn linear_minimizer(&self, g: &DVector<f64>) -> DVector<f64> {
        match *self {
            Constraint::CappedSimplex { total } => smallest_entries_vertex(g, total.round() as usize),
            Constraint::Box => g.map(|v| if v < 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub b_relaxed: DVector<f64>,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    /// Frank-Wolfe duality gaps, one per iteration (empty for PGD).
    pub gap_trace: Vec<f64>,
    pub grad_norm_final: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// `max_b ∇f(b̌)ᵀ(b̌ − b)` over the feasible set; zero at a stationary point.
    pub stationarity_residual: f64,
}

/// Euclidean projection onto the capped simplex by bisection on the dual
/// multiplier `λ` with `b_i(λ) = clip(y_i − λ, 0, 1)`.
pub fn project_capped_simplex(y: &DVector<f64>, total: f64) -> DVector<f64> {
    let n = y.len();
    assert!(
        (0.0..=n as f64).contains(&total),
        "capped simplex total {total} outside [0, {n}]"
    );
    let clip = |lambda: f64| y.map(|v| (v - lambda).clamp(0.0, 1.0));
    let (mut lo, mut hi) = (y.min() - 1.0, y.max());
    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..BISECTION_ITERS {
        lambda = 0.5 * (lo + hi);
        let s = clip(lambda).sum();
        if (s - total).abs() < BISECTION_TOL {
            break;
        }
        if s > total {
            lo = lambda;
        } else {
            hi = lambda;
        }
    }
    // exact multiplier from the identified free set
    let b = clip(lambda);
    let (mut free_sum, mut free, mut ones) = (0.0, 0usize, 0usize);
    for (&bi, &yi) in b.iter().zip(y.iter()) {
        if bi >= 1.0 {
            ones += 1;
        } else if bi > 0.0 {
            free += 1;
            free_sum += yi;
        }
    }
    if free > 0 {
        let exact = (free_sum + ones as f64 - total) / free as f64;
        let refined = clip(exact);
        if (refined.sum() - total).abs() <= (b.sum() - total).abs() {
            return refined;
        }
    }
    b
}

pub fn project_box(y: &DVector<f64>) -> DVector<f64> {
    y.map(|v| v.clamp(0.0, 1.0))
}

/// Indices of the `count` smallest entries, ties broken by lowest index.
pub fn smallest_indices(g: &DVector<f64>, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[a].total_cmp(&g[b]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Vertex of the capped simplex with ones at the `count` smallest entries.
pub fn smallest_entries_vertex(g: &DVector<f64>, count: usize) -> DVector<f64> {
    let mut v = DVector::zeros(g.len());
    for k in smallest_indices(g, count) {
        v[k] = 1.0;
    }
    v
}

fn initial_point(config: &SolverConfig, dim: usize, constraint: Constraint) -> DVector<f64> {
    let raw = match &config.init {
        Init::Explicit(b) => b.clone(),
        Init::Uniform => match constraint {
            Constraint::CappedSimplex { total } => DVector::from_element(dim, total / dim as f64),
            Constraint::Box => DVector::from_element(dim, 0.5),
        },
        Init::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            DVector::from_fn(dim, |_, _| rng.random::<f64>())
        }
    };
    constraint.project(&raw)
}

fn fw_gap(constraint: Constraint, b: &DVector<f64>, g: &DVector<f64>) -> f64 {
    g.dot(&(b - constraint.linear_minimizer(g)))
}

/// Projected gradient descent `b ← Π(b − μ∇f(b))`.
///
/// A step that lands on an infinite objective is retried with a halved step
/// size, up to [`MAX_HALVINGS`] times; with `line_search` the same halving
/// enforces sufficient decrease. Stops when the ∞-norm iterate change or the
/// relative objective change, both rescaled to the nominal step, drops below
/// `tol`. Returns the best-objective iterate seen.
pub fn pgd(objective: &dyn Objective, constraint: Constraint, config: &SolverConfig) -> Result<SolverResult> {
    let dim = objective.dim();
    if let Constraint::CappedSimplex { .. } = constraint {
        config.validate(dim)?;
    } else if !(config.step_size > 0.0 && config.tol > 0.0) {
        return Err(Error::InvalidInput("step size and tolerance must be > 0".into()));
    }
    if let Init::Explicit(b) = &config.init {
        if b.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                got: b.len(),
            });
        }
    }
    let mut b = initial_point(config, dim, constraint);
    let (mut f, mut g) = objective.value_and_gradient(&b)?;
    let mut best = (b.clone(), f, g.clone());
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;

    for k in 0..config.max_iters {
        iterations = k + 1;
        let mut mu = config.step_size;
        let mut halvings = 0;
        let mut saw_finite = false;
        let step = loop {
            let cand = constraint.project(&(&b - &g * mu));
            let accepted = match objective.value_and_gradient(&cand) {
                Ok((fc, gc)) if fc.is_finite() => {
                    saw_finite = true;
                    let decrease = ARMIJO * g.dot(&(&cand - &b));
                    (!config.line_search || fc <= f + decrease).then_some((cand, fc, gc))
                }
                _ => None,
            };
            if let Some(step) = accepted {
                break Some(step);
            }
            halvings += 1;
            if !saw_finite && halvings > MAX_HALVINGS {
                return Err(Error::StepSizeCollapse {
                    iteration: k,
                    halvings: MAX_HALVINGS,
                });
            }
            if halvings > LINE_SEARCH_HALVINGS {
                // no descent even at a vanishing step: stationary to working precision
                break None;
            }
            mu *= 0.5;
        };
        let Some((cand, fc, gc)) = step else {
            converged = true;
            break;
        };
        // measured at the nominal step so backtracking cannot fake convergence
        let scale = config.step_size / mu;
        let change = (&cand - &b).amax() * scale;
        let delta = (f - fc).abs() * scale;
        b = cand;
        f = fc;
        g = gc;
        trace.push(f);
        if f < best.1 {
            best = (b.clone(), f, g.clone());
        }
        if change < config.tol || delta < config.tol * f.abs() {
            converged = true;
            break;
        }
    }

    let (b, f, g) = best;
    Ok(SolverResult {
        stationarity_residual: fw_gap(constraint, &b, &g),
        grad_norm_final: g.amax(),
        b_relaxed: b,
        objective: f,
        objective_trace: trace,
        gap_trace: Vec::new(),
        iterations_used: iterations,
        converged,
    })
}

/// Frank-Wolfe on the convex simplified likelihood over the capped simplex.
///
/// The linear step puts ones at the `L` smallest gradient entries; the update
/// is `b ← b + γ_k(v − b)` with `γ_k = 2/(k+2)`, `k = 1, 2, …`, so every
/// iterate is a strict convex combination of the interior start and LP
/// vertices. Stops once the duality gap `∇f̃(b)ᵀ(b − v)` falls below
/// `tol·max(1, |f̃|)`.
pub fn frank_wolfe(likelihood: &Likelihood<'_>, config: &SolverConfig) -> Result<SolverResult> {
    if likelihood.kind() != ModelKind::Simplified {
        return Err(Error::InvalidInput(
            "Frank-Wolfe is only defined here for the convex simplified model".into(),
        ));
    }
    let dim = likelihood.dim();
    config.validate(dim)?;
    let constraint = Constraint::CappedSimplex {
        total: config.total_lines as f64,
    };
    let mut b = match &config.init {
        Init::Explicit(b0) => constraint.project(b0),
        _ => DVector::from_element(dim, config.total_lines as f64 / dim as f64),
    };
    let mut trace = Vec::new();
    let mut gaps = Vec::new();
    let mut converged = false;
    let mut last = None;
    for k in 1..=config.max_iters {
        let (f, g) = likelihood.value_and_gradient(&b)?;
        let v = smallest_entries_vertex(&g, config.total_lines);
        let gap = g.dot(&(&b - &v));
        trace.push(f);
        gaps.push(gap);
        if gap <= config.tol * f.abs().max(1.0) {
            converged = true;
            last = Some((f, g));
            break;
        }
        let gamma = 2.0 / (k as f64 + 2.0);
        b += (v - &b) * gamma;
    }
    let (f, g) = match last {
        Some(fg) => fg,
        None => {
            let (f, g) = likelihood.value_and_gradient(&b)?;
            trace.push(f);
            (f, g)
        }
    };
    Ok(SolverResult {
        stationarity_residual: fw_gap(constraint, &b, &g),
        grad_norm_final: g.amax(),
        b_relaxed: b,
        objective: f,
        iterations_used: gaps.len(),
        objective_trace: trace,
        gap_trace: gaps,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvexSolver {
    #[default]
    Fw,
    Pgd,
}

impl std::str::FromStr for ConvexSolver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fw" => Ok(ConvexSolver::Fw),
            "pgd" => Ok(ConvexSolver::Pgd),
            other => Err(Error::InvalidInput(format!("unknown solver {other:?}"))),
        }
    }
}

/// Solves the convex simplified problem with the chosen solver.
pub fn solve_convex(likelihood: &Likelihood<'_>, solver: ConvexSolver, config: &SolverConfig) -> Result<SolverResult> {
    match solver {
        ConvexSolver::Fw => frank_wolfe(likelihood, config),
        ConvexSolver::Pgd => pgd(
            likelihood,
            Constraint::CappedSimplex {
                total: config.total_lines as f64,
            },
            config,
        ),
    }
}

#[derive(Debug, Clone)]
pub struct DetailedSolution {
    pub convex: SolverResult,
    pub detailed: SolverResult,
}

/// Convex simplified solve, then PGD on the detailed likelihood started from
/// the convex solution.
pub fn solve_ml_detailed(
    grid: &GridModel,
    stats: &InjectionStatistics,
    dataset: &VoltageDataset,
    mode: Mode,
    convex_solver: ConvexSolver,
    convex_config: &SolverConfig,
    config: &SolverConfig,
) -> Result<DetailedSolution> {
    let simplified = Likelihood::new(grid, stats, dataset, ModelKind::Simplified, mode)?;
    let convex = solve_convex(&simplified, convex_solver, convex_config)?;
    let detailed_lik = Likelihood::new(grid, stats, dataset, ModelKind::Detailed, mode)?;
    let cfg = SolverConfig {
        init: Init::Explicit(convex.b_relaxed.clone()),
        ..config.clone()
    };
    let detailed = pgd(
        &detailed_lik,
        Constraint::CappedSimplex {
            total: cfg.total_lines as f64,
        },
        &cfg,
    )?;
    Ok(DetailedSolution { convex, detailed })
}
