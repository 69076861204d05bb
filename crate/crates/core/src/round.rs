//! Rounding a relaxed indicator vector to a binary topology.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DisjointSet, GridModel};
use crate::likelihood::Objective;
use crate::solve::smallest_indices;

/// Entries above this count as active when checking support rank.
pub const SUPPORT_TOL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMethod {
    #[serde(rename = "topl")]
    TopL,
    #[default]
    #[serde(rename = "forest")]
    SpanningForest,
    Bernoulli,
}

impl std::str::FromStr for RoundingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topl" => Ok(RoundingMethod::TopL),
            "forest" => Ok(RoundingMethod::SpanningForest),
            "bernoulli" => Ok(RoundingMethod::Bernoulli),
            other => Err(Error::InvalidInput(format!("unknown rounding method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundingReport {
    pub b_binary: DVector<f64>,
    pub method: RoundingMethod,
    /// `+∞` when the binary support is rank deficient.
    pub objective_at_binary: f64,
    pub feasible: bool,
    /// Bernoulli draws taken (zero for deterministic methods).
    pub samples_drawn: usize,
}

fn report(
    grid: &GridModel,
    objective: &dyn Objective,
    b: DVector<f64>,
    method: RoundingMethod,
    samples_drawn: usize,
) -> RoundingReport {
    RoundingReport {
        feasible: grid.support_rank_ok(&b, SUPPORT_TOL),
        objective_at_binary: objective.value(&b),
        b_binary: b,
        method,
        samples_drawn,
    }
}

/// Ones at the `count` largest entries; ties go to the lowest index.
pub fn top_l(b: &DVector<f64>, count: usize) -> DVector<f64> {
    let neg = -b;
    let mut out = DVector::zeros(b.len());
    for k in smallest_indices(&neg, count) {
        out[k] = 1.0;
    }
    out
}

/// Maximum-weight spanning forest with all substations merged into one root
/// (Kruskal, ties by lowest line index), then the `count − N` heaviest
/// remaining lines.
pub fn spanning_forest(grid: &GridModel, weights: &DVector<f64>, count: usize) -> Result<DVector<f64>> {
    grid.check_len(weights)?;
    let n = grid.n();
    if count < n || count > grid.num_lines() {
        return Err(Error::InvalidInput(format!(
            "a spanning forest needs between {n} and {} lines, asked for {count}",
            grid.num_lines()
        )));
    }
    let mut order: Vec<usize> = (0..grid.num_lines()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));

    let root = grid.num_buses();
    let mut dsu = DisjointSet::new(root + 1);
    for bus in grid.substations() {
        dsu.union(bus.id, root);
    }
    let mut out = DVector::zeros(grid.num_lines());
    let mut taken = 0;
    for &k in &order {
        let line = &grid.lines()[k];
        if dsu.union(line.from_bus, line.to_bus) {
            out[k] = 1.0;
            taken += 1;
        }
    }
    if taken < n {
        return Err(Error::DisconnectedInfrastructure);
    }
    for &k in &order {
        if taken == count {
            break;
        }
        if out[k] == 0.0 {
            out[k] = 1.0;
            taken += 1;
        }
    }
    Ok(out)
}

pub fn round_top_l(
    grid: &GridModel,
    objective: &dyn Objective,
    b_relaxed: &DVector<f64>,
    count: usize,
) -> Result<RoundingReport> {
    grid.check_len(b_relaxed)?;
    if count > b_relaxed.len() {
        return Err(Error::InvalidInput(format!(
            "cannot select {count} of {} lines",
            b_relaxed.len()
        )));
    }
    Ok(report(
        grid,
        objective,
        top_l(b_relaxed, count),
        RoundingMethod::TopL,
        0,
    ))
}

pub fn round_spanning_forest(
    grid: &GridModel,
    objective: &dyn Objective,
    b_relaxed: &DVector<f64>,
    count: usize,
) -> Result<RoundingReport> {
    let b = spanning_forest(grid, b_relaxed, count)?;
    Ok(report(grid, objective, b, RoundingMethod::SpanningForest, 0))
}

/// Draws `samples` configurations with `Pr(b_ℓ = 1) = b̄_ℓ`, keeps those with
/// exactly `count` lines and full support rank, and returns the one with the
/// smallest objective. Falls back to top-L when no draw qualifies.
pub fn round_bernoulli(
    grid: &GridModel,
    objective: &dyn Objective,
    b_relaxed: &DVector<f64>,
    count: usize,
    samples: usize,
    seed: u64,
) -> Result<RoundingReport> {
    grid.check_len(b_relaxed)?;
    if samples == 0 {
        return Err(Error::InvalidInput("at least one Bernoulli sample is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for _ in 0..samples {
        let draw = b_relaxed.map(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        if draw.sum() as usize != count || !grid.support_rank_ok(&draw, SUPPORT_TOL) {
            continue;
        }
        if best.as_ref().is_some_and(|(_, b)| *b == draw) {
            continue;
        }
        let value = objective.value(&draw);
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((value, draw));
        }
    }
    match best {
        Some((value, b)) => Ok(RoundingReport {
            b_binary: b,
            method: RoundingMethod::Bernoulli,
            objective_at_binary: value,
            feasible: true,
            samples_drawn: samples,
        }),
        None => {
            let mut r = round_top_l(grid, objective, b_relaxed, count)?;
            r.samples_drawn = samples;
            Ok(r)
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn round(
    method: RoundingMethod,
    grid: &GridModel,
    objective: &dyn Objective,
    b_relaxed: &DVector<f64>,
    count: usize,
    samples: usize,
    seed: u64,
) -> Result<RoundingReport> {
    match method {
        RoundingMethod::TopL => round_top_l(grid, objective, b_relaxed, count),
        RoundingMethod::SpanningForest => round_spanning_forest(grid, objective, b_relaxed, count),
        RoundingMethod::Bernoulli => round_bernoulli(grid, objective, b_relaxed, count, samples, seed),
    }
}

/// Calls `visit` on every `k`-subset of `0..n` in lexicographic order.
pub fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exhaustive minimum of `objective` over binary vectors with `count` ones.
/// Returns `None` when every support is infeasible.
pub fn enumerate_best(objective: &dyn Objective, count: usize) -> Option<(f64, DVector<f64>)> {
    let le = objective.dim();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for_each_combination(le, count, |subset| {
        let mut b = DVector::zeros(le);
        for &k in subset {
            b[k] = 1.0;
        }
        let v = objective.value(&b);
        if v.is_finite() && best.as_ref().is_none_or(|(bv, _)| v < *bv) {
            best = Some((v, b));
        }
    });
    best
}
