//! Random synthetic instances: grids, relaxed indicators, covariances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::grid::{Bus, GridModel, Line};

/// Random connected grid with `substations` substation buses (ids
/// `0..substations`), `load_buses` further buses each attached to a random
/// earlier bus, and `extra_lines` additional non-duplicate lines.
///
/// Impedances are drawn uniformly from `[0.01, 0.1]` per unit.
pub fn random_grid<R: Rng + ?Sized>(
    rng: &mut R,
    load_buses: usize,
    extra_lines: usize,
    substations: usize,
) -> GridModel {
    assert!(substations >= 1);
    let total = substations + load_buses;
    let buses = (0..total)
        .map(|id| Bus {
            id,
            label: id.to_string(),
            is_substation: id < substations,
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (substations..total).map(|k| (rng.random_range(0..k), k)).collect();
    let max_pairs = total * (total - 1) / 2;
    let mut attempts = 0;
    while pairs.len() < load_buses + extra_lines && attempts < 100 * (extra_lines + 1) {
        attempts += 1;
        let i = rng.random_range(0..total);
        let j = rng.random_range(0..total);
        if i == j || (i < substations && j < substations) || pairs.len() >= max_pairs {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if pairs.iter().any(|&(a, b)| (a.min(b), a.max(b)) == key) {
            continue;
        }
        pairs.push((i, j));
    }
    let lines = pairs
        .into_iter()
        .enumerate()
        .map(|(id, (from, to))| Line::new(id, from, to, rng.random_range(0.01..0.1), rng.random_range(0.01..0.1)))
        .collect();
    GridModel::new(buses, lines).expect("random grid is connected by construction")
}

pub fn random_connected_grid<R: Rng + ?Sized>(rng: &mut R, load_buses: usize, extra_lines: usize) -> GridModel {
    random_grid(rng, load_buses, extra_lines, 1)
}

/// Same topology with `r_ℓ = α·x_ℓ·u_ℓ`, `u_ℓ` uniform in `[1 − spread, 1 + spread]`.
pub fn with_proportional_resistance<R: Rng + ?Sized>(
    rng: &mut R,
    grid: &GridModel,
    alpha: f64,
    spread: f64,
) -> GridModel {
    let lines = grid
        .lines()
        .iter()
        .map(|l| Line {
            r: alpha * l.x * rng.random_range(1.0 - spread..=1.0 + spread),
            ..l.clone()
        })
        .collect();
    GridModel::new(grid.buses().to_vec(), lines).expect("topology unchanged")
}

/// Entries uniform in `[0.3, 1]`.
pub fn random_interior_b<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(0.3..1.0))
}

/// `M Mᵀ / n + ridge·I` with standard-uniform entries in `M`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, ridge: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * ridge
}
