//! Line infrastructure and incidence matrices.
//!
//! Buses are indexed contiguously in load order. The reduced incidence matrix
//! drops every substation column, so its columns follow the order of the
//! non-substation buses.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub label: String,
    pub is_substation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: usize,
    pub label: String,
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    /// Prior probability that the line is energized.
    pub prior: Option<f64>,
    pub switchable: bool,
}

impl Line {
    pub fn new(id: usize, from_bus: usize, to_bus: usize, r: f64, x: f64) -> Self {
        Self {
            id,
            label: id.to_string(),
            from_bus,
            to_bus,
            r,
            x,
            prior: None,
            switchable: true,
        }
    }

    /// `r² + x²`, the squared impedance magnitude.
    pub fn z2(&self) -> f64 {
        self.r * self.r + self.x * self.x
    }
}

/// Endpoints of a line in reduced (non-substation) coordinates.
///
/// `plus` carries the +1 entry (from bus) and `minus` the −1 entry (to bus);
/// an endpoint at a substation is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReducedEnds {
    pub plus: Option<usize>,
    pub minus: Option<usize>,
}

impl ReducedEnds {
    /// `aᵀ Q a` without materializing `a`.
    pub fn quad_form(&self, q: &DMatrix<f64>) -> f64 {
        match (self.plus, self.minus) {
            (Some(i), Some(j)) => q[(i, i)] + q[(j, j)] - q[(i, j)] - q[(j, i)],
            (Some(i), None) | (None, Some(i)) => q[(i, i)],
            (None, None) => 0.0,
        }
    }

    /// `uᵀ Q a` for a dense `u`.
    pub fn bilinear_left(&self, u: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
        let col = |k: usize| (0..u.len()).map(|i| u[i] * q[(i, k)]).sum::<f64>();
        self.plus.map_or(0.0, col) - self.minus.map_or(0.0, col)
    }

    /// `Q a` as a dense vector.
    pub fn apply(&self, q: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(q.nrows());
        if let Some(i) = self.plus {
            out += q.column(i);
        }
        if let Some(j) = self.minus {
            out -= q.column(j);
        }
        out
    }

    /// Adds `w · a aᵀ` into `m`.
    pub fn add_outer(&self, m: &mut DMatrix<f64>, w: f64) {
        if let Some(i) = self.plus {
            m[(i, i)] += w;
        }
        if let Some(j) = self.minus {
            m[(j, j)] += w;
        }
        if let (Some(i), Some(j)) = (self.plus, self.minus) {
            m[(i, j)] -= w;
            m[(j, i)] -= w;
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    /// bus id -> reduced column, `None` for substations
    column: Vec<Option<usize>>,
    ends: Vec<ReducedEnds>,
    n: usize,
}

impl GridModel {
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        if buses.is_empty() {
            return Err(Error::InvalidGrid("no buses".into()));
        }
        for (k, bus) in buses.iter().enumerate() {
            if bus.id != k {
                return Err(Error::InvalidGrid(format!(
                    "bus ids must be contiguous from 0; found {} at position {k}",
                    bus.id
                )));
            }
        }
        if !buses.iter().any(|b| b.is_substation) {
            return Err(Error::InvalidGrid("at least one substation is required".into()));
        }
        let total = buses.len();
        let mut seen_labels = std::collections::HashSet::new();
        for (k, line) in lines.iter().enumerate() {
            if line.id != k {
                return Err(Error::InvalidGrid(format!(
                    "line ids must be contiguous from 0; found {} at position {k}",
                    line.id
                )));
            }
            if !seen_labels.insert(line.label.as_str()) {
                return Err(Error::InvalidGrid(format!("duplicate line id {}", line.label)));
            }
            if line.from_bus >= total || line.to_bus >= total {
                return Err(Error::InvalidGrid(format!(
                    "line {} references an unknown bus",
                    line.label
                )));
            }
            if line.from_bus == line.to_bus {
                return Err(Error::InvalidGrid(format!("line {} is a self-loop", line.label)));
            }
            if !(line.r > 0.0 && line.r.is_finite()) || !(line.x > 0.0 && line.x.is_finite()) {
                return Err(Error::InvalidGrid(format!(
                    "line {} must have r > 0 and x > 0",
                    line.label
                )));
            }
            if let Some(p) = line.prior {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidGrid(format!(
                        "line {} prior {p} outside [0, 1]",
                        line.label
                    )));
                }
            }
        }

        let mut column = vec![None; total];
        let mut n = 0;
        for bus in &buses {
            if !bus.is_substation {
                column[bus.id] = Some(n);
                n += 1;
            }
        }
        if lines.len() < n {
            return Err(Error::InvalidGrid(format!(
                "{} candidate lines cannot connect {n} non-substation buses",
                lines.len()
            )));
        }
        let ends = lines
            .iter()
            .map(|l| ReducedEnds {
                plus: column[l.from_bus],
                minus: column[l.to_bus],
            })
            .collect();
        let grid = Self {
            buses,
            lines,
            column,
            ends,
            n,
        };
        if !grid.support_rank_ok(&DVector::from_element(grid.num_lines(), 1.0), 0.0) {
            return Err(Error::InvalidGrid(
                "some bus cannot reach a substation through the candidate lines".into(),
            ));
        }
        Ok(grid)
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Number of non-substation buses.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn substations(&self) -> impl Iterator<Item = &Bus> {
        self.buses.iter().filter(|b| b.is_substation)
    }

    /// Non-substation buses in reduced column order.
    pub fn load_buses(&self) -> impl Iterator<Item = &Bus> {
        self.buses.iter().filter(|b| !b.is_substation)
    }

    pub fn column_of(&self, bus: usize) -> Option<usize> {
        self.column[bus]
    }

    pub fn ends(&self, line: usize) -> ReducedEnds {
        self.ends[line]
    }

    pub fn all_ends(&self) -> &[ReducedEnds] {
        &self.ends
    }

    pub fn check_len(&self, b: &DVector<f64>) -> Result<()> {
        if b.len() != self.num_lines() {
            return Err(Error::LengthMismatch {
                expected: self.num_lines(),
                got: b.len(),
            });
        }
        Ok(())
    }

    /// Branch-bus incidence over all buses: +1 at `from_bus`, −1 at `to_bus`.
    pub fn incidence_full(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.num_lines(), self.num_buses());
        for (k, line) in self.lines.iter().enumerate() {
            a[(k, line.from_bus)] = 1.0;
            a[(k, line.to_bus)] = -1.0;
        }
        a
    }

    /// Incidence with every substation column removed.
    pub fn incidence_reduced(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.num_lines(), self.n);
        for (k, e) in self.ends.iter().enumerate() {
            if let Some(i) = e.plus {
                a[(k, i)] = 1.0;
            }
            if let Some(j) = e.minus {
                a[(k, j)] = -1.0;
            }
        }
        a
    }

    /// `Σ_ℓ w_ℓ a_ℓ a_ℓᵀ` over the reduced incidence rows.
    pub fn weighted_laplacian(&self, weights: impl IntoIterator<Item = f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (e, w) in self.ends.iter().zip(weights) {
            if w != 0.0 {
                e.add_outer(&mut m, w);
            }
        }
        m
    }

    /// True iff the reduced incidence rows with `b_ℓ > tol` have rank N,
    /// i.e. every non-substation bus reaches some substation through the
    /// support. Decided by union-find, not by a floating-point rank.
    pub fn support_rank_ok(&self, b: &DVector<f64>, tol: f64) -> bool {
        if b.len() != self.num_lines() {
            return false;
        }
        let mut dsu = DisjointSet::new(self.num_buses() + 1);
        let root = self.num_buses();
        for bus in self.substations() {
            dsu.union(bus.id, root);
        }
        for (line, &bl) in self.lines.iter().zip(b.iter()) {
            if bl > tol {
                dsu.union(line.from_bus, line.to_bus);
            }
        }
        let r = dsu.find(root);
        self.load_buses().all(|bus| dsu.find(bus.id) == r)
    }

    /// Binary vector with ones on the given line indices.
    pub fn indicator(&self, active: impl IntoIterator<Item = usize>) -> DVector<f64> {
        let mut b = DVector::zeros(self.num_lines());
        for k in active {
            b[k] = 1.0;
        }
        b
    }
}

/// Union-find with path halving and union by size.
#[derive(Debug, Clone)]
pub(crate) struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false if `a` and `b` were already joined.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}
