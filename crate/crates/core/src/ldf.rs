//! Linearized DistFlow sensitivities of squared voltage magnitudes to power
//! injections, parameterized by the relaxed line-indicator vector.
//!
//! Radial mode uses `R(b) = [½ Σ (b_ℓ/r_ℓ) a_ℓ a_ℓᵀ]⁻¹` (and likewise for X).
//! Meshed mode scales each line's contribution to the bus conductance and
//! susceptance matrices by `b_ℓ` and returns `R̃ = 2(G + B G⁻¹ B)⁻¹`,
//! `X̃ = 2(B + G B⁻¹ G)⁻¹`. On a spanning tree both coincide.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::linalg::{symmetrize, SpdFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Radial,
    Meshed,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radial" => Ok(Mode::Radial),
            "meshed" => Ok(Mode::Meshed),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?}"))),
        }
    }
}

/// Extra factors the meshed derivatives need.
#[derive(Debug, Clone)]
struct Coupling {
    /// B G⁻¹
    b_ginv: DMatrix<f64>,
    /// G B⁻¹
    g_binv: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LdfMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub mode: Mode,
    coupling: Option<Coupling>,
}

pub fn rx(grid: &GridModel, b: &DVector<f64>, mode: Mode) -> Result<LdfMatrices> {
    match mode {
        Mode::Radial => rx_radial(grid, b),
        Mode::Meshed => rx_meshed(grid, b),
    }
}

fn inverse_of(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    SpdFactor::new(m).map(|f| f.inverse()).ok_or(Error::SingularTopology)
}

pub fn rx_radial(grid: &GridModel, b: &DVector<f64>) -> Result<LdfMatrices> {
    grid.check_len(b)?;
    let lines = grid.lines();
    let r_inv = grid.weighted_laplacian(lines.iter().zip(b.iter()).map(|(l, &bl)| 0.5 * bl / l.r));
    let x_inv = grid.weighted_laplacian(lines.iter().zip(b.iter()).map(|(l, &bl)| 0.5 * bl / l.x));
    Ok(LdfMatrices {
        r: inverse_of(&r_inv)?,
        x: inverse_of(&x_inv)?,
        mode: Mode::Radial,
        coupling: None,
    })
}

/// `(G(b), B(b))` with line terms `b_ℓ r_ℓ/|z_ℓ|²` and `b_ℓ x_ℓ/|z_ℓ|²`.
pub fn conductance_susceptance(grid: &GridModel, b: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let lines = grid.lines();
    let g = grid.weighted_laplacian(lines.iter().zip(b.iter()).map(|(l, &bl)| bl * l.r / l.z2()));
    let s = grid.weighted_laplacian(lines.iter().zip(b.iter()).map(|(l, &bl)| bl * l.x / l.z2()));
    (g, s)
}

pub fn rx_meshed(grid: &GridModel, b: &DVector<f64>) -> Result<LdfMatrices> {
    grid.check_len(b)?;
    let (g, s) = conductance_susceptance(grid, b);
    let g_inv = inverse_of(&g)?;
    let s_inv = inverse_of(&s)?;
    let b_ginv = &s * &g_inv;
    let g_binv = &g * &s_inv;
    let m_r = symmetrize(&(&g + &b_ginv * &s));
    let m_x = symmetrize(&(&s + &g_binv * &g));
    Ok(LdfMatrices {
        r: inverse_of(&m_r)? * 2.0,
        x: inverse_of(&m_x)? * 2.0,
        mode: Mode::Meshed,
        coupling: Some(Coupling { b_ginv, g_binv }),
    })
}

impl LdfMatrices {
    /// `(∂R/∂b_ℓ, ∂X/∂b_ℓ)` at the point these matrices were built for.
    pub fn derivative(&self, grid: &GridModel, line: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let l = &grid.lines()[line];
        let e = grid.ends(line);
        match &self.coupling {
            None => {
                let pr = e.apply(&self.r);
                let px = e.apply(&self.x);
                (&pr * pr.transpose() * (-0.5 / l.r), &px * px.transpose() * (-0.5 / l.x))
            }
            Some(c) => {
                let (gl, sl) = (l.r / l.z2(), l.x / l.z2());
                // M = G + B G⁻¹ B, ∂M = g aaᵀ + s(auᵀ + uaᵀ) − g uuᵀ with u = B G⁻¹ a
                let dr = meshed_rank_two(&self.r, &e.apply(&self.r), &c.b_ginv, e, gl, sl);
                // roles of G and B exchanged
                let dx = meshed_rank_two(&self.x, &e.apply(&self.x), &c.g_binv, e, sl, gl);
                (dr, dx)
            }
        }
    }

    /// For each line ℓ, `tr(∂R/∂b_ℓ · Mr) + tr(∂X/∂b_ℓ · Mx)`.
    ///
    /// Uses quadratic forms on `Q = R Mr R` so the whole sweep costs one
    /// pair of N×N products plus O(N²) per line.
    pub fn derivative_traces(&self, grid: &GridModel, mr: &DMatrix<f64>, mx: &DMatrix<f64>) -> DVector<f64> {
        let qr = &self.r * mr * &self.r;
        let qx = &self.x * mx * &self.x;
        let mut out = DVector::zeros(grid.num_lines());
        for (k, (l, e)) in grid.lines().iter().zip(grid.all_ends()).enumerate() {
            out[k] = match &self.coupling {
                None => -0.5 / l.r * e.quad_form(&qr) - 0.5 / l.x * e.quad_form(&qx),
                Some(c) => {
                    let (gl, sl) = (l.r / l.z2(), l.x / l.z2());
                    meshed_trace(&qr, &c.b_ginv, *e, gl, sl) + meshed_trace(&qx, &c.g_binv, *e, sl, gl)
                }
            };
        }
        out
    }
}

fn meshed_rank_two(
    rt: &DMatrix<f64>,
    p: &DVector<f64>,
    coupling: &DMatrix<f64>,
    e: crate::grid::ReducedEnds,
    own: f64,
    cross: f64,
) -> DMatrix<f64> {
    let u = e.apply(coupling);
    let q = rt * &u;
    let pp = p * p.transpose();
    let pq = p * q.transpose();
    let qq = &q * q.transpose();
    (pp * own + (&pq + pq.transpose()) * cross - qq * own) * -0.5
}

/// `tr(−½ R ∂M R · Mr) = −½ tr(∂M Q)` with `Q = R Mr R`.
fn meshed_trace(q: &DMatrix<f64>, coupling: &DMatrix<f64>, e: crate::grid::ReducedEnds, own: f64, cross: f64) -> f64 {
    let u = e.apply(coupling);
    let qa = e.apply(q);
    let qta = e.apply(&q.transpose());
    let a_q_a = e.quad_form(q);
    let u_q_a = u.dot(&qa);
    let a_q_u = qta.dot(&u);
    let u_q_u = u.dot(&(q * &u));
    -0.5 * (own * a_q_a + cross * (u_q_a + a_q_u) - own * u_q_u)
}

pub fn drx_radial(grid: &GridModel, b: &DVector<f64>, line: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok(rx_radial(grid, b)?.derivative(grid, line))
}

pub fn drx_meshed(grid: &GridModel, b: &DVector<f64>, line: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok(rx_meshed(grid, b)?.derivative(grid, line))
}
