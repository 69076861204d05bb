//! Negative log-likelihoods of the line-indicator vector and their exact
//! gradients.
//!
//! * detailed: `f(b) = log|Σ(b)| + tr(Σ(b)⁻¹ Σ̂)`
//! * simplified: `f̃(b) = −2 log|X⁻¹(b)| + tr(X⁻¹(b) Σα⁻¹ X⁻¹(b) Σ̂)`, convex
//! * MAP: `(T/2)·f(b) + βᵀb` with `β_ℓ = log((1−π_ℓ)/π_ℓ)`
//!
//! A numerically singular model covariance evaluates to `+∞` so that
//! solvers can back off instead of failing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::ldf::{rx, Mode};
use crate::linalg::{symmetrize, SpdFactor};
use crate::stats::{model_covariance_detailed, InjectionStatistics, VoltageDataset};

/// A smooth objective over (a subset of) the line indicators.
pub trait Objective {
    fn dim(&self) -> usize;

    /// `+∞` when the point is outside the objective's domain.
    fn value(&self, b: &DVector<f64>) -> f64;

    /// Value and gradient from a single factorization.
    fn value_and_gradient(&self, b: &DVector<f64>) -> Result<(f64, DVector<f64>)>;

    fn gradient(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.value_and_gradient(b).map(|(_, g)| g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Detailed,
    Simplified,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detailed" => Ok(ModelKind::Detailed),
            "simplified" => Ok(ModelKind::Simplified),
            other => Err(Error::InvalidInput(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Likelihood<'a> {
    grid: &'a GridModel,
    stats: &'a InjectionStatistics,
    sample_cov: &'a DMatrix<f64>,
    kind: ModelKind,
    mode: Mode,
    sigma_alpha_inv: Option<DMatrix<f64>>,
}

impl<'a> Likelihood<'a> {
    pub fn new(
        grid: &'a GridModel,
        stats: &'a InjectionStatistics,
        dataset: &'a VoltageDataset,
        kind: ModelKind,
        mode: Mode,
    ) -> Result<Self> {
        stats.check_dim(grid)?;
        if dataset.n() != grid.n() {
            return Err(Error::LengthMismatch {
                expected: grid.n(),
                got: dataset.n(),
            });
        }
        let sigma_alpha_inv = match kind {
            ModelKind::Detailed => None,
            ModelKind::Simplified => Some(
                SpdFactor::new(&stats.sigma_alpha())
                    .ok_or(Error::SingularSigmaAlpha)?
                    .inverse(),
            ),
        };
        Ok(Self {
            grid,
            stats,
            sample_cov: dataset.sample_cov(),
            kind,
            mode,
            sigma_alpha_inv,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn grid(&self) -> &GridModel {
        self.grid
    }

    fn eval_f(&self, b: &DVector<f64>, with_grad: bool) -> Result<(f64, Option<DVector<f64>>)> {
        let Ok(ldf) = rx(self.grid, b, self.mode) else {
            return Ok((f64::INFINITY, None));
        };
        let sigma = model_covariance_detailed(&ldf, self.stats);
        let Some(fac) = SpdFactor::new(&sigma) else {
            return Ok((f64::INFINITY, None));
        };
        let solved = fac.solve(self.sample_cov); // Σ⁻¹ Σ̂
        let value = fac.log_det() + solved.trace();
        if !with_grad {
            return Ok((value, None));
        }
        let sigma_inv = fac.inverse();
        // F = Σ⁻¹ − Σ⁻¹ Σ̂ Σ⁻¹
        let f = symmetrize(&(&sigma_inv - &solved * &sigma_inv));
        let st = self.stats;
        let mr = &st.sigma_p * &ldf.r * &f + &st.sigma_pq * &ldf.x * &f;
        let mx = &st.sigma_q * &ldf.x * &f + &f * &ldf.r * &st.sigma_pq;
        let grad = ldf.derivative_traces(self.grid, &mr, &mx) * 2.0;
        Ok((value, Some(grad)))
    }

    fn eval_ftilde(&self, b: &DVector<f64>, with_grad: bool) -> Result<(f64, Option<DVector<f64>>)> {
        let lines = self.grid.lines();
        let y = self
            .grid
            .weighted_laplacian(lines.iter().zip(b.iter()).map(|(l, &bl)| 0.5 * bl / l.x));
        let Some(fac) = SpdFactor::new(&y) else {
            return Ok((f64::INFINITY, None));
        };
        let sa_inv = self.sigma_alpha_inv.as_ref().expect("simplified model");
        let sa_y_s = sa_inv * &y * self.sample_cov; // Σα⁻¹ X⁻¹ Σ̂
        let value = -2.0 * fac.log_det() + (&y * &sa_y_s).trace();
        if !with_grad {
            return Ok((value, None));
        }
        let x = fac.inverse();
        let m = sa_y_s - x;
        let grad = DVector::from_iterator(
            lines.len(),
            lines
                .iter()
                .zip(self.grid.all_ends())
                .map(|(l, e)| e.quad_form(&m) / l.x),
        );
        Ok((value, Some(grad)))
    }

    fn eval(&self, b: &DVector<f64>, with_grad: bool) -> Result<(f64, Option<DVector<f64>>)> {
        self.grid.check_len(b)?;
        match self.kind {
            ModelKind::Detailed => self.eval_f(b, with_grad),
            ModelKind::Simplified => self.eval_ftilde(b, with_grad),
        }
    }
}

impl Objective for Likelihood<'_> {
    fn dim(&self) -> usize {
        self.grid.num_lines()
    }

    fn value(&self, b: &DVector<f64>) -> f64 {
        self.eval(b, false).map_or(f64::INFINITY, |(v, _)| v)
    }

    fn value_and_gradient(&self, b: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        match self.eval(b, true)? {
            (v, Some(g)) => Ok((v, g)),
            _ => Err(Error::SingularTopology),
        }
    }
}

/// `log((1−π)/π)`; infinite at `π ∈ {0, 1}`.
pub fn prior_log_odds(prior: f64) -> f64 {
    ((1.0 - prior) / prior).ln()
}

/// MAP objective over the lines whose prior is strictly inside (0, 1).
///
/// Lines with a hard prior are eliminated from the variable vector and
/// pinned to their known status.
pub struct MapObjective<'a> {
    likelihood: &'a Likelihood<'a>,
    scale: f64,
    beta: Vec<f64>,
    free: Vec<usize>,
    pinned: DVector<f64>,
}

impl<'a> MapObjective<'a> {
    /// `priors[ℓ]` is π_ℓ; `t` is the sample count that scales the likelihood.
    pub fn new(likelihood: &'a Likelihood<'a>, priors: &[f64], t: usize) -> Result<Self> {
        let le = likelihood.dim();
        if priors.len() != le {
            return Err(Error::LengthMismatch {
                expected: le,
                got: priors.len(),
            });
        }
        let mut free = Vec::new();
        let mut beta = Vec::new();
        let mut pinned = DVector::zeros(le);
        for (k, &p) in priors.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("prior {p} of line {k} outside [0, 1]")));
            }
            if p == 0.0 || p == 1.0 {
                pinned[k] = p;
            } else {
                free.push(k);
                beta.push(prior_log_odds(p));
            }
        }
        Ok(Self {
            likelihood,
            scale: t as f64 / 2.0,
            beta,
            free,
            pinned,
        })
    }

    pub fn free_lines(&self) -> &[usize] {
        &self.free
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Full-length indicator from the free variables.
    pub fn expand(&self, free_values: &DVector<f64>) -> DVector<f64> {
        let mut b = self.pinned.clone();
        for (&k, &v) in self.free.iter().zip(free_values.iter()) {
            b[k] = v;
        }
        b
    }

    pub fn restrict(&self, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&k| b[k]))
    }

    fn linear(&self, z: &DVector<f64>) -> f64 {
        self.beta.iter().zip(z.iter()).map(|(b, z)| b * z).sum()
    }
}

impl Objective for MapObjective<'_> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        self.scale * self.likelihood.value(&self.expand(z)) + self.linear(z)
    }

    fn value_and_gradient(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (f, g) = self.likelihood.value_and_gradient(&self.expand(z))?;
        let value = self.scale * f + self.linear(z);
        let grad = DVector::from_iterator(
            self.free.len(),
            self.free.iter().zip(&self.beta).map(|(&k, &b)| self.scale * g[k] + b),
        );
        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::buses;
    use crate::grid::Line;
    use crate::ldf::rx_radial;
    use crate::stats::{model_covariance_simplified, InjectionStatistics};
    use crate::synth::{random_connected_grid, random_interior_b, random_spd};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(r: f64, x: f64) -> GridModel {
        GridModel::new(buses(2, &[0]), vec![Line::new(0, 0, 1, r, x)]).unwrap()
    }

    fn random_stats<R: Rng>(rng: &mut R, n: usize, noise: f64) -> InjectionStatistics {
        let full = random_spd(rng, 2 * n, 0.05);
        InjectionStatistics::new(
            full.view((0, 0), (n, n)).into(),
            full.view((n, n), (n, n)).into(),
            full.view((0, n), (n, n)).into(),
            noise,
            1.3,
        )
        .unwrap()
    }

    #[test]
    fn f_at_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_connected_grid(&mut rng, 5, 2);
        let stats = random_stats(&mut rng, g.n(), 0.01);
        let b = random_interior_b(&mut rng, g.num_lines());
        let sigma = model_covariance_detailed(&rx_radial(&g, &b).unwrap(), &stats);
        let logdet = SpdFactor::new(&sigma).unwrap().log_det();
        let ds = VoltageDataset::from_covariance(sigma, 100);
        let lik = Likelihood::new(&g, &stats, &ds, ModelKind::Detailed, Mode::Radial).unwrap();
        assert!((lik.value(&b) - (logdet + g.n() as f64)).abs() < 1e-10);
    }

    #[test]
    fn f_scalar() {
        // Σ(b) = 2 when σn² = 2 and injections vanish; Σ̂ = 4
        let g = single(0.1, 0.1);
        let stats = InjectionStatistics::diagonal(&[0.0], &[0.0], &[0.0], 2.0, 1.0).unwrap();
        let ds = VoltageDataset::from_covariance(DMatrix::from_element(1, 1, 4.0), 1);
        let lik = Likelihood::new(&g, &stats, &ds, ModelKind::Detailed, Mode::Radial).unwrap();
        let v = lik.value(&DVector::from_element(1, 1.0));
        assert!((v - (2f64.ln() + 2.0)).abs() < 1e-12);
        assert!((v - 2.6931).abs() < 1e-4);
    }

    #[test]
    fn disconnected_support_is_infinite() {
        let g = GridModel::new(
            buses(3, &[0]),
            vec![Line::new(0, 0, 1, 0.1, 0.1), Line::new(1, 1, 2, 0.1, 0.1)],
        )
        .unwrap();
        let stats = InjectionStatistics::diagonal(&[1.0; 2], &[1.0; 2], &[0.0; 2], 0.0, 1.0).unwrap();
        let ds = VoltageDataset::from_covariance(DMatrix::identity(2, 2), 10);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        for kind in [ModelKind::Detailed, ModelKind::Simplified] {
            let lik = Likelihood::new(&g, &stats, &ds, kind, Mode::Radial).unwrap();
            assert_eq!(lik.value(&b), f64::INFINITY);
            assert!(lik.value_and_gradient(&b).is_err());
        }
    }

    #[test]
    fn ftilde_scalar() {
        // X⁻¹(1) = ½·(1/0.1) = 5
        let g = single(0.1, 0.1);
        let stats = InjectionStatistics::diagonal(&[0.0], &[1.0], &[0.0], 0.0, 1.0).unwrap();
        let ds = VoltageDataset::from_covariance(DMatrix::from_element(1, 1, 1.0), 1);
        let lik = Likelihood::new(&g, &stats, &ds, ModelKind::Simplified, Mode::Radial).unwrap();
        let v = lik.value(&DVector::from_element(1, 1.0));
        assert!((v - (-2.0 * 5f64.ln() + 25.0)).abs() < 1e-12);
        assert!((v - 21.7811).abs() < 1e-4);
        assert_eq!(lik.value(&DVector::from_element(1, 0.0)), f64::INFINITY);
    }

    fn fd_rel_err(obj: &dyn Objective, b: &DVector<f64>) -> f64 {
        let g = obj.gradient(b).unwrap();
        let h = 1e-6;
        let fd = DVector::from_fn(b.len(), |l, _| {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[l] += h;
            bm[l] -= h;
            (obj.value(&bp) - obj.value(&bm)) / (2.0 * h)
        });
        (&g - &fd).amax() / fd.amax().max(1e-12)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let load = rng.random_range(2..=9);
            let extra = rng.random_range(0..4);
            let g = random_connected_grid(&mut rng, load, extra);
            let stats = random_stats(&mut rng, g.n(), 0.01);
            let b0 = random_interior_b(&mut rng, g.num_lines());
            let truth = model_covariance_detailed(&rx_radial(&g, &b0).unwrap(), &stats);
            let ds = VoltageDataset::from_covariance(truth * 1.3, 50);
            let b = random_interior_b(&mut rng, g.num_lines());
            for (kind, mode) in [
                (ModelKind::Detailed, Mode::Radial),
                (ModelKind::Detailed, Mode::Meshed),
                (ModelKind::Simplified, Mode::Radial),
            ] {
                let lik = Likelihood::new(&g, &stats, &ds, kind, mode).unwrap();
                let err = fd_rel_err(&lik, &b);
                assert!(err < 1e-5, "{kind:?}/{mode:?}: {err}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g = random_connected_grid(&mut rng, 6, 3);
        let stats = random_stats(&mut rng, g.n(), 0.01);
        let b0 = random_interior_b(&mut rng, g.num_lines());
        let ldf = rx_radial(&g, &b0).unwrap();
        let ds = VoltageDataset::from_covariance(model_covariance_detailed(&ldf, &stats), 10);
        let lik = Likelihood::new(&g, &stats, &ds, ModelKind::Detailed, Mode::Radial).unwrap();
        assert!(lik.gradient(&b0).unwrap().amax() < 1e-8);

        let ds = VoltageDataset::from_covariance(model_covariance_simplified(&ldf, &stats).unwrap(), 10);
        let lik = Likelihood::new(&g, &stats, &ds, ModelKind::Simplified, Mode::Radial).unwrap();
        assert!(lik.gradient(&b0).unwrap().amax() < 1e-8);
    }

    #[test]
    fn cross_terms_vanish_without_pq_covariance() {
        // with Σpq = 0 the gradient reduces to the Σp and Σq terms
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let g = random_connected_grid(&mut rng, 5, 2);
        let n = g.n();
        let sp = random_spd(&mut rng, n, 0.1);
        let sq = random_spd(&mut rng, n, 0.1);
        let stats = InjectionStatistics::new(sp.clone(), sq.clone(), DMatrix::zeros(n, n), 0.02, 1.0).unwrap();
        let ds = VoltageDataset::from_covariance(random_spd(&mut rng, n, 0.1), 10);
        let b = random_interior_b(&mut rng, g.num_lines());
        let lik = Likelihood::new(&g, &stats, &ds, ModelKind::Detailed, Mode::Radial).unwrap();
        let grad = lik.gradient(&b).unwrap();

        let ldf = rx_radial(&g, &b).unwrap();
        let sigma = model_covariance_detailed(&ldf, &stats);
        let si = sigma.try_inverse().unwrap();
        let f = &si - &si * ds.sample_cov() * &si;
        for (k, l) in g.lines().iter().enumerate() {
            let a = g.incidence_reduced().row(k).transpose();
            let t1 = (a.transpose() * &ldf.r * &sp * &ldf.r * &f * &ldf.r * &a)[(0, 0)] / l.r;
            let t2 = (a.transpose() * &ldf.x * &sq * &ldf.x * &f * &ldf.x * &a)[(0, 0)] / l.x;
            assert!((grad[k] + t1 + t2).abs() < 1e-8 * (1.0 + grad[k].abs()));
        }
    }

    #[test]
    fn ftilde_trace_term_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = random_connected_grid(&mut rng, 5, 2);
        let stats = random_stats(&mut rng, g.n(), 0.0);
        let s = random_spd(&mut rng, g.n(), 0.1);
        let b = random_interior_b(&mut rng, g.num_lines());
        let zero = VoltageDataset::from_covariance(DMatrix::zeros(g.n(), g.n()), 1);
        let d1 = VoltageDataset::from_covariance(s.clone(), 1);
        let d3 = VoltageDataset::from_covariance(s * 3.0, 1);
        let grad = |ds: &VoltageDataset| {
            Likelihood::new(&g, &stats, ds, ModelKind::Simplified, Mode::Radial)
                .unwrap()
                .gradient(&b)
                .unwrap()
        };
        let g0 = grad(&zero);
        let lhs = grad(&d3) - &g0;
        let rhs = (grad(&d1) - &g0) * 3.0;
        assert!((&lhs - &rhs).amax() < 1e-9 * rhs.amax());
    }

    #[test]
    fn ftilde_is_midpoint_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..200 {
            let g = random_connected_grid(&mut rng, 5, 3);
            let stats = random_stats(&mut rng, g.n(), 0.0);
            let ds = VoltageDataset::from_covariance(random_spd(&mut rng, g.n(), 0.01), 10);
            let lik = Likelihood::new(&g, &stats, &ds, ModelKind::Simplified, Mode::Radial).unwrap();
            let b1 = random_interior_b(&mut rng, g.num_lines());
            let b2 = random_interior_b(&mut rng, g.num_lines());
            let mid = (&b1 + &b2) * 0.5;
            assert!(lik.value(&mid) <= 0.5 * (lik.value(&b1) + lik.value(&b2)) + 1e-9);
        }
    }

    #[test]
    fn prior_log_odds_values() {
        assert_eq!(prior_log_odds(0.5), 0.0);
        assert!((prior_log_odds(0.9) - (1.0f64 / 9.0).ln()).abs() < 1e-15);
        assert!((prior_log_odds(0.9) + 2.1972).abs() < 1e-4);
        assert_eq!(prior_log_odds(1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn map_objective_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let g = random_connected_grid(&mut rng, 4, 2);
        let stats = random_stats(&mut rng, g.n(), 0.01);
        let ds = VoltageDataset::from_covariance(random_spd(&mut rng, g.n(), 0.1), 40);
        let lik = Likelihood::new(&g, &stats, &ds, ModelKind::Detailed, Mode::Radial).unwrap();
        let b = random_interior_b(&mut rng, g.num_lines());

        let flat = vec![0.5; g.num_lines()];
        let map = MapObjective::new(&lik, &flat, 40).unwrap();
        assert!((map.value(&b) - 20.0 * lik.value(&b)).abs() < 1e-9);

        // a uniform prior adds a multiple of 1ᵀb
        let uniform = vec![0.8; g.num_lines()];
        let map = MapObjective::new(&lik, &uniform, 40).unwrap();
        let diff = map.value(&b) - 20.0 * lik.value(&b);
        assert!((diff - prior_log_odds(0.8) * b.sum()).abs() < 1e-9);
        let (_, grad) = map.value_and_gradient(&b).unwrap();
        let lg = lik.gradient(&b).unwrap();
        assert!((grad - (lg * 20.0).add_scalar(prior_log_odds(0.8))).amax() < 1e-9);

        // hard priors are eliminated
        let mut hard = vec![0.5; g.num_lines()];
        hard[0] = 1.0;
        hard[1] = 0.0;
        let map = MapObjective::new(&lik, &hard, 40).unwrap();
        assert_eq!(map.dim(), g.num_lines() - 2);
        let full = map.expand(&DVector::from_element(map.dim(), 0.3));
        assert_eq!(full[0], 1.0);
        assert_eq!(full[1], 0.0);
    }
}
