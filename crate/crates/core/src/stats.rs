//! Injection statistics, model-implied voltage covariances, sample
//! covariance of differential voltage data, and the synthetic data
//! generator.
//!
//! The sample covariance is the plain average of outer products
//! `(1/T) Σ_t ṽ_t ṽ_tᵀ` with **no mean subtraction**: differential voltage
//! data are modeled as zero-mean.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::ldf::{rx, LdfMatrices, Mode};
use crate::linalg::{max_abs, psd_factor, symmetrize, SpdFactor};

#[derive(Debug, Clone)]
pub struct InjectionStatistics {
    pub sigma_p: DMatrix<f64>,
    pub sigma_q: DMatrix<f64>,
    pub sigma_pq: DMatrix<f64>,
    pub noise_variance: f64,
    /// Common resistance-to-reactance ratio used by the simplified model.
    pub alpha: f64,
}

impl InjectionStatistics {
    pub fn new(
        sigma_p: DMatrix<f64>,
        sigma_q: DMatrix<f64>,
        sigma_pq: DMatrix<f64>,
        noise_variance: f64,
        alpha: f64,
    ) -> Result<Self> {
        let n = sigma_p.nrows();
        for (name, m) in [("sigma_p", &sigma_p), ("sigma_q", &sigma_q), ("sigma_pq", &sigma_pq)] {
            if m.shape() != (n, n) {
                return Err(Error::InvalidInput(format!(
                    "{name} has shape {:?}, expected ({n}, {n})",
                    m.shape()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        for (name, m) in [("sigma_p", &sigma_p), ("sigma_q", &sigma_q)] {
            if max_abs(&(m - m.transpose())) > 1e-10 * max_abs(m).max(1.0) {
                return Err(Error::InvalidInput(format!("{name} is not symmetric")));
            }
        }
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::InvalidInput("noise variance must be >= 0".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidInput("alpha must be > 0".into()));
        }
        let stats = Self {
            sigma_p,
            sigma_q,
            sigma_pq,
            noise_variance,
            alpha,
        };
        let stacked = stats.stacked();
        let min_eig = stacked.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 * max_abs(&stacked).max(1e-300) {
            return Err(Error::InvalidInput(
                "stacked injection covariance is not positive semidefinite".into(),
            ));
        }
        Ok(stats)
    }

    /// Diagonal covariances from per-bus variances.
    pub fn diagonal(var_p: &[f64], var_q: &[f64], cov_pq: &[f64], noise_variance: f64, alpha: f64) -> Result<Self> {
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        Self::new(diag(var_p), diag(var_q), diag(cov_pq), noise_variance, alpha)
    }

    pub fn n(&self) -> usize {
        self.sigma_p.nrows()
    }

    /// `[[Σp, Σpq], [Σpqᵀ, Σq]]`
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.sigma_p);
        m.view_mut((0, n), (n, n)).copy_from(&self.sigma_pq);
        m.view_mut((n, 0), (n, n)).copy_from(&self.sigma_pq.transpose());
        m.view_mut((n, n), (n, n)).copy_from(&self.sigma_q);
        m
    }

    /// `Σα = α²Σp + Σq + α(Σpq + Σpqᵀ)`
    pub fn sigma_alpha(&self) -> DMatrix<f64> {
        let a = self.alpha;
        symmetrize(&(&self.sigma_p * (a * a) + &self.sigma_q + (&self.sigma_pq + self.sigma_pq.transpose()) * a))
    }

    pub(crate) fn check_dim(&self, grid: &GridModel) -> Result<()> {
        if self.n() != grid.n() {
            return Err(Error::LengthMismatch {
                expected: grid.n(),
                got: self.n(),
            });
        }
        Ok(())
    }
}

/// Median of `r_ℓ / x_ℓ` over all candidate lines.
pub fn default_alpha(grid: &GridModel) -> f64 {
    let mut ratios: Vec<f64> = grid.lines().iter().map(|l| l.r / l.x).collect();
    ratios.sort_by(f64::total_cmp);
    let m = ratios.len();
    if m % 2 == 1 {
        ratios[m / 2]
    } else {
        0.5 * (ratios[m / 2 - 1] + ratios[m / 2])
    }
}

/// `R Σp R + X Σq X + R Σpq X + X Σpqᵀ R + σn² I`
pub fn model_covariance_detailed(ldf: &LdfMatrices, stats: &InjectionStatistics) -> DMatrix<f64> {
    let (r, x) = (&ldf.r, &ldf.x);
    let n = r.nrows();
    let cross = r * &stats.sigma_pq * x;
    let sigma = r * &stats.sigma_p * r
        + x * &stats.sigma_q * x
        + &cross
        + cross.transpose()
        + DMatrix::identity(n, n) * stats.noise_variance;
    symmetrize(&sigma)
}

/// `X Σα X`
pub fn model_covariance_simplified(ldf: &LdfMatrices, stats: &InjectionStatistics) -> Result<DMatrix<f64>> {
    let sa = stats.sigma_alpha();
    if SpdFactor::new(&sa).is_none() {
        return Err(Error::SingularSigmaAlpha);
    }
    Ok(symmetrize(&(&ldf.x * sa * &ldf.x)))
}

#[derive(Debug, Clone)]
pub struct VoltageDataset {
    samples: Option<DMatrix<f64>>,
    t: usize,
    sample_cov: DMatrix<f64>,
}

impl VoltageDataset {
    /// From a T×N matrix of differential squared voltages.
    pub fn from_differences(samples: DMatrix<f64>) -> Result<Self> {
        let t = samples.nrows();
        if t == 0 {
            return Err(Error::InsufficientData(1));
        }
        let sample_cov = symmetrize(&(samples.transpose() * &samples / t as f64));
        Ok(Self {
            samples: Some(samples),
            t,
            sample_cov,
        })
    }

    /// A dataset whose sample covariance is given directly, e.g. the
    /// ensemble covariance in the infinite-data limit. `t` is used only for
    /// MAP scaling.
    pub fn from_covariance(sample_cov: DMatrix<f64>, t: usize) -> Self {
        Self {
            samples: None,
            t,
            sample_cov,
        }
    }

    pub fn samples(&self) -> Option<&DMatrix<f64>> {
        self.samples.as_ref()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn n(&self) -> usize {
        self.sample_cov.nrows()
    }

    pub fn sample_cov(&self) -> &DMatrix<f64> {
        &self.sample_cov
    }
}

/// Squares raw magnitudes, differences consecutive rows, and averages the
/// outer products.
pub fn sample_covariance(raw_v: &DMatrix<f64>) -> Result<VoltageDataset> {
    if raw_v.nrows() < 2 {
        return Err(Error::InsufficientData(raw_v.nrows()));
    }
    if raw_v.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput("voltage magnitudes must be positive".into()));
    }
    let sq = raw_v.map(|v| v * v);
    let t = raw_v.nrows() - 1;
    let diffs = sq.rows(1, t) - sq.rows(0, t);
    VoltageDataset::from_differences(diffs)
}

/// Synthesizes `(T+1) × N` voltage magnitudes from a flat start of 1 pu².
///
/// Each step draws `(p̃, q̃)` jointly Gaussian from the stacked injection
/// covariance and white noise of variance `σn²`, then forms
/// `ṽ = R p̃ + X q̃ + n`. The ChaCha stream makes the output a pure function
/// of `seed`.
pub fn simulate_voltages(
    grid: &GridModel,
    b_true: &DVector<f64>,
    stats: &InjectionStatistics,
    t: usize,
    seed: u64,
    mode: Mode,
) -> Result<DMatrix<f64>> {
    stats.check_dim(grid)?;
    if !grid.support_rank_ok(b_true, 0.0) {
        return Err(Error::SingularTopology);
    }
    let ldf = rx(grid, b_true, mode)?;
    let n = grid.n();
    let factor = psd_factor(&stats.stacked());
    let sigma_n = stats.noise_variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut squared = DMatrix::from_element(t + 1, n, 1.0);
    let mut z = DVector::zeros(2 * n);
    for step in 1..=t {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let inj = &factor * &z;
        let mut dv = &ldf.r * inj.rows(0, n) + &ldf.x * inj.rows(n, n);
        for d in dv.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *d += sigma_n * e;
        }
        for j in 0..n {
            squared[(step, j)] = squared[(step - 1, j)] + dv[j];
        }
    }
    if squared.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidInput(
            "simulated squared voltage went non-positive; injection variances are too large".into(),
        ));
    }
    Ok(squared.map(f64::sqrt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::{buses, path3};
    use crate::grid::Line;
    use crate::ldf::rx_radial;
    use crate::linalg::rel_err;
    use crate::synth::{random_connected_grid, random_interior_b, random_spd};
    use rand::Rng;

    fn single(r: f64, x: f64) -> GridModel {
        GridModel::new(buses(2, &[0]), vec![Line::new(0, 0, 1, r, x)]).unwrap()
    }

    fn ones(n: usize) -> DVector<f64> {
        DVector::from_element(n, 1.0)
    }

    #[test]
    fn detailed_scalar() {
        let g = single(0.1, 0.1);
        let stats = InjectionStatistics::diagonal(&[1.0], &[1.0], &[0.0], 0.0, 1.0).unwrap();
        let s = model_covariance_detailed(&rx_radial(&g, &ones(1)).unwrap(), &stats);
        assert!((s[(0, 0)] - 0.08).abs() < 1e-14);
    }

    #[test]
    fn detailed_noise_only() {
        let g = path3();
        let stats = InjectionStatistics::diagonal(&[0.0; 2], &[0.0; 2], &[0.0; 2], 0.3, 1.0).unwrap();
        let s = model_covariance_detailed(&rx_radial(&g, &ones(2)).unwrap(), &stats);
        assert!(rel_err(&s, &(DMatrix::identity(2, 2) * 0.3)) < 1e-15);
    }

    #[test]
    fn detailed_eigenvalues_bounded_by_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let g = random_connected_grid(&mut rng, 6, 2);
            let n = g.n();
            let full = random_spd(&mut rng, 2 * n, 0.0);
            let stats = InjectionStatistics::new(
                full.view((0, 0), (n, n)).into(),
                full.view((n, n), (n, n)).into(),
                full.view((0, n), (n, n)).into(),
                0.05,
                1.0,
            )
            .unwrap();
            let b = random_interior_b(&mut rng, g.num_lines());
            let s = model_covariance_detailed(&rx_radial(&g, &b).unwrap(), &stats);
            assert!(s.symmetric_eigen().eigenvalues.min() >= 0.05 - 1e-10);
        }
    }

    #[test]
    fn simplified_cases() {
        let g = path3();
        let stats = InjectionStatistics::diagonal(&[1.0; 2], &[1.0; 2], &[0.0; 2], 0.0, 1.0).unwrap();
        let ldf = rx_radial(&g, &ones(2)).unwrap();
        let s = model_covariance_simplified(&ldf, &stats).unwrap();
        assert!(rel_err(&s, &(&ldf.x * &ldf.x * 2.0)) < 1e-14);

        let g = single(0.1, 0.1);
        let stats = InjectionStatistics::diagonal(&[1.0], &[1.0], &[0.0], 0.0, 1.0).unwrap();
        let s = model_covariance_simplified(&rx_radial(&g, &ones(1)).unwrap(), &stats).unwrap();
        assert!((s[(0, 0)] - 0.08).abs() < 1e-14);

        let zero = InjectionStatistics::diagonal(&[0.0], &[0.0], &[0.0], 0.0, 1.0).unwrap();
        let ldf = rx_radial(&g, &ones(1)).unwrap();
        assert!(matches!(
            model_covariance_simplified(&ldf, &zero),
            Err(Error::SingularSigmaAlpha)
        ));
    }

    #[test]
    fn simplified_equals_detailed_under_common_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let alpha = 1.7;
        let base = random_connected_grid(&mut rng, 6, 3);
        let lines = base
            .lines()
            .iter()
            .map(|l| Line {
                r: alpha * l.x,
                ..l.clone()
            })
            .collect();
        let g = GridModel::new(base.buses().to_vec(), lines).unwrap();
        let n = g.n();
        let full = random_spd(&mut rng, 2 * n, 0.1);
        let stats = InjectionStatistics::new(
            full.view((0, 0), (n, n)).into(),
            full.view((n, n), (n, n)).into(),
            full.view((0, n), (n, n)).into(),
            0.0,
            alpha,
        )
        .unwrap();
        let b = random_interior_b(&mut rng, g.num_lines());
        let ldf = rx_radial(&g, &b).unwrap();
        let d = model_covariance_detailed(&ldf, &stats);
        let s = model_covariance_simplified(&ldf, &stats).unwrap();
        assert!(rel_err(&d, &s) < 1e-10);
    }

    #[test]
    fn sample_covariance_cases() {
        let same = DMatrix::from_row_slice(2, 3, &[1.0, 1.01, 0.99, 1.0, 1.01, 0.99]);
        let ds = sample_covariance(&same).unwrap();
        assert_eq!(ds.t(), 1);
        assert!(max_abs(ds.sample_cov()) == 0.0);

        let raw = DMatrix::from_row_slice(2, 1, &[1.0, 2f64.sqrt()]);
        let ds = sample_covariance(&raw).unwrap();
        assert!((ds.sample_cov()[(0, 0)] - 1.0).abs() < 1e-15);

        let one = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(matches!(sample_covariance(&one), Err(Error::InsufficientData(1))));
    }

    #[test]
    fn sample_covariance_is_psd_with_bounded_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = DMatrix::from_fn(6, 10, |_, _| rng.random_range(0.95..1.05));
        let ds = sample_covariance(&raw).unwrap();
        let eig = ds.sample_cov().clone().symmetric_eigen().eigenvalues;
        assert!(eig.min() > -1e-15);
        assert!(ds.sample_cov().rank(1e-12) <= 5);
    }

    #[test]
    fn simulate_zero_variance_is_flat() {
        let g = path3();
        let stats = InjectionStatistics::diagonal(&[0.0; 2], &[0.0; 2], &[0.0; 2], 0.0, 1.0).unwrap();
        let v = simulate_voltages(&g, &ones(2), &stats, 5, 1, Mode::Radial).unwrap();
        assert_eq!(v.shape(), (6, 2));
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn simulate_is_deterministic() {
        let g = path3();
        let stats = InjectionStatistics::diagonal(&[1e-3; 2], &[5e-4; 2], &[1e-4; 2], 1e-6, 1.0).unwrap();
        let a = simulate_voltages(&g, &ones(2), &stats, 50, 42, Mode::Radial).unwrap();
        let b = simulate_voltages(&g, &ones(2), &stats, 50, 42, Mode::Radial).unwrap();
        let c = simulate_voltages(&g, &ones(2), &stats, 50, 43, Mode::Radial).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn simulate_rejects_disconnected_truth() {
        let g = path3();
        let stats = InjectionStatistics::diagonal(&[1e-3; 2], &[1e-3; 2], &[0.0; 2], 0.0, 1.0).unwrap();
        let b = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            simulate_voltages(&g, &b, &stats, 5, 0, Mode::Radial),
            Err(Error::SingularTopology)
        ));
    }

    #[test]
    fn empirical_covariance_converges_to_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_connected_grid(&mut rng, 5, 2);
        let n = g.n();
        let full = random_spd(&mut rng, 2 * n, 0.05) * 1e-6;
        let stats = InjectionStatistics::new(
            full.view((0, 0), (n, n)).into(),
            full.view((n, n), (n, n)).into(),
            full.view((0, n), (n, n)).into(),
            1e-10,
            1.0,
        )
        .unwrap();
        let mut b = DVector::zeros(g.num_lines());
        b.rows_mut(0, n).fill(1.0); // the tree lines come first
        for mode in [Mode::Radial, Mode::Meshed] {
            let raw = simulate_voltages(&g, &b, &stats, 100_000, 77, mode).unwrap();
            let ds = sample_covariance(&raw).unwrap();
            let model = model_covariance_detailed(&rx(&g, &b, mode).unwrap(), &stats);
            let rel = (ds.sample_cov() - &model).norm() / model.norm();
            assert!(rel < 0.05, "{mode:?}: relative Frobenius error {rel}");
        }
    }
}
