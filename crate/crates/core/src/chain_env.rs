//! Semi-infinite bosonic chain environment and its one-particle wavepacket.
//!
//! The orbital obeys `∂τ φ_j = i ε_j φ_j + i h_j φ_{j+1} + i h_{j−1} φ_{j−1}` with
//! `φ_j(0) = δ_{j0}`, so `φ(τ) = exp(i H₁ τ) e₀` for the tridiagonal one-particle
//! Hamiltonian `H₁`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{CMatrix, CVector, Error, Result, C64};

/// Padding sites added beyond the light cone `2hT`.
pub const PADDING_SITES: f64 = 10.0;
/// Default light-cone margin factor.
pub const DEFAULT_MARGIN: f64 = 2.0;
/// Tolerated deviation of `Σ_j |φ_j|²` from one.
pub const NORM_TOLERANCE: f64 = 1e-8;
/// Default tolerated occupation of the last chain site.
pub const DEFAULT_LEAK_TOLERANCE: f64 = 1e-8;

/// Particle statistics of the environment. Only bosons are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Statistics {
    #[default]
    Bosonic,
}

/// On-site energies and hoppings of a truncated semi-infinite chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    epsilon: Vec<f64>,
    hopping: Vec<f64>,
    statistics: Statistics,
}

impl ChainSpec {
    /// Chain from explicit arrays; `hopping.len()` must equal `epsilon.len() − 1`.
    pub fn new(epsilon: Vec<f64>, hopping: Vec<f64>) -> Result<Self> {
        if epsilon.is_empty() {
            return Err(Error::invalid("epsilon", "chain needs at least one site"));
        }
        if hopping.len() + 1 != epsilon.len() {
            return Err(Error::invalid(
                "hopping",
                format!("expected {} hoppings for {} sites, got {}", epsilon.len() - 1, epsilon.len(), hopping.len()),
            ));
        }
        if epsilon.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("epsilon", "non-finite on-site energy"));
        }
        if hopping.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("hopping", "non-finite hopping"));
        }
        Ok(Self { epsilon, hopping, statistics: Statistics::Bosonic })
    }

    /// Uniform chain of `n_sites` sites.
    pub fn uniform(epsilon: f64, h: f64, n_sites: usize) -> Result<Self> {
        if n_sites == 0 {
            return Err(Error::invalid("n_sites", "must be positive"));
        }
        Self::new(vec![epsilon; n_sites], vec![h; n_sites - 1])
    }

    pub fn n_sites(&self) -> usize {
        self.epsilon.len()
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }

    pub fn hopping(&self) -> &[f64] {
        &self.hopping
    }

    pub fn statistics(&self) -> Statistics {
        self.statistics
    }

    /// Mean on-site energy; used as the carrier frequency of the orbital.
    pub fn mean_energy(&self) -> f64 {
        self.epsilon.iter().sum::<f64>() / self.epsilon.len() as f64
    }

    /// Largest hopping amplitude (zero for a single site).
    pub fn max_hopping(&self) -> f64 {
        self.hopping.iter().fold(0.0, |a, &b| a.max(b.abs()))
    }

    /// Bound `max_j (|ε_j| + 2|h_j|)` on the one-particle spectral radius.
    pub fn max_rate(&self) -> f64 {
        let h = self.max_hopping();
        self.epsilon.iter().fold(0.0, |a, &e| a.max(e.abs() + 2.0 * h))
    }

    /// Dense tridiagonal one-particle Hamiltonian `H₁`.
    pub fn one_particle_hamiltonian(&self) -> DMatrix<f64> {
        let n = self.n_sites();
        let mut h = DMatrix::zeros(n, n);
        for j in 0..n {
            h[(j, j)] = self.epsilon[j];
        }
        for (j, &t) in self.hopping.iter().enumerate() {
            h[(j, j + 1)] = t;
            h[(j + 1, j)] = t;
        }
        h
    }
}

/// Uniform chain long enough that the wavepacket does not reach the far end before `horizon`.
///
/// `n_sites = ceil(margin · (2 h T + c₀))` with `c₀ = PADDING_SITES`; `h = 0` yields one site.
pub fn build_uniform_chain(epsilon: f64, h: f64, horizon: f64, margin: f64) -> Result<ChainSpec> {
    if !epsilon.is_finite() {
        return Err(Error::invalid("epsilon", "must be finite"));
    }
    if !h.is_finite() || h < 0.0 {
        return Err(Error::invalid("hopping", "must be finite and nonnegative"));
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::invalid("horizon", "must be finite and positive"));
    }
    if !margin.is_finite() || margin < 1.0 {
        return Err(Error::invalid("margin", "must be finite and at least 1"));
    }
    if h == 0.0 {
        return ChainSpec::uniform(epsilon, 0.0, 1);
    }
    let n = (margin * (2.0 * h * horizon + PADDING_SITES)).ceil() as usize;
    ChainSpec::uniform(epsilon, h, n)
}

/// Spectral representation `φ_j(τ) = Σ_n W_jn e^{i λ_n τ}` of the orbital.
#[derive(Debug)]
struct SpectralOrbital {
    eigenvalues: Vec<f64>,
    weights: DMatrix<f64>,
}

impl SpectralOrbital {
    fn new(chain: &ChainSpec) -> Self {
        let eig = SymmetricEigen::new(chain.one_particle_hamiltonian());
        let n = chain.n_sites();
        let v = &eig.eigenvectors;
        let weights = DMatrix::from_fn(n, n, |j, k| v[(j, k)] * v[(0, k)]);
        Self { eigenvalues: eig.eigenvalues.iter().copied().collect(), weights }
    }

    fn eval(&self, tau: f64) -> CVector {
        let phases: Vec<C64> = self.eigenvalues.iter().map(|&l| C64::from_polar(1.0, l * tau)).collect();
        let n = self.weights.nrows();
        DVector::from_fn(n, |j, _| self.weights.row(j).iter().zip(&phases).map(|(&w, &p)| p * w).sum())
    }
}

/// Orbital `φ_j(τ)` sampled on a uniform grid `0 = τ_0 < … < τ_M = T`.
#[derive(Debug, Clone)]
pub struct WavepacketTrajectory {
    dt: f64,
    n_steps: usize,
    phi: CMatrix,
    carrier: f64,
    orbital: Arc<SpectralOrbital>,
    reversed: bool,
}

impl WavepacketTrajectory {
    pub fn n_sites(&self) -> usize {
        self.phi.nrows()
    }

    /// Number of grid intervals `M`.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// Grid time `τ_m`.
    pub fn time(&self, m: usize) -> f64 {
        if m == self.n_steps {
            self.horizon()
        } else {
            self.dt * m as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|m| self.time(m)).collect()
    }

    /// Orbital samples, column `m` holding `φ(τ_m)`.
    pub fn phi(&self) -> &CMatrix {
        &self.phi
    }

    /// Mean on-site energy of the generating chain.
    pub fn carrier(&self) -> f64 {
        self.carrier
    }

    /// Exact orbital at an arbitrary time in `[0, T]`.
    pub fn phi_at(&self, t: f64) -> Result<CVector> {
        let horizon = self.horizon();
        if !(0.0..=horizon * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::TimeOutOfRange { t, lo: 0.0, hi: horizon });
        }
        if self.reversed {
            Ok(self.orbital.eval(horizon - t).map(|z| z.conj()))
        } else {
            Ok(self.orbital.eval(t))
        }
    }

    /// Largest occupation of the last site over the grid.
    pub fn boundary_leak(&self) -> f64 {
        let last = self.n_sites() - 1;
        self.phi.row(last).iter().map(|z| z.norm_sqr()).fold(0.0, f64::max)
    }

    /// Fails when the last site ever carries more than `tol` occupation.
    pub fn check_boundary_leak(&self, tol: f64) -> Result<()> {
        let leak = self.boundary_leak();
        if self.n_sites() > 1 && leak >= tol {
            return Err(Error::invalid("n_sites", format!("boundary leak {leak:.3e} exceeds {tol:.3e}")));
        }
        Ok(())
    }

    /// Largest `|Σ_j |φ_j|² − 1|` over the grid.
    pub fn norm_drift(&self) -> f64 {
        self.phi.column_iter().map(|c| (c.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Time-reversed orbital `φ'(t) = φ*(T − t)` on the same grid.
    pub fn time_reversed(&self) -> Self {
        let m = self.n_steps;
        let phi = CMatrix::from_fn(self.n_sites(), m + 1, |j, k| self.phi[(j, m - k)].conj());
        Self {
            dt: self.dt,
            n_steps: m,
            phi,
            carrier: self.carrier,
            orbital: Arc::clone(&self.orbital),
            reversed: !self.reversed,
        }
    }

    /// Trajectory rows `(tau, site, re_phi, im_phi)` for CSV export.
    pub fn rows(&self) -> impl Iterator<Item = (f64, usize, f64, f64)> + '_ {
        (0..=self.n_steps).flat_map(move |m| {
            (0..self.n_sites()).map(move |j| {
                let z = self.phi[(j, m)];
                (self.time(m), j, z.re, z.im)
            })
        })
    }
}

/// Propagates `φ_j(τ)` on `[0, T]` with grid step `≈ dt` by exact diagonalization of `H₁`.
///
/// The grid has `M = ceil(T/dt)` intervals of length `T/M`.
pub fn propagate_wavepacket(chain: &ChainSpec, horizon: f64, dt: f64) -> Result<WavepacketTrajectory> {
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::invalid("horizon", "must be finite and positive"));
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::invalid("traj_dt", "must be finite and positive"));
    }
    let n_steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = horizon / n_steps as f64;
    let orbital = SpectralOrbital::new(chain);
    let n = chain.n_sites();
    let mut phi = CMatrix::zeros(n, n_steps + 1);
    phi[(0, 0)] = C64::new(1.0, 0.0);
    for m in 1..=n_steps {
        let tau = if m == n_steps { horizon } else { dt * m as f64 };
        phi.set_column(m, &orbital.eval(tau));
    }
    let traj = WavepacketTrajectory {
        dt,
        n_steps,
        phi,
        carrier: chain.mean_energy(),
        orbital: Arc::new(orbital),
        reversed: false,
    };
    let drift = traj.norm_drift();
    if drift > NORM_TOLERANCE {
        return Err(Error::NormDrift { context: "wavepacket propagation", t: horizon, drift });
    }
    Ok(traj)
}

/// Zero-point correlator `C_q(t) = φ₀*(t)` on the trajectory grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroPointCorrelator {
    pub times: Vec<f64>,
    pub values: Vec<C64>,
}

pub fn zero_point_correlator(traj: &WavepacketTrajectory) -> ZeroPointCorrelator {
    ZeroPointCorrelator { times: traj.times(), values: traj.phi.row(0).iter().map(|z| z.conj()).collect() }
}

/// Finite-record regulator for the causal Fourier transform of `C_q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralWindow {
    /// `exp(−(η t)²/2)` with `η = 5/T`.
    Gaussian,
    /// `exp(−η t)` with `η = 5/T` and a cosine taper over the last 10% of the record.
    ExponentialTaper,
}

impl SpectralWindow {
    fn weight(self, t: f64, horizon: f64) -> f64 {
        let eta = 5.0 / horizon;
        match self {
            SpectralWindow::Gaussian => (-0.5 * (eta * t).powi(2)).exp(),
            SpectralWindow::ExponentialTaper => {
                let taper_start = 0.9 * horizon;
                let taper = if t <= taper_start {
                    1.0
                } else {
                    0.5 * (1.0 + (std::f64::consts::PI * (t - taper_start) / (0.1 * horizon)).cos())
                };
                (-eta * t).exp() * taper
            }
        }
    }
}

/// `J(ω) = Re ∫₀^T C_q(t) e^{iωt} w(t) dt` by the trapezoid rule.
pub fn spectral_density(
    correlator: &ZeroPointCorrelator,
    omega_grid: &[f64],
    window: SpectralWindow,
) -> Result<Vec<f64>> {
    if omega_grid.is_empty() {
        return Err(Error::invalid("omega_grid", "empty frequency grid"));
    }
    let times = &correlator.times;
    if times.len() < 2 {
        return Err(Error::invalid("correlator", "need at least two samples"));
    }
    let horizon = *times.last().expect("nonempty");
    let last = times.len() - 1;
    let weighted: Vec<(f64, C64)> = times
        .iter()
        .zip(&correlator.values)
        .enumerate()
        .map(|(m, (&t, &c))| {
            let dt_left = if m > 0 { t - times[m - 1] } else { 0.0 };
            let dt_right = if m < last { times[m + 1] - t } else { 0.0 };
            let w = 0.5 * (dt_left + dt_right) * window.weight(t, horizon);
            (t, c * w)
        })
        .collect();
    Ok(omega_grid
        .iter()
        .map(|&omega| weighted.iter().map(|&(t, c)| (c * C64::from_polar(1.0, omega * t)).re).sum())
        .collect())
}
