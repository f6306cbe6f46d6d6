//! Retarded and advanced significance matrices of the white-noise-driven environment.
//!
//! `⟨i|ρ₊(t)|j⟩ = ∫₀ᵗ φ_i*(τ) φ_j(τ) dτ` and `ρ₋(t) = ρ₊(T) − ρ₊(t)`, both by the
//! trapezoid rule on the trajectory grid. The occupation a mode `κ` acquires through
//! the coupling amplitude `⟨φ|κ⟩` is `κ† γ κ` with `γ = ∫ |φ⟩⟨φ| = ρ₊ᵀ`; mode
//! extraction therefore diagonalizes [`SignificanceMatrix::mode_metric`].

use crate::chain_env::WavepacketTrajectory;
use crate::linalg::{hermitian_eigen, hermitize};
use crate::{CMatrix, Error, Result, C64};

/// Default relative significance threshold.
pub const DEFAULT_R_CUT: f64 = 1e-4;

/// Hermitian significance matrix expressed in an orthonormal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceMatrix {
    pub t: f64,
    /// Frame vectors as columns in the site basis.
    pub basis: CMatrix,
    pub mat: CMatrix,
}

impl SignificanceMatrix {
    /// The occupation metric `γ = conj(ρ)` in the same frame.
    pub fn mode_metric(&self) -> SignificanceMatrix {
        SignificanceMatrix { t: self.t, basis: self.basis.map(|z| z.conj()), mat: self.mat.map(|z| z.conj()) }
    }

    pub fn trace(&self) -> f64 {
        self.mat.diagonal().iter().map(|z| z.re).sum()
    }

    /// Eigenvalues sorted descending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigen(&self.mat).0
    }

    /// Convenience evaluator `n(v) = v† ρ v` for a frame-coordinate vector.
    pub fn significance(&self, v: &[C64]) -> f64 {
        let n = self.mat.nrows();
        assert_eq!(v.len(), n, "vector length must match the frame");
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                acc += v[i].conj() * self.mat[(i, j)] * v[j];
            }
        }
        acc.re
    }
}

fn check_time(traj: &WavepacketTrajectory, t: f64) -> Result<()> {
    let horizon = traj.horizon();
    if !(0.0..=horizon * (1.0 + 1e-12)).contains(&t) || t.is_nan() {
        return Err(Error::TimeOutOfRange { t, lo: 0.0, hi: horizon });
    }
    Ok(())
}

/// Trapezoid weights of the cumulative integral up to `t`, one per grid column.
///
/// Off-grid `t` interpolates linearly between the neighbouring grid cumulants.
fn cumulative_weights(traj: &WavepacketTrajectory, t: f64) -> Vec<(usize, f64)> {
    let dt = traj.dt();
    let m_max = traj.n_steps();
    let pos = (t / dt).min(m_max as f64);
    let j = (pos.floor() as usize).min(m_max);
    let frac = if j == m_max { 0.0 } else { pos - j as f64 };
    let mut w = vec![0.0; j + 2];
    for k in 0..j {
        w[k] += 0.5 * dt;
        w[k + 1] += 0.5 * dt;
    }
    if frac > 0.0 {
        w[j] += 0.5 * dt * frac;
        w[j + 1] += 0.5 * dt * frac;
    }
    w.into_iter().enumerate().filter(|&(_, x)| x != 0.0).collect()
}

/// `γ(t) = ∫₀ᵗ |φ⟩⟨φ| dτ` in the site basis.
pub fn occupation_gram(traj: &WavepacketTrajectory, t: f64) -> Result<CMatrix> {
    check_time(traj, t)?;
    let n = traj.n_sites();
    let mut g = CMatrix::zeros(n, n);
    for (m, w) in cumulative_weights(traj, t) {
        let col = traj.phi().column(m);
        g.gerc(C64::new(w, 0.0), &col, &col, C64::new(1.0, 0.0));
    }
    Ok(hermitize(&g))
}

/// Retarded significance matrix `ρ₊(t)` in the site basis.
pub fn rho_plus(traj: &WavepacketTrajectory, t: f64) -> Result<SignificanceMatrix> {
    let n = traj.n_sites();
    let gamma = occupation_gram(traj, t)?;
    Ok(SignificanceMatrix { t, basis: CMatrix::identity(n, n), mat: gamma.map(|z| z.conj()) })
}

/// Advanced significance matrix `ρ₋(t) = ρ₊(T) − ρ₊(t)` in the site basis.
pub fn rho_minus(traj: &WavepacketTrajectory, t: f64, horizon: f64) -> Result<SignificanceMatrix> {
    check_time(traj, horizon)?;
    if t > horizon {
        return Err(Error::TimeOutOfRange { t, lo: 0.0, hi: horizon });
    }
    let total = rho_plus(traj, horizon)?;
    let past = rho_plus(traj, t)?;
    Ok(SignificanceMatrix { t, basis: total.basis, mat: total.mat - past.mat })
}

/// Significant eigenmodes of a significance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    /// Orthonormal mode vectors as columns in the site basis.
    pub modes: CMatrix,
    /// Eigenvalues sorted descending.
    pub weights: Vec<f64>,
    pub r_cut: f64,
}

impl ModeSet {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Eigenmodes with `π_k / π_1 > r_cut`, sorted by descending eigenvalue.
///
/// Degenerate eigenvectors are made reproducible by fixing the largest-modulus
/// component real and positive. A zero matrix yields an empty set.
pub fn significant_modes(rho: &SignificanceMatrix, r_cut: f64) -> Result<ModeSet> {
    if !(r_cut > 0.0 && r_cut < 1.0) {
        return Err(Error::invalid("r_cut", "must lie in (0, 1)"));
    }
    let (values, vectors) = hermitian_eigen(&rho.mat);
    let top = values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Ok(ModeSet { modes: CMatrix::zeros(rho.basis.nrows(), 0), weights: Vec::new(), r_cut });
    }
    let keep = values.iter().take_while(|&&v| v / top > r_cut).count();
    let mut modes = &rho.basis * vectors.columns(0, keep);
    for mut col in modes.column_iter_mut() {
        let mut v: Vec<C64> = col.iter().copied().collect();
        crate::linalg::phase_fix(&mut v);
        col.copy_from_slice(&v);
    }
    Ok(ModeSet { modes, weights: values[..keep].to_vec(), r_cut })
}

/// Cumulative occupation metric `γ_K(t) = K† γ(t) K` projected on a fixed frame `K`.
///
/// Grid cumulants are checkpointed every `STRIDE` steps and completed on demand, so
/// queries at arbitrary `t` cost at most `STRIDE` rank-one updates.
#[derive(Debug, Clone)]
pub struct CumulativeGram {
    psi: CMatrix,
    dt: f64,
    n_steps: usize,
    checkpoints: Vec<CMatrix>,
}

impl CumulativeGram {
    const STRIDE: usize = 8;

    /// Projects the orbital on the columns of `frame` (site basis, orthonormal).
    pub fn new(traj: &WavepacketTrajectory, frame: &CMatrix) -> Self {
        let psi = frame.adjoint() * traj.phi();
        let m = psi.nrows();
        let n_steps = traj.n_steps();
        let dt = traj.dt();
        let mut checkpoints = vec![CMatrix::zeros(m, m)];
        let mut acc = CMatrix::zeros(m, m);
        for j in 0..n_steps {
            Self::add_step(&mut acc, &psi, j, dt);
            if (j + 1) % Self::STRIDE == 0 {
                checkpoints.push(acc.clone());
            }
        }
        Self { psi, dt, n_steps, checkpoints }
    }

    fn add_step(acc: &mut CMatrix, psi: &CMatrix, j: usize, dt: f64) {
        let w = C64::new(0.5 * dt, 0.0);
        let one = C64::new(1.0, 0.0);
        acc.gerc(w, &psi.column(j), &psi.column(j), one);
        acc.gerc(w, &psi.column(j + 1), &psi.column(j + 1), one);
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// Projected orbital `ψ = K† φ`, one column per grid time.
    pub fn projected_orbital(&self) -> &CMatrix {
        &self.psi
    }

    fn at_grid(&self, j: usize) -> CMatrix {
        let base = j / Self::STRIDE;
        let mut acc = self.checkpoints[base].clone();
        for k in base * Self::STRIDE..j {
            Self::add_step(&mut acc, &self.psi, k, self.dt);
        }
        acc
    }

    /// `γ_K(t)`, linearly interpolated between grid cumulants.
    pub fn at(&self, t: f64) -> Result<CMatrix> {
        let horizon = self.horizon();
        if !(0.0..=horizon * (1.0 + 1e-12)).contains(&t) || t.is_nan() {
            return Err(Error::TimeOutOfRange { t, lo: 0.0, hi: horizon });
        }
        let pos = (t / self.dt).min(self.n_steps as f64);
        let j = (pos.floor() as usize).min(self.n_steps);
        let frac = pos - j as f64;
        let lower = self.at_grid(j);
        if j == self.n_steps || frac <= 0.0 {
            return Ok(hermitize(&lower));
        }
        let mut upper = lower.clone();
        Self::add_step(&mut upper, &self.psi, j, self.dt);
        let mixed = lower * C64::new(1.0 - frac, 0.0) + upper * C64::new(frac, 0.0);
        Ok(hermitize(&mixed))
    }

    /// `γ_K(T)`.
    pub fn total(&self) -> CMatrix {
        hermitize(&self.at_grid(self.n_steps))
    }
}

/// Absolute value of the most negative eigenvalue relative to the largest one (0 if PSD).
pub fn psd_defect(m: &CMatrix) -> f64 {
    let (vals, _) = hermitian_eigen(m);
    let top = vals.first().copied().unwrap_or(0.0).abs().max(f64::MIN_POSITIVE);
    let low = vals.last().copied().unwrap_or(0.0);
    if low < 0.0 {
        -low / top
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain_env::{build_uniform_chain, propagate_wavepacket};
    use crate::linalg::{frobenius, hermiticity_defect, principal_angles};
    use approx::assert_abs_diff_eq;

    fn traj(h: f64, horizon: f64, dt: f64) -> WavepacketTrajectory {
        let chain = build_uniform_chain(1.0, h, horizon, 2.0).unwrap();
        propagate_wavepacket(&chain, horizon, dt).unwrap()
    }

    #[test]
    fn empty_integral_and_single_site() {
        let tr = traj(0.0, 10.0, 0.1);
        assert_eq!(rho_plus(&tr, 0.0).unwrap().mat[(0, 0)], C64::new(0.0, 0.0));
        let r = rho_plus(&tr, 7.3).unwrap();
        assert_abs_diff_eq!(r.mat[(0, 0)].re, 7.3, epsilon = 1e-12);
        let modes = significant_modes(&r, 1e-4).unwrap();
        assert_eq!(modes.len(), 1);
        assert_abs_diff_eq!(modes.modes[(0, 0)].re, 1.0, epsilon = 1e-14);
        assert!(rho_plus(&tr, 10.5).is_err());
    }

    #[test]
    fn complementarity_at_grid_points() {
        let tr = traj(0.1, 20.0, 0.05);
        let total = rho_plus(&tr, 20.0).unwrap();
        for m in [0, 1, 57, 200, 400] {
            let t = tr.time(m);
            let sum = rho_plus(&tr, t).unwrap().mat + rho_minus(&tr, t, 20.0).unwrap().mat;
            assert!(frobenius(&(sum - &total.mat)) < 1e-12);
        }
        assert!(frobenius(&rho_minus(&tr, 20.0, 20.0).unwrap().mat) < 1e-15);
        assert!(frobenius(&(rho_minus(&tr, 0.0, 20.0).unwrap().mat - &total.mat)) < 1e-15);
    }

    #[test]
    fn hermitian_psd_and_monotone_spectrum() {
        let tr = traj(0.1, 20.0, 0.05);
        let mut prev: Option<Vec<f64>> = None;
        let mut prev_trace = -1.0;
        for m in (0..=400).step_by(40) {
            let r = rho_plus(&tr, tr.time(m)).unwrap();
            assert!(hermiticity_defect(&r.mat) < 1e-12);
            assert!(psd_defect(&r.mat) < 1e-10);
            assert!(r.trace() >= prev_trace);
            prev_trace = r.trace();
            let vals = r.eigenvalues();
            if let Some(p) = prev {
                for (a, b) in vals.iter().zip(&p) {
                    assert!(a + 1e-12 >= *b);
                }
            }
            prev = Some(vals);
        }
    }

    #[test]
    fn scale_invariant_mode_selection() {
        let tr = traj(0.1, 20.0, 0.05);
        let r = rho_plus(&tr, 20.0).unwrap();
        let scaled = SignificanceMatrix { mat: &r.mat * C64::new(7.5, 0.0), ..r.clone() };
        let a = significant_modes(&r, 1e-4).unwrap();
        let b = significant_modes(&scaled, 1e-4).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(principal_angles(&a.modes, &b.modes).iter().all(|&x| x < 1e-8));
        assert!(significant_modes(&r, 0.0).is_err());
        assert!(significant_modes(&r, 1.0).is_err());
    }

    #[test]
    fn zero_matrix_gives_no_modes() {
        let tr = traj(0.1, 5.0, 0.05);
        assert!(significant_modes(&rho_plus(&tr, 0.0).unwrap(), 1e-4).unwrap().is_empty());
    }

    #[test]
    fn doubled_step_spans_same_subspace() {
        let fine = traj(0.05, 40.0, 0.025);
        let coarse = traj(0.05, 40.0, 0.05);
        let a = significant_modes(&rho_plus(&fine, 40.0).unwrap(), 1e-4).unwrap();
        let b = significant_modes(&rho_plus(&coarse, 40.0).unwrap(), 1e-4).unwrap();
        assert_eq!(a.len(), b.len());
        let worst = principal_angles(&a.modes, &b.modes).into_iter().fold(0.0, f64::max);
        assert!(worst < 1e-3, "largest angle {worst}");
    }

    #[test]
    fn projected_cumulant_matches_site_basis() {
        let tr = traj(0.1, 20.0, 0.05);
        let modes = significant_modes(&rho_plus(&tr, 20.0).unwrap().mode_metric(), 1e-4).unwrap();
        let cum = CumulativeGram::new(&tr, &modes.modes);
        for t in [0.0, 0.4, 3.33, 12.0, 19.97, 20.0] {
            let direct = modes.modes.adjoint() * occupation_gram(&tr, t).unwrap() * &modes.modes;
            assert!(frobenius(&(cum.at(t).unwrap() - direct)) < 1e-11);
        }
        assert!(frobenius(&(cum.total() - cum.at(20.0).unwrap())) < 1e-12);
    }

    #[test]
    fn metric_is_transpose_of_rho_plus() {
        let tr = traj(0.1, 10.0, 0.05);
        let r = rho_plus(&tr, 10.0).unwrap();
        assert!(frobenius(&(r.mode_metric().mat - r.mat.transpose())) < 1e-14);
        let v: Vec<C64> = (0..tr.n_sites()).map(|j| C64::new(1.0 / (1.0 + j as f64), 0.3)).collect();
        assert!(r.significance(&v) >= 0.0);
    }
}
