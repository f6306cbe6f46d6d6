//! Brute-force oracles: joint evolution of the system and a truncated chain, and the
//! white-noise average reproducing the retarded significance matrix.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::chain_env::ChainSpec;
use crate::fock::{register_size, FockRegister};
use crate::fock_dynamics::SystemSpec;
use crate::jump_monte_carlo::history_rng;
use crate::ode::Rk4;
use crate::{CMatrix, Error, Result, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const MINUS_I: C64 = C64 { re: 0.0, im: -1.0 };

/// Default limit on `dim_sys · C(N + n, n)`.
pub const DEFAULT_BASIS_LIMIT: usize = 4_000_000;

/// System ⊗ (first `n` chain sites with at most `N` quanta in total).
#[derive(Debug, Clone)]
pub struct TruncatedChainBasis {
    pub sys_dim: usize,
    pub chain: FockRegister,
}

impl TruncatedChainBasis {
    pub fn new(sys_dim: usize, n_sites: usize, n_quanta: usize, limit: usize) -> Result<Self> {
        let size = register_size(n_sites, n_quanta).saturating_mul(sys_dim);
        if size > limit {
            return Err(Error::BasisTooLarge { size, limit });
        }
        Ok(Self { sys_dim, chain: FockRegister::new(n_sites, n_quanta)? })
    }

    pub fn len(&self) -> usize {
        self.sys_dim * self.chain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Joint index of system state `s` and chain state `i`.
    pub fn index(&self, s: usize, i: usize) -> usize {
        s * self.chain.len() + i
    }
}

/// Integration settings of [`exact_evolve`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExactOptions {
    pub n_sites: usize,
    pub n_quanta: usize,
    pub dt: f64,
    pub output_dt: f64,
    pub basis_limit: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self { n_sites: 7, n_quanta: 14, dt: 0.05, output_dt: 0.5, basis_limit: DEFAULT_BASIS_LIMIT }
    }
}

/// One sample of the exact time series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactRecord {
    pub t: f64,
    pub system_occupation: f64,
    pub chain_occupation: f64,
    /// Weight on states carrying exactly `N` chain quanta.
    pub top_shell: f64,
    pub norm: f64,
}

/// Exact time series and the final amplitudes in the rotating frame.
#[derive(Debug, Clone)]
pub struct ExactRun {
    pub records: Vec<ExactRecord>,
    pub final_state: Vec<C64>,
}

struct ExactOperator<'a> {
    sys: &'a SystemSpec,
    basis: &'a TruncatedChainBasis,
    /// `H₁ − ω_ref` on the kept sites.
    h1: CMatrix,
    omega: f64,
    /// Excitation difference `n_a − n_b` of system matrix elements.
    dn: CMatrix,
    hs: CMatrix,
    lowered: Vec<Vec<C64>>,
    g: Vec<C64>,
}

impl<'a> ExactOperator<'a> {
    fn new(sys: &'a SystemSpec, chain: &ChainSpec, omega: f64, basis: &'a TruncatedChainBasis) -> Self {
        let n = basis.chain.n_modes();
        let full = chain.one_particle_hamiltonian();
        let h1 = CMatrix::from_fn(n, n, |i, j| C64::new(full[(i, j)] - if i == j { omega } else { 0.0 }, 0.0));
        let exc = sys.excitation();
        let d = sys.dim();
        let dn = CMatrix::from_fn(d, d, |a, b| C64::new(exc[a] - exc[b], 0.0));
        let f = basis.chain.len();
        Self {
            sys,
            basis,
            h1,
            omega,
            dn,
            hs: CMatrix::zeros(d, d),
            lowered: vec![vec![ZERO; d * f]; n],
            g: vec![ZERO; f],
        }
    }

    /// `out = −i H̃(t) x` in the frame rotating with `ω_ref (N_chain + N_sys)`.
    fn derivative(&mut self, t: f64, x: &[C64], out: &mut [C64]) {
        let d = self.sys.dim();
        let reg = &self.basis.chain;
        let f = reg.len();
        let n = reg.n_modes();
        let base = self.sys.hamiltonian(t);
        let exc = self.sys.excitation();
        for a in 0..d {
            for b in 0..d {
                let diag = if a == b { exc[a] * self.omega } else { 0.0 };
                self.hs[(a, b)] = (base[(a, b)] - diag) * C64::from_polar(1.0, self.omega * self.dn[(a, b)].re * t);
            }
        }
        out.iter_mut().for_each(|z| *z = ZERO);
        for a in 0..d {
            for b in 0..d {
                let h = self.hs[(a, b)];
                if h != ZERO {
                    let (o, xb) = (&mut out[a * f..(a + 1) * f], &x[b * f..(b + 1) * f]);
                    o.iter_mut().zip(xb).for_each(|(o, &v)| *o += h * v);
                }
            }
        }
        if n == 0 {
            out.iter_mut().for_each(|z| *z *= MINUS_I);
            return;
        }
        for (j, y) in self.lowered.iter_mut().enumerate() {
            y.iter_mut().for_each(|z| *z = ZERO);
            for s in 0..d {
                reg.lower_add(j, C64::new(1.0, 0.0), &x[s * f..(s + 1) * f], &mut y[s * f..(s + 1) * f]);
            }
        }
        // Σ_ij H₁_ij a_i† a_j
        for s in 0..d {
            for i in 0..n {
                self.g.iter_mut().for_each(|z| *z = ZERO);
                let mut any = false;
                for j in 0..n {
                    let hij = self.h1[(i, j)];
                    if hij != ZERO {
                        any = true;
                        let y = &self.lowered[j][s * f..(s + 1) * f];
                        self.g.iter_mut().zip(y).for_each(|(g, &v)| *g += hij * v);
                    }
                }
                if any {
                    reg.raise_add(i, C64::new(1.0, 0.0), &self.g, &mut out[s * f..(s + 1) * f]);
                }
            }
        }
        // V† a₀ + V a₀† with rotating-frame phases e^{iω(n_a − n_b ∓ 1)t}
        let v = self.sys.coupling();
        for a in 0..d {
            for b in 0..d {
                let vd = v[(b, a)].conj();
                if vd != ZERO {
                    let c = vd * C64::from_polar(1.0, self.omega * (self.dn[(a, b)].re - 1.0) * t);
                    let (o, y) = (&mut out[a * f..(a + 1) * f], &self.lowered[0][b * f..(b + 1) * f]);
                    o.iter_mut().zip(y).for_each(|(o, &w)| *o += c * w);
                }
                let vab = v[(a, b)];
                if vab != ZERO {
                    let c = vab * C64::from_polar(1.0, self.omega * (self.dn[(a, b)].re + 1.0) * t);
                    reg.raise_add(0, c, &x[b * f..(b + 1) * f], &mut out[a * f..(a + 1) * f]);
                }
            }
        }
        out.iter_mut().for_each(|z| *z *= MINUS_I);
    }
}

fn record(t: f64, x: &[C64], sys: &SystemSpec, basis: &TruncatedChainBasis) -> ExactRecord {
    let f = basis.chain.len();
    let n_max = basis.chain.n_max() as u32;
    let (mut so, mut co, mut top, mut norm) = (0.0, 0.0, 0.0, 0.0);
    for (k, z) in x.iter().enumerate() {
        let p = z.norm_sqr();
        let (s, i) = (k / f, k % f);
        let n = basis.chain.total(i);
        so += sys.excitation()[s] * p;
        co += f64::from(n) * p;
        if n == n_max {
            top += p;
        }
        norm += p;
    }
    ExactRecord { t, system_occupation: so, chain_occupation: co, top_shell: top, norm: norm.sqrt() }
}

/// Integrates system + first `n_sites` chain sites from `ψ_sys ⊗ |vac⟩` on `[0, T]`.
pub fn exact_evolve(
    sys: &SystemSpec,
    chain: &ChainSpec,
    psi0: &[C64],
    horizon: f64,
    opts: &ExactOptions,
) -> Result<ExactRun> {
    if opts.n_sites == 0 || opts.n_sites > chain.n_sites() {
        return Err(Error::invalid("n_sites", format!("must lie in 1..={}", chain.n_sites())));
    }
    for (name, x) in [("dt", opts.dt), ("output_dt", opts.output_dt), ("horizon", horizon)] {
        if !x.is_finite() || x <= 0.0 {
            return Err(Error::invalid(name, "must be finite and positive"));
        }
    }
    if psi0.len() != sys.dim() {
        return Err(Error::LayoutMismatch { expected: sys.dim(), found: psi0.len() });
    }
    let kept = ChainSpec::new(chain.epsilon()[..opts.n_sites].to_vec(), chain.hopping()[..opts.n_sites - 1].to_vec())?;
    let basis = TruncatedChainBasis::new(sys.dim(), opts.n_sites, opts.n_quanta, opts.basis_limit)?;
    let mut op = ExactOperator::new(sys, &kept, chain.mean_energy(), &basis);

    let mut x = vec![ZERO; basis.len()];
    let vac = basis.chain.index_of(&vec![0u8; opts.n_sites]).expect("vacuum present");
    for (s, &a) in psi0.iter().enumerate() {
        x[basis.index(s, vac)] = a;
    }
    let out_every = (opts.output_dt / opts.dt).round().max(1.0) as usize;
    let n_steps = (horizon / opts.dt).ceil() as usize;
    let h = horizon / n_steps as f64;
    let mut rk = Rk4::new(x.len());
    let mut records = vec![record(0.0, &x, sys, &basis)];
    for k in 0..n_steps {
        let t = k as f64 * h;
        rk.step(&mut |t, y: &[C64], o: &mut [C64]| op.derivative(t, y, o), t, h, &mut x);
        if (k + 1) % out_every == 0 || k + 1 == n_steps {
            let rec = record((k + 1) as f64 * h, &x, sys, &basis);
            if !rec.norm.is_finite() || (rec.norm - 1.0).abs() > 1e-6 {
                return Err(Error::NormDrift { context: "exact evolution", t: rec.t, drift: rec.norm - 1.0 });
            }
            records.push(rec);
        }
    }
    Ok(ExactRun { records, final_state: x })
}

/// Orbital `φ(τ) = e^{iH₁τ} e₀` on `τ_k = k·dt`, integrated by RK4 independently of the
/// spectral propagator.
fn rk4_orbital(chain: &ChainSpec, dt: f64, n_steps: usize) -> Vec<Vec<C64>> {
    let h1 = chain.one_particle_hamiltonian();
    let n = chain.n_sites();
    let mut phi = vec![ZERO; n];
    phi[0] = C64::new(1.0, 0.0);
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(phi.clone());
    let mut rk = Rk4::new(n);
    let i = C64::new(0.0, 1.0);
    for k in 0..n_steps {
        rk.step(
            &mut |_t, y: &[C64], o: &mut [C64]| {
                for (r, o) in o.iter_mut().enumerate() {
                    let mut acc = ZERO;
                    for c in r.saturating_sub(1)..(r + 2).min(n) {
                        acc += y[c] * h1[(r, c)];
                    }
                    *o = i * acc;
                }
            },
            k as f64 * dt,
            dt,
            &mut phi,
        );
        out.push(phi.clone());
    }
    out
}

/// Monte-Carlo estimate of `E[α_i* α_j]` for the chain driven on site 0 by complex white
/// noise, `α(t) = Σ_k φ(t − s_k) ΔZ_k` with `E|ΔZ|² = ds`.
pub fn stochastic_rho_plus(chain: &ChainSpec, t: f64, n_samples: usize, seed: u64, workers: usize) -> Result<CMatrix> {
    if n_samples < 100 {
        return Err(Error::invalid("n_samples", "at least 100 samples are needed"));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::invalid("t", "must be finite and nonnegative"));
    }
    let n = chain.n_sites();
    if t == 0.0 {
        return Ok(CMatrix::zeros(n, n));
    }
    // Gershgorin bound on ‖H₁‖
    let maxspec = chain.epsilon().iter().fold(0.0f64, |m, e| m.max(e.abs())) + 2.0 * chain.max_hopping();
    let max_dt = (1e-3 / maxspec.max(1e-12)).min(t / 100.0);
    let n_steps = (t / max_dt).ceil() as usize;
    let ds = t / n_steps as f64;
    let phi = rk4_orbital(chain, ds, n_steps);
    let drift = (phi[n_steps].iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs();
    if !drift.is_finite() || drift > 1e-8 {
        return Err(Error::NormDrift { context: "stochastic orbital", t, drift });
    }
    let amp = (ds / 2.0).sqrt();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    let sum = pool.install(|| {
        (0..n_samples as u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = history_rng(seed, k);
                let mut alpha = vec![ZERO; n];
                // increment on [s_m, s_m + ds] propagates for t − s_m = (n_steps − m)·ds
                for m in 0..n_steps {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    let dz = C64::new(re, im) * amp;
                    for (a, p) in alpha.iter_mut().zip(&phi[n_steps - m]) {
                        *a += p * dz;
                    }
                }
                CMatrix::from_fn(n, n, |i, j| alpha[i].conj() * alpha[j])
            })
            .reduce(|| CMatrix::zeros(n, n), |a, b| a + b)
    });
    Ok(sum / C64::new(n_samples as f64, 0.0))
}
