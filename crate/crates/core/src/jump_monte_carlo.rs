//! Measurement unraveling of detachments: Schmidt branches, sampled jump histories,
//! ensemble averages and the entropy of the jump record.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::fock::FockRegister;
use crate::fock_dynamics::{
    evolve_moving_frame, CompiledSchedule, Detacher, EvolutionOptions, JointState, ObservableRecord, RelevantDensity,
    SystemSpec,
};
use crate::{CMatrix, Error, Result, C64};

/// Identifier of the random source written to output headers.
pub const RNG_ID: &str = "chacha20-stream";

/// Branches lighter than this are dropped before sampling.
pub const BRANCH_CUTOFF: f64 = 1e-12;

/// Tolerance on `Σ_p |c_p|² = 1`.
pub const LADDER_TOLERANCE: f64 = 1e-8;

/// One term `c_p |a_p⟩ ⊗ |o_p⟩` of the Schmidt decomposition across the detaching slot.
#[derive(Debug, Clone)]
pub struct SchmidtBranch {
    /// `|c_p|²`, normalized over all branches.
    pub weight: f64,
    /// Normalized remaining state `|a_p⟩` on the smaller register.
    pub collapsed: JointState,
    /// Detached-slot state `|o_p⟩` in the occupation basis `0..=n_max`.
    pub outgoing: Vec<C64>,
}

impl SchmidtBranch {
    /// `⟨o_p| n |o_p⟩`.
    pub fn outgoing_occupation(&self) -> f64 {
        self.outgoing.iter().enumerate().map(|(n, z)| n as f64 * z.norm_sqr()).sum()
    }
}

/// Schmidt decomposition of `state` across (system ⊗ slots 1..) vs slot 0, sorted by
/// descending weight; branches below [`BRANCH_CUTOFF`] are dropped.
pub fn schmidt_split(
    state: &JointState,
    split: &[(usize, usize)],
    smaller: &FockRegister,
) -> Result<Vec<SchmidtBranch>> {
    let f_old = split.len();
    if state.amplitudes.len() != state.sys_dim * f_old {
        return Err(Error::LayoutMismatch { expected: state.sys_dim * f_old, found: state.amplitudes.len() });
    }
    let norm2: f64 = state.amplitudes.iter().map(|z| z.norm_sqr()).sum();
    if norm2 < 1e-24 {
        return Err(Error::ZeroState);
    }
    let f_new = smaller.len();
    let cols = state.n_max + 1;
    let rows = state.sys_dim * f_new;
    let mut m = CMatrix::zeros(rows, cols);
    for s in 0..state.sys_dim {
        for (i, &(n0, rest)) in split.iter().enumerate() {
            m[(s * f_new + rest, n0)] = state.amplitudes[s * f_old + i];
        }
    }
    let svd = m.svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let branches = order
        .into_iter()
        .filter_map(|k| {
            let weight = svd.singular_values[k].powi(2) / norm2;
            (weight > BRANCH_CUTOFF).then(|| SchmidtBranch {
                weight,
                collapsed: JointState {
                    t: state.t,
                    sys_dim: state.sys_dim,
                    n_modes: smaller.n_modes(),
                    n_max: state.n_max,
                    amplitudes: u.column(k).iter().copied().collect(),
                },
                outgoing: v_t.row(k).iter().copied().collect(),
            })
        })
        .collect();
    Ok(branches)
}

/// One detachment along a history.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    pub t: f64,
    /// Index of the drawn branch in the descending ladder.
    pub branch: usize,
    pub probability: f64,
    /// `|c_p|²` in descending order.
    pub ladder: Vec<f64>,
    /// Occupation of the detached slot in the drawn branch.
    pub outgoing_occupation: f64,
}

/// A sampled sequence of jumps with its observables.
#[derive(Debug, Clone)]
pub struct JumpHistory {
    pub seed: u64,
    pub index: u64,
    pub records: Vec<JumpRecord>,
    pub observables: Vec<ObservableRecord>,
    /// States at the output times when checkpoints were requested.
    pub checkpoints: Vec<JointState>,
    pub final_state: JointState,
}

impl JumpHistory {
    /// `Π_k |c_{p_k}(k)|²`.
    pub fn probability(&self) -> f64 {
        self.records.iter().map(|r| r.probability).product()
    }
}

/// Detacher drawing one Schmidt branch per detachment.
pub struct BranchSampler<R: Rng> {
    rng: R,
    pub records: Vec<JumpRecord>,
}

impl<R: Rng> BranchSampler<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, records: Vec::new() }
    }
}

impl<R: Rng> Detacher for BranchSampler<R> {
    fn detach(
        &mut self,
        t: f64,
        state: &JointState,
        split: &[(usize, usize)],
        smaller: &FockRegister,
    ) -> Result<(JointState, f64)> {
        let mut branches = schmidt_split(state, split, smaller)?;
        let total: f64 = branches.iter().map(|b| b.weight).sum();
        if (total - 1.0).abs() > LADDER_TOLERANCE {
            return Err(Error::UnnormalizedLadder { total });
        }
        let u: f64 = self.rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = branches.len() - 1;
        for (p, b) in branches.iter().enumerate() {
            acc += b.weight;
            if u < acc {
                pick = p;
                break;
            }
        }
        let ladder: Vec<f64> = branches.iter().map(|b| b.weight / total).collect();
        let chosen = branches.swap_remove(pick);
        let occ = chosen.outgoing_occupation();
        self.records.push(JumpRecord { t, branch: pick, probability: ladder[pick], ladder, outgoing_occupation: occ });
        let mut next = chosen.collapsed;
        next.t = t;
        Ok((next, occ))
    }
}

/// Random source of history `index` under `seed`.
pub fn history_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples one jump history; identical `(seed, index)` give bit-identical results.
pub fn sample_history(
    seed: u64,
    index: u64,
    sys: &SystemSpec,
    compiled: &CompiledSchedule,
    psi0: &[C64],
    opts: &EvolutionOptions,
) -> Result<JumpHistory> {
    let mut sampler = BranchSampler::new(history_rng(seed, index));
    let run = evolve_moving_frame(sys, compiled, psi0, opts, &mut sampler)?;
    Ok(JumpHistory {
        seed,
        index,
        records: sampler.records,
        observables: run.records,
        checkpoints: run.checkpoints,
        final_state: run.final_state,
    })
}

/// Samples histories `0..n` in parallel on `workers` threads (0 = rayon default).
pub fn sample_ensemble(
    seed: u64,
    n: usize,
    sys: &SystemSpec,
    compiled: &CompiledSchedule,
    psi0: &[C64],
    opts: &EvolutionOptions,
    workers: usize,
) -> Result<Vec<JumpHistory>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    pool.install(|| (0..n as u64).into_par_iter().map(|i| sample_history(seed, i, sys, compiled, psi0, opts)).collect())
}

/// Mean and standard error of one observable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Ensemble statistics at one output time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePoint {
    pub t: f64,
    pub system_occupation: Estimate,
    pub relevant_occupation: Estimate,
    pub detached_occupation: Estimate,
    pub m_in: usize,
    pub m_out: usize,
    pub r: usize,
}

/// Averages over histories, with the reconstructed relevant densities when every
/// history carries checkpoints.
#[derive(Debug, Clone)]
pub struct EnsembleAverage {
    pub n_histories: usize,
    pub points: Vec<EnsemblePoint>,
    pub densities: Vec<RelevantDensity>,
}

fn estimate(values: impl Iterator<Item = f64> + Clone, n: usize) -> Estimate {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let var = values.map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    Estimate { mean, stderr: (var / nf).sqrt() }
}

/// Unweighted ensemble mean (sampling already follows the history measure).
pub fn ensemble_average(histories: &[JumpHistory]) -> Result<EnsembleAverage> {
    let n = histories.len();
    if n < 2 {
        return Err(Error::invalid("histories", "at least two histories are needed"));
    }
    let len = histories[0].observables.len();
    if histories.iter().any(|h| h.observables.len() != len) {
        return Err(Error::invalid("histories", "histories have different output grids"));
    }
    let points = (0..len)
        .map(|k| {
            let first = &histories[0].observables[k];
            let col = move |f: fn(&ObservableRecord) -> f64| histories.iter().map(move |h| f(&h.observables[k]));
            EnsemblePoint {
                t: first.t,
                system_occupation: estimate(col(|r| r.system_occupation), n),
                relevant_occupation: estimate(col(|r| r.relevant_occupation), n),
                detached_occupation: estimate(col(|r| r.detached_occupation), n),
                m_in: first.m_in,
                m_out: first.m_out,
                r: first.r,
            }
        })
        .collect();
    let n_ck = histories[0].checkpoints.len();
    let densities = if n_ck > 0 && histories.iter().all(|h| h.checkpoints.len() == n_ck) {
        (0..n_ck)
            .map(|k| {
                let mut acc = histories[0].checkpoints[k].to_density();
                for h in &histories[1..] {
                    acc.rho += h.checkpoints[k].to_density().rho;
                }
                acc.rho /= C64::new(n as f64, 0.0);
                acc
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(EnsembleAverage { n_histories: n, points, densities })
}

/// Entropy of a single ladder `−Σ p ln p`.
pub fn ladder_entropy(ladder: &[f64]) -> Result<f64> {
    let total: f64 = ladder.iter().sum();
    if (total - 1.0).abs() > LADDER_TOLERANCE || ladder.iter().any(|&p| !(0.0..=1.0 + LADDER_TOLERANCE).contains(&p)) {
        return Err(Error::UnnormalizedLadder { total });
    }
    Ok(ladder.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
}

/// `S_jump = Σ_k S_k`: the history measure factorizes over events.
pub fn jump_entropy<'a>(ladders: impl IntoIterator<Item = &'a [f64]>) -> Result<f64> {
    ladders.into_iter().map(ladder_entropy).sum()
}
