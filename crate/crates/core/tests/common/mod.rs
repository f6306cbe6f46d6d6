#![allow(dead_code)]

use kotelnikov::chain_env::{build_uniform_chain, propagate_wavepacket, ChainSpec, WavepacketTrajectory};
use kotelnikov::fock_dynamics::{Drive, SystemSpec};
use kotelnikov::mode_streams::{default_dt_event, extract_streams, ModeStreams};
use kotelnikov::{CMatrix, C64};

pub const R_CUT: f64 = 1e-4;
pub const TRAJ_DT: f64 = 0.05;

pub struct Fixture {
    pub chain: ChainSpec,
    pub traj: WavepacketTrajectory,
    pub streams: ModeStreams,
    pub horizon: f64,
}

/// Uniform chain at `ε = 1` with streams at the default event grid.
pub fn fixture(h: f64, horizon: f64) -> Fixture {
    let chain = build_uniform_chain(1.0, h, horizon, 2.0).unwrap();
    let traj = propagate_wavepacket(&chain, horizon, TRAJ_DT).unwrap();
    let streams = extract_streams(&traj, horizon, R_CUT, default_dt_event(h, horizon)).unwrap();
    Fixture { chain, traj, streams, horizon }
}

/// Resonant qubit driven by `0.1 cos t`.
pub fn driven_qubit(h: f64) -> SystemSpec {
    SystemSpec::driven_qubit(1.0, h, Drive::Cosine { amplitude: 0.1, frequency: 1.0 })
}

pub fn projector(dim: usize, k: usize) -> CMatrix {
    let mut m = CMatrix::zeros(dim, dim);
    m[(k, k)] = C64::new(1.0, 0.0);
    m
}

/// Least-squares slope of a step function sampled on a uniform grid over `[a, b]`.
pub fn staircase_slope<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let n = 400;
    let ts: Vec<f64> = (0..=n).map(|k| a + (b - a) * k as f64 / n as f64).collect();
    let ys: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
    let mt = ts.iter().sum::<f64>() / ts.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let cov: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - mt) * (y - my)).sum();
    let var: f64 = ts.iter().map(|t| (t - mt).powi(2)).sum();
    cov / var
}
