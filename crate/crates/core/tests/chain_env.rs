use kotelnikov::chain_env::*;
use kotelnikov::{CMatrix, C64};

/// `J_1(x) = (1/π) ∫₀^π cos(τ − x sin τ) dτ` by composite Simpson.
fn bessel_j1(x: f64) -> f64 {
    let n = 2000;
    let h = std::f64::consts::PI / n as f64;
    let f = |t: f64| (t - x * t.sin()).cos();
    let mut s = f(0.0) + f(std::f64::consts::PI);
    for k in 1..n {
        s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 / std::f64::consts::PI
}

#[test]
fn return_amplitude_matches_semi_infinite_chain() {
    let (h, t_end) = (0.05, 100.0);
    let chain = build_uniform_chain(1.0, h, t_end, 2.0).unwrap();
    let traj = propagate_wavepacket(&chain, t_end, 0.05).unwrap();
    let corr = zero_point_correlator(&traj);
    let mut worst: f64 = 0.0;
    for (t, c) in corr.times.iter().zip(&corr.values).step_by(7) {
        let exact = if *t == 0.0 { 1.0 } else { bessel_j1(2.0 * h * t) / (h * t) };
        worst = worst.max((c.norm() - exact.abs()).abs());
    }
    assert!(worst < 1e-6, "worst deviation {worst}");
    assert_eq!(corr.values[0], C64::new(1.0, 0.0));
}

#[test]
fn orbital_matches_dense_matrix_exponential() {
    let chain = ChainSpec::uniform(1.0, 0.05, 30).unwrap();
    let traj = propagate_wavepacket(&chain, 40.0, 0.1).unwrap();
    let h1 = chain.one_particle_hamiltonian().map(|x| C64::new(x, 0.0));
    for m in [37usize, 150, 400] {
        let tau = traj.time(m);
        let u: CMatrix = (h1.clone() * C64::new(0.0, tau)).exp();
        let col = u.column(0);
        let diff = (0..30).map(|j| (traj.phi()[(j, m)] - col[j]).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "τ = {tau}: {diff}");
    }
}

#[test]
fn padded_chain_keeps_boundary_leak_small() {
    let chain = build_uniform_chain(1.0, 0.1, 100.0, 1.5).unwrap();
    let traj = propagate_wavepacket(&chain, 100.0, 0.05).unwrap();
    assert!(traj.boundary_leak() < 1e-8, "leak {}", traj.boundary_leak());
    assert!(traj.norm_drift() < 1e-8);
    traj.check_boundary_leak(DEFAULT_LEAK_TOLERANCE).unwrap();
}

#[test]
fn doubling_sites_leaves_return_amplitude_unchanged() {
    let chain = build_uniform_chain(1.0, 0.05, 100.0, 2.0).unwrap();
    let long = ChainSpec::uniform(1.0, 0.05, 2 * chain.n_sites()).unwrap();
    let a = propagate_wavepacket(&chain, 100.0, 0.05).unwrap();
    let b = propagate_wavepacket(&long, 100.0, 0.05).unwrap();
    let diff = (0..=a.n_steps()).map(|m| (a.phi()[(0, m)] - b.phi()[(0, m)]).norm()).fold(0.0, f64::max);
    assert!(diff < 1e-8, "{diff}");
}

#[test]
fn halving_time_step_leaves_correlator_unchanged() {
    let chain = build_uniform_chain(1.0, 0.05, 100.0, 2.0).unwrap();
    let coarse = zero_point_correlator(&propagate_wavepacket(&chain, 100.0, 0.05).unwrap());
    let fine = zero_point_correlator(&propagate_wavepacket(&chain, 100.0, 0.025).unwrap());
    let diff = coarse.values.iter().enumerate().map(|(m, c)| (c - fine.values[2 * m]).norm()).fold(0.0, f64::max);
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn spectral_density_occupies_the_band_with_semicircle_shape() {
    let (eps, h, t_end) = (1.0, 0.05, 3200.0);
    let chain = build_uniform_chain(eps, h, t_end, 2.0).unwrap();
    let traj = propagate_wavepacket(&chain, t_end, 0.05).unwrap();
    let corr = zero_point_correlator(&traj);
    let spacing = h / 20.0;
    let grid: Vec<f64> = (0..=120).map(|k| eps - 60.0 * spacing + spacing * k as f64).collect();
    let j = spectral_density(&corr, &grid, SpectralWindow::Gaussian).unwrap();
    let max = j.iter().copied().fold(f64::MIN, f64::max);
    for (w, v) in grid.iter().zip(&j) {
        if *v >= 0.01 * max {
            assert!(*w >= eps - 2.0 * h - spacing && *w <= eps + 2.0 * h + spacing, "J({w}) = {v}");
        }
    }
    // semicircle sqrt(4h² − x²)/(2h²) peaks at 1/h
    let centre = j[60];
    assert!((centre * h - 1.0).abs() < 0.03, "J(ε) = {centre}");
    let x = 0.05;
    let shape = j[60 + (x / spacing).round() as usize] / centre;
    assert!((shape - (1.0 - (x / (2.0 * h)).powi(2)).sqrt()).abs() < 0.03);
}

#[test]
fn decoupled_site_is_a_pure_phase() {
    let chain = build_uniform_chain(1.0, 0.0, 10.0, 2.0).unwrap();
    assert_eq!(chain.n_sites(), 1);
    let traj = propagate_wavepacket(&chain, 10.0, 0.1).unwrap();
    let corr = zero_point_correlator(&traj);
    for (t, c) in corr.times.iter().zip(&corr.values) {
        assert!((c - C64::from_polar(1.0, -t)).norm() < 1e-12);
    }
}
