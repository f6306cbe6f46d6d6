mod common;

use common::{fixture, staircase_slope, R_CUT, TRAJ_DT};
use kotelnikov::chain_env::{build_uniform_chain, propagate_wavepacket, ChainSpec};
use kotelnikov::exact_reference::stochastic_rho_plus;
use kotelnikov::linalg::{frobenius, hermiticity_defect, principal_angles, unitarity_defect};
use kotelnikov::mode_streams::*;
use kotelnikov::significance::{occupation_gram, psd_defect, rho_minus, rho_plus, significant_modes};
use kotelnikov::CMatrix;
use proptest::prelude::*;

fn modes_of(streams: &ModeStreams, kind: EventKind, until: f64) -> CMatrix {
    let sel: Vec<_> = streams.events.iter().filter(|e| e.kind == kind && e.time <= until).collect();
    let n = streams.segments[0].frame.nrows();
    CMatrix::from_fn(n, sel.len(), |j, l| sel[l].mode[j])
}

#[test]
fn incoming_rate_is_proportional_to_bandwidth() {
    let horizon = 300.0;
    let slope = |h: f64| {
        let f = fixture(h, horizon);
        staircase_slope(|t| f.streams.counts(t).m_in as f64, horizon / 2.0, horizon)
    };
    let ratio = slope(0.1) / slope(0.05);
    assert!((ratio - 2.0).abs() <= 0.15 * 2.0, "ratio {ratio}");
}

#[test]
fn initial_coupling_quench_is_a_burst() {
    let f = fixture(0.05, 300.0);
    let t_in = f.streams.times(EventKind::Coupling);
    let asymptotic = 1.0 / staircase_slope(|t| f.streams.counts(t).m_in as f64, 150.0, 300.0);
    assert!(t_in.len() > 4);
    for w in t_in.windows(2).take(3) {
        assert!(w[1] - w[0] < asymptotic, "gap {} vs {asymptotic}", w[1] - w[0]);
    }
}

#[test]
fn relevant_count_saturates_and_rates_agree() {
    let f = fixture(0.05, 300.0);
    let horizon = f.horizon;
    let grid: Vec<f64> = (0..=2000).map(|k| horizon * k as f64 / 2000.0).collect();
    let r: Vec<usize> = grid.iter().map(|&t| f.streams.counts(t).r).collect();
    let max_second_half = r[1000..].iter().max().unwrap();
    let max_last_quarter = r[1500..].iter().max().unwrap();
    assert_eq!(max_second_half, max_last_quarter);

    let s_in = staircase_slope(|t| f.streams.counts(t).m_in as f64, horizon / 4.0, 0.75 * horizon);
    let s_out = staircase_slope(|t| f.streams.counts(t).m_out as f64, horizon / 4.0, 0.75 * horizon);
    assert!((s_in - s_out).abs() <= 0.1 * s_in, "{s_in} vs {s_out}");
}

#[test]
fn terminal_incoming_count_matches_significant_modes() {
    let f = fixture(0.05, 100.0);
    let modes = significant_modes(&rho_plus(&f.traj, f.horizon).unwrap(), R_CUT).unwrap();
    assert_eq!(f.streams.counts(f.horizon).m_in, modes.len());
}

#[test]
fn modes_are_insignificant_before_they_couple() {
    let f = fixture(0.1, 60.0);
    let theta = f.streams.r_cut * f.streams.reference;
    for e in f.streams.events.iter().filter(|e| e.kind == EventKind::Coupling) {
        let g = occupation_gram(&f.traj, e.time).unwrap();
        let n = (e.mode.adjoint() * &g * &e.mode)[(0, 0)].re;
        assert!(n <= theta * (1.0 + 1e-9), "t_in = {}: {n} > {theta}", e.time);
        // one bracket later the mode must already be significant
        let later = (e.time + f.streams.dt_event).min(f.horizon);
        let g = occupation_gram(&f.traj, later).unwrap();
        let n_later = (e.mode.adjoint() * &g * &e.mode)[(0, 0)].re;
        assert!(n_later > 0.0);
    }
}

#[test]
fn discarded_significance_bounds_the_coupling_deficit() {
    let f = fixture(0.05, 60.0);
    let m = modes_of(&f.streams, EventKind::Coupling, f.horizon);
    let g = occupation_gram(&f.traj, f.horizon).unwrap();
    let captured = (m.adjoint() * &g * &m).trace().re;
    let deficit = f.horizon - captured;
    let theta = f.streams.r_cut * f.streams.reference;
    assert!(deficit >= -1e-9);
    assert!(deficit <= (f.traj.n_sites() - m.ncols()) as f64 * theta);
}

#[test]
fn outgoing_and_relevant_modes_span_the_coupled_subspace() {
    let f = fixture(0.1, 60.0);
    for seg in f.streams.segments.iter().filter(|s| s.end > s.start) {
        let t = 0.5 * (seg.start + seg.end);
        let incoming = modes_of(&f.streams, EventKind::Coupling, t);
        let outgoing = modes_of(&f.streams, EventKind::Decoupling, t);
        let mut union = CMatrix::zeros(incoming.nrows(), seg.frame.ncols() + outgoing.ncols());
        union.columns_mut(0, seg.frame.ncols()).copy_from(&seg.frame);
        union.columns_mut(seg.frame.ncols(), outgoing.ncols()).copy_from(&outgoing);
        assert_eq!(union.ncols(), incoming.ncols());
        if incoming.ncols() == 0 {
            continue;
        }
        let angles = principal_angles(&union, &incoming);
        assert!(angles.iter().all(|&a| a < 1e-6), "t = {t}: {angles:?}");
    }
}

#[test]
fn tightening_the_threshold_only_adds_and_shifts_events() {
    let chain = build_uniform_chain(1.0, 0.1, 60.0, 2.0).unwrap();
    let traj = propagate_wavepacket(&chain, 60.0, TRAJ_DT).unwrap();
    let dt = default_dt_event(0.1, 60.0);
    let loose = extract_streams(&traj, 60.0, 1e-4, dt).unwrap();
    let tight = extract_streams(&traj, 60.0, 1e-5, dt).unwrap();
    assert!(tight.events.len() >= loose.events.len());
    assert!(tight.times(EventKind::Decoupling).len() >= loose.times(EventKind::Decoupling).len());
    // the k-th coupling only moves earlier
    let l_in = loose.times(EventKind::Coupling);
    let t_in = tight.times(EventKind::Coupling);
    assert!(t_in.len() >= l_in.len());
    for (a, b) in l_in.iter().zip(&t_in) {
        assert!(b <= a, "tight {b} after loose {a}");
    }
}

/// `φ*(T − t) = e^{−iH₁T} φ(t)` for a free orbital, so reversal is a fixed unitary
/// change of frame; the incoming and outgoing spectra swap as `γ(t) ≅ γ(T) − γ(T − t)`.
#[test]
fn time_reversal_swaps_past_and_future_significance() {
    let f = fixture(0.1, 60.0);
    let horizon = f.horizon;
    let reversed = extract_streams(&f.traj.time_reversed(), horizon, R_CUT, f.streams.dt_event).unwrap();
    for kind in [EventKind::Coupling, EventKind::Decoupling] {
        let a = f.streams.times(kind);
        let b = reversed.times(kind);
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= f.streams.dt_event));
    }
    let total = occupation_gram(&f.traj, horizon).unwrap();
    let scale = total.trace().re;
    for k in [1usize, 170, 600, 1100] {
        let t = k as f64 * TRAJ_DT;
        let past = kotelnikov::linalg::hermitian_eigen(&occupation_gram(&f.traj, t).unwrap()).0;
        let future = kotelnikov::linalg::hermitian_eigen(&(&total - occupation_gram(&f.traj, horizon - t).unwrap())).0;
        let gap = past.iter().zip(&future).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9 * scale, "t = {t}: {gap}");
    }
}

#[test]
fn schedule_generators_and_channels_are_consistent() {
    let f = fixture(0.1, 40.0);
    let sched = EffectiveSchedule::from_streams(&f.traj, &f.streams).unwrap();
    assert_eq!(sched.intervals.first().unwrap().start, 0.0);
    assert_eq!(sched.intervals.last().unwrap().end, f.horizon);
    for w in sched.intervals.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    let mut decouplings = f.streams.events.iter().filter(|e| e.kind == EventKind::Decoupling);
    for iv in &sched.intervals {
        let d = iv.d_matrix();
        assert!(hermiticity_defect(&d) < 1e-12);
        match iv.terminal {
            IntervalEnd::Coupling | IntervalEnd::Horizon => assert!(frobenius(&d) == 0.0),
            IntervalEnd::Decoupling => {
                let u = decouplings.next().unwrap().rotation.clone().unwrap();
                assert!(unitarity_defect(&u) < 1e-10);
                assert!(frobenius(&(iv.rotation() - u)) < 1e-8);
            }
        }
        if iv.len() > 0.0 {
            let mid = 0.5 * (iv.start + iv.end);
            assert_eq!(iv.chi.channels(), iv.rank());
            assert_eq!(iv.rank(), f.streams.counts(mid).r);
        }
    }
}

#[test]
fn white_noise_average_reproduces_rho_plus() {
    let chain = build_uniform_chain(1.0, 0.05, 10.0, 2.0).unwrap();
    let traj = propagate_wavepacket(&chain, 10.0, TRAJ_DT).unwrap();
    let exact = rho_plus(&traj, 10.0).unwrap().mat;
    let n = 2000;
    let sampled = stochastic_rho_plus(&chain, 10.0, n, 7, 1).unwrap();
    let dist = frobenius(&(sampled - &exact));
    assert!(dist <= 3.0 * frobenius(&exact) / (n as f64).sqrt(), "{dist}");
}

fn random_chain() -> impl Strategy<Value = ChainSpec> {
    (2usize..12).prop_flat_map(|n| {
        (prop::collection::vec(0.8f64..1.2, n), prop::collection::vec(0.02f64..0.2, n - 1))
            .prop_map(|(e, h)| ChainSpec::new(e, h).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn significance_is_hermitian_psd_and_complementary(chain in random_chain(), frac in 0.0f64..1.0) {
        let horizon = 20.0;
        let traj = propagate_wavepacket(&chain, horizon, TRAJ_DT).unwrap();
        let t = (frac * horizon / TRAJ_DT).round() * TRAJ_DT;
        let plus = rho_plus(&traj, t).unwrap();
        let minus = rho_minus(&traj, t, horizon).unwrap();
        let total = rho_plus(&traj, horizon).unwrap();
        for m in [&plus.mat, &minus.mat] {
            prop_assert!(hermiticity_defect(m) < 1e-12);
            prop_assert!(psd_defect(m) <= 1e-10 * frobenius(m).max(1e-300));
        }
        prop_assert!(frobenius(&(&plus.mat + &minus.mat - &total.mat)) < 1e-12 * frobenius(&total.mat));
        prop_assert!(plus.trace() <= total.trace() + 1e-12);
    }

    #[test]
    fn extracted_streams_satisfy_counting_and_unitarity(h in 0.03f64..0.2, horizon in 10.0f64..30.0) {
        let chain = build_uniform_chain(1.0, h, horizon, 2.0).unwrap();
        let traj = propagate_wavepacket(&chain, horizon, TRAJ_DT).unwrap();
        let streams = extract_streams(&traj, horizon, R_CUT, default_dt_event(h, horizon)).unwrap();
        let mut last = (0usize, 0usize);
        for (t, c) in streams.staircase() {
            prop_assert_eq!(c.r + c.m_out, c.m_in);
            prop_assert!(c.m_in - last.0 + c.m_out - last.1 == 1);
            prop_assert!((0.0..=horizon).contains(&t));
            last = (c.m_in, c.m_out);
        }
        for w in streams.events.windows(2) {
            prop_assert!(w[0].time <= w[1].time);
        }
        let gens = frame_generators(&streams).unwrap();
        for (e, g) in streams.events.iter().zip(&gens) {
            prop_assert!((e.mode.norm() - 1.0).abs() < 1e-10);
            prop_assert!(hermiticity_defect(g) < 1e-12);
            if let Some(u) = &e.rotation {
                prop_assert!(unitarity_defect(u) < 1e-10);
                prop_assert!(frobenius(&(kotelnikov::linalg::expm_hermitian(g, 1.0) - u)) < 1e-10);
            }
        }
    }
}
