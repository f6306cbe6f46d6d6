mod common;

use common::{driven_qubit, fixture, projector, R_CUT};
use kotelnikov::fock_dynamics::*;
use kotelnikov::linalg::{hermitian_eigen, hermiticity_defect, trace_distance};
use kotelnikov::mode_streams::EffectiveSchedule;
use kotelnikov::C64;

fn max_gap(a: &[ObservableRecord], b: &[ObservableRecord], f: fn(&ObservableRecord) -> f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert!((x.t - y.t).abs() < 1e-12);
            (f(x) - f(y)).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn incoming_frame_schedule_reproduces_forward_frame() {
    let fx = fixture(0.05, 40.0);
    let sys = driven_qubit(0.05);
    let opts = EvolutionOptions { n_max: 6, output_dt: 1.0, ..Default::default() };
    let fwd = evolve_forward_frame(&sys, &fx.traj, &fx.streams, &sys.basis_state(0), &opts).unwrap();
    let sched = EffectiveSchedule::incoming_frame(&fx.traj, &fx.streams).unwrap();
    let compiled = CompiledSchedule::new(sched, 6, 1 << 22).unwrap();
    let rho = evolve_density(&sys, &compiled, &projector(2, 0), &opts).unwrap();
    assert!(max_gap(&fwd.records, &rho.records, |r| r.system_occupation) < 1e-8);
    let pure = fwd.final_state.to_density();
    assert!(trace_distance(&pure.rho, &rho.final_state.rho) < 1e-6);
    assert!((fwd.final_state.norm() - 1.0).abs() < 1e-6);
}

#[test]
fn growing_register_matches_full_incoming_frame() {
    let fx = fixture(0.05, 60.0);
    let sys = driven_qubit(0.05);
    let opts = EvolutionOptions { n_max: 6, output_dt: 1.0, ..Default::default() };
    let fwd = evolve_forward_frame(&sys, &fx.traj, &fx.streams, &sys.basis_state(0), &opts).unwrap();
    let grow = EffectiveSchedule::from_streams(&fx.traj, &fx.streams.incoming_only()).unwrap();
    let compiled = CompiledSchedule::new(grow, 6, 1 << 22).unwrap();
    struct Never;
    impl Detacher for Never {
        fn detach(
            &mut self,
            _: f64,
            _: &JointState,
            _: &[(usize, usize)],
            _: &kotelnikov::fock::FockRegister,
        ) -> kotelnikov::Result<(JointState, f64)> {
            unreachable!("no decouplings in an incoming-only schedule")
        }
    }
    let run = evolve_moving_frame(&sys, &compiled, &sys.basis_state(0), &opts, &mut Never).unwrap();
    let a = &fwd.final_state.amplitudes;
    let b = &run.final_state.amplitudes;
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    // Neglected coupling before t_in: ∫|χ| ≤ sqrt(t_in · θ), with ‖b†‖ ≤ sqrt(n_max + 1) on the register.
    let theta = R_CUT * fx.streams.reference;
    let g = 0.05 * 7f64.sqrt();
    let bound: f64 = fx
        .streams
        .times(kotelnikov::mode_streams::EventKind::Coupling)
        .iter()
        .map(|&t_in| g * (t_in * theta).sqrt())
        .sum();
    assert!(diff < bound, "state difference {diff} above bound {bound}");
    assert!(max_gap(&fwd.records, &run.records, |r| r.system_occupation) < R_CUT);
}

#[test]
fn excitation_bookkeeping_without_drive() {
    let fx = fixture(0.05, 100.0);
    let sys = SystemSpec::driven_qubit(1.0, 0.05, Drive::None);
    let sched = EffectiveSchedule::from_streams(&fx.traj, &fx.streams).unwrap();
    let compiled = CompiledSchedule::new(sched, 2, 1 << 22).unwrap();
    let opts = EvolutionOptions { n_max: 2, output_dt: 2.0, ..Default::default() };
    let run = evolve_density(&sys, &compiled, &projector(2, 1), &opts).unwrap();
    for r in &run.records {
        let total = r.system_occupation + r.relevant_occupation + r.detached_occupation;
        assert!((total - 1.0).abs() < 1e-6, "t = {}: {total}", r.t);
    }
    let last = run.records.last().unwrap();
    assert!(last.detached_occupation > 0.1);
    assert!(run.detachments.len() == fx.streams.times(kotelnikov::mode_streams::EventKind::Decoupling).len());
}

#[test]
fn relevant_density_stays_physical() {
    let fx = fixture(0.05, 100.0);
    let sys = driven_qubit(0.05);
    let sched = EffectiveSchedule::from_streams(&fx.traj, &fx.streams).unwrap();
    let compiled = CompiledSchedule::new(sched, 5, 1 << 22).unwrap();
    let opts = EvolutionOptions {
        n_max: 5,
        output_dt: 10.0,
        keep_checkpoints: true,
        overflow_tolerance: 1e-2,
        ..Default::default()
    };
    let run = evolve_density(&sys, &compiled, &projector(2, 0), &opts).unwrap();
    for d in &run.checkpoints {
        assert!(hermiticity_defect(&d.rho) < 1e-8);
        assert!((d.trace() - 1.0).abs() < 1e-8);
        let (vals, _) = hermitian_eigen(&d.rho);
        assert!(*vals.last().unwrap() > -1e-8);
    }
}

#[test]
fn truncation_and_step_convergence() {
    let fx = fixture(0.05, 100.0);
    let sys = driven_qubit(0.05);
    let run = |n_max: usize, max_step: f64| {
        let opts = EvolutionOptions { n_max, max_step, output_dt: 1.0, ..Default::default() };
        evolve_forward_frame(&sys, &fx.traj, &fx.streams, &sys.basis_state(0), &opts).unwrap().records
    };
    let base = run(8, 0.025);
    assert!(max_gap(&base, &run(10, 0.025), |r| r.system_occupation) < 1e-3);
    assert!(max_gap(&base, &run(8, 0.0125), |r| r.system_occupation) < 1e-6);
}

#[test]
fn overflow_is_reported_with_leaked_weight() {
    let fx = fixture(0.05, 100.0);
    let sys = driven_qubit(0.05);
    let opts = EvolutionOptions { n_max: 2, output_dt: 1.0, ..Default::default() };
    match evolve_forward_frame(&sys, &fx.traj, &fx.streams, &sys.basis_state(0), &opts) {
        Err(kotelnikov::Error::RegisterOverflow { leaked, .. }) => assert!(leaked > 1e-3),
        other => panic!("expected overflow, got {other:?}"),
    }
}

#[test]
fn layout_mismatch_is_rejected() {
    let fx = fixture(0.05, 20.0);
    let sys = driven_qubit(0.05);
    let sched = EffectiveSchedule::from_streams(&fx.traj, &fx.streams).unwrap();
    let bad = JointState { t: 0.0, sys_dim: 2, n_modes: 5, n_max: 2, amplitudes: vec![C64::new(1.0, 0.0); 3] };
    assert!(matches!(apply_h_eff(0.5, &sched, 0, &sys, &bad), Err(kotelnikov::Error::LayoutMismatch { .. })));
}
