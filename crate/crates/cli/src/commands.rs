//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use kotelnikov::chain_env::{build_uniform_chain, propagate_wavepacket, ChainSpec, WavepacketTrajectory};
use kotelnikov::classical_sampling::{
    bandlimited_kernel, forward_sampling_staircase, kotelnikov_mode_count, sinc_subspace_overlap,
};
use kotelnikov::exact_reference::{exact_evolve, ExactOptions};
use kotelnikov::fock::FockRegister;
use kotelnikov::fock_dynamics::{
    evolve_density, evolve_moving_frame, CompiledSchedule, Detacher, Drive, EvolutionOptions, JointState,
    ObservableRecord, SystemSpec,
};
use kotelnikov::jump_monte_carlo::{ensemble_average, jump_entropy, sample_ensemble};
use kotelnikov::mode_streams::{default_dt_event, extract_streams, EffectiveSchedule, EventKind, ModeStreams};
use kotelnikov::schedule_format::{read_schedule, write_schedule};
use kotelnikov::significance::rho_plus;
use kotelnikov::CMatrix;

use crate::config::{config_error, ExperimentConfig, InitialState};
use crate::output::{CsvOut, Field, Provenance};

/// Shared state of one invocation.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub workers: usize,
    pub prov: Provenance,
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig, out: PathBuf, workers: usize) -> Result<Self> {
        std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        let prov = Provenance { config_hash: cfg.hash(), seed: cfg.seed };
        Ok(Self { cfg, out, workers, prov })
    }

    fn csv(&self, name: &str, notes: &[String], columns: &[&str]) -> Result<CsvOut> {
        CsvOut::create(&self.out, name, &self.prov, notes, columns)
    }

    fn chain(&self) -> Result<ChainSpec> {
        let c = &self.cfg;
        Ok(match (&c.epsilons, &c.hoppings) {
            (Some(e), Some(h)) => ChainSpec::new(e.clone(), h.clone())?,
            _ => build_uniform_chain(c.epsilon, c.h, c.horizon, c.margin)?,
        })
    }

    fn trajectory(&self, chain: &ChainSpec) -> Result<WavepacketTrajectory> {
        Ok(propagate_wavepacket(chain, self.cfg.horizon, self.cfg.traj_dt)?)
    }

    fn dt_event(&self) -> f64 {
        self.cfg.dt_event.unwrap_or_else(|| default_dt_event(self.cfg.max_hopping(), self.cfg.horizon))
    }

    fn system(&self) -> SystemSpec {
        let c = &self.cfg;
        let drive = if c.drive_amplitude == 0.0 {
            Drive::None
        } else {
            Drive::Cosine { amplitude: c.drive_amplitude, frequency: c.drive_frequency }
        };
        SystemSpec::driven_qubit(c.epsilon_s, c.coupling.unwrap_or_else(|| c.max_hopping()), drive)
    }

    fn initial_state(&self, sys: &SystemSpec) -> Vec<kotelnikov::C64> {
        sys.basis_state(match self.cfg.initial {
            InitialState::Ground => 0,
            InitialState::Excited => 1,
        })
    }

    fn evolution_options(&self) -> EvolutionOptions {
        EvolutionOptions {
            n_max: self.cfg.n_max,
            max_step: self.cfg.max_step,
            phase_budget: self.cfg.phase_budget,
            output_dt: self.cfg.output_dt,
            ..Default::default()
        }
    }

    fn schedule_path(&self, frame: Frame) -> PathBuf {
        let suffix = match frame {
            Frame::Moving => "",
            Frame::Incoming => "_incoming",
        };
        self.out.join(format!("schedule_{}{suffix}.txt", self.cfg.schedule_key()))
    }

    fn load_schedule(&self, frame: Frame) -> Result<EffectiveSchedule> {
        let path = self.schedule_path(frame);
        let file = File::open(&path).map_err(|_| {
            config_error("", format!("missing schedule {}; run the `modes` subcommand first", path.display()))
        })?;
        let (schedule, tag) = read_schedule(BufReader::new(file))?;
        if tag != self.cfg.schedule_key() {
            return Err(config_error("", format!("schedule {} was built for a different chain", path.display())).into());
        }
        Ok(schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Frame {
    Incoming,
    Moving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Pure,
    Density,
}

const SERIES_COLUMNS: [&str; 7] =
    ["t", "qubit_occupation", "relevant_occupation", "detached_occupation", "m_in", "m_out", "r"];

fn write_series(ctx: &RunContext, name: &str, records: &[ObservableRecord]) -> Result<PathBuf> {
    let mut w = ctx.csv(name, &[], &SERIES_COLUMNS)?;
    for r in records {
        w.row(&[
            Field::F(r.t),
            Field::F(r.system_occupation),
            Field::F(r.relevant_occupation),
            Field::F(r.detached_occupation),
            Field::U(r.m_in),
            Field::U(r.m_out),
            Field::U(r.r),
        ])?;
    }
    w.finish()
}

fn staircase_rows(streams: &ModeStreams) -> Vec<(f64, usize, usize, usize)> {
    let steps: Vec<_> = streams.staircase().into_iter().map(|(t, c)| (t, c.m_in, c.m_out, c.r)).collect();
    // right-continuous: the value before the first event is the empty register
    let mut rows = Vec::with_capacity(steps.len() + 1);
    if steps.first().is_none_or(|s| s.0 > 0.0) {
        rows.push((0.0, 0, 0, 0));
    }
    rows.extend(steps);
    rows
}

/// Preparatory stage: trajectory, mode streams, both schedules, staircase and events.
pub fn modes(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let chain = ctx.chain()?;
    let traj = ctx.trajectory(&chain)?;
    let streams = extract_streams(&traj, ctx.cfg.horizon, ctx.cfg.r_cut, ctx.dt_event())?;
    let key = ctx.cfg.schedule_key();
    let mut written = Vec::new();
    for (frame, sched) in [
        (Frame::Moving, EffectiveSchedule::from_streams(&traj, &streams)?),
        (Frame::Incoming, EffectiveSchedule::incoming_frame(&traj, &streams)?),
    ] {
        let path = ctx.schedule_path(frame);
        let file =
            std::io::BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_schedule(file, &sched, &key)?;
        written.push(path);
    }

    let notes = [format!(
        "n_sites={} reference_eigenvalue={:?} r_cut={:?} dt_event={:?}",
        chain.n_sites(),
        streams.reference,
        streams.r_cut,
        streams.dt_event
    )];
    let mut w = ctx.csv("staircase.csv", &notes, &["t", "m_in", "m_out", "r"])?;
    for (t, a, b, r) in staircase_rows(&streams) {
        w.row(&[Field::F(t), Field::U(a), Field::U(b), Field::U(r)])?;
    }
    written.push(w.finish()?);

    let mut w = ctx.csv("trajectory.csv", &[], &["tau", "site", "re_phi", "im_phi"])?;
    for (tau, site, re, im) in traj.rows() {
        w.row(&[Field::F(tau), Field::U(site), Field::F(re), Field::F(im)])?;
    }
    written.push(w.finish()?);

    written.push(write_ladders(ctx, &traj, streams.r_cut * streams.reference)?);

    let mut w = ctx.csv("events.csv", &notes, &["k", "kind", "t", "slot"])?;
    for (k, e) in streams.events.iter().enumerate() {
        let kind = match e.kind {
            EventKind::Coupling => "coupling",
            EventKind::Decoupling => "decoupling",
        };
        w.row(&[Field::U(k), Field::S(kind), Field::F(e.time), Field::U(e.slot)])?;
    }
    written.push(w.finish()?);
    Ok(written)
}

/// Eigenvalues of both significance matrices on the output grid, down to
/// `LADDER_FLOOR` times the threshold.
fn write_ladders(ctx: &RunContext, traj: &WavepacketTrajectory, threshold: f64) -> Result<PathBuf> {
    const LADDER_FLOOR: f64 = 1e-3;
    let horizon = ctx.cfg.horizon;
    let total = rho_plus(traj, horizon)?;
    let notes = [format!("threshold={threshold:?} floor={:?}", LADDER_FLOOR * threshold)];
    let mut w = ctx.csv("ladders.csv", &notes, &["t", "stream", "index", "pi"])?;
    let n = (horizon / ctx.cfg.output_dt + 1e-9).floor() as usize;
    let times = (0..=n)
        .map(|k| (k as f64 * ctx.cfg.output_dt).min(horizon))
        .chain((n as f64 * ctx.cfg.output_dt < horizon).then_some(horizon));
    for t in times {
        let plus = rho_plus(traj, t)?;
        let minus = &total.mat - &plus.mat;
        let ladders = [("plus", plus.eigenvalues()), ("minus", kotelnikov::linalg::hermitian_eigen(&minus).0)];
        for (stream, ladder) in &ladders {
            for (k, &p) in ladder.iter().take_while(|&&p| p >= LADDER_FLOOR * threshold).enumerate() {
                w.row(&[Field::F(t), Field::S(stream), Field::U(k), Field::F(p)])?;
            }
        }
    }
    w.finish()
}

/// Pure evolution in a frame without decouplings.
struct RejectDecoupling;

impl Detacher for RejectDecoupling {
    fn detach(
        &mut self,
        t: f64,
        _: &JointState,
        _: &[(usize, usize)],
        _: &FockRegister,
    ) -> kotelnikov::Result<(JointState, f64)> {
        Err(kotelnikov::Error::InvalidParameter {
            name: "frame",
            reason: format!("pure evolution met a decoupling at t = {t}; use `jump-mc` or `--mode density`"),
        })
    }
}

pub fn evolve(ctx: &RunContext, frame: Frame, mode: Mode) -> Result<Vec<PathBuf>> {
    if frame == Frame::Moving && mode == Mode::Pure {
        return Err(config_error(
            "mode",
            "pure moving-frame evolution needs jump sampling; use `jump-mc` or `--mode density`",
        )
        .into());
    }
    let schedule = ctx.load_schedule(frame)?;
    let opts = ctx.evolution_options();
    let compiled = CompiledSchedule::new(schedule, opts.n_max, opts.basis_limit)?;
    let sys = ctx.system();
    let psi0 = ctx.initial_state(&sys);
    let records = match mode {
        Mode::Pure => evolve_moving_frame(&sys, &compiled, &psi0, &opts, &mut RejectDecoupling)?.records,
        Mode::Density => {
            let rho0 = CMatrix::from_fn(psi0.len(), psi0.len(), |i, j| psi0[i] * psi0[j].conj());
            evolve_density(&sys, &compiled, &rho0, &opts)?.records
        }
    };
    let name = format!(
        "evolve_{}_{}.csv",
        match frame {
            Frame::Incoming => "incoming",
            Frame::Moving => "moving",
        },
        match mode {
            Mode::Pure => "pure",
            Mode::Density => "density",
        }
    );
    Ok(vec![write_series(ctx, &name, &records)?])
}

pub fn jump_mc(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let schedule = ctx.load_schedule(Frame::Moving)?;
    let opts = ctx.evolution_options();
    let compiled = CompiledSchedule::new(schedule, opts.n_max, opts.basis_limit)?;
    let sys = ctx.system();
    let psi0 = ctx.initial_state(&sys);
    let n = ctx.cfg.n_histories;
    let histories = sample_ensemble(ctx.cfg.seed, n, &sys, &compiled, &psi0, &opts, ctx.workers)?;
    let mut written = Vec::new();

    let mut w = ctx.csv("jump_histories.csv", &[], &["history", "k", "t_out", "branch", "prob", "n_detached"])?;
    for h in &histories {
        for (k, rec) in h.records.iter().enumerate() {
            w.row(&[
                Field::U(h.index as usize),
                Field::U(k),
                Field::F(rec.t),
                Field::U(rec.branch),
                Field::F(rec.probability),
                Field::F(rec.outgoing_occupation),
            ])?;
        }
    }
    written.push(w.finish()?);

    let mut entropies = Vec::with_capacity(histories.len());
    let mut w = ctx.csv("jump_entropy.csv", &[], &["history", "s_jump"])?;
    for h in &histories {
        let s = jump_entropy(h.records.iter().map(|r| r.ladder.as_slice()))?;
        entropies.push(s);
        w.row(&[Field::U(h.index as usize), Field::F(s)])?;
    }
    written.push(w.finish()?);

    written.push(write_series(ctx, "jump_history_0.csv", &histories[0].observables)?);

    if n >= 2 {
        let avg = ensemble_average(&histories)?;
        let mean_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
        let notes = [format!("histories={n} observable=qubit_occupation mean_s_jump={mean_entropy:?}")];
        let mut w = ctx.csv("jump_ensemble.csv", &notes, &["t", "mean", "stderr"])?;
        for p in &avg.points {
            w.row(&[Field::F(p.t), Field::F(p.system_occupation.mean), Field::F(p.system_occupation.stderr)])?;
        }
        written.push(w.finish()?);
    }
    Ok(written)
}

pub fn exact(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let chain = ctx.chain()?;
    let sys = ctx.system();
    let psi0 = ctx.initial_state(&sys);
    let opts = ExactOptions {
        n_sites: ctx.cfg.exact_sites,
        n_quanta: ctx.cfg.exact_quanta,
        dt: ctx.cfg.exact_dt,
        output_dt: ctx.cfg.output_dt,
        ..Default::default()
    };
    if opts.n_sites > chain.n_sites() {
        return Err(config_error("exact_sites", format!("the chain has only {} sites", chain.n_sites())).into());
    }
    let run = exact_evolve(&sys, &chain, &psi0, ctx.cfg.horizon, &opts)?;
    let mut w = ctx.csv("exact.csv", &[], &["t", "qubit_occupation", "chain_occupation", "top_shell", "norm"])?;
    for r in &run.records {
        w.row(&[
            Field::F(r.t),
            Field::F(r.system_occupation),
            Field::F(r.chain_occupation),
            Field::F(r.top_shell),
            Field::F(r.norm),
        ])?;
    }
    Ok(vec![w.finish()?])
}

pub fn classical(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let c = &ctx.cfg;
    let kernel = bandlimited_kernel(c.classical_bandwidth, c.classical_horizon, c.classical_grid)?;
    let modes = kotelnikov_mode_count(&kernel, c.classical_r_cut)?;
    let plateau = modes.count_above(0.9);
    let angle = sinc_subspace_overlap(&modes.leading(plateau.max(1)), &kernel).last().copied().unwrap_or(0.0);
    let notes = [format!(
        "two_bt={:?} r_cut={:?} m={} half_power={} plateau={plateau} max_plateau_angle={angle:?}",
        2.0 * c.classical_bandwidth * c.classical_horizon,
        c.classical_r_cut,
        modes.m,
        modes.count_above(0.5),
    )];
    let mut written = Vec::new();
    let top = modes.eigenvalues[0];
    let mut w = ctx.csv("classical_spectrum.csv", &notes, &["k", "eigenvalue", "ratio"])?;
    for (k, &p) in modes.eigenvalues.iter().enumerate().take(modes.m + 10) {
        w.row(&[Field::U(k), Field::F(p), Field::F(p / top)])?;
    }
    written.push(w.finish()?);
    let mut w = ctx.csv("classical_angles.csv", &notes, &["k", "angle"])?;
    for (k, &a) in sinc_subspace_overlap(&modes.leading(modes.m), &kernel).iter().enumerate() {
        w.row(&[Field::U(k), Field::F(a)])?;
    }
    written.push(w.finish()?);
    let mut w = ctx.csv("classical_staircase.csv", &notes, &["t", "m"])?;
    for (t, m) in forward_sampling_staircase(&kernel, c.classical_r_cut, 4)? {
        w.row(&[Field::F(t), Field::U(m)])?;
    }
    written.push(w.finish()?);
    Ok(written)
}

/// Data columns of a CSV written by this tool, keyed by header name.
fn read_columns(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| config_error("", format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut cols: BTreeMap<String, Vec<String>> = headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        for (h, v) in headers.iter().zip(rec.iter()) {
            cols.get_mut(h).expect("header present").push(v.to_string());
        }
    }
    Ok(cols)
}

fn numeric(path: &Path, cols: &BTreeMap<String, Vec<String>>, name: &str) -> Result<Vec<f64>> {
    let col =
        cols.get(name).ok_or_else(|| config_error("column", format!("{} has no column `{name}`", path.display())))?;
    col.iter()
        .map(|s| s.parse::<f64>().map_err(|_| anyhow!("{}: `{s}` in column `{name}` is not a number", path.display())))
        .collect()
}

/// Deviation report between the same column of two series on their shared time grid.
pub struct DiffReport {
    pub points: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub at: f64,
}

pub fn diff(a: &Path, b: &Path, column: &str, column_b: Option<&str>) -> Result<DiffReport> {
    let (ca, cb) = (read_columns(a)?, read_columns(b)?);
    let (ta, tb) = (numeric(a, &ca, "t")?, numeric(b, &cb, "t")?);
    let (ya, yb) = (numeric(a, &ca, column)?, numeric(b, &cb, column_b.unwrap_or(column))?);
    let key = |t: f64| (t * 1e9).round() as i64;
    let lookup: BTreeMap<i64, f64> = tb.iter().zip(&yb).map(|(&t, &y)| (key(t), y)).collect();
    let mut report = DiffReport { points: 0, max_abs: 0.0, mean_abs: 0.0, at: f64::NAN };
    for (&t, &y) in ta.iter().zip(&ya) {
        if let Some(&z) = lookup.get(&key(t)) {
            report.points += 1;
            let d = (y - z).abs();
            report.mean_abs += d;
            if d > report.max_abs || report.at.is_nan() {
                report.max_abs = d;
                report.at = t;
            }
        }
    }
    if report.points == 0 {
        return Err(config_error("", format!("{} and {} share no output times", a.display(), b.display())).into());
    }
    report.mean_abs /= report.points as f64;
    Ok(report)
}
