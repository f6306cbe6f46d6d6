//! Incoming and outgoing mode streams and the piecewise effective Hamiltonian.
//!
//! The backward sweep removes modes from the frame of the `m_in(T)` significant
//! eigenmodes of `γ(T)` as their past significance drops below `θ = r_cut·π₁`. The
//! forward sweep grows a relevant frame with those modes and removes linear
//! combinations whose future significance `γ(T) − γ(t)` drops below `θ`.
//!
//! Between events the relevant frame rotates as `e_l(t) = Σ_k U(s)_lk e_k(t*)` with
//! `U(s) = exp(−i s D)`, `s = t − t*`, and `χ_l(t) = ⟨φ(t)|e_l(t)⟩`. The register
//! Hamiltonian of that rotation is `−Σ_kl D_lk b_k† b_l`.

use crate::chain_env::WavepacketTrajectory;
use crate::linalg::{expm_hermitian, hermitian_eigen, phase_fix, unitary_log_folded};
use crate::significance::{occupation_gram, significant_modes, CumulativeGram, SignificanceMatrix};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Intervals shorter than this are treated as instantaneous frame rotations.
pub const MIN_ROTATION_SPAN: f64 = 1e-9;
/// Number of bisection halvings applied to each event bracket (`dt_event / 16`).
pub const BISECTION_STEPS: u32 = 4;

/// Default sweep step `τ_B / 20` with `τ_B = 1/(4h)`; `T/1000` for a decoupled chain.
pub fn default_dt_event(max_hopping: f64, horizon: f64) -> f64 {
    if max_hopping > 0.0 {
        (1.0 / (4.0 * max_hopping) / 20.0).min(horizon / 10.0)
    } else {
        horizon / 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Coupling,
    Decoupling,
}

/// A coupling or decoupling event.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeEvent {
    pub kind: EventKind,
    pub time: f64,
    /// Unit-norm mode vector in the site basis.
    pub mode: CVector,
    /// Frame rotation of a decoupling; rows are the new frame vectors in the old frame.
    pub rotation: Option<CMatrix>,
    /// Relevant slot that is appended (coupling) or detached (decoupling).
    pub slot: usize,
}

/// Relevant frame valid on `[start, end]`, given at `start` in the site basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSegment {
    pub start: f64,
    pub end: f64,
    pub frame: CMatrix,
}

/// Result of the backward sweep.
#[derive(Debug, Clone)]
pub struct IncomingStream {
    /// Coupling events sorted by time (ties by ascending eigenvalue at the event).
    pub events: Vec<ModeEvent>,
    pub horizon: f64,
    pub r_cut: f64,
    pub dt_event: f64,
    /// Reference eigenvalue `π₁` of `γ(T)`.
    pub reference: f64,
    frame: CMatrix,
    coords: Vec<CVector>,
}

impl IncomingStream {
    pub fn threshold(&self) -> f64 {
        self.r_cut * self.reference
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Merged, time-ordered mode streams.
#[derive(Debug, Clone)]
pub struct ModeStreams {
    pub events: Vec<ModeEvent>,
    pub segments: Vec<FrameSegment>,
    pub horizon: f64,
    pub r_cut: f64,
    pub dt_event: f64,
    pub reference: f64,
}

/// Counts `(m_in, m_out, r)` at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamCounts {
    pub m_in: usize,
    pub m_out: usize,
    pub r: usize,
}

impl ModeStreams {
    /// Counts including all events at times `≤ t`.
    pub fn counts(&self, t: f64) -> StreamCounts {
        let m_in = self.events.iter().filter(|e| e.kind == EventKind::Coupling && e.time <= t).count();
        let m_out = self.events.iter().filter(|e| e.kind == EventKind::Decoupling && e.time <= t).count();
        StreamCounts { m_in, m_out, r: m_in - m_out }
    }

    /// Event times of one kind in order.
    pub fn times(&self, kind: EventKind) -> Vec<f64> {
        self.events.iter().filter(|e| e.kind == kind).map(|e| e.time).collect()
    }

    /// Staircase values right after each event: `(t, m_in, m_out, r)`.
    pub fn staircase(&self) -> Vec<(f64, StreamCounts)> {
        let mut m_in = 0;
        let mut m_out = 0;
        self.events
            .iter()
            .map(|e| {
                match e.kind {
                    EventKind::Coupling => m_in += 1,
                    EventKind::Decoupling => m_out += 1,
                }
                (e.time, StreamCounts { m_in, m_out, r: m_in - m_out })
            })
            .collect()
    }

    /// Orthonormal relevant frame (site basis) of the last segment starting at or before `t`.
    pub fn relevant_frame(&self, t: f64) -> &CMatrix {
        let idx = self.segments.iter().rposition(|s| s.start <= t).unwrap_or(0);
        &self.segments[idx].frame
    }

    /// The same streams with all decouplings removed.
    pub fn incoming_only(&self) -> ModeStreams {
        let events: Vec<ModeEvent> = self.events.iter().filter(|e| e.kind == EventKind::Coupling).cloned().collect();
        let n = self.segments.first().map_or(0, |s| s.frame.nrows());
        let mut segments = Vec::new();
        let mut frame = CMatrix::zeros(n, 0);
        let mut start = 0.0;
        for e in &events {
            segments.push(FrameSegment { start, end: e.time, frame: frame.clone() });
            frame = append_column(&frame, &e.mode);
            start = e.time;
        }
        segments.push(FrameSegment { start, end: self.horizon, frame });
        ModeStreams { events, segments, ..self.clone() }
    }
}

fn append_column(m: &CMatrix, v: &CVector) -> CMatrix {
    let mut out = m.clone().insert_column(m.ncols(), C64::new(0.0, 0.0));
    out.set_column(m.ncols(), v);
    out
}

fn project(v: &CMatrix, g: &CMatrix) -> CMatrix {
    v.adjoint() * g * v
}

fn min_eigenvalue(m: &CMatrix) -> f64 {
    hermitian_eigen(m).0.last().copied().unwrap_or(f64::INFINITY)
}

/// Bisects `[lo, hi]` where `below(lo) != below(hi)` down to `tol`.
fn bisect<F: FnMut(f64) -> Result<bool>>(mut lo: f64, mut hi: f64, tol: f64, mut below: F) -> Result<(f64, f64)> {
    let lo_below = below(lo)?;
    if lo_below == below(hi)? {
        return Err(Error::Bracketing(format!("no threshold crossing in [{lo}, {hi}]")));
    }
    let mut guard = 0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if below(mid)? == lo_below {
            lo = mid;
        } else {
            hi = mid;
        }
        guard += 1;
        if guard > 200 {
            return Err(Error::Bracketing("bisection did not converge".into()));
        }
    }
    Ok((lo, hi))
}

fn validate(traj: &WavepacketTrajectory, horizon: f64, r_cut: f64, dt_event: f64) -> Result<()> {
    if !(r_cut > 0.0 && r_cut < 1.0) {
        return Err(Error::invalid("r_cut", "must lie in (0, 1)"));
    }
    if !dt_event.is_finite() || dt_event <= 0.0 {
        return Err(Error::invalid("dt_event", "must be finite and positive"));
    }
    if !horizon.is_finite() || horizon <= 0.0 || horizon > traj.horizon() * (1.0 + 1e-12) {
        return Err(Error::invalid("horizon", "must lie in (0, trajectory horizon]"));
    }
    Ok(())
}

/// Backward sweep `t = T → 0` extracting the incoming modes.
pub fn extract_incoming(
    traj: &WavepacketTrajectory,
    horizon: f64,
    r_cut: f64,
    dt_event: f64,
) -> Result<IncomingStream> {
    validate(traj, horizon, r_cut, dt_event)?;
    let n = traj.n_sites();
    let gamma = occupation_gram(traj, horizon)?;
    let metric = SignificanceMatrix { t: horizon, basis: CMatrix::identity(n, n), mat: gamma };
    let top = significant_modes(&metric, r_cut)?;
    let reference = top.weights.first().copied().unwrap_or(0.0);
    let frame = top.modes;
    let m = frame.ncols();
    let empty = IncomingStream {
        events: Vec::new(),
        horizon,
        r_cut,
        dt_event,
        reference,
        frame: frame.clone(),
        coords: Vec::new(),
    };
    if m == 0 {
        return Ok(empty);
    }
    let theta = r_cut * reference;
    let cum = CumulativeGram::new(traj, &frame);
    let tol = dt_event / f64::from(1u32 << BISECTION_STEPS);
    let mut v = CMatrix::identity(m, m);
    let mut found: Vec<(f64, CVector)> = Vec::new();
    let n_grid = (horizon / dt_event).ceil() as usize;
    let mut t_ok = horizon;
    for j in 1..=n_grid {
        let t_j = (horizon - dt_event * j as f64).max(0.0);
        loop {
            if v.ncols() == 0 {
                break;
            }
            if min_eigenvalue(&project(&v, &cum.at(t_j)?)) >= theta {
                break;
            }
            let frame_v = v.clone();
            let (lo, _) = bisect(t_j, t_ok, tol, |t| Ok(min_eigenvalue(&project(&frame_v, &cum.at(t)?)) < theta))?;
            let g = cum.at(lo)?;
            while v.ncols() > 0 {
                let (vals, vecs) = hermitian_eigen(&project(&v, &g));
                let last = vals.len() - 1;
                if vals[last] >= theta {
                    break;
                }
                let mut w: Vec<C64> = (&v * vecs.column(last)).iter().copied().collect();
                phase_fix(&mut w);
                found.push((lo, CVector::from_vec(w)));
                v = &v * vecs.columns(0, last);
            }
            t_ok = lo;
        }
        t_ok = t_ok.min(t_j);
        if v.ncols() == 0 {
            break;
        }
    }
    if v.ncols() > 0 {
        return Err(Error::Bracketing(format!("{} modes still significant at t = 0", v.ncols())));
    }
    // Discovery order is descending in time and ascending in eigenvalue at equal times.
    let mut order: Vec<usize> = (0..found.len()).collect();
    order.sort_by(|&a, &b| found[a].0.total_cmp(&found[b].0).then(a.cmp(&b)));
    let mut events = Vec::with_capacity(found.len());
    let mut coords = Vec::with_capacity(found.len());
    for (slot_hint, &i) in order.iter().enumerate() {
        let (t, ref c) = found[i];
        events.push(ModeEvent {
            kind: EventKind::Coupling,
            time: t,
            mode: &frame * c,
            rotation: None,
            slot: slot_hint,
        });
        coords.push(c.clone());
    }
    Ok(IncomingStream { events, coords, ..empty })
}

/// Rotation whose row 0 is the outgoing eigenvector (smallest eigenvalue, last column
/// of `vecs`) and whose remaining rows are the other eigenvectors, greedily matched to
/// old slots by overlap modulus and ordered by the matched slot.
fn decoupling_rotation(vecs: &CMatrix) -> CMatrix {
    let r = vecs.ncols();
    let mut out_vec: Vec<C64> = vecs.column(r - 1).iter().copied().collect();
    phase_fix(&mut out_vec);
    let mut used_old = vec![false; r];
    let mut used_new = vec![false; r - 1];
    let mut matched: Vec<(usize, usize)> = Vec::with_capacity(r - 1);
    for _ in 0..r - 1 {
        let mut best = (0, 0, -1.0);
        for l in 0..r - 1 {
            if used_new[l] {
                continue;
            }
            for k in 0..r {
                if used_old[k] {
                    continue;
                }
                let a = vecs[(k, l)].norm();
                if a > best.2 {
                    best = (l, k, a);
                }
            }
        }
        used_new[best.0] = true;
        used_old[best.1] = true;
        matched.push((best.1, best.0));
    }
    matched.sort();
    let mut u = CMatrix::zeros(r, r);
    for (k, z) in out_vec.iter().enumerate() {
        u[(0, k)] = *z;
    }
    for (row, &(old, l)) in matched.iter().enumerate() {
        let pivot = vecs[(old, l)];
        let phase = if pivot.norm() > 0.0 { pivot.conj() / pivot.norm() } else { C64::new(1.0, 0.0) };
        for k in 0..r {
            u[(row + 1, k)] = vecs[(k, l)] * phase;
        }
    }
    u
}

/// Forward sweep `t = 0 → T` extracting the outgoing modes and merging both streams.
///
/// The sweep stops one `dt_event` before `T`; modes still coupled then stay relevant.
pub fn extract_outgoing(
    traj: &WavepacketTrajectory,
    incoming: &IncomingStream,
    horizon: f64,
    r_cut: f64,
    dt_event: f64,
) -> Result<ModeStreams> {
    validate(traj, horizon, r_cut, dt_event)?;
    let n = traj.n_sites();
    let mut streams = ModeStreams {
        events: Vec::new(),
        segments: Vec::new(),
        horizon,
        r_cut,
        dt_event,
        reference: incoming.reference,
    };
    let k_frame = &incoming.frame;
    let m = k_frame.ncols();
    if m == 0 {
        streams.segments.push(FrameSegment { start: 0.0, end: horizon, frame: CMatrix::zeros(n, 0) });
        return Ok(streams);
    }
    let theta = incoming.threshold();
    let cum = CumulativeGram::new(traj, k_frame);
    let total = cum.total();
    let future = |t: f64| -> Result<CMatrix> { Ok(&total - cum.at(t)?) };
    let tol = dt_event / f64::from(1u32 << BISECTION_STEPS);

    let mut rel = CMatrix::zeros(m, 0);
    let mut seg_start = 0.0;
    let push_event = |streams: &mut ModeStreams, rel: &CMatrix, event: ModeEvent, seg_start: &mut f64| {
        streams.segments.push(FrameSegment { start: *seg_start, end: event.time, frame: k_frame * rel });
        *seg_start = event.time;
        streams.events.push(event);
    };

    let mut next_in = 0;
    let mut t_ok = 0.0f64;
    let last_sweep = horizon - dt_event;
    let n_grid = if last_sweep > 0.0 { (last_sweep / dt_event + 1e-9).floor() as usize } else { 0 };
    for j in 1..=n_grid {
        let t_j = dt_event * j as f64;
        let mut t_floor = t_ok;
        while next_in < incoming.events.len() && incoming.events[next_in].time <= t_j {
            let ev = &incoming.events[next_in];
            let slot = rel.ncols();
            let coupled = ModeEvent { slot, ..ev.clone() };
            push_event(&mut streams, &rel, coupled, &mut seg_start);
            rel = append_column(&rel, &incoming.coords[next_in]);
            t_floor = t_floor.max(ev.time);
            next_in += 1;
        }
        loop {
            if rel.ncols() == 0 || min_eigenvalue(&project(&rel, &future(t_j)?)) >= theta {
                break;
            }
            let t_event = if min_eigenvalue(&project(&rel, &future(t_floor)?)) < theta {
                t_floor
            } else {
                let frame_r = rel.clone();
                bisect(t_floor, t_j, tol, |t| Ok(min_eigenvalue(&project(&frame_r, &future(t)?)) < theta))?.1
            };
            let g = future(t_event)?;
            while rel.ncols() > 0 {
                let (vals, vecs) = hermitian_eigen(&project(&rel, &g));
                if vals[vals.len() - 1] >= theta {
                    break;
                }
                let u = decoupling_rotation(&vecs);
                let out_coords: CVector = &rel * u.row(0).transpose();
                let event = ModeEvent {
                    kind: EventKind::Decoupling,
                    time: t_event,
                    mode: k_frame * out_coords,
                    rotation: Some(u.clone()),
                    slot: 0,
                };
                push_event(&mut streams, &rel, event, &mut seg_start);
                let rotated = &rel * u.transpose();
                rel = rotated.columns(1, rotated.ncols() - 1).into_owned();
            }
            t_floor = t_event;
        }
        t_ok = t_j;
    }
    while next_in < incoming.events.len() {
        let ev = &incoming.events[next_in];
        let slot = rel.ncols();
        push_event(&mut streams, &rel, ModeEvent { slot, ..ev.clone() }, &mut seg_start);
        rel = append_column(&rel, &incoming.coords[next_in]);
        next_in += 1;
    }
    streams.segments.push(FrameSegment { start: seg_start, end: horizon, frame: k_frame * &rel });
    Ok(streams)
}

/// Runs both sweeps on `[0, horizon]`.
pub fn extract_streams(traj: &WavepacketTrajectory, horizon: f64, r_cut: f64, dt_event: f64) -> Result<ModeStreams> {
    let incoming = extract_incoming(traj, horizon, r_cut, dt_event)?;
    extract_outgoing(traj, &incoming, horizon, r_cut, dt_event)
}

/// What happens at the end of a schedule interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalEnd {
    /// A vacuum slot is appended to the register.
    Coupling,
    /// The frame has rotated by `U_k`; slot 0 detaches.
    Decoupling,
    /// End of the horizon.
    Horizon,
}

impl IntervalEnd {
    pub fn label(self) -> &'static str {
        match self {
            IntervalEnd::Coupling => "coupling",
            IntervalEnd::Decoupling => "decoupling",
            IntervalEnd::Horizon => "horizon",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "coupling" => Some(IntervalEnd::Coupling),
            "decoupling" => Some(IntervalEnd::Decoupling),
            "horizon" => Some(IntervalEnd::Horizon),
            _ => None,
        }
    }
}

/// Sampled coupling amplitudes `χ_l(t)` of one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiSamples {
    /// Strictly increasing sample times (a single sample for instantaneous intervals).
    pub times: Vec<f64>,
    /// `values[(i, l)] = χ_l(times[i])`.
    pub values: CMatrix,
    /// Carrier removed before interpolation.
    pub carrier: f64,
}

impl ChiSamples {
    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Writes `χ_l(t)` into `out` by linear interpolation of the envelope `χ e^{iω_c t}`.
    pub fn eval_into(&self, t: f64, out: &mut [C64]) {
        let r = self.channels();
        debug_assert_eq!(out.len(), r);
        if r == 0 {
            return;
        }
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            out.copy_from_slice(&self.values.row(0).iter().copied().collect::<Vec<_>>());
            return;
        }
        if t >= self.times[n - 1] {
            for (l, o) in out.iter_mut().enumerate() {
                *o = self.values[(n - 1, l)];
            }
            return;
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        let d0 = C64::from_polar(1.0, self.carrier * t0);
        let d1 = C64::from_polar(1.0, self.carrier * t1);
        let remod = C64::from_polar(1.0, -self.carrier * t);
        for (l, o) in out.iter_mut().enumerate() {
            let env = self.values[(i, l)] * d0 * (1.0 - w) + self.values[(i + 1, l)] * d1 * w;
            *o = env * remod;
        }
    }

    /// Largest `|χ_l|` over samples and channels.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// One piece of the effective Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleInterval {
    pub start: f64,
    pub end: f64,
    pub terminal: IntervalEnd,
    /// Relevant frame at `start` (site basis columns).
    pub frame: CMatrix,
    /// `G = i ln U_k` for decoupling intervals, zero otherwise; `D = G / (end − start)`.
    pub generator: CMatrix,
    pub chi: ChiSamples,
}

impl ScheduleInterval {
    /// Number of relevant slots during the interval.
    pub fn rank(&self) -> usize {
        self.frame.ncols()
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    /// True for decoupling intervals too short to carry a continuous rotation.
    pub fn is_instantaneous(&self) -> bool {
        self.terminal == IntervalEnd::Decoupling && self.len() < MIN_ROTATION_SPAN
    }

    /// Frame-rotation generator `D` (zero on coupling and horizon intervals).
    pub fn d_matrix(&self) -> CMatrix {
        if self.terminal != IntervalEnd::Decoupling || self.is_instantaneous() {
            return CMatrix::zeros(self.rank(), self.rank());
        }
        &self.generator * C64::new(1.0 / self.len(), 0.0)
    }

    /// The rotation `exp(−i G)` enacted over the interval.
    pub fn rotation(&self) -> CMatrix {
        expm_hermitian(&self.generator, 1.0)
    }
}

/// Piecewise model constants `χ_l(t)` and `D(t)` covering `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveSchedule {
    pub horizon: f64,
    pub carrier: f64,
    pub intervals: Vec<ScheduleInterval>,
    pub coupling_times: Vec<f64>,
    pub decoupling_times: Vec<f64>,
}

impl EffectiveSchedule {
    /// Moving-frame schedule with one interval per event.
    pub fn from_streams(traj: &WavepacketTrajectory, streams: &ModeStreams) -> Result<Self> {
        let generators = frame_generators(streams)?;
        let chi = coupling_amplitudes(traj, streams)?;
        let intervals = streams
            .segments
            .iter()
            .zip(generators)
            .zip(chi)
            .enumerate()
            .map(|(k, ((seg, generator), chi))| ScheduleInterval {
                start: seg.start,
                end: seg.end,
                terminal: streams.events.get(k).map_or(IntervalEnd::Horizon, |e| match e.kind {
                    EventKind::Coupling => IntervalEnd::Coupling,
                    EventKind::Decoupling => IntervalEnd::Decoupling,
                }),
                frame: seg.frame.clone(),
                generator,
                chi,
            })
            .collect();
        Ok(Self {
            horizon: streams.horizon,
            carrier: traj.carrier(),
            intervals,
            coupling_times: streams.times(EventKind::Coupling),
            decoupling_times: streams.times(EventKind::Decoupling),
        })
    }

    /// Incoming-only frame: every incoming mode is present from `t = 0`, no rotations.
    pub fn incoming_frame(traj: &WavepacketTrajectory, streams: &ModeStreams) -> Result<Self> {
        let modes: Vec<&CVector> =
            streams.events.iter().filter(|e| e.kind == EventKind::Coupling).map(|e| &e.mode).collect();
        let n = traj.n_sites();
        let frame = CMatrix::from_fn(n, modes.len(), |j, l| modes[l][j]);
        let seg = FrameSegment { start: 0.0, end: streams.horizon, frame: frame.clone() };
        let chi = sample_chi(traj, &seg, None)?;
        Ok(Self {
            horizon: streams.horizon,
            carrier: traj.carrier(),
            intervals: vec![ScheduleInterval {
                start: 0.0,
                end: streams.horizon,
                terminal: IntervalEnd::Horizon,
                generator: CMatrix::zeros(modes.len(), modes.len()),
                frame,
                chi,
            }],
            coupling_times: streams.times(EventKind::Coupling),
            decoupling_times: Vec::new(),
        })
    }

    /// `(m_in, m_out)` including events at times `≤ t`.
    pub fn counts(&self, t: f64) -> (usize, usize) {
        (
            self.coupling_times.iter().filter(|&&s| s <= t).count(),
            self.decoupling_times.iter().filter(|&&s| s <= t).count(),
        )
    }

    /// Register rank at `t = 0`.
    pub fn initial_rank(&self) -> usize {
        self.intervals.first().map_or(0, ScheduleInterval::rank)
    }
}

/// Frame-rotation generators `G_k = i ln U_k`, one per segment (zero where no rotation).
pub fn frame_generators(streams: &ModeStreams) -> Result<Vec<CMatrix>> {
    streams
        .segments
        .iter()
        .enumerate()
        .map(|(k, seg)| {
            let r = seg.frame.ncols();
            match streams.events.get(k) {
                Some(ModeEvent { kind: EventKind::Decoupling, rotation: Some(u), time, .. }) => {
                    let (g, cut) = unitary_log_folded(u);
                    if let Some(phase) = cut {
                        log::warn!("rotation at t = {time} has eigenphase {phase} on the branch cut; using +π");
                    }
                    Ok(g)
                }
                _ => Ok(CMatrix::zeros(r, r)),
            }
        })
        .collect()
}

/// Samples `χ_l(t) = (U(s) c(t))_l` with `c_k(t) = ⟨φ(t)|e_k(t*)⟩`.
fn sample_chi(traj: &WavepacketTrajectory, seg: &FrameSegment, d: Option<&CMatrix>) -> Result<ChiSamples> {
    let r = seg.frame.ncols();
    let mut times = vec![seg.start];
    let dt = traj.dt();
    if seg.end > seg.start {
        let first = (seg.start / dt).floor() as usize + 1;
        let mut m = first;
        while m <= traj.n_steps() && traj.time(m) < seg.end - 1e-12 * seg.end.max(1.0) {
            if traj.time(m) > seg.start {
                times.push(traj.time(m));
            }
            m += 1;
        }
        times.push(seg.end);
    }
    let frame_conj = seg.frame.map(|z| z.conj());
    let rot = d.map(hermitian_eigen);
    let mut values = CMatrix::zeros(times.len(), r);
    for (i, &t) in times.iter().enumerate() {
        let on_grid = (t / dt).round();
        let phi = if (t - on_grid * dt).abs() < 1e-12 * t.max(1.0) && (on_grid as usize) <= traj.n_steps() {
            traj.phi().column(on_grid as usize).into_owned()
        } else {
            traj.phi_at(t)?
        };
        // c_k = Σ_j conj(φ_j) e_kj
        let c: CVector = (frame_conj.transpose() * phi).map(|z| z.conj());
        let chi = match &rot {
            Some((vals, vecs)) => {
                let s = t - seg.start;
                let phases = CVector::from_iterator(vals.len(), vals.iter().map(|&l| C64::from_polar(1.0, -s * l)));
                vecs * (vecs.adjoint() * c).component_mul(&phases)
            }
            None => c,
        };
        for l in 0..r {
            values[(i, l)] = chi[l];
        }
    }
    Ok(ChiSamples { times, values, carrier: traj.carrier() })
}

/// Coupling amplitudes of every segment in the rotating relevant frame.
pub fn coupling_amplitudes(traj: &WavepacketTrajectory, streams: &ModeStreams) -> Result<Vec<ChiSamples>> {
    let generators = frame_generators(streams)?;
    streams
        .segments
        .iter()
        .zip(&generators)
        .map(|(seg, g)| {
            let len = seg.end - seg.start;
            if len >= MIN_ROTATION_SPAN && g.iter().any(|z| z.norm() > 0.0) {
                let d = g * C64::new(1.0 / len, 0.0);
                sample_chi(traj, seg, Some(&d))
            } else {
                sample_chi(traj, seg, None)
            }
        })
        .collect()
}
