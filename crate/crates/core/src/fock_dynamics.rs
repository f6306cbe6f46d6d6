//! Joint evolution of the open system and the relevant-mode register under
//! `Ĥ_eff(t) = Ĥ_s(t) + Σ_l (V† χ_l b_l + V χ_l* b_l†) − Σ_kl D_lk b_k† b_l`.
//!
//! Amplitudes are stored system-major: index `s · F + i` for system state `s` and
//! register state `i` of a register with `F` states. Densities are column-major
//! `N × N` matrices over the same joint index.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::chain_env::WavepacketTrajectory;
use crate::fock::FockRegister;
use crate::linalg::{frobenius, hermiticity_defect};
use crate::mode_streams::{ChiSamples, EffectiveSchedule, IntervalEnd, ModeStreams};
use crate::ode::Rk4;
use crate::{CMatrix, Error, Result, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const MINUS_I: C64 = C64 { re: 0.0, im: -1.0 };

/// Classical drive `f(t)` multiplying the drive operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drive {
    None,
    Cosine { amplitude: f64, frequency: f64 },
}

impl Drive {
    pub fn value(self, t: f64) -> f64 {
        match self {
            Drive::None => 0.0,
            Drive::Cosine { amplitude, frequency } => amplitude * (frequency * t).cos(),
        }
    }

    pub fn amplitude(self) -> f64 {
        match self {
            Drive::None => 0.0,
            Drive::Cosine { amplitude, .. } => amplitude.abs(),
        }
    }
}

/// Open system: `Ĥ_s(t) = H₀ + f(t) X`, coupling operator `V`, and an excitation-number
/// observable given by its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    h0: CMatrix,
    drive_op: CMatrix,
    drive: Drive,
    coupling: CMatrix,
    excitation: Vec<f64>,
}

impl SystemSpec {
    pub fn new(h0: CMatrix, drive_op: CMatrix, drive: Drive, coupling: CMatrix, excitation: Vec<f64>) -> Result<Self> {
        let dim = h0.nrows();
        if dim == 0 || h0.ncols() != dim {
            return Err(Error::invalid("h0", "must be a nonempty square matrix"));
        }
        for (name, m) in [("drive_op", &drive_op), ("coupling", &coupling)] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::invalid(name, format!("must be {dim}×{dim}")));
            }
        }
        if excitation.len() != dim {
            return Err(Error::invalid("excitation", format!("needs {dim} entries")));
        }
        if hermiticity_defect(&h0) > 1e-12 || hermiticity_defect(&drive_op) > 1e-12 {
            return Err(Error::invalid("h0", "system Hamiltonian must be Hermitian"));
        }
        Ok(Self { h0, drive_op, drive, coupling, excitation })
    }

    /// Driven qubit `ε_s σ₊σ₋ + f(t) σ_x` with `V = g σ₋`; basis 0 = ground, 1 = excited.
    pub fn driven_qubit(epsilon_s: f64, coupling: f64, drive: Drive) -> Self {
        let c = |x: f64| C64::new(x, 0.0);
        let h0 = CMatrix::from_row_slice(2, 2, &[c(0.0), c(0.0), c(0.0), c(epsilon_s)]);
        let sx = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]);
        let v = CMatrix::from_row_slice(2, 2, &[c(0.0), c(coupling), c(0.0), c(0.0)]);
        Self { h0, drive_op: sx, drive, coupling: v, excitation: vec![0.0, 1.0] }
    }

    pub fn dim(&self) -> usize {
        self.h0.nrows()
    }

    pub fn drive(&self) -> Drive {
        self.drive
    }

    pub fn h0(&self) -> &CMatrix {
        &self.h0
    }

    pub fn drive_operator(&self) -> &CMatrix {
        &self.drive_op
    }

    /// Coupling operator `V`.
    pub fn coupling(&self) -> &CMatrix {
        &self.coupling
    }

    /// Diagonal of the excitation-number observable.
    pub fn excitation(&self) -> &[f64] {
        &self.excitation
    }

    pub fn hamiltonian(&self, t: f64) -> CMatrix {
        let f = self.drive.value(t);
        if f == 0.0 {
            self.h0.clone()
        } else {
            &self.h0 + &self.drive_op * C64::new(f, 0.0)
        }
    }

    /// Unit vector on system basis state `k`.
    pub fn basis_state(&self, k: usize) -> Vec<C64> {
        let mut v = vec![ZERO; self.dim()];
        v[k] = C64::new(1.0, 0.0);
        v
    }

    fn hamiltonian_bound(&self) -> f64 {
        frobenius(&self.h0) + self.drive.amplitude() * frobenius(&self.drive_op)
    }
}

/// Normalized joint amplitudes over system ⊗ register.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub t: f64,
    pub sys_dim: usize,
    pub n_modes: usize,
    pub n_max: usize,
    pub amplitudes: Vec<C64>,
}

impl JointState {
    /// `ψ_sys ⊗ |vac⟩` on an `n_modes`-slot register.
    pub fn product_vacuum(psi_sys: &[C64], register: &FockRegister, t: f64) -> Self {
        let f = register.len();
        let mut amplitudes = vec![ZERO; psi_sys.len() * f];
        let vac = register.index_of(&vec![0u8; register.n_modes()]).expect("vacuum present");
        for (s, &a) in psi_sys.iter().enumerate() {
            amplitudes[s * f + vac] = a;
        }
        Self { t, sys_dim: psi_sys.len(), n_modes: register.n_modes(), n_max: register.n_max(), amplitudes }
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `|ψ⟩⟨ψ|` as a relevant density.
    pub fn to_density(&self) -> RelevantDensity {
        let n = self.amplitudes.len();
        let rho = CMatrix::from_fn(n, n, |i, j| self.amplitudes[i] * self.amplitudes[j].conj());
        RelevantDensity { t: self.t, sys_dim: self.sys_dim, n_modes: self.n_modes, n_max: self.n_max, rho }
    }

    /// Writes the layout header followed by one `re im` line per amplitude.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "joint_state v1 t={:?} sys_dim={} n_modes={} n_max={} len={}",
            self.t,
            self.sys_dim,
            self.n_modes,
            self.n_max,
            self.amplitudes.len()
        )?;
        for z in &self.amplitudes {
            writeln!(w, "{:?} {:?}", z.re, z.im)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let bad = |line: usize, reason: &str| Error::ScheduleFormat { line, reason: reason.into() };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))??;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("joint_state") || fields.next() != Some("v1") {
            return Err(bad(1, "not a joint_state v1 checkpoint"));
        }
        let mut kv = BTreeMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(1, "malformed header field"))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(1, "missing header field"));
        let t: f64 = get("t")?.parse().map_err(|_| bad(1, "bad t"))?;
        let parse_usize = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(1, "bad integer")) };
        let (sys_dim, n_modes, n_max, len) =
            (parse_usize("sys_dim")?, parse_usize("n_modes")?, parse_usize("n_max")?, parse_usize("len")?);
        let mut amplitudes = Vec::with_capacity(len);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            let (Some(re), Some(im)) = (it.next(), it.next()) else {
                return Err(bad(i + 2, "expected two numbers"));
            };
            let re: f64 = re.parse().map_err(|_| bad(i + 2, "bad number"))?;
            let im: f64 = im.parse().map_err(|_| bad(i + 2, "bad number"))?;
            amplitudes.push(C64::new(re, im));
        }
        if amplitudes.len() != len {
            return Err(Error::LayoutMismatch { expected: len, found: amplitudes.len() });
        }
        Ok(Self { t, sys_dim, n_modes, n_max, amplitudes })
    }
}

/// Density matrix over system ⊗ register.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevantDensity {
    pub t: f64,
    pub sys_dim: usize,
    pub n_modes: usize,
    pub n_max: usize,
    pub rho: CMatrix,
}

impl RelevantDensity {
    pub fn trace(&self) -> f64 {
        self.rho.diagonal().iter().map(|z| z.re).sum()
    }
}

/// Observable snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservableRecord {
    pub t: f64,
    pub system_occupation: f64,
    pub relevant_occupation: f64,
    pub detached_occupation: f64,
    pub m_in: usize,
    pub m_out: usize,
    pub r: usize,
}

/// Instantaneous observables `(system occupation, relevant occupation, top-shell weight)`.
fn observables_from_diagonal(diag: impl Iterator<Item = f64>, sys: &SystemSpec, reg: &FockRegister) -> (f64, f64, f64) {
    let f = reg.len();
    let mut sys_occ = 0.0;
    let mut rel = 0.0;
    let mut top = 0.0;
    let n_max = reg.n_max() as u32;
    for (idx, p) in diag.enumerate() {
        let (s, i) = (idx / f, idx % f);
        sys_occ += sys.excitation[s] * p;
        let n = reg.total(i);
        rel += f64::from(n) * p;
        if n == n_max && n_max > 0 && reg.n_modes() > 0 {
            top += p;
        }
    }
    (sys_occ, rel, top)
}

/// `(system occupation, relevant occupation)` of a pure state.
pub fn observables(state: &JointState, sys: &SystemSpec, register: &FockRegister) -> Result<(f64, f64)> {
    check_layout(state.amplitudes.len(), sys.dim() * register.len())?;
    let (a, b, _) = observables_from_diagonal(state.amplitudes.iter().map(|z| z.norm_sqr()), sys, register);
    Ok((a, b))
}

/// `(system occupation, relevant occupation)` of a density.
pub fn density_observables(rho: &RelevantDensity, sys: &SystemSpec, register: &FockRegister) -> Result<(f64, f64)> {
    check_layout(rho.rho.nrows(), sys.dim() * register.len())?;
    let (a, b, _) = observables_from_diagonal(rho.rho.diagonal().iter().map(|z| z.re), sys, register);
    Ok((a, b))
}

fn check_layout(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::LayoutMismatch { expected, found });
    }
    Ok(())
}

/// Sparse action of `Ĥ_eff` on one interval.
struct HeffOperator<'a> {
    sys: &'a SystemSpec,
    reg: &'a FockRegister,
    chi_src: Option<&'a ChiSamples>,
    d: CMatrix,
    has_d: bool,
    include_system: bool,
    chi: Vec<C64>,
    hs: CMatrix,
    y: Vec<C64>,
    g: Vec<C64>,
}

impl<'a> HeffOperator<'a> {
    fn new(
        sys: &'a SystemSpec,
        reg: &'a FockRegister,
        chi_src: Option<&'a ChiSamples>,
        d: CMatrix,
        include_system: bool,
    ) -> Self {
        let r = reg.n_modes();
        let f = reg.len();
        let has_d = d.iter().any(|z| z.norm() > 0.0);
        Self {
            sys,
            reg,
            chi_src,
            d,
            has_d,
            include_system,
            chi: vec![ZERO; r],
            hs: CMatrix::zeros(sys.dim(), sys.dim()),
            y: vec![ZERO; r * sys.dim() * f],
            g: vec![ZERO; f],
        }
    }

    fn prepare(&mut self, t: f64) {
        match self.chi_src {
            Some(c) => c.eval_into(t, &mut self.chi),
            None => self.chi.iter_mut().for_each(|z| *z = ZERO),
        }
        if self.include_system {
            self.hs = self.sys.hamiltonian(t);
        }
    }

    /// `out = Ĥ x` for the prepared time.
    fn apply(&mut self, x: &[C64], out: &mut [C64]) {
        let dim = self.sys.dim();
        let f = self.reg.len();
        let r = self.reg.n_modes();
        out.iter_mut().for_each(|z| *z = ZERO);
        if self.include_system {
            for s in 0..dim {
                for sp in 0..dim {
                    let h = self.hs[(s, sp)];
                    if h != ZERO {
                        let (o, xi) = (&mut out[s * f..(s + 1) * f], &x[sp * f..(sp + 1) * f]);
                        o.iter_mut().zip(xi).for_each(|(o, &xv)| *o += h * xv);
                    }
                }
            }
        }
        if r == 0 {
            return;
        }
        self.y.iter_mut().for_each(|z| *z = ZERO);
        for l in 0..r {
            for s in 0..dim {
                let off = (l * dim + s) * f;
                self.reg.lower_add(l, C64::new(1.0, 0.0), &x[s * f..(s + 1) * f], &mut self.y[off..off + f]);
            }
        }
        let v = &self.sys.coupling;
        // V† χ_l b_l
        for s in 0..dim {
            for sp in 0..dim {
                let vd = v[(sp, s)].conj();
                if vd == ZERO {
                    continue;
                }
                for l in 0..r {
                    let c = vd * self.chi[l];
                    if c == ZERO {
                        continue;
                    }
                    let off = (l * dim + sp) * f;
                    let (o, yv) = (&mut out[s * f..(s + 1) * f], &self.y[off..off + f]);
                    o.iter_mut().zip(yv).for_each(|(o, &y)| *o += c * y);
                }
            }
        }
        // b_k† (V χ_k* x − Σ_l D_lk b_l x)
        for k in 0..r {
            for s in 0..dim {
                self.g.iter_mut().for_each(|z| *z = ZERO);
                let mut any = false;
                for sp in 0..dim {
                    let c = v[(s, sp)] * self.chi[k].conj();
                    if c != ZERO {
                        any = true;
                        let xi = &x[sp * f..(sp + 1) * f];
                        self.g.iter_mut().zip(xi).for_each(|(g, &xv)| *g += c * xv);
                    }
                }
                if self.has_d {
                    for l in 0..r {
                        let dlk = self.d[(l, k)];
                        if dlk != ZERO {
                            any = true;
                            let off = (l * dim + s) * f;
                            let yv = &self.y[off..off + f];
                            self.g.iter_mut().zip(yv).for_each(|(g, &y)| *g -= dlk * y);
                        }
                    }
                }
                if any {
                    self.reg.raise_add(k, C64::new(1.0, 0.0), &self.g, &mut out[s * f..(s + 1) * f]);
                }
            }
        }
    }

    /// `out = −i Ĥ x`.
    fn pure_derivative(&mut self, t: f64, x: &[C64], out: &mut [C64]) {
        self.prepare(t);
        self.apply(x, out);
        out.iter_mut().for_each(|z| *z *= MINUS_I);
    }

    /// Frobenius bound on `‖Ĥ‖` over the interval.
    fn bound(&self, chi_max: f64) -> f64 {
        let r = self.reg.n_modes() as f64;
        let n_max = self.reg.n_max() as f64;
        let sys = if self.include_system { self.sys.hamiltonian_bound() } else { 0.0 };
        sys + 2.0 * frobenius(&self.sys.coupling) * chi_max * (r * n_max).sqrt() + frobenius(&self.d) * n_max
    }
}

/// `Ĥ_eff(t)|Ψ⟩` on schedule interval `interval`.
pub fn apply_h_eff(
    t: f64,
    schedule: &EffectiveSchedule,
    interval: usize,
    sys: &SystemSpec,
    state: &JointState,
) -> Result<Vec<C64>> {
    let iv = schedule.intervals.get(interval).ok_or_else(|| Error::invalid("interval", "index out of range"))?;
    if state.n_modes != iv.rank() || state.sys_dim != sys.dim() {
        return Err(Error::LayoutMismatch { expected: iv.rank(), found: state.n_modes });
    }
    let reg = FockRegister::new(iv.rank(), state.n_max)?;
    check_layout(state.amplitudes.len(), sys.dim() * reg.len())?;
    let mut op = HeffOperator::new(sys, &reg, Some(&iv.chi), iv.d_matrix(), true);
    op.prepare(t);
    let mut out = vec![ZERO; state.amplitudes.len()];
    op.apply(&state.amplitudes, &mut out);
    Ok(out)
}

/// Integration knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionOptions {
    /// Maximum total occupation of the relevant register.
    pub n_max: usize,
    /// Upper bound on the RK4 step.
    pub max_step: f64,
    /// Step bound `phase_budget / ‖Ĥ_eff‖`.
    pub phase_budget: f64,
    /// Spacing of recorded observables; `T` is always recorded.
    pub output_dt: f64,
    /// Abort when the weight (norm² or trace) drifts further than this from one.
    pub norm_tolerance: f64,
    /// A step is bisected when it changes the weight by more than this.
    pub step_tolerance: f64,
    /// Abort when the top occupation shell carries more weight than this.
    pub overflow_tolerance: f64,
    /// Keep full states at every output time.
    pub keep_checkpoints: bool,
    /// Largest register basis that may be built.
    pub basis_limit: usize,
}

impl Default for EvolutionOptions {
    fn default() -> Self {
        Self {
            n_max: 6,
            max_step: 0.025,
            phase_budget: 0.1,
            output_dt: 0.5,
            norm_tolerance: 1e-6,
            step_tolerance: 1e-9,
            overflow_tolerance: 1e-3,
            keep_checkpoints: false,
            basis_limit: 2_000_000,
        }
    }
}

impl EvolutionOptions {
    fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, "must be finite and positive"))
            }
        };
        positive("max_step", self.max_step)?;
        positive("phase_budget", self.phase_budget)?;
        positive("output_dt", self.output_dt)?;
        positive("norm_tolerance", self.norm_tolerance)?;
        positive("step_tolerance", self.step_tolerance)?;
        positive("overflow_tolerance", self.overflow_tolerance)?;
        Ok(())
    }
}

/// Schedule with prebuilt registers and slot maps, shareable across threads.
#[derive(Debug, Clone)]
pub struct CompiledSchedule {
    pub schedule: Arc<EffectiveSchedule>,
    pub n_max: usize,
    registers: BTreeMap<usize, Arc<FockRegister>>,
    append_maps: BTreeMap<usize, Arc<Vec<usize>>>,
    split_maps: BTreeMap<usize, Arc<Vec<(usize, usize)>>>,
}

impl CompiledSchedule {
    pub fn new(schedule: EffectiveSchedule, n_max: usize, basis_limit: usize) -> Result<Self> {
        let mut registers = BTreeMap::new();
        let mut ranks: Vec<usize> = schedule.intervals.iter().map(|iv| iv.rank()).collect();
        for iv in &schedule.intervals {
            match iv.terminal {
                IntervalEnd::Coupling => ranks.push(iv.rank() + 1),
                IntervalEnd::Decoupling if iv.rank() > 0 => ranks.push(iv.rank() - 1),
                _ => {}
            }
        }
        for r in ranks {
            if let std::collections::btree_map::Entry::Vacant(e) = registers.entry(r) {
                e.insert(Arc::new(FockRegister::with_limit(r, n_max, basis_limit)?));
            }
        }
        let mut append_maps = BTreeMap::new();
        let mut split_maps = BTreeMap::new();
        for iv in &schedule.intervals {
            let r = iv.rank();
            match iv.terminal {
                IntervalEnd::Coupling => {
                    append_maps.entry(r).or_insert_with(|| Arc::new(registers[&r].append_map(&registers[&(r + 1)])));
                }
                IntervalEnd::Decoupling => {
                    if r == 0 {
                        return Err(Error::invalid("schedule", "decoupling from an empty register"));
                    }
                    split_maps
                        .entry(r)
                        .or_insert_with(|| Arc::new(registers[&r].split_first_map(&registers[&(r - 1)])));
                }
                IntervalEnd::Horizon => {}
            }
        }
        Ok(Self { schedule: Arc::new(schedule), n_max, registers, append_maps, split_maps })
    }

    pub fn register(&self, rank: usize) -> &Arc<FockRegister> {
        &self.registers[&rank]
    }

    /// Slot-0 split map of the rank-`rank` register.
    pub fn split_map(&self, rank: usize) -> &[(usize, usize)] {
        &self.split_maps[&rank]
    }
}

/// Replaces the joint state when slot 0 detaches.
pub trait Detacher {
    /// Returns the post-detachment state on the smaller register and the quanta carried away.
    fn detach(
        &mut self,
        t: f64,
        state: &JointState,
        split: &[(usize, usize)],
        smaller: &FockRegister,
    ) -> Result<(JointState, f64)>;
}

/// A detachment that happened along a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetachmentRecord {
    pub t: f64,
    pub detached_occupation: f64,
}

/// Output of an evolution.
#[derive(Debug, Clone)]
pub struct EvolutionRun<S> {
    pub records: Vec<ObservableRecord>,
    pub checkpoints: Vec<S>,
    pub final_state: S,
    pub detachments: Vec<DetachmentRecord>,
}

fn output_times(horizon: f64, output_dt: f64) -> Vec<f64> {
    let n = (horizon / output_dt + 1e-9).floor() as usize;
    let mut v: Vec<f64> = (0..=n).map(|k| k as f64 * output_dt).collect();
    if horizon - v[v.len() - 1] > 1e-9 * horizon.max(1.0) {
        v.push(horizon);
    } else {
        let last = v.len() - 1;
        v[last] = horizon;
    }
    v
}

/// Pure-state or density representation of the evolving object.
trait Representation: Sized {
    type State: Clone;
    fn storage(block: usize) -> usize;
    /// One RK4 step of length `h` from `t`.
    fn step(
        rk: &mut Rk4,
        op: &mut HeffOperator<'_>,
        t: f64,
        h: f64,
        y: &mut [C64],
        block: usize,
        scratch: &mut Vec<C64>,
    );
    fn weight(y: &[C64], block: usize) -> f64;
    fn diagonal(y: &[C64], block: usize) -> Vec<f64>;
    fn extend(y: &[C64], sys_dim: usize, map: &[usize], old_f: usize, new_f: usize) -> Vec<C64>;
    fn snapshot(y: &[C64], t: f64, sys_dim: usize, reg: &FockRegister) -> Self::State;
}

struct Pure;
struct Mixed;

impl Representation for Pure {
    type State = JointState;
    fn storage(block: usize) -> usize {
        block
    }
    fn step(
        rk: &mut Rk4,
        op: &mut HeffOperator<'_>,
        t: f64,
        h: f64,
        y: &mut [C64],
        _block: usize,
        _scratch: &mut Vec<C64>,
    ) {
        rk.step(&mut |t, x: &[C64], out: &mut [C64]| op.pure_derivative(t, x, out), t, h, y);
    }
    fn weight(y: &[C64], _block: usize) -> f64 {
        y.iter().map(|z| z.norm_sqr()).sum()
    }
    fn diagonal(y: &[C64], _block: usize) -> Vec<f64> {
        y.iter().map(|z| z.norm_sqr()).collect()
    }
    fn extend(y: &[C64], sys_dim: usize, map: &[usize], old_f: usize, new_f: usize) -> Vec<C64> {
        let mut out = vec![ZERO; sys_dim * new_f];
        for s in 0..sys_dim {
            for (i, &j) in map.iter().enumerate() {
                out[s * new_f + j] = y[s * old_f + i];
            }
        }
        out
    }
    fn snapshot(y: &[C64], t: f64, sys_dim: usize, reg: &FockRegister) -> JointState {
        JointState { t, sys_dim, n_modes: reg.n_modes(), n_max: reg.n_max(), amplitudes: y.to_vec() }
    }
}

impl Representation for Mixed {
    type State = RelevantDensity;
    fn storage(block: usize) -> usize {
        block * block
    }
    /// `ρ → M ρ M†` with `M` the RK4 propagator of the step: a congruence, so Hermiticity
    /// and positivity hold exactly and pure densities follow the pure-state path.
    fn step(
        rk: &mut Rk4,
        op: &mut HeffOperator<'_>,
        t: f64,
        h: f64,
        y: &mut [C64],
        block: usize,
        scratch: &mut Vec<C64>,
    ) {
        let mut f = |t, x: &[C64], out: &mut [C64]| op.pure_derivative(t, x, out);
        for col in y.chunks_exact_mut(block) {
            rk.step(&mut f, t, h, col);
        }
        scratch.resize(block * block, ZERO);
        for c in 0..block {
            for r in 0..block {
                scratch[c * block + r] = y[r * block + c].conj();
            }
        }
        for col in scratch.chunks_exact_mut(block) {
            rk.step(&mut f, t, h, col);
        }
        for c in 0..block {
            for r in c..block {
                let z = 0.5 * (scratch[c * block + r] + scratch[r * block + c].conj());
                y[c * block + r] = z;
                y[r * block + c] = z.conj();
            }
        }
    }
    fn weight(y: &[C64], block: usize) -> f64 {
        (0..block).map(|i| y[i * block + i].re).sum()
    }
    fn diagonal(y: &[C64], block: usize) -> Vec<f64> {
        (0..block).map(|i| y[i * block + i].re).collect()
    }
    fn extend(y: &[C64], sys_dim: usize, map: &[usize], old_f: usize, new_f: usize) -> Vec<C64> {
        let (nb, ob) = (sys_dim * new_f, sys_dim * old_f);
        let idx = |s: usize, i: usize| s * new_f + map[i];
        let mut out = vec![ZERO; nb * nb];
        for sc in 0..sys_dim {
            for ic in 0..old_f {
                let col_old = sc * old_f + ic;
                let col_new = idx(sc, ic);
                for sr in 0..sys_dim {
                    for ir in 0..old_f {
                        out[col_new * nb + idx(sr, ir)] = y[col_old * ob + sr * old_f + ir];
                    }
                }
            }
        }
        out
    }
    fn snapshot(y: &[C64], t: f64, sys_dim: usize, reg: &FockRegister) -> RelevantDensity {
        let n = sys_dim * reg.len();
        RelevantDensity {
            t,
            sys_dim,
            n_modes: reg.n_modes(),
            n_max: reg.n_max(),
            rho: CMatrix::from_column_slice(n, n, y),
        }
    }
}

/// Partial trace over slot 0 of a column-major density; returns the reduced density
/// and the mean occupation of the traced slot.
fn partial_trace_slot0(
    y: &[C64],
    sys_dim: usize,
    split: &[(usize, usize)],
    old_f: usize,
    new_f: usize,
) -> (Vec<C64>, f64) {
    let ob = sys_dim * old_f;
    let nb = sys_dim * new_f;
    let mut out = vec![ZERO; nb * nb];
    let mut detached = 0.0;
    for sc in 0..sys_dim {
        for ic in 0..old_f {
            let (nc, rest_c) = split[ic];
            let col_old = sc * old_f + ic;
            let col_new = sc * new_f + rest_c;
            detached += nc as f64 * y[col_old * ob + col_old].re;
            for sr in 0..sys_dim {
                for ir in 0..old_f {
                    let (nr, rest_r) = split[ir];
                    if nr == nc {
                        out[col_new * nb + sr * new_f + rest_r] += y[col_old * ob + sr * old_f + ir];
                    }
                }
            }
        }
    }
    (out, detached)
}

/// Reduced density after tracing out slot 0 of a pure state.
pub fn trace_out_detached(state: &JointState, register: &FockRegister) -> Result<(RelevantDensity, f64)> {
    if state.n_modes == 0 {
        return Err(Error::invalid("slot", "register has no slot to trace out"));
    }
    check_layout(state.amplitudes.len(), state.sys_dim * register.len())?;
    let smaller = FockRegister::new(state.n_modes - 1, state.n_max)?;
    let split = register.split_first_map(&smaller);
    let density = state.to_density();
    trace_out_density(&density, register, &smaller, &split)
}

/// Partial trace over slot 0 of a relevant density.
pub fn trace_out_density(
    density: &RelevantDensity,
    register: &FockRegister,
    smaller: &FockRegister,
    split: &[(usize, usize)],
) -> Result<(RelevantDensity, f64)> {
    check_layout(density.rho.nrows(), density.sys_dim * register.len())?;
    let (out, detached) =
        partial_trace_slot0(density.rho.as_slice(), density.sys_dim, split, register.len(), smaller.len());
    Ok((Mixed::snapshot(&out, density.t, density.sys_dim, smaller), detached))
}

enum DetachMode<'d> {
    Pure(&'d mut dyn Detacher),
    Trace,
}

struct Integrator<'s> {
    opts: &'s EvolutionOptions,
    rk: Rk4,
    saved: Vec<C64>,
    scratch: Vec<C64>,
}

impl<'s> Integrator<'s> {
    /// Integrates `[a, b]` in steps of at most `h_max`, bisecting steps that change the
    /// weight by more than the step tolerance.
    fn advance<R: Representation>(
        &mut self,
        op: &mut HeffOperator<'_>,
        y: &mut Vec<C64>,
        a: f64,
        b: f64,
        h_max: f64,
        block: usize,
    ) -> Result<()> {
        if b <= a {
            return Ok(());
        }
        let n = ((b - a) / h_max).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        for k in 0..n {
            let t0 = a + h * k as f64;
            self.step_adaptive::<R>(op, y, t0, h, block, 0)?;
        }
        Ok(())
    }

    fn step_adaptive<R: Representation>(
        &mut self,
        op: &mut HeffOperator<'_>,
        y: &mut Vec<C64>,
        t0: f64,
        h: f64,
        block: usize,
        depth: u32,
    ) -> Result<()> {
        let w0 = R::weight(y, block);
        self.saved.clear();
        self.saved.extend_from_slice(y);
        R::step(&mut self.rk, op, t0, h, y, block, &mut self.scratch);
        let drift = (R::weight(y, block) - w0).abs();
        if drift <= self.opts.step_tolerance {
            return Ok(());
        }
        if depth >= 8 {
            return Err(Error::NormDrift { context: "RK4 step rejection", t: t0, drift });
        }
        y.copy_from_slice(&self.saved);
        self.step_adaptive::<R>(op, y, t0, 0.5 * h, block, depth + 1)?;
        self.step_adaptive::<R>(op, y, t0 + 0.5 * h, 0.5 * h, block, depth + 1)
    }
}

fn run_schedule<R: Representation>(
    sys: &SystemSpec,
    compiled: &CompiledSchedule,
    initial: Vec<C64>,
    opts: &EvolutionOptions,
    mut mode: DetachMode<'_>,
) -> Result<EvolutionRun<R::State>> {
    opts.validate()?;
    if opts.n_max != compiled.n_max {
        return Err(Error::invalid("n_max", "differs from the compiled schedule"));
    }
    let schedule = &compiled.schedule;
    let dim = sys.dim();
    let outputs = output_times(schedule.horizon, opts.output_dt);
    let mut next_out = 0;
    let mut records = Vec::with_capacity(outputs.len());
    let mut checkpoints = Vec::new();
    let mut detachments = Vec::new();
    let mut detached_total = 0.0;
    let mut y = initial;
    let mut integ = Integrator { opts, rk: Rk4::new(0), saved: Vec::new(), scratch: Vec::new() };

    let emit = |y: &[C64],
                t: f64,
                reg: &FockRegister,
                detached: f64,
                records: &mut Vec<ObservableRecord>,
                checkpoints: &mut Vec<R::State>|
     -> Result<()> {
        let block = dim * reg.len();
        let (so, ro, top) = observables_from_diagonal(R::diagonal(y, block).into_iter(), sys, reg);
        let w = R::weight(y, block);
        if (w - 1.0).abs() > opts.norm_tolerance {
            return Err(Error::NormDrift { context: "relevant-frame evolution", t, drift: w - 1.0 });
        }
        if top > opts.overflow_tolerance {
            return Err(Error::RegisterOverflow { t, leaked: top });
        }
        let (m_in, m_out) = schedule.counts(t);
        records.push(ObservableRecord {
            t,
            system_occupation: so,
            relevant_occupation: ro,
            detached_occupation: detached,
            m_in,
            m_out,
            r: reg.n_modes(),
        });
        if opts.keep_checkpoints {
            checkpoints.push(R::snapshot(y, t, dim, reg));
        }
        Ok(())
    };

    let first_rank = schedule.initial_rank();
    check_layout(y.len(), R::storage(dim * compiled.register(first_rank).len()))?;

    for iv in &schedule.intervals {
        let reg = compiled.register(iv.rank()).clone();
        let block = dim * reg.len();
        check_layout(y.len(), R::storage(block))?;
        if iv.is_instantaneous() {
            let mut op = HeffOperator::new(sys, &reg, None, iv.generator.clone(), false);
            let h_max = 0.05 / op.bound(0.0).max(1e-300);
            integ.advance::<R>(&mut op, &mut y, 0.0, 1.0, h_max.min(1.0), block)?;
        } else if iv.end > iv.start {
            while next_out < outputs.len() && outputs[next_out] <= iv.start {
                emit(&y, outputs[next_out], &reg, detached_total, &mut records, &mut checkpoints)?;
                next_out += 1;
            }
            let mut op = HeffOperator::new(sys, &reg, Some(&iv.chi), iv.d_matrix(), true);
            let bound = op.bound(iv.chi.max_abs());
            let h_max = opts.max_step.min(opts.phase_budget / bound.max(1e-300)).min(iv.len() / 50.0);
            let mut a = iv.start;
            while next_out < outputs.len() && outputs[next_out] < iv.end {
                let b = outputs[next_out];
                integ.advance::<R>(&mut op, &mut y, a, b, h_max, block)?;
                emit(&y, b, &reg, detached_total, &mut records, &mut checkpoints)?;
                next_out += 1;
                a = b;
            }
            integ.advance::<R>(&mut op, &mut y, a, iv.end, h_max, block)?;
        }
        let t_now = iv.end;
        match iv.terminal {
            IntervalEnd::Horizon => {}
            IntervalEnd::Coupling => {
                let bigger = compiled.register(iv.rank() + 1);
                let map = &compiled.append_maps[&iv.rank()];
                y = R::extend(&y, dim, map, reg.len(), bigger.len());
            }
            IntervalEnd::Decoupling => {
                let smaller = compiled.register(iv.rank() - 1);
                let split = compiled.split_map(iv.rank());
                let w = R::weight(&y, block);
                if (w - 1.0).abs() > opts.norm_tolerance {
                    return Err(Error::NormDrift { context: "pre-detachment state", t: t_now, drift: w - 1.0 });
                }
                let (new_y, carried) = match &mut mode {
                    DetachMode::Trace => partial_trace_slot0(&y, dim, split, reg.len(), smaller.len()),
                    DetachMode::Pure(det) => {
                        let state = JointState {
                            t: t_now,
                            sys_dim: dim,
                            n_modes: iv.rank(),
                            n_max: reg.n_max(),
                            amplitudes: y,
                        };
                        let (next, carried) = det.detach(t_now, &state, split, smaller)?;
                        check_layout(next.amplitudes.len(), dim * smaller.len())?;
                        (next.amplitudes, carried)
                    }
                };
                y = new_y;
                detached_total += carried;
                detachments.push(DetachmentRecord { t: t_now, detached_occupation: carried });
            }
        }
    }
    let last_rank = schedule.intervals.last().map_or(0, |iv| match iv.terminal {
        IntervalEnd::Coupling => iv.rank() + 1,
        IntervalEnd::Decoupling => iv.rank() - 1,
        IntervalEnd::Horizon => iv.rank(),
    });
    let reg = compiled.register(last_rank).clone();
    while next_out < outputs.len() {
        emit(&y, outputs[next_out], &reg, detached_total, &mut records, &mut checkpoints)?;
        next_out += 1;
    }
    let final_state = R::snapshot(&y, schedule.horizon, dim, &reg);
    Ok(EvolutionRun { records, checkpoints, final_state, detachments })
}

fn check_system_state(sys: &SystemSpec, psi: &[C64]) -> Result<()> {
    check_layout(psi.len(), sys.dim())?;
    let n: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
    if (n - 1.0).abs() > 1e-10 {
        return Err(Error::invalid("psi0", "system state must be normalized"));
    }
    Ok(())
}

/// Moving-frame pure-state evolution; `detacher` decides what replaces the state at
/// every decoupling.
pub fn evolve_moving_frame(
    sys: &SystemSpec,
    compiled: &CompiledSchedule,
    psi0: &[C64],
    opts: &EvolutionOptions,
    detacher: &mut dyn Detacher,
) -> Result<EvolutionRun<JointState>> {
    check_system_state(sys, psi0)?;
    let reg = compiled.register(compiled.schedule.initial_rank());
    let init = JointState::product_vacuum(psi0, reg, 0.0).amplitudes;
    run_schedule::<Pure>(sys, compiled, init, opts, DetachMode::Pure(detacher))
}

/// Density-matrix evolution with partial traces at decouplings.
pub fn evolve_density(
    sys: &SystemSpec,
    compiled: &CompiledSchedule,
    rho0: &CMatrix,
    opts: &EvolutionOptions,
) -> Result<EvolutionRun<RelevantDensity>> {
    if rho0.nrows() != sys.dim() || rho0.ncols() != sys.dim() {
        return Err(Error::invalid("rho0", "must match the system dimension"));
    }
    let reg = compiled.register(compiled.schedule.initial_rank());
    let f = reg.len();
    let vac = reg.index_of(&vec![0u8; reg.n_modes()]).expect("vacuum present");
    let n = sys.dim() * f;
    let mut init = vec![ZERO; n * n];
    for sc in 0..sys.dim() {
        for sr in 0..sys.dim() {
            init[(sc * f + vac) * n + sr * f + vac] = rho0[(sr, sc)];
        }
    }
    run_schedule::<Mixed>(sys, compiled, init, opts, DetachMode::Trace)
}

/// Detacher for schedules without decouplings.
struct NoDetach;

impl Detacher for NoDetach {
    fn detach(&mut self, t: f64, _: &JointState, _: &[(usize, usize)], _: &FockRegister) -> Result<(JointState, f64)> {
        Err(Error::invalid("schedule", format!("unexpected decoupling at t = {t} in the incoming frame")))
    }
}

/// Evolution in the frame of all incoming modes, present from `t = 0`.
pub fn evolve_forward_frame(
    sys: &SystemSpec,
    traj: &WavepacketTrajectory,
    streams: &ModeStreams,
    psi0: &[C64],
    opts: &EvolutionOptions,
) -> Result<EvolutionRun<JointState>> {
    let schedule = EffectiveSchedule::incoming_frame(traj, streams)?;
    let compiled = CompiledSchedule::new(schedule, opts.n_max, opts.basis_limit)?;
    evolve_moving_frame(sys, &compiled, psi0, opts, &mut NoDetach)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain_env::{build_uniform_chain, propagate_wavepacket};
    use crate::mode_streams::{default_dt_event, extract_streams, ScheduleInterval};
    use approx::assert_abs_diff_eq;

    fn single_mode_schedule(chi: C64, horizon: f64) -> EffectiveSchedule {
        let n_samples = 3;
        let times: Vec<f64> = (0..n_samples).map(|k| horizon * k as f64 / (n_samples - 1) as f64).collect();
        let values = CMatrix::from_element(n_samples, 1, chi);
        EffectiveSchedule {
            horizon,
            carrier: 0.0,
            intervals: vec![ScheduleInterval {
                start: 0.0,
                end: horizon,
                terminal: IntervalEnd::Horizon,
                frame: CMatrix::from_element(1, 1, C64::new(1.0, 0.0)),
                generator: CMatrix::zeros(1, 1),
                chi: ChiSamples { times, values, carrier: 0.0 },
            }],
            coupling_times: vec![0.0],
            decoupling_times: vec![],
        }
    }

    /// Dense Jaynes–Cummings matrix on (qubit ⊗ n ≤ n_max), index `s·(n_max+1) + n`.
    fn dense_jc(eps: f64, g: f64, chi: C64, n_max: usize) -> CMatrix {
        let f = n_max + 1;
        let mut h = CMatrix::zeros(2 * f, 2 * f);
        for n in 0..f {
            h[(f + n, f + n)] = C64::new(eps, 0.0);
        }
        for n in 1..f {
            let amp = g * (n as f64).sqrt();
            // σ₊ b: |g, n⟩ → |e, n−1⟩ with χ; σ₋ b†: |e, n−1⟩ → |g, n⟩ with χ*
            h[(f + n - 1, n)] = chi * amp;
            h[(n, f + n - 1)] = chi.conj() * amp;
        }
        h
    }

    #[test]
    fn matches_dense_jaynes_cummings() {
        let n_max = 5;
        let chi = C64::new(0.7, 0.0);
        let sys = SystemSpec::driven_qubit(1.0, 0.3, Drive::None);
        let sched = single_mode_schedule(chi, 1.0);
        let reg = FockRegister::new(1, n_max).unwrap();
        let dense = dense_jc(1.0, 0.3, chi, n_max);
        let dim = 2 * reg.len();
        for col in 0..dim {
            let mut amps = vec![ZERO; dim];
            amps[col] = C64::new(1.0, 0.0);
            let st = JointState { t: 0.0, sys_dim: 2, n_modes: 1, n_max, amplitudes: amps };
            let out = apply_h_eff(0.3, &sched, 0, &sys, &st).unwrap();
            for row in 0..dim {
                assert!((out[row] - dense[(row, col)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn decoupled_limit_is_system_only() {
        let sys = SystemSpec::driven_qubit(1.0, 0.3, Drive::Cosine { amplitude: 0.1, frequency: 1.0 });
        let sched = single_mode_schedule(C64::new(0.0, 0.0), 1.0);
        let st = JointState {
            t: 0.0,
            sys_dim: 2,
            n_modes: 1,
            n_max: 2,
            amplitudes: (0..6).map(|k| C64::new(k as f64, 1.0 - k as f64)).collect(),
        };
        let out = apply_h_eff(0.4, &sched, 0, &sys, &st).unwrap();
        let hs = sys.hamiltonian(0.4);
        for s in 0..2 {
            for i in 0..3 {
                let expect: C64 = (0..2).map(|sp| hs[(s, sp)] * st.amplitudes[sp * 3 + i]).sum();
                assert!((out[s * 3 + i] - expect).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn hermitian_action_with_rotation() {
        let sys = SystemSpec::driven_qubit(1.0, 0.2, Drive::Cosine { amplitude: 0.1, frequency: 1.0 });
        let reg = FockRegister::new(3, 3).unwrap();
        let times = vec![0.0, 1.0];
        let values = CMatrix::from_fn(2, 3, |i, l| C64::new(0.3 * l as f64 - 0.1 * i as f64, 0.2 + 0.1 * l as f64));
        let chi = ChiSamples { times, values, carrier: 0.7 };
        let d = CMatrix::from_fn(3, 3, |i, j| {
            let a = C64::new((i + 2 * j) as f64 * 0.1, (i as f64 - j as f64) * 0.05);
            if i == j {
                C64::new(a.re, 0.0)
            } else {
                a
            }
        });
        let d = crate::linalg::hermitize(&d);
        let mut op = HeffOperator::new(&sys, &reg, Some(&chi), d, true);
        op.prepare(0.37);
        let n = 2 * reg.len();
        let phi: Vec<C64> = (0..n).map(|k| C64::new((k as f64 * 0.37).sin(), (k as f64 * 0.11).cos())).collect();
        let psi: Vec<C64> = (0..n).map(|k| C64::new((k as f64 * 0.73).cos(), (k as f64 * 0.29).sin())).collect();
        let mut hphi = vec![ZERO; n];
        let mut hpsi = vec![ZERO; n];
        op.apply(&phi, &mut hphi);
        op.apply(&psi, &mut hpsi);
        let lhs: C64 = phi.iter().zip(&hpsi).map(|(a, b)| a.conj() * b).sum();
        let rhs: C64 = hphi.iter().zip(&psi).map(|(a, b)| a.conj() * b).sum();
        assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn trace_out_product_and_bell() {
        let reg = FockRegister::new(2, 2).unwrap();
        let f = reg.len();
        let sys_state = [C64::new(0.6, 0.0), C64::new(0.0, 0.8)];
        let st = JointState::product_vacuum(&sys_state, &reg, 0.0);
        let (rho, carried) = trace_out_detached(&st, &reg).unwrap();
        assert_abs_diff_eq!(carried, 0.0);
        let pure = JointState::product_vacuum(&sys_state, &FockRegister::new(1, 2).unwrap(), 0.0).to_density();
        assert!(frobenius(&(rho.rho - pure.rho)) < 1e-14);

        // (|1,0⟩ + |0,1⟩)/√2 on two slots, qubit in ground state
        let mut amps = vec![ZERO; 2 * f];
        let a = reg.index_of(&[1, 0]).unwrap();
        let b = reg.index_of(&[0, 1]).unwrap();
        amps[a] = C64::new(1.0 / 2f64.sqrt(), 0.0);
        amps[b] = C64::new(1.0 / 2f64.sqrt(), 0.0);
        let st = JointState { t: 0.0, sys_dim: 2, n_modes: 2, n_max: 2, amplitudes: amps };
        let (rho, carried) = trace_out_detached(&st, &reg).unwrap();
        assert_abs_diff_eq!(carried, 0.5, epsilon = 1e-14);
        let small = FockRegister::new(1, 2).unwrap();
        let i0 = small.index_of(&[0]).unwrap();
        let i1 = small.index_of(&[1]).unwrap();
        assert_abs_diff_eq!(rho.rho[(i0, i0)].re, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(rho.rho[(i1, i1)].re, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(rho.rho[(i0, i1)].norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn observables_of_simple_states() {
        let sys = SystemSpec::driven_qubit(1.0, 0.1, Drive::None);
        let reg = FockRegister::new(2, 3).unwrap();
        let vac = JointState::product_vacuum(&sys.basis_state(0), &reg, 0.0);
        assert_eq!(observables(&vac, &sys, &reg).unwrap(), (0.0, 0.0));
        let mut amps = vec![ZERO; 2 * reg.len()];
        amps[reg.index_of(&[1, 0]).unwrap()] = C64::new(1.0, 0.0);
        let one = JointState { amplitudes: amps, ..vac.clone() };
        assert_eq!(observables(&one, &sys, &reg).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let reg = FockRegister::new(2, 2).unwrap();
        let st = JointState::product_vacuum(&[C64::new(0.6, 0.1), C64::new(0.0, -0.7937253933193772)], &reg, 1.25);
        let mut buf = Vec::new();
        st.write_checkpoint(&mut buf).unwrap();
        let back = JointState::read_checkpoint(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, st);
    }

    #[test]
    fn dark_state_stays_dark() {
        let chain = build_uniform_chain(1.0, 0.1, 30.0, 2.0).unwrap();
        let traj = propagate_wavepacket(&chain, 30.0, 0.05).unwrap();
        let streams = extract_streams(&traj, 30.0, 1e-4, default_dt_event(0.1, 30.0)).unwrap();
        let sys = SystemSpec::driven_qubit(1.0, 0.1, Drive::None);
        let opts = EvolutionOptions { n_max: 3, ..Default::default() };
        let run = evolve_forward_frame(&sys, &traj, &streams, &sys.basis_state(0), &opts).unwrap();
        assert!(run.records.iter().all(|r| r.system_occupation.abs() < 1e-14 && r.relevant_occupation.abs() < 1e-14));
        let compiled =
            CompiledSchedule::new(EffectiveSchedule::from_streams(&traj, &streams).unwrap(), 3, 1 << 20).unwrap();
        let mut rho0 = CMatrix::zeros(2, 2);
        rho0[(0, 0)] = C64::new(1.0, 0.0);
        let dens = evolve_density(&sys, &compiled, &rho0, &opts).unwrap();
        assert!(dens.records.iter().all(|r| r.system_occupation.abs() < 1e-14 && r.detached_occupation.abs() < 1e-14));
    }
}
