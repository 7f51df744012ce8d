//! Lindblad simulation of the driven qubit–cavity system and the
//! displacement + Ramsey parity-mapping readout.
//!
//! Joint operators act on `qubit(2) ⊗ cavity(N)` with basis index
//! `q * N + n`, `q = 0` for `|g⟩` and `q = 1` for `|e⟩`. Frequencies in
//! [`DeviceParams`] are ordinary frequencies (Hz); Hamiltonians are built in
//! angular units (rad/s) and times are in seconds.
//!
//! The readout is linear in the input cavity state, so besides the forward
//! (Schrödinger) sequence the module can back-propagate the measured qubit
//! observable through the exact adjoint of the integrator. That yields one
//! effective cavity observable `E_k` per displacement with `X = tr(E_k ρ)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::Binomial;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{self, accurate_dim, DensityMatrix, Displacer};
use crate::linalg::{c, hermitize, CMatrix, SparseMatrix, ONE, ZERO};
use crate::seed;

/// Hamiltonian and decoherence parameters of the device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceParams {
    pub omega_q: f64,
    pub omega_c: f64,
    pub omega_r: f64,
    pub chi_qq: f64,
    pub chi_cc: f64,
    pub chi_cq: f64,
    pub chi_qr: f64,
    pub chi_cr: f64,
    pub chi_cq_prime: f64,
    #[serde(rename = "T_q1")]
    pub t_q1: f64,
    #[serde(rename = "T_qphi")]
    pub t_qphi: f64,
    #[serde(rename = "T_c1")]
    pub t_c1: f64,
    #[serde(rename = "T_r1")]
    pub t_r1: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            omega_q: 5.277e9,
            omega_c: 4.587e9,
            omega_r: 7.617e9,
            chi_qq: 175.3e6,
            chi_cc: 6e3,
            chi_cq: 1.423e6,
            chi_qr: 0.64e6,
            chi_cr: 2e3,
            chi_cq_prime: 16e3,
            t_q1: 85e-6,
            t_qphi: 15e-6,
            t_c1: 1e-3,
            t_r1: 2.1e-6,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let couplings = [
            ("omega_q", self.omega_q),
            ("omega_c", self.omega_c),
            ("omega_r", self.omega_r),
            ("chi_qq", self.chi_qq),
            ("chi_cc", self.chi_cc),
            ("chi_cq", self.chi_cq),
            ("chi_qr", self.chi_qr),
            ("chi_cr", self.chi_cr),
            ("chi_cq_prime", self.chi_cq_prime),
        ];
        for (name, v) in couplings {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite")));
            }
        }
        let times = [
            ("T_q1", self.t_q1),
            ("T_qphi", self.t_qphi),
            ("T_c1", self.t_c1),
            ("T_r1", self.t_r1),
        ];
        for (name, v) in times {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Same Hamiltonian with every decoherence time sent to infinity.
    pub fn without_decoherence(&self) -> Self {
        Self {
            t_q1: f64::INFINITY,
            t_qphi: f64::INFINITY,
            t_c1: f64::INFINITY,
            t_r1: f64::INFINITY,
            ..*self
        }
    }

    /// Wait time `π/χ` of an ideal conditional-phase gate.
    pub fn dispersive_half_period(&self) -> f64 {
        PI / (TAU * self.chi_cq)
    }
}

fn rate(t: f64) -> f64 {
    if t.is_infinite() {
        0.0
    } else {
        1.0 / t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Space {
    /// Qubit ⊗ cavity.
    Joint,
    /// Cavity alone with the qubit parked in `|g⟩`.
    Cavity,
}

fn hamiltonian(
    device: &DeviceParams,
    space: Space,
    eps_q: Complex64,
    eps_c: Complex64,
    cavity_dim: usize,
) -> CMatrix {
    let n = cavity_dim;
    let a = fock::annihilation(n);
    let drive_c = a.scale(1.0) * eps_c + a.adjoint() * eps_c.conj();
    let kerr = |k: usize| -TAU * device.chi_cc / 2.0 * (k * k.saturating_sub(1)) as f64;
    match space {
        Space::Cavity => {
            let mut h = drive_c;
            for k in 0..n {
                h[(k, k)] += c(kerr(k), 0.0);
            }
            h
        }
        Space::Joint => {
            let mut h = CMatrix::zeros(2 * n, 2 * n);
            for q in 0..2 {
                h.view_mut((q * n, q * n), (n, n)).copy_from(&drive_c);
            }
            for k in 0..n {
                h[(k, k)] += c(kerr(k), 0.0);
                let dispersive = -TAU * device.chi_cq * k as f64
                    - TAU * device.chi_cq_prime * (k * k.saturating_sub(1)) as f64;
                h[(n + k, n + k)] += c(kerr(k) + dispersive, 0.0);
                // ε_q σ₋ + ε_q* σ₊ with σ₋ = |g⟩⟨e|
                h[(k, n + k)] += eps_q;
                h[(n + k, k)] += eps_q.conj();
            }
            h
        }
    }
}

/// Rotating-frame Hamiltonian (rad/s) of qubit ⊗ cavity with constant
/// drives `eps_q`, `eps_c` (rad/s). The readout resonator is left in vacuum
/// and drops out.
pub fn build_joint_hamiltonian(
    device: &DeviceParams,
    eps_q: Complex64,
    eps_c: Complex64,
    cavity_dim: usize,
) -> CMatrix {
    assert!(cavity_dim >= 2, "cavity dimension must be at least 2");
    hamiltonian(device, Space::Joint, eps_q, eps_c, cavity_dim)
}

/// Jump operators with their rates folded in.
#[derive(Debug, Clone, Default)]
pub struct JumpSet {
    pub ops: Vec<CMatrix>,
}

impl JumpSet {
    pub fn empty() -> Self {
        Self { ops: Vec::new() }
    }
}

/// Qubit decay `√(1/T_q1) σ₋`, qubit dephasing `√(2/T_qφ) σ₊σ₋` and cavity
/// decay `√(1/T_c1) c` on the joint space.
pub fn build_jumps(device: &DeviceParams, cavity_dim: usize) -> JumpSet {
    assert!(cavity_dim >= 2, "cavity dimension must be at least 2");
    let n = cavity_dim;
    let mut decay = CMatrix::zeros(2 * n, 2 * n);
    let mut dephase = CMatrix::zeros(2 * n, 2 * n);
    let g1 = rate(device.t_q1).sqrt();
    let gphi = (2.0 * rate(device.t_qphi)).sqrt();
    for k in 0..n {
        decay[(k, n + k)] = c(g1, 0.0);
        dephase[(n + k, n + k)] = c(gphi, 0.0);
    }
    let a = fock::annihilation(n).scale(rate(device.t_c1).sqrt());
    let mut cavity = CMatrix::zeros(2 * n, 2 * n);
    for q in 0..2 {
        cavity.view_mut((q * n, q * n), (n, n)).copy_from(&a);
    }
    JumpSet {
        ops: vec![decay, dephase, cavity],
    }
}

fn cavity_jumps(device: &DeviceParams, cavity_dim: usize) -> JumpSet {
    JumpSet {
        ops: vec![fock::annihilation(cavity_dim).scale(rate(device.t_c1).sqrt())],
    }
}

/// Largest `‖H‖·dt` taken in a single Runge–Kutta stage.
const MAX_PHASE_PER_STEP: f64 = 0.2;

/// Precomputed Lindblad generator in sparse form:
/// `L(ρ) = −i(H_eff ρ − ρ H_eff†) + Σ J ρ J†` with `H_eff = H − (i/2) Σ J†J`.
#[derive(Debug, Clone)]
pub struct Generator {
    h_eff: SparseMatrix,
    h_eff_adj: SparseMatrix,
    jumps: Vec<SparseMatrix>,
    jumps_adj: Vec<SparseMatrix>,
    norm: f64,
}

impl Generator {
    pub fn new(h: &CMatrix, jumps: &JumpSet) -> Self {
        let mut h_eff = h.clone();
        let mut kept = Vec::new();
        for j in &jumps.ops {
            if j.iter().all(|z| *z == ZERO) {
                continue;
            }
            h_eff -= (j.adjoint() * j) * c(0.0, 0.5);
            kept.push(SparseMatrix::from_dense(j));
        }
        let h_eff = SparseMatrix::from_dense(&h_eff);
        let norm = h_eff.row_sum_norm();
        Self {
            h_eff_adj: h_eff.adjoint(),
            h_eff,
            jumps_adj: kept.iter().map(SparseMatrix::adjoint).collect(),
            jumps: kept,
            norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.h_eff.dim()
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let left = self.h_eff.mul_dense(rho);
        let right = self.h_eff.dense_mul_adjoint(rho);
        let mut out = (left - right) * c(0.0, -1.0);
        for j in &self.jumps {
            out += j.dense_mul_adjoint(&j.mul_dense(rho));
        }
        out
    }

    /// Heisenberg-picture generator `L†(O) = i(H_eff† O − O H_eff) + Σ J† O J`.
    pub fn apply_adjoint(&self, obs: &CMatrix) -> CMatrix {
        let left = self.h_eff_adj.mul_dense(obs);
        let right = self.h_eff_adj.mul_dense(&obs.adjoint()).adjoint();
        let mut out = (left - right) * c(0.0, 1.0);
        for jd in &self.jumps_adj {
            let a = jd.mul_dense(obs);
            out += jd.mul_dense(&a.adjoint()).adjoint();
        }
        out
    }

    fn substeps(&self, dt: f64) -> usize {
        ((self.norm * dt / MAX_PHASE_PER_STEP).ceil() as usize).max(1)
    }

    /// One RK4 step of length `dt`, subdivided when `‖H‖·dt` is large.
    pub fn step(&self, rho: &CMatrix, dt: f64) -> CMatrix {
        let n = self.substeps(dt);
        let h = dt / n as f64;
        (0..n).fold(rho.clone(), |x, _| rk4(&x, h, |y| self.apply(y)))
    }

    /// Exact adjoint of [`Generator::step`] under the Hilbert–Schmidt product.
    pub fn step_adjoint(&self, obs: &CMatrix, dt: f64) -> CMatrix {
        let n = self.substeps(dt);
        let h = dt / n as f64;
        (0..n).fold(obs.clone(), |x, _| rk4(&x, h, |y| self.apply_adjoint(y)))
    }
}

fn rk4(x: &CMatrix, h: f64, f: impl Fn(&CMatrix) -> CMatrix) -> CMatrix {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * c(h / 2.0, 0.0)));
    let k3 = f(&(x + &k2 * c(h / 2.0, 0.0)));
    let k4 = f(&(x + &k3 * c(h, 0.0)));
    x + (k1 + (k2 + k3) * c(2.0, 0.0) + k4) * c(h / 6.0, 0.0)
}

/// Largest trace change tolerated in one step.
pub const TRACE_DRIFT_TOL: f64 = 1e-8;

/// One fixed-step RK4 application of the Lindblad equation, re-Hermitised.
pub fn lindblad_step(
    rho: &DensityMatrix,
    h: &CMatrix,
    jumps: &JumpSet,
    dt: f64,
) -> Result<DensityMatrix> {
    if h.nrows() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            found: h.nrows(),
        });
    }
    let generator = Generator::new(h, jumps);
    let out = hermitize(&generator.step(rho.matrix(), dt));
    let drift = (out.trace().re - 1.0).abs();
    if drift > TRACE_DRIFT_TOL {
        return Err(Error::TraceDrift(drift));
    }
    Ok(DensityMatrix::from_trusted(out))
}

/// Piecewise-constant drive amplitudes (rad/s), one per step of length `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSchedule {
    pub dt: f64,
    pub qubit_drive: Vec<Complex64>,
    pub cavity_drive: Vec<Complex64>,
}

impl PulseSchedule {
    pub fn new(dt: f64, qubit_drive: Vec<Complex64>, cavity_drive: Vec<Complex64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument("schedule dt must be positive".into()));
        }
        if qubit_drive.len() != cavity_drive.len() {
            return Err(Error::DimensionMismatch {
                expected: qubit_drive.len(),
                found: cavity_drive.len(),
            });
        }
        Ok(Self {
            dt,
            qubit_drive,
            cavity_drive,
        })
    }

    /// Constant drives over `duration`, split into equal steps no longer
    /// than `max_dt`.
    pub fn constant(duration: f64, max_dt: f64, eps_q: Complex64, eps_c: Complex64) -> Result<Self> {
        if !(duration > 0.0) || !(max_dt > 0.0) {
            return Err(Error::InvalidArgument("duration and step must be positive".into()));
        }
        let steps = (duration / max_dt).ceil().max(1.0) as usize;
        Self::new(duration / steps as f64, vec![eps_q; steps], vec![eps_c; steps])
    }

    pub fn idle(duration: f64, max_dt: f64) -> Result<Self> {
        Self::constant(duration, max_dt, ZERO, ZERO)
    }

    pub fn len(&self) -> usize {
        self.qubit_drive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qubit_drive.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Adjoint,
}

fn propagate(
    state: CMatrix,
    device: &DeviceParams,
    space: Space,
    cavity_dim: usize,
    schedules: &[&PulseSchedule],
    jumps: &JumpSet,
    direction: Direction,
) -> Result<CMatrix> {
    let mut steps: Vec<(f64, Complex64, Complex64)> = schedules
        .iter()
        .flat_map(|s| {
            s.qubit_drive
                .iter()
                .zip(&s.cavity_drive)
                .map(move |(&q, &cd)| (s.dt, q, cd))
        })
        .collect();
    if direction == Direction::Adjoint {
        steps.reverse();
    }
    let mut current: Option<((Complex64, Complex64), Generator)> = None;
    let mut x = state;
    for (dt, eq, ec) in steps {
        let rebuild = current.as_ref().is_none_or(|(drive, _)| *drive != (eq, ec));
        if rebuild {
            let h = hamiltonian(device, space, eq, ec, cavity_dim);
            current = Some(((eq, ec), Generator::new(&h, jumps)));
        }
        let generator = &current.as_ref().expect("generator built above").1;
        match direction {
            Direction::Forward => {
                let before = x.trace().re;
                x = hermitize(&generator.step(&x, dt));
                let drift = (x.trace().re - before).abs();
                if drift > TRACE_DRIFT_TOL {
                    return Err(Error::TraceDrift(drift));
                }
            }
            Direction::Adjoint => x = generator.step_adjoint(&x, dt),
        }
    }
    Ok(hermitize(&x))
}

fn joint_cavity_dim(rho: &DensityMatrix) -> Result<usize> {
    if rho.dim() % 2 != 0 || rho.dim() < 4 {
        return Err(Error::InvalidArgument(format!(
            "joint state dimension {} is not 2 x cavity",
            rho.dim()
        )));
    }
    Ok(rho.dim() / 2)
}

/// Evolve a joint state through a schedule. An empty schedule is the identity.
pub fn evolve(
    rho: &DensityMatrix,
    device: &DeviceParams,
    schedule: &PulseSchedule,
    jumps: &JumpSet,
) -> Result<DensityMatrix> {
    evolve_segments(rho, device, &[schedule], jumps)
}

pub fn evolve_segments(
    rho: &DensityMatrix,
    device: &DeviceParams,
    schedules: &[&PulseSchedule],
    jumps: &JumpSet,
) -> Result<DensityMatrix> {
    let n = joint_cavity_dim(rho)?;
    let out = propagate(
        rho.matrix().clone(),
        device,
        Space::Joint,
        n,
        schedules,
        jumps,
        Direction::Forward,
    )?;
    Ok(DensityMatrix::from_trusted(out))
}

/// Embed a cavity state with the qubit in `|g⟩`.
pub fn with_ground_qubit(rho_cavity: &DensityMatrix) -> DensityMatrix {
    let n = rho_cavity.dim();
    let mut m = CMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(rho_cavity.matrix());
    DensityMatrix::from_trusted(m)
}

/// `|e⟩⟨e| − |g⟩⟨g|` on the joint space, i.e. `−σ_z` with `σ_z|g⟩ = |g⟩`.
pub fn readout_observable(cavity_dim: usize) -> CMatrix {
    let n = cavity_dim;
    CMatrix::from_diagonal(&crate::linalg::CVector::from_fn(2 * n, |i, _| {
        if i < n {
            -ONE
        } else {
            ONE
        }
    }))
}

/// Qubit `⟨σ_z⟩` (`+1` for `|g⟩`) of a joint state.
pub fn qubit_sigma_z(rho: &DensityMatrix) -> f64 {
    -rho.expectation(&readout_observable(rho.dim() / 2))
}

/// Constant qubit drive `ε_q = −i·a` (a > 0) realising a `π/2` rotation about
/// `ŷ` on `|g, 0⟩` in `duration`, found by bisection on the final `⟨σ_z⟩`.
pub fn calibrate_pi2(device: &DeviceParams, duration: f64, cavity_dim: usize) -> Result<Complex64> {
    const MAX_ITERS: usize = 100;
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument("pulse duration must be positive".into()));
    }
    let dim = cavity_dim.max(2);
    let closed = device.without_decoherence();
    let start = with_ground_qubit(&DensityMatrix::fock(0, dim)?);
    let sigma_z = |amp: f64| -> Result<f64> {
        let sched = PulseSchedule::constant(duration, 0.5e-9, c(0.0, -amp), ZERO)?;
        let out = evolve(&start, &closed, &sched, &JumpSet::empty())?;
        Ok(qubit_sigma_z(&out))
    };
    let rabi = PI / (4.0 * duration);
    let (mut lo, mut hi) = (0.0, 2.0 * rabi);
    let (mut f_lo, f_hi) = (sigma_z(lo)?, sigma_z(hi)?);
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NoConvergence(0));
    }
    let mut best = (f64::INFINITY, rabi);
    for _ in 0..MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let f_mid = sigma_z(mid)?;
        if f_mid.abs() < best.0 {
            best = (f_mid.abs(), mid);
        }
        if f_mid.abs() < 1e-13 || (hi - lo) < 1e-15 * rabi {
            break;
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > 1e-6 {
        return Err(Error::NoConvergence(MAX_ITERS));
    }
    Ok(c(0.0, -best.1))
}

/// Timing and idealisation switches of the displacement + parity readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub pi2_duration: f64,
    pub wait: f64,
    pub displacement_duration: f64,
    pub pulse_dt: f64,
    pub wait_dt: f64,
    /// Instantaneous `π/2` rotations and an exact conditional-phase gate.
    pub instant_parity: bool,
    /// Apply `D(α)` as an exact operator instead of a cavity drive.
    pub ideal_displacement: bool,
    /// Include qubit decay, qubit dephasing and cavity decay.
    pub decoherence: bool,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self::hardware()
    }
}

impl SequenceConfig {
    /// 100 ns displacement, 64 ns `π/2` pulses around a 284 ns wait,
    /// decoherence on.
    pub fn hardware() -> Self {
        Self {
            pi2_duration: 64e-9,
            wait: 284e-9,
            displacement_duration: 100e-9,
            pulse_dt: 0.5e-9,
            wait_dt: 2e-9,
            instant_parity: false,
            ideal_displacement: false,
            decoherence: true,
        }
    }

    /// Perfect displacement and parity mapping.
    pub fn idealised() -> Self {
        Self {
            instant_parity: true,
            ideal_displacement: true,
            decoherence: false,
            ..Self::hardware()
        }
    }

    /// Use the analytic conditional-phase wait `π/χ` instead of 284 ns.
    pub fn with_dispersive_wait(self, device: &DeviceParams) -> Self {
        Self {
            wait: device.dispersive_half_period(),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pi2_duration", self.pi2_duration),
            ("wait", self.wait),
            ("displacement_duration", self.displacement_duration),
            ("pulse_dt", self.pulse_dt),
            ("wait_dt", self.wait_dt),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Fewest extra Fock levels kept above the reconstruction space.
pub const MIN_GUARD_LEVELS: usize = 4;
/// Population allowed to leak past the simulated cavity space.
pub const LEAKAGE_TOL: f64 = 1e-10;

/// Cavity dimension used to simulate the readout of `recon_dim`-level
/// states displaced by `alpha`.
pub fn simulation_cavity_dim(recon_dim: usize, alpha: Complex64, cfg: &SequenceConfig) -> usize {
    let padded = accurate_dim(recon_dim, alpha);
    if cfg.instant_parity {
        return padded;
    }
    let cols = Displacer::new(padded).columns(alpha, recon_dim);
    let mut n = recon_dim + MIN_GUARD_LEVELS;
    while n < padded {
        let tail = (0..recon_dim)
            .map(|j| (n..padded).map(|m| cols[(m, j)].norm_sqr()).sum::<f64>())
            .fold(0.0, f64::max);
        if tail < LEAKAGE_TOL {
            break;
        }
        n += 1;
    }
    n
}

/// `R_y(π/2) ⊗ I`.
fn instant_pi2(cavity_dim: usize) -> CMatrix {
    let n = cavity_dim;
    let s = c(FRAC_1_SQRT_2, 0.0);
    let mut r = CMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        r[(k, k)] = s;
        r[(n + k, n + k)] = s;
        r[(k, n + k)] = -s;
        r[(n + k, k)] = s;
    }
    r
}

/// `|g⟩⟨g| ⊗ I + |e⟩⟨e| ⊗ P`.
fn conditional_parity(cavity_dim: usize) -> CMatrix {
    let n = cavity_dim;
    let p = fock::parity(n);
    let mut m = CMatrix::identity(2 * n, 2 * n);
    m.view_mut((n, n), (n, n)).copy_from(&p);
    m
}

/// A calibrated displacement + Ramsey parity readout on one device.
#[derive(Debug)]
pub struct ParitySequence {
    device: DeviceParams,
    cfg: SequenceConfig,
    pi2_drive: Complex64,
    /// Back-propagated parity blocks keyed by cavity dimension; they do not
    /// depend on the displacement.
    parity_blocks: Mutex<HashMap<usize, CMatrix>>,
}

impl ParitySequence {
    pub fn new(device: &DeviceParams, cfg: &SequenceConfig) -> Result<Self> {
        device.validate()?;
        cfg.validate()?;
        let pi2_drive = if cfg.instant_parity {
            ZERO
        } else {
            calibrate_pi2(device, cfg.pi2_duration, 2)?
        };
        Ok(Self {
            device: *device,
            cfg: *cfg,
            pi2_drive,
            parity_blocks: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &SequenceConfig {
        &self.cfg
    }

    pub fn device(&self) -> &DeviceParams {
        &self.device
    }

    pub fn pi2_drive(&self) -> Complex64 {
        self.pi2_drive
    }

    /// Cavity drive `ε_c = −i α*/T` whose free evolution over `T` is `D(α)`.
    pub fn displacement_drive(&self, alpha: Complex64) -> Complex64 {
        c(0.0, -1.0) * alpha.conj() / self.cfg.displacement_duration
    }

    fn parity_schedules(&self) -> Result<[PulseSchedule; 3]> {
        let pulse = PulseSchedule::constant(self.cfg.pi2_duration, self.cfg.pulse_dt, self.pi2_drive, ZERO)?;
        let wait = PulseSchedule::idle(self.cfg.wait, self.cfg.wait_dt)?;
        Ok([pulse.clone(), wait, pulse])
    }

    fn displacement_schedule(&self, alpha: Complex64) -> Result<PulseSchedule> {
        PulseSchedule::constant(
            self.cfg.displacement_duration,
            self.cfg.pulse_dt,
            ZERO,
            self.displacement_drive(alpha),
        )
    }

    fn joint_jumps(&self, n: usize) -> JumpSet {
        if self.cfg.decoherence {
            build_jumps(&self.device, n)
        } else {
            JumpSet::empty()
        }
    }

    fn cavity_jumps(&self, n: usize) -> JumpSet {
        if self.cfg.decoherence {
            cavity_jumps(&self.device, n)
        } else {
            JumpSet::empty()
        }
    }

    fn exact_displacement(alpha: Complex64, n: usize) -> CMatrix {
        Displacer::new(accurate_dim(n, alpha)).columns(alpha, n).rows(0, n).into_owned()
    }

    /// `|g⟩⟨g|` block of the readout observable propagated back through the
    /// parity map.
    fn parity_block(&self, n: usize) -> Result<CMatrix> {
        if self.cfg.instant_parity {
            return Ok(fock::parity(n));
        }
        if let Some(block) = self.parity_blocks.lock().expect("cache lock").get(&n) {
            return Ok(block.clone());
        }
        let [p1, w, p2] = self.parity_schedules()?;
        let back = propagate(
            readout_observable(n),
            &self.device,
            Space::Joint,
            n,
            &[&p1, &w, &p2],
            &self.joint_jumps(n),
            Direction::Adjoint,
        )?;
        let block = back.view((0, 0), (n, n)).into_owned();
        self.parity_blocks.lock().expect("cache lock").insert(n, block.clone());
        Ok(block)
    }

    /// Forward simulation: `X = ⟨|e⟩⟨e| − |g⟩⟨g|⟩` after displacing
    /// `rho_cavity` by `alpha` and running the parity map.
    pub fn measure(&self, rho_cavity: &DensityMatrix, alpha: Complex64) -> Result<f64> {
        let d = rho_cavity.dim();
        let n = simulation_cavity_dim(d, alpha, &self.cfg);
        let rho = rho_cavity.embed(n)?;
        let displaced = if self.cfg.ideal_displacement {
            let u = Self::exact_displacement(alpha, n);
            DensityMatrix::from_trusted(hermitize(&(&u * rho.matrix() * u.adjoint())))
        } else {
            let sched = self.displacement_schedule(alpha)?;
            let out = propagate(
                rho.into_matrix(),
                &self.device,
                Space::Cavity,
                n,
                &[&sched],
                &self.cavity_jumps(n),
                Direction::Forward,
            )?;
            DensityMatrix::from_trusted(out)
        };
        let joint = with_ground_qubit(&displaced);
        let final_state = if self.cfg.instant_parity {
            let u = instant_pi2(n) * conditional_parity(n) * instant_pi2(n);
            DensityMatrix::from_trusted(hermitize(&(&u * joint.matrix() * u.adjoint())))
        } else {
            let [p1, w, p2] = self.parity_schedules()?;
            evolve_segments(&joint, &self.device, &[&p1, &w, &p2], &self.joint_jumps(n))?
        };
        Ok(final_state.expectation(&readout_observable(n)))
    }

    /// Heisenberg-picture readout: the `recon_dim × recon_dim` cavity
    /// operator `E` with `X = tr(E ρ)` for every state supported on the
    /// first `recon_dim` Fock levels.
    pub fn effective_observable(&self, recon_dim: usize, alpha: Complex64) -> Result<CMatrix> {
        if self.cfg.instant_parity && self.cfg.ideal_displacement {
            let working = accurate_dim(recon_dim, alpha);
            return Ok(hermitize(&Displacer::new(working).displaced_parity(alpha, recon_dim)));
        }
        let n = simulation_cavity_dim(recon_dim, alpha, &self.cfg);
        let ground_block = self.parity_block(n)?;
        let cavity_obs = if self.cfg.ideal_displacement {
            let u = Self::exact_displacement(alpha, n);
            u.adjoint() * ground_block * u
        } else {
            let sched = self.displacement_schedule(alpha)?;
            propagate(
                ground_block,
                &self.device,
                Space::Cavity,
                n,
                &[&sched],
                &self.cavity_jumps(n),
                Direction::Adjoint,
            )?
        };
        Ok(hermitize(&cavity_obs.view((0, 0), (recon_dim, recon_dim)).into_owned()))
    }
}

/// Forward simulation of one displacement + parity-map readout.
pub fn parity_map_sequence(
    rho_cavity: &DensityMatrix,
    device: &DeviceParams,
    alpha: Complex64,
    cfg: &SequenceConfig,
) -> Result<f64> {
    ParitySequence::new(device, cfg)?.measure(rho_cavity, alpha)
}

/// Assignment errors of the single-shot qubit readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutErrorModel {
    pub p_e_given_g: f64,
    pub p_g_given_e: f64,
}

impl Default for ReadoutErrorModel {
    /// Synthetic 2 % symmetric assignment error.
    fn default() -> Self {
        Self {
            p_e_given_g: 0.02,
            p_g_given_e: 0.02,
        }
    }
}

impl ReadoutErrorModel {
    pub fn ideal() -> Self {
        Self {
            p_e_given_g: 0.0,
            p_g_given_e: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_e_given_g", self.p_e_given_g), ("p_g_given_e", self.p_g_given_e)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Probability of reporting `e` when the true excited population is `p_e`.
    pub fn reported_excited(&self, p_e: f64) -> f64 {
        p_e * (1.0 - self.p_g_given_e) + (1.0 - p_e) * self.p_e_given_g
    }

    /// Infinite-shot estimate `2 p̃_e − 1`.
    pub fn expected_estimate(&self, x_true: f64) -> f64 {
        2.0 * self.reported_excited(excited_population(x_true)) - 1.0
    }
}

fn excited_population(x: f64) -> f64 {
    ((1.0 + x) / 2.0).clamp(0.0, 1.0)
}

/// One averaged observable. The estimate is `X = 2·(excited / shots) − 1`,
/// i.e. `−⟨σ_z⟩` with `σ_z|g⟩ = |g⟩`, uncorrected for readout errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub state_id: String,
    pub k: usize,
    pub alpha_re: f64,
    pub alpha_im: f64,
    pub shots: u64,
    #[serde(rename = "X")]
    pub x: f64,
    pub seed: u64,
}

impl MeasurementRecord {
    pub fn alpha(&self) -> Complex64 {
        c(self.alpha_re, self.alpha_im)
    }

    /// Number of shots reported as `e`.
    pub fn excited(&self) -> u64 {
        ((self.x + 1.0) / 2.0 * self.shots as f64).round() as u64
    }

    pub fn labelled(mut self, state_id: impl Into<String>, k: usize, alpha: Complex64) -> Self {
        self.state_id = state_id.into();
        self.k = k;
        self.alpha_re = alpha.re;
        self.alpha_im = alpha.im;
        self
    }
}

/// Binomial shot sampling of an observable through the readout error model.
pub fn sample_observable(
    x_true: f64,
    shots: u64,
    readout: &ReadoutErrorModel,
    seed: u64,
) -> Result<MeasurementRecord> {
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be positive".into()));
    }
    if !(x_true.abs() <= 1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!("observable {x_true} outside [-1, 1]")));
    }
    let p = readout.reported_excited(excited_population(x_true));
    let binomial = Binomial::new(shots, p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let excited: u64 = seed::rng(seed).sample(binomial);
    Ok(MeasurementRecord {
        state_id: String::new(),
        k: 0,
        alpha_re: 0.0,
        alpha_im: 0.0,
        shots,
        x: 2.0 * excited as f64 / shots as f64 - 1.0,
        seed,
    })
}

pub fn write_records(path: impl AsRef<Path>, records: &[MeasurementRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<MeasurementRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
