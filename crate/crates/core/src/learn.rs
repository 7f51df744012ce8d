//! Training data, ridge-regression learning of the observable map, map and
//! observable error metrics, and process-map extraction.

use std::f64::consts::FRAC_1_SQRT_2;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{map_from_observables, pseudoinverse, AffineMap, DisplacementSet, Provenance};
use crate::dynamics::{
    read_records, sample_observable, write_records, DeviceParams, Generator, JumpSet, MeasurementRecord,
    ParitySequence, ReadoutErrorModel, SequenceConfig,
};
use crate::error::{Error, Result};
use crate::fock::{self, fidelity, param_count, DensityMatrix, ParamVector, Parametrization};
use crate::linalg::{c, hermitize, CMatrix, CVector, RMatrix, RVector};
use crate::seed;

/// A known input state with a stable identifier.
#[derive(Debug, Clone)]
pub struct LabelledState {
    pub id: String,
    pub rho: DensityMatrix,
}

/// `D` Fock states followed by `(|l⟩ + e^{iΦ}|m⟩)/√2` for `l < m`
/// (row-major) with `Φ = 0` before `Φ = π/2`.
pub fn labelled_training_states(dim: usize) -> Result<Vec<LabelledState>> {
    if dim < 2 {
        return Err(Error::InvalidArgument("D must be at least 2".into()));
    }
    let mut out = Vec::with_capacity(dim * dim);
    for n in 0..dim {
        out.push(LabelledState {
            id: format!("fock_{n}"),
            rho: DensityMatrix::fock(n, dim)?,
        });
    }
    for (l, m) in fock::upper_pairs(dim) {
        for (tag, phase) in [("re", c(1.0, 0.0)), ("im", c(0.0, 1.0))] {
            let mut ket = CVector::zeros(dim);
            ket[l] = c(FRAC_1_SQRT_2, 0.0);
            ket[m] = phase * FRAC_1_SQRT_2;
            out.push(LabelledState {
                id: format!("sup_{l}_{m}_{tag}"),
                rho: DensityMatrix::from_ket(&ket)?,
            });
        }
    }
    Ok(out)
}

pub fn training_states(dim: usize) -> Result<Vec<DensityMatrix>> {
    Ok(labelled_training_states(dim)?.into_iter().map(|s| s.rho).collect())
}

/// The four kitten test states at amplitude `alpha`, truncated to `dim`.
pub fn kitten_states(alpha: Complex64, dim: usize) -> Result<Vec<LabelledState>> {
    fock::KittenVariant::ALL
        .iter()
        .map(|&v| {
            let ket_dim = fock::accurate_dim(dim, alpha);
            let rho = fock::kitten_state(alpha, v, ket_dim)?.project(dim)?;
            Ok(LabelledState {
                id: v.name().to_string(),
                rho,
            })
        })
        .collect()
}

/// Idle window over which preparation imperfection is modelled, at unit strength.
pub const DEGRADE_WINDOW: f64 = 2e-6;
/// Strength giving a mean training-set fidelity of 0.97 at D = 6 with the
/// default device; see [`calibrate_degrade_strength`].
pub const DEFAULT_DEGRADE_STRENGTH: f64 = 6.69;

/// Stand-in for imperfect state preparation: the cavity idles for
/// `strength × 2 µs` under the device dissipators with the qubit in `|g⟩`,
/// where only cavity decay acts.
pub fn degrade_state(rho: &DensityMatrix, device: &DeviceParams, strength: f64) -> Result<DensityMatrix> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::InvalidArgument("strength must be non-negative".into()));
    }
    if strength == 0.0 || device.t_c1.is_infinite() {
        return Ok(rho.clone());
    }
    let d = rho.dim();
    let jumps = JumpSet {
        ops: vec![fock::annihilation(d).scale(device.t_c1.recip().sqrt())],
    };
    let generator = Generator::new(&CMatrix::zeros(d, d), &jumps);
    let duration = strength * DEGRADE_WINDOW;
    let steps = (duration / 100e-9).ceil().max(1.0) as usize;
    let dt = duration / steps as f64;
    let mut m = rho.matrix().clone();
    for _ in 0..steps {
        m = hermitize(&generator.step(&m, dt));
    }
    DensityMatrix::new(m)
}

/// Mean fidelity between the training states and their degraded versions.
pub fn mean_degraded_fidelity(dim: usize, device: &DeviceParams, strength: f64) -> Result<f64> {
    let states = training_states(dim)?;
    let mut total = 0.0;
    for rho in &states {
        total += fidelity(rho, &degrade_state(rho, device, strength)?)?;
    }
    Ok(total / states.len() as f64)
}

/// Bisection for the strength giving `target` mean training-set fidelity.
pub fn calibrate_degrade_strength(dim: usize, device: &DeviceParams, target: f64) -> Result<f64> {
    if !(0.0 < target && target < 1.0) {
        return Err(Error::InvalidArgument("target fidelity must lie in (0, 1)".into()));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while mean_degraded_fidelity(dim, device, hi)? > target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NoConvergence(0));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_degraded_fidelity(dim, device, mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Simulated measurement chain: one effective cavity observable per
/// displacement plus the single-shot readout model.
#[derive(Debug, Clone)]
pub struct Apparatus {
    dim: usize,
    alphas: Vec<Complex64>,
    observables: Vec<CMatrix>,
    readout: ReadoutErrorModel,
}

impl Apparatus {
    pub fn new(
        alphas: &DisplacementSet,
        device: &DeviceParams,
        sequence: &SequenceConfig,
        readout: &ReadoutErrorModel,
    ) -> Result<Self> {
        readout.validate()?;
        let seq = ParitySequence::new(device, sequence)?;
        let observables = alphas
            .alphas()
            .par_iter()
            .map(|&a| seq.effective_observable(alphas.dim(), a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: alphas.dim(),
            alphas: alphas.alphas().to_vec(),
            observables,
            readout: *readout,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alphas(&self) -> &[Complex64] {
        &self.alphas
    }

    pub fn observables(&self) -> &[CMatrix] {
        &self.observables
    }

    pub fn readout(&self) -> &ReadoutErrorModel {
        &self.readout
    }

    /// Noiseless observables `tr(E_k ρ)` before readout errors.
    pub fn ideal_readout_values(&self, rho: &DensityMatrix) -> Result<RVector> {
        if rho.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: rho.dim(),
            });
        }
        Ok(RVector::from_iterator(
            self.observables.len(),
            self.observables.iter().map(|e| rho.expectation(e)),
        ))
    }

    /// Infinite-shot estimates including readout errors.
    pub fn expectation(&self, rho: &DensityMatrix) -> Result<RVector> {
        Ok(self.ideal_readout_values(rho)?.map(|x| self.readout.expected_estimate(x)))
    }

    /// One shot-sampled record per displacement, seeded by `(seed, k)`.
    pub fn sample(&self, state_id: &str, rho: &DensityMatrix, shots: u64, seed: u64) -> Result<Vec<MeasurementRecord>> {
        let x = self.ideal_readout_values(rho)?;
        x.iter()
            .enumerate()
            .map(|(k, &xk)| {
                let s = seed::derive(seed, &[k as u64]);
                Ok(sample_observable(xk.clamp(-1.0, 1.0), shots, &self.readout, s)?.labelled(
                    state_id,
                    k,
                    self.alphas[k],
                ))
            })
            .collect()
    }

    /// The exact affine map realised by this apparatus.
    pub fn map(&self, provenance: Provenance) -> Result<AffineMap> {
        let param = Parametrization::new(self.dim)?;
        let raw = map_from_observables(&self.observables, &param, provenance)?;
        let gain = 1.0 - self.readout.p_e_given_g - self.readout.p_g_given_e;
        let shift = self.readout.p_e_given_g - self.readout.p_g_given_e;
        AffineMap::new(
            self.dim,
            raw.v().map(|v| gain * v + shift),
            raw.m().scale(gain),
            provenance,
        )
    }
}

/// How observables are generated during acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub sequence: SequenceConfig,
    pub readout: ReadoutErrorModel,
    /// Shots per observable; `None` uses infinite-shot expectations.
    pub shots: Option<u64>,
    /// Preparation-imperfection strength, 0 for perfect preparation.
    pub degrade_strength: f64,
    pub seed: u64,
}

impl AcquisitionConfig {
    /// Instantaneous ideal operations, no noise of any kind.
    pub fn ideal() -> Self {
        Self {
            sequence: SequenceConfig::idealised(),
            readout: ReadoutErrorModel::ideal(),
            shots: None,
            degrade_strength: 0.0,
            seed: 0,
        }
    }

    /// Finite pulses with decoherence, 2 % readout error, 1000 shots and
    /// degraded preparation.
    pub fn hardware(seed: u64) -> Self {
        Self {
            sequence: SequenceConfig::hardware(),
            readout: ReadoutErrorModel::default(),
            shots: Some(1000),
            degrade_strength: DEFAULT_DEGRADE_STRENGTH,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingEntry {
    pub id: String,
    pub y: ParamVector,
    pub x: RVector,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub dim: usize,
    pub alphas: Vec<Complex64>,
    pub entries: Vec<TrainingEntry>,
    /// Raw records behind `entries`; shots = 0 marks infinite-shot values.
    pub records: Vec<MeasurementRecord>,
    pub note: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainingSidecar {
    #[serde(rename = "D")]
    dim: usize,
    alphas: Vec<[f64; 2]>,
    state_ids: Vec<String>,
    #[serde(rename = "Y")]
    y: Vec<Vec<f64>>,
    note: String,
    seed: u64,
}

impl TrainingSet {
    pub fn new(dim: usize, entries: Vec<TrainingEntry>) -> Result<Self> {
        let p = param_count(dim);
        for e in &entries {
            if e.y.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: e.y.dim(),
                });
            }
            if e.x.iter().any(|x| !(x.abs() <= 1.0 + 1e-9)) {
                return Err(Error::InvalidArgument(format!("observable of {} outside [-1, 1]", e.id)));
            }
        }
        let n_obs = entries.first().map_or(p, |e| e.x.len());
        if entries.iter().any(|e| e.x.len() != n_obs) {
            return Err(Error::InvalidArgument("entries have differing observable counts".into()));
        }
        Ok(Self {
            dim,
            alphas: Vec::new(),
            entries,
            records: Vec::new(),
            note: String::new(),
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_obs(&self) -> usize {
        self.entries.first().map_or(0, |e| e.x.len())
    }

    /// Columns `[1; Y_n]`.
    pub fn inputs(&self) -> RMatrix {
        let p = param_count(self.dim) + 1;
        let mut m = RMatrix::zeros(p, self.len());
        for (n, e) in self.entries.iter().enumerate() {
            m.set_column(n, &e.y.augmented());
        }
        m
    }

    /// Columns `X_n`.
    pub fn outputs(&self) -> RMatrix {
        let mut m = RMatrix::zeros(self.n_obs(), self.len());
        for (n, e) in self.entries.iter().enumerate() {
            m.set_column(n, &e.x);
        }
        m
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
            records: Vec::new(),
            ..self.clone()
        }
    }

    /// Write `<stem>.csv` (one row per state and displacement) and
    /// `<stem>.json` (ordering, parameters, seed, note).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let stem = stem.as_ref();
        let csv_path = stem.with_extension("csv");
        let json_path = stem.with_extension("json");
        write_records(&csv_path, &self.records)?;
        let sidecar = TrainingSidecar {
            dim: self.dim,
            alphas: self.alphas.iter().map(|a| [a.re, a.im]).collect(),
            state_ids: self.entries.iter().map(|e| e.id.clone()).collect(),
            y: self.entries.iter().map(|e| e.y.values().iter().copied().collect()).collect(),
            note: self.note.clone(),
            seed: self.seed,
        };
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok((csv_path, json_path))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let sidecar: TrainingSidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let records = read_records(stem.with_extension("csv"))?;
        let n_obs = sidecar.alphas.len();
        let mut entries = Vec::with_capacity(sidecar.state_ids.len());
        for (id, y) in sidecar.state_ids.iter().zip(&sidecar.y) {
            let mut x = RVector::from_element(n_obs, f64::NAN);
            for r in records.iter().filter(|r| &r.state_id == id) {
                if r.k >= n_obs {
                    return Err(Error::InvalidArgument(format!("record index {} out of range", r.k)));
                }
                x[r.k] = r.x;
            }
            if x.iter().any(|v| v.is_nan()) {
                return Err(Error::InvalidArgument(format!("missing observables for {id}")));
            }
            entries.push(TrainingEntry {
                id: id.clone(),
                y: ParamVector::new(sidecar.dim, RVector::from_vec(y.clone()))?,
                x,
            });
        }
        let mut ts = Self::new(sidecar.dim, entries)?;
        ts.alphas = sidecar.alphas.iter().map(|a| c(a[0], a[1])).collect();
        ts.records = records;
        ts.note = sidecar.note;
        ts.seed = sidecar.seed;
        Ok(ts)
    }
}

/// Measure labelled states through an apparatus. `Y` is taken from the
/// (possibly degraded) prepared state.
pub fn measure_states(
    apparatus: &Apparatus,
    states: &[LabelledState],
    device: &DeviceParams,
    cfg: &AcquisitionConfig,
) -> Result<TrainingSet> {
    let mut entries = Vec::with_capacity(states.len());
    let mut records = Vec::new();
    for (n, s) in states.iter().enumerate() {
        let prepared = degrade_state(&s.rho, device, cfg.degrade_strength)?;
        let (x, recs) = match cfg.shots {
            Some(shots) => {
                let recs = apparatus.sample(&s.id, &prepared, shots, seed::derive(cfg.seed, &[n as u64]))?;
                (RVector::from_iterator(recs.len(), recs.iter().map(|r| r.x)), recs)
            }
            None => {
                let x = apparatus.expectation(&prepared)?;
                let recs = x
                    .iter()
                    .enumerate()
                    .map(|(k, &xk)| MeasurementRecord {
                        state_id: s.id.clone(),
                        k,
                        alpha_re: apparatus.alphas()[k].re,
                        alpha_im: apparatus.alphas()[k].im,
                        shots: 0,
                        x: xk,
                        seed: cfg.seed,
                    })
                    .collect();
                (x, recs)
            }
        };
        records.extend(recs);
        entries.push(TrainingEntry {
            id: s.id.clone(),
            y: ParamVector::of_state(&prepared)?,
            x,
        });
    }
    let mut ts = TrainingSet::new(apparatus.dim(), entries)?;
    ts.alphas = apparatus.alphas().to_vec();
    ts.records = records;
    ts.seed = cfg.seed;
    ts.note = if cfg.sequence.decoherence || cfg.shots.is_some() || cfg.degrade_strength > 0.0 {
        "simulated-noisy".into()
    } else {
        "ideal".into()
    };
    Ok(ts)
}

/// Build the apparatus and measure the `D²` training states.
pub fn acquire_training_set(
    alphas: &DisplacementSet,
    device: &DeviceParams,
    cfg: &AcquisitionConfig,
) -> Result<TrainingSet> {
    let apparatus = Apparatus::new(alphas, device, &cfg.sequence, &cfg.readout)?;
    measure_states(&apparatus, &labelled_training_states(alphas.dim())?, device, cfg)
}

/// Ratio below which the ridge normal matrix is treated as singular.
const RIDGE_RCOND: f64 = 1e-13;

/// `B = X Aᵀ (A Aᵀ + ν I)⁻¹` for inputs `A` (columns) and outputs `X`.
pub fn ridge_solve(inputs: &RMatrix, outputs: &RMatrix, nu: f64) -> Result<RMatrix> {
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::InvalidArgument("ν must be non-negative".into()));
    }
    if inputs.ncols() != outputs.ncols() {
        return Err(Error::DimensionMismatch {
            expected: inputs.ncols(),
            found: outputs.ncols(),
        });
    }
    let p = inputs.nrows();
    if nu == 0.0 && inputs.ncols() < p {
        return Err(Error::Singular(format!(
            "{} samples cannot determine {} coefficients per observable",
            inputs.ncols(),
            p
        )));
    }
    let mut normal = inputs * inputs.transpose();
    for i in 0..p {
        normal[(i, i)] += nu;
    }
    let eig = normal.clone().symmetric_eigen();
    let (min, max) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(min > RIDGE_RCOND * max) {
        return Err(Error::Singular(format!("normal matrix eigenvalue ratio {:e}", min / max)));
    }
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Singular("normal matrix is not positive definite".into()))?;
    // Bᵀ = (A Aᵀ + ν I)⁻¹ A Xᵀ
    Ok(chol.solve(&(inputs * outputs.transpose())).transpose())
}

/// Ridge estimate `β_L = 𝓧𝓨ᵀ(𝓨𝓨ᵀ + νI)⁻¹`.
pub fn ridge_fit(ts: &TrainingSet, nu: f64) -> Result<AffineMap> {
    let beta = ridge_solve(&ts.inputs(), &ts.outputs(), nu)?;
    AffineMap::from_beta(ts.dim, &beta, Provenance::Learnt)
}

pub const DEFAULT_NU_GRID: [f64; 5] = [0.0, 1e-8, 1e-6, 1e-4, 1e-2];
pub const DEFAULT_FOLDS: usize = 4;

/// Cross-validated observable MSE for one ν; `+∞` if any fold is singular.
pub fn cv_score(ts: &TrainingSet, nu: f64, folds: usize, seed: u64) -> f64 {
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    let folds = folds.clamp(2, ts.len().max(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..folds {
        let held: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
        let kept: Vec<usize> = order.iter().copied().filter(|i| !held.contains(i)).collect();
        if held.is_empty() {
            continue;
        }
        let Ok(map) = ridge_fit(&ts.subset(&kept), nu) else {
            return f64::INFINITY;
        };
        for &i in &held {
            let e = &ts.entries[i];
            match map.predict(&e.y) {
                Ok(pred) => {
                    total += (&e.x - pred).norm_squared();
                    count += e.x.len();
                }
                Err(_) => return f64::INFINITY,
            }
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

/// ν minimising the k-fold cross-validated observable MSE; ties and
/// all-singular grids go to the smaller value.
pub fn select_nu(ts: &TrainingSet, grid: &[f64], folds: usize, seed: u64) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("ν grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::INFINITY, sorted[0]);
    for &nu in &sorted {
        let score = cv_score(ts, nu, folds, seed);
        log::debug!("ν = {nu:e}: CV MSE {score:e}");
        if score < best.0 {
            best = (score, nu);
        }
    }
    Ok(best.1)
}

/// How the regularisation strength is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NuPolicy {
    Fixed(f64),
    CrossValidated { grid: Vec<f64>, folds: usize },
}

impl Default for NuPolicy {
    fn default() -> Self {
        NuPolicy::CrossValidated {
            grid: DEFAULT_NU_GRID.to_vec(),
            folds: DEFAULT_FOLDS,
        }
    }
}

impl NuPolicy {
    pub fn choose(&self, ts: &TrainingSet, seed: u64) -> Result<f64> {
        match self {
            NuPolicy::Fixed(nu) => Ok(*nu),
            NuPolicy::CrossValidated { grid, folds } => select_nu(ts, grid, *folds, seed),
        }
    }
}

fn check_same_shape(a: &AffineMap, b: &AffineMap) -> Result<()> {
    if a.dim() != b.dim() || a.n_obs() != b.n_obs() {
        return Err(Error::DimensionMismatch {
            expected: a.n_obs(),
            found: b.n_obs(),
        });
    }
    Ok(())
}

/// Mean of `(β_a − β_b)²` over all elements of `[V, M]`.
pub fn map_mse(a: &AffineMap, b: &AffineMap) -> Result<f64> {
    check_same_shape(a, b)?;
    let diff = a.beta() - b.beta();
    Ok(diff.norm_squared() / diff.len() as f64)
}

/// Per-observable squared errors `(X − β[1;Y])_j²`.
pub fn observable_square_errors(x: &RVector, beta: &AffineMap, y: &ParamVector) -> Result<RVector> {
    let pred = beta.predict(y)?;
    if pred.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            found: x.len(),
        });
    }
    Ok((x - pred).map(|d| d * d))
}

pub fn observable_mse(x: &RVector, beta: &AffineMap, y: &ParamVector) -> Result<f64> {
    Ok(observable_square_errors(x, beta, y)?.mean())
}

/// Relative errors applied to the device parameters of the simulated map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// `χ_cq → χ_cq (1 + chi_rel)`; sign included.
    pub chi_rel: f64,
    /// `χ_cc, χ′ → (1 + higher_order_rel) ×`; sign included.
    pub higher_order_rel: f64,
}

impl Perturbation {
    pub const NONE: Self = Self {
        chi_rel: 0.0,
        higher_order_rel: 0.0,
    };

    /// The four sign combinations of `(±chi, ±higher_order)`.
    pub fn sign_combinations(chi: f64, higher_order: f64) -> [Self; 4] {
        [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].map(|(a, b)| Self {
            chi_rel: a * chi,
            higher_order_rel: b * higher_order,
        })
    }

    pub fn apply(&self, device: &DeviceParams) -> DeviceParams {
        DeviceParams {
            chi_cq: device.chi_cq * (1.0 + self.chi_rel),
            chi_cc: device.chi_cc * (1.0 + self.higher_order_rel),
            chi_cq_prime: device.chi_cq_prime * (1.0 + self.higher_order_rel),
            ..*device
        }
    }
}

/// Map learnt from noiseless simulated data of a device model whose
/// parameters are perturbed by `perturbation`.
pub fn simulated_map(
    alphas: &DisplacementSet,
    device: &DeviceParams,
    perturbation: &Perturbation,
    sequence: &SequenceConfig,
    nu: &NuPolicy,
    seed: u64,
) -> Result<AffineMap> {
    let model = perturbation.apply(device);
    let cfg = AcquisitionConfig {
        sequence: *sequence,
        readout: ReadoutErrorModel::ideal(),
        shots: None,
        degrade_strength: 0.0,
        seed,
    };
    let ts = acquire_training_set(alphas, &model, &cfg)?;
    let nu = nu.choose(&ts, seed)?;
    Ok(ridge_fit(&ts, nu)?.with_provenance(Provenance::Simulated))
}

/// Observable map in terms of `vec(ρ)`: `X = Re(𝓜′ vec(ρ) + offset)`.
#[derive(Debug, Clone)]
pub struct ProcessMap {
    pub matrix: CMatrix,
    pub offset: CVector,
}

impl ProcessMap {
    pub fn predict(&self, rho: &DensityMatrix) -> Result<RVector> {
        let v = crate::linalg::vec_row_major(rho.matrix());
        if v.len() != self.matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.matrix.ncols(),
                found: v.len(),
            });
        }
        Ok((&self.matrix * v + &self.offset).map(|z| z.re))
    }
}

/// `𝓜′ = M K⁺` with `K⁺ = (K†K)⁻¹K†`, and the offset `V − 𝓜′C` that makes
/// `𝓜′ vec(ρ) + offset = V + M Y` for every density matrix.
pub fn process_map(beta: &AffineMap, param: &Parametrization) -> Result<ProcessMap> {
    if param.dim() != beta.dim() {
        return Err(Error::DimensionMismatch {
            expected: beta.dim(),
            found: param.dim(),
        });
    }
    let m = beta.m().map(|x| c(x, 0.0));
    let matrix = m * param.k_pseudoinverse();
    let offset = beta.v().map(|x| c(x, 0.0)) - &matrix * param.c();
    Ok(ProcessMap { matrix, offset })
}

/// Affine dynamics `Y_t = Φ Y + Q` recovered through a known observable map.
#[derive(Debug, Clone)]
pub struct DynamicsMap {
    pub phi: RMatrix,
    pub q: RVector,
}

impl DynamicsMap {
    pub fn apply(&self, y: &ParamVector) -> Result<ParamVector> {
        ParamVector::new(y.dim(), &self.phi * y.values() + &self.q)
    }
}

/// Fit `X_t = R + Γ Y` by ridge regression, then `Φ = M⁺Γ`, `Q = M⁺(R − V)`.
pub fn learn_dynamics_map(
    known: &AffineMap,
    pairs: &[(ParamVector, RVector)],
    nu: f64,
) -> Result<DynamicsMap> {
    let d = known.dim();
    let p = param_count(d);
    let mut inputs = RMatrix::zeros(p + 1, pairs.len());
    let mut outputs = RMatrix::zeros(known.n_obs(), pairs.len());
    for (n, (y, x)) in pairs.iter().enumerate() {
        if y.dim() != d || x.len() != known.n_obs() {
            return Err(Error::DimensionMismatch {
                expected: known.n_obs(),
                found: x.len(),
            });
        }
        inputs.set_column(n, &y.augmented());
        outputs.set_column(n, x);
    }
    let fit = ridge_solve(&inputs, &outputs, nu)?;
    let r = fit.column(0).into_owned();
    let gamma = fit.columns(1, p).into_owned();
    let m_plus = pseudoinverse(known.m())?;
    Ok(DynamicsMap {
        phi: &m_plus * gamma,
        q: m_plus * (r - known.v()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::build_idealised_map;
    use crate::fock::ginibre_state;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn optimised_like_set(dim: usize, seed: u64) -> DisplacementSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let set = DisplacementSet::random(dim, &mut rng).unwrap();
            let m = build_idealised_map(&set, None).unwrap();
            if crate::design::condition_number(m.m()) < 1e3 {
                return set;
            }
        }
    }

    fn planted(dim: usize, n: usize, beta: &RMatrix, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|i| {
                let y = ParamVector::of_state(&ginibre_state(dim, &mut rng)).unwrap();
                let x = beta * y.augmented();
                TrainingEntry {
                    id: format!("s{i}"),
                    y,
                    x,
                }
            })
            .collect();
        TrainingSet::new(dim, entries).unwrap()
    }

    fn small_beta(rows: usize, cols: usize, seed: u64) -> RMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RMatrix::from_fn(rows, cols, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn training_state_family() {
        let two = training_states(2).unwrap();
        assert_eq!(two.len(), 4);
        let h = c(FRAC_1_SQRT_2, 0.0);
        let expect_plus = CVector::from_vec(vec![h, h]);
        let expect_i = CVector::from_vec(vec![h, c(0.0, FRAC_1_SQRT_2)]);
        for (rho, ket) in [(&two[2], expect_plus), (&two[3], expect_i)] {
            let target = DensityMatrix::from_ket(&ket).unwrap();
            assert!((rho.matrix() - target.matrix()).norm() < 1e-15);
        }
        assert_eq!(training_states(3).unwrap().len(), 9);
        for rho in training_states(5).unwrap() {
            assert!((rho.purity() - 1.0).abs() < 1e-12);
        }
        let ids: Vec<String> = labelled_training_states(3).unwrap().into_iter().map(|s| s.id).collect();
        assert_eq!(&ids[3..5], ["sup_0_1_re", "sup_0_1_im"]);
    }

    #[test]
    fn degradation_properties() {
        let dev = DeviceParams::default();
        let rho = training_states(3).unwrap().remove(5);
        assert_eq!(degrade_state(&rho, &dev, 0.0).unwrap(), rho);
        let worse = degrade_state(&rho, &dev, 1.0).unwrap();
        assert!(worse.purity() < rho.purity());
        assert!((worse.matrix().trace().re - 1.0).abs() < 1e-12);
        // amplitude damping oracle: ⟨n⟩ decays as e^{−t/T}
        let fock2 = DensityMatrix::fock(2, 4).unwrap();
        let out = degrade_state(&fock2, &dev, 5.0).unwrap();
        let n = out.expectation(&fock::number(4));
        assert!((n - 2.0 * (-10e-6f64 / 1e-3).exp()).abs() < 1e-10);
        let f = mean_degraded_fidelity(6, &dev, DEFAULT_DEGRADE_STRENGTH).unwrap();
        assert!((0.95..=0.99).contains(&f), "mean fidelity {f}");
    }

    #[test]
    fn default_strength_matches_calibration() {
        let s = calibrate_degrade_strength(6, &DeviceParams::default(), 0.97).unwrap();
        assert!((s - DEFAULT_DEGRADE_STRENGTH).abs() < 0.05, "calibrated {s}");
    }

    #[test]
    fn ideal_acquisition_matches_idealised_map() {
        let set = optimised_like_set(3, 1);
        let beta_i = build_idealised_map(&set, None).unwrap();
        let ts = acquire_training_set(&set, &DeviceParams::default(), &AcquisitionConfig::ideal()).unwrap();
        assert_eq!(ts.len(), 9);
        for e in &ts.entries {
            assert!((beta_i.predict(&e.y).unwrap() - &e.x).amax() < 1e-9);
        }
        let beta_l = ridge_fit(&ts, 0.0).unwrap();
        assert!(map_mse(&beta_i, &beta_l).unwrap() < 1e-10);
    }

    #[test]
    fn acquisition_counts_and_determinism() {
        let set = optimised_like_set(2, 2);
        let cfg = AcquisitionConfig {
            shots: Some(500),
            readout: ReadoutErrorModel::default(),
            seed: 17,
            ..AcquisitionConfig::ideal()
        };
        let dev = DeviceParams::default();
        let a = acquire_training_set(&set, &dev, &cfg).unwrap();
        let b = acquire_training_set(&set, &dev, &cfg).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a.n_obs(), 3);
        assert_eq!(a.records.len(), 12);
        assert_eq!(a.entries, b.entries);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn training_set_persistence() {
        let set = optimised_like_set(2, 3);
        let cfg = AcquisitionConfig {
            shots: Some(100),
            seed: 5,
            ..AcquisitionConfig::ideal()
        };
        let ts = acquire_training_set(&set, &DeviceParams::default(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, _) = ts.save(dir.path().join("train")).unwrap();
        assert_eq!(std::fs::read_to_string(csv_path).unwrap().lines().count(), 13);
        let back = TrainingSet::load(dir.path().join("train")).unwrap();
        assert_eq!(back.entries, ts.entries);
        assert_eq!(back.alphas, ts.alphas);
    }

    #[test]
    fn ridge_plant_and_recover() {
        let beta = small_beta(8, 9, 4);
        let ts = planted(3, 30, &beta, 5);
        let fit = ridge_fit(&ts, 0.0).unwrap();
        assert!((fit.beta() - &beta).amax() < 1e-8);
        for e in &ts.entries {
            assert!((fit.predict(&e.y).unwrap() - &e.x).amax() < 1e-9);
        }
        let shrunk = ridge_fit(&ts, 1e12).unwrap();
        assert!(shrunk.beta().amax() < 1e-9);
    }

    #[test]
    fn ridge_rank_law() {
        let beta = small_beta(3, 4, 6);
        let short = planted(2, 3, &beta, 7);
        assert!(matches!(ridge_fit(&short, 0.0), Err(Error::Singular(_))));
        assert!(ridge_fit(&short, 1e-3).is_ok());
        let exact = planted(2, 4, &beta, 8);
        assert!(ridge_fit(&exact, 0.0).is_ok());
    }

    #[test]
    fn nu_selection() {
        let beta = small_beta(3, 4, 9);
        let ts = planted(2, 40, &beta, 10);
        assert_eq!(select_nu(&ts, &DEFAULT_NU_GRID, 4, 1).unwrap(), 0.0);
        assert_eq!(select_nu(&ts, &[0.5], 4, 1).unwrap(), 0.5);
        let mut noisy = ts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for e in &mut noisy.entries {
            e.x += RVector::from_fn(3, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
        }
        let a = select_nu(&noisy, &DEFAULT_NU_GRID, 4, 3).unwrap();
        let b = select_nu(&noisy, &DEFAULT_NU_GRID, 4, 3).unwrap();
        assert_eq!(a, b);
        assert!(select_nu(&ts, &[], 4, 1).is_err());
    }

    #[test]
    fn error_metrics() {
        let set = optimised_like_set(2, 12);
        let a = build_idealised_map(&set, None).unwrap();
        assert_eq!(map_mse(&a, &a).unwrap(), 0.0);
        let mut beta = a.beta();
        beta[(1, 2)] += 1.0;
        let b = AffineMap::from_beta(2, &beta, Provenance::Learnt).unwrap();
        assert!((map_mse(&a, &b).unwrap() - 1.0 / 12.0).abs() < 1e-15);
        let eps = 0.03;
        let shifted = AffineMap::from_beta(2, &a.beta().add_scalar(eps), Provenance::Learnt).unwrap();
        assert!((map_mse(&a, &shifted).unwrap() - eps * eps).abs() < 1e-15);

        let y = ParamVector::of_state(&DensityMatrix::fock(1, 2).unwrap()).unwrap();
        let x = a.predict(&y).unwrap();
        assert_eq!(observable_mse(&x, &a, &y).unwrap(), 0.0);
        let mut off = x.clone();
        off[0] += 0.2;
        assert!((observable_mse(&off, &a, &y).unwrap() - 0.04 / 3.0).abs() < 1e-15);
        let per = observable_square_errors(&off, &a, &y).unwrap();
        assert!((per.sum() - 3.0 * observable_mse(&off, &a, &y).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn perturbations_scale_couplings() {
        let dev = DeviceParams::default();
        let p = Perturbation {
            chi_rel: 0.02,
            higher_order_rel: -0.5,
        }
        .apply(&dev);
        assert!((p.chi_cq - 1.423e6 * 1.02).abs() < 1e-6);
        assert!((p.chi_cq_prime - 8e3).abs() < 1e-9);
        assert!((p.chi_cc - 3e3).abs() < 1e-9);
        let combos = Perturbation::sign_combinations(0.02, 0.5);
        assert_eq!(combos.len(), 4);
        assert!((combos[3].apply(&dev).chi_cq_prime - 8e3).abs() < 1e-9);
        assert!((combos[0].apply(&dev).chi_cq_prime - 24e3).abs() < 1e-9);
    }

    #[test]
    fn unperturbed_simulated_map_equals_noiseless_learnt_map() {
        let set = optimised_like_set(2, 13);
        let dev = DeviceParams::default();
        let seq = SequenceConfig {
            pulse_dt: 1e-9,
            wait_dt: 4e-9,
            ..SequenceConfig::hardware()
        };
        let nu = NuPolicy::Fixed(0.0);
        let sim = simulated_map(&set, &dev, &Perturbation::NONE, &seq, &nu, 1).unwrap();
        let cfg = AcquisitionConfig {
            sequence: seq,
            ..AcquisitionConfig::ideal()
        };
        let ts = acquire_training_set(&set, &dev, &cfg).unwrap();
        let learnt = ridge_fit(&ts, 0.0).unwrap();
        assert!((sim.beta() - learnt.beta()).amax() < 1e-8);
        assert_eq!(sim.provenance, Provenance::Simulated);
        let exact = Apparatus::new(&set, &dev, &seq, &ReadoutErrorModel::ideal())
            .unwrap()
            .map(Provenance::Simulated)
            .unwrap();
        assert!((sim.beta() - exact.beta()).amax() < 1e-8);
    }

    #[test]
    fn apparatus_map_includes_readout_errors() {
        let set = optimised_like_set(2, 14);
        let dev = DeviceParams::default();
        let ro = ReadoutErrorModel {
            p_e_given_g: 0.03,
            p_g_given_e: 0.01,
        };
        let app = Apparatus::new(&set, &dev, &SequenceConfig::idealised(), &ro).unwrap();
        let map = app.map(Provenance::Simulated).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..5 {
            let rho = ginibre_state(2, &mut rng);
            let y = ParamVector::of_state(&rho).unwrap();
            assert!((map.predict(&y).unwrap() - app.expectation(&rho).unwrap()).amax() < 1e-12);
        }
    }

    #[test]
    fn process_map_reproduces_observables() {
        let set = optimised_like_set(3, 16);
        let beta = build_idealised_map(&set, None).unwrap();
        let param = Parametrization::new(3).unwrap();
        let pm = process_map(&beta, &param).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let states: Vec<DensityMatrix> = (0..20).map(|_| ginibre_state(3, &mut rng)).collect();
        for rho in &states {
            let y = ParamVector::of_state(rho).unwrap();
            assert!((pm.predict(rho).unwrap() - beta.predict(&y).unwrap()).amax() < 1e-8);
        }
        // mixed input against explicit Fock parities for a zero displacement
        let mut alphas = set.alphas().to_vec();
        alphas[0] = c(0.0, 0.0);
        let zero_set = DisplacementSet::new(3, alphas).unwrap();
        let pm0 = process_map(&build_idealised_map(&zero_set, None).unwrap(), &param).unwrap();
        let mixed = pm0.predict(&DensityMatrix::maximally_mixed(3)).unwrap()[0];
        assert!((mixed - (1.0 - 1.0 + 1.0) / 3.0).abs() < 1e-12);
        // linearity in vec(ρ) for the homogeneous part
        let (a, b) = (&states[0], &states[1]);
        let va = crate::linalg::vec_row_major(a.matrix());
        let vb = crate::linalg::vec_row_major(b.matrix());
        let lhs = &pm.matrix * (&va * c(0.3, 0.0) + &vb * c(0.7, 0.0));
        let rhs = (&pm.matrix * va) * c(0.3, 0.0) + (&pm.matrix * vb) * c(0.7, 0.0);
        assert!((lhs - rhs).norm() < 1e-10);
    }

    fn exact_pairs(known: &AffineMap, phi: &RMatrix, q: &RVector, inputs: &[ParamVector]) -> Vec<(ParamVector, RVector)> {
        inputs
            .iter()
            .map(|y| {
                let yt = ParamVector::new(y.dim(), phi * y.values() + q).unwrap();
                (y.clone(), known.predict(&yt).unwrap())
            })
            .collect()
    }

    #[test]
    fn dynamics_map_identity_and_planted() {
        for dim in [2, 3] {
            let set = optimised_like_set(dim, 18 + dim as u64);
            let known = build_idealised_map(&set, None).unwrap();
            let inputs: Vec<ParamVector> = training_states(dim)
                .unwrap()
                .iter()
                .map(|r| ParamVector::of_state(r).unwrap())
                .collect();
            let p = param_count(dim);
            let id = exact_pairs(&known, &RMatrix::identity(p, p), &RVector::zeros(p), &inputs);
            let fit = learn_dynamics_map(&known, &id, 0.0).unwrap();
            assert!((fit.phi - RMatrix::identity(p, p)).amax() < 1e-8);
            assert!(fit.q.amax() < 1e-8);

            let phi = RMatrix::identity(p, p) + small_beta(p, p, 30 + dim as u64);
            let q = small_beta(p, 1, 40 + dim as u64).column(0).into_owned();
            let planted = exact_pairs(&known, &phi, &q, &inputs);
            let fit = learn_dynamics_map(&known, &planted, 0.0).unwrap();
            assert!((&fit.phi - &phi).amax() < 1e-7);
            assert!((&fit.q - &q).amax() < 1e-7);
        }
    }

    #[test]
    fn dynamics_map_preserves_trace_for_physical_channel() {
        // amplitude damping is CPTP: recovered Y_t must have implied trace 1
        let dim = 3;
        let dev = DeviceParams::default();
        let set = optimised_like_set(dim, 50);
        let known = build_idealised_map(&set, None).unwrap();
        let pairs: Vec<(ParamVector, RVector)> = training_states(dim)
            .unwrap()
            .iter()
            .map(|r| {
                let out = degrade_state(r, &dev, 20.0).unwrap();
                (
                    ParamVector::of_state(r).unwrap(),
                    known.predict(&ParamVector::of_state(&out).unwrap()).unwrap(),
                )
            })
            .collect();
        let fit = learn_dynamics_map(&known, &pairs, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..20 {
            let rho = ginibre_state(dim, &mut rng);
            let yt = fit.apply(&ParamVector::of_state(&rho).unwrap()).unwrap();
            assert!((yt.to_matrix().trace().re - 1.0).abs() < 1e-8);
            let direct = degrade_state(&rho, &dev, 20.0).unwrap();
            assert!((yt.to_matrix() - direct.matrix()).norm() < 1e-7);
        }
    }
}
