//! Idealised displaced-parity map and condition-number optimisation of the
//! displacement set.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{accurate_dim, param_count, Displacer, ParamVector, Parametrization};
use crate::linalg::{c, CMatrix, CVector, RMatrix, RVector};
use crate::seed;

/// Largest imaginary part tolerated in a map built from Hermitian observables.
pub const IMAGINARY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementSet {
    dim: usize,
    alphas: Vec<Complex64>,
    /// Condition number of the idealised map, when known.
    pub kappa: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct DisplacementSetJson {
    #[serde(rename = "D")]
    dim: usize,
    alphas: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kappa: Option<f64>,
}

impl DisplacementSet {
    pub fn new(dim: usize, alphas: Vec<Complex64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("D must be at least 2".into()));
        }
        if alphas.len() != param_count(dim) {
            return Err(Error::DimensionMismatch {
                expected: param_count(dim),
                found: alphas.len(),
            });
        }
        if alphas.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::InvalidArgument("displacements must be finite".into()));
        }
        Ok(Self {
            dim,
            alphas,
            kappa: None,
        })
    }

    /// `D² − 1` amplitudes drawn uniformly from the disk of radius `√D`.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let radius = (dim as f64).sqrt();
        let alphas = (0..param_count(dim))
            .map(|_| {
                let r = radius * rng.random::<f64>().sqrt();
                Complex64::from_polar(r, TAU * rng.random::<f64>())
            })
            .collect();
        Self::new(dim, alphas)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alphas(&self) -> &[Complex64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let json = DisplacementSetJson {
            dim: self.dim,
            alphas: self.alphas.iter().map(|a| [a.re, a.im]).collect(),
            kappa: self.kappa,
        };
        Ok(serde_json::to_string_pretty(&json)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: DisplacementSetJson = serde_json::from_str(text)?;
        let mut set = Self::new(json.dim, json.alphas.iter().map(|a| c(a[0], a[1])).collect())?;
        set.kappa = json.kappa;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Idealised,
    Learnt,
    Simulated,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Idealised => "idealised",
            Provenance::Learnt => "learnt",
            Provenance::Simulated => "simulated",
        })
    }
}

/// Affine map `X = V + M·Y` from state parameters to observables.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    dim: usize,
    v: RVector,
    m: RMatrix,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct AffineMapJson {
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "V")]
    v: Vec<f64>,
    #[serde(rename = "M")]
    m: Vec<Vec<f64>>,
    provenance: Provenance,
}

impl AffineMap {
    pub fn new(dim: usize, v: RVector, m: RMatrix, provenance: Provenance) -> Result<Self> {
        if m.ncols() != param_count(dim) {
            return Err(Error::DimensionMismatch {
                expected: param_count(dim),
                found: m.ncols(),
            });
        }
        if v.len() != m.nrows() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: v.len(),
            });
        }
        if v.iter().chain(m.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("map entries must be finite".into()));
        }
        Ok(Self {
            dim,
            v,
            m,
            provenance,
        })
    }

    /// Split `β = [V, M]`.
    pub fn from_beta(dim: usize, beta: &RMatrix, provenance: Provenance) -> Result<Self> {
        if beta.ncols() != param_count(dim) + 1 {
            return Err(Error::DimensionMismatch {
                expected: param_count(dim) + 1,
                found: beta.ncols(),
            });
        }
        Self::new(
            dim,
            beta.column(0).into_owned(),
            beta.columns(1, beta.ncols() - 1).into_owned(),
            provenance,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_obs(&self) -> usize {
        self.v.len()
    }

    pub fn v(&self) -> &RVector {
        &self.v
    }

    pub fn m(&self) -> &RMatrix {
        &self.m
    }

    /// `[V, M]`.
    pub fn beta(&self) -> RMatrix {
        let mut b = RMatrix::zeros(self.n_obs(), self.m.ncols() + 1);
        b.set_column(0, &self.v);
        b.columns_mut(1, self.m.ncols()).copy_from(&self.m);
        b
    }

    pub fn predict(&self, y: &ParamVector) -> Result<RVector> {
        if y.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: y.dim(),
            });
        }
        Ok(&self.v + &self.m * y.values())
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let json = AffineMapJson {
            dim: self.dim,
            v: self.v.iter().copied().collect(),
            m: self.m.row_iter().map(|r| r.iter().copied().collect()).collect(),
            provenance: self.provenance,
        };
        Ok(serde_json::to_string_pretty(&json)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: AffineMapJson = serde_json::from_str(text)?;
        let cols = param_count(json.dim);
        if json.m.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument(format!("every row of M must have {cols} entries")));
        }
        let m = RMatrix::from_fn(json.m.len(), cols, |i, j| json.m[i][j]);
        Self::new(json.dim, RVector::from_vec(json.v), m, json.provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Row-major coefficient vector `r` with `tr(E ρ) = r · vec(ρ)`.
fn observable_row(e: &CMatrix) -> CVector {
    let d = e.nrows();
    CVector::from_fn(d * d, |idx, _| e[(idx % d, idx / d)])
}

/// Map whose k-th observable is `tr(E_k ρ)` for Hermitian operators `E_k`.
pub fn map_from_observables(
    observables: &[CMatrix],
    param: &Parametrization,
    provenance: Provenance,
) -> Result<AffineMap> {
    let d = param.dim();
    let p = param_count(d);
    let mut m = RMatrix::zeros(observables.len(), p);
    let mut v = RVector::zeros(observables.len());
    let mut residue = 0.0f64;
    for (k, e) in observables.iter().enumerate() {
        if e.nrows() != d || e.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: e.nrows(),
            });
        }
        let row = observable_row(e);
        let mk = param.k().tr_mul(&row);
        let vk: Complex64 = row.dot(param.c());
        for j in 0..p {
            m[(k, j)] = mk[j].re;
            residue = residue.max(mk[j].im.abs());
        }
        v[k] = vk.re;
        residue = residue.max(vk.im.abs());
    }
    if residue > IMAGINARY_TOL {
        return Err(Error::ImaginaryResidue(residue));
    }
    AffineMap::new(d, v, m, provenance)
}

/// Cache of quadrature eigendecompositions keyed by working dimension.
#[derive(Debug, Default)]
pub struct DisplacerCache {
    by_dim: HashMap<usize, Displacer>,
}

impl DisplacerCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, dim: usize) -> &Displacer {
        self.by_dim.entry(dim).or_insert_with(|| Displacer::new(dim))
    }

    /// Top-left `dim × dim` block of `D†(α) P D(α)`, built in dimension
    /// `dim + pad` (or the accurate working dimension when `pad` is `None`).
    pub fn displaced_parity(&mut self, alpha: Complex64, dim: usize, pad: Option<usize>) -> CMatrix {
        let working = pad.map_or_else(|| accurate_dim(dim, alpha), |p| dim + p);
        self.get(working).displaced_parity(alpha, dim)
    }
}

fn parity_row(
    alpha: Complex64,
    param: &Parametrization,
    cache: &mut DisplacerCache,
    pad: Option<usize>,
) -> (RVector, f64) {
    let e = cache.displaced_parity(alpha, param.dim(), pad);
    let row = observable_row(&e);
    let mk = param.k().tr_mul(&row);
    let residue = mk.iter().fold(0.0f64, |a, z| a.max(z.im.abs()));
    (mk.map(|z| z.re), residue)
}

/// Idealised map with rows `tr(D†(α_k) P D(α_k) ρ)`. `pad` sets the
/// working dimension `D + pad`; `None` picks one accurate to machine
/// precision.
pub fn build_idealised_map(alphas: &DisplacementSet, pad: Option<usize>) -> Result<AffineMap> {
    let param = Parametrization::new(alphas.dim())?;
    let mut cache = DisplacerCache::new();
    let observables: Vec<CMatrix> = alphas
        .alphas()
        .iter()
        .map(|&a| cache.displaced_parity(a, alphas.dim(), pad))
        .collect();
    map_from_observables(&observables, &param, Provenance::Idealised)
}

/// Ratio of singular values relative to which the smallest counts as zero.
pub const RANK_TOL: f64 = 1e-14;

/// `σ_max/σ_min`, or `+∞` if `σ_min < 1e-14 σ_max`.
pub fn condition_number(m: &RMatrix) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min < RANK_TOL * max || m.nrows() < m.ncols() {
        return f64::INFINITY;
    }
    max / min
}

/// Left pseudoinverse `(MᵀM)⁻¹Mᵀ`, evaluated through the SVD.
pub fn pseudoinverse(m: &RMatrix) -> Result<RMatrix> {
    if m.nrows() < m.ncols() {
        return Err(Error::Singular(format!(
            "{} rows cannot determine {} parameters",
            m.nrows(),
            m.ncols()
        )));
    }
    let svd = m.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::Singular(format!("singular value ratio {:e}", min / max)));
    }
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let inv_s = RMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
    Ok(vt.transpose() * inv_s * u.transpose())
}

/// Normal-equations determinant `det(MᵀM)`.
pub fn gram_determinant(m: &RMatrix) -> f64 {
    (m.transpose() * m).determinant()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub iters: usize,
    pub restarts: usize,
    /// Initial step length along the normalised gradient.
    pub step: f64,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            restarts: 16,
            step: 0.1,
            seed: 0,
        }
    }
}

/// Finite-difference step for the gradient of κ.
pub const FD_STEP: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub set: DisplacementSet,
    pub kappa: f64,
    pub restart: usize,
    /// κ after every accepted step of the winning restart, starting with
    /// the initial value.
    pub trajectory: Vec<f64>,
    pub initial_kappas: Vec<f64>,
}

struct Descent {
    alphas: Vec<Complex64>,
    trajectory: Vec<f64>,
}

fn descend(dim: usize, start: Vec<Complex64>, cfg: &OptimizeConfig) -> Result<Descent> {
    let param = Parametrization::new(dim)?;
    let mut cache = DisplacerCache::new();
    let mut alphas = start;
    let mut m = RMatrix::zeros(alphas.len(), param_count(dim));
    for (k, &a) in alphas.iter().enumerate() {
        m.set_row(k, &parity_row(a, &param, &mut cache, None).0.transpose());
    }
    let mut kappa = condition_number(&m);
    let mut trajectory = vec![kappa];
    let with_row = |m: &RMatrix, k: usize, row: &RVector| {
        let mut out = m.clone();
        out.set_row(k, &row.transpose());
        out
    };
    for _ in 0..cfg.iters {
        if !kappa.is_finite() {
            break;
        }
        let mut grad = vec![0.0; 2 * alphas.len()];
        for (k, &a) in alphas.iter().enumerate() {
            for (part, shift) in [c(FD_STEP, 0.0), c(0.0, FD_STEP)].into_iter().enumerate() {
                let up = condition_number(&with_row(&m, k, &parity_row(a + shift, &param, &mut cache, None).0));
                let down = condition_number(&with_row(&m, k, &parity_row(a - shift, &param, &mut cache, None).0));
                grad[2 * k + part] = (up - down) / (2.0 * FD_STEP);
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            break;
        }
        let mut t = cfg.step;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<Complex64> = alphas
                .iter()
                .enumerate()
                .map(|(k, &a)| a - c(grad[2 * k], grad[2 * k + 1]) * (t / norm))
                .collect();
            let mut trial_m = RMatrix::zeros(m.nrows(), m.ncols());
            for (k, &a) in trial.iter().enumerate() {
                trial_m.set_row(k, &parity_row(a, &param, &mut cache, None).0.transpose());
            }
            let trial_kappa = condition_number(&trial_m);
            if trial_kappa < kappa {
                alphas = trial;
                m = trial_m;
                kappa = trial_kappa;
                trajectory.push(kappa);
                accepted = true;
                break;
            }
            t /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(Descent { alphas, trajectory })
}

/// Minimise `κ(M)` by normalised gradient descent from `restarts` random
/// initialisations; the best restart wins, ties going to the lower index.
pub fn optimize_displacements(dim: usize, cfg: &OptimizeConfig) -> Result<OptimizeResult> {
    if dim < 2 {
        return Err(Error::InvalidArgument("D must be at least 2".into()));
    }
    if cfg.restarts == 0 || !(cfg.step > 0.0) {
        return Err(Error::InvalidArgument("restarts and step must be positive".into()));
    }
    let runs: Vec<Result<Descent>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(cfg.seed, &[r as u64]));
            let start = DisplacementSet::random(dim, &mut rng)?;
            descend(dim, start.alphas, cfg)
        })
        .collect();
    let runs: Vec<Descent> = runs.into_iter().collect::<Result<_>>()?;
    let initial_kappas: Vec<f64> = runs.iter().map(|r| r.trajectory[0]).collect();
    let (restart, best) = runs
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            let ka = *a.trajectory.last().expect("trajectory is never empty");
            let kb = *b.trajectory.last().expect("trajectory is never empty");
            ka.total_cmp(&kb).then(i.cmp(j))
        })
        .expect("at least one restart");
    let kappa = *best.trajectory.last().expect("trajectory is never empty");
    log::info!("D={dim}: best κ = {kappa:.4} from restart {restart}");
    if !kappa.is_finite() {
        return Err(Error::Singular("no restart produced an invertible map".into()));
    }
    let mut set = DisplacementSet::new(dim, best.alphas.clone())?;
    set.kappa = Some(kappa);
    let m = build_idealised_map(&set, None)?;
    let det = gram_determinant(m.m());
    if !(det.abs() > 0.0) || !det.is_finite() {
        return Err(Error::Singular(format!("det(MᵀM) = {det:e}")));
    }
    Ok(OptimizeResult {
        set,
        kappa,
        restart,
        trajectory: best.trajectory.clone(),
        initial_kappas,
    })
}
