//! Truncated Fock-space operators, canonical cavity states, and the affine
//! parametrisation `vec(ρ) = K·Y + C` between density matrices and their
//! `D² − 1` real parameters.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, c, hermitian_defect, hermitize, max_abs, CMatrix, CVector, RMatrix, RVector, ONE, ZERO,
};

/// Hermiticity tolerance for [`DensityMatrix`].
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Trace tolerance for [`DensityMatrix`].
pub const TRACE_TOL: f64 = 1e-10;
/// Most negative eigenvalue accepted for [`DensityMatrix`].
pub const EIGEN_TOL: f64 = 1e-10;

/// Truncated annihilation operator, `a[n-1, n] = √n`.
pub fn annihilation(dim: usize) -> CMatrix {
    assert!(dim >= 1, "dimension must be positive");
    let mut a = CMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = c((n as f64).sqrt(), 0.0);
    }
    a
}

pub fn creation(dim: usize) -> CMatrix {
    annihilation(dim).adjoint()
}

pub fn number(dim: usize) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_fn(dim, |n, _| c(n as f64, 0.0)))
}

/// Photon-number parity `diag((-1)^n)`.
pub fn parity(dim: usize) -> CMatrix {
    assert!(dim >= 1, "dimension must be positive");
    CMatrix::from_diagonal(&CVector::from_fn(dim, |n, _| {
        c(if n % 2 == 0 { 1.0 } else { -1.0 }, 0.0)
    }))
}

/// Padding used when building `D(α)` in an enlarged space before truncation.
pub fn default_pad(alpha: Complex64) -> usize {
    let grow = 4 * alpha.norm_sqr().ceil() as usize + 10;
    grow.max(20)
}

/// Working dimension in which the first `dim` columns of `D(α)` are accurate
/// to machine precision. The default pad only bounds the unitarity defect;
/// the truncated generator still perturbs the retained columns at 1e-5 for
/// `|α| = 2`, `dim = 6`.
pub fn accurate_dim(dim: usize, alpha: Complex64) -> usize {
    dim + 2 * default_pad(alpha)
}

/// Exact displacement operators in a fixed Fock dimension.
///
/// `α a† − α* a` is unitarily equivalent to `−i|α|(a + a†)` through a phase
/// rotation `e^{iφn}`, so one real symmetric eigendecomposition of the
/// position quadrature serves every amplitude.
#[derive(Debug, Clone)]
pub struct Displacer {
    dim: usize,
    quadrature_values: RVector,
    quadrature_vectors: RMatrix,
}

impl Displacer {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        let mut x = RMatrix::zeros(dim, dim);
        for n in 1..dim {
            let s = (n as f64).sqrt();
            x[(n - 1, n)] = s;
            x[(n, n - 1)] = s;
        }
        let eig = SymmetricEigen::new(x);
        Self {
            dim,
            quadrature_values: eig.eigenvalues,
            quadrature_vectors: eig.eigenvectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// First `ncols` columns of `D(α)`; rows span the whole space.
    pub fn columns(&self, alpha: Complex64, ncols: usize) -> CMatrix {
        let ncols = ncols.min(self.dim);
        let r = alpha.norm();
        let phi = alpha.arg() + FRAC_PI_2;
        let w = &self.quadrature_vectors;
        let phases: Vec<Complex64> = self
            .quadrature_values
            .iter()
            .map(|&l| Complex64::from_polar(1.0, -r * l))
            .collect();
        let mut out = CMatrix::zeros(self.dim, ncols);
        for n in 0..ncols {
            let right = Complex64::from_polar(1.0, -phi * n as f64);
            for m in 0..self.dim {
                let mut acc = ZERO;
                for (k, ph) in phases.iter().enumerate() {
                    acc += ph * (w[(m, k)] * w[(n, k)]);
                }
                out[(m, n)] = acc * Complex64::from_polar(1.0, phi * m as f64) * right;
            }
        }
        out
    }

    pub fn full(&self, alpha: Complex64) -> CMatrix {
        self.columns(alpha, self.dim)
    }

    /// Top-left `dim × dim` block of `D†(α) P D(α)`.
    pub fn displaced_parity(&self, alpha: Complex64, dim: usize) -> CMatrix {
        let cols = self.columns(alpha, dim);
        let mut signed = cols.clone();
        for m in (1..self.dim).step_by(2) {
            signed.row_mut(m).neg_mut();
        }
        cols.adjoint() * signed
    }
}

/// `D(α)` built in dimension `dim + pad` and truncated to `dim × dim`,
/// together with the truncation defect `‖C†C − I‖_max` of the retained
/// columns `C` of the padded unitary. A small defect means the padded space
/// holds the displaced image of every retained Fock level.
pub fn displacement_with_defect(alpha: Complex64, dim: usize, pad: usize) -> (CMatrix, f64) {
    assert!(dim >= 1, "dimension must be positive");
    let cols = Displacer::new(dim + pad).columns(alpha, dim);
    let defect = max_abs(&(cols.adjoint() * &cols - CMatrix::identity(dim, dim)));
    (cols.rows(0, dim).into_owned(), defect)
}

/// Truncated displacement operator `exp(α a† − α* a)`.
pub fn displacement(alpha: Complex64, dim: usize, pad: usize) -> CMatrix {
    let (block, defect) = displacement_with_defect(alpha, dim, pad);
    if defect > 1e-6 {
        log::warn!(
            "displacement alpha={alpha} dim={dim} pad={pad}: unitarity defect {defect:e} on retained block"
        );
    }
    block
}

/// Normalised coherent-state amplitudes `e^{-|α|²/2} αⁿ/√(n!)`.
pub fn coherent_state(alpha: Complex64, dim: usize) -> Result<CVector> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let mut amps = CVector::zeros(dim);
    amps[0] = c((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    for n in 1..dim {
        amps[n] = amps[n - 1] * alpha / (n as f64).sqrt();
    }
    let kept: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
    let tail = (1.0 - kept).max(0.0);
    if tail > 1e-6 {
        return Err(Error::TruncationTail { dim, tail });
    }
    Ok(amps.unscale(kept.sqrt()))
}

/// The four cat-like test superpositions of `|α⟩` and `|−α⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KittenVariant {
    Plus,
    Minus,
    YPlus,
    YMinus,
}

impl KittenVariant {
    pub const ALL: [KittenVariant; 4] = [
        KittenVariant::Plus,
        KittenVariant::Minus,
        KittenVariant::YPlus,
        KittenVariant::YMinus,
    ];

    fn relative_phase(self) -> Complex64 {
        match self {
            KittenVariant::Plus => c(1.0, 0.0),
            KittenVariant::Minus => c(-1.0, 0.0),
            KittenVariant::YPlus => c(0.0, 1.0),
            KittenVariant::YMinus => c(0.0, -1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KittenVariant::Plus => "plus",
            KittenVariant::Minus => "minus",
            KittenVariant::YPlus => "y_plus",
            KittenVariant::YMinus => "y_minus",
        }
    }
}

impl std::fmt::Display for KittenVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Normalised `|α⟩ + e^{iφ}|−α⟩` for the phase selected by `variant`.
pub fn kitten_state(alpha: Complex64, variant: KittenVariant, dim: usize) -> Result<DensityMatrix> {
    let plus = coherent_state(alpha, dim)?;
    let minus = coherent_state(-alpha, dim)?;
    let ket = plus + minus * variant.relative_phase();
    DensityMatrix::from_ket(&ket)
}

/// A physical density matrix: Hermitian, unit trace, positive semi-definite.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: CMatrix,
}

impl DensityMatrix {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "density matrix must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("non-finite matrix entry".into()));
        }
        let defect = hermitian_defect(&matrix);
        if defect > HERMITIAN_TOL {
            return Err(Error::NotHermitian(defect));
        }
        let matrix = hermitize(&matrix);
        let tr = linalg::trace(&matrix).re;
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(Error::InvalidTrace(tr));
        }
        let min = linalg::min_eigenvalue(&matrix);
        if min < -EIGEN_TOL {
            return Err(Error::NotPositive(min));
        }
        Ok(Self { matrix })
    }

    /// Wrap a matrix the caller guarantees to be Hermitian with unit trace,
    /// e.g. the output of a trace-preserving integrator.
    pub(crate) fn from_trusted(matrix: CMatrix) -> Self {
        Self { matrix }
    }

    /// `|ψ⟩⟨ψ|/⟨ψ|ψ⟩`.
    pub fn from_ket(ket: &CVector) -> Result<Self> {
        let norm = ket.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument("cannot normalise a zero ket".into()));
        }
        let psi = ket.unscale(norm);
        Self::new(&psi * psi.adjoint())
    }

    pub fn fock(n: usize, dim: usize) -> Result<Self> {
        if n >= dim {
            return Err(Error::InvalidArgument(format!("Fock level {n} outside dimension {dim}")));
        }
        let mut m = CMatrix::zeros(dim, dim);
        m[(n, n)] = ONE;
        Ok(Self { matrix: m })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            matrix: CMatrix::identity(dim, dim).unscale(dim as f64),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    /// Real part of `tr(O ρ)`.
    pub fn expectation(&self, op: &CMatrix) -> f64 {
        (op * &self.matrix).trace().re
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    pub fn populations(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().map(|z| z.re).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.matrix)
    }

    /// Project onto the first `dim` Fock levels and renormalise.
    pub fn project(&self, dim: usize) -> Result<Self> {
        if dim == 0 || dim > self.dim() {
            return Err(Error::InvalidArgument(format!(
                "cannot project dimension {} onto {dim}",
                self.dim()
            )));
        }
        let block = self.matrix.view((0, 0), (dim, dim)).into_owned();
        let tr = block.trace().re;
        if tr <= 0.0 {
            return Err(Error::InvalidTrace(tr));
        }
        Self::new(block.unscale(tr))
    }

    /// Zero-pad into a larger Fock space.
    pub fn embed(&self, dim: usize) -> Result<Self> {
        if dim < self.dim() {
            return Err(Error::InvalidArgument(format!(
                "cannot embed dimension {} into {dim}",
                self.dim()
            )));
        }
        let mut m = CMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (self.dim(), self.dim())).copy_from(&self.matrix);
        Ok(Self { matrix: m })
    }

    /// Hermitise, clip eigenvalues below `floor` to zero and renormalise.
    pub fn from_clipped(matrix: &CMatrix, floor: f64) -> Result<Self> {
        let clipped = linalg::hermitian_function(&hermitize(matrix), |x| if x < floor { 0.0 } else { x.max(0.0) });
        let tr = clipped.trace().re;
        if tr <= 0.0 {
            return Err(Error::InvalidTrace(tr));
        }
        Self::new(hermitize(&clipped.unscale(tr)))
    }
}

/// Random state from the Hilbert–Schmidt measure, `GG†/tr(GG†)` with
/// complex Gaussian `G`.
pub fn ginibre_state<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DensityMatrix {
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        c(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let rho = &g * g.adjoint();
    let tr = rho.trace().re;
    DensityMatrix {
        matrix: hermitize(&rho.unscale(tr)),
    }
}

/// Uhlmann fidelity `(tr √(√ρ σ √ρ))²`.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            found: sigma.dim(),
        });
    }
    let root = linalg::psd_sqrt(rho.matrix(), EIGEN_TOL);
    let inner = &root * sigma.matrix() * &root;
    let (values, _) = linalg::eigh(&inner);
    let t: f64 = values.iter().map(|&x| x.max(0.0).sqrt()).sum();
    Ok((t * t).clamp(0.0, 1.0))
}

/// The `D² − 1` real parameters of a (possibly non-physical) unit-trace
/// Hermitian matrix: the first `D − 1` diagonal entries, then real and
/// imaginary parts of the upper triangle in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    dim: usize,
    values: RVector,
}

/// Upper-triangular index pairs in row-major order.
pub fn upper_pairs(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..dim).flat_map(move |l| (l + 1..dim).map(move |m| (l, m)))
}

pub fn param_count(dim: usize) -> usize {
    dim * dim - 1
}

impl ParamVector {
    pub fn new(dim: usize, values: RVector) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("parametrisation needs dim >= 2".into()));
        }
        if values.len() != param_count(dim) {
            return Err(Error::DimensionMismatch {
                expected: param_count(dim),
                found: values.len(),
            });
        }
        Ok(Self { dim, values })
    }

    pub fn of_matrix(m: &CMatrix) -> Result<Self> {
        let dim = m.nrows();
        if dim < 2 {
            return Err(Error::InvalidArgument("parametrisation needs dim >= 2".into()));
        }
        let mut values = Vec::with_capacity(param_count(dim));
        values.extend((0..dim - 1).map(|i| m[(i, i)].re));
        for (l, k) in upper_pairs(dim) {
            values.push(m[(l, k)].re);
            values.push(m[(l, k)].im);
        }
        Ok(Self {
            dim,
            values: RVector::from_vec(values),
        })
    }

    pub fn of_state(rho: &DensityMatrix) -> Result<Self> {
        Self::of_matrix(rho.matrix())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &RVector {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `[1; Y]`.
    pub fn augmented(&self) -> RVector {
        let mut out = RVector::zeros(self.values.len() + 1);
        out[0] = 1.0;
        out.rows_mut(1, self.values.len()).copy_from(&self.values);
        out
    }

    /// Last diagonal entry fixed by normalisation.
    pub fn implied_last_diagonal(&self) -> f64 {
        1.0 - self.values.rows(0, self.dim - 1).sum()
    }

    /// Unit-trace Hermitian matrix with these parameters.
    pub fn to_matrix(&self) -> CMatrix {
        let d = self.dim;
        let mut m = CMatrix::zeros(d, d);
        for i in 0..d - 1 {
            m[(i, i)] = c(self.values[i], 0.0);
        }
        m[(d - 1, d - 1)] = c(self.implied_last_diagonal(), 0.0);
        let mut idx = d - 1;
        for (l, k) in upper_pairs(d) {
            let z = c(self.values[idx], self.values[idx + 1]);
            m[(l, k)] = z;
            m[(k, l)] = z.conj();
            idx += 2;
        }
        m
    }
}

/// `vec(ρ) = K·Y + C` with row-major vectorisation.
///
/// `K` is complex because imaginary parameters enter `vec(ρ)` as `±i`.
#[derive(Debug, Clone)]
pub struct Parametrization {
    dim: usize,
    k: CMatrix,
    c: CVector,
}

impl Parametrization {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("parametrisation needs dim >= 2".into()));
        }
        let d2 = dim * dim;
        let mut k = CMatrix::zeros(d2, d2 - 1);
        let mut cvec = CVector::zeros(d2);
        let last = (dim - 1) * dim + dim - 1;
        cvec[last] = ONE;
        for i in 0..dim - 1 {
            k[(i * dim + i, i)] = ONE;
            k[(last, i)] = -ONE;
        }
        let mut col = dim - 1;
        for (l, m) in upper_pairs(dim) {
            k[(l * dim + m, col)] = ONE;
            k[(m * dim + l, col)] = ONE;
            k[(l * dim + m, col + 1)] = c(0.0, 1.0);
            k[(m * dim + l, col + 1)] = c(0.0, -1.0);
            col += 2;
        }
        Ok(Self { dim, k, c: cvec })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> &CMatrix {
        &self.k
    }

    pub fn c(&self) -> &CVector {
        &self.c
    }

    /// `K·Y + C`.
    pub fn vectorize(&self, y: &ParamVector) -> CVector {
        let yc = y.values().map(|v| c(v, 0.0));
        &self.k * yc + &self.c
    }

    pub fn state_matrix(&self, y: &ParamVector) -> CMatrix {
        linalg::unvec_row_major(&self.vectorize(y), self.dim)
    }

    /// Moore–Penrose pseudoinverse `(K†K)⁻¹K†` (left inverse of `K`).
    pub fn k_pseudoinverse(&self) -> CMatrix {
        let kh = self.k.adjoint();
        let gram = &kh * &self.k;
        let inv = gram
            .try_inverse()
            .expect("parametrisation matrix has full column rank");
        inv * kh
    }
}

/// Dense complex matrix interchange format, `{dim, re, im}` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub dim: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl From<&CMatrix> for MatrixJson {
    fn from(m: &CMatrix) -> Self {
        let n = m.nrows();
        let mut re = Vec::with_capacity(n * n);
        let mut im = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                re.push(m[(i, j)].re);
                im.push(m[(i, j)].im);
            }
        }
        Self { dim: n, re, im }
    }
}

impl TryFrom<&MatrixJson> for CMatrix {
    type Error = Error;

    fn try_from(j: &MatrixJson) -> Result<Self> {
        let n2 = j.dim * j.dim;
        if j.re.len() != n2 || j.im.len() != n2 {
            return Err(Error::DimensionMismatch {
                expected: n2,
                found: j.re.len().min(j.im.len()),
            });
        }
        Ok(DMatrix::from_fn(j.dim, j.dim, |r, col| {
            c(j.re[r * j.dim + col], j.im[r * j.dim + col])
        }))
    }
}

impl From<&DensityMatrix> for MatrixJson {
    fn from(rho: &DensityMatrix) -> Self {
        MatrixJson::from(rho.matrix())
    }
}
