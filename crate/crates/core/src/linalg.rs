//! Dense and sparse complex matrix helpers shared by the physics modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;
pub type RMatrix = DMatrix<f64>;
pub type RVector = DVector<f64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const I: Complex64 = Complex64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Largest `|m_ij - conj(m_ji)|`.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

pub fn trace(m: &CMatrix) -> Complex64 {
    m.diagonal().iter().sum()
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0f64, |acc, z| acc.max(z.norm()))
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(m: &CMatrix) -> (RVector, CMatrix) {
    let eig = hermitize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = RVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    eigh(m).0.min()
}

/// `V f(Λ) V†` for a Hermitian matrix with real spectral function `f`.
pub fn hermitian_function(m: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let (values, vectors) = eigh(m);
    let mut scaled = vectors.clone();
    for (j, &lambda) in values.iter().enumerate() {
        let w = f(lambda);
        scaled.column_mut(j).scale_mut(w);
    }
    &scaled * vectors.adjoint()
}

/// Square root of a PSD matrix with eigenvalues below `clip` treated as zero.
pub fn psd_sqrt(m: &CMatrix, clip: f64) -> CMatrix {
    hermitian_function(m, |x| if x < clip { 0.0 } else { x.max(0.0).sqrt() })
}

/// Row-major vectorisation: index `i * n + j`.
pub fn vec_row_major(m: &CMatrix) -> CVector {
    let n = m.ncols();
    CVector::from_fn(m.nrows() * n, |idx, _| m[(idx / n, idx % n)])
}

pub fn unvec_row_major(v: &CVector, n: usize) -> CMatrix {
    CMatrix::from_fn(n, n, |i, j| v[i * n + j])
}

/// Compressed-row complex matrix used for the sparse Hamiltonians and jump
/// operators of the joint qubit-cavity space.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex64>,
}

impl SparseMatrix {
    pub fn from_dense(m: &CMatrix) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "sparse matrices are square");
        let n = m.nrows();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for j in 0..n {
                let z = m[(i, j)];
                if z != ZERO {
                    cols.push(j);
                    vals.push(z);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `self * b` for dense `b`.
    pub fn mul_dense(&self, b: &CMatrix) -> CMatrix {
        debug_assert_eq!(b.nrows(), self.n);
        let n = self.n;
        let m = b.ncols();
        let src = b.as_slice();
        let mut out = CMatrix::zeros(n, m);
        let dst = out.as_mut_slice();
        for j in 0..m {
            let col = &src[j * n..(j + 1) * n];
            let out_col = &mut dst[j * n..(j + 1) * n];
            for i in 0..n {
                let mut acc = ZERO;
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.vals[p] * col[self.cols[p]];
                }
                out_col[i] = acc;
            }
        }
        out
    }

    /// `b * self†` for dense `b`, computed as `(self * b†)†`.
    pub fn dense_mul_adjoint(&self, b: &CMatrix) -> CMatrix {
        self.mul_dense(&b.adjoint()).adjoint()
    }

    /// `b * self` for dense `b`.
    pub fn dense_mul(&self, b: &CMatrix) -> CMatrix {
        self.adjoint().mul_dense(&b.adjoint()).adjoint()
    }

    pub fn adjoint(&self) -> Self {
        let mut triplets: Vec<(usize, usize, Complex64)> = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                triplets.push((self.cols[p], i, self.vals[p].conj()));
            }
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; self.n + 1];
        for t in &triplets {
            row_ptr[t.0 + 1] += 1;
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n: self.n,
            row_ptr,
            cols: triplets.iter().map(|t| t.1).collect(),
            vals: triplets.iter().map(|t| t.2).collect(),
        }
    }

    /// Upper bound on the spectral norm (max absolute row sum).
    pub fn row_sum_norm(&self) -> f64 {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|p| self.vals[p].norm())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}
