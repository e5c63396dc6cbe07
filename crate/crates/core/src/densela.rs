//! Dense real linear algebra on row-major `f64` matrices.
//!
//! Everything the kernel algebra needs lives here: products, Cholesky with a
//! jitter ladder, triangular solves, a cyclic Jacobi eigensolver for
//! symmetric matrices and the spectral norm. Sizes are desk scale (feature
//! dimensions in the low hundreds) so plain cache-friendly loops suffice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                detail: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "from_rows",
                    detail: format!("ragged rows ({} vs {cols})", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(n, cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Rows at the given indices, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::DimensionMismatch {
                op: "vstack",
                detail: format!("{} vs {} columns", self.cols, other.cols),
            });
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self { rows: self.rows + other.rows, cols, data })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// Entry-wise `self + other`. Panics on shape mismatch.
    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// Entry-wise `self - other`. Panics on shape mismatch.
    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_diag(&self, v: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out.data[i * self.cols + i] += v;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Replaces the matrix by `(A + A^T) / 2`.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols, "symmetrize: matrix must be square");
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    /// Largest absolute difference between `A[i][j]` and `A[j][i]`.
    pub fn max_asymmetry(&self) -> f64 {
        let n = self.rows;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.data[i * n + j] - self.data[j * n + i]).abs());
            }
        }
        worst
    }

    fn check_symmetric(&self, op: &'static str) -> Result<()> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch {
                op,
                detail: format!("expected square matrix, got {}x{}", self.rows, self.cols),
            });
        }
        let asym = self.max_asymmetry();
        if asym > SYMMETRY_TOL * self.max_abs().max(1.0) {
            return Err(Error::NotSymmetric { max_asym: asym });
        }
        Ok(())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec: dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense product `a * b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            detail: format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), out_row);
            }
        }
    }
    Ok(out)
}

/// `a^T * b` without forming the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul_tn",
            detail: format!("{}x{} transposed times {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for n in 0..a.rows {
        let brow = b.row(n);
        for (i, &ani) in a.row(n).iter().enumerate() {
            if ani != 0.0 {
                axpy(ani, brow, &mut out.data[i * b.cols..(i + 1) * b.cols]);
            }
        }
    }
    Ok(out)
}

/// `a * b^T` as row dot products.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            op: "matmul_nt",
            detail: format!("{}x{} times transposed {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// `a^T a`, exactly symmetric.
pub fn gram(a: &DenseMatrix) -> DenseMatrix {
    let p = a.cols;
    let mut out = DenseMatrix::zeros(p, p);
    for n in 0..a.rows {
        let row = a.row(n);
        for i in 0..p {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            let dst = &mut out.data[i * p + i..(i + 1) * p];
            axpy(ri, &row[i..], dst);
        }
    }
    for i in 0..p {
        for j in 0..i {
            out.data[i * p + j] = out.data[j * p + i];
        }
    }
    out
}

/// `a a^T`, exactly symmetric.
pub fn outer_gram(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows;
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(a.row(i), a.row(j));
            out.data[i * n + j] = v;
            out.data[j * n + i] = v;
        }
    }
    out
}

/// Jitter escalation for Cholesky: first try the bare matrix, then add
/// `start * s, start * factor * s, ...` up to `max * s`, where `s` is the
/// mean diagonal (or 1 when that is not positive).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub relative_start: f64,
    pub relative_max: f64,
    pub factor: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self { relative_start: 1e-10, relative_max: 1e-4, factor: 10.0 }
    }
}

impl JitterPolicy {
    /// No jitter at all: fail unless the matrix is numerically positive definite.
    pub fn none() -> Self {
        Self { relative_start: 0.0, relative_max: 0.0, factor: 10.0 }
    }

    fn ladder(&self, a: &DenseMatrix) -> Vec<f64> {
        let n = a.rows.max(1);
        let mean_diag = a.diag().iter().sum::<f64>() / n as f64;
        let scale = if mean_diag.is_finite() && mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut steps = vec![0.0];
        if self.relative_start > 0.0 && self.relative_max >= self.relative_start {
            let mut rel = self.relative_start;
            // tolerance on the last rung so 1e-10 * 10^6 still reaches 1e-4
            while rel <= self.relative_max * (1.0 + 1e-9) {
                steps.push(rel * scale);
                rel *= self.factor;
            }
        }
        steps
    }
}

/// Lower-triangular Cholesky factor `L` with `L L^T = A + jitter_used * I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerTriangularFactor {
    dim: usize,
    data: Vec<f64>,
    jitter_used: f64,
}

impl LowerTriangularFactor {
    pub fn identity(dim: usize) -> Self {
        Self { dim, data: DenseMatrix::identity(dim).into_vec(), jitter_used: 0.0 }
    }

    /// Wraps an explicit lower-triangular matrix. Upper entries must be zero
    /// and the diagonal strictly positive.
    pub fn from_matrix(m: &DenseMatrix) -> Result<Self> {
        let n = m.rows;
        if m.cols != n {
            return Err(Error::DimensionMismatch {
                op: "LowerTriangularFactor::from_matrix",
                detail: format!("{}x{}", m.rows, m.cols),
            });
        }
        for i in 0..n {
            if !(m.get(i, i) > 0.0) {
                return Err(Error::InvalidConfig(format!("diagonal entry {i} is not positive")));
            }
            for j in (i + 1)..n {
                if m.get(i, j) != 0.0 {
                    return Err(Error::InvalidConfig(format!("entry ({i},{j}) above the diagonal")));
                }
            }
        }
        Ok(Self { dim: n, data: m.as_slice().to_vec(), jitter_used: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix { rows: self.dim, cols: self.dim, data: self.data.clone() }
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let l = self.to_dense();
        let mut out = matmul_nt(&l, &l).expect("square factor");
        out.symmetrize();
        out
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.get(i, i).ln()).sum::<f64>()
    }
}

fn try_cholesky(a: &DenseMatrix, jitter: f64) -> Option<Vec<f64>> {
    let n = a.rows;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j) + jitter;
        d -= dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let s = a.get(i, j) - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

/// Cholesky factorization of a symmetric matrix, escalating jitter per
/// `policy` until the factorization succeeds.
pub fn cholesky(a: &DenseMatrix, policy: &JitterPolicy) -> Result<LowerTriangularFactor> {
    a.check_symmetric("cholesky")?;
    let ladder = policy.ladder(a);
    for &jitter in &ladder {
        if let Some(data) = try_cholesky(a, jitter) {
            return Ok(LowerTriangularFactor { dim: a.rows, data, jitter_used: jitter });
        }
    }
    Err(Error::NotPositiveDefinite { max_jitter: *ladder.last().unwrap_or(&0.0) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Solve `L x = b`.
    Lower,
    /// Solve `L^T x = b`.
    LowerTranspose,
}

/// Triangular solve against a Cholesky factor, column-wise over `b`.
pub fn tri_solve(l: &LowerTriangularFactor, b: &DenseMatrix, side: Side) -> Result<DenseMatrix> {
    let n = l.dim;
    if b.rows != n {
        return Err(Error::DimensionMismatch {
            op: "tri_solve",
            detail: format!("factor dim {n}, rhs has {} rows", b.rows),
        });
    }
    let k = b.cols;
    let mut x = b.clone();
    match side {
        Side::Lower => {
            for i in 0..n {
                let (done, rest) = x.data.split_at_mut(i * k);
                let xi = &mut rest[..k];
                for j in 0..i {
                    let lij = l.data[i * n + j];
                    if lij != 0.0 {
                        axpy(-lij, &done[j * k..(j + 1) * k], xi);
                    }
                }
                let inv = 1.0 / l.data[i * n + i];
                xi.iter_mut().for_each(|v| *v *= inv);
            }
        }
        Side::LowerTranspose => {
            for i in (0..n).rev() {
                let (head, tail) = x.data.split_at_mut((i + 1) * k);
                let xi = &mut head[i * k..];
                for j in (i + 1)..n {
                    let lji = l.data[j * n + i];
                    if lji != 0.0 {
                        axpy(-lji, &tail[(j - i - 1) * k..(j - i) * k], xi);
                    }
                }
                let inv = 1.0 / l.data[i * n + i];
                xi.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    Ok(x)
}

/// Solves `(L L^T) x = b`.
pub fn cholesky_solve(l: &LowerTriangularFactor, b: &DenseMatrix) -> Result<DenseMatrix> {
    let y = tri_solve(l, b, Side::Lower)?;
    tri_solve(l, &y, Side::LowerTranspose)
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn sym_eigvals(a: &DenseMatrix) -> Result<Vec<f64>> {
    a.check_symmetric("sym_eigvals")?;
    let n = a.rows;
    let mut m = a.clone();
    m.symmetrize();
    let norm = m.frobenius_norm();
    if norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let off = |m: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.data[i * n + j] * m.data[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off(&m) < JACOBI_REL_TOL * norm {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.data[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m.data[p * n + p];
                let aqq = m.data[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- J^T A J acting on rows/cols p and q
                for k in 0..n {
                    let akp = m.data[k * n + p];
                    let akq = m.data[k * n + q];
                    m.data[k * n + p] = c * akp - s * akq;
                    m.data[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m.data[p * n + k];
                    let aqk = m.data[q * n + k];
                    m.data[p * n + k] = c * apk - s * aqk;
                    m.data[q * n + k] = s * apk + c * aqk;
                }
                m.data[p * n + q] = 0.0;
                m.data[q * n + p] = 0.0;
            }
        }
    }
    let mut ev = m.diag();
    ev.sort_by(|x, y| x.total_cmp(y));
    Ok(ev)
}

pub fn min_eigval(a: &DenseMatrix) -> Result<f64> {
    Ok(sym_eigvals(a)?.first().copied().unwrap_or(0.0))
}

/// Largest singular value, via the largest eigenvalue of the smaller Gram matrix.
pub fn spectral_norm(a: &DenseMatrix) -> f64 {
    if a.rows == 0 || a.cols == 0 {
        return 0.0;
    }
    let g = if a.cols <= a.rows { gram(a) } else { outer_gram(a) };
    let ev = sym_eigvals(&g).expect("gram matrix is symmetric");
    ev.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(n: usize, seed: u64) -> DenseMatrix {
        gram(&random(n + 3, n, seed)).add_diag(0.1)
    }

    #[test]
    fn matmul_identity_and_small() {
        let m = random(3, 4, 1);
        assert_eq!(matmul(&DenseMatrix::identity(3), &m).unwrap(), m);
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(7, 5, 2);
        let b = random(5, 3, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(tn.sub(&c).max_abs() < 1e-12);
        assert!(nt.sub(&c).max_abs() < 1e-12);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        assert!(matches!(
            matmul(&random(2, 3, 0), &random(2, 3, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&DenseMatrix::identity(4), &JitterPolicy::default()).unwrap();
        assert_eq!(l.to_dense(), DenseMatrix::identity(4));
        assert_eq!(l.jitter_used(), 0.0);
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let l = cholesky(&a, &JitterPolicy::default()).unwrap();
        assert_eq!(l.get(0, 0), 2.0);
        assert_eq!(l.get(1, 0), 1.0);
        assert_eq!(l.get(0, 1), 0.0);
        let s = l.get(1, 1);
        assert!((s * s - 2.0).abs() < 1e-14);
        assert!(l.reconstruct().sub(&a).frobenius_norm() / a.frobenius_norm() < 1e-12);
    }

    #[test]
    fn cholesky_zero_matrix_uses_jitter() {
        let l = cholesky(&DenseMatrix::zeros(2, 2), &JitterPolicy::default()).unwrap();
        let j = l.jitter_used();
        assert_eq!(j, 1e-10);
        let expect = j.sqrt();
        assert!((l.get(0, 0) - expect).abs() < 1e-20);
        assert!((l.get(1, 1) - expect).abs() < 1e-20);
        assert_eq!(l.get(1, 0), 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite_and_asymmetric() {
        let a = DenseMatrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(cholesky(&a, &JitterPolicy::default()), Err(Error::NotPositiveDefinite { .. })));
        let b = DenseMatrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&b, &JitterPolicy::default()), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn jitter_ladder_reaches_max() {
        let ladder = JitterPolicy::default().ladder(&DenseMatrix::identity(3));
        assert_eq!(ladder.len(), 8);
        assert!((ladder.last().unwrap() - 1e-4).abs() < 1e-16);
    }

    #[test]
    fn tri_solve_identity_and_inverse() {
        let b = random(3, 2, 5);
        let id = LowerTriangularFactor::identity(3);
        assert_eq!(tri_solve(&id, &b, Side::Lower).unwrap(), b);

        // 3x3 explicit inverse via the adjugate
        let a = random_spd(3, 6);
        let l = cholesky(&a, &JitterPolicy::none()).unwrap();
        let x = cholesky_solve(&l, &DenseMatrix::identity(3)).unwrap();
        let g = |i: usize, j: usize| a.get(i, j);
        let det = g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1))
            - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
            + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0));
        let cof = |i: usize, j: usize| {
            let r: Vec<usize> = (0..3).filter(|&k| k != i).collect();
            let c: Vec<usize> = (0..3).filter(|&k| k != j).collect();
            let m = g(r[0], c[0]) * g(r[1], c[1]) - g(r[0], c[1]) * g(r[1], c[0]);
            if (i + j) % 2 == 0 { m } else { -m }
        };
        for i in 0..3 {
            for j in 0..3 {
                let inv_ij = cof(j, i) / det;
                assert!((x.get(i, j) - inv_ij).abs() < 1e-10 * inv_ij.abs().max(1.0));
            }
        }
    }

    #[test]
    fn tri_solve_dimension_mismatch() {
        let l = LowerTriangularFactor::identity(3);
        assert!(tri_solve(&l, &random(2, 2, 0), Side::Lower).is_err());
    }

    #[test]
    fn eigvals_known() {
        assert_eq!(sym_eigvals(&DenseMatrix::from_diag(&[3.0, 1.0, 2.0])).unwrap(), vec![1.0, 2.0, 3.0]);
        let ev = sym_eigvals(&DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap()).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
        assert!(sym_eigvals(&random(3, 3, 1)).is_err());
    }

    #[test]
    fn eigvals_trace_identity() {
        let mut a = random(8, 8, 9);
        a.symmetrize();
        let ev = sym_eigvals(&a).unwrap();
        assert!((ev.iter().sum::<f64>() - a.trace()).abs() < 1e-9);
        assert!(ev.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn spectral_norm_cases() {
        assert_eq!(spectral_norm(&DenseMatrix::zeros(3, 2)), 0.0);
        assert!((spectral_norm(&DenseMatrix::from_diag(&[-5.0, 2.0])) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_matches_power_iteration() {
        let a = random(6, 4, 11);
        let g = gram(&a);
        let mut v = vec![1.0; 4];
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = g.matvec(&v);
            let n = dot(&w, &w).sqrt();
            lambda = n;
            v = w.iter().map(|x| x / n).collect();
        }
        assert!((spectral_norm(&a) - lambda.sqrt()).abs() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cholesky_reconstructs_psd(n in 1usize..12, extra in 0usize..6, seed in any::<u64>()) {
            let a = gram(&random(n + extra, n, seed));
            let l = cholesky(&a, &JitterPolicy::default()).unwrap();
            let target = a.add_diag(l.jitter_used());
            let err = l.reconstruct().sub(&target).frobenius_norm() / a.frobenius_norm().max(1e-300);
            prop_assert!(err <= 1e-10);
            for i in 0..n {
                prop_assert!(l.get(i, i) > 0.0);
            }
        }

        #[test]
        fn gram_eigvals_nonnegative(rows in 1usize..10, cols in 1usize..10, seed in any::<u64>()) {
            let ev = sym_eigvals(&gram(&random(rows, cols, seed))).unwrap();
            prop_assert!(ev.iter().all(|&e| e >= -1e-10));
        }

        #[test]
        fn tri_solve_round_trip(n in 1usize..10, k in 1usize..4, seed in any::<u64>()) {
            let l = cholesky(&random_spd(n, seed), &JitterPolicy::default()).unwrap();
            let b = random(n, k, seed ^ 7);
            for side in [Side::Lower, Side::LowerTranspose] {
                let x = tri_solve(&l, &b, side).unwrap();
                let ld = l.to_dense();
                let back = match side {
                    Side::Lower => matmul(&ld, &x).unwrap(),
                    Side::LowerTranspose => matmul(&ld.transpose(), &x).unwrap(),
                };
                prop_assert!(back.sub(&b).max_abs() <= 1e-10 * b.max_abs());
            }
        }

        #[test]
        fn spectral_norm_transpose_invariant(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            let a = random(rows, cols, seed);
            prop_assert!((spectral_norm(&a) - spectral_norm(&a.transpose())).abs() <= 1e-10);
        }
    }
}
