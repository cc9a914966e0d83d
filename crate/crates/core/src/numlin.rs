//! Dense linear algebra used by the embedding reducers: a row-major matrix,
//! a cyclic Jacobi eigensolver for symmetric matrices, and PCA built on top
//! of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows explicitly.
        let cols = self.cols;
        (0..self.rows).map(move |i| &self.data[i * cols..(i + 1) * cols])
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, cols.len());
        for i in 0..self.rows {
            let src = self.row(i);
            for (o, &c) in out.row_mut(i).iter_mut().zip(cols) {
                *o = src[c];
            }
        }
        out
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Result of a symmetric eigendecomposition.
#[derive(Debug, Clone)]
pub struct Eigh {
    /// Eigenvalues, sorted descending.
    pub values: Vec<f64>,
    /// Row `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix,
    pub sweeps: usize,
    pub converged: bool,
}

/// Stopping rule for [`jacobi_eigh`].
#[derive(Debug, Clone, Copy)]
pub struct JacobiOptions {
    /// Absolute off-diagonal Frobenius tolerance. `None` means `1e-12 * ||A||_F`.
    pub tol: Option<f64>,
    pub max_sweeps: usize,
}

impl Default for JacobiOptions {
    fn default() -> Self {
        Self {
            tol: None,
            max_sweeps: 50,
        }
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Eigenpairs come back sorted by eigenvalue, largest first. Each eigenvector
/// is signed so that its largest-magnitude entry is positive; when several
/// entries share that magnitude the first one decides.
pub fn jacobi_eigh(a: &Matrix, opts: JacobiOptions) -> Result<Eigh> {
    let n = a.rows();
    if n == 0 || a.cols() != n {
        return Err(Error::Shape(format!(
            "eigendecomposition needs a non-empty square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to jacobi_eigh".into()));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::NotSymmetric { row: i, col: j });
            }
        }
    }

    let mut m = a.clone();
    // Symmetrize exactly so rotations act on a truly symmetric matrix.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let tol = opts.tol.unwrap_or(1e-12 * a.frobenius_norm());
    // v holds eigenvectors as columns while rotating.
    let mut v = Matrix::identity(n);
    let mut sweeps = 0;
    let mut converged = off_diagonal_norm(&m) <= tol;

    while !converged && sweeps < opts.max_sweeps {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;

                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_diagonal_norm(&m) <= tol;
    }
    if !converged {
        log::warn!(
            "jacobi_eigh: no convergence after {sweeps} sweeps (off-diagonal norm {:.3e}, tol {:.3e})",
            off_diagonal_norm(&m),
            tol
        );
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original axis order among equal eigenvalues.
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));

    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (r, &col) in order.iter().enumerate() {
        let row = vectors.row_mut(r);
        for k in 0..n {
            row[k] = v[(k, col)];
        }
        canonical_sign(row);
    }
    Ok(Eigh {
        values,
        vectors,
        sweeps,
        converged,
    })
}

/// Flips `v` so its largest-magnitude entry is positive. Magnitudes within a
/// relative 1e-9 of the maximum count as ties, resolved by the first index.
fn canonical_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .position(|x| x.abs() >= max * (1.0 - 1e-9))
        .expect("max is attained");
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Fitted principal component model. All `d` components are kept; callers
/// choose how many to project onto.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Rows are principal directions, ordered by decreasing eigenvalue.
    pub components: Matrix,
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Smallest component count whose cumulative explained variance reaches
    /// `target`, clamped to `[1, max_dims]`. A zero-variance fit yields 1.
    pub fn components_for(&self, target: f64, max_dims: usize) -> usize {
        let d = self.dim();
        let mut chosen = d;
        if self.explained_ratio.iter().all(|&r| r == 0.0) {
            chosen = 1;
        } else {
            let mut cum = 0.0;
            for (i, r) in self.explained_ratio.iter().enumerate() {
                cum += r;
                if cum >= target - 1e-12 {
                    chosen = i + 1;
                    break;
                }
            }
        }
        chosen.min(max_dims).max(1)
    }

    /// Maps a projected row back to the input space using the first
    /// `scores.len()` components.
    pub fn inverse_row(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &s) in scores.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.components.row(c)) {
                *o += s * w;
            }
        }
        out
    }
}

/// Fits PCA on the rows of `x` using the sample covariance (denominator n-1).
pub fn fit_pca(x: &Matrix) -> Result<PcaModel> {
    let n = x.rows();
    let d = x.cols();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::Shape("PCA needs at least one column".into()));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in x.iter_rows() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let cov_row = cov.row_mut(i);
            for j in i..d {
                cov_row[j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = jacobi_eigh(&cov, JacobiOptions::default())?;
    let eigenvalues: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let explained_ratio = if total > 0.0 {
        eigenvalues.iter().map(|l| l / total).collect()
    } else {
        vec![0.0; d]
    };
    Ok(PcaModel {
        mean,
        components: eig.vectors,
        eigenvalues,
        explained_ratio,
    })
}

/// Projects rows of `x` onto the first `c` principal components.
pub fn transform_pca(model: &PcaModel, x: &Matrix, c: usize) -> Result<Matrix> {
    let d = model.dim();
    if x.cols() != d {
        return Err(Error::Shape(format!(
            "PCA model expects {d} columns, got {}",
            x.cols()
        )));
    }
    if c > model.components.rows() {
        return Err(Error::Shape(format!(
            "requested {c} components but the model stores {}",
            model.components.rows()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), c);
    let mut centered = vec![0.0; d];
    for (i, row) in x.iter_rows().enumerate() {
        for ((z, v), m) in centered.iter_mut().zip(row).zip(&model.mean) {
            *z = v - m;
        }
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = centered
                .iter()
                .zip(model.components.row(k))
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    Ok(out)
}
