//! Sparse design matrices and a dense Cholesky solver sized for GLM work.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent on newer toolchains
use num_traits::Float;

use crate::error::{Error, Result};

/// Row-compressed design matrix. Indicator-heavy reserving designs carry
/// only a handful of non-zeros per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Design {
    pub fn new(ncols: usize) -> Self {
        Design { ncols, row_ptr: vec![0], cols: Vec::new(), vals: Vec::new() }
    }

    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(c, v) in entries {
            debug_assert!(c < self.ncols);
            if v != 0.0 {
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn row_dot(&self, r: usize, beta: &[f64]) -> f64 {
        self.row(r).map(|(c, v)| v * beta[c]).sum()
    }

    /// Columns with no non-zero entry.
    pub fn empty_columns(&self) -> Vec<usize> {
        let mut seen = vec![false; self.ncols];
        for &c in &self.cols {
            seen[c] = true;
        }
        seen.iter().enumerate().filter(|(_, s)| !**s).map(|(c, _)| c).collect()
    }

    /// `XᵀWX` as a dense symmetric matrix and `XᵀWz`.
    pub fn weighted_normal_equations(&self, w: &[f64], z: &[f64]) -> (SymMatrix, Vec<f64>) {
        let p = self.ncols;
        let mut gram = SymMatrix::zeros(p);
        let mut rhs = vec![0.0; p];
        for r in 0..self.nrows() {
            let wr = w[r];
            if wr == 0.0 {
                continue;
            }
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            for k in a..b {
                let (ck, vk) = (self.cols[k], self.vals[k]);
                rhs[ck] += wr * vk * z[r];
                for l in a..b {
                    let (cl, vl) = (self.cols[l], self.vals[l]);
                    gram.data[ck * p + cl] += wr * vk * vl;
                }
            }
        }
        (gram, rhs)
    }
}

/// Dense square matrix stored row-major; used for symmetric systems.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, data: vec![0.0; n * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    pub fn add_scaled(&mut self, other: &SymMatrix, scale: f64) {
        debug_assert_eq!(self.n, other.n);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        for i in 0..n {
            let row = &self.data[i * n..(i + 1) * n];
            let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            acc += x[i] * s;
        }
        acc
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| self.data[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Lower Cholesky factor `L` with `A = LLᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factorizes `a`, rejecting pivots below `rel_tol * max(diag)`.
    pub fn new(a: &SymMatrix, rel_tol: f64) -> Result<Self> {
        let n = a.n;
        let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
        let floor = rel_tol * max_diag.max(f64::MIN_POSITIVE);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > floor) {
                return Err(Error::RankDeficient { column: j, pivot: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                for k in 0..j {
                    s -= ri[k] * rj[k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// `tr(A⁻¹ B)` for symmetric `B`.
    pub fn trace_of_solve(&self, b: &SymMatrix) -> f64 {
        let n = self.n;
        let mut tr = 0.0;
        let mut col = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                col[i] = b.get(i, j);
            }
            let x = self.solve(&col);
            tr += x[j];
        }
        tr
    }
}
