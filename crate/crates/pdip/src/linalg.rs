//! Sparse matrices and a Markowitz-ordered LU factorization.
//!
//! The factorization uses threshold partial pivoting: at each elimination
//! step the column with the fewest remaining entries is chosen, and inside
//! that column the row with the fewest entries among those whose magnitude
//! is within [`PIVOT_THRESHOLD`] of the column maximum. A pivot whose
//! magnitude falls below a tolerance relative to the largest entry of its
//! original column is
//! reported as singular together with the offending column, so callers can
//! name the variable that has no usable pivot.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

const PIVOT_THRESHOLD: f64 = 0.1;
const SINGULAR_RTOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is singular: no acceptable pivot for column {column}")]
    Singular { column: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Coordinate-format accumulator. Duplicate entries are summed on compression.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub rows: usize,
    pub cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: Vec::new() }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols, "({row},{col}) out of {}x{}", self.rows, self.cols);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    /// Appends all entries of `other` shifted by the given offsets.
    pub fn extend_shifted(&mut self, other: &Triplets, row_offset: usize, col_offset: usize) {
        for &(r, c, v) in &other.entries {
            self.push(r + row_offset, c + col_offset, v);
        }
    }

    /// Appends the transpose of `other` shifted by the given offsets.
    pub fn extend_transposed(&mut self, other: &Triplets, row_offset: usize, col_offset: usize) {
        for &(r, c, v) in &other.entries {
            self.push(c + row_offset, r + col_offset, v);
        }
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_csr(&self) -> CsrMatrix {
        CsrMatrix::from_triplets(self)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for &(r, c, v) in &self.entries {
            d[r][c] += v;
        }
        d
    }
}

/// Compressed sparse row matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_triplets(t: &Triplets) -> Self {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); t.rows];
        for &(r, c, v) in &t.entries {
            *rows[r].entry(c).or_insert(0.0) += v;
        }
        let mut indptr = Vec::with_capacity(t.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for (c, v) in row {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self { rows: t.rows, cols: t.cols, indptr, indices, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// LU factors `P A Q = L U` stored in elimination order.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    /// Pivot row and column per elimination step.
    pivots: Vec<(usize, usize)>,
    /// Multipliers applied to later rows at each step: (row, factor).
    lower: Vec<Vec<(usize, f64)>>,
    /// Pivot row at elimination time, pivot entry excluded.
    upper: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinalgError> {
        if a.rows != a.cols {
            return Err(LinalgError::Dimension { expected: a.rows, got: a.cols });
        }
        let n = a.rows;
        let mut col_tol = vec![f64::MIN_POSITIVE; n];
        for r in 0..n {
            for (c, v) in a.row(r) {
                col_tol[c] = col_tol[c].max(SINGULAR_RTOL * v.abs());
            }
        }

        let mut rows: Vec<BTreeMap<usize, f64>> = (0..n).map(|r| a.row(r).filter(|&(_, v)| v != 0.0).collect()).collect();
        let mut col_rows: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (r, row) in rows.iter().enumerate() {
            for &c in row.keys() {
                col_rows[c].insert(r);
            }
        }
        let mut col_done = vec![false; n];
        let mut row_done = vec![false; n];

        let mut pivots = Vec::with_capacity(n);
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        let mut diag = Vec::with_capacity(n);

        for _ in 0..n {
            // Column with the fewest active entries; empty columns are singular.
            let col = (0..n)
                .filter(|&c| !col_done[c])
                .min_by_key(|&c| col_rows[c].len())
                .expect("at least one active column");
            let col_max = col_rows[col].iter().map(|&r| rows[r][&col].abs()).fold(0.0, f64::max);
            if col_max <= col_tol[col] {
                return Err(LinalgError::Singular { column: col });
            }
            let prow = col_rows[col]
                .iter()
                .copied()
                .filter(|&r| rows[r][&col].abs() >= PIVOT_THRESHOLD * col_max)
                .min_by(|&r1, &r2| {
                    rows[r1]
                        .len()
                        .cmp(&rows[r2].len())
                        .then_with(|| rows[r2][&col].abs().total_cmp(&rows[r1][&col].abs()))
                })
                .expect("column maximum satisfies the threshold");

            let pivot_row = std::mem::take(&mut rows[prow]);
            let pivot = pivot_row[&col];
            for &c in pivot_row.keys() {
                col_rows[c].remove(&prow);
            }
            row_done[prow] = true;
            col_done[col] = true;

            let targets: Vec<usize> = col_rows[col].iter().copied().collect();
            let mut step_lower = Vec::with_capacity(targets.len());
            for r in targets {
                let factor = rows[r].remove(&col).unwrap_or(0.0) / pivot;
                col_rows[col].remove(&r);
                step_lower.push((r, factor));
                for (&c, &v) in pivot_row.iter() {
                    if c == col {
                        continue;
                    }
                    let e = rows[r].entry(c).or_insert_with(|| {
                        col_rows[c].insert(r);
                        0.0
                    });
                    *e -= factor * v;
                }
            }
            lower.push(step_lower);
            upper.push(pivot_row.into_iter().filter(|&(c, _)| c != col).collect());
            diag.push(pivot);
            pivots.push((prow, col));
        }
        debug_assert!(row_done.iter().all(|&d| d));
        Ok(Self { n, pivots, lower, upper, diag })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if b.len() != self.n {
            return Err(LinalgError::Dimension { expected: self.n, got: b.len() });
        }
        let mut work = b.to_vec();
        let mut y = vec![0.0; self.n];
        for (k, &(prow, _)) in self.pivots.iter().enumerate() {
            let yk = work[prow];
            y[k] = yk;
            for &(r, f) in &self.lower[k] {
                work[r] -= f * yk;
            }
        }
        let mut x = vec![0.0; self.n];
        for k in (0..self.n).rev() {
            let (_, col) = self.pivots[k];
            let s: f64 = self.upper[k].iter().map(|&(c, v)| v * x[c]).sum();
            x[col] = (y[k] - s) / self.diag[k];
        }
        Ok(x)
    }

    /// Solve followed by one step of iterative refinement against `a`.
    pub fn solve_refined(&self, a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let mut x = self.solve(b)?;
        let ax = a.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let d = self.solve(&r)?;
        for (xi, di) in x.iter_mut().zip(d) {
            *xi += di;
        }
        Ok(x)
    }
}

/// Factor and solve in one call.
pub fn solve(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    SparseLu::factor(a)?.solve_refined(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.0);
        t.push(1, 1, 4.0);
        let m = t.to_csr();
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn solves_saddle_point_system() {
        // [2 0 1; 0 2 1; 1 1 0] x = [0 0 1] -> x = (0.5, 0.5, -1)
        let mut t = Triplets::new(3, 3);
        t.push(0, 0, 2.0);
        t.push(1, 1, 2.0);
        for i in 0..2 {
            t.push(i, 2, 1.0);
            t.push(2, i, 1.0);
        }
        let x = solve(&t.to_csr(), &[0.0, 0.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14);
        assert!((x[1] - 0.5).abs() < 1e-14);
        assert!((x[2] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_diagonal_needs_pivoting() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 1, 3.0);
        t.push(1, 0, 2.0);
        let x = solve(&t.to_csr(), &[6.0, 4.0]).unwrap();
        assert_eq!(x, vec![2.0, 2.0]);
    }

    #[test]
    fn singular_reports_column() {
        let mut t = Triplets::new(3, 3);
        t.push(0, 0, 1.0);
        t.push(1, 0, 1.0);
        t.push(2, 2, 1.0);
        // column 1 empty
        match SparseLu::factor(&t.to_csr()) {
            Err(LinalgError::Singular { column }) => assert_eq!(column, 1),
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn numerically_dependent_rows_are_singular() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 1, 2.0);
        t.push(1, 0, 2.0);
        t.push(1, 1, 4.0);
        assert!(matches!(SparseLu::factor(&t.to_csr()), Err(LinalgError::Singular { .. })));
    }

    proptest! {
        #[test]
        fn random_diagonally_dominant_systems(
            n in 1usize..12,
            seed_entries in proptest::collection::vec((0usize..12, 0usize..12, -1.0f64..1.0), 0..60),
            rhs in proptest::collection::vec(-5.0f64..5.0, 12),
        ) {
            let mut t = Triplets::new(n, n);
            for i in 0..n {
                t.push(i, i, 20.0);
            }
            for (r, c, v) in seed_entries {
                if r < n && c < n {
                    t.push(r, c, v);
                }
            }
            let a = t.to_csr();
            let b = &rhs[..n];
            let x = solve(&a, b).unwrap();
            let ax = dense_matvec(&a.to_dense(), &x);
            for (ai, bi) in ax.iter().zip(b) {
                prop_assert!((ai - bi).abs() < 1e-10);
            }
        }
    }
}
