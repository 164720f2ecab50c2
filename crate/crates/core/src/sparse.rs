//! Compressed sparse row storage on a fixed, shareable pattern.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-major sorted sparsity pattern of a square `n × n` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsityPattern {
    /// Builds the pattern from arbitrary `(row, col)` pairs; duplicates merge.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, j) in pairs {
            assert!(i < n && j < n, "pair ({i}, {j}) out of range for n = {n}");
            rows[i].push(j);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Position of `(i, j)` in the value array.
    pub fn offset(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.n {
            return None;
        }
        let start = self.row_ptr[i];
        self.row(i).binary_search(&j).ok().map(|k| start + k)
    }

    /// The `(row, col)` pair stored at `offset`.
    pub fn entry(&self, offset: usize) -> (usize, usize) {
        let i = self.row_ptr.partition_point(|&p| p <= offset) - 1;
        (i, self.col_idx[offset])
    }

    /// Iterates `(row, col)` in lexicographic order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).iter().map(move |&j| (i, j)))
    }

    /// Zero-based column-stacking index of `(i, j)`: `n * i + j`.
    pub fn vec_index(&self, i: usize, j: usize) -> usize {
        self.n * i + j
    }

    pub fn is_subset_of(&self, other: &SparsityPattern) -> bool {
        self.n == other.n && self.entries().all(|(i, j)| other.offset(i, j).is_some())
    }
}

/// Sparse matrix whose values are aligned with a shared pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        Self { pattern, values }
    }

    pub fn from_values(pattern: Arc<SparsityPattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a pattern with {} entries",
                values.len(),
                pattern.nnz()
            )));
        }
        Ok(Self { pattern, values })
    }

    /// Sums duplicate triplets.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let pattern = Arc::new(SparsityPattern::from_pairs(
            n,
            triplets.iter().map(|&(i, j, _)| (i, j)),
        ));
        let mut m = Self::zeros(pattern);
        for &(i, j, v) in triplets {
            m.add(i, j, v).expect("pattern built from the same triplets");
        }
        m
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        match self.pattern.offset(i, j) {
            Some(p) => {
                self.values[p] += v;
                Ok(())
            }
            None => Err(Error::PatternOverflow { row: i, col: j }),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.offset(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let rp = self.pattern.row_ptr();
        let ci = self.pattern.col_idx();
        (0..n)
            .map(|i| {
                (rp[i]..rp[i + 1])
                    .map(|p| self.values[p] * x[ci[p]])
                    .sum()
            })
            .collect()
    }

    pub fn mul_dvec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.mul_vec(x.as_slice()))
    }

    /// `self * B` for a dense `B` with `n` rows.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        let rp = self.pattern.row_ptr();
        let ci = self.pattern.col_idx();
        let mut out = DMatrix::zeros(n, b.ncols());
        for c in 0..b.ncols() {
            let col = b.column(c);
            for i in 0..n {
                let mut s = 0.0;
                for p in rp[i]..rp[i + 1] {
                    s += self.values[p] * col[ci[p]];
                }
                out[(i, c)] = s;
            }
        }
        out
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.mul_vec(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut d = DMatrix::zeros(n, n);
        for (p, (i, j)) in self.pattern.entries().enumerate() {
            d[(i, j)] += self.values[p];
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        self.pattern
            .entries()
            .zip(&self.values)
            .map(|((i, j), &v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    pub fn row_is_zero(&self, i: usize) -> bool {
        let rp = self.pattern.row_ptr();
        self.values[rp[i]..rp[i + 1]].iter().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_lookup_roundtrip() {
        let p = SparsityPattern::from_pairs(4, [(3, 1), (0, 0), (1, 2), (3, 1), (1, 0)]);
        assert_eq!(p.nnz(), 4);
        let e: Vec<_> = p.entries().collect();
        assert_eq!(e, vec![(0, 0), (1, 0), (1, 2), (3, 1)]);
        for (k, &(i, j)) in e.iter().enumerate() {
            assert_eq!(p.offset(i, j), Some(k));
            assert_eq!(p.entry(k), (i, j));
        }
        assert_eq!(p.offset(2, 2), None);
        assert_eq!(p.vec_index(3, 1), 13);
    }

    #[test]
    fn triplets_and_products() {
        let m = CsrMatrix::from_triplets(
            3,
            &[(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 2.0), (2, 2, 1.0), (0, 0, 1.0)],
        );
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.mul_vec(&[1.0, 1.0, 1.0]), vec![2.0, 1.0, 1.0]);
        assert_eq!(m.asymmetry(), 0.0);
        let d = m.to_dense();
        let x = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(m.mul_dense(&x), &d * &x);
        let mut m2 = m.clone();
        assert!(matches!(m2.add(2, 0, 1.0), Err(Error::PatternOverflow { row: 2, col: 0 })));
    }
}
