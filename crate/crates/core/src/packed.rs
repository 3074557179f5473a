//! Strict upper-triangle storage for symmetric pairwise quantities.
//!
//! Entry `(i, j)` and `(j, i)` share one slot, so symmetry holds bit-exactly.
//! The diagonal is not stored.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedSymmetric<T> {
    n: usize,
    data: Vec<T>,
}

#[inline]
pub(crate) fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Offset of the first stored entry of row `i` (entries `(i, i+1..n)`).
#[inline]
pub(crate) fn row_offset(n: usize, i: usize) -> usize {
    i * n - i * (i + 1) / 2
}

impl<T: Copy> PackedSymmetric<T> {
    pub fn filled(n: usize, value: T) -> Self {
        Self {
            n,
            data: vec![value; pair_count(n)],
        }
    }

    /// Builds from row-major strict-upper rows, row `i` holding `n - i - 1` entries.
    pub fn from_rows(n: usize, rows: Vec<Vec<T>>) -> Self {
        debug_assert_eq!(rows.len(), n);
        let mut data = Vec::with_capacity(pair_count(n));
        for (i, row) in rows.into_iter().enumerate() {
            debug_assert_eq!(row.len(), n - i - 1);
            data.extend(row);
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i != j && i < self.n && j < self.n);
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        row_offset(self.n, a) + (b - a - 1)
    }

    /// Value of off-diagonal entry `(i, j)`. Panics when `i == j`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        assert!(i != j, "diagonal is not stored");
        self.data[self.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        assert!(i != j, "diagonal is not stored");
        let k = self.index(i, j);
        self.data[k] = value;
    }

    /// Stored entries of row `i` to the right of the diagonal.
    pub fn upper_row(&self, i: usize) -> &[T] {
        let start = row_offset(self.n, i);
        &self.data[start..start + (self.n - i - 1)]
    }

    pub fn upper_row_mut(&mut self, i: usize) -> &mut [T] {
        let start = row_offset(self.n, i);
        let n = self.n;
        &mut self.data[start..start + (n - i - 1)]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn to_dense(&self, diagonal: T) -> DMatrix<T>
    where
        T: nalgebra::Scalar,
    {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                diagonal.clone()
            } else {
                self.get(i, j)
            }
        })
    }
}
