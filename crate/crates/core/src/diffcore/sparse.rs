use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Compressed sparse row matrix. Column indices within a row are strictly
/// increasing; explicit zeros are never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SparseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets. Duplicates are summed in
    /// input order; entries summing to zero are dropped.
    pub fn from_triplets<I>(rows: usize, cols: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, T)>,
    {
        let mut per_row: Vec<Vec<(usize, T)>> = vec![Vec::new(); rows];
        for (i, j, v) in triplets {
            if i >= rows || j >= cols {
                return Err(Error::invalid(format!(
                    "triplet ({i}, {j}) outside {rows}x{cols} matrix"
                )));
            }
            per_row[i].push((j, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in per_row {
            // stable sort keeps duplicate summation in input order
            row.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < row.len() {
                let j = row[k].0;
                let mut acc = T::zero();
                while k < row.len() && row[k].0 == j {
                    acc += row[k].1;
                    k += 1;
                }
                if acc != T::zero() {
                    indices.push(j);
                    values.push(acc);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let span = self.indptr[i]..self.indptr[i + 1];
        match self.indices[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => T::zero(),
        }
    }

    /// Row-major iteration over stored entries.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.cols, self.rows, self.triplets().map(|(i, j, v)| (j, i, v)))
            .expect("transpose of a valid matrix is valid")
    }

    /// Returns `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "sparse add",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let trip = self
            .triplets()
            .chain(other.triplets().map(|(i, j, v)| (i, j, v * scale)));
        Self::from_triplets(self.rows, self.cols, trip)
    }

    pub fn scaled(&self, scale: T) -> Self {
        Self::from_triplets(self.rows, self.cols, self.triplets().map(|(i, j, v)| (i, j, v * scale)))
            .expect("scaling a valid matrix is valid")
    }

    /// `out[rows x width] += self * x[cols x width]`, both dense row-major.
    pub fn mul_dense_acc(&self, x: &[T], width: usize, out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols * width);
        debug_assert_eq!(out.len(), self.rows * width);
        for i in 0..self.rows {
            let dst = &mut out[i * width..(i + 1) * width];
            for (j, a) in self.row(i) {
                let src = &x[j * width..(j + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * *s;
                }
            }
        }
    }

    /// `out[cols x width] += self^T * g[rows x width]`.
    pub fn mul_dense_transpose_acc(&self, g: &[T], width: usize, out: &mut [T]) {
        for i in 0..self.rows {
            let src = &g[i * width..(i + 1) * width];
            for (j, a) in self.row(i) {
                let dst = &mut out[j * width..(j + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * *s;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * self.cols];
        for (i, j, v) in self.triplets() {
            out[i * self.cols + j] = v;
        }
        out
    }

    /// Exact (bitwise) symmetry check.
    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.triplets().all(|(i, j, v)| self.get(j, i) == v)
    }

    /// Writes one `i j value` line per stored entry.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (i, j, v) in self.triplets() {
            writeln!(w, "{i} {j} {v}")?;
        }
        Ok(())
    }

    /// Copy keeping only the entries for which `keep(i, j)` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        Self::from_triplets(
            self.rows,
            self.cols,
            self.triplets().filter(|&(i, j, _)| keep(i, j)),
        )
        .expect("subset of a valid matrix is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_zeros_dropped() {
        let m = SparseMatrix::from_triplets(2, 2, [(0, 1, 1.0), (0, 1, 2.0), (1, 0, 1.0), (1, 0, -1.0)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 0.0);
    }

    #[test]
    fn dense_products_match_transpose() {
        let m = SparseMatrix::from_triplets(2, 3, [(0, 0, 1.0), (0, 2, 2.0), (1, 1, -3.0)]).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 4];
        m.mul_dense_acc(&x, 2, &mut out);
        assert_eq!(out, vec![11.0, 14.0, -9.0, -12.0]);
        let mut back = vec![0.0; 6];
        m.transpose().mul_dense_acc(&out, 2, &mut back);
        let mut back2 = vec![0.0; 6];
        m.mul_dense_transpose_acc(&out, 2, &mut back2);
        assert_eq!(back, back2);
    }

    #[test]
    fn triplet_text_format() {
        let m = SparseMatrix::from_triplets(2, 2, [(1, 0, 0.5)]).unwrap();
        let mut buf = Vec::new();
        m.write_triplets(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1 0 0.5\n");
    }

    #[test]
    fn out_of_range_triplet_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, [(2, 0, 1.0)]).is_err());
    }
}
