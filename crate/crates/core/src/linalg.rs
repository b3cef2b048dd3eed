//! Minimal dense row-major matrix used by the model and classifiers.
//!
//! The workloads here are small enough (tens of thousands of parameters)
//! that a hand-rolled type with exactly the operations the training loop
//! needs is simpler than pulling in a linear-algebra crate, and it keeps
//! summation order explicit, which the bit-reproducibility tests rely on.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Serialize> Serialize for Mat<S> {
    fn serialize<Se: serde::Serializer>(&self, serializer: Se) -> Result<Se::Ok, Se::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("Mat", 3)?;
        st.serialize_field("rows", &self.rows)?;
        st.serialize_field("cols", &self.cols)?;
        st.serialize_field("data", &self.data)?;
        st.end()
    }
}

impl<'de, S: Deserialize<'de>> Deserialize<'de> for Mat<S> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr<S> {
            rows: usize,
            cols: usize,
            data: Vec<S>,
        }
        let r = Repr::deserialize(deserializer)?;
        if r.rows.checked_mul(r.cols) != Some(r.data.len()) {
            return Err(serde::de::Error::custom(format!(
                "matrix shape {}x{} does not match {} stored values",
                r.rows,
                r.cols,
                r.data.len()
            )));
        }
        Ok(Mat { rows: r.rows, cols: r.cols, data: r.data })
    }
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<S>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// y = xᵀ·M for a row vector x of length `rows`; writes into `out`.
    pub fn vec_mul(&self, x: &[S], out: &mut [S]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(out.len(), self.cols);
        out.fill(S::zero());
        for (r, &xi) in x.iter().enumerate() {
            if xi == S::zero() {
                continue;
            }
            let row = self.row(r);
            for (o, &m) in out.iter_mut().zip(row) {
                *o = *o + xi * m;
            }
        }
    }

    /// y = M·v for a column vector v of length `cols`; writes into `out`.
    pub fn mul_vec(&self, v: &[S], out: &mut [S]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = S::zero();
            for (&m, &vi) in row.iter().zip(v) {
                acc = acc + m * vi;
            }
            *o = acc;
        }
    }

    /// M += scale · a ⊗ b (outer product of column a and row b).
    pub fn add_outer(&mut self, a: &[S], b: &[S], scale: S) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for (r, &ai) in a.iter().enumerate() {
            let f = scale * ai;
            if f == S::zero() {
                continue;
            }
            let row = self.row_mut(r);
            for (m, &bi) in row.iter_mut().zip(b) {
                *m = *m + f * bi;
            }
        }
    }

    /// M += scale · other (elementwise).
    pub fn add_scaled(&mut self, other: &Mat<S>, scale: S) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (m, &o) in self.data.iter_mut().zip(&other.data) {
            *m = *m + scale * o;
        }
    }

    /// Matrix product self·other.
    pub fn mat_mul(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let left = self.row(r);
            let dst = out.row_mut(r);
            for (k, &l) in left.iter().enumerate() {
                if l == S::zero() {
                    continue;
                }
                let right = other.row(k);
                for (d, &x) in dst.iter_mut().zip(right) {
                    *d = *d + l * x;
                }
            }
        }
        out
    }
}

/// In-place v += scale · u.
pub fn axpy<S: Scalar>(v: &mut [S], u: &[S], scale: S) {
    assert_eq!(v.len(), u.len());
    for (a, &b) in v.iter_mut().zip(u) {
        *a = *a + scale * b;
    }
}

/// Euclidean norm of a flat slice.
pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_mul_matches_hand_product() {
        // [1 2] · [[1 2 3],[4 5 6]] = [9 12 15]
        let m = Mat::from_rows(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let mut out = vec![0.0f64; 3];
        m.vec_mul(&[1.0, 2.0], &mut out);
        assert_eq!(out, vec![9.0, 12.0, 15.0]);
    }

    #[test]
    fn mul_vec_matches_hand_product() {
        let m = Mat::from_rows(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let mut out = vec![0.0f64; 2];
        m.mul_vec(&[1.0, 1.0, 1.0], &mut out);
        assert_eq!(out, vec![6.0, 15.0]);
    }

    #[test]
    fn outer_product_accumulates() {
        let mut m = Mat::zeros(2, 2);
        m.add_outer(&[1.0, 2.0], &[3.0, 4.0], 1.0f64);
        assert_eq!(m.as_slice(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn mat_mul_matches_hand_product() {
        let a = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let c = a.mat_mul(&b);
        assert_eq!(c.as_slice(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn l2_norm_of_3_4_is_5() {
        assert_eq!(l2_norm(&[3.0f64, 4.0]), 5.0);
    }
}
