//! Dense row-major matrices, seeded randomness and the finite-difference
//! gradient oracle.

mod gemm;
pub mod gradcheck;
pub mod rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use gemm::View;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use rng::Rng;

/// Dense `rows × cols` matrix of `f64` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}×{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// One-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        // chunks_exact would yield nothing for zero-width rows
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    fn view(&self, transposed: bool) -> View<'_> {
        if transposed {
            View {
                data: &self.data,
                row_stride: 1,
                col_stride: self.cols,
            }
        } else {
            View {
                data: &self.data,
                row_stride: self.cols,
                col_stride: 1,
            }
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul: {}×{} · {}×{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm::gemm(
            self.rows,
            other.cols,
            self.cols,
            self.view(false),
            other.view(false),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::invalid(format!(
                "t_matmul: ({}×{})ᵀ · {}×{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm::gemm(
            self.cols,
            other.cols,
            self.rows,
            self.view(true),
            other.view(false),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::invalid(format!(
                "matmul_t: {}×{} · ({}×{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm::gemm(
            self.rows,
            other.rows,
            self.cols,
            self.view(false),
            other.view(true),
            &mut out.data,
        );
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += s · other`.
    pub fn add_scaled_assign(&mut self, other: &Matrix, s: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds `bias[c]` to every entry of column `c`.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::invalid(format!(
                "bias of length {} for {} columns",
                bias.len(),
                self.cols
            )));
        }
        for r in 0..self.rows {
            for (v, &b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One CSV line per row, no header, shortest round-trip float formatting.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for row in self.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Per-row argmax; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.row_iter().map(argmax).collect()
    }
}

/// Index of the largest entry, lowest index on ties. Empty slices give 0.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of `temperature · z`, computed with per-row max
/// subtraction so large temperatures do not overflow.
pub fn softmax_rows(z: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut out = z.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    // scaling before subtracting makes softmax(z, T) bit-identical to softmax(T·z, 1)
    let scaled_max = temperature * max;
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (temperature * *v - scaled_max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Elementwise logistic sigmoid.
pub fn logistic(z: &Matrix) -> Matrix {
    z.map(sigmoid)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian(1.0))
    }

    #[test]
    fn identity_times_a_is_a() {
        let mut rng = Rng::new(1);
        let a = random_matrix(&mut rng, 3, 5);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_checked_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[3.0], [7.0]]).unwrap());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        // sizes straddle the blocking constants
        for &(m, k, n) in &[(1, 1, 1), (5, 3, 9), (130, 257, 17), (4, 600, 33), (129, 8, 8)] {
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, n);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            let diff = fast.sub(&slow).unwrap().max_abs();
            assert!(diff <= 1e-12, "{m}x{k}x{n}: {diff}");
        }
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = Rng::new(8);
        let a = random_matrix(&mut rng, 37, 12);
        let b = random_matrix(&mut rng, 37, 21);
        let c = random_matrix(&mut rng, 19, 12);
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        assert_eq!(a.matmul_t(&c).unwrap(), a.matmul(&c.transpose()).unwrap());
    }

    #[test]
    fn dispatched_kernel_is_bit_identical_to_portable() {
        let mut rng = Rng::new(9);
        let a = random_matrix(&mut rng, 70, 300);
        let b = random_matrix(&mut rng, 300, 45);
        let mut portable = vec![0.0; 70 * 45];
        gemm::gemm_portable(70, 45, 300, a.view(false), b.view(false), &mut portable);
        assert_eq!(a.matmul(&b).unwrap().data(), &portable[..]);

        #[cfg(target_arch = "x86_64")]
        {
            let mut simd = vec![0.0; 70 * 45];
            if std::arch::is_x86_feature_detected!("avx2") {
                unsafe { gemm::gemm_avx2(70, 45, 300, a.view(false), b.view(false), &mut simd) };
                assert_eq!(simd, portable);
            }
            if std::arch::is_x86_feature_detected!("avx512f") {
                unsafe { gemm::gemm_avx512(70, 45, 300, a.view(false), b.view(false), &mut simd) };
                assert_eq!(simd, portable);
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::InvalidArgument(_))));
        assert!(a.t_matmul(&Matrix::zeros(3, 1)).is_err());
        assert!(a.matmul_t(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let z = Matrix::row_vector(&[0.0, 0.0, 0.0]);
        let q = softmax_rows(&z, 1.0).unwrap();
        for &v in q.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let q = softmax_rows(&Matrix::row_vector(&[1.0, 0.0]), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((q.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((q.get(0, 0) - 0.73106).abs() < 1e-5);
        assert!((q.get(0, 1) - 0.26894).abs() < 1e-5);

        let q = softmax_rows(&Matrix::row_vector(&[1.0, 0.9, 0.0]), 1000.0).unwrap();
        assert!((q.get(0, 0) - 1.0).abs() < 1e-6);
        assert!(q.get(0, 1) < 1e-6 && q.get(0, 2) < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let z = Matrix::row_vector(&[1.0, 2.0]);
        assert!(softmax_rows(&z, 0.0).is_err());
        assert!(softmax_rows(&z, -1.0).is_err());
        assert!(softmax_rows(&z, f64::NAN).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let q = softmax_rows(&Matrix::row_vector(&[1e6, 0.0, -1e6]), 50.0).unwrap();
        assert!(q.is_finite());
        assert_eq!(q.get(0, 0), 1.0);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    fn small_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |data| Matrix::new(r, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..12, k in 1usize..12, l in 1usize..12, n in 1usize..12) {
            let mut rng = Rng::new(seed);
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, l);
            let c = random_matrix(&mut rng, l, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(right.max_abs()).max(1.0);
            prop_assert!(left.sub(&right).unwrap().max_abs() / scale <= 1e-10);
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(z in small_matrix(4, 6), shift in -50.0f64..50.0, t in 0.1f64..20.0) {
            let q = softmax_rows(&z, t).unwrap();
            for row in q.row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            let shifted = softmax_rows(&z.map(|v| v + shift), t).unwrap();
            prop_assert!(q.sub(&shifted).unwrap().max_abs() <= 1e-12);
        }

        #[test]
        fn softmax_temperature_is_logit_scaling(z in small_matrix(3, 5), t in 0.1f64..20.0) {
            let direct = softmax_rows(&z, t).unwrap();
            let scaled = softmax_rows(&z.scale(t), 1.0).unwrap();
            prop_assert_eq!(direct, scaled);
        }
    }
}
