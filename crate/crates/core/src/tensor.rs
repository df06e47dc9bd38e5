//! Dense row-major matrices over f64 and the handful of batched ops the
//! rest of the crate is built from.
//!
//! Everything here is deliberately plain: no broadcasting beyond adding a
//! row vector, no views, no SIMD. Batches are small enough that clarity
//! wins over cleverness, and keeping a single concrete layout makes the
//! numeric behaviour easy to reason about and reproduce.

use crate::error::{CoreError, Result};

/// Row sums may drift from exactly 1.0 through softmax round-off; anything
/// beyond this is treated as a caller bug rather than noise.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// A dense `rows x cols` matrix of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    /// Builds a tensor from a flat row-major buffer. The buffer length must
    /// equal `rows * cols` and every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::Domain {
                op: "Tensor2::new",
                msg: format!(
                    "buffer length {} does not match {}x{}",
                    data.len(),
                    rows,
                    cols
                ),
            });
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Domain {
                op: "Tensor2::new",
                msg: format!("non-finite entry at flat index {bad}"),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Convenience constructor from nested slices; rows must be equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(CoreError::Domain {
                op: "Tensor2::from_rows",
                msg: "ragged rows".to_string(),
            });
        }
        let data: Vec<f64> = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Self::new(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product `self * other`. Inner dimensions must agree.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2 {
        Tensor2::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor2 {
        self.map(|v| v * c)
    }

    fn zip_with(&self, other: &Tensor2, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(CoreError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// Adds `row` (a 1 x cols tensor) to every row; the only broadcast the
    /// crate supports, used for bias terms.
    pub fn add_row_vector(&self, row: &Tensor2) -> Result<Tensor2> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_vector",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums collected into a 1 x cols tensor.
    pub fn col_sums(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Gathers the given rows (in order, repeats allowed) into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor2> {
        if let Some(&bad) = idx.iter().find(|&&r| r >= self.rows) {
            return Err(CoreError::Domain {
                op: "select_rows",
                msg: format!("row index {bad} out of range for {} rows", self.rows),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Ok(Tensor2 {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    /// Row-wise softmax with the usual max-shift so large logits cannot
    /// overflow.
    pub fn softmax_rows(&self) -> Tensor2 {
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Row-wise log-softmax; exact up to round-off where softmax underflows.
    pub fn log_softmax_rows(&self) -> Tensor2 {
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= log_sum;
            }
        }
        out
    }

    /// Shannon entropy of each row in nats, with 0 * ln 0 taken as 0.
    ///
    /// Rows must be probability vectors: non-negative and summing to 1
    /// within [`ROW_SUM_TOL`], otherwise the call is a domain error.
    pub fn entropy_rows(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(CoreError::Domain {
                    op: "entropy_rows",
                    msg: format!("row {r} sums to {sum}, not a distribution"),
                });
            }
            if let Some(c) = row.iter().position(|&p| p < 0.0) {
                return Err(CoreError::Domain {
                    op: "entropy_rows",
                    msg: format!("row {r} has negative mass at column {c}"),
                });
            }
            let h = row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            out.push(h);
        }
        Ok(out)
    }

    /// Index of the row maximum; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    /// Reference product: textbook triple loop, kept independent of the
    /// implementation above.
    fn matmul_naive(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor2, b: &Tensor2) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn random_tensor(rows: usize, cols: usize, rng: &mut RngState) -> Tensor2 {
        Tensor2::from_fn(rows, cols, |_, _| rng.next_gaussian())
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut rng = RngState::new(11);
        let a = random_tensor(4, 4, &mut rng);
        let i = Tensor2::identity(4);
        assert_eq!(a.matmul(&i).unwrap(), a);
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor2::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor2::from_rows(&[&[3.0], &[4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c.get(0, 0), 11.0);
    }

    #[test]
    fn matmul_matches_naive_reference() {
        let mut rng = RngState::new(7);
        let a = random_tensor(5, 7, &mut rng);
        let b = random_tensor(7, 3, &mut rng);
        let diff = max_abs_diff(&a.matmul(&b).unwrap(), &matmul_naive(&a, &b));
        assert!(diff <= 1e-12, "diff {diff}");
    }

    #[test]
    fn matmul_matches_naive_on_random_shapes() {
        let mut rng = RngState::new(99);
        for _ in 0..100 {
            let m = 1 + rng.next_below(8);
            let k = 1 + rng.next_below(8);
            let n = 1 + rng.next_below(8);
            let a = random_tensor(m, k, &mut rng);
            let b = random_tensor(k, n, &mut rng);
            let diff = max_abs_diff(&a.matmul(&b).unwrap(), &matmul_naive(&a, &b));
            assert!(diff <= 1e-12, "{m}x{k} * {k}x{n}: diff {diff}");
        }
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(4, 2);
        match a.matmul(&b) {
            Err(CoreError::ShapeMismatch { .. }) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn constructor_rejects_non_finite() {
        assert!(Tensor2::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor2::new(1, 2, vec![f64::INFINITY, 0.0]).is_err());
        assert!(Tensor2::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let s = Tensor2::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap().softmax_rows();
        for c in 0..3 {
            assert!((s.get(0, c) - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let s = Tensor2::from_rows(&[&[1000.0, 0.0]]).unwrap().softmax_rows();
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 1.0).abs() <= 1e-12);
        assert!(s.get(0, 1).abs() <= 1e-12);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Moderate logits where the unshifted textbook formula is exact.
        let z = [1.0, 2.0, 3.0];
        let s = Tensor2::from_rows(&[&z]).unwrap().softmax_rows();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for (c, &v) in z.iter().enumerate() {
            assert!((s.get(0, c) - v.exp() / denom).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = RngState::new(3);
        for _ in 0..50 {
            let z = random_tensor(4, 6, &mut rng).scale(5.0);
            let s = z.softmax_rows();
            for r in 0..4 {
                let sum: f64 = s.row(r).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
            let shifted = z.map(|v| v + 123.456).softmax_rows();
            assert!(max_abs_diff(&s, &shifted) <= 1e-12);
        }
    }

    #[test]
    fn log_softmax_agrees_with_softmax_log() {
        let mut rng = RngState::new(5);
        let z = random_tensor(3, 5, &mut rng).scale(3.0);
        let a = z.log_softmax_rows();
        let b = z.softmax_rows().map(f64::ln);
        assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn entropy_frozen_values() {
        let t = Tensor2::from_rows(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.25, 0.25, 0.25, 0.25],
        ])
        .unwrap();
        let h = t.entropy_rows().unwrap();
        assert!(h[0].abs() <= 1e-15);
        // ln 4
        assert!((h[1] - 1.3862943611198906).abs() <= 1e-12);

        let m = Tensor2::from_rows(&[&[0.5, 0.25, 0.25]]).unwrap();
        let hm = m.entropy_rows().unwrap()[0];
        assert!((hm - 1.0397207708399179).abs() <= 1e-12);
    }

    #[test]
    fn entropy_rejects_unnormalized_rows() {
        let t = Tensor2::from_rows(&[&[0.5, 0.4]]).unwrap();
        match t.entropy_rows() {
            Err(CoreError::Domain { .. }) => {}
            other => panic!("expected domain error, got {other:?}"),
        }
        let neg = Tensor2::from_rows(&[&[1.5, -0.5]]).unwrap();
        assert!(neg.entropy_rows().is_err());
    }

    #[test]
    fn entropy_bounds_and_permutation_invariance() {
        let mut rng = RngState::new(17);
        for _ in 0..50 {
            let c = 2 + rng.next_below(7);
            let logits = random_tensor(1, c, &mut rng).scale(2.0);
            let p = logits.softmax_rows();
            let h = p.entropy_rows().unwrap()[0];
            assert!(h >= 0.0 && h <= (c as f64).ln() + 1e-12);

            let mut perm: Vec<f64> = p.row(0).to_vec();
            perm.reverse();
            let hp = Tensor2::new(1, c, perm).unwrap().entropy_rows().unwrap()[0];
            assert!((h - hp).abs() <= 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor2::from_rows(&[&[1.0, 3.0, 3.0], &[2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(t.argmax_rows(), vec![1, 0]);
    }

    #[test]
    fn add_row_vector_broadcasts_bias() {
        let x = Tensor2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor2::from_rows(&[&[10.0, 20.0]]).unwrap();
        let y = x.add_row_vector(&b).unwrap();
        assert_eq!(y, Tensor2::from_rows(&[&[11.0, 22.0], &[13.0, 24.0]]).unwrap());
    }
}
