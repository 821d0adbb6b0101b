use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite tensor entry at {bad}")));
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

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return shape_err("ragged rows");
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A single-row tensor holding `v`.
    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn same_shape(&self, other: &Tensor2) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// `self · wᵀ`: (B×n) times (m×n)ᵀ gives B×m.
    pub fn matmul_transposed(&self, w: &Tensor2) -> Result<Tensor2> {
        if self.cols != w.cols {
            return shape_err(format!(
                "cannot multiply {}x{} by ({}x{})^T",
                self.rows, self.cols, w.rows, w.cols
            ));
        }
        let mut out = Tensor2::zeros(self.rows, w.rows);
        for b in 0..self.rows {
            let x = self.row(b);
            let o = out.row_mut(b);
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(x, w.row(j));
            }
        }
        Ok(out)
    }

    /// `self · w`: (B×m) times (m×n) gives B×n.
    pub fn matmul(&self, w: &Tensor2) -> Result<Tensor2> {
        if self.cols != w.rows {
            return shape_err(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, w.rows, w.cols
            ));
        }
        let mut out = Tensor2::zeros(self.rows, w.cols);
        for b in 0..self.rows {
            let (x, o) = (self.row(b), &mut out.data[b * w.cols..(b + 1) * w.cols]);
            for (k, &xk) in x.iter().enumerate() {
                if xk != 0.0 {
                    axpy(o, xk, w.row(k));
                }
            }
        }
        Ok(out)
    }

    /// Accumulates `selfᵀ · x` into `acc`: (B×m)ᵀ times (B×n) gives m×n.
    pub fn accumulate_transposed_product(&self, x: &Tensor2, acc: &mut Tensor2) -> Result<()> {
        if self.rows != x.rows || acc.rows != self.cols || acc.cols != x.cols {
            return shape_err("outer-product accumulation shape mismatch");
        }
        for b in 0..self.rows {
            let xr = x.row(b);
            for (j, &g) in self.row(b).iter().enumerate() {
                if g != 0.0 {
                    axpy(acc.row_mut(j), g, xr);
                }
            }
        }
        Ok(())
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_non_finite() {
        assert!(matches!(Tensor2::new(2, 2, vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor2::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn products_agree_with_naive_loops() {
        let a = Tensor2::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let w = Tensor2::new(4, 3, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let y = a.matmul_transposed(&w).unwrap();
        for b in 0..2 {
            for j in 0..4 {
                let naive: f64 = (0..3).map(|k| a.get(b, k) * w.get(j, k)).sum();
                assert!((y.get(b, j) - naive).abs() < 1e-14);
            }
        }
        let back = y.matmul(&w).unwrap();
        for b in 0..2 {
            for k in 0..3 {
                let naive: f64 = (0..4).map(|j| y.get(b, j) * w.get(j, k)).sum();
                assert!((back.get(b, k) - naive).abs() < 1e-12);
            }
        }
        let mut acc = Tensor2::zeros(4, 3);
        y.accumulate_transposed_product(&a, &mut acc).unwrap();
        for j in 0..4 {
            for k in 0..3 {
                let naive: f64 = (0..2).map(|b| y.get(b, j) * a.get(b, k)).sum();
                assert!((acc.get(j, k) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (1..=7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 140.0);
    }
}
