use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Network scalar type. `f32-scalar` narrows it; geometry always uses f64.
#[cfg(not(feature = "f32-scalar"))]
pub type Scalar = f64;
#[cfg(feature = "f32-scalar")]
pub type Scalar = f32;

/// Dense row-major 2-D array of scalars.
///
/// A 1×1 tensor doubles as a scalar, an N×1 tensor as a column vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<Scalar>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {rows}x{cols} = {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        let t = Tensor2 { rows, cols, data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<Scalar>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch(format!(
                    "ragged rows: expected width {c}, got {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn scalar(v: Scalar) -> Self {
        Tensor2 {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
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

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Scalar {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Scalar) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Scalar] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Scalar] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a 1×1 tensor.
    pub fn item(&self) -> Scalar {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteValue(format!(
                "{context}: {}x{} tensor contains NaN or Inf",
                self.rows, self.cols
            )))
        }
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// out = self · other  (m×k · k×n)
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor2::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// out = self · otherᵀ  (m×k · (n×k)ᵀ)
    pub fn matmul_nt(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor2::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    /// out = selfᵀ · other  ((m×k)ᵀ · m×n)
    pub fn matmul_tn(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul_tn {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor2::zeros(k, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let b_row = &other.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor2, f: impl Fn(Scalar, Scalar) -> Scalar) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "elementwise {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Tensor2 {
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

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: Scalar) -> Tensor2 {
        self.map(|v| v * c)
    }

    pub fn frobenius_norm(&self) -> Scalar {
        self.data.iter().map(|v| v * v).sum::<Scalar>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> Scalar {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }
}

/// Numerically stable softmax of a slice (max-subtraction).
pub fn softmax(v: &[Scalar]) -> Result<Vec<Scalar>> {
    if v.is_empty() {
        return Err(Error::EmptySoftmax);
    }
    let max = v.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let exps: Vec<Scalar> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: Scalar = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GeLU, tanh approximation:
/// 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu(x: Scalar) -> Scalar {
    const SQRT_2_OVER_PI: Scalar = 0.797_884_560_802_865_4;
    const CUBIC: Scalar = 0.044715;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh())
}

/// d/dx of the tanh-approximation GeLU.
pub fn gelu_grad(x: Scalar) -> Scalar {
    const SQRT_2_OVER_PI: Scalar = 0.797_884_560_802_865_4;
    const CUBIC: Scalar = 0.044715;
    let inner = SQRT_2_OVER_PI * (x + CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let s = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_single_element() {
        for x in [-3.0, 0.0, 17.25] {
            assert_eq!(softmax(&[x]).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn softmax_matches_plain_evaluation() {
        // Direct exp/sum without the max shift.
        let v = [1.0, 2.0, 3.0];
        let exps: Vec<Scalar> = v.iter().map(|x| x.exp()).collect();
        let sum: Scalar = exps.iter().sum();
        let expected: Vec<Scalar> = exps.iter().map(|e| e / sum).collect();
        let got = softmax(&v).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_errors() {
        assert!(matches!(softmax(&[]), Err(Error::EmptySoftmax)));
    }

    #[test]
    fn sigmoid_symmetry_and_saturation() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(50.0) > 1.0 - 1e-20);
        for x in [-3.0, -0.5, 0.7, 4.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
        // Extended-precision value of 1/(1+e^{-1}).
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-14);
    }

    #[test]
    fn matmul_shapes_checked() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(4, 5);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor2::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor2::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let d = a.matmul_nt(&b.transpose()).unwrap();
        assert_eq!(c.data(), d.data());
        let e = a.transpose().matmul_tn(&b).unwrap();
        assert_eq!(c.data(), e.data());
    }

    #[test]
    fn from_vec_rejects_nonfinite() {
        assert!(Tensor2::from_vec(1, 2, vec![1.0, Scalar::NAN]).is_err());
    }
}
