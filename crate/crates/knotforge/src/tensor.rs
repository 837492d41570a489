//! Dense row-major f32 tensors and the small op set everything else builds on.
//!
//! Reduction order is fixed (sequential over the contracted index) so that
//! higher-level bit-exactness checks — knot fusion, the k=0 degeneration —
//! are assertable. Every public operation verifies its output is finite.

use crate::{KnotError, Result};

/// Dense tensor of 32-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a flat buffer. Errors if the element count does
    /// not match the shape or the data contains non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KnotError::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let t = Self {
            shape: shape.to_vec(),
            data,
        };
        t.ensure_finite("from_vec")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// n×n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        let c = self.cols();
        self.data[row * c + col] = value;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    fn require_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(KnotError::Shape(format!(
                "{what} expects a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(KnotError::NonFinite(what.to_string()))
        }
    }

    /// Matrix product with a fixed sequential reduction over the inner index.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, ka) = self.require_2d("matmul lhs")?;
        let (kb, n) = other.require_2d("matmul rhs")?;
        if ka != kb {
            return Err(KnotError::Shape(format!(
                "matmul inner dims disagree: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let lhs = &self.data[i * ka..(i + 1) * ka];
            for j in 0..n {
                let mut acc = 0.0f32;
                for (k, &l) in lhs.iter().enumerate() {
                    acc += l * other.data[k * n + j];
                }
                out.data[i * n + j] = acc;
            }
        }
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    /// Row-wise masked softmax. Masked entries come out exactly 0; each row
    /// is max-subtracted over its unmasked entries before exponentiation.
    pub fn softmax_rows(&self, mask: &[bool]) -> Result<Tensor> {
        let (m, n) = self.require_2d("softmax_rows")?;
        if mask.len() != m * n {
            return Err(KnotError::Shape(format!(
                "softmax mask has {} entries for a {m}x{n} tensor",
                mask.len()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mrow = &mask[i * n..(i + 1) * n];
            let mut max = f32::NEG_INFINITY;
            for (v, &keep) in row.iter().zip(mrow) {
                if keep && *v > max {
                    max = *v;
                }
            }
            if max == f32::NEG_INFINITY {
                return Err(KnotError::DegenerateRow(i));
            }
            let mut sum = 0.0f32;
            for (j, (&v, &keep)) in row.iter().zip(mrow).enumerate() {
                if keep {
                    let e = (v - max).exp();
                    out.data[i * n + j] = e;
                    sum += e;
                }
            }
            for (j, &keep) in mrow.iter().enumerate() {
                if keep {
                    out.data[i * n + j] /= sum;
                }
            }
        }
        out.ensure_finite("softmax_rows")?;
        Ok(out)
    }

    /// Per-row layer normalization over the last dimension.
    pub fn layer_norm(&self, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
        let (m, n) = self.require_2d("layer_norm")?;
        if gamma.len() != n || beta.len() != n {
            return Err(KnotError::Shape(format!(
                "layer_norm params len {}/{} for {n} columns",
                gamma.len(),
                beta.len()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut mean = 0.0f32;
            for &v in row {
                mean += v;
            }
            mean /= n as f32;
            let mut var = 0.0f32;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out.data[i * n + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
            }
        }
        out.ensure_finite("layer_norm")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(KnotError::Shape(format!(
                "add shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("add")?;
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(KnotError::Shape(format!(
                "sub shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("sub")?;
        Ok(out)
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a * s).collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("scale")?;
        Ok(out)
    }

    /// Add a single row vector to every row of a 2-D tensor.
    pub fn add_row(&self, row: &[f32]) -> Result<Tensor> {
        let (m, n) = self.require_2d("add_row")?;
        if row.len() != n {
            return Err(KnotError::Shape(format!(
                "add_row len {} for {n} columns",
                row.len()
            )));
        }
        let mut out = self.clone();
        for i in 0..m {
            for (j, &r) in row.iter().enumerate() {
                out.data[i * n + j] += r;
            }
        }
        out.ensure_finite("add_row")?;
        Ok(out)
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Result<Tensor> {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        let data = self
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("gelu")?;
        Ok(out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (m, n) = self.require_2d("transpose2")?;
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    /// Columns `lo..hi` of a 2-D tensor as a new tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let (m, n) = self.require_2d("slice_cols")?;
        if lo > hi || hi > n {
            return Err(KnotError::Index(format!("column slice {lo}..{hi} of {n}")));
        }
        let w = hi - lo;
        let mut out = Tensor::zeros(&[m, w]);
        for i in 0..m {
            out.data[i * w..(i + 1) * w].copy_from_slice(&self.data[i * n + lo..i * n + hi]);
        }
        Ok(out)
    }

    /// Concatenate 2-D tensors left-to-right (same row count).
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let m = parts
            .first()
            .ok_or_else(|| KnotError::Shape("concat_cols of nothing".into()))?
            .rows();
        let mut total = 0;
        for p in parts {
            p.require_2d("concat_cols")?;
            if p.rows() != m {
                return Err(KnotError::Shape("concat_cols row counts differ".into()));
            }
            total += p.cols();
        }
        let mut out = Tensor::zeros(&[m, total]);
        for i in 0..m {
            let mut off = 0;
            for p in parts {
                let n = p.cols();
                out.data[i * total + off..i * total + off + n].copy_from_slice(p.row(i));
                off += n;
            }
        }
        Ok(out)
    }

    /// Stack 2-D tensors top-to-bottom (same column count).
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let n = parts
            .first()
            .ok_or_else(|| KnotError::Shape("concat_rows of nothing".into()))?
            .cols();
        let mut total = 0;
        for p in parts {
            p.require_2d("concat_rows")?;
            if p.cols() != n {
                return Err(KnotError::Shape("concat_rows column counts differ".into()));
            }
            total += p.rows();
        }
        let mut data = Vec::with_capacity(total * n);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Ok(Tensor {
            shape: vec![total, n],
            data,
        })
    }

    pub fn l2_norm(&self) -> f32 {
        let mut acc = 0.0f32;
        for &v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bitwise equality (exact, including zero signs).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
