//! Dense row-major `f64` tensors.
//!
//! Only the handful of operations the networks need are provided, and none
//! of them broadcast: a shape disagreement is always an [`Error::Shape`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::param(format!(
            "tensor shape must be a nonempty list of positive sizes, got {shape:?}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("empty vector")
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![i, r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    /// I.i.d. `N(0, stddev^2)` entries, drawn in row-major order.
    pub fn randn(shape: &[usize], rng: &mut Rng, stddev: f64) -> Result<Self> {
        if !(stddev > 0.0 && stddev.is_finite()) {
            return Err(Error::param(format!(
                "stddev must be positive, got {stddev}"
            )));
        }
        check_shape(shape)?;
        let len = shape.iter().product();
        let data = (0..len).map(|_| stddev * rng.normal()).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    /// Row count of a matrix (panics on other ranks).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    pub fn elementwise(&self, other: &Tensor, op: ElementwiseOp) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "elementwise",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let f = match op {
            ElementwiseOp::Add => |a: f64, b: f64| a + b,
            ElementwiseOp::Sub => |a: f64, b: f64| a - b,
            ElementwiseOp::Mul => |a: f64, b: f64| a * b,
        };
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElementwiseOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElementwiseOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, ElementwiseOp::Mul)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::param(format!(
                "scale factor must be finite, got {c}"
            )));
        }
        Ok(self.map(|x| x * c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Adds the vector `row` (shape `[cols]`) to every row of a matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, c) = self.require_matrix("add_row")?;
        if row.shape != [c] {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums of a matrix, shape `[cols]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (_, c) = self.require_matrix("sum_rows")?;
        let mut out = vec![0.0; c];
        for chunk in self.data.chunks(c) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        Ok(Tensor::vector(out))
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.require_matrix("select_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::param(format!(
                "row index {bad} out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![indices.len(), c], data)
    }

    /// `self += alpha * other`, in place.
    pub fn add_scaled_assign(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add_scaled_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}
