use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Default epsilon added to the column standard deviation in
/// [`standardize_columns`].
pub const DEFAULT_STD_EPS: f64 = 1e-5;

/// Dense row-major array of `f64` values.
///
/// Every constructor that accepts external data rejects non-finite values, so a
/// `Tensor` handed out by a public API is always finite.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero-sized dimension in {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!("shape {shape:?} needs {expected} values, got {}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose data is known to be finite and sized correctly.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Returns `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("expected rank 2, got shape {:?}", self.shape)),
        }
    }

    /// Returns `(B, C, H, W)` for a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => shape_err(format!("expected rank 4, got shape {:?}", self.shape)),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    /// Returns the value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            shape_err(format!("expected a scalar, got shape {:?}", self.shape))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            shape_err(format!("{:?} vs {:?}", self.shape, other.shape))
        }
    }

    /// Selects items along the leading axis, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let lead = self.shape[0];
        let stride = self.len() / lead;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= lead {
                return shape_err(format!("row {i} out of range for {lead} rows"));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }
}

/// `a · b` for rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return shape_err(format!("matmul {:?} x {:?}", a.shape, b.shape));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &a.data[i * k..(i + 1) * k];
        let dst = &mut out[i * m..(i + 1) * m];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2()?;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data[i * m + j];
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Per-column means of a `B×D` tensor.
pub fn column_means(z: &Tensor) -> Result<Vec<f64>> {
    let (b, d) = z.dims2()?;
    let mut means = vec![0.0; d];
    for row in z.data.chunks_exact(d) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= b as f64;
    }
    Ok(means)
}

/// Subtracts each column's batch mean.
pub fn mean_center(z: &Tensor) -> Result<Tensor> {
    let (_, d) = z.dims2()?;
    let means = column_means(z)?;
    let mut out = z.data.clone();
    for row in out.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    Ok(Tensor::from_parts(z.shape.clone(), out))
}

/// Result of a column standardization, keeping what the backward pass needs.
pub(crate) struct Standardized {
    pub out: Tensor,
    pub centered: Tensor,
    /// Population standard deviation per column.
    pub std: Vec<f64>,
}

pub(crate) fn standardize_parts(z: &Tensor, eps: f64) -> Result<Standardized> {
    let (b, d) = z.dims2()?;
    if b < 2 {
        return shape_err(format!("standardization needs at least 2 rows, got {b}"));
    }
    z.check_finite("standardize_columns input")?;
    let centered = mean_center(z)?;
    let mut var = vec![0.0; d];
    for row in centered.data.chunks_exact(d) {
        for (s, &v) in var.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / b as f64).sqrt()).collect();
    let mut out = centered.data.clone();
    for row in out.chunks_exact_mut(d) {
        for (v, s) in row.iter_mut().zip(&std) {
            *v /= s + eps;
        }
    }
    Ok(Standardized {
        out: Tensor::from_parts(z.shape.clone(), out),
        centered,
        std,
    })
}

/// Centers each column and divides it by `(population std + eps)`.
pub fn standardize_columns(z: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(standardize_parts(z, eps)?.out)
}
