use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense row-major array of `f64`.
///
/// Every array built through the public constructors is finite; NaN and
/// infinities are rejected at creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawArray", into = "RawArray")]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawArray> for DenseArray {
    type Error = Error;
    fn try_from(raw: RawArray) -> Result<Self> {
        DenseArray::new(raw.shape, raw.data)
    }
}

impl From<DenseArray> for RawArray {
    fn from(a: DenseArray) -> Self {
        RawArray { shape: a.shape, data: a.data }
    }
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("DenseArray::new", format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "DenseArray::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("DenseArray entry {i}") });
        }
        Ok(DenseArray { shape, data })
    }

    /// Unchecked constructor for kernel outputs; finiteness is checked by callers
    /// that care (losses, optimizer).
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        DenseArray { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        DenseArray::from_raw(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        DenseArray::from_raw(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Result<Self> {
        DenseArray::new(vec![1], vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("DenseArray::from_rows", "ragged rows"));
        }
        DenseArray::new(vec![r, c], rows.concat())
    }

    /// Column vector `[n × 1]`.
    pub fn column(values: &[f64]) -> Result<Self> {
        DenseArray::new(vec![values.len(), 1], values.to_vec())
    }

    /// Single-row matrix `[1 × n]`.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        DenseArray::new(vec![1, values.len()], values.to_vec())
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

    /// Number of rows when viewed as a matrix (first axis).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing axes.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar array {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `idx` gathered in order.
    pub fn select_rows(&self, idx: &[usize]) -> DenseArray {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        DenseArray::from_raw(shape, data)
    }

    /// Stack 2-D arrays with equal column counts vertically.
    pub fn vstack(parts: &[&DenseArray]) -> Result<DenseArray> {
        let c = parts.first().map(|p| p.cols()).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|p| p.cols() != c) {
            return Err(shape_err("vstack", "column counts differ or no parts"));
        }
        let rows = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(DenseArray::from_raw(vec![rows, c], data))
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn hcat(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
        if a.rows() != b.rows() {
            return Err(shape_err("hcat", format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        let (ca, cb) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(a.rows() * (ca + cb));
        for i in 0..a.rows() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Ok(DenseArray::from_raw(vec![a.rows(), ca + cb], data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseArray {
        DenseArray::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }
}

/// Row-major GEMM: `c = op(a) · op(b) + beta · c` where `op(a)` is `m × k`
/// and `op(b)` is `k × n`. `a_t`/`b_t` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
