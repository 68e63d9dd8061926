//! Dense row-major tensors and the raw kernels the tape is built on.

use crate::error::{Error, Result};

/// Dense n-dimensional array of finite reals, stored row-major.
///
/// A tensor with an empty shape is a scalar. Every dimension is positive and
/// every entry is finite; constructors reject anything else.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} has an empty axis {axis}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry {i} of tensor with shape {shape:?} is {}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose data is already known to be finite and shaped.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("rows have unequal lengths".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor with shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_parts(shape, self.data))
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Size of the last axis; 1 for scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `[m,k] x [k,n]`, accumulated in a fixed order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Accumulates `g [m,n] x b^T` into `out [m,k]` where `b` is `[k,n]`.
pub(crate) fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// Accumulates `a^T x g` into `out [k,n]` where `a` is `[m,k]` and `g` is `[m,n]`.
pub(crate) fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0, 3], vec![]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(t.get(&[0, 2]), 2.0);
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.get(&[1, 0]), 2.0);
    }
}
