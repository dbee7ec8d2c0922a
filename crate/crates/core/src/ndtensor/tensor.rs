use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Work (in multiply-adds) above which matrix products split rows across threads.
const PAR_THRESHOLD: usize = 1 << 16;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows of a 2-D tensor (or the leading extent otherwise).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-index slice.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn cols(&self) -> usize {
        self.row_len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Sum with 64-bit accumulation.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0_f64, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_2d("transpose")?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// `self · other` for matrices.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {}x{} · {}x{}", m, k, k2, n),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let a = &self.data;
        let b = &other.data;
        let kernel = |i: usize, row: &mut [T]| {
            let arow = &a[i * k..(i + 1) * k];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        };
        if n > 0 {
            if m * k * n >= PAR_THRESHOLD {
                out.par_chunks_mut(n)
                    .enumerate()
                    .for_each(|(i, row)| kernel(i, row));
            } else {
                out.chunks_mut(n).enumerate().for_each(|(i, row)| kernel(i, row));
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        let (r, m) = self.expect_2d("t_matmul")?;
        let (r2, n) = other.expect_2d("t_matmul")?;
        if r != r2 {
            return Err(Error::shape(
                "t_matmul",
                format!("row counts differ: {} vs {}", r, r2),
            ));
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![T::zero(); m * n];
        // Each block of output rows streams both inputs once, row by row.
        let kernel = |i0: usize, block: &mut [T]| {
            let rows = block.len() / n;
            for p in 0..r {
                let arow = &a[p * m + i0..p * m + i0 + rows];
                let brow = &b[p * n..(p + 1) * n];
                for (&aip, orow) in arow.iter().zip(block.chunks_mut(n)) {
                    if aip == T::zero() {
                        continue;
                    }
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        };
        if n > 0 && m > 0 {
            if m * r * n >= PAR_THRESHOLD {
                let rows = m.div_ceil(rayon::current_num_threads());
                out.par_chunks_mut(rows * n)
                    .enumerate()
                    .for_each(|(c, block)| kernel(c * rows, block));
            } else {
                kernel(0, &mut out);
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.expect_2d("matmul_t")?;
        let (n, k2) = other.expect_2d("matmul_t")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("column counts differ: {} vs {}", k, k2),
            ));
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![T::zero(); m * n];
        let kernel = |i: usize, row: &mut [T]| {
            let arow = &a[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                *o = acc;
            }
        };
        if n > 0 {
            if m * k * n >= PAR_THRESHOLD {
                out.par_chunks_mut(n)
                    .enumerate()
                    .for_each(|(i, row)| kernel(i, row));
            } else {
                out.chunks_mut(n).enumerate().for_each(|(i, row)| kernel(i, row));
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// Selects leading-index slices (rows) in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let n = self.rows();
        let w = self.row_len();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    what: "tensor rows",
                    index: i,
                    size: n,
                });
            }
            out.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor::new(&shape, out)
    }

    /// Leading-index slices `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let n = self.rows();
        if start > end || end > n {
            return Err(Error::shape(
                "slice_rows",
                format!("range {}..{} outside {} rows", start, end, n),
            ));
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(&shape, self.data[start * w..end * w].to_vec())
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.expect_2d("slice_cols")?;
        if start > end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("range {}..{} outside {} columns", start, end, c),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::new(&[r, w], out)
    }
}

impl Tensor<f64> {
    /// Frobenius-norm relative difference, `‖self − other‖ / ‖other‖`.
    pub fn rel_diff(&self, other: &Self) -> f64 {
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = other.sum_sq().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let i2 = Tensor::<f64>::eye(2);
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn orthogonal_product() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let b = Tensor::from_rows(&[vec![0.0], vec![5.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[4, 2], |_| rng.gen_range(-1.0..1.0));
        let got = a.matmul(&b).unwrap();
        let want = naive(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let tn = a.transpose().unwrap().t_matmul(&b).unwrap();
        let nt = a.matmul_t(&b.transpose().unwrap()).unwrap();
        assert!(tn.rel_diff(&want) < 1e-14);
        assert!(nt.rel_diff(&want) < 1e-14);
    }

    #[test]
    fn mismatch_is_reported() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&a).unwrap_err();
        assert!(err.to_string().contains("inner extents"));
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let g = t.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        assert!(t.gather_rows(&[2]).is_err());
        assert_eq!(t.slice_cols(1, 3).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
