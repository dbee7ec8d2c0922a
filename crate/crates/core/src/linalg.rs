//! Thin wrappers over nalgebra for the H×H capacitance matrix and the Q×Q
//! view covariance: Cholesky factor, solves, log-determinant, symmetric
//! eigendecomposition.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

fn to_na(a: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

fn from_na(m: &DMatrix<f64>) -> Tensor<f64> {
    let (r, c) = m.shape();
    Tensor::from_fn(&[r, c], |i| m[(i / c, i % c)])
}

/// Cholesky factorisation of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct CholFactor {
    inner: Cholesky<f64, Dyn>,
}

impl CholFactor {
    pub fn new(a: &Tensor<f64>) -> Result<Self> {
        let n = square_dim(a, "cholesky")?;
        if !a.all_finite() {
            return Err(Error::NonFinite("matrix passed to cholesky".into()));
        }
        let inner = Cholesky::new(to_na(a)).ok_or(Error::NotPositiveDefinite(n))?;
        Ok(CholFactor { inner })
    }

    pub fn dim(&self) -> usize {
        self.inner.l_dirty().nrows()
    }

    /// Lower-triangular `L` with `L·Lᵀ = a`.
    pub fn l(&self) -> Tensor<f64> {
        from_na(&self.inner.l())
    }

    /// Solves `a·X = b` for every column of `b`.
    pub fn solve(&self, b: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = self.dim();
        if b.ndim() != 2 || b.rows() != n {
            return Err(Error::shape(
                "cholesky solve",
                format!("factor is {}x{}, right-hand side {:?}", n, n, b.shape()),
            ));
        }
        Ok(from_na(&self.inner.solve(&to_na(b))))
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.inner.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> Tensor<f64> {
        from_na(&self.inner.inverse())
    }
}

/// Largest absolute difference between `a` and its transpose.
pub fn asymmetry(a: &Tensor<f64>) -> f64 {
    let n = a.rows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    worst
}

/// Eigen-decomposition of a symmetric matrix. Returns eigenvalues in
/// descending order and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
    let n = square_dim(a, "symmetric_eigen")?;
    if !a.all_finite() {
        return Err(Error::NonFinite("matrix passed to symmetric_eigen".into()));
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    if asymmetry(a) > 1e-12 * scale {
        return Err(Error::NotSymmetric(asymmetry(a)));
    }
    let eig = SymmetricEigen::new(to_na(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Tensor::from_fn(&[n, n], |i| eig.eigenvectors[(i / n, order[i % n])]);
    Ok((values, vectors))
}

fn square_dim(a: &Tensor<f64>, op: &'static str) -> Result<usize> {
    if a.ndim() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::shape(op, format!("expected square matrix, got {:?}", a.shape())));
    }
    Ok(a.rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::from_fn(&[n, n], |_| rng.gen_range(-1.0..1.0));
        let mut a = g.matmul_t(&g).unwrap();
        for i in 0..n {
            let v = a.at(i, i) + n as f64;
            a.set(i, i, v);
        }
        a
    }

    #[test]
    fn cholesky_reconstructs_and_solves() {
        let a = random_spd(7, 1);
        let f = CholFactor::new(&a).unwrap();
        let l = f.l();
        assert!(l.matmul_t(&l).unwrap().rel_diff(&a) < 1e-14);
        let b = Tensor::from_fn(&[7, 3], |i| i as f64 - 4.0);
        let x = f.solve(&b).unwrap();
        assert!(a.matmul(&x).unwrap().rel_diff(&b) < 1e-12);
        assert!(a.matmul(&f.inverse()).unwrap().rel_diff(&Tensor::eye(7)) < 1e-12);
        assert!(f.solve(&Tensor::zeros(&[6, 1])).is_err());
    }

    #[test]
    fn logdet_of_diagonal() {
        let a = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { (i / 4 + 2) as f64 } else { 0.0 });
        let f = CholFactor::new(&a).unwrap();
        assert!((f.logdet() - 24f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_bad_input() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(CholFactor::new(&a), Err(Error::NotPositiveDefinite(2))));
        let a = Tensor::from_rows(&[vec![f64::NAN]]);
        assert!(CholFactor::new(&a).is_err());
        assert!(CholFactor::new(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn eigen_known_pair() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((vecs.at(0, 0).abs() - s).abs() < 1e-14);
        assert!((vecs.at(0, 0) - vecs.at(1, 0)).abs() < 1e-14);
    }

    #[test]
    fn eigen_reconstructs_sorted() {
        let a = random_spd(9, 4);
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let scaled = Tensor::from_fn(&[9, 9], |i| vecs.at(i / 9, i % 9) * vals[i % 9]);
        assert!(scaled.matmul_t(&vecs).unwrap().rel_diff(&a) < 1e-13);
        assert!(vecs.t_matmul(&vecs).unwrap().rel_diff(&Tensor::eye(9)) < 1e-13);
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(symmetric_eigen(&a), Err(Error::NotSymmetric(_))));
    }
}
