//! Solves, log-determinants and predictions with `K = VVᵀ + αI` in
//! `O(N·H²)` time, never forming an N×N matrix.

use crate::error::{Error, Result};
use crate::kernels::{factor_row, ObjectFeatures};
use crate::linalg::CholFactor;
use crate::ndtensor::Tensor;

/// Relative jitter added to the capacitance diagonal before factoring.
pub const CAPACITANCE_JITTER: f64 = 1e-10;

/// Cholesky factor of `αI + VᵀV` (H×H) plus the cached Gram matrix `VᵀV`.
#[derive(Clone, Debug)]
pub struct CapacitanceFactor {
    chol: CholFactor,
    vtv: Tensor<f64>,
    alpha: f64,
    n: usize,
}

impl CapacitanceFactor {
    pub fn new(v: &Tensor<f64>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Invalid(format!("noise variance must be positive and finite, got {alpha}")));
        }
        if v.ndim() != 2 {
            return Err(Error::shape("capacitance", format!("factor must be a matrix, got {:?}", v.shape())));
        }
        if !v.all_finite() {
            return Err(Error::NonFinite("low-rank factor V".into()));
        }
        let vtv = v.t_matmul(v)?;
        let h = vtv.rows();
        let mut cap = vtv.clone();
        for i in 0..h {
            cap.set(i, i, cap.at(i, i) + alpha * (1.0 + CAPACITANCE_JITTER));
        }
        Ok(CapacitanceFactor {
            chol: CholFactor::new(&cap)?,
            vtv,
            alpha,
            n: v.rows(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.vtv.rows()
    }

    pub fn gram(&self) -> &Tensor<f64> {
        &self.vtv
    }

    /// `(αI + VᵀV)⁻¹ B` for an H-row right-hand side.
    pub fn inner_solve(&self, b: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.chol.solve(b)
    }

    /// `(αI + VᵀV)⁻¹`.
    pub fn inner_inverse(&self) -> Result<Tensor<f64>> {
        Ok(self.chol.inverse())
    }

    /// `K⁻¹M` for an N-row right-hand side, using the `V` this factor was built from.
    pub fn solve(&self, v: &Tensor<f64>, m: &Tensor<f64>) -> Result<Tensor<f64>> {
        if v.rows() != self.n || v.cols() != self.rank() {
            return Err(Error::shape(
                "woodbury_solve",
                format!("factor built for {}x{}, got V {:?}", self.n, self.rank(), v.shape()),
            ));
        }
        if m.ndim() != 2 || m.rows() != self.n {
            return Err(Error::shape(
                "woodbury_solve",
                format!("right-hand side {:?} for N = {}", m.shape(), self.n),
            ));
        }
        let vtm = v.t_matmul(m)?;
        let inner = self.inner_solve(&vtm)?;
        let correction = v.matmul(&inner)?;
        let inv_a = 1.0 / self.alpha;
        m.zip_map(&correction, |a, b| (a - b) * inv_a)
    }

    /// `log det K` by the determinant lemma.
    pub fn logdet(&self) -> f64 {
        let h = self.rank() as f64;
        let n = self.n as f64;
        self.chol.logdet() + (n - h) * self.alpha.ln()
    }

    /// `tr(K⁻¹) = N/α − tr((αI + VᵀV)⁻¹VᵀV)/α`.
    pub fn trace_inv(&self) -> Result<f64> {
        let s = self.inner_inverse()?;
        let t: f64 = s.data().iter().zip(self.vtv.data()).map(|(a, b)| a * b).sum();
        Ok((self.n as f64 - t) / self.alpha)
    }
}

pub fn woodbury_solve(v: &Tensor<f64>, alpha: f64, m: &Tensor<f64>) -> Result<Tensor<f64>> {
    CapacitanceFactor::new(v, alpha)?.solve(v, m)
}

pub fn logdet(v: &Tensor<f64>, alpha: f64) -> Result<f64> {
    Ok(CapacitanceFactor::new(v, alpha)?.logdet())
}

pub fn trace_inv(v: &Tensor<f64>, alpha: f64) -> Result<f64> {
    CapacitanceFactor::new(v, alpha)?.trace_inv()
}

/// Sum over columns of `log N(z_l | 0, K)`.
pub fn gp_log_density(z: &Tensor<f64>, v: &Tensor<f64>, alpha: f64) -> Result<f64> {
    let cap = CapacitanceFactor::new(v, alpha)?;
    log_density_with(&cap, z, v)
}

pub(crate) fn log_density_with(cap: &CapacitanceFactor, z: &Tensor<f64>, v: &Tensor<f64>) -> Result<f64> {
    let a = cap.solve(v, z)?;
    let quad: f64 = z.data().iter().zip(a.data()).map(|(x, y)| x * y).sum();
    let n = z.rows() as f64;
    let l = z.cols() as f64;
    Ok(-0.5 * quad - 0.5 * l * cap.logdet() - 0.5 * n * l * (2.0 * std::f64::consts::PI).ln())
}

/// An unseen (object, view) pair together with its factor row `v⋆`.
#[derive(Clone, Debug, PartialEq)]
pub struct StarQuery {
    pub x_star: Vec<f64>,
    pub w_star: usize,
    pub v_star: Vec<f64>,
}

impl StarQuery {
    pub fn new(x: &ObjectFeatures, l_view: &Tensor<f64>, object: usize, view: usize) -> Result<Self> {
        Ok(StarQuery {
            x_star: x.x.row(object.min(x.count().saturating_sub(1))).to_vec(),
            w_star: view,
            v_star: factor_row(&x.x, l_view, object, view)?,
        })
    }
}

/// Posterior mean `v⋆·Vᵀ·K⁻¹·Z` for a single query.
pub fn gp_predict_latent(star: &StarQuery, v: &Tensor<f64>, alpha: f64, z_train: &Tensor<f64>) -> Result<Tensor<f64>> {
    let rows = Tensor::new(&[1, star.v_star.len()], star.v_star.clone())?;
    gp_predict_batch(&rows, v, alpha, z_train)
}

/// Posterior means for a stack of factor rows (S×H), sharing one solve.
pub fn gp_predict_batch(
    v_star: &Tensor<f64>,
    v: &Tensor<f64>,
    alpha: f64,
    z_train: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    if v_star.ndim() != 2 || v_star.cols() != v.cols() {
        return Err(Error::shape(
            "gp_predict_latent",
            format!("query rows {:?} against factor {:?}", v_star.shape(), v.shape()),
        ));
    }
    let cap = CapacitanceFactor::new(v, alpha)?;
    let a = cap.solve(v, z_train)?;
    let w = v.t_matmul(&a)?;
    v_star.matmul(&w)
}

/// Monte Carlo variant: averages predictions over several sampled latent matrices.
pub fn gp_predict_batch_mc(
    v_star: &Tensor<f64>,
    v: &Tensor<f64>,
    alpha: f64,
    z_samples: &[Tensor<f64>],
) -> Result<Tensor<f64>> {
    let first = z_samples
        .first()
        .ok_or_else(|| Error::Invalid("Monte Carlo prediction needs at least one sample".into()))?;
    let mut mean = Tensor::zeros(first.shape());
    for z in z_samples {
        mean.add_assign(z)?;
    }
    let mean = mean.scale(1.0 / z_samples.len() as f64);
    gp_predict_batch(v_star, v, alpha, &mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[r, c], |_| rng.gen_range(-1.0..1.0))
    }

    fn na(t: &Tensor<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
    }

    fn dense_k(v: &Tensor<f64>, alpha: f64) -> DMatrix<f64> {
        let v = na(v);
        &v * v.transpose() + DMatrix::identity(v.nrows(), v.nrows()) * alpha
    }

    fn rel(a: &DMatrix<f64>, b: &Tensor<f64>) -> f64 {
        (a - na(b)).norm() / a.norm()
    }

    #[test]
    fn trivial_examples() {
        let z3 = Tensor::zeros(&[3, 2]);
        let m = Tensor::from_rows(&[vec![1.0, 4.0], vec![-2.0, 0.5], vec![3.0, 3.0]]);
        let s = woodbury_solve(&z3, 2.0, &m).unwrap();
        assert!(s.rel_diff(&m.scale(0.5)) < 1e-9);
        let one = Tensor::from_rows(&[vec![1.0]]);
        let s = woodbury_solve(&one, 1.0, &Tensor::from_rows(&[vec![2.0]])).unwrap();
        assert!((s.item() - 1.0).abs() < 1e-9);
        assert!((logdet(&z3, 2.0).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-9);
        assert!((logdet(&one, 1.0).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!((trace_inv(&Tensor::zeros(&[4, 1]), 2.0).unwrap() - 2.0).abs() < 1e-9);
        assert!((trace_inv(&one, 1.0).unwrap() - 0.5).abs() < 1e-9);
        let d = gp_log_density(&Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1]), 1.0).unwrap();
        assert!((d + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-9);
        let star = StarQuery {
            x_star: vec![1.0],
            w_star: 0,
            v_star: vec![1.0],
        };
        let p = gp_predict_latent(&star, &one, 1.0, &Tensor::from_rows(&[vec![2.0]])).unwrap();
        assert!((p.item() - 1.0).abs() < 1e-9);
        let p = gp_predict_latent(&star, &Tensor::zeros(&[5, 1]), 1.0, &rand_mat(&mut ChaCha8Rng::seed_from_u64(1), 5, 3)).unwrap();
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn zero_latents_give_pure_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = rand_mat(&mut rng, 20, 3);
        let ld = logdet(&v, 0.7).unwrap();
        let d = gp_log_density(&Tensor::zeros(&[20, 4]), &v, 0.7).unwrap();
        let want = -2.0 * ld - 0.5 * 80.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((d - want).abs() < 1e-10);
    }

    #[test]
    fn bad_inputs() {
        let v = Tensor::zeros(&[3, 2]);
        assert!(woodbury_solve(&v, 0.0, &Tensor::zeros(&[3, 1])).is_err());
        assert!(woodbury_solve(&v, -1.0, &Tensor::zeros(&[3, 1])).is_err());
        assert!(woodbury_solve(&v, 1.0, &Tensor::zeros(&[4, 1])).is_err());
        let nan = Tensor::from_rows(&[vec![f64::NAN]]);
        assert!(logdet(&nan, 1.0).is_err());
    }

    #[test]
    fn dense_oracle_over_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = [64, 128, 200][seed as usize % 3];
            let h = [4, 8, 20][(seed as usize / 3) % 3];
            let l = 1 + seed as usize % 5;
            let alpha = rng.gen_range(0.1..10.0);
            let v = rand_mat(&mut rng, n, h);
            let z = rand_mat(&mut rng, n, l);
            let k = dense_k(&v, alpha);
            let chol = k.clone().cholesky().unwrap();
            let want_solve = chol.solve(&na(&z));
            let got = woodbury_solve(&v, alpha, &z).unwrap();
            assert!(rel(&want_solve, &got) <= 1e-10, "seed {seed} solve");
            let want_ld: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            assert!((logdet(&v, alpha).unwrap() - want_ld).abs() <= 1e-8, "seed {seed} logdet");
            let want_tr = chol.inverse().trace();
            assert!(((trace_inv(&v, alpha).unwrap() - want_tr) / want_tr).abs() <= 1e-10);
            let quad = na(&z).component_mul(&want_solve).sum();
            let want_d = -0.5 * quad - 0.5 * l as f64 * want_ld - 0.5 * (n * l) as f64 * (2.0 * std::f64::consts::PI).ln();
            assert!((gp_log_density(&z, &v, alpha).unwrap() - want_d).abs() <= 1e-8);

            let vs = rand_mat(&mut rng, 3, h);
            let kstar = na(&vs) * na(&v).transpose();
            let want_pred = kstar * &want_solve;
            let got_pred = gp_predict_batch(&vs, &v, alpha, &z).unwrap();
            assert!(rel(&want_pred, &got_pred) <= 1e-8, "seed {seed} predict");
        }
    }

    #[test]
    fn column_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = rand_mat(&mut rng, 40, 5);
        let z = rand_mat(&mut rng, 40, 4);
        let perm = [2, 0, 3, 1];
        let zp = Tensor::from_fn(&[40, 4], |i| z.at(i / 4, perm[i % 4]));
        let a = gp_log_density(&z, &v, 0.3).unwrap();
        let b = gp_log_density(&zp, &v, 0.3).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs());
    }

    #[test]
    fn rank_deficient_factor_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let col = rand_mat(&mut rng, 30, 1);
        let v = Tensor::from_fn(&[30, 4], |i| col.data()[i / 4]);
        let got = logdet(&v, 1e-3).unwrap();
        let want = dense_k(&v, 1e-3).determinant().ln();
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn mc_prediction_averages_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_mat(&mut rng, 12, 3);
        let vs = rand_mat(&mut rng, 2, 3);
        let z1 = rand_mat(&mut rng, 12, 2);
        let z2 = rand_mat(&mut rng, 12, 2);
        let mc = gp_predict_batch_mc(&vs, &v, 0.5, &[z1.clone(), z2.clone()]).unwrap();
        let a = gp_predict_batch(&vs, &v, 0.5, &z1).unwrap();
        let b = gp_predict_batch(&vs, &v, 0.5, &z2).unwrap();
        let avg = a.zip_map(&b, |x, y| 0.5 * (x + y)).unwrap();
        assert!(mc.rel_diff(&avg) < 1e-12);
        assert!(gp_predict_batch_mc(&vs, &v, 0.5, &[]).is_err());
    }
}
