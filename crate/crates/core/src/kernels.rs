//! View and object kernels and the low-rank factor `V` with `K = VVᵀ + αI`.
//!
//! The covariance between samples `n` and `m` is the product of a view
//! kernel on their view inputs and a linear kernel on their object feature
//! vectors. Factoring the Q×Q view covariance as `L·Lᵀ` makes row `n` of `V`
//! the Kronecker product `x_{p_n} ⊗ L[q_n]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::ndtensor::{Graph, Tensor, Var};

/// Relative eigenvalue cut-off below which view-covariance directions are dropped.
pub const EIGEN_CLAMP: f64 = 1e-10;

/// `β·exp(−2·sin²(π·|δ|/period)/ν²)` with `β = exp(beta_raw)`, `ν = exp(nu_raw)`.
///
/// With the default period of π this is `β·exp(−2·sin²|δ|/ν²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicSEKernel {
    pub beta_raw: f64,
    pub nu_raw: f64,
    pub period: f64,
}

impl Default for PeriodicSEKernel {
    fn default() -> Self {
        PeriodicSEKernel {
            beta_raw: 0.0,
            nu_raw: 0.0,
            period: std::f64::consts::PI,
        }
    }
}

impl PeriodicSEKernel {
    pub fn with_period(period: f64) -> Self {
        PeriodicSEKernel {
            period,
            ..Default::default()
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta_raw.exp()
    }

    pub fn nu(&self) -> f64 {
        self.nu_raw.exp()
    }

    pub fn eval(&self, delta: f64) -> f64 {
        periodic_se(delta, self.beta_raw, self.nu_raw, self.period)
    }

    pub fn covariance(&self, angles: &[f64]) -> Tensor<f64> {
        let q = angles.len();
        Tensor::from_fn(&[q, q], |i| self.eval(angles[i / q] - angles[i % q]))
    }
}

/// Periodic squared-exponential covariance for an angle difference.
pub fn periodic_se(delta: f64, beta_raw: f64, nu_raw: f64, period: f64) -> f64 {
    let s = (std::f64::consts::PI * delta.abs() / period).sin();
    beta_raw.exp() * (-2.0 * s * s / (2.0 * nu_raw).exp()).exp()
}

/// Dot-product kernel on feature vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinearKernel;

impl LinearKernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn covariance(&self, x: &Tensor<f64>) -> Tensor<f64> {
        x.matmul_t(x).expect("square product")
    }
}

/// Free Q×Q view covariance `C = L·Lᵀ`; `raw` holds `L` below the diagonal
/// and `log L_ii` on it. The upper triangle is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct FullRankViewCov {
    pub raw: Tensor<f64>,
}

impl FullRankViewCov {
    /// Identity covariance.
    pub fn identity(q: usize) -> Self {
        FullRankViewCov {
            raw: Tensor::zeros(&[q, q]),
        }
    }

    pub fn factor(&self) -> Tensor<f64> {
        let q = self.raw.rows();
        Tensor::from_fn(&[q, q], |i| {
            let (r, c) = (i / q, i % q);
            match r.cmp(&c) {
                std::cmp::Ordering::Greater => self.raw.at(r, c),
                std::cmp::Ordering::Equal => self.raw.at(r, c).exp(),
                std::cmp::Ordering::Less => 0.0,
            }
        })
    }

    pub fn covariance(&self) -> Tensor<f64> {
        let l = self.factor();
        l.matmul_t(&l).expect("square product")
    }
}

/// View kernel choices.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewKernel {
    Periodic(PeriodicSEKernel),
    FullRank(FullRankViewCov),
}

impl ViewKernel {
    pub fn name(&self) -> &'static str {
        match self {
            ViewKernel::Periodic(_) => "periodic",
            ViewKernel::FullRank(_) => "fullrank",
        }
    }

    /// Realised Q×Q covariance over the view inputs (angles in radians).
    pub fn covariance(&self, angles: &[f64]) -> Result<Tensor<f64>> {
        match self {
            ViewKernel::Periodic(k) => Ok(k.covariance(angles)),
            ViewKernel::FullRank(k) => {
                if k.raw.rows() != angles.len() {
                    return Err(Error::shape(
                        "view covariance",
                        format!("{} views but a {}x{} free covariance", angles.len(), k.raw.rows(), k.raw.rows()),
                    ));
                }
                Ok(k.covariance())
            }
        }
    }

    /// Raw (log-space) parameters as one tensor.
    pub fn raw_params(&self) -> Tensor<f64> {
        match self {
            ViewKernel::Periodic(k) => Tensor::from_rows(&[vec![k.beta_raw, k.nu_raw]]),
            ViewKernel::FullRank(k) => k.raw.clone(),
        }
    }

    pub fn set_raw_params(&mut self, t: &Tensor<f64>) -> Result<()> {
        match self {
            ViewKernel::Periodic(k) => {
                if t.len() != 2 {
                    return Err(Error::shape("periodic kernel params", format!("{:?}", t.shape())));
                }
                k.beta_raw = t.data()[0];
                k.nu_raw = t.data()[1];
            }
            ViewKernel::FullRank(k) => {
                k.raw.check_same(t, "full-rank view params")?;
                k.raw = t.clone();
            }
        }
        Ok(())
    }

    /// Records the view covariance on `g` as a function of the raw-parameter node.
    pub fn covariance_graph(&self, g: &mut Graph<f64>, raw: Var, angles: &[f64]) -> Result<Var> {
        match self {
            ViewKernel::Periodic(k) => {
                let q = angles.len();
                let s2 = Tensor::from_fn(&[q, q], |i| {
                    let s = (std::f64::consts::PI * (angles[i / q] - angles[i % q]).abs() / k.period).sin();
                    s * s
                });
                let s2 = g.constant(s2);
                let beta_raw = g.slice_cols(raw, 0, 1)?;
                let nu_raw = g.slice_cols(raw, 1, 2)?;
                let inv_nu2 = g.scale(nu_raw, -2.0);
                let inv_nu2 = g.exp(inv_nu2);
                let coef = g.scale(inv_nu2, -2.0);
                let arg = g.mul_scalar_var(s2, coef)?;
                let e = g.exp(arg);
                let beta = g.exp(beta_raw);
                g.mul_scalar_var(e, beta)
            }
            ViewKernel::FullRank(k) => {
                let q = k.raw.rows();
                let lower = g.constant(Tensor::from_fn(&[q, q], |i| if i / q > i % q { 1.0 } else { 0.0 }));
                let diag = g.constant(Tensor::eye(q));
                let off = g.mul(raw, lower)?;
                let e = g.exp(raw);
                let d = g.mul(e, diag)?;
                let l = g.add(off, d)?;
                let lt = g.transpose(l)?;
                g.matmul(l, lt)
            }
        }
    }
}

/// Learned object feature matrix `X` (`P×M`).
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectFeatures {
    pub x: Tensor<f64>,
}

impl ObjectFeatures {
    /// I.i.d. normal entries with standard deviation `1/√M`.
    pub fn random<R: Rng>(p: usize, m: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("valid std");
        ObjectFeatures {
            x: Tensor::from_fn(&[p, m], |_| normal.sample(rng)),
        }
    }

    pub fn count(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }
}

/// Factor `L` (Q×Q′) of a symmetric view covariance via eigendecomposition.
/// Eigenvalues below `EIGEN_CLAMP·λ_max` are clamped to zero and dropped.
pub fn view_factor(cov: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (vals, vecs) = linalg::symmetric_eigen(cov)?;
    let q = cov.rows();
    let lmax = vals.first().copied().unwrap_or(0.0).max(0.0);
    let keep: Vec<usize> = (0..q).filter(|&i| vals[i] > EIGEN_CLAMP * lmax && vals[i] > 0.0).collect();
    let r = keep.len();
    let mut l = Tensor::zeros(&[q, r]);
    for (c, &k) in keep.iter().enumerate() {
        let s = vals[k].sqrt();
        for row in 0..q {
            l.set(row, c, vecs.at(row, k) * s);
        }
    }
    Ok(l)
}

/// `K = VVᵀ + αI` together with the sample assignments that produced `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankCov {
    pub v: Tensor<f64>,
    pub alpha_raw: f64,
    pub objects: Vec<usize>,
    pub views: Vec<usize>,
}

impl LowRankCov {
    pub fn alpha(&self) -> f64 {
        self.alpha_raw.exp()
    }

    pub fn n(&self) -> usize {
        self.v.rows()
    }

    pub fn rank(&self) -> usize {
        self.v.cols()
    }
}

/// Row `n` of `x ⊗ l`-style factor for a single (object, view) pair.
pub fn factor_row(x: &Tensor<f64>, l_view: &Tensor<f64>, object: usize, view: usize) -> Result<Vec<f64>> {
    if object >= x.rows() {
        return Err(Error::Index {
            what: "objects",
            index: object,
            size: x.rows(),
        });
    }
    if view >= l_view.rows() {
        return Err(Error::Index {
            what: "views",
            index: view,
            size: l_view.rows(),
        });
    }
    let mut row = Vec::with_capacity(x.cols() * l_view.cols());
    for &a in x.row(object) {
        for &b in l_view.row(view) {
            row.push(a * b);
        }
    }
    Ok(row)
}

/// Builds `V` with row `n` equal to `x_{p_n} ⊗ L[q_n]`, so `H = M·Q′`.
pub fn build_factor(
    x: &ObjectFeatures,
    l_view: &Tensor<f64>,
    objects: &[usize],
    views: &[usize],
    alpha_raw: f64,
) -> Result<LowRankCov> {
    if objects.len() != views.len() {
        return Err(Error::shape(
            "build_factor",
            format!("{} object ids vs {} view ids", objects.len(), views.len()),
        ));
    }
    let h = x.dim() * l_view.cols();
    let mut data = Vec::with_capacity(objects.len() * h);
    for (&p, &q) in objects.iter().zip(views) {
        data.extend(factor_row(&x.x, l_view, p, q)?);
    }
    Ok(LowRankCov {
        v: Tensor::new(&[objects.len(), h], data)?,
        alpha_raw,
        objects: objects.to_vec(),
        views: views.to_vec(),
    })
}

/// Everything the GP prior learns: object features, the view kernel and the
/// log noise variance, plus the fixed view inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GpParams {
    pub x: ObjectFeatures,
    pub view: ViewKernel,
    pub alpha_raw: f64,
    pub angles: Vec<f64>,
}

impl GpParams {
    pub fn alpha(&self) -> f64 {
        self.alpha_raw.exp()
    }

    pub fn num_views(&self) -> usize {
        self.angles.len()
    }

    pub fn view_cov(&self) -> Result<Tensor<f64>> {
        self.view.covariance(&self.angles)
    }

    pub fn object_cov(&self) -> Tensor<f64> {
        LinearKernel.covariance(&self.x.x)
    }

    /// Current view factor `L` (Q×Q′).
    pub fn view_factor(&self) -> Result<Tensor<f64>> {
        view_factor(&self.view_cov()?)
    }

    pub fn lowrank(&self, objects: &[usize], views: &[usize]) -> Result<LowRankCov> {
        build_factor(&self.x, &self.view_factor()?, objects, views, self.alpha_raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn even_angles(q: usize) -> Vec<f64> {
        (0..q).map(|i| 2.0 * PI * i as f64 / q as f64).collect()
    }

    #[test]
    fn periodic_se_examples() {
        let ln2 = 2f64.ln();
        assert_eq!(periodic_se(0.0, ln2, 0.0, PI), 2.0);
        assert!((periodic_se(PI, 0.0, 0.5f64.ln(), PI) - 1.0).abs() < 1e-12);
        // independent evaluation: sin(π/2) = 1, so exp(−2/1) exactly
        let want = (-2.0f64).exp();
        assert!((periodic_se(PI / 2.0, 0.0, 0.0, PI) - want).abs() < 1e-15);
        assert!((want - 0.1353353).abs() < 1e-7);
    }

    #[test]
    fn periodic_se_symmetry_and_period() {
        let k = PeriodicSEKernel {
            beta_raw: 0.3,
            nu_raw: -0.2,
            period: PI,
        };
        for &d in &[0.1, 0.7, 2.3, -1.1] {
            assert_eq!(k.eval(d), k.eval(-d));
            assert!((k.eval(d) - k.eval(d + PI)).abs() < 1e-12);
        }
        let k2 = PeriodicSEKernel::with_period(2.0 * PI);
        assert!((k2.eval(0.4) - k2.eval(0.4 + 2.0 * PI)).abs() < 1e-12);
        assert!((k2.eval(0.4) - k2.eval(0.4 + PI)).abs() > 1e-3);
    }

    #[test]
    fn positivity_for_all_raw_values() {
        for raw in [-30.0, -3.0, 0.0, 5.0] {
            let k = PeriodicSEKernel {
                beta_raw: raw,
                nu_raw: raw,
                period: PI,
            };
            assert!(k.beta() > 0.0 && k.nu() > 0.0);
        }
    }

    #[test]
    fn identity_factor() {
        let l = view_factor(&Tensor::eye(4)).unwrap();
        assert_eq!(l.shape(), &[4, 4]);
        let rec = l.matmul_t(&l).unwrap();
        assert!(rec.rel_diff(&Tensor::eye(4)) < 1e-15);
    }

    #[test]
    fn rank_one_factor() {
        let v = [1.0, -2.0, 0.5];
        let c = Tensor::from_fn(&[3, 3], |i| v[i / 3] * v[i % 3]);
        let l = view_factor(&c).unwrap();
        assert_eq!(l.cols(), 1);
        assert!(l.matmul_t(&l).unwrap().rel_diff(&c) < 1e-12);
    }

    #[test]
    fn periodic_factor_reconstructs_against_nalgebra() {
        let k = PeriodicSEKernel::default();
        let c = k.covariance(&even_angles(16));
        let l = view_factor(&c).unwrap();
        let rec = l.matmul_t(&l).unwrap();
        let frob = c.sum_sq().sqrt();
        let err = rec.zip_map(&c, |a, b| a - b).unwrap().sum_sq().sqrt();
        assert!(err <= 1e-10 * frob, "reconstruction error {err:e}");
        // the period-π kernel sees angles q and q+8 as identical
        assert!(l.cols() <= 8);
        let nal = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(16, 16, c.data()));
        let lmax = nal.eigenvalues.max();
        let rank = nal.eigenvalues.iter().filter(|&&e| e > EIGEN_CLAMP * lmax).count();
        assert_eq!(rank, l.cols());
    }

    #[test]
    fn non_symmetric_rejected() {
        let c = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(view_factor(&c).is_err());
    }

    #[test]
    fn single_object_two_views() {
        let x = ObjectFeatures {
            x: Tensor::from_rows(&[vec![1.0]]),
        };
        let f = build_factor(&x, &Tensor::eye(2), &[0, 0], &[0, 1], 0.0).unwrap();
        let k = f.v.matmul_t(&f.v).unwrap();
        assert_eq!(k, Tensor::eye(2));
        assert!(build_factor(&x, &Tensor::eye(2), &[1], &[0], 0.0).is_err());
        assert!(build_factor(&x, &Tensor::eye(2), &[0], &[2], 0.0).is_err());
    }

    #[test]
    fn full_scale_factor_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = ObjectFeatures::random(400, 8, &mut rng);
        let objects: Vec<usize> = (0..6400).map(|n| n / 16).collect();
        let views: Vec<usize> = (0..6400).map(|n| n % 16).collect();
        let f = build_factor(&x, &Tensor::eye(16), &objects, &views, 0.0).unwrap();
        assert_eq!(f.v.shape(), &[6400, 128]);
    }

    fn dense_product_kernel(view: &Tensor<f64>, x: &Tensor<f64>, objects: &[usize], views: &[usize]) -> Tensor<f64> {
        let n = objects.len();
        Tensor::from_fn(&[n, n], |i| {
            let (a, b) = (i / n, i % n);
            let dot: f64 = x.row(objects[a]).iter().zip(x.row(objects[b])).map(|(u, v)| u * v).sum();
            view.at(views[a], views[b]) * dot
        })
    }

    #[test]
    fn factor_matches_pairwise_product_kernel() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = 6;
            let angles: Vec<f64> = (0..q).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let kern = PeriodicSEKernel {
                beta_raw: rng.gen_range(-1.0..1.0),
                nu_raw: rng.gen_range(-0.5..0.5),
                period: if seed % 2 == 0 { PI } else { 2.0 * PI },
            };
            let x = ObjectFeatures::random(9, 3, &mut rng);
            let n = 150;
            let objects: Vec<usize> = (0..n).map(|_| rng.gen_range(0..9)).collect();
            let views: Vec<usize> = (0..n).map(|_| rng.gen_range(0..q)).collect();
            let c = kern.covariance(&angles);
            let l = view_factor(&c).unwrap();
            let f = build_factor(&x, &l, &objects, &views, 0.0).unwrap();
            let got = f.v.matmul_t(&f.v).unwrap();
            let want = dense_product_kernel(&c, &x.x, &objects, &views);
            let worst = got.zip_map(&want, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(worst <= 1e-8, "seed {seed}: {worst:e}");
        }
    }

    #[test]
    fn linear_kernel_kronecker_structure() {
        // 2 objects, 2 views with linear view features: dense product-kernel assembly
        let w = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0]]);
        let view_cov = w.matmul_t(&w).unwrap();
        let x = ObjectFeatures {
            x: Tensor::from_rows(&[vec![0.2, 1.0], vec![1.5, -0.4]]),
        };
        let objects = [0, 0, 1, 1];
        let views = [0, 1, 0, 1];
        let l = view_factor(&view_cov).unwrap();
        let f = build_factor(&x, &l, &objects, &views, 0.0).unwrap();
        let got = f.v.matmul_t(&f.v).unwrap();
        let lin = LinearKernel;
        let want = Tensor::from_fn(&[4, 4], |i| {
            let (a, b) = (i / 4, i % 4);
            lin.eval(w.row(views[a]), w.row(views[b])) * lin.eval(x.x.row(objects[a]), x.x.row(objects[b]))
        });
        assert!(got.rel_diff(&want) < 1e-12);
    }

    #[test]
    fn covariance_graph_matches_direct_evaluation() {
        let angles = even_angles(5);
        let kernels = [
            ViewKernel::Periodic(PeriodicSEKernel {
                beta_raw: 0.4,
                nu_raw: -0.3,
                period: 2.0 * PI,
            }),
            ViewKernel::FullRank(FullRankViewCov {
                raw: Tensor::from_fn(&[5, 5], |i| ((i * 7) % 5) as f64 * 0.1 - 0.2),
            }),
        ];
        for k in kernels {
            let mut g = Graph::new();
            let raw = g.param(k.raw_params());
            let c = k.covariance_graph(&mut g, raw, &angles).unwrap();
            assert!(g.value(c).rel_diff(&k.covariance(&angles).unwrap()) < 1e-14);
            let weights = Tensor::from_fn(&[5, 5], |i| (i as f64 * 0.37).sin());
            let err = grad_check(
                |g, v| {
                    let c = k.covariance_graph(g, v[0], &angles)?;
                    let w = g.constant(weights.clone());
                    let p = g.mul(c, w)?;
                    Ok(g.sum(p))
                },
                &[k.raw_params()],
                1e-4,
            )
            .unwrap();
            assert!(err <= 1e-4);
        }
    }

    #[test]
    fn fresh_full_rank_is_identity() {
        let c = ViewKernel::FullRank(FullRankViewCov::identity(3)).covariance(&[0.0; 3]).unwrap();
        assert_eq!(c, Tensor::eye(3));
    }
}
