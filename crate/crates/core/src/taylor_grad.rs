//! Full-batch gradients of the GP prior term computed in minibatches.
//!
//! The negative GP log-density `f(Z, V, α)` couples every sample, so it is
//! replaced by its first-order expansion around the current parameters:
//! `Σ A⊙Z + Σ B⊙V + c·α + ⟨G, C⟩`. The coefficients are constants, so the
//! proxy splits over minibatches and its gradient equals the gradient of `f`
//! at the expansion point.
//!
//! Kernel hyperparameters enter through the view covariance `C(θ)`; `G` is
//! `∂f/∂C`. Object features enter through `V` with the view factor held fixed.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::GpParams;
use crate::lowrank_gp::CapacitanceFactor;
use crate::memtrack::{self, MemReport, Probe};
use crate::ndtensor::{Graph, Tensor, Var};
use crate::nnet::{reparameterize, Decoder, Encoder};
use crate::rng::normal_tensor;
use crate::scalar::Scalar;

/// Expansion coefficients of `f = ½Σ_l z_lᵀK⁻¹z_l + (L/2)·log det K`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaylorCoeffs {
    /// `∂f/∂Z = K⁻¹Z`, N×L.
    pub a: Tensor<f64>,
    /// `∂f/∂V`, N×H.
    pub b: Tensor<f64>,
    /// `∂f/∂α`.
    pub c: f64,
    /// `∂f/∂C` for the Q×Q view covariance, when the sample structure is known.
    pub view_cov_grad: Option<Tensor<f64>>,
    /// `f` at the expansion point.
    pub f0: f64,
}

impl TaylorCoeffs {
    pub fn zeros(n: usize, l: usize, h: usize, q: Option<usize>) -> Self {
        TaylorCoeffs {
            a: Tensor::zeros(&[n, l]),
            b: Tensor::zeros(&[n, h]),
            c: 0.0,
            view_cov_grad: q.map(|q| Tensor::zeros(&[q, q])),
            f0: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn all_finite(&self) -> bool {
        self.a.all_finite()
            && self.b.all_finite()
            && self.c.is_finite()
            && self.f0.is_finite()
            && self.view_cov_grad.as_ref().is_none_or(|g| g.all_finite())
    }
}

/// `A`, `B`, `c` and `f0` for latents `Z` under `K = VVᵀ + αI`.
pub fn taylor_coeffs(z: &Tensor<f64>, v: &Tensor<f64>, alpha: f64) -> Result<TaylorCoeffs> {
    let cap = CapacitanceFactor::new(v, alpha)?;
    base_coeffs(&cap, z, v)
}

fn base_coeffs(cap: &CapacitanceFactor, z: &Tensor<f64>, v: &Tensor<f64>) -> Result<TaylorCoeffs> {
    if z.ndim() != 2 || z.rows() != v.rows() {
        return Err(Error::shape(
            "taylor_coeffs",
            format!("latents {:?} against factor {:?}", z.shape(), v.shape()),
        ));
    }
    let l = z.cols() as f64;
    let a = cap.solve(v, z)?;
    let at_v = a.t_matmul(v)?;
    // K⁻¹V is overwritten in place with B = L·K⁻¹V − A(AᵀV).
    let mut b = cap.solve(v, v)?;
    let h = v.cols();
    for n in 0..b.rows() {
        let ar = a.row(n);
        let br = b.row_mut(n);
        for (j, bj) in br.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, &ak) in ar.iter().enumerate() {
                s += ak * at_v.data()[k * h + j];
            }
            *bj = l * *bj - s;
        }
    }
    let c = 0.5 * (l * cap.trace_inv()? - a.sum_sq());
    let quad: f64 = z.data().iter().zip(a.data()).map(|(x, y)| x * y).sum();
    let f0 = 0.5 * quad + 0.5 * l * cap.logdet();
    Ok(TaylorCoeffs {
        a,
        b,
        c,
        view_cov_grad: None,
        f0,
    })
}

/// Coefficients for `V` built from object features `x` and a view factor,
/// including `∂f/∂C`.
pub fn structured_coeffs(
    z: &Tensor<f64>,
    v: &Tensor<f64>,
    alpha: f64,
    x: &Tensor<f64>,
    objects: &[usize],
    views: &[usize],
    num_views: usize,
) -> Result<TaylorCoeffs> {
    let cap = CapacitanceFactor::new(v, alpha)?;
    let mut co = base_coeffs(&cap, z, v)?;
    co.view_cov_grad = Some(view_cov_grad(&cap, v, &co.a, x, objects, views, num_views)?);
    Ok(co)
}

/// `∂f/∂C[a,b] = Σ_{q_n=a, q_m=b} (x_n·x_m)·½(L·K⁻¹ − AAᵀ)_{nm}`, accumulated
/// per view so nothing N×N is formed.
fn view_cov_grad(
    cap: &CapacitanceFactor,
    v: &Tensor<f64>,
    a: &Tensor<f64>,
    x: &Tensor<f64>,
    objects: &[usize],
    views: &[usize],
    q: usize,
) -> Result<Tensor<f64>> {
    let n = v.rows();
    if objects.len() != n || views.len() != n {
        return Err(Error::shape(
            "view covariance gradient",
            format!("{} rows, {} object ids, {} view ids", n, objects.len(), views.len()),
        ));
    }
    let (m, h, l) = (x.cols(), v.cols(), a.cols());
    let mut u = vec![0.0; q * m * h];
    let mut p = vec![0.0; q * m * l];
    let mut norms = vec![0.0; q];
    for i in 0..n {
        let (obj, view) = (objects[i], views[i]);
        if view >= q || obj >= x.rows() {
            return Err(Error::Index {
                what: "sample assignment",
                index: i,
                size: n,
            });
        }
        let xr = x.row(obj);
        norms[view] += xr.iter().map(|t| t * t).sum::<f64>();
        for (k, &xk) in xr.iter().enumerate() {
            let base = (view * m + k) * h;
            for (dst, &vv) in u[base..base + h].iter_mut().zip(v.row(i)) {
                *dst += xk * vv;
            }
            let base = (view * m + k) * l;
            for (dst, &av) in p[base..base + l].iter_mut().zip(a.row(i)) {
                *dst += xk * av;
            }
        }
    }
    let u = Tensor::new(&[q * m, h], u)?;
    let su = cap.inner_solve(&u.transpose()?)?;
    let cross = u.matmul(&su)?;
    let alpha = cap.alpha();
    let lf = l as f64;
    Ok(Tensor::from_fn(&[q, q], |idx| {
        let (ra, rb) = (idx / q, idx % q);
        let mut woodbury = 0.0;
        let mut pp = 0.0;
        for k in 0..m {
            woodbury += cross.at(ra * m + k, rb * m + k);
            let pa = &p[(ra * m + k) * l..(ra * m + k + 1) * l];
            let pb = &p[(rb * m + k) * l..(rb * m + k + 1) * l];
            pp += pa.iter().zip(pb).map(|(s, t)| s * t).sum::<f64>();
        }
        let diag = if ra == rb { norms[ra] } else { 0.0 };
        0.5 * lf * (diag - woodbury) / alpha - 0.5 * pp
    }))
}

/// `Σ A⊙z` over one batch, recorded on the network graph.
pub fn proxy_latent_term<T: Scalar>(g: &mut Graph<T>, z: Var, a_rows: &Tensor<f64>) -> Result<Var> {
    if g.shape(z) != a_rows.shape() {
        return Err(Error::shape(
            "proxy latent term",
            format!("latents {:?} but coefficients {:?}", g.shape(z), a_rows.shape()),
        ));
    }
    let a = g.constant(a_rows.cast());
    let p = g.mul(z, a)?;
    Ok(g.sum(p))
}

/// GP parameters placed on a 64-bit graph.
#[derive(Clone, Copy, Debug)]
pub struct GpVars {
    pub x: Var,
    pub view_raw: Var,
    pub alpha_raw: Var,
}

impl GpVars {
    pub fn bind(g: &mut Graph<f64>, gp: &GpParams, trainable: bool) -> Self {
        let mut put = |t: Tensor<f64>| if trainable { g.param(t) } else { g.constant(t) };
        GpVars {
            x: put(gp.x.x.clone()),
            view_raw: put(gp.view.raw_params()),
            alpha_raw: put(Tensor::scalar(gp.alpha_raw)),
        }
    }
}

/// The `B`, `c` and view-covariance parts of the proxy for samples `rows`.
/// The scalar parts are weighted by the batch's share of all samples, so the
/// per-batch values sum to the full proxy.
#[allow(clippy::too_many_arguments)]
pub fn proxy_gp_loss(
    g: &mut Graph<f64>,
    vars: &GpVars,
    gp: &GpParams,
    l_view: &Tensor<f64>,
    objects: &[usize],
    views: &[usize],
    coeffs: &TaylorCoeffs,
    rows: Range<usize>,
) -> Result<Var> {
    let n = coeffs.n();
    let h = gp.x.dim() * l_view.cols();
    if objects.len() != n || views.len() != n || coeffs.b.shape() != [n, h] || rows.end > n {
        return Err(Error::shape(
            "proxy_gp_loss",
            format!(
                "coefficients for N = {} with B {:?}; factor width {}, {} assignments, rows {:?}",
                n,
                coeffs.b.shape(),
                h,
                objects.len(),
                rows
            ),
        ));
    }
    let share = rows.len() as f64 / n as f64;
    let xb = g.gather_rows(vars.x, &objects[rows.clone()])?;
    let lb = g.constant(l_view.gather_rows(&views[rows.clone()])?);
    let vb = g.row_kron(xb, lb)?;
    let bb = g.constant(coeffs.b.slice_rows(rows.start, rows.end)?);
    let bv = g.mul(vb, bb)?;
    let mut total = g.sum(bv);
    let alpha = g.exp(vars.alpha_raw);
    let ca = g.scale(alpha, coeffs.c * share);
    total = g.add(total, ca)?;
    if let Some(gc) = &coeffs.view_cov_grad {
        let c = gp.view.covariance_graph(g, vars.view_raw, &gp.angles)?;
        let gcv = g.constant(gc.clone());
        let prod = g.mul(c, gcv)?;
        let s = g.sum(prod);
        let s = g.scale(s, share);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Multipliers of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    /// Multiplies `Σ(y − g(z))²`.
    pub recon: f64,
    /// Multiplies the negative latent log-prior.
    pub gp: f64,
    /// Multiplies `−½Σ log σ²`.
    pub reg: f64,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub nets: bool,
    pub gp: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { nets: true, gp: true };
    pub const GP_ONLY: Trainable = Trainable { nets: false, gp: true };
    pub const NETS_ONLY: Trainable = Trainable { nets: true, gp: false };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub batch_size: usize,
    pub weights: TermWeights,
    pub trainable: Trainable,
}

/// Training samples: images `[N, C, S, S]` with their object and view ids and
/// optional conditioning features `[N, R]`.
#[derive(Clone, Copy, Debug)]
pub struct Samples<'a, T> {
    pub images: &'a Tensor<T>,
    pub objects: &'a [usize],
    pub views: &'a [usize],
    pub cond: Option<&'a Tensor<T>>,
}

impl<'a, T: Scalar> Samples<'a, T> {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.objects.len();
        if self.images.ndim() != 4 || self.images.rows() != n || self.views.len() != n {
            return Err(Error::shape(
                "samples",
                format!(
                    "images {:?}, {} object ids, {} view ids",
                    self.images.shape(),
                    n,
                    self.views.len()
                ),
            ));
        }
        if let Some(c) = self.cond {
            if c.rows() != n {
                return Err(Error::shape("samples", format!("conditioning {:?} for {} samples", c.shape(), n)));
            }
        }
        Ok(())
    }

    pub(crate) fn batch(&self, r: Range<usize>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let imgs = self.images.slice_rows(r.start, r.end)?;
        let cond = self.cond.map(|c| c.slice_rows(r.start, r.end)).transpose()?;
        Ok((imgs, cond))
    }
}

/// Unweighted loss terms summed over all samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepTerms {
    /// `Σ(y − g(z))²` over samples and pixels.
    pub sq_err: f64,
    /// `−log p(Z)` including the `2π` constant.
    pub prior_nll: f64,
    /// `−½Σ log σ²`.
    pub reg: f64,
}

impl StepTerms {
    pub fn weighted(&self, w: &TermWeights) -> f64 {
        w.recon * self.sq_err + w.gp * self.prior_nll + w.reg * self.reg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpGrads {
    pub x: Tensor<f64>,
    pub view_raw: Tensor<f64>,
    pub alpha_raw: f64,
}

impl GpGrads {
    pub fn zeros(gp: &GpParams) -> Self {
        GpGrads {
            x: Tensor::zeros(gp.x.x.shape()),
            view_raw: Tensor::zeros(gp.view.raw_params().shape()),
            alpha_raw: 0.0,
        }
    }

    fn add(&mut self, other: &GpGrads) -> Result<()> {
        self.x.add_assign(&other.x)?;
        self.view_raw.add_assign(&other.view_raw)?;
        self.alpha_raw += other.alpha_raw;
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.x.all_finite() && self.view_raw.all_finite() && self.alpha_raw.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads<T> {
    pub encoder: Vec<Tensor<T>>,
    pub decoder: Vec<Tensor<T>>,
    pub gp: GpGrads,
}

/// Allocation peaks for the five protocol steps, when the counting
/// allocator is installed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMemory {
    pub steps: [MemReport; 5],
    /// Peak live bytes above the level when the step began.
    pub peak_extra_bytes: usize,
    pub largest_alloc_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub grads: StepGrads<T>,
    pub terms: StepTerms,
    pub memory: Option<StepMemory>,
}

struct Tracker {
    base: usize,
    mem: StepMemory,
    current: Option<(usize, Probe)>,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            base: memtrack::current_bytes(),
            mem: StepMemory::default(),
            current: None,
        }
    }

    fn begin(&mut self) {
        self.current = Some((memtrack::current_bytes(), Probe::start()));
    }

    fn end(&mut self, step: usize) {
        if let Some((start, probe)) = self.current.take() {
            let r = probe.finish();
            self.mem.steps[step] = r;
            let total = (start + r.peak_extra_bytes).saturating_sub(self.base);
            self.mem.peak_extra_bytes = self.mem.peak_extra_bytes.max(total);
            self.mem.largest_alloc_bytes = self.mem.largest_alloc_bytes.max(r.largest_alloc_bytes);
        }
    }

    fn finish(self) -> Option<StepMemory> {
        memtrack::installed().then_some(self.mem)
    }
}

/// Latent prior used in a network pass.
pub(crate) enum LatentPrior<'a> {
    /// No prior term.
    #[cfg_attr(not(test), allow(dead_code))]
    Flat,
    /// `½‖z‖²`, the standard-normal prior without its constant.
    StandardNormal,
    /// `Σ A⊙z` with the given coefficient rows.
    Linear(&'a Tensor<f64>),
}

pub(crate) struct NetPass<T> {
    pub encoder: Vec<Tensor<T>>,
    pub decoder: Vec<Tensor<T>>,
    pub sq_err: f64,
    pub reg: f64,
    pub prior: f64,
}

/// Records encoder, sampling and decoder for one batch and backpropagates
/// `w.recon·Σ(y−g)² + w.reg·(−½Σ log σ²) + w.gp·prior`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn net_batch_pass<T: Scalar>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    images: Tensor<T>,
    cond: Option<&Tensor<T>>,
    eps: &Tensor<T>,
    w: &TermWeights,
    prior: LatentPrior<'_>,
    train_encoder: bool,
) -> Result<NetPass<T>> {
    let mut g = Graph::new();
    let we = encoder.params.bind(&mut g, train_encoder);
    let wd = decoder.params.bind(&mut g, true);
    let x = g.constant(images);
    let (mu, lv) = encoder.forward(&mut g, &we, x, cond)?;
    let z = reparameterize(&mut g, mu, lv, eps)?;
    let y = decoder.forward(&mut g, &wd, z, cond)?;
    let d = g.sub(y, x)?;
    let d2 = g.square(d);
    let sq = g.sum(d2);
    let slv = g.sum(lv);
    let reg = g.scale(slv, -0.5);
    let prior_node = match prior {
        LatentPrior::Flat => None,
        LatentPrior::StandardNormal => {
            let z2 = g.square(z);
            let s = g.sum(z2);
            Some(g.scale(s, 0.5))
        }
        LatentPrior::Linear(a) => Some(proxy_latent_term(&mut g, z, a)?),
    };
    let t1 = g.scale(sq, w.recon);
    let t2 = g.scale(reg, w.reg);
    let mut total = g.add(t1, t2)?;
    if let Some(p) = prior_node {
        let t3 = g.scale(p, w.gp);
        total = g.add(total, t3)?;
    }
    let grads = g.backward(total)?;
    let encoder_grads = if train_encoder {
        encoder.params.collect_grads(&grads, &we)
    } else {
        encoder.params.zeros_like()
    };
    Ok(NetPass {
        encoder: encoder_grads,
        decoder: decoder.params.collect_grads(&grads, &wd),
        sq_err: g.scalar(sq).as_f64(),
        reg: g.scalar(reg).as_f64(),
        prior: prior_node.map_or(0.0, |p| g.scalar(p).as_f64()),
    })
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = Range<usize>> {
    (0..n).step_by(size).map(move |s| s..(s + size).min(n))
}

fn add_all<T: Scalar>(acc: &mut [Tensor<T>], part: &[Tensor<T>]) -> Result<()> {
    for (a, p) in acc.iter_mut().zip(part) {
        a.add_assign(p)?;
    }
    Ok(())
}

fn check_finite<T: Scalar>(ts: &[Tensor<T>], what: &str) -> Result<()> {
    if ts.iter().all(|t| t.all_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} gradient")))
    }
}

/// One full-batch gradient of the training loss, computed in minibatches.
///
/// 1. draw and keep `ε` for every sample;
/// 2. encode batch by batch without keeping graphs, collecting `Z`;
/// 3. compute the expansion coefficients over all samples in 64-bit;
/// 4. rerun each batch with a graph and accumulate gradients of the
///    reconstruction, regularisation and proxy terms;
/// 5. return the accumulated gradients.
pub fn full_gradient_step<T: Scalar, R: Rng>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    gp: &GpParams,
    data: Samples<'_, T>,
    cfg: &StepConfig,
    rng: &mut R,
) -> Result<StepOutput<T>> {
    let mut tr = Tracker::new();
    tr.begin();
    let eps = normal_tensor::<T, _>(rng, &[data.len(), encoder.arch.latent_dim]);
    tr.end(0);
    run_step(encoder, decoder, gp, data, cfg, &eps, tr)
}

/// [`full_gradient_step`] with caller-supplied noise `ε` (`N×L`).
pub fn full_gradient_step_with_eps<T: Scalar>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    gp: &GpParams,
    data: Samples<'_, T>,
    cfg: &StepConfig,
    eps: &Tensor<T>,
) -> Result<StepOutput<T>> {
    run_step(encoder, decoder, gp, data, cfg, eps, Tracker::new())
}

fn run_step<T: Scalar>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    gp: &GpParams,
    data: Samples<'_, T>,
    cfg: &StepConfig,
    eps: &Tensor<T>,
    mut tr: Tracker,
) -> Result<StepOutput<T>> {
    data.check()?;
    let n = data.len();
    let l = encoder.arch.latent_dim;
    if n == 0 {
        return Err(Error::Invalid("gradient step over zero samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    if eps.shape() != [n, l] {
        return Err(Error::shape("stored noise", format!("{:?} for {} samples of dim {}", eps.shape(), n, l)));
    }
    let w = cfg.weights;
    let mut terms = StepTerms::default();

    // Step 2: value pass.
    tr.begin();
    let mut z = Tensor::<f64>::zeros(&[n, l]);
    for r in batches(n, cfg.batch_size) {
        let (imgs, cond) = data.batch(r.clone())?;
        let (mu, lv) = encoder.encode(&imgs, cond.as_ref())?;
        let e = eps.slice_rows(r.start, r.end)?;
        let half = T::of(0.5);
        let zb = Tensor::from_fn(mu.shape(), |i| mu.data()[i] + e.data()[i] * (half * lv.data()[i]).exp());
        terms.reg -= 0.5 * lv.sum();
        if !cfg.trainable.nets {
            let y = decoder.decode(&zb, cond.as_ref())?;
            terms.sq_err += y.zip_map(&imgs, |a, b| a - b)?.sum_sq();
        }
        let zb = zb.cast::<f64>();
        z.data_mut()[r.start * l..r.end * l].copy_from_slice(zb.data());
    }
    if !z.all_finite() {
        return Err(Error::NonFinite("latent codes".into()));
    }
    tr.end(1);

    // Step 3: expansion coefficients.
    tr.begin();
    let l_view = gp.view_factor()?;
    let coeffs = {
        let cov = gp.lowrank(data.objects, data.views)?;
        structured_coeffs(&z, &cov.v, cov.alpha(), &gp.x.x, data.objects, data.views, gp.num_views())?
    };
    drop(z);
    if !coeffs.all_finite() {
        return Err(Error::NonFinite("GP expansion coefficients".into()));
    }
    terms.prior_nll = coeffs.f0 + 0.5 * (n * l) as f64 * (2.0 * std::f64::consts::PI).ln();
    tr.end(2);

    // Step 4: graph pass.
    tr.begin();
    let mut enc_g = encoder.params.zeros_like();
    let mut dec_g = decoder.params.zeros_like();
    let mut gp_g = GpGrads::zeros(gp);
    for r in batches(n, cfg.batch_size) {
        if cfg.trainable.nets {
            let (imgs, cond) = data.batch(r.clone())?;
            let e = eps.slice_rows(r.start, r.end)?;
            let a_rows = coeffs.a.slice_rows(r.start, r.end)?;
            let pass = net_batch_pass(
                encoder,
                decoder,
                imgs,
                cond.as_ref(),
                &e,
                &w,
                LatentPrior::Linear(&a_rows),
                true,
            )?;
            add_all(&mut enc_g, &pass.encoder)?;
            add_all(&mut dec_g, &pass.decoder)?;
            terms.sq_err += pass.sq_err;
        }
        if cfg.trainable.gp && w.gp != 0.0 {
            let mut g = Graph::new();
            let vars = GpVars::bind(&mut g, gp, true);
            let proxy = proxy_gp_loss(&mut g, &vars, gp, &l_view, data.objects, data.views, &coeffs, r)?;
            let out = g.scale(proxy, w.gp);
            let grads = g.backward(out)?;
            let part = GpGrads {
                x: grads.get(vars.x).cloned().unwrap_or_else(|| Tensor::zeros(gp.x.x.shape())),
                view_raw: grads
                    .get(vars.view_raw)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(gp.view.raw_params().shape())),
                alpha_raw: grads.get(vars.alpha_raw).map_or(0.0, |t| t.item()),
            };
            gp_g.add(&part)?;
        }
    }
    tr.end(3);

    // Step 5: hand back.
    tr.begin();
    check_finite(&enc_g, "encoder")?;
    check_finite(&dec_g, "decoder")?;
    if !gp_g.all_finite() {
        return Err(Error::NonFinite("GP parameter gradient".into()));
    }
    if !(terms.sq_err.is_finite() && terms.reg.is_finite() && terms.prior_nll.is_finite()) {
        return Err(Error::NonFinite(format!("loss terms {terms:?}")));
    }
    tr.end(4);
    Ok(StepOutput {
        grads: StepGrads {
            encoder: enc_g,
            decoder: dec_g,
            gp: gp_g,
        },
        terms,
        memory: tr.finish(),
    })
}

/// Exact loss and gradients from a single 64-bit graph with a dense `N×N`
/// covariance. Only practical for small `N`; used to validate the protocol.
pub fn dense_reference(
    encoder: &Encoder<f64>,
    decoder: &Decoder<f64>,
    gp: &GpParams,
    data: Samples<'_, f64>,
    eps: &Tensor<f64>,
    weights: &TermWeights,
) -> Result<(StepGrads<f64>, StepTerms)> {
    data.check()?;
    let n = data.len();
    let mut g = Graph::new();
    let we = encoder.params.bind(&mut g, true);
    let wd = decoder.params.bind(&mut g, true);
    let vars = GpVars::bind(&mut g, gp, true);
    let x = g.constant(data.images.clone());
    let (mu, lv) = encoder.forward(&mut g, &we, x, data.cond)?;
    let z = reparameterize(&mut g, mu, lv, eps)?;
    let y = decoder.forward(&mut g, &wd, z, data.cond)?;
    let d = g.sub(y, x)?;
    let d2 = g.square(d);
    let sq = g.sum(d2);
    let slv = g.sum(lv);
    let reg = g.scale(slv, -0.5);

    let c = gp.view.covariance_graph(&mut g, vars.view_raw, &gp.angles)?;
    let cr = g.gather_rows(c, data.views)?;
    let crt = g.transpose(cr)?;
    let kview = g.gather_rows(crt, data.views)?;
    let xg = g.gather_rows(vars.x, data.objects)?;
    let xgt = g.transpose(xg)?;
    let kobj = g.matmul(xg, xgt)?;
    let kprod = g.mul(kview, kobj)?;
    let alpha = g.exp(vars.alpha_raw);
    let eye = g.constant(Tensor::eye(n));
    let ai = g.mul_scalar_var(eye, alpha)?;
    let k = g.add(kprod, ai)?;
    let nll = g.dense_gp_nll(z, k)?;

    let t1 = g.scale(sq, weights.recon);
    let t2 = g.scale(reg, weights.reg);
    let t3 = g.scale(nll, weights.gp);
    let s = g.add(t1, t2)?;
    let total = g.add(s, t3)?;
    let grads = g.backward(total)?;
    let out = StepGrads {
        encoder: encoder.params.collect_grads(&grads, &we),
        decoder: decoder.params.collect_grads(&grads, &wd),
        gp: GpGrads {
            x: grads.get(vars.x).cloned().unwrap_or_else(|| Tensor::zeros(gp.x.x.shape())),
            view_raw: grads
                .get(vars.view_raw)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(gp.view.raw_params().shape())),
            alpha_raw: grads.get(vars.alpha_raw).map_or(0.0, |t| t.item()),
        },
    };
    let terms = StepTerms {
        sq_err: g.scalar(sq),
        prior_nll: g.scalar(nll),
        reg: g.scalar(reg),
    };
    Ok((out, terms))
}

/// Largest relative difference across the parameter groups of two gradient
/// sets, each group measured as `max|a − b| / max|b|`.
pub fn max_group_rel_diff(a: &StepGrads<f64>, b: &StepGrads<f64>) -> Vec<(String, f64)> {
    fn rel(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let num = x.zip_map(y, |p, q| p - q).map_or(f64::INFINITY, |d| d.max_abs());
        let den = y.max_abs();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }
    fn group(xs: &[Tensor<f64>], ys: &[Tensor<f64>]) -> f64 {
        let num = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| x.zip_map(y, |p, q| p - q).map_or(f64::INFINITY, |d| d.max_abs()))
            .fold(0.0, f64::max);
        let den = ys.iter().map(|y| y.max_abs()).fold(0.0, f64::max);
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }
    let alpha = {
        let den = b.gp.alpha_raw.abs();
        let num = (a.gp.alpha_raw - b.gp.alpha_raw).abs();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    };
    vec![
        ("encoder".to_string(), group(&a.encoder, &b.encoder)),
        ("decoder".to_string(), group(&a.decoder, &b.decoder)),
        ("object features".to_string(), rel(&a.gp.x, &b.gp.x)),
        ("view kernel".to_string(), rel(&a.gp.view_raw, &b.gp.view_raw)),
        ("noise variance".to_string(), alpha),
    ]
}
