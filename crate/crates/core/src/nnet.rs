//! Encoder and decoder networks, the diagonal Gaussian variational posterior,
//! and the reparameterised sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{ConvSpec, Graph, Grads, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// Two stride-2 convolutions and a dense head (mirrored in the decoder).
    Conv,
    /// One hidden dense layer.
    Mlp,
}

/// Layer hyperparameters of an encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    pub channels: usize,
    pub size: usize,
    pub latent_dim: usize,
    /// Convolution channel widths (conv) or the hidden width (mlp, first entry).
    pub widths: Vec<usize>,
    /// Number of conditioning features appended for the CVAE (0 otherwise).
    pub cond_dim: usize,
}

impl Architecture {
    pub fn conv(channels: usize, size: usize, latent_dim: usize) -> Self {
        Architecture {
            kind: ArchKind::Conv,
            channels,
            size,
            latent_dim,
            widths: vec![8, 16],
            cond_dim: 0,
        }
    }

    pub fn mlp(channels: usize, size: usize, latent_dim: usize) -> Self {
        Architecture {
            kind: ArchKind::Mlp,
            channels,
            size,
            latent_dim,
            widths: vec![256],
            cond_dim: 0,
        }
    }

    pub fn with_cond(mut self, cond_dim: usize) -> Self {
        self.cond_dim = cond_dim;
        self
    }

    /// Pixels per image (`K`).
    pub fn pixels(&self) -> usize {
        self.channels * self.size * self.size
    }

    fn spatial(&self) -> (usize, usize) {
        let spec = ConvSpec::default();
        let s1 = spec.out_size(self.size);
        (s1, spec.out_size(s1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.channels == 0 || self.size == 0 {
            return Err(Error::Invalid(format!("degenerate architecture {:?}", self)));
        }
        let need = match self.kind {
            ArchKind::Conv => 2,
            ArchKind::Mlp => 1,
        };
        if self.widths.len() != need || self.widths.contains(&0) {
            return Err(Error::Invalid(format!("{:?} needs {} non-zero widths", self.kind, need)));
        }
        if self.kind == ArchKind::Conv && self.size < 4 {
            return Err(Error::Invalid("convolutional nets need images of at least 4x4".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        self.names.push(name);
        self.tensors.push(t);
    }

    /// Places every tensor on the graph, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Gradients for bound variables (zeros where none flowed).
    pub fn collect_grads(&self, grads: &Grads<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }
}

fn glorot<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

enum Init<'a, R> {
    Random(&'a mut R),
    Zeros,
}

impl<R: Rng> Init<'_, R> {
    fn weight<T: Scalar>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        match self {
            Init::Random(rng) => glorot(*rng, shape, fan_in, fan_out),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// Constant feature planes `[B, R, s, s]` from a `[B, R]` feature matrix.
fn feature_planes<T: Scalar>(cond: &Tensor<T>, s: usize) -> Tensor<T> {
    let (b, r) = (cond.rows(), cond.cols());
    let mut data = Vec::with_capacity(b * r * s * s);
    for i in 0..b {
        for &v in cond.row(i) {
            data.extend(std::iter::repeat_n(v, s * s));
        }
    }
    Tensor::new(&[b, r, s, s], data).expect("plane shape")
}

fn check_cond<T: Scalar>(arch: &Architecture, batch: usize, cond: Option<&Tensor<T>>) -> Result<()> {
    match (arch.cond_dim, cond) {
        (0, None) => Ok(()),
        (r, Some(c)) if r > 0 && c.ndim() == 2 && c.cols() == r && c.rows() == batch => Ok(()),
        (r, c) => Err(Error::shape(
            "conditioning",
            format!("architecture expects {} features, got {:?}", r, c.map(|t| t.shape().to_vec())),
        )),
    }
}

/// Maps images to the mean and log-variance of `q(z | y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub arch: Architecture,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        Self::build(arch, Init::Random(rng))
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::build::<rand::rngs::mock::StepRng>(arch, Init::Zeros)
    }

    fn build<R: Rng>(arch: Architecture, mut init: Init<'_, R>) -> Result<Self> {
        arch.validate()?;
        let mut p = ParamSet::new();
        let l2 = 2 * arch.latent_dim;
        let r = arch.cond_dim;
        match arch.kind {
            ArchKind::Conv => {
                let (c1, c2) = (arch.widths[0], arch.widths[1]);
                let cin = arch.channels + r;
                let (_, s2) = arch.spatial();
                p.push("enc.conv1.w".into(), init.weight(&[c1, cin, 3, 3], cin * 9, c1 * 9));
                p.push("enc.conv1.b".into(), Tensor::zeros(&[c1]));
                p.push("enc.conv2.w".into(), init.weight(&[c2, c1, 3, 3], c1 * 9, c2 * 9));
                p.push("enc.conv2.b".into(), Tensor::zeros(&[c2]));
                let flat = c2 * s2 * s2 + r;
                p.push("enc.dense.w".into(), init.weight(&[flat, l2], flat, l2));
                p.push("enc.dense.b".into(), Tensor::zeros(&[l2]));
            }
            ArchKind::Mlp => {
                let hidden = arch.widths[0];
                let k = arch.pixels() + r;
                p.push("enc.fc1.w".into(), init.weight(&[k, hidden], k, hidden));
                p.push("enc.fc1.b".into(), Tensor::zeros(&[hidden]));
                p.push("enc.fc2.w".into(), init.weight(&[hidden + r, l2], hidden + r, l2));
                p.push("enc.fc2.b".into(), Tensor::zeros(&[l2]));
            }
        }
        Ok(Encoder { arch, params: p })
    }

    /// Records the encoder on `g`. `x` is `[B, C, S, S]`; returns `(mu, log_var)`, each `[B, L]`.
    pub fn forward(&self, g: &mut Graph<T>, w: &[Var], x: Var, cond: Option<&Tensor<T>>) -> Result<(Var, Var)> {
        let a = &self.arch;
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != a.channels || xs[2] != a.size || xs[3] != a.size {
            return Err(Error::shape(
                "encode",
                format!("expected [B, {}, {}, {}], got {:?}", a.channels, a.size, a.size, xs),
            ));
        }
        let b = xs[0];
        check_cond(a, b, cond)?;
        let cond_var = cond.map(|c| g.constant(c.clone()));
        let out = match a.kind {
            ArchKind::Conv => {
                let spec = ConvSpec::default();
                let input = match cond {
                    Some(c) => {
                        let planes = g.constant(feature_planes(c, a.size));
                        g.concat_channels(&[x, planes])?
                    }
                    None => x,
                };
                let h = g.conv2d(input, w[0], w[1], spec)?;
                let h = g.relu(h);
                let h = g.conv2d(h, w[2], w[3], spec)?;
                let h = g.relu(h);
                let flat = g.value(h).row_len();
                let mut h = g.reshape(h, &[b, flat])?;
                if let Some(cv) = cond_var {
                    h = g.concat_cols(&[h, cv])?;
                }
                g.dense(h, w[4], w[5])?
            }
            ArchKind::Mlp => {
                let mut h = g.reshape(x, &[b, a.pixels()])?;
                if let Some(cv) = cond_var {
                    h = g.concat_cols(&[h, cv])?;
                }
                let h = g.dense(h, w[0], w[1])?;
                let mut h = g.relu(h);
                if let Some(cv) = cond_var {
                    h = g.concat_cols(&[h, cv])?;
                }
                g.dense(h, w[2], w[3])?
            }
        };
        let l = a.latent_dim;
        let mu = g.slice_cols(out, 0, l)?;
        let log_var = g.slice_cols(out, l, 2 * l)?;
        Ok((mu, log_var))
    }

    /// Value-only encoding of a batch.
    pub fn encode(&self, images: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let w = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let (mu, lv) = self.forward(&mut g, &w, x, cond)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }
}

/// Maps latent codes to images in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub arch: Architecture,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        Self::build(arch, Init::Random(rng))
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::build::<rand::rngs::mock::StepRng>(arch, Init::Zeros)
    }

    fn build<R: Rng>(arch: Architecture, mut init: Init<'_, R>) -> Result<Self> {
        arch.validate()?;
        let mut p = ParamSet::new();
        let l = arch.latent_dim;
        let r = arch.cond_dim;
        match arch.kind {
            ArchKind::Conv => {
                let (c1, c2) = (arch.widths[0], arch.widths[1]);
                let (_, s2) = arch.spatial();
                let flat = c2 * s2 * s2;
                p.push("dec.dense.w".into(), init.weight(&[l + r, flat], l + r, flat));
                p.push("dec.dense.b".into(), Tensor::zeros(&[flat]));
                p.push("dec.deconv1.w".into(), init.weight(&[c2 + r, c1, 3, 3], (c2 + r) * 9, c1 * 9));
                p.push("dec.deconv1.b".into(), Tensor::zeros(&[c1]));
                let c = arch.channels;
                p.push("dec.deconv2.w".into(), init.weight(&[c1, c, 3, 3], c1 * 9, c * 9));
                p.push("dec.deconv2.b".into(), Tensor::zeros(&[c]));
            }
            ArchKind::Mlp => {
                let hidden = arch.widths[0];
                let k = arch.pixels();
                p.push("dec.fc1.w".into(), init.weight(&[l + r, hidden], l + r, hidden));
                p.push("dec.fc1.b".into(), Tensor::zeros(&[hidden]));
                p.push("dec.fc2.w".into(), init.weight(&[hidden + r, k], hidden + r, k));
                p.push("dec.fc2.b".into(), Tensor::zeros(&[k]));
            }
        }
        Ok(Decoder { arch, params: p })
    }

    /// Records the decoder on `g`. `z` is `[B, L]`; returns `[B, C, S, S]`.
    pub fn forward(&self, g: &mut Graph<T>, w: &[Var], z: Var, cond: Option<&Tensor<T>>) -> Result<Var> {
        let a = &self.arch;
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != a.latent_dim {
            return Err(Error::shape("decode", format!("expected [B, {}], got {:?}", a.latent_dim, zs)));
        }
        let b = zs[0];
        check_cond(a, b, cond)?;
        let cond_var = cond.map(|c| g.constant(c.clone()));
        let input = match cond_var {
            Some(cv) => g.concat_cols(&[z, cv])?,
            None => z,
        };
        let logits = match a.kind {
            ArchKind::Conv => {
                let spec = ConvSpec::default();
                let (s1, s2) = a.spatial();
                let h = g.dense(input, w[0], w[1])?;
                let h = g.relu(h);
                let mut h = g.reshape(h, &[b, a.widths[1], s2, s2])?;
                if let Some(c) = cond {
                    let planes = g.constant(feature_planes(c, s2));
                    h = g.concat_channels(&[h, planes])?;
                }
                let h = g.conv_transpose2d(h, w[2], w[3], spec, (s1, s1))?;
                let h = g.relu(h);
                g.conv_transpose2d(h, w[4], w[5], spec, (a.size, a.size))?
            }
            ArchKind::Mlp => {
                let h = g.dense(input, w[0], w[1])?;
                let mut h = g.relu(h);
                if let Some(cv) = cond_var {
                    h = g.concat_cols(&[h, cv])?;
                }
                let h = g.dense(h, w[2], w[3])?;
                g.reshape(h, &[b, a.channels, a.size, a.size])?
            }
        };
        Ok(g.sigmoid(logits))
    }

    pub fn decode(&self, z: &Tensor<T>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let w = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let y = self.forward(&mut g, &w, zv, cond)?;
        Ok(g.value(y).clone())
    }
}

/// Variational parameters, stored noise, and samples for a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
    pub eps: Tensor<T>,
    pub z: Tensor<T>,
}

impl<T: Scalar> LatentBatch<T> {
    pub fn sample(mu: Tensor<T>, log_var: Tensor<T>, eps: Tensor<T>) -> Result<Self> {
        mu.check_same(&log_var, "reparameterize")?;
        mu.check_same(&eps, "reparameterize")?;
        let half = T::of(0.5);
        let z = Tensor::from_fn(mu.shape(), |i| {
            mu.data()[i] + eps.data()[i] * (half * log_var.data()[i]).exp()
        });
        Ok(LatentBatch { mu, log_var, eps, z })
    }
}

/// `z = mu + eps ⊙ exp(½·log_var)` on the graph; `eps` enters as a constant.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var, eps: &Tensor<T>) -> Result<Var> {
    if g.shape(mu) != g.shape(log_var) || g.shape(mu) != eps.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("mu {:?}, log_var {:?}, eps {:?}", g.shape(mu), g.shape(log_var), eps.shape()),
        ));
    }
    let half = g.scale(log_var, 0.5);
    let sigma = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(e, sigma)?;
    g.add(mu, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn zero_net_encodes_to_biases() {
        let arch = Architecture::conv(1, 28, 16);
        let mut enc = Encoder::<f64>::zeros(arch).unwrap();
        let bias: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        *enc.params.tensors.last_mut().unwrap() = Tensor::new(&[32], bias.clone()).unwrap();
        let (mu, lv) = enc.encode(&Tensor::zeros(&[3, 1, 28, 28]), None).unwrap();
        assert_eq!(mu.shape(), &[3, 16]);
        assert_eq!(lv.shape(), &[3, 16]);
        for i in 0..3 {
            assert_eq!(mu.row(i), &bias[..16]);
            assert_eq!(lv.row(i), &bias[16..]);
        }
    }

    #[test]
    fn conv_shapes_for_default_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = Architecture::conv(1, 28, 16);
        let enc = Encoder::<f64>::new(arch.clone(), &mut rng).unwrap();
        let dec = Decoder::<f64>::new(arch, &mut rng).unwrap();
        let x = Tensor::from_fn(&[5, 1, 28, 28], |i| (i % 7) as f64 / 7.0);
        let (mu, lv) = enc.encode(&x, None).unwrap();
        assert_eq!(mu.shape(), &[5, 16]);
        assert!(lv.all_finite());
        let y = dec.decode(&mu, None).unwrap();
        assert_eq!(y.shape(), &[5, 1, 28, 28]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(enc.encode(&Tensor::zeros(&[2, 1, 27, 27]), None).is_err());
        assert!(dec.decode(&Tensor::zeros(&[2, 15]), None).is_err());
    }

    #[test]
    fn zero_decoder_gives_sigmoid_of_bias() {
        let arch = Architecture::conv(1, 28, 16);
        let mut dec = Decoder::<f64>::zeros(arch).unwrap();
        let nb = dec.params.tensors.len();
        dec.params.tensors[nb - 1] = Tensor::new(&[1], vec![0.7]).unwrap();
        let y = dec.decode(&Tensor::full(&[2, 16], 0.3), None).unwrap();
        let want = 1.0 / (1.0 + (-0.7f64).exp());
        assert!(y.data().iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn odd_image_sizes_round_trip_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = Architecture::conv(1, 17, 4);
        let enc = Encoder::<f32>::new(arch.clone(), &mut rng).unwrap();
        let dec = Decoder::<f32>::new(arch, &mut rng).unwrap();
        let (mu, _) = enc.encode(&Tensor::zeros(&[2, 1, 17, 17]), None).unwrap();
        assert_eq!(dec.decode(&mu, None).unwrap().shape(), &[2, 1, 17, 17]);
    }

    #[test]
    fn conditioned_nets_accept_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for arch in [Architecture::conv(1, 12, 3).with_cond(2), Architecture::mlp(1, 6, 3).with_cond(2)] {
            let s = arch.size;
            let enc = Encoder::<f64>::new(arch.clone(), &mut rng).unwrap();
            let dec = Decoder::<f64>::new(arch, &mut rng).unwrap();
            let cond = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
            let (mu, _) = enc.encode(&Tensor::zeros(&[2, 1, s, s]), Some(&cond)).unwrap();
            let y = dec.decode(&mu, Some(&cond)).unwrap();
            assert_eq!(y.shape(), &[2, 1, s, s]);
            assert!(enc.encode(&Tensor::zeros(&[2, 1, s, s]), None).is_err());
        }
    }

    #[test]
    fn reparameterize_edge_cases() {
        let mu = Tensor::from_rows(&[vec![1.0, -2.0]]);
        let zero = Tensor::zeros(&[1, 2]);
        let b = LatentBatch::sample(mu.clone(), Tensor::full(&[1, 2], 3.0), zero.clone()).unwrap();
        assert_eq!(b.z, mu);
        let eps = Tensor::from_rows(&[vec![0.5, -1.5]]);
        let b = LatentBatch::sample(mu.clone(), Tensor::full(&[1, 2], -50.0), eps.clone()).unwrap();
        assert!(b.z.rel_diff(&mu) < 1e-10);
        let b = LatentBatch::sample(zero.clone(), zero.clone(), eps.clone()).unwrap();
        assert_eq!(b.z, eps);
    }

    #[test]
    fn reparameterize_gradient_skips_noise() {
        let mut g = Graph::<f64>::new();
        let mu = g.param(Tensor::from_rows(&[vec![0.2]]));
        let lv = g.param(Tensor::from_rows(&[vec![0.4]]));
        let eps = Tensor::from_rows(&[vec![1.3]]);
        let z = reparameterize(&mut g, mu, lv, &eps).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(mu).unwrap().item(), 1.0);
        let want = 1.3 * 0.5 * (0.2f64).exp();
        assert!((grads.get(lv).unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn reparameterization_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mu, lv) = (0.7_f64, -0.4_f64);
        let n = 100_000;
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b = LatentBatch::sample(
            Tensor::full(&[n, 1], mu),
            Tensor::full(&[n, 1], lv),
            Tensor::new(&[n, 1], eps).unwrap(),
        )
        .unwrap();
        let mean = b.z.sum() / n as f64;
        let var = b.z.data().iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - mu).abs() < 0.02);
        assert!((var / lv.exp() - 1.0).abs() < 0.03);
    }

    fn net_grad_error(arch: Architecture, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::<f64>::new(arch.clone(), &mut rng).unwrap();
        let dec = Decoder::<f64>::new(arch.clone(), &mut rng).unwrap();
        let s = arch.size;
        let x = Tensor::from_fn(&[2, 1, s, s], |_| rng.gen_range(0.0..1.0));
        let eps = Tensor::from_fn(&[2, arch.latent_dim], |_| rng.gen_range(-1.0..1.0));
        let ne = enc.params.tensors.len();
        let mut params = enc.params.tensors.clone();
        params.extend(dec.params.tensors.iter().cloned());
        grad_check(
            |g, v| {
                let xv = g.constant(x.clone());
                let (mu, lv) = enc.forward(g, &v[..ne], xv, None)?;
                let z = reparameterize(g, mu, lv, &eps)?;
                let y = dec.forward(g, &v[ne..], z, None)?;
                let d = g.sub(y, xv)?;
                let d = g.square(d);
                Ok(g.sum(d))
            },
            &params,
            1e-4,
        )
        .unwrap()
    }

    #[test]
    fn networks_pass_grad_check() {
        let mut conv = Architecture::conv(1, 8, 2);
        conv.widths = vec![2, 3];
        assert!(net_grad_error(conv, 5) <= 1e-4);
        let mut mlp = Architecture::mlp(1, 4, 3);
        mlp.widths = vec![5];
        assert!(net_grad_error(mlp, 6) <= 1e-4);
    }
}
