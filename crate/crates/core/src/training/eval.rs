use std::f64::consts::PI;

use crate::datagen::Subset;
use crate::error::{Error, Result};
use crate::kernels::factor_row;
use crate::lowrank_gp::{gp_predict_batch, gp_predict_batch_mc};
use crate::ndtensor::Tensor;
use crate::nnet::{Decoder, Encoder};
use crate::rng::{normal_tensor, stream, stream_rng};
use crate::scalar::Scalar;

use super::Model;

const EVAL_BATCH: usize = 256;

/// Encoder means and log-variances for every sample, as 64-bit `N×L` matrices.
pub fn encode_means<T: Scalar>(encoder: &Encoder<T>, data: &Subset<T>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let n = data.len();
    let l = encoder.arch.latent_dim;
    let mut mu = Vec::with_capacity(n * l);
    let mut lv = Vec::with_capacity(n * l);
    for s in (0..n).step_by(EVAL_BATCH) {
        let e = (s + EVAL_BATCH).min(n);
        let (imgs, cond) = data.samples().batch(s..e)?;
        let (m, v) = encoder.encode(&imgs, cond.as_ref())?;
        mu.extend(m.data().iter().map(|x| x.as_f64()));
        lv.extend(v.data().iter().map(|x| x.as_f64()));
    }
    Ok((Tensor::new(&[n, l], mu)?, Tensor::new(&[n, l], lv)?))
}

/// Decodes `N×L` latents in batches, optionally conditioned.
pub fn decode_all<T: Scalar>(decoder: &Decoder<T>, z: &Tensor<f64>, cond: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let n = z.rows();
    let a = &decoder.arch;
    let mut out = Vec::with_capacity(n * a.pixels());
    for s in (0..n).step_by(EVAL_BATCH) {
        let e = (s + EVAL_BATCH).min(n);
        let zb: Tensor<T> = z.slice_rows(s, e)?.cast();
        let cb = cond.map(|c| c.slice_rows(s, e)).transpose()?;
        out.extend_from_slice(decoder.decode(&zb, cb.as_ref())?.data());
    }
    Tensor::new(&[n, a.channels, a.size, a.size], out)
}

/// Pixel-mean squared error of each sample.
pub fn prediction_mse<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Vec<f64>> {
    pred.check_same(truth, "prediction_mse")?;
    let k = pred.row_len().max(1);
    Ok((0..pred.rows())
        .map(|i| {
            pred.row(i)
                .iter()
                .zip(truth.row(i))
                .map(|(a, b)| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
                .sum::<f64>()
                / k as f64
        })
        .collect())
}

/// Mean over validation samples and pixels of `(y − g(μ(y)))²`.
pub fn estimate_sigma_y<T: Scalar>(encoder: &Encoder<T>, decoder: &Decoder<T>, val: &Subset<T>) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Invalid("cannot estimate the observation variance on an empty set".into()));
    }
    let (mu, _) = encode_means(encoder, val)?;
    let rec = decode_all(decoder, &mu, val.cond.as_ref())?;
    let per = prediction_mse(&rec, &val.images)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-sample validation ELBO of a VAE with observation variance `sigma_y2`,
/// using one fixed noise draw per sample.
pub fn vae_validation_elbo<T: Scalar>(model: &Model<T>, val: &Subset<T>, sigma_y2: f64, seed: u64) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    let (mu, lv) = encode_means(&model.encoder, val)?;
    let eps: Tensor<f64> = normal_tensor(&mut stream_rng(seed, &[stream::EVAL, 0]), mu.shape());
    let z = Tensor::from_fn(mu.shape(), |i| mu.data()[i] + eps.data()[i] * (0.5 * lv.data()[i]).exp());
    let rec = decode_all(&model.decoder, &z, val.cond.as_ref())?;
    let k = val.images.row_len() as f64;
    let per = prediction_mse(&rec, &val.images)?;
    let n = val.len() as f64;
    let loglik: f64 = per.iter().map(|m| -0.5 * k * (2.0 * PI * sigma_y2).ln() - 0.5 * k * m / sigma_y2).sum();
    let kl: f64 = mu
        .data()
        .iter()
        .zip(lv.data())
        .map(|(m, v)| 0.5 * (m * m + v.exp() - 1.0 - v))
        .sum();
    Ok((loglik - kl) / n)
}

/// GP predictions of the images of `(object, view)` queries: encode the
/// training images, predict the query latents, decode. With `samples > 0`
/// the training latents are averaged over that many encoder draws.
pub fn gp_predict_images<T: Scalar>(
    model: &Model<T>,
    train: &Subset<T>,
    queries: &[(usize, usize)],
    samples: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let gp = model
        .gp
        .as_ref()
        .ok_or_else(|| Error::Invalid("model has no GP prior".into()))?;
    let (mu, lv) = encode_means(&model.encoder, train)?;
    let cov = gp.lowrank(&train.objects, &train.views)?;
    let l_view = gp.view_factor()?;
    let h = cov.rank();
    let mut rows = Vec::with_capacity(queries.len() * h);
    for &(p, q) in queries {
        rows.extend(factor_row(&gp.x.x, &l_view, p, q)?);
    }
    let v_star = Tensor::new(&[queries.len(), h], rows)?;
    let z_star = if samples == 0 {
        gp_predict_batch(&v_star, &cov.v, cov.alpha(), &mu)?
    } else {
        let mut rng = stream_rng(seed, &[stream::PREDICT, 0]);
        let draws: Vec<Tensor<f64>> = (0..samples)
            .map(|_| {
                let e: Tensor<f64> = normal_tensor(&mut rng, mu.shape());
                Tensor::from_fn(mu.shape(), |i| mu.data()[i] + e.data()[i] * (0.5 * lv.data()[i]).exp())
            })
            .collect();
        gp_predict_batch_mc(&v_star, &cov.v, cov.alpha(), &draws)?
    };
    decode_all(&model.decoder, &z_star, None)
}

/// Outcome of one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaResult {
    pub lambda: f64,
    /// Score (higher is better), `None` when training failed.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSelection {
    pub best: f64,
    pub results: Vec<LambdaResult>,
}

/// Evaluates every grid value and returns the one with the highest score.
/// Ties go to the smaller value, then to the earlier grid entry. Grid points
/// whose evaluation reports non-finite numbers are marked failed and skipped.
pub fn select_lambda(grid: &[f64], mut evaluate: impl FnMut(f64) -> Result<f64>) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::Invalid("lambda grid is empty".into()));
    }
    if let Some(v) = grid.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Invalid(format!("lambda grid values must be positive, got {v}")));
    }
    let mut results = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let score = match evaluate(lambda) {
            Ok(s) if s.is_finite() => Some(s),
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::NotPositiveDefinite(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(s) = score {
            let better = match best {
                None => true,
                Some((bs, bl)) => s > bs || (s == bs && lambda < bl),
            };
            if better {
                best = Some((s, lambda));
            }
        }
        results.push(LambdaResult { lambda, score });
    }
    let (_, best) = best.ok_or_else(|| Error::NonFinite("every lambda grid point diverged".into()))?;
    Ok(LambdaSelection { best, results })
}
