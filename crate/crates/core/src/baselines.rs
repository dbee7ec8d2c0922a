//! Prediction of unseen (object, view) images by GPPVAE, LIVAE and CVAE,
//! and the per-sample MSE summary.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use crate::config::{LambdaCriterion, ModelKind, RunConfig};
use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;
use crate::training::{
    decode_all, encode_means, estimate_sigma_y, gp_predict_images, prediction_mse, schedule, select_lambda, train,
    vae_validation_elbo, EpochRecord, LambdaSelection, Model, TrainData, TrainState,
};

/// A sample that could not be predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct Skipped {
    pub index: usize,
    pub object: usize,
    pub reason: String,
}

/// Predicted and true images of a set of dataset samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T> {
    /// Dataset indices of the predicted samples.
    pub indices: Vec<usize>,
    pub objects: Vec<usize>,
    pub views: Vec<usize>,
    pub predicted: Tensor<T>,
    pub truth: Tensor<T>,
    pub per_sample_mse: Vec<f64>,
    pub skipped: Vec<Skipped>,
}

impl<T: Scalar> PredictionSet<T> {
    fn new(ds: &Dataset, indices: Vec<usize>, predicted: Tensor<T>, skipped: Vec<Skipped>) -> Result<Self> {
        let truth: Tensor<T> = ds.images.gather_rows(&indices)?.cast();
        let per_sample_mse = prediction_mse(&predicted, &truth)?;
        Ok(PredictionSet {
            objects: indices.iter().map(|&i| ds.object_ids[i]).collect(),
            views: indices.iter().map(|&i| ds.view_ids[i]).collect(),
            indices,
            predicted,
            truth,
            per_sample_mse,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseSummary {
    pub mean: f64,
    /// Sample standard deviation of the per-sample errors over `√n`.
    pub std_error: f64,
    pub n: usize,
}

pub fn eval_mse(per_sample: &[f64]) -> Result<MseSummary> {
    let n = per_sample.len();
    if n == 0 {
        return Err(Error::Invalid("no predictions to evaluate".into()));
    }
    let mean = per_sample.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        let var = per_sample.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(MseSummary { mean, std_error, n })
}

/// Interpolation weights over the observed views that flank `target` on the
/// circle. A target that is itself observed gets weight one.
pub fn livae_weights(angles: &[f64], observed: &[usize], target: usize) -> Result<Vec<(usize, f64)>> {
    let at = *angles.get(target).ok_or(Error::Index {
        what: "views",
        index: target,
        size: angles.len(),
    })?;
    if observed.contains(&target) {
        return Ok(vec![(target, 1.0)]);
    }
    // Counter-clockwise offset of each observed view from the target.
    let mut offsets = Vec::with_capacity(observed.len());
    for &v in observed {
        let a = *angles.get(v).ok_or(Error::Index {
            what: "views",
            index: v,
            size: angles.len(),
        })?;
        offsets.push((v, (a - at).rem_euclid(TAU)));
    }
    let next = offsets.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1));
    let prev = offsets.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1));
    match (next, prev) {
        (Some((v1, d1)), Some((v0, d))) if v0 != v1 => {
            let d0 = TAU - d;
            let mut w = vec![(v0, d1 / (d0 + d1)), (v1, d0 / (d0 + d1))];
            w.sort_by_key(|p| p.0);
            Ok(w)
        }
        _ => Err(Error::Invalid(format!(
            "need two observed views to interpolate, got {}",
            observed.len()
        ))),
    }
}

/// Encoder means of the training samples, grouped by object as `(view, row)`.
fn object_latents<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    train_idx: &[usize],
    with_cond: bool,
) -> Result<(Tensor<f64>, BTreeMap<usize, Vec<(usize, usize)>>)> {
    let sub = ds.subset::<T>(train_idx, with_cond)?;
    let (mu, _) = encode_means(&model.encoder, &sub)?;
    let mut by_object: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (row, (&p, &q)) in sub.objects.iter().zip(&sub.views).enumerate() {
        by_object.entry(p).or_default().push((q, row));
    }
    Ok((mu, by_object))
}

/// Linear interpolation between the encoder means of the flanking observed
/// views of each object, decoded with a plain VAE.
pub fn livae_predict<T: Scalar>(model: &Model<T>, ds: &Dataset, train_idx: &[usize], targets: &[usize]) -> Result<PredictionSet<T>> {
    let (mu, by_object) = object_latents(model, ds, train_idx, false)?;
    let l = mu.cols();
    let mut kept = Vec::with_capacity(targets.len());
    let mut skipped = Vec::new();
    let mut z = Vec::with_capacity(targets.len() * l);
    for &i in targets {
        let (p, q) = (ds.object_ids[i], ds.view_ids[i]);
        let seen = by_object.get(&p).map_or(&[][..], |v| v.as_slice());
        let views: Vec<usize> = seen.iter().map(|s| s.0).collect();
        match livae_weights(&ds.angles, &views, q) {
            Ok(w) => {
                let mut row = vec![0.0; l];
                for (v, wt) in w {
                    let r = seen.iter().find(|s| s.0 == v).map(|s| s.1).expect("weight view is observed");
                    for (acc, x) in row.iter_mut().zip(mu.row(r)) {
                        *acc += wt * x;
                    }
                }
                z.extend(row);
                kept.push(i);
            }
            Err(e) => skipped.push(Skipped {
                index: i,
                object: p,
                reason: e.to_string(),
            }),
        }
    }
    let z = Tensor::new(&[kept.len(), l], z)?;
    let pred = decode_all(&model.decoder, &z, None)?;
    PredictionSet::new(ds, kept, pred, skipped)
}

/// Averages each object's conditioned encoder means and decodes the average
/// conditioned on the target view.
pub fn cvae_predict<T: Scalar>(model: &Model<T>, ds: &Dataset, train_idx: &[usize], targets: &[usize]) -> Result<PredictionSet<T>> {
    if model.arch().cond_dim == 0 {
        return Err(Error::Invalid("CVAE prediction needs a conditioned model".into()));
    }
    let (mu, by_object) = object_latents(model, ds, train_idx, true)?;
    let l = mu.cols();
    let mut z = Vec::with_capacity(targets.len() * l);
    for &i in targets {
        let p = ds.object_ids[i];
        let seen = by_object
            .get(&p)
            .ok_or_else(|| Error::Invalid(format!("object {p} has no training images")))?;
        let mut row = vec![0.0; l];
        for &(_, r) in seen {
            for (acc, x) in row.iter_mut().zip(mu.row(r)) {
                *acc += x / seen.len() as f64;
            }
        }
        z.extend(row);
    }
    let views: Vec<usize> = targets.iter().map(|&i| ds.view_ids[i]).collect();
    let cond: Tensor<T> = ds.cond_for(&views);
    let z = Tensor::new(&[targets.len(), l], z)?;
    let pred = decode_all(&model.decoder, &z, Some(&cond))?;
    PredictionSet::new(ds, targets.to_vec(), pred, Vec::new())
}

/// Encode the training images, predict the target latents with the GP, decode.
pub fn gppvae_predict<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    train_idx: &[usize],
    targets: &[usize],
    samples: usize,
    seed: u64,
) -> Result<PredictionSet<T>> {
    let sub = ds.subset::<T>(train_idx, false)?;
    let queries: Vec<(usize, usize)> = targets.iter().map(|&i| (ds.object_ids[i], ds.view_ids[i])).collect();
    let pred = gp_predict_images(model, &sub, &queries, samples, seed)?;
    PredictionSet::new(ds, targets.to_vec(), pred, Vec::new())
}

/// Predicts with the method belonging to `kind`: LIVAE for a plain VAE.
pub fn predict<T: Scalar>(
    kind: ModelKind,
    model: &Model<T>,
    ds: &Dataset,
    train_idx: &[usize],
    targets: &[usize],
    samples: usize,
    seed: u64,
) -> Result<PredictionSet<T>> {
    match kind {
        ModelKind::Vae => livae_predict(model, ds, train_idx, targets),
        ModelKind::Cvae => cvae_predict(model, ds, train_idx, targets),
        ModelKind::GppvaeJoint | ModelKind::GppvaeDis => gppvae_predict(model, ds, train_idx, targets, samples, seed),
    }
}

/// Method label used in summaries.
pub fn method_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Vae => "livae",
        other => other.name(),
    }
}

/// Chooses λ from `cfg.lambda_grid`. With the ELBO criterion a plain VAE is
/// trained per value and scored by validation ELBO under the estimated
/// observation variance. With the prediction criterion the configured model
/// is trained and scored by minus its validation prediction MSE.
pub fn tune_lambda<T: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    split: &Split,
    mut on_epoch: impl FnMut(f64, &EpochRecord),
) -> Result<LambdaSelection> {
    if split.val.is_empty() {
        return Err(Error::Invalid("λ selection needs a validation set".into()));
    }
    select_lambda(&cfg.lambda_grid, |lambda| {
        let run = RunConfig {
            model: match cfg.lambda_criterion {
                LambdaCriterion::Elbo => ModelKind::Vae,
                LambdaCriterion::PredictionMse => cfg.model,
            },
            lambda: Some(lambda),
            ..cfg.clone()
        };
        let data = TrainData::<T>::from_split(ds, split, run.model == ModelKind::Cvae)?;
        let model = Model::new(&run, run.architecture(ds.size), ds.num_objects, &ds.angles)?;
        let mut state = TrainState::new(model, schedule(&run, false), lambda);
        train(&run, &data, &mut state, |_, r| {
            on_epoch(lambda, r);
            Ok(())
        })?;
        match cfg.lambda_criterion {
            LambdaCriterion::Elbo => {
                let s2 = estimate_sigma_y(&state.model.encoder, &state.model.decoder, &data.val)?;
                vae_validation_elbo(&state.model, &data.val, s2, run.seed)
            }
            LambdaCriterion::PredictionMse => {
                let set = predict(run.model, &state.model, ds, &split.train, &split.val, run.predict_samples, run.seed)?;
                if set.is_empty() {
                    return Err(Error::NonFinite("no validation sample could be predicted".into()));
                }
                Ok(-eval_mse(&set.per_sample_mse)?.mean)
            }
        }
    })
}
