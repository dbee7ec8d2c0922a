use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{LossMode, ModelKind, RunConfig};
use crate::datagen::{Dataset, Split, Subset};
use crate::error::{Error, Result};
use crate::ndtensor::Tensor;
use crate::nnet::ParamSet;
use crate::rng::{normal_tensor, stream, stream_rng};
use crate::scalar::Scalar;
use crate::taylor_grad::{full_gradient_step, net_batch_pass, LatentPrior, StepConfig, StepTerms, Trainable};

use super::eval::{estimate_sigma_y, gp_predict_images, prediction_mse};
use super::{shuffled, std_normal_nll, term_weights, AdamState, LossBreakdown, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Encoder and decoder under a standard-normal prior, in minibatches.
    Vae,
    /// GP parameters only, networks frozen, one full-batch step per epoch.
    Gp,
    /// Everything, one full-batch step per epoch, early stopping.
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Vae => "vae",
            Phase::Gp => "gp",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase: Phase,
    pub epochs: usize,
    pub lr: f64,
}

/// Phases for a model kind. `pretrained` drops the VAE phase of GP models.
pub fn schedule(cfg: &RunConfig, pretrained: bool) -> Vec<PhasePlan> {
    let vae = PhasePlan {
        phase: Phase::Vae,
        epochs: cfg.vae_epochs,
        lr: cfg.lr_vae,
    };
    let gp = PhasePlan {
        phase: Phase::Gp,
        epochs: cfg.gp_epochs,
        lr: cfg.lr_gp,
    };
    let joint = PhasePlan {
        phase: Phase::Joint,
        epochs: cfg.joint_epochs,
        lr: cfg.lr_joint,
    };
    let mut plan = match cfg.model {
        ModelKind::Vae | ModelKind::Cvae => vec![vae],
        ModelKind::GppvaeDis => vec![vae, gp],
        ModelKind::GppvaeJoint => vec![vae, gp, joint],
    };
    if pretrained && cfg.model.has_gp() {
        plan.remove(0);
    }
    plan
}

/// Training and validation samples plus the dataset-wide sizes the GP needs.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub train: Subset<T>,
    pub val: Subset<T>,
    pub num_objects: usize,
    pub angles: Vec<f64>,
}

impl<T: Scalar> TrainData<T> {
    /// Training and validation subsets of a split dataset.
    pub fn from_split(ds: &Dataset, split: &Split, with_cond: bool) -> Result<Self> {
        Ok(TrainData {
            train: ds.subset(&split.train, with_cond)?,
            val: ds.subset(&split.val, with_cond)?,
            num_objects: ds.num_objects,
            angles: ds.angles.clone(),
        })
    }

    fn pixels(&self) -> usize {
        self.train.images.row_len()
    }
}

/// Early-stopping bookkeeping for the joint phase.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop<T> {
    pub best_mse: f64,
    pub best_epoch: usize,
    pub since_best: usize,
    pub stopped: bool,
    pub best: Option<Model<T>>,
}

impl<T> Default for EarlyStop<T> {
    fn default() -> Self {
        EarlyStop {
            best_mse: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            stopped: false,
            best: None,
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub adam: AdamState,
    pub plan: Vec<PhasePlan>,
    pub phase_index: usize,
    /// Completed epochs in the current phase.
    pub epoch: usize,
    /// Completed epochs over all phases.
    pub global_epoch: usize,
    pub lambda: f64,
    pub sigma_y2: f64,
    pub early: EarlyStop<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, plan: Vec<PhasePlan>, lambda: f64) -> Self {
        let lr = plan.first().map_or(1e-3, |p| p.lr);
        let sigma_y2 = model.log_sigma_y2.exp();
        TrainState {
            model,
            adam: AdamState::new(lr),
            plan,
            phase_index: 0,
            epoch: 0,
            global_epoch: 0,
            lambda,
            sigma_y2,
            early: EarlyStop::default(),
        }
    }

    pub fn done(&self) -> bool {
        self.phase_index >= self.plan.len()
    }

    pub fn current(&self) -> Option<PhasePlan> {
        self.plan.get(self.phase_index).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch counter over the whole run.
    pub epoch: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
    pub wall_ms: u64,
    pub val_mse: Option<f64>,
}

fn update_params<T: Scalar>(adam: &mut AdamState, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
    for ((name, p), g) in params.names.iter().zip(params.tensors.iter_mut()).zip(grads) {
        adam.update(name, p.data_mut(), g.data())?;
    }
    Ok(())
}

fn sigma_for_weights<T>(cfg: &RunConfig, model: &Model<T>) -> f64 {
    match cfg.loss_mode {
        LossMode::Eq8 => model.log_sigma_y2.exp(),
        LossMode::SiLambda => cfg.sigma_y2,
    }
}

fn validation_gp_mse<T: Scalar>(model: &Model<T>, data: &TrainData<T>) -> Result<f64> {
    let queries: Vec<(usize, usize)> = data.val.objects.iter().copied().zip(data.val.views.iter().copied()).collect();
    let pred = gp_predict_images(model, &data.train, &queries, 0, 0)?;
    let per = prediction_mse(&pred, &data.val.images)?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Runs the remaining phases of `state`, calling `on_epoch` after every
/// completed epoch (for logging and checkpointing).
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    data: &TrainData<T>,
    state: &mut TrainState<T>,
    mut on_epoch: impl FnMut(&TrainState<T>, &EpochRecord) -> Result<()>,
) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    while let Some(plan) = state.current() {
        if state.epoch == 0 {
            state.adam = AdamState::new(plan.lr);
            if plan.phase == Phase::Joint {
                let mse = validation_gp_mse(&state.model, data)?;
                state.early = EarlyStop {
                    best_mse: mse,
                    best: Some(state.model.clone()),
                    ..EarlyStop::default()
                };
            }
        }
        if state.epoch >= plan.epochs || (plan.phase == Phase::Joint && state.early.stopped) {
            if plan.phase == Phase::Joint {
                if let Some(best) = state.early.best.take() {
                    state.model = best;
                }
            }
            state.phase_index += 1;
            state.epoch = 0;
            continue;
        }
        let start = Instant::now();
        let (loss, val_mse) = match plan.phase {
            Phase::Vae => (vae_epoch(cfg, data, state)?, None),
            Phase::Gp | Phase::Joint => gp_epoch(cfg, data, state, plan.phase)?,
        };
        state.epoch += 1;
        state.global_epoch += 1;
        let record = EpochRecord {
            epoch: state.global_epoch,
            phase: plan.phase,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
            val_mse,
        };
        on_epoch(state, &record)?;
    }
    Ok(())
}

fn vae_epoch<T: Scalar>(cfg: &RunConfig, data: &TrainData<T>, state: &mut TrainState<T>) -> Result<LossBreakdown> {
    let n = data.train.len();
    let l = state.model.arch().latent_dim;
    let k = data.pixels();
    let coords = [state.phase_index as u64, state.epoch as u64];
    let order = shuffled(n, &mut stream_rng(cfg.seed, &[stream::SHUFFLE, coords[0], coords[1]]));
    let mut eps_rng = stream_rng(cfg.seed, &[stream::EPS, coords[0], coords[1]]);
    let mut terms = StepTerms::default();
    let mut half_sq = 0.0;
    let sigma_start = sigma_for_weights(cfg, &state.model);
    for chunk in order.chunks(cfg.batch_size) {
        let sigma_y2 = sigma_for_weights(cfg, &state.model);
        let w = term_weights(cfg.loss_mode, state.lambda, l, k, sigma_y2, 1.0);
        let imgs = data.train.images.gather_rows(chunk)?;
        let cond = data.train.cond.as_ref().map(|c| c.gather_rows(chunk)).transpose()?;
        let eps: Tensor<T> = normal_tensor(&mut eps_rng, &[chunk.len(), l]);
        let pass = net_batch_pass(
            &state.model.encoder,
            &state.model.decoder,
            imgs,
            cond.as_ref(),
            &eps,
            &w,
            LatentPrior::StandardNormal,
            true,
        )?;
        if !(pass.sq_err.is_finite() && pass.reg.is_finite() && pass.prior.is_finite())
            || !pass.encoder.iter().chain(&pass.decoder).all(|t| t.all_finite())
        {
            return Err(Error::NonFinite(format!(
                "VAE loss or gradient at epoch {}",
                state.global_epoch + 1
            )));
        }
        state.adam.tick();
        update_params(&mut state.adam, &mut state.model.encoder.params, &pass.encoder)?;
        update_params(&mut state.adam, &mut state.model.decoder.params, &pass.decoder)?;
        if cfg.loss_mode == LossMode::Eq8 {
            let g = 0.5 * (chunk.len() * k) as f64 - 0.5 * pass.sq_err / sigma_y2;
            state.adam.update_scalar("sigma_y2_raw", &mut state.model.log_sigma_y2, g)?;
        }
        terms.sq_err += pass.sq_err;
        terms.reg += pass.reg;
        half_sq += pass.prior;
    }
    terms.prior_nll = std_normal_nll(half_sq, n * l);
    let w = term_weights(cfg.loss_mode, state.lambda, l, k, sigma_start, 1.0);
    state.sigma_y2 = match cfg.loss_mode {
        LossMode::Eq8 => state.model.log_sigma_y2.exp(),
        LossMode::SiLambda if !data.val.is_empty() => {
            estimate_sigma_y(&state.model.encoder, &state.model.decoder, &data.val)?
        }
        LossMode::SiLambda => state.sigma_y2,
    };
    let loss = LossBreakdown::assemble(&terms, &w, cfg.loss_mode, n, k, state.sigma_y2, state.lambda);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("VAE loss {loss:?}")));
    }
    Ok(loss)
}

fn gp_epoch<T: Scalar>(
    cfg: &RunConfig,
    data: &TrainData<T>,
    state: &mut TrainState<T>,
    phase: Phase,
) -> Result<(LossBreakdown, Option<f64>)> {
    let n = data.train.len();
    let l = state.model.arch().latent_dim;
    let k = data.pixels();
    let sigma_y2 = sigma_for_weights(cfg, &state.model);
    let w = term_weights(cfg.loss_mode, state.lambda, l, k, sigma_y2, cfg.gp_weight);
    let trainable = if phase == Phase::Gp {
        Trainable::GP_ONLY
    } else {
        Trainable::ALL
    };
    let step_cfg = StepConfig {
        batch_size: cfg.batch_size,
        weights: w,
        trainable,
    };
    // With the networks frozen the noise is drawn once per phase, so the
    // GP-only objective is a fixed function of the GP parameters.
    let draw = if phase == Phase::Gp { 0 } else { state.epoch as u64 };
    let mut rng = stream_rng(cfg.seed, &[stream::EPS, state.phase_index as u64, draw]);
    let model = &mut state.model;
    let gp = model
        .gp
        .as_mut()
        .ok_or_else(|| Error::Invalid("GP phase on a model without a GP prior".into()))?;
    let out = full_gradient_step(&model.encoder, &model.decoder, gp, data.train.samples(), &step_cfg, &mut rng)?;
    let mut loss = LossBreakdown::assemble(&out.terms, &w, cfg.loss_mode, n, k, sigma_y2, state.lambda);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{} loss {loss:?}", phase.name())));
    }
    let adam = &mut state.adam;
    adam.tick();
    adam.update("gp.x", gp.x.x.data_mut(), out.grads.gp.x.data())?;
    let mut raw = gp.view.raw_params();
    adam.update("gp.view", raw.data_mut(), out.grads.gp.view_raw.data())?;
    gp.view.set_raw_params(&raw)?;
    adam.update_scalar("gp.alpha_raw", &mut gp.alpha_raw, out.grads.gp.alpha_raw)?;
    let mut val_mse = None;
    if phase == Phase::Joint {
        update_params(adam, &mut model.encoder.params, &out.grads.encoder)?;
        update_params(adam, &mut model.decoder.params, &out.grads.decoder)?;
        if cfg.loss_mode == LossMode::Eq8 {
            let g = 0.5 * (n * k) as f64 - 0.5 * out.terms.sq_err / sigma_y2;
            adam.update_scalar("sigma_y2_raw", &mut model.log_sigma_y2, g)?;
        }
        let mse = validation_gp_mse(model, data)?;
        let es = &mut state.early;
        if mse < es.best_mse {
            es.best_mse = mse;
            es.best_epoch = state.epoch + 1;
            es.since_best = 0;
            es.best = Some(state.model.clone());
        } else {
            es.since_best += 1;
            if es.since_best >= cfg.patience {
                es.stopped = true;
            }
        }
        val_mse = Some(mse);
        state.sigma_y2 = match cfg.loss_mode {
            LossMode::Eq8 => state.model.log_sigma_y2.exp(),
            LossMode::SiLambda if !data.val.is_empty() => {
                estimate_sigma_y(&state.model.encoder, &state.model.decoder, &data.val)?
            }
            LossMode::SiLambda => state.sigma_y2,
        };
    }
    if cfg.loss_mode == LossMode::SiLambda {
        loss.sigma_y2 = state.sigma_y2;
    }
    Ok((loss, val_mse))
}
