//! Loss assembly, Adam, the phase schedules, and the validation-based choice
//! of the observation variance and trade-off weight.

mod adam;
mod eval;
mod run;

pub use adam::AdamState;
pub use eval::{
    decode_all,
    encode_means, estimate_sigma_y, gp_predict_images, prediction_mse, select_lambda, vae_validation_elbo,
    LambdaResult, LambdaSelection,
};
pub use run::{schedule, train, EarlyStop, EpochRecord, Phase, PhasePlan, TrainData, TrainState};

use std::f64::consts::PI;

use rand::Rng;

use crate::config::{KernelKind, LossMode, RunConfig};
use crate::error::Result;
use crate::kernels::{FullRankViewCov, GpParams, ObjectFeatures, PeriodicSEKernel, ViewKernel};
use crate::nnet::{Architecture, Decoder, Encoder, ParamSet};
use crate::rng::{stream, stream_rng};
use crate::scalar::Scalar;
use crate::taylor_grad::{StepTerms, TermWeights};

/// Encoder, decoder, the GP prior parameters (GP models only) and the log
/// observation variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub gp: Option<GpParams>,
    pub log_sigma_y2: f64,
}

fn cast_params<T: Scalar, U: Scalar>(p: &ParamSet<T>) -> ParamSet<U> {
    ParamSet {
        names: p.names.clone(),
        tensors: p.tensors.iter().map(|t| t.cast()).collect(),
    }
}

/// Fresh GP parameters: `X` with `N(0, 1/M)` entries, default kernel settings.
pub fn init_gp(cfg: &RunConfig, num_objects: usize, angles: &[f64]) -> GpParams {
    let mut rng = stream_rng(cfg.seed, &[stream::INIT, 2]);
    let view = match cfg.kernel {
        KernelKind::Periodic => ViewKernel::Periodic(PeriodicSEKernel::with_period(cfg.period)),
        KernelKind::FullRank => ViewKernel::FullRank(FullRankViewCov::identity(angles.len())),
    };
    GpParams {
        x: ObjectFeatures::random(num_objects, cfg.object_dim, &mut rng),
        view,
        alpha_raw: cfg.alpha_init.ln(),
        angles: angles.to_vec(),
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &RunConfig, arch: Architecture, num_objects: usize, angles: &[f64]) -> Result<Self> {
        arch.validate()?;
        let encoder = Encoder::new(arch.clone(), &mut stream_rng(cfg.seed, &[stream::INIT, 0]))?;
        let decoder = Decoder::new(arch, &mut stream_rng(cfg.seed, &[stream::INIT, 1]))?;
        let gp = cfg.model.has_gp().then(|| init_gp(cfg, num_objects, angles));
        Ok(Model {
            encoder,
            decoder,
            gp,
            log_sigma_y2: cfg.sigma_y2.ln(),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.encoder.arch
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            encoder: Encoder {
                arch: self.encoder.arch.clone(),
                params: cast_params(&self.encoder.params),
            },
            decoder: Decoder {
                arch: self.decoder.arch.clone(),
                params: cast_params(&self.decoder.params),
            },
            gp: self.gp.clone(),
            log_sigma_y2: self.log_sigma_y2,
        }
    }
}

/// Term multipliers for a loss mode.
pub fn term_weights(mode: LossMode, lambda: f64, latent_dim: usize, pixels: usize, sigma_y2: f64, gp_weight: f64) -> TermWeights {
    match mode {
        LossMode::SiLambda => {
            let w = lambda / latent_dim as f64;
            TermWeights {
                recon: 1.0 / pixels as f64,
                gp: w * gp_weight,
                reg: w,
            }
        }
        LossMode::Eq8 => TermWeights {
            recon: 0.5 / sigma_y2,
            gp: gp_weight,
            reg: 1.0,
        },
    }
}

/// One evaluation of the loss split into its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Weighted reconstruction term, including `(NK/2)·log σ_y²` in `eq8` mode.
    pub recon: f64,
    /// Negative latent log-prior.
    pub gp_term: f64,
    /// `−½Σ log σ²` over samples and latent dimensions.
    pub reg_term: f64,
    pub total: f64,
    pub sigma_y2: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Assembles the terms for `samples` images of `pixels` pixels.
    pub fn assemble(terms: &StepTerms, w: &TermWeights, mode: LossMode, samples: usize, pixels: usize, sigma_y2: f64, lambda: f64) -> Self {
        let recon = match mode {
            LossMode::SiLambda => w.recon * terms.sq_err,
            LossMode::Eq8 => 0.5 * (samples * pixels) as f64 * sigma_y2.ln() + w.recon * terms.sq_err,
        };
        LossBreakdown {
            recon,
            gp_term: terms.prior_nll,
            reg_term: terms.reg,
            total: recon + w.gp * terms.prior_nll + w.reg * terms.reg,
            sigma_y2,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.recon.is_finite() && self.gp_term.is_finite() && self.reg_term.is_finite() && self.total.is_finite()
    }
}

/// `−log N(Z | 0, I)` for `n·l` latent values with `½‖Z‖² = half_sq`.
pub(crate) fn std_normal_nll(half_sq: f64, count: usize) -> f64 {
    half_sq + 0.5 * count as f64 * (2.0 * PI).ln()
}

pub(crate) fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests;
