//! Run configuration, stored as JSON.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{ArchKind, Architecture};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Vae,
    GppvaeJoint,
    GppvaeDis,
    Cvae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Vae, ModelKind::GppvaeJoint, ModelKind::GppvaeDis, ModelKind::Cvae];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::GppvaeJoint => "gppvae-joint",
            ModelKind::GppvaeDis => "gppvae-dis",
            ModelKind::Cvae => "cvae",
        }
    }

    pub fn has_gp(self) -> bool {
        matches!(self, ModelKind::GppvaeJoint | ModelKind::GppvaeDis)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = ModelKind::ALL.iter().map(|m| m.name()).collect();
            Error::Invalid(format!("unknown model '{s}'; expected one of {{{}}}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// Periodic squared-exponential kernel on the view angle.
    Periodic,
    /// Free Q×Q view covariance.
    FullRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Reconstruction over pixels plus `λ/L` times the prior and entropy terms.
    SiLambda,
    /// Negative ELBO with a learned observation variance.
    Eq8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaCriterion {
    /// Validation ELBO of a standard VAE.
    Elbo,
    /// Validation prediction error of the model being tuned.
    PredictionMse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// All settings of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub latent_dim: usize,
    pub object_dim: usize,
    pub kernel: KernelKind,
    pub period: f64,
    pub arch: ArchKind,
    /// Layer widths; the architecture default when absent.
    pub widths: Option<Vec<usize>>,
    pub precision: Precision,
    pub loss_mode: LossMode,
    /// Fixed trade-off weight. When absent, chosen from `lambda_grid`.
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub lambda_criterion: LambdaCriterion,
    /// Starting observation variance in `eq8` mode.
    pub sigma_y2: f64,
    /// Extra multiplier on the latent prior term.
    pub gp_weight: f64,
    /// Starting latent noise variance `α`.
    pub alpha_init: f64,
    pub vae_epochs: usize,
    pub gp_epochs: usize,
    pub joint_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr_vae: f64,
    pub lr_gp: f64,
    pub lr_joint: f64,
    pub seed: u64,
    /// Encoder samples averaged for GP predictions; 0 uses the means.
    pub predict_samples: usize,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::GppvaeJoint,
            latent_dim: 16,
            object_dim: 8,
            kernel: KernelKind::Periodic,
            period: std::f64::consts::PI,
            arch: ArchKind::Conv,
            widths: None,
            precision: Precision::F32,
            loss_mode: LossMode::SiLambda,
            lambda: None,
            lambda_grid: vec![3e-4, 1e-3, 3e-3, 1e-2],
            lambda_criterion: LambdaCriterion::Elbo,
            sigma_y2: 0.05,
            gp_weight: 1.0,
            alpha_init: 1.0,
            vae_epochs: 100,
            gp_epochs: 100,
            joint_epochs: 200,
            patience: 20,
            batch_size: 128,
            lr_vae: 1e-3,
            lr_gp: 1e-2,
            lr_joint: 1e-3,
            seed: 0,
            predict_samples: 0,
            dataset: None,
            out: None,
            init_from: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Network architecture for images of `size` pixels square.
    pub fn architecture(&self, size: usize) -> Architecture {
        let mut a = match self.arch {
            ArchKind::Conv => Architecture::conv(1, size, self.latent_dim),
            ArchKind::Mlp => Architecture::mlp(1, size, self.latent_dim),
        };
        if let Some(w) = &self.widths {
            a.widths = w.clone();
        }
        if self.model == ModelKind::Cvae {
            a = a.with_cond(2);
        }
        a
    }

    /// Checks values, and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.latent_dim == 0 || self.object_dim == 0 {
            return bad("latent_dim and object_dim must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("period", self.period),
            ("sigma_y2", self.sigma_y2),
            ("alpha_init", self.alpha_init),
            ("lr_vae", self.lr_vae),
            ("lr_gp", self.lr_gp),
            ("lr_joint", self.lr_joint),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.gp_weight >= 0.0 && self.gp_weight.is_finite()) {
            return bad(format!("gp_weight must be non-negative, got {}", self.gp_weight));
        }
        match self.lambda {
            Some(l) if !(l > 0.0 && l.is_finite()) => return bad(format!("lambda must be positive, got {l}")),
            None if self.lambda_grid.is_empty() => return bad("lambda_grid is empty and no lambda is set".into()),
            _ => {}
        }
        if let Some(v) = self.lambda_grid.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return bad(format!("lambda_grid values must be positive, got {v}"));
        }
        if let Some(w) = &self.widths {
            if w.contains(&0) {
                return bad("layer widths must be non-zero".into());
            }
        }
        for (name, p) in [("dataset", &self.dataset), ("init_from", &self.init_from)] {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(format!("{name} path {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_roundtrip() {
        let c = RunConfig::default();
        assert_eq!((c.latent_dim, c.object_dim), (16, 8));
        assert_eq!((c.lr_vae, c.lr_gp, c.lr_joint), (1e-3, 1e-2, 1e-3));
        assert_eq!(c.gp_epochs, 100);
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"model": "cvae", "lambda": 0.5, "kernel": "full-rank"}"#).unwrap();
        assert_eq!(c.model, ModelKind::Cvae);
        assert_eq!(c.kernel, KernelKind::FullRank);
        assert_eq!(c.lambda, Some(0.5));
        assert_eq!(c.latent_dim, 16);
        assert_eq!(c.architecture(28).cond_dim, 2);
        assert!(RunConfig::from_json(r#"{"modle": "vae"}"#).is_err());
    }

    #[test]
    fn model_names() {
        for m in ModelKind::ALL {
            assert_eq!(m.name().parse::<ModelKind>().unwrap(), m);
        }
        let err = "gp".parse::<ModelKind>().unwrap_err().to_string();
        assert!(err.contains("vae, gppvae-joint, gppvae-dis, cvae"));
    }

    #[test]
    fn validation_failures() {
        let ok = RunConfig::default();
        assert!(RunConfig { latent_dim: 0, ..ok.clone() }.validate().is_err());
        assert!(RunConfig { lambda: Some(0.0), ..ok.clone() }.validate().is_err());
        assert!(RunConfig {
            lambda_grid: vec![],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            dataset: Some("/definitely/not/here".into()),
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(RunConfig { lr_gp: -1.0, ..ok }.validate().is_err());
    }
}
