//! Training checkpoints: a directory of `.gpt` tensors plus `meta.json`.
//!
//! Network tensors are stored in the training precision; GP parameters and
//! Adam moments in 64-bit. Saving writes to a sibling temporary directory and
//! swaps it in, so an interrupted save leaves the previous checkpoint intact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{KernelKind, RunConfig};
use crate::error::{Error, Result};
use crate::kernels::{FullRankViewCov, GpParams, ObjectFeatures, PeriodicSEKernel, ViewKernel};
use crate::ndtensor::{io, Tensor};
use crate::nnet::{Architecture, Decoder, Encoder, ParamSet};
use crate::scalar::{DType, Scalar};
use crate::training::{AdamState, EarlyStop, Model, PhasePlan, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpMeta {
    pub kernel: KernelKind,
    /// Kernel period (periodic kernel only).
    pub period: Option<f64>,
    pub alpha_raw: f64,
    pub num_objects: usize,
    pub object_dim: usize,
    pub angles: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub log_sigma_y2: f64,
    pub gp: Option<GpMeta>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cursor {
    pub phase_index: usize,
    pub epoch: usize,
    pub global_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyMeta {
    pub best_mse: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
    pub stopped: bool,
    pub best: Option<ModelMeta>,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: u32,
    pub config: RunConfig,
    pub arch: Architecture,
    pub dtype: String,
    pub model: ModelMeta,
    pub cursor: Cursor,
    pub plan: Vec<PhasePlan>,
    pub lambda: f64,
    pub sigma_y2: f64,
    pub adam: AdamMeta,
    pub early: EarlyMeta,
    /// Every tensor file in the directory, sorted.
    pub tensors: Vec<String>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn file_name(name: &str) -> String {
    format!("{name}.gpt")
}

/// Collects named tensors before writing.
struct Writer<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl Writer<'_> {
    fn put<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        io::write(self.dir.join(file_name(name)), t)?;
        self.names.push(name.to_string());
        Ok(())
    }

    fn model<T: Scalar>(&mut self, prefix: &str, m: &Model<T>) -> Result<ModelMeta> {
        for (n, t) in m.encoder.params.names.iter().zip(&m.encoder.params.tensors) {
            self.put(&format!("{prefix}{n}"), t)?;
        }
        for (n, t) in m.decoder.params.names.iter().zip(&m.decoder.params.tensors) {
            self.put(&format!("{prefix}{n}"), t)?;
        }
        let gp = match &m.gp {
            Some(gp) => {
                self.put(&format!("{prefix}gp.x"), &gp.x.x)?;
                self.put(&format!("{prefix}gp.view"), &gp.view.raw_params())?;
                let (kernel, period) = match &gp.view {
                    ViewKernel::Periodic(k) => (KernelKind::Periodic, Some(k.period)),
                    ViewKernel::FullRank(_) => (KernelKind::FullRank, None),
                };
                Some(GpMeta {
                    kernel,
                    period,
                    alpha_raw: gp.alpha_raw,
                    num_objects: gp.x.count(),
                    object_dim: gp.x.dim(),
                    angles: gp.angles.clone(),
                })
            }
            None => None,
        };
        Ok(ModelMeta {
            log_sigma_y2: m.log_sigma_y2,
            gp,
        })
    }
}

/// Writes `state` (trained under `config`) to `dir`, replacing any previous
/// checkpoint there only once the new one is complete.
pub fn save<T: Scalar>(dir: impl AsRef<Path>, config: &RunConfig, state: &TrainState<T>) -> Result<()> {
    let dir = dir.as_ref();
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = Writer { dir: &tmp, names: Vec::new() };
    let model = w.model("", &state.model)?;
    let best = match &state.early.best {
        Some(b) => Some(w.model("best.", b)?),
        None => None,
    };
    for (name, (m, v)) in &state.adam.moments {
        w.put(&format!("adam.{name}.m"), &Tensor::new(&[m.len()], m.clone())?)?;
        w.put(&format!("adam.{name}.v"), &Tensor::new(&[v.len()], v.clone())?)?;
    }
    let mut tensors = w.names;
    tensors.sort();
    let a = &state.adam;
    let meta = Meta {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        arch: state.model.arch().clone(),
        dtype: dtype_name(T::DTYPE).into(),
        model,
        cursor: Cursor {
            phase_index: state.phase_index,
            epoch: state.epoch,
            global_epoch: state.global_epoch,
        },
        plan: state.plan.clone(),
        lambda: state.lambda,
        sigma_y2: state.sigma_y2,
        adam: AdamMeta {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
            names: a.moments.keys().cloned().collect(),
        },
        early: EarlyMeta {
            best_mse: state.early.best_mse.is_finite().then_some(state.early.best_mse),
            best_epoch: state.early.best_epoch,
            since_best: state.early.since_best,
            stopped: state.early.stopped,
            best,
        },
        tensors,
    };
    let meta_path = tmp.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    let old = sibling(dir, "old");
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

pub fn read_meta(dir: impl AsRef<Path>) -> Result<Meta> {
    let path = dir.as_ref().join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    Ok(meta)
}

struct Reader<'a> {
    dir: &'a Path,
    meta: &'a Meta,
}

impl Reader<'_> {
    fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        if self.meta.tensors.binary_search_by(|n| n.as_str().cmp(name)).is_err() {
            return Err(Error::Incompatible(format!("checkpoint has no tensor '{name}'")));
        }
        io::read(self.dir.join(file_name(name)))
    }

    fn params<T: Scalar>(&self, prefix: &str, template: &ParamSet<T>) -> Result<ParamSet<T>> {
        let mut tensors = Vec::with_capacity(template.tensors.len());
        for (n, t) in template.names.iter().zip(&template.tensors) {
            let got: Tensor<T> = self.get(&format!("{prefix}{n}"))?;
            if got.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor '{n}' has shape {:?}, architecture expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            tensors.push(got);
        }
        Ok(ParamSet {
            names: template.names.clone(),
            tensors,
        })
    }

    fn model<T: Scalar>(&self, prefix: &str, m: &ModelMeta) -> Result<Model<T>> {
        let arch = self.meta.arch.clone();
        let enc = Encoder::<T>::zeros(arch.clone())?;
        let dec = Decoder::<T>::zeros(arch.clone())?;
        let encoder = Encoder {
            params: self.params(prefix, &enc.params)?,
            arch: arch.clone(),
        };
        let decoder = Decoder {
            params: self.params(prefix, &dec.params)?,
            arch,
        };
        let gp = match &m.gp {
            Some(g) => {
                let x: Tensor<f64> = self.get(&format!("{prefix}gp.x"))?;
                if x.shape() != [g.num_objects, g.object_dim] {
                    return Err(Error::Incompatible(format!("object features have shape {:?}", x.shape())));
                }
                let raw: Tensor<f64> = self.get(&format!("{prefix}gp.view"))?;
                let mut view = match g.kernel {
                    KernelKind::Periodic => ViewKernel::Periodic(PeriodicSEKernel::with_period(
                        g.period.ok_or_else(|| Error::Incompatible("periodic kernel without a period".into()))?,
                    )),
                    KernelKind::FullRank => ViewKernel::FullRank(FullRankViewCov::identity(g.angles.len())),
                };
                view.set_raw_params(&raw).map_err(|e| Error::Incompatible(e.to_string()))?;
                Some(GpParams {
                    x: ObjectFeatures { x },
                    view,
                    alpha_raw: g.alpha_raw,
                    angles: g.angles.clone(),
                })
            }
            None => None,
        };
        Ok(Model {
            encoder,
            decoder,
            gp,
            log_sigma_y2: m.log_sigma_y2,
        })
    }
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: Meta,
    pub state: TrainState<T>,
}

/// Loads a checkpoint, converting network tensors to `T`.
pub fn load<T: Scalar>(dir: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let r = Reader { dir, meta: &meta };
    let model = r.model("", &meta.model)?;
    let best = match &meta.early.best {
        Some(b) => Some(r.model("best.", b)?),
        None => None,
    };
    let a = &meta.adam;
    let mut adam = AdamState::new(a.lr);
    adam.beta1 = a.beta1;
    adam.beta2 = a.beta2;
    adam.eps = a.eps;
    adam.t = a.t;
    for name in &a.names {
        let m: Tensor<f64> = r.get(&format!("adam.{name}.m"))?;
        let v: Tensor<f64> = r.get(&format!("adam.{name}.v"))?;
        adam.moments.insert(name.clone(), (m.data().to_vec(), v.data().to_vec()));
    }
    let state = TrainState {
        model,
        adam,
        plan: meta.plan.clone(),
        phase_index: meta.cursor.phase_index,
        epoch: meta.cursor.epoch,
        global_epoch: meta.cursor.global_epoch,
        lambda: meta.lambda,
        sigma_y2: meta.sigma_y2,
        early: EarlyStop {
            best_mse: meta.early.best_mse.unwrap_or(f64::INFINITY),
            best_epoch: meta.early.best_epoch,
            since_best: meta.early.since_best,
            stopped: meta.early.stopped,
            best,
        },
    };
    Ok(Checkpoint { meta, state })
}
