//! Synthetic rotated-glyph datasets, the train/validation/test split, and the
//! on-disk dataset directory.
//!
//! Each object is a procedurally drawn glyph: a wobbly closed loop plus an
//! open tail stroke, both rendered with a Gaussian brush. View `q` is the
//! base image rotated counter-clockwise by `2πq/Q` with bilinear sampling.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{io, Tensor};
use crate::rng::{stream, stream_rng};
use crate::scalar::Scalar;
use crate::taylor_grad::Samples;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Shape parameters of one glyph, in units of a 28-pixel canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphShape {
    pub center: (f64, f64),
    pub radius: f64,
    /// `(amplitude, phase)` of radial harmonics 1, 2, 3.
    pub harmonics: [(f64, f64); 3],
    pub tail_start: f64,
    pub tail_heading: f64,
    pub tail_length: f64,
    pub tail_bend: f64,
    pub brush: f64,
}

impl GlyphShape {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut harmonics = [(0.0, 0.0); 3];
        for (k, h) in harmonics.iter_mut().enumerate() {
            *h = (rng.gen_range(-0.28..0.28) / (k + 1) as f64, rng.gen_range(0.0..2.0 * PI));
        }
        GlyphShape {
            center: (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)),
            radius: rng.gen_range(3.5..5.5),
            harmonics,
            tail_start: rng.gen_range(0.0..2.0 * PI),
            tail_heading: rng.gen_range(-1.2..1.2),
            tail_length: rng.gen_range(3.0..6.5),
            tail_bend: rng.gen_range(-1.5..1.5),
            brush: rng.gen_range(0.8..1.2),
        }
    }

    fn loop_radius(&self, t: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, (a, ph))| a * ((k + 1) as f64 * t + ph).cos())
            .sum();
        self.radius * (1.0 + wobble)
    }

    /// Stroke polylines in math coordinates (y up), rotated by `angle`.
    pub fn strokes(&self, angle: f64) -> Vec<Vec<(f64, f64)>> {
        let (c, s) = (angle.cos(), angle.sin());
        let rot = |(x, y): (f64, f64)| (c * x - s * y, s * x + c * y);
        let (cx, cy) = self.center;
        let loop_pts: Vec<(f64, f64)> = (0..=120)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / 120.0;
                let r = self.loop_radius(t);
                rot((cx + r * t.cos(), cy + r * t.sin()))
            })
            .collect();
        let t0 = self.tail_start;
        let r0 = self.loop_radius(t0);
        let mut p = (cx + r0 * t0.cos(), cy + r0 * t0.sin());
        let mut heading = t0 + self.tail_heading;
        let steps = 30;
        let ds = self.tail_length / steps as f64;
        let mut tail = vec![rot(p)];
        for _ in 0..steps {
            heading += self.tail_bend / steps as f64;
            p = (p.0 + ds * heading.cos(), p.1 + ds * heading.sin());
            let norm = (p.0 * p.0 + p.1 * p.1).sqrt();
            if norm > 10.5 {
                p = (p.0 * 10.5 / norm, p.1 * 10.5 / norm);
            }
            tail.push(rot(p));
        }
        vec![loop_pts, tail]
    }

    /// Renders the glyph rotated by `angle` directly from its geometry.
    pub fn render(&self, size: usize, angle: f64) -> Vec<f64> {
        let scale = size as f64 / 28.0;
        let c = (size as f64 - 1.0) / 2.0;
        let strokes = self.strokes(angle);
        let w2 = 2.0 * (self.brush * scale).powi(2);
        let mut img = vec![0.0; size * size];
        for (idx, px) in img.iter_mut().enumerate() {
            let (row, col) = (idx / size, idx % size);
            let x = (col as f64 - c) / scale;
            let y = (c - row as f64) / scale;
            let d2 = strokes
                .iter()
                .flat_map(|s| s.windows(2))
                .map(|seg| seg_dist2((x, y), seg[0], seg[1]))
                .fold(f64::INFINITY, f64::min);
            *px = (-d2 * scale * scale / w2).exp();
        }
        img
    }
}

fn seg_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Rotates a square image counter-clockwise by `angle` about its centre with
/// bilinear interpolation; samples falling outside the image read as zero.
pub fn rotate_bilinear(img: &[f64], size: usize, angle: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let (cs, sn) = (angle.cos(), angle.sin());
    let get = |r: isize, q: isize| -> f64 {
        if r < 0 || q < 0 || r >= size as isize || q >= size as isize {
            0.0
        } else {
            img[r as usize * size + q as usize]
        }
    };
    let mut out = vec![0.0; size * size];
    for (idx, px) in out.iter_mut().enumerate() {
        let x = (idx % size) as f64 - c;
        let y = c - (idx / size) as f64;
        let xs = cs * x + sn * y;
        let ys = -sn * x + cs * y;
        let col = c + xs;
        let row = c - ys;
        let (r0, c0) = (row.floor(), col.floor());
        let (fr, fc) = (row - r0, col - c0);
        let (r0, c0) = (r0 as isize, c0 as isize);
        *px = (1.0 - fr) * ((1.0 - fc) * get(r0, c0) + fc * get(r0, c0 + 1))
            + fr * ((1.0 - fc) * get(r0 + 1, c0) + fc * get(r0 + 1, c0 + 1));
    }
    out
}

/// Images with object and view assignments. Images are `[N, 1, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub object_ids: Vec<usize>,
    pub view_ids: Vec<usize>,
    /// View inputs: rotation angle in radians per view.
    pub angles: Vec<f64>,
    pub num_objects: usize,
    pub size: usize,
    pub seed: u64,
}

/// `P` glyphs at `Q` evenly spaced rotations; sample `n = p·Q + q`.
pub fn generate_glyphs(objects: usize, views: usize, size: usize, seed: u64) -> Result<Dataset> {
    if objects == 0 || views < 2 || size < 16 {
        return Err(Error::Invalid(format!(
            "need at least 1 object, 2 views and 16-pixel images (got {objects}, {views}, {size})"
        )));
    }
    let angles: Vec<f64> = (0..views).map(|q| 2.0 * PI * q as f64 / views as f64).collect();
    let per_object: Vec<Vec<f32>> = (0..objects)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(seed, &[stream::GLYPH, p as u64]);
            let base = GlyphShape::random(&mut rng).render(size, 0.0);
            let mut out = Vec::with_capacity(views * size * size);
            for &a in &angles {
                let img = if a == 0.0 {
                    base.clone()
                } else {
                    rotate_bilinear(&base, size, a)
                };
                out.extend(img.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
            }
            out
        })
        .collect();
    let n = objects * views;
    let images = Tensor::new(&[n, 1, size, size], per_object.concat())?;
    Ok(Dataset {
        images,
        object_ids: (0..n).map(|i| i / views).collect(),
        view_ids: (0..n).map(|i| i % views).collect(),
        angles,
        num_objects: objects,
        size,
        seed,
    })
}

/// Split parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub drop_fraction: f64,
    pub held_out_view: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            val_fraction: 0.1,
            drop_fraction: 0.25,
            held_out_view: 0,
            seed: 0,
        }
    }
}

/// Disjoint sample index sets, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Moves a fraction of samples to validation, drops a fraction of the rest,
/// and sends the held-out view to test. Both draws are made within each view
/// so every view keeps the same number of samples. The drop is redrawn (up to
/// 100 times) until every test object keeps at least one training image.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let q = ds.angles.len();
    for (name, f) in [("validation", spec.val_fraction), ("drop", spec.drop_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Invalid(format!("{name} fraction must lie in [0, 1), got {f}")));
        }
    }
    if spec.held_out_view >= q {
        return Err(Error::Index {
            what: "views",
            index: spec.held_out_view,
            size: q,
        });
    }
    let mut by_view: Vec<Vec<usize>> = vec![Vec::new(); q];
    for (i, &v) in ds.view_ids.iter().enumerate() {
        by_view[v].push(i);
    }
    let mut val = Vec::new();
    let mut remaining: Vec<Vec<usize>> = Vec::with_capacity(q);
    for (v, idx) in by_view.iter().enumerate() {
        let mut idx = idx.clone();
        idx.shuffle(&mut stream_rng(spec.seed, &[stream::SPLIT, 0, v as u64]));
        let k = (spec.val_fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..k]);
        remaining.push(idx[k..].to_vec());
    }
    for attempt in 0..100u64 {
        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for (v, idx) in remaining.iter().enumerate() {
            let mut idx = idx.clone();
            idx.shuffle(&mut stream_rng(spec.seed, &[stream::SPLIT, 1 + attempt, v as u64]));
            let k = (spec.drop_fraction * idx.len() as f64).round() as usize;
            dropped.extend_from_slice(&idx[..k]);
            keep.extend_from_slice(&idx[k..]);
        }
        let (mut test, mut train): (Vec<usize>, Vec<usize>) =
            keep.into_iter().partition(|&i| ds.view_ids[i] == spec.held_out_view);
        if test.is_empty() {
            return Err(Error::Invalid(format!(
                "held-out view {} has no samples left after the split",
                spec.held_out_view
            )));
        }
        let mut seen = vec![false; ds.num_objects];
        for &i in &train {
            seen[ds.object_ids[i]] = true;
        }
        if test.iter().all(|&i| seen[ds.object_ids[i]]) {
            train.sort_unstable();
            test.sort_unstable();
            val.sort_unstable();
            dropped.sort_unstable();
            return Ok(Split {
                train,
                val,
                test,
                dropped,
            });
        }
    }
    Err(Error::Invalid(
        "could not keep a training view for every test object in 100 attempts".into(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_samples: usize,
    pub num_objects: usize,
    pub num_views: usize,
    pub image_size: usize,
    pub channels: usize,
    pub angles: Vec<f64>,
    pub seed: u64,
    pub split_spec: Option<SplitSpec>,
    pub split: Option<Split>,
}

/// Samples of one split, converted to the network precision.
#[derive(Clone, Debug)]
pub struct Subset<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub objects: Vec<usize>,
    pub views: Vec<usize>,
    pub cond: Option<Tensor<T>>,
}

impl<T: Scalar> Subset<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn samples(&self) -> Samples<'_, T> {
        Samples {
            images: &self.images,
            objects: &self.objects,
            views: &self.views,
            cond: self.cond.as_ref(),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.object_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object_ids.is_empty()
    }

    pub fn num_views(&self) -> usize {
        self.angles.len()
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    /// `[sin φ, cos φ]` conditioning features for view `v`.
    pub fn view_features(&self, v: usize) -> [f64; 2] {
        [self.angles[v].sin(), self.angles[v].cos()]
    }

    pub fn cond_for<T: Scalar>(&self, views: &[usize]) -> Tensor<T> {
        Tensor::from_fn(&[views.len(), 2], |i| T::of(self.view_features(views[i / 2])[i % 2]))
    }

    pub fn subset<T: Scalar>(&self, indices: &[usize], with_cond: bool) -> Result<Subset<T>> {
        let images = self.images.gather_rows(indices)?.cast();
        let objects: Vec<usize> = indices.iter().map(|&i| self.object_ids[i]).collect();
        let views: Vec<usize> = indices.iter().map(|&i| self.view_ids[i]).collect();
        let cond = with_cond.then(|| self.cond_for(&views));
        Ok(Subset {
            indices: indices.to_vec(),
            images,
            objects,
            views,
            cond,
        })
    }

    /// Sample index of `(object, view)`, if present.
    pub fn find(&self, object: usize, view: usize) -> Option<usize> {
        self.object_ids
            .iter()
            .zip(&self.view_ids)
            .position(|(&o, &v)| o == object && v == view)
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let s = self.size;
        if self.images.shape() != [n, 1, s, s] || self.view_ids.len() != n {
            return Err(Error::Format(format!(
                "images {:?} do not match {} samples of size {}",
                self.images.shape(),
                n,
                s
            )));
        }
        if let Some(&o) = self.object_ids.iter().find(|&&o| o >= self.num_objects) {
            return Err(Error::Format(format!("object id {o} out of range {}", self.num_objects)));
        }
        if let Some(&v) = self.view_ids.iter().find(|&&v| v >= self.angles.len()) {
            return Err(Error::Format(format!("view id {v} out of range {}", self.angles.len())));
        }
        if self.images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Format("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>, split: Option<(&SplitSpec, &Split)>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ids = |v: &[usize]| Tensor::new(&[v.len()], v.iter().map(|&i| i as f64).collect());
        io::write(dir.join("images.gpt"), &self.images)?;
        io::write(dir.join("object_ids.gpt"), &ids(&self.object_ids)?)?;
        io::write(dir.join("view_ids.gpt"), &ids(&self.view_ids)?)?;
        io::write(
            dir.join("view_features.gpt"),
            &Tensor::new(&[self.angles.len(), 1], self.angles.clone())?,
        )?;
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            num_samples: self.len(),
            num_objects: self.num_objects,
            num_views: self.num_views(),
            image_size: self.size,
            channels: 1,
            angles: self.angles.clone(),
            seed: self.seed,
            split_spec: split.map(|s| s.0.clone()),
            split: split.map(|s| s.1.clone()),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Dataset, Manifest)> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Incompatible(format!(
                "dataset manifest version {} (expected {})",
                manifest.version, MANIFEST_VERSION
            )));
        }
        let ids = |name: &str| -> Result<Vec<usize>> {
            let t: Tensor<f64> = io::read(dir.join(name))?;
            t.data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Format(format!("{name}: {v} is not an index")))
                    }
                })
                .collect()
        };
        let angles: Tensor<f64> = io::read(dir.join("view_features.gpt"))?;
        let ds = Dataset {
            images: io::read(dir.join("images.gpt"))?,
            object_ids: ids("object_ids.gpt")?,
            view_ids: ids("view_ids.gpt")?,
            angles: angles.into_data(),
            num_objects: manifest.num_objects,
            size: manifest.image_size,
            seed: manifest.seed,
        };
        if ds.len() != manifest.num_samples || ds.angles.len() != manifest.num_views {
            return Err(Error::Format("manifest counts disagree with stored tensors".into()));
        }
        ds.check()?;
        Ok((ds, manifest))
    }
}
