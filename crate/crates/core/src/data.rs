//! Synthetic video datasets and their on-disk cache.
//!
//! - `directional_motion`: a textured square slides left to right (class 0)
//!   or right to left (class 1). Clips come in pairs; clip `2p + 1` is clip
//!   `2p` played backwards, noise included, so labels flip under reversal.
//! - `static_texture`: every frame of a clip is identical; each class has
//!   its own mean intensity.
//! - `speed_contrast`: left-to-right motion at one (class 0) or two
//!   (class 1) pixels per frame.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::InputGeometry;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    DirectionalMotion,
    StaticTexture,
    SpeedContrast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: GeneratorKind,
    pub geometry: InputGeometry,
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn new(kind: GeneratorKind, geometry: InputGeometry, samples: usize, seed: u64) -> Self {
        Self {
            kind,
            geometry,
            classes: 2,
            samples,
            seed,
            noise: default_noise(),
        }
    }

    /// Side of the moving patch.
    pub fn patch(&self) -> usize {
        self.geometry.height.min(self.geometry.width) / 4
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geometry;
        if g.frames < 8 || g.height < 16 || g.width < 16 || g.channels < 1 {
            return Err(Error::Config(format!("clip geometry must be at least 8x16x16x1, got {g:?}")));
        }
        if self.samples == 0 {
            return Err(Error::Config("dataset needs at least one sample".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        let fixed_two = matches!(self.kind, GeneratorKind::DirectionalMotion | GeneratorKind::SpeedContrast);
        if fixed_two && self.classes != 2 {
            return Err(Error::Config(format!("{:?} has exactly 2 classes, got {}", self.kind, self.classes)));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let max_speed = if self.kind == GeneratorKind::SpeedContrast { 2 } else { 1 };
        let travel = max_speed * (g.frames - 1);
        if self.kind != GeneratorKind::StaticTexture && self.patch() + travel > g.width {
            return Err(Error::Config(format!(
                "a {p}-pixel patch moving {travel} pixels does not fit in width {w}",
                p = self.patch(),
                w = g.width
            )));
        }
        Ok(())
    }
}

/// Clips `[N, T, H, W, C]` with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub spec: DatasetSpec,
    pub clips: Tensor<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Gathers clips by index into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let per = self.clips.len() / self.len().max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.clips.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.clips.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered batch matches shape"), labels)
    }

    /// Every clip played backwards, labels unchanged.
    pub fn reversed(&self) -> Result<Self> {
        Ok(Self {
            spec: self.spec.clone(),
            clips: self.clips.reverse_time()?,
            labels: self.labels.clone(),
        })
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            spec: self.spec.clone(),
            clips: self.clips.cast(),
            labels: self.labels.clone(),
        }
    }

    /// Writes `manifest.json` and `clips.stck` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            spec: self.spec.clone(),
            labels: self.labels.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        checkpoint::save(&dir.join("clips.stck"), Default::default(), [("data", "clips", &self.clips)])
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("dataset manifest: {e}")))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("unsupported dataset format `{}`", manifest.format)));
        }
        let ck = checkpoint::load::<S>(&dir.join("clips.stck"))?;
        let clips = ck
            .tensors
            .into_iter()
            .find(|(n, _, _)| n == "clips")
            .map(|(_, _, t)| t)
            .ok_or_else(|| Error::Checkpoint("dataset cache has no `clips` tensor".into()))?;
        let g = manifest.spec.geometry;
        if clips.shape() != g.shape(manifest.labels.len()).as_slice() {
            return Err(Error::ShapeMismatch {
                op: "dataset cache",
                lhs: g.shape(manifest.labels.len()),
                rhs: clips.shape().to_vec(),
            });
        }
        Ok(Self {
            spec: manifest.spec,
            clips,
            labels: manifest.labels,
        })
    }

    /// Loads `dir` if it holds this exact spec, otherwise generates and
    /// (re)writes it.
    pub fn load_or_generate(spec: &DatasetSpec, dir: &Path) -> Result<Self> {
        if let Ok(d) = Self::load_dir(dir) {
            if &d.spec == spec {
                return Ok(d);
            }
        }
        let d = generate_synthetic(spec)?;
        d.save_dir(dir)?;
        Ok(d)
    }
}

const MANIFEST_FORMAT: &str = "stconv-dataset-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: DatasetSpec,
    labels: Vec<usize>,
}

/// Deterministic in `spec.seed`; values are produced in 64-bit and cast.
pub fn generate_synthetic<S: Scalar>(spec: &DatasetSpec) -> Result<Dataset<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = spec.geometry;
    let frame = g.height * g.width * g.channels;
    let mut data = Vec::with_capacity(spec.samples * g.frames * frame);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut i = 0;
    while i < spec.samples {
        match spec.kind {
            GeneratorKind::DirectionalMotion => {
                let clip = motion_clip(spec, 1, &mut rng);
                data.extend_from_slice(&clip);
                labels.push(0);
                if i + 1 < spec.samples {
                    data.extend(reverse_frames(&clip, frame));
                    labels.push(1);
                }
                i += 2;
            }
            GeneratorKind::SpeedContrast => {
                let label = i % 2;
                data.extend(motion_clip(spec, label + 1, &mut rng));
                labels.push(label);
                i += 1;
            }
            GeneratorKind::StaticTexture => {
                let label = i % spec.classes;
                data.extend(static_clip(spec, label, &mut rng));
                labels.push(label);
                i += 1;
            }
        }
    }
    let clips = Tensor::new(g.shape(labels.len()), data.into_iter().map(S::lit).collect())?;
    Ok(Dataset {
        spec: spec.clone(),
        clips,
        labels,
    })
}

/// Reverses the frame order of one flat clip.
pub fn reverse_frames(clip: &[f64], frame: usize) -> Vec<f64> {
    clip.chunks(frame).rev().flatten().copied().collect()
}

fn noise(spec: &DatasetSpec) -> Normal<f64> {
    Normal::new(0.0, spec.noise).expect("validated noise level")
}

/// Left-to-right motion at `speed` pixels per frame.
fn motion_clip(spec: &DatasetSpec, speed: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = spec.geometry;
    let p = spec.patch();
    let texture: Vec<f64> = (0..p * p * g.channels).map(|_| rng.random_range(0.5..1.0)).collect();
    let travel = speed * (g.frames - 1);
    let x0 = rng.random_range(0..=g.width - p - travel);
    let y0 = rng.random_range(0..=g.height - p);
    let eps = noise(spec);
    let mut clip = Vec::with_capacity(g.frames * g.height * g.width * g.channels);
    for t in 0..g.frames {
        let x = x0 + speed * t;
        for yy in 0..g.height {
            for xx in 0..g.width {
                for c in 0..g.channels {
                    let inside = (y0..y0 + p).contains(&yy) && (x..x + p).contains(&xx);
                    let v = if inside { texture[((yy - y0) * p + (xx - x)) * g.channels + c] } else { 0.0 };
                    clip.push(v + eps.sample(rng));
                }
            }
        }
    }
    clip
}

/// One random frame repeated over time, offset by a class-dependent level.
fn static_clip(spec: &DatasetSpec, label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = spec.geometry;
    let level = label as f64 - (spec.classes as f64 - 1.0) / 2.0;
    let eps = noise(spec);
    let frame: Vec<f64> = (0..g.height * g.width * g.channels).map(|_| level + eps.sample(rng)).collect();
    frame.repeat(g.frames)
}
