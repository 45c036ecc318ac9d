//! Procedural segmentation domains.
//!
//! Every domain renders a star-shaped foreground object over a textured
//! background. Domains differ in palette, polarity, texture and noise so
//! that a model pre-trained on one of them transfers only partially to the
//! others, while their pooled encoder embeddings stay easy to tell apart.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Image, Mask};
use crate::model::{sample_prompts, PromptSet};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    /// Reserved for pre-training the frozen base; never part of a task stream.
    Base,
    BrightBlob,
    CamouflageTexture,
    ShadowRegion,
    NoisyLesion,
    LowContrastTexture,
}

impl DomainKind {
    pub const CONTINUAL: [DomainKind; 5] = [
        DomainKind::BrightBlob,
        DomainKind::CamouflageTexture,
        DomainKind::ShadowRegion,
        DomainKind::NoisyLesion,
        DomainKind::LowContrastTexture,
    ];

    pub fn id(self) -> u32 {
        match self {
            DomainKind::Base => 0,
            DomainKind::BrightBlob => 1,
            DomainKind::CamouflageTexture => 2,
            DomainKind::ShadowRegion => 3,
            DomainKind::NoisyLesion => 4,
            DomainKind::LowContrastTexture => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Base => "base",
            DomainKind::BrightBlob => "bright-blob",
            DomainKind::CamouflageTexture => "camouflage-texture",
            DomainKind::ShadowRegion => "shadow-region",
            DomainKind::NoisyLesion => "noisy-lesion",
            DomainKind::LowContrastTexture => "low-contrast-texture",
        }
    }

    /// Background and foreground reference colours.
    fn palette(self) -> ([f64; 3], [f64; 3]) {
        match self {
            DomainKind::Base => ([0.15, 0.15, 0.15], [0.85, 0.85, 0.85]),
            DomainKind::BrightBlob => ([0.72, 0.42, 0.36], [0.98, 0.86, 0.42]),
            DomainKind::CamouflageTexture => ([0.42, 0.48, 0.28], [0.5, 0.52, 0.3]),
            DomainKind::ShadowRegion => ([0.72, 0.74, 0.82], [0.18, 0.2, 0.3]),
            DomainKind::NoisyLesion => ([0.86, 0.66, 0.56], [0.42, 0.26, 0.18]),
            DomainKind::LowContrastTexture => ([0.3, 0.36, 0.5], [0.42, 0.46, 0.58]),
        }
    }

    /// Texture amplitude on (background, foreground).
    fn texture_amplitude(self) -> (f64, f64) {
        match self {
            DomainKind::Base => (0.05, 0.05),
            DomainKind::BrightBlob => (0.3, 0.08),
            DomainKind::CamouflageTexture => (0.35, 0.35),
            DomainKind::ShadowRegion => (0.12, 0.06),
            DomainKind::NoisyLesion => (0.1, 0.12),
            DomainKind::LowContrastTexture => (0.22, 0.22),
        }
    }

    /// Foreground texture runs at this multiple of the background frequency.
    fn fg_frequency_ratio(self) -> f64 {
        match self {
            DomainKind::CamouflageTexture => 3.0,
            DomainKind::LowContrastTexture => 2.0,
            _ => 1.0,
        }
    }
}

impl std::fmt::Display for DomainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(DomainKind::Base)
            .chain(DomainKind::CONTINUAL)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown domain kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: DomainKind,
    /// Value-noise lattice cells across the image.
    pub texture_freq: f64,
    /// Multiplier on the palette's foreground/background difference.
    pub contrast: f64,
    /// Std-dev of per-pixel Gaussian noise.
    pub noise: f64,
    /// Foreground area as a fraction of the image.
    pub area_range: (f64, f64),
    pub seed_base: u64,
}

impl DomainSpec {
    pub fn default_for(kind: DomainKind) -> Self {
        let (texture_freq, noise, area_range) = match kind {
            DomainKind::Base => (4.0, 0.02, (0.06, 0.35)),
            DomainKind::BrightBlob => (5.0, 0.03, (0.06, 0.35)),
            DomainKind::CamouflageTexture => (3.0, 0.04, (0.08, 0.4)),
            DomainKind::ShadowRegion => (4.0, 0.03, (0.06, 0.35)),
            DomainKind::NoisyLesion => (4.0, 0.14, (0.06, 0.35)),
            DomainKind::LowContrastTexture => (4.0, 0.04, (0.08, 0.4)),
        };
        Self {
            kind,
            texture_freq,
            contrast: 1.0,
            noise,
            area_range,
            seed_base: 1000 + kind.id() as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_range;
        if !(lo > 0.02 && hi < 0.5 && lo < hi) {
            return Err(Error::Validation(format!(
                "area range ({lo}, {hi}) must satisfy 0.02 < lo < hi < 0.5"
            )));
        }
        if !(0.02..=2.0).contains(&self.contrast) {
            return Err(Error::Validation(format!("contrast {} outside [0.02, 2]", self.contrast)));
        }
        if !(0.0..=0.3).contains(&self.noise) {
            return Err(Error::Validation(format!("noise {} outside [0, 0.3]", self.noise)));
        }
        if !(1.0..=32.0).contains(&self.texture_freq) {
            return Err(Error::Validation(format!(
                "texture frequency {} outside [1, 32]",
                self.texture_freq
            )));
        }
        Ok(())
    }
}

pub fn default_domains() -> Vec<DomainSpec> {
    DomainKind::CONTINUAL.iter().map(|&k| DomainSpec::default_for(k)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => rng::tag::TRAIN,
            Split::Test => rng::tag::TEST,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: Mask,
    pub prompts: PromptSet,
    pub domain: DomainKind,
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(r: &mut ChaCha8Rng, size: usize, freq: f64) -> Vec<f64> {
    let cells = freq.ceil() as usize + 1;
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| r.random::<f64>()).collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = (y as f64 + 0.5) / size as f64 * freq;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..size {
            let fx = (x as f64 + 0.5) / size as f64 * freq;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Two-octave texture centred on zero.
fn texture(r: &mut ChaCha8Rng, size: usize, freq: f64) -> Vec<f64> {
    let a = value_noise(r, size, freq);
    let b = value_noise(r, size, freq * 2.0);
    a.iter().zip(&b).map(|(x, y)| (0.65 * x + 0.35 * y) - 0.5).collect()
}

fn star_mask(r: &mut ChaCha8Rng, size: usize, area_range: (f64, f64)) -> Option<Mask> {
    let s = size as f64;
    for _ in 0..64 {
        let target = r.random_range(area_range.0..area_range.1);
        let r0 = (target * s * s / std::f64::consts::PI).sqrt();
        let harmonics: Vec<(f64, f64, f64)> = (2..=4)
            .map(|k| (k as f64, r.random_range(0.0..0.18), r.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let margin = (r0 * 1.1).min(s / 2.0 - 1.0);
        let cy = r.random_range(margin..=(s - margin).max(margin));
        let cx = r.random_range(margin..=(s - margin).max(margin));
        let mut data = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let theta = dy.atan2(dx);
                let radius = r0 * (1.0 + harmonics.iter().map(|(k, a, p)| a * (k * theta + p).cos()).sum::<f64>());
                data[y * size + x] = dx * dx + dy * dy <= radius * radius;
            }
        }
        let m = Mask::new(size, size, data).expect("mask shape");
        let f = m.area_fraction();
        if f > area_range.0 && f < area_range.1 {
            return Some(m);
        }
    }
    None
}

/// One sample, fully determined by `(spec, seed, split, index)`.
pub fn generate_sample(
    spec: &DomainSpec,
    image_size: usize,
    prompts_per_sample: usize,
    seed: u64,
    split: Split,
    index: usize,
) -> Result<Sample> {
    let key = [spec.seed_base, seed, split.tag(), index as u64];
    let mut r = rng::stream(&key);
    let mask = star_mask(&mut r, image_size, spec.area_range).ok_or_else(|| {
        Error::Validation(format!(
            "area range {:?} is not reachable at {image_size}px",
            spec.area_range
        ))
    })?;
    let (bg, fg_ref) = spec.kind.palette();
    let fg: Vec<f64> = (0..3).map(|c| bg[c] + spec.contrast * (fg_ref[c] - bg[c])).collect();
    let (amp_bg, amp_fg) = spec.kind.texture_amplitude();
    let tex_bg = texture(&mut r, image_size, spec.texture_freq);
    let tex_fg = texture(&mut r, image_size, spec.texture_freq * spec.kind.fg_frequency_ratio());
    // slight per-image colour jitter keeps domains from being single points
    let jitter: Vec<f64> = (0..3).map(|_| r.random_range(-0.04..0.04)).collect();
    let hw = image_size * image_size;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        let inside = mask.data[p];
        for c in 0..3 {
            let base = if inside {
                fg[c] + amp_fg * tex_fg[p]
            } else {
                bg[c] + amp_bg * tex_bg[p]
            };
            let n: f64 = r.sample(StandardNormal);
            data[c * hw + p] = (base + jitter[c] + spec.noise * n).clamp(0.0, 1.0);
        }
    }
    let image = Image::new(image_size, image_size, data)?;
    let prompts = sample_prompts(&mask, prompts_per_sample, rng::mix(&key))?;
    Ok(Sample {
        image,
        mask,
        prompts,
        domain: spec.kind,
    })
}

/// `n` samples of one split. Train and test draw from disjoint seed streams.
pub fn generate_domain(
    spec: &DomainSpec,
    image_size: usize,
    n: usize,
    prompts_per_sample: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Validation("generate_domain needs n >= 1".into()));
    }
    (0..n)
        .map(|i| generate_sample(spec, image_size, prompts_per_sample, seed, split, i))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub spec: Option<DomainSpec>,
    pub seed: Option<u64>,
    pub split: Option<Split>,
    pub image_size: usize,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub prompts: Vec<(usize, usize)>,
    pub domain: DomainKind,
}

pub const DATASET_FORMAT: &str = "augseg-dataset";

/// Writes `NNNN.ppm` / `NNNN.pgm` pairs plus `manifest.json`.
pub fn dump_dataset(
    dir: &Path,
    samples: &[Sample],
    spec: Option<&DomainSpec>,
    seed: Option<u64>,
    split: Option<Split>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image_size = samples.first().map_or(0, |s| s.image.height);
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let img = format!("{i:04}.ppm");
        let msk = format!("{i:04}.pgm");
        image::write_file(&dir.join(&img), &s.image.to_ppm())?;
        image::write_file(&dir.join(&msk), &s.mask.to_pgm())?;
        entries.push(ManifestEntry {
            image: img,
            mask: msk,
            prompts: s.prompts.points.clone(),
            domain: s.domain,
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        spec: spec.cloned(),
        seed,
        split,
        image_size,
        samples: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    image::write_file(&dir.join("manifest.json"), &json)
}

/// Loads a directory in the [`dump_dataset`] layout, generated or not.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mpath = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_slice(&image::read_file(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != DATASET_FORMAT || manifest.version != 1 {
        return Err(Error::format(
            &mpath,
            format!("unsupported dataset {} v{}", manifest.format, manifest.version),
        ));
    }
    manifest
        .samples
        .iter()
        .map(|e| {
            let ip = dir.join(&e.image);
            let mp = dir.join(&e.mask);
            let image = Image::from_ppm(&image::read_file(&ip)?, &ip)?;
            let mask = Mask::from_pgm(&image::read_file(&mp)?, &mp)?;
            if (image.height, image.width) != (mask.height, mask.width) {
                return Err(Error::format(&mp, "image and mask sizes differ"));
            }
            if e.prompts.iter().any(|&(r, c)| r >= mask.height || c >= mask.width) {
                return Err(Error::Bounds(format!("prompt outside {}", e.image)));
            }
            Ok(Sample {
                image,
                mask,
                prompts: PromptSet {
                    points: e.prompts.clone(),
                },
                domain: e.domain,
            })
        })
        .collect()
}
