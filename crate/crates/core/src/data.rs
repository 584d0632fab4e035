//! Dataset ingestion, area-average resolution pyramids and the synthetic
//! known-scale corpus.
//!
//! Synthetic samples are the sum of three layers with disjoint spectra: a
//! coarse two-color gradient (one cycle across the frame), band-passed
//! geometric shapes, and a fine sinusoidal texture. Because the scale of
//! every layer is known, the corpus doubles as ground truth for scale
//! attribution.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::Tensor;
use crate::rng;
use crate::spectral::{in_band, radial_frequency, Fft2d};

/// Source-pixel weights of each output pixel along one axis.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|i| {
                    let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-average (box) downsampling to `(h, w)`; exact for fractional ratios.
pub fn resize(image: &Image, (h, w): (usize, usize)) -> Result<Image> {
    if h == 0 || w == 0 || h > image.height || w > image.width {
        return Err(Error::ResolutionMismatch {
            expected: (h, w),
            actual: image.resolution(),
        });
    }
    if (h, w) == image.resolution() {
        return Ok(image.clone());
    }
    let wy = area_weights(image.height, h);
    let wx = area_weights(image.width, w);
    let mut out = Image::filled(image.channels, h, w, 0.0);
    let mut rows = vec![0.0f64; w];
    for c in 0..image.channels {
        let src = image.plane(c);
        for (oy, ys) in wy.iter().enumerate() {
            rows.iter_mut().for_each(|v| *v = 0.0);
            for &(iy, ky) in ys {
                let line = &src[iy * image.width..(iy + 1) * image.width];
                for (ox, xs) in wx.iter().enumerate() {
                    let s: f64 = xs.iter().map(|&(ix, kx)| kx * f64::from(line[ix])).sum();
                    rows[ox] += ky * s;
                }
            }
            for (ox, v) in rows.iter().enumerate() {
                out.set(c, oy, ox, *v as f32);
            }
        }
    }
    Ok(out)
}

/// One downsampled copy per resolution, in the order given.
pub fn make_pyramid(image: &Image, resolutions: &[(usize, usize)]) -> Result<Vec<Image>> {
    resolutions.iter().map(|&r| resize(image, r)).collect()
}

/// Parameters of the synthetic three-layer corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticRecipe {
    pub samples: usize,
    pub resolution: (usize, usize),
    /// Scale of the coarse gradient's contrast around mid-gray.
    pub coarse_weight: f32,
    /// Peak absolute value of the mid (shape) layer.
    pub mid_weight: f32,
    /// Amplitude of the fine texture.
    pub fine_weight: f32,
    pub max_shapes: usize,
    /// Normalized frequency band the shape layer is restricted to.
    pub mid_band: (f64, f64),
    /// Normalized frequency band the texture frequencies are drawn from.
    pub fine_band: (f64, f64),
}

impl Default for SyntheticRecipe {
    fn default() -> Self {
        SyntheticRecipe {
            samples: 2000,
            resolution: (32, 32),
            coarse_weight: 1.0,
            mid_weight: 0.3,
            fine_weight: 0.1,
            max_shapes: 3,
            mid_band: (1.0 / 16.0, 1.0 / 2.0),
            fine_band: (1.0 / 2.0, 1.0),
        }
    }
}

impl SyntheticRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic recipe: {m}")));
        let (h, w) = self.resolution;
        if h < 4 || w < 4 {
            return bad("resolution must be at least 4x4");
        }
        if self.max_shapes == 0 {
            return bad("max_shapes must be >= 1");
        }
        for (lo, hi) in [self.mid_band, self.fine_band] {
            if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
                return bad("bands must satisfy 0 <= lo < hi <= 1");
            }
        }
        if fine_frequencies(self).is_empty() {
            return bad("no integer frequency falls inside the fine band");
        }
        Ok(())
    }
}

/// The three layers of one sample before composition.
#[derive(Clone, Debug)]
pub struct SyntheticLayers {
    /// Two-color gradient, values in [0, 1].
    pub coarse: Image,
    /// Zero-mean band-passed shapes.
    pub mid: Image,
    /// Zero-mean sinusoidal texture.
    pub fine: Image,
}

impl SyntheticLayers {
    pub fn compose(&self) -> Image {
        let mut out = self.coarse.clone();
        for ((o, m), f) in out.data.iter_mut().zip(&self.mid.data).zip(&self.fine.data) {
            *o = (*o + m + f).clamp(0.0, 1.0);
        }
        out
    }
}

/// Integer frequency pairs `(row, col)` whose radial frequency lies in the fine band.
fn fine_frequencies(recipe: &SyntheticRecipe) -> Vec<(i64, i64)> {
    let (h, w) = recipe.resolution;
    let (lo, hi) = recipe.fine_band;
    let mut out = Vec::new();
    for u in 0..h {
        // half-plane: each real sinusoid appears once
        for v in 0..=w / 2 {
            let r = radial_frequency(u, v, h, w);
            if r > 0.0 && in_band(r, lo, hi) && !(v == 0 && u > h / 2) {
                out.push((u as i64, v as i64));
            }
        }
    }
    out
}

fn coarse_layer<R: Rng>(recipe: &SyntheticRecipe, r: &mut R) -> Image {
    let (h, w) = recipe.resolution;
    let k = f64::from(recipe.coarse_weight);
    let c0: Vec<f64> = (0..3).map(|_| r.random_range(0.1..0.9)).collect();
    let c1: Vec<f64> = (0..3).map(|_| r.random_range(0.1..0.9)).collect();
    let theta: f64 = r.random_range(0.0..2.0 * PI);
    let (py, px): (f64, f64) = (r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI));
    let (a, b) = (theta.cos(), theta.sin());
    let norm = a.abs() + b.abs();
    let mut out = Image::filled(3, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            // one cycle per axis keeps every coefficient at r <= 2/N
            let wave = a * (2.0 * PI * x as f64 / w as f64 + px).cos()
                + b * (2.0 * PI * y as f64 / h as f64 + py).cos();
            let t = 0.5 + 0.5 * wave / norm;
            for c in 0..3 {
                let v = c0[c] + (c1[c] - c0[c]) * t;
                out.set(c, y, x, (0.5 + k * (v - 0.5)) as f32);
            }
        }
    }
    out
}

fn band_pass_plane(fft: &Fft2d, plane: &[f64], h: usize, w: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    let mut spec = fft.forward(plane);
    for row in 0..h {
        for col in 0..w {
            if !in_band(radial_frequency(row, col, h, w), lo, hi) {
                spec[row * w + col] = Complex64::new(0.0, 0.0);
            }
        }
    }
    fft.inverse_real(spec)
}

fn mid_layer<R: Rng>(recipe: &SyntheticRecipe, fft: &Fft2d, r: &mut R) -> Image {
    let (h, w) = recipe.resolution;
    let shapes = r.random_range(1..=recipe.max_shapes);
    let mut planes = vec![vec![0.0f64; h * w]; 3];
    for _ in 0..shapes {
        let ellipse = r.random_bool(0.5);
        let cy = r.random_range(0.2..0.8) * h as f64;
        let cx = r.random_range(0.2..0.8) * w as f64;
        let ry = r.random_range(0.1..0.3) * h as f64;
        let rx = r.random_range(0.1..0.3) * w as f64;
        let color: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        planes[c][y * w + x] += color[c];
                    }
                }
            }
        }
    }
    let filtered: Vec<Vec<f64>> = planes
        .iter()
        .map(|p| band_pass_plane(fft, p, h, w, recipe.mid_band))
        .collect();
    let peak = filtered.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = if peak > 0.0 { f64::from(recipe.mid_weight) / peak } else { 0.0 };
    Image::new(3, h, w, filtered.into_iter().flatten().map(|v| (v * k) as f32).collect())
}

fn fine_layer<R: Rng>(recipe: &SyntheticRecipe, freqs: &[(i64, i64)], r: &mut R) -> Image {
    let (h, w) = recipe.resolution;
    let (u, v) = freqs[r.random_range(0..freqs.len())];
    let phase: f64 = r.random_range(0.0..2.0 * PI);
    let amp = f64::from(recipe.fine_weight);
    let tint: Vec<f64> = (0..3).map(|_| r.random_range(0.5..1.0)).collect();
    let mut out = Image::filled(3, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s = (2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64) + phase).sin();
            for c in 0..3 {
                out.set(c, y, x, (amp * tint[c] * s) as f32);
            }
        }
    }
    out
}

/// Layers of sample `index`; a pure function of `(recipe, seed, index)`.
pub fn synthetic_layers(recipe: &SyntheticRecipe, seed: u64, index: usize) -> Result<SyntheticLayers> {
    recipe.validate()?;
    let (h, w) = recipe.resolution;
    let fft = Fft2d::new(h, w);
    let freqs = fine_frequencies(recipe);
    Ok(layers_with(recipe, &fft, &freqs, seed, index))
}

fn layers_with(recipe: &SyntheticRecipe, fft: &Fft2d, freqs: &[(i64, i64)], seed: u64, index: usize) -> SyntheticLayers {
    let mut r = rng::rng(seed, &[0x5e7, index as u64]);
    SyntheticLayers {
        coarse: coarse_layer(recipe, &mut r),
        mid: mid_layer(recipe, fft, &mut r),
        fine: fine_layer(recipe, freqs, &mut r),
    }
}

/// The composed corpus, `recipe.samples` images.
pub fn generate_synthetic(recipe: &SyntheticRecipe, seed: u64) -> Result<Vec<Image>> {
    recipe.validate()?;
    let (h, w) = recipe.resolution;
    let fft = Fft2d::new(h, w);
    let freqs = fine_frequencies(recipe);
    Ok((0..recipe.samples)
        .map(|i| layers_with(recipe, &fft, &freqs, seed, i).compose())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// PNG/JPEG files in a directory (non-recursive, sorted by name).
    Directory { path: PathBuf },
    Synthetic { recipe: SyntheticRecipe, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub target_resolution: (usize, usize),
    /// One resolution per training stage, coarsest first.
    pub pyramid: Vec<(usize, usize)>,
    pub shuffle_seed: u64,
}

impl DatasetSpec {
    /// Spec whose target and pyramid follow `config`.
    pub fn for_config(source: DataSource, config: &NetConfig, shuffle_seed: u64) -> Self {
        DatasetSpec {
            source,
            target_resolution: config.output_resolution,
            pyramid: config.resolutions()[1..].to_vec(),
            shuffle_seed,
        }
    }

    pub fn validate(&self, config: &NetConfig) -> Result<()> {
        let expected = &config.resolutions()[1..];
        if self.pyramid != expected {
            return Err(Error::InvalidConfig(format!(
                "dataset pyramid {:?} does not match the network stages {:?}",
                self.pyramid, expected
            )));
        }
        if self.target_resolution != config.output_resolution {
            return Err(Error::ResolutionMismatch {
                expected: config.output_resolution,
                actual: self.target_resolution,
            });
        }
        Ok(())
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Images of the spec's source at its target resolution.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Image>> {
    match &spec.source {
        DataSource::Synthetic { recipe, seed } => {
            if recipe.resolution != spec.target_resolution {
                return Err(Error::ResolutionMismatch {
                    expected: spec.target_resolution,
                    actual: recipe.resolution,
                });
            }
            generate_synthetic(recipe, *seed)
        }
        DataSource::Directory { path } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.is_file() && is_image_file(p));
            files.sort();
            if files.is_empty() {
                return Err(Error::InvalidConfig(format!("no PNG/JPEG files in {}", path.display())));
            }
            files
                .iter()
                .map(|f| resize(&Image::load(f)?, spec.target_resolution))
                .collect()
        }
    }
}

/// Training images at every stage resolution plus a deterministic batch order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub pyramid: Vec<(usize, usize)>,
    /// `levels[s - 1]` holds the images at stage `s`.
    pub levels: Vec<Vec<Image>>,
    pub shuffle_seed: u64,
}

impl Dataset {
    pub fn from_images(images: &[Image], pyramid: &[(usize, usize)], shuffle_seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidConfig("dataset is empty".into()));
        }
        let mut levels = vec![Vec::with_capacity(images.len()); pyramid.len()];
        for im in images {
            for (level, scaled) in levels.iter_mut().zip(make_pyramid(im, pyramid)?) {
                level.push(scaled);
            }
        }
        Ok(Dataset {
            pyramid: pyramid.to_vec(),
            levels,
            shuffle_seed,
        })
    }

    pub fn build(spec: &DatasetSpec) -> Result<Self> {
        Dataset::from_images(&load_dataset(spec)?, &spec.pyramid, spec.shuffle_seed)
    }

    pub fn len(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images at `stage` (1-based).
    pub fn level(&self, stage: usize) -> Result<&[Image]> {
        stage
            .checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .map(Vec::as_slice)
            .ok_or(Error::InvalidStage {
                stage,
                stages: self.levels.len(),
            })
    }

    /// Permutation of the sample indices; a pure function of `(seed, stage, epoch)`.
    pub fn epoch_order(&self, stage: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::rng(self.shuffle_seed, &[0xda7a, stage as u64, epoch as u64]));
        order
    }

    /// Indices of batch `step` (0-based, within the stage), wrapping across epochs.
    pub fn batch_indices(&self, stage: usize, step: usize, batch_size: usize) -> Vec<usize> {
        let n = self.len();
        (0..batch_size)
            .map(|j| {
                let flat = step * batch_size + j;
                self.epoch_order(stage, flat / n)[flat % n]
            })
            .collect()
    }

    pub fn batch(&self, stage: usize, indices: &[usize]) -> Result<Tensor> {
        let level = self.level(stage)?;
        let picked: Vec<Image> = indices
            .iter()
            .map(|&i| {
                level
                    .get(i)
                    .cloned()
                    .ok_or(Error::IndexOutOfRange { index: i, len: level.len() })
            })
            .collect::<Result<_>>()?;
        Image::to_tensor(&picked)
    }
}
