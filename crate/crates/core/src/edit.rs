//! Constraint-driven latent editing.
//!
//! The objective combines a masked color term and a HOG edge term:
//!
//! ```text
//! loss(z) = sum_{M(i,j)=1} mean_c |C - G(z)| / |M|  +  alpha * mean |HOG(G(z)) - HOG(E)|
//! ```
//!
//! `|M|` counts mask-on pixels. The color term is inactive when the mask is
//! empty and the edge term is inactive when no edge map is given.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hog::{hog_plane, HogSpec};
use crate::imaging::Image;
use crate::latent::{BranchedLatent, SamplePolicy};
use crate::networks::{Encoder, Generator, Network};
use crate::nn::{self, Tensor};
use crate::rng;

/// User constraints: color map, binary mask and optional edge map.
#[derive(Clone, Debug, PartialEq)]
pub struct EditConstraints {
    pub color: Image,
    /// Single channel, entries 0 or 1.
    pub mask: Image,
    /// Single channel edge drawing.
    pub edge: Option<Image>,
}

impl EditConstraints {
    /// Color constraint on every pixel, no edge term.
    pub fn full_mask(color: Image) -> Self {
        let mask = Image::filled(1, color.height, color.width, 1.0);
        EditConstraints {
            color,
            mask,
            edge: None,
        }
    }

    pub fn edge_only(edge: Image, channels: usize) -> Self {
        EditConstraints {
            color: Image::filled(channels, edge.height, edge.width, 0.0),
            mask: Image::filled(1, edge.height, edge.width, 0.0),
            edge: Some(edge),
        }
    }

    pub fn mask_count(&self) -> usize {
        self.mask.data.iter().filter(|v| **v == 1.0).count()
    }

    pub fn validate(&self, resolution: (usize, usize), channels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConstraints(m));
        if self.color.resolution() != resolution || self.color.channels != channels {
            return bad(format!(
                "color map is {}x{}x{}, model outputs {}x{}x{channels}",
                self.color.channels, self.color.height, self.color.width, resolution.0, resolution.1
            ));
        }
        if self.mask.resolution() != resolution || self.mask.channels != 1 {
            return bad("mask must be single channel at the model resolution".into());
        }
        if self.mask.data.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return bad("mask entries must be 0 or 1".into());
        }
        if let Some(e) = &self.edge {
            if e.resolution() != resolution || e.channels != 1 {
                return bad("edge map must be single channel at the model resolution".into());
            }
        }
        if self.mask_count() == 0 && self.edge.is_none() {
            return bad("empty mask and no edge map: nothing to optimize".into());
        }
        Ok(())
    }

    /// Writes `color.png`, `mask.png` (1-bit) and, when present, `edge.png`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.color.save_png(&dir.join("color.png"))?;
        write_mask_png(&self.mask, &dir.join("mask.png"))?;
        if let Some(e) = &self.edge {
            e.save_png(&dir.join("edge.png"))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let color = Image::load(&dir.join("color.png"))?;
        let mask = Image::gray_from_png_bytes(&std::fs::read(dir.join("mask.png"))?)?;
        let mask = binarize(mask);
        let edge_path = dir.join("edge.png");
        let edge = if edge_path.exists() {
            Some(Image::gray_from_png_bytes(&std::fs::read(edge_path)?)?)
        } else {
            None
        };
        Ok(EditConstraints { color, mask, edge })
    }
}

/// Maps any nonzero value to 1.
pub fn binarize(mut mask: Image) -> Image {
    for v in &mut mask.data {
        *v = if *v > 0.0 { 1.0 } else { 0.0 };
    }
    mask
}

fn write_mask_png(mask: &Image, path: &Path) -> Result<()> {
    let (w, h) = (mask.width as u32, mask.height as u32);
    let row_bytes = mask.width.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(0, y, x) > 0.0 {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w, h);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .write_image_data(&packed)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    Encoder,
    Given { latent: BranchedLatent },
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    /// Edge-term weight.
    pub alpha: f64,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub init: InitMode,
    pub hog: HogSpec,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            alpha: 10.0,
            steps: 200,
            step_size: 0.05,
            restarts: 3,
            init: InitMode::Encoder,
            hog: HogSpec::default(),
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || self.steps == 0 || self.restarts == 0 || !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(
                "edit config needs alpha >= 0, steps >= 1, restarts >= 1, step_size > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Precomputed constant parts of the objective.
struct Objective<'a> {
    constraints: &'a EditConstraints,
    alpha: f64,
    hog: HogSpec,
    mask_count: usize,
    edge_desc: Option<Vec<f64>>,
}

impl<'a> Objective<'a> {
    fn new(g: &Generator, constraints: &'a EditConstraints, config: &EditConfig) -> Result<Self> {
        config.validate()?;
        let cfg = g.config();
        constraints.validate(g.resolution(), cfg.output_channels)?;
        let edge_desc = match &constraints.edge {
            Some(e) => {
                let plane: Vec<f64> = e.data.iter().map(|v| f64::from(*v)).collect();
                Some(hog_plane(&plane, e.height, e.width, &config.hog)?.0)
            }
            None => None,
        };
        Ok(Objective {
            constraints,
            alpha: config.alpha,
            hog: config.hog.clone(),
            mask_count: constraints.mask_count(),
            edge_desc,
        })
    }

    /// Loss of a rendered image and, optionally, its gradient with respect to the image.
    fn image_loss(&self, img: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let (h, w, ch) = (img.height, img.width, img.channels);
        let mut loss = 0.0;
        let mut grad = want_grad.then(|| vec![0.0; img.data.len()]);
        if self.mask_count > 0 {
            let norm = 1.0 / (self.mask_count as f64 * ch as f64);
            for p in 0..h * w {
                if self.constraints.mask.data[p] != 1.0 {
                    continue;
                }
                for c in 0..ch {
                    let idx = c * h * w + p;
                    let d = f64::from(img.data[idx]) - f64::from(self.constraints.color.data[idx]);
                    loss += d.abs() * norm;
                    if let Some(g) = grad.as_mut() {
                        g[idx] += d.signum() * norm * f64::from(u8::from(d != 0.0));
                    }
                }
            }
        }
        if let Some(target) = &self.edge_desc {
            let gray = img.to_gray();
            let plane: Vec<f64> = gray.data.iter().map(|v| f64::from(*v)).collect();
            let (desc, tape) = hog_plane(&plane, h, w, &self.hog)?;
            let k = self.alpha / desc.len() as f64;
            let mut d_desc = vec![0.0; desc.len()];
            for ((a, b), dd) in desc.iter().zip(target).zip(&mut d_desc) {
                let d = a - b;
                loss += k * d.abs();
                if d != 0.0 {
                    *dd = k * d.signum();
                }
            }
            if let Some(g) = grad.as_mut() {
                let d_plane = tape.backward(&d_desc);
                for c in 0..ch {
                    for (p, dp) in d_plane.iter().enumerate() {
                        g[c * h * w + p] += dp / ch as f64;
                    }
                }
            }
        }
        Ok((loss, grad))
    }

    fn loss(&self, g: &Generator, z: &BranchedLatent) -> Result<f64> {
        Ok(self.image_loss(&g.generate(z)?, false)?.0)
    }

    fn loss_and_grad(&self, g: &Generator, z: &[f32]) -> Result<(f64, Vec<f64>)> {
        let x = Tensor::from_vec(1, z.len(), 1, 1, z.to_vec());
        let tape = g.forward(x);
        let img = Image::from_tensor(tape.output()).remove(0);
        let (loss, d_img) = self.image_loss(&img, true)?;
        let d_img = d_img.expect("gradient requested");
        let out = tape.output();
        let dy = Tensor::from_vec(out.n, out.c, out.h, out.w, d_img.iter().map(|v| *v as f32).collect());
        let dz = nn::backward(&g.ops(), &g.params, &tape, dy, None);
        Ok((loss, dz.data.iter().map(|v| f64::from(*v)).collect()))
    }
}

/// Evaluates the objective at `z`.
pub fn edit_loss(z: &BranchedLatent, constraints: &EditConstraints, config: &EditConfig, g: &Generator) -> Result<f64> {
    Objective::new(g, constraints, config)?.loss(g, z)
}

/// Evaluates the objective of an already rendered image.
pub fn edit_loss_of_image(image: &Image, constraints: &EditConstraints, config: &EditConfig) -> Result<f64> {
    config.validate()?;
    constraints.validate(image.resolution(), image.channels)?;
    let edge_desc = match &constraints.edge {
        Some(e) => {
            let plane: Vec<f64> = e.data.iter().map(|v| f64::from(*v)).collect();
            Some(hog_plane(&plane, e.height, e.width, &config.hog)?.0)
        }
        None => None,
    };
    let obj = Objective {
        constraints,
        alpha: config.alpha,
        hog: config.hog.clone(),
        mask_count: constraints.mask_count(),
        edge_desc,
    };
    Ok(obj.image_loss(image, false)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub latent: BranchedLatent,
    #[serde(skip)]
    pub image: Option<Image>,
    pub final_loss: f64,
    /// Loss at the first restart's starting point.
    pub initial_loss: f64,
    /// Loss per evaluation of the restart that produced the best iterate.
    pub trace: Vec<f64>,
    /// Best loss reached by each restart.
    pub restart_losses: Vec<f64>,
    pub init: String,
}

fn init_latent(
    g: &Generator,
    encoder: Option<&Encoder>,
    constraints: &EditConstraints,
    mode: &InitMode,
    restart: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let cfg = g.config();
    let mut r = rng::rng(seed, &[0xed17, restart as u64]);
    let random = || SamplePolicy::uniform(cfg.branch_count()).sample_with(cfg, &mut rng::rng(seed, &[0xed18, restart as u64]));
    let base = match mode {
        InitMode::Random => return Ok(random().flatten()),
        InitMode::Given { latent } => {
            latent.validate(cfg)?;
            latent.flatten()
        }
        InitMode::Encoder => {
            let enc = encoder.ok_or_else(|| Error::InvalidConfig("encoder initialization requires an encoder".into()))?;
            enc.encode(&constraints.color)?.flatten()
        }
    };
    if restart == 0 {
        return Ok(base);
    }
    // later restarts jitter the starting point
    Ok(base
        .iter()
        .map(|v| (v + (r.random::<f32>() * 2.0 - 1.0) * 0.25).clamp(-1.0, 1.0))
        .collect())
}

/// Minimizes the edit objective over the latent with Adam, clipping to the
/// unit box after every step and keeping the best iterate.
pub fn optimize_edit(
    g: &Generator,
    encoder: Option<&Encoder>,
    constraints: &EditConstraints,
    config: &EditConfig,
    seed: u64,
) -> Result<EditResult> {
    let obj = Objective::new(g, constraints, config)?;
    let cfg = g.config();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);

    let mut best: Option<(f64, Vec<f32>, Vec<f64>)> = None;
    let mut restart_losses = Vec::with_capacity(config.restarts);
    let mut initial_loss = f64::NAN;
    for restart in 0..config.restarts {
        let mut z = init_latent(g, encoder, constraints, &config.init, restart, seed)?;
        let mut m = vec![0.0f64; z.len()];
        let mut v = vec![0.0f64; z.len()];
        let mut trace = Vec::with_capacity(config.steps + 1);
        let mut run_best = (f64::INFINITY, z.clone());
        for step in 0..=config.steps {
            let (loss, grad) = obj.loss_and_grad(g, &z)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("edit loss at step {step}")));
            }
            if restart == 0 && step == 0 {
                initial_loss = loss;
            }
            trace.push(loss);
            if loss < run_best.0 {
                run_best = (loss, z.clone());
            }
            if step == config.steps || loss == 0.0 {
                break;
            }
            let t = (step + 1) as i32;
            for i in 0..z.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                let next = f64::from(z[i]) - config.step_size * mh / (vh.sqrt() + eps);
                z[i] = (next as f32).clamp(-1.0, 1.0);
            }
        }
        restart_losses.push(run_best.0);
        if best.as_ref().is_none_or(|b| run_best.0 < b.0) {
            best = Some((run_best.0, run_best.1, trace));
        }
        if run_best.0 == 0.0 {
            break;
        }
    }
    let (final_loss, flat, trace) = best.expect("at least one restart");
    let latent = BranchedLatent::from_flat(cfg, &flat)?;
    let image = g.generate(&latent)?;
    let init = match &config.init {
        InitMode::Encoder => "encoder",
        InitMode::Given { .. } => "given",
        InitMode::Random => "random",
    };
    Ok(EditResult {
        latent,
        image: Some(image),
        final_loss,
        initial_loss,
        trace,
        restart_losses,
        init: init.into(),
    })
}

/// Rows of the minimum-loss benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub name: String,
    pub mean_loss: f64,
    pub case_losses: Vec<f64>,
}

/// A generator entry for [`benchmark_manifold`].
pub struct BenchmarkModel<'a> {
    pub name: String,
    pub generator: &'a Generator,
    pub encoder: Option<&'a Encoder>,
}

/// Mean minimum edit loss of each generator over the same cases.
pub fn benchmark_manifold(
    models: &[BenchmarkModel<'_>],
    cases: &[EditConstraints],
    config: &EditConfig,
    seed: u64,
) -> Result<Vec<BenchmarkRow>> {
    if cases.is_empty() {
        return Err(Error::InvalidConfig("benchmark needs at least one case".into()));
    }
    if let Some(first) = models.first() {
        let res = first.generator.resolution();
        if models.iter().any(|m| m.generator.resolution() != res) {
            return Err(Error::InvalidConfig("benchmark generators differ in resolution".into()));
        }
    }
    models
        .iter()
        .map(|m| {
            let case_losses = cases
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    optimize_edit(m.generator, m.encoder, c, config, rng::derive(seed, &[i as u64]))
                        .map(|r| r.final_loss)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BenchmarkRow {
                name: m.name.clone(),
                mean_loss: case_losses.iter().sum::<f64>() / case_losses.len() as f64,
                case_losses,
            })
        })
        .collect()
}

/// Normalized gradient-magnitude sketch of an image, used as a stand-in edge drawing.
pub fn edge_sketch(image: &Image) -> Image {
    let g = image.to_gray();
    let (h, w) = g.resolution();
    let at = |y: usize, x: usize| g.get(0, y, x);
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let dy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            out[y * w + x] = (dx * dx + dy * dy).sqrt();
        }
    }
    let max = out.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    Image::new(1, h, w, out)
}

/// Benchmark cases from images: two full-mask color cases for every
/// edge-only case (edge map from [`edge_sketch`]).
pub fn make_benchmark_cases(images: &[Image]) -> Vec<EditConstraints> {
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            if i % 3 == 2 {
                EditConstraints::edge_only(edge_sketch(im), im.channels)
            } else {
                EditConstraints::full_mask(im.clone())
            }
        })
        .collect()
}
