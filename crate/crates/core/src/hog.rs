//! Differentiable histogram of oriented gradients.
//!
//! Gradients come from centered differences (one-sided at the border).
//! Each pixel votes its magnitude into all unsigned orientation bins with
//! smooth circular soft-assignment weights, cells sum their pixels' votes,
//! and overlapping blocks of cells are L2-normalized with an epsilon guard.
//! Every step is smooth in the pixel values, so the descriptor has exact
//! analytic gradients ([`HogTape::backward`]).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HogSpec {
    /// Cell side in pixels.
    pub cell: usize,
    /// Unsigned orientation bins over [0, pi).
    pub bins: usize,
    /// Block side in cells (blocks step by one cell).
    pub block: usize,
    pub epsilon: f64,
    /// Concentration of the orientation soft-assignment.
    pub sharpness: f64,
    /// Magnitude smoothing: `m = sqrt(gx^2 + gy^2 + delta^2) - delta`.
    pub magnitude_delta: f64,
}

impl Default for HogSpec {
    fn default() -> Self {
        HogSpec {
            cell: 8,
            bins: 9,
            block: 2,
            epsilon: 1e-6,
            sharpness: 4.0,
            magnitude_delta: 1e-3,
        }
    }
}

impl HogSpec {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.cell == 0 || self.bins < 2 || self.block == 0 {
            return Err(Error::InvalidConfig("HOG needs cell >= 1, bins >= 2, block >= 1".into()));
        }
        if h < self.cell || w < self.cell {
            return Err(Error::InvalidConfig(format!(
                "image {h}x{w} is smaller than one {0}x{0} cell",
                self.cell
            )));
        }
        if !h.is_multiple_of(self.cell) || !w.is_multiple_of(self.cell) {
            return Err(Error::InvalidConfig(format!(
                "image {h}x{w} is not divisible by the cell size {}",
                self.cell
            )));
        }
        Ok(())
    }

    fn bin_center(&self, k: usize) -> f64 {
        k as f64 * PI / self.bins as f64
    }

    /// Descriptor length for an `h × w` image.
    pub fn descriptor_len(&self, h: usize, w: usize) -> usize {
        let (cy, cx) = (h / self.cell, w / self.cell);
        let b = self.block.min(cy).min(cx);
        (cy - b + 1) * (cx - b + 1) * b * b * self.bins
    }
}

/// Intermediates of one forward pass, enough to backpropagate.
pub struct HogTape {
    spec: HogSpec,
    h: usize,
    w: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
    mag: Vec<f64>,
    /// `bins` weights per pixel.
    weights: Vec<f64>,
    /// Derivative of each weight's logit with respect to the orientation angle.
    dlogit: Vec<f64>,
    /// Raw (un-normalized) block vectors and their norms.
    blocks: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

struct Layout {
    cells_y: usize,
    cells_x: usize,
    block: usize,
    blocks_y: usize,
    blocks_x: usize,
}

impl Layout {
    fn new(spec: &HogSpec, h: usize, w: usize) -> Self {
        let (cells_y, cells_x) = (h / spec.cell, w / spec.cell);
        let block = spec.block.min(cells_y).min(cells_x);
        Layout {
            cells_y,
            cells_x,
            block,
            blocks_y: cells_y - block + 1,
            blocks_x: cells_x - block + 1,
        }
    }

    /// Cell indices of each block in descriptor order.
    fn block_cells(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for by in 0..self.blocks_y {
            for bx in 0..self.blocks_x {
                let mut cells = Vec::new();
                for dy in 0..self.block {
                    for dx in 0..self.block {
                        cells.push((by + dy) * self.cells_x + bx + dx);
                    }
                }
                out.push(cells);
            }
        }
        out
    }
}

/// Descriptor of a (channel-averaged) image.
pub fn hog(image: &Image, spec: &HogSpec) -> Result<Vec<f64>> {
    let gray = image.to_gray();
    let plane: Vec<f64> = gray.data.iter().map(|v| f64::from(*v)).collect();
    Ok(hog_plane(&plane, gray.height, gray.width, spec)?.0)
}

/// Descriptor of a single-channel plane plus the tape for backprop.
pub fn hog_plane(plane: &[f64], h: usize, w: usize, spec: &HogSpec) -> Result<(Vec<f64>, HogTape)> {
    spec.validate(h, w)?;
    if plane.len() != h * w {
        return Err(Error::DimensionMismatch(format!(
            "plane has {} values, expected {}",
            plane.len(),
            h * w
        )));
    }
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("HOG input".into()));
    }
    let at = |y: usize, x: usize| plane[y * w + x];
    let nb = spec.bins;
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut mag = vec![0.0; h * w];
    let mut weights = vec![0.0; h * w * nb];
    let mut dlogit = vec![0.0; h * w * nb];
    let layout = Layout::new(spec, h, w);
    let mut cells = vec![0.0; layout.cells_y * layout.cells_x * nb];
    let delta = spec.magnitude_delta;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let dy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            gx[i] = dx;
            gy[i] = dy;
            let g2 = dx * dx + dy * dy;
            mag[i] = (g2 + delta * delta).sqrt() - delta;
            let theta = dy.atan2(dx);
            let wts = &mut weights[i * nb..(i + 1) * nb];
            let dl = &mut dlogit[i * nb..(i + 1) * nb];
            // soft-max over logits kappa*cos(2(theta - c_k)): smooth and pi-periodic
            let mut max_logit = f64::NEG_INFINITY;
            for k in 0..nb {
                let a = 2.0 * (theta - spec.bin_center(k));
                wts[k] = spec.sharpness * a.cos();
                dl[k] = -2.0 * spec.sharpness * a.sin();
                max_logit = max_logit.max(wts[k]);
            }
            let mut sum = 0.0;
            for v in wts.iter_mut() {
                *v = (*v - max_logit).exp();
                sum += *v;
            }
            wts.iter_mut().for_each(|v| *v /= sum);
            let cell = (y / spec.cell) * layout.cells_x + x / spec.cell;
            for k in 0..nb {
                cells[cell * nb + k] += mag[i] * wts[k];
            }
        }
    }
    let mut desc = Vec::with_capacity(spec.descriptor_len(h, w));
    let mut blocks = Vec::new();
    let mut norms = Vec::new();
    for members in layout.block_cells() {
        let v: Vec<f64> = members
            .iter()
            .flat_map(|&c| cells[c * nb..(c + 1) * nb].iter().copied())
            .collect();
        let n = (v.iter().map(|x| x * x).sum::<f64>() + spec.epsilon * spec.epsilon).sqrt();
        desc.extend(v.iter().map(|x| x / n));
        blocks.push(v);
        norms.push(n);
    }
    let tape = HogTape {
        spec: spec.clone(),
        h,
        w,
        gx,
        gy,
        mag,
        weights,
        dlogit,
        blocks,
        norms,
    };
    Ok((desc, tape))
}

impl HogTape {
    /// Gradient of `sum(d_desc * descriptor)` with respect to the input plane.
    pub fn backward(&self, d_desc: &[f64]) -> Vec<f64> {
        let (h, w, nb) = (self.h, self.w, self.spec.bins);
        let layout = Layout::new(&self.spec, h, w);
        let mut d_cells = vec![0.0; layout.cells_y * layout.cells_x * nb];
        let stride = layout.block * layout.block * nb;
        for (bi, members) in layout.block_cells().iter().enumerate() {
            let g = &d_desc[bi * stride..(bi + 1) * stride];
            let v = &self.blocks[bi];
            let n = self.norms[bi];
            let dot: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum();
            for (j, &c) in members.iter().enumerate() {
                for k in 0..nb {
                    let idx = j * nb + k;
                    d_cells[c * nb + k] += (g[idx] - v[idx] * dot / (n * n)) / n;
                }
            }
        }
        let mut d_plane = vec![0.0; h * w];
        let delta = self.spec.magnitude_delta;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let cell = (y / self.spec.cell) * layout.cells_x + x / self.spec.cell;
                let dh = &d_cells[cell * nb..(cell + 1) * nb];
                let wts = &self.weights[i * nb..(i + 1) * nb];
                let dl = &self.dlogit[i * nb..(i + 1) * nb];
                let d_mag: f64 = dh.iter().zip(wts).map(|(a, b)| a * b).sum();
                let mean_dl: f64 = wts.iter().zip(dl).map(|(a, b)| a * b).sum();
                let d_theta: f64 = self.mag[i]
                    * dh
                        .iter()
                        .zip(wts)
                        .zip(dl)
                        .map(|((d, wk), l)| d * wk * (l - mean_dl))
                        .sum::<f64>();
                let (gx, gy) = (self.gx[i], self.gy[i]);
                let g2 = gx * gx + gy * gy;
                let rho = (g2 + delta * delta).sqrt();
                let (mut dgx, mut dgy) = (d_mag * gx / rho, d_mag * gy / rho);
                if g2 > 0.0 {
                    dgx += d_theta * (-gy / g2);
                    dgy += d_theta * (gx / g2);
                }
                d_plane[y * w + (x + 1).min(w - 1)] += dgx;
                d_plane[y * w + x.saturating_sub(1)] -= dgx;
                d_plane[(y + 1).min(h - 1) * w + x] += dgy;
                d_plane[y.saturating_sub(1) * w + x] -= dgy;
            }
        }
        d_plane
    }
}

/// Orientation histogram summed over all cells, before block normalization.
pub fn orientation_histogram(plane: &[f64], h: usize, w: usize, spec: &HogSpec) -> Result<Vec<f64>> {
    let (_, tape) = hog_plane(plane, h, w, spec)?;
    let nb = spec.bins;
    let mut out = vec![0.0; nb];
    for i in 0..h * w {
        for k in 0..nb {
            out[k] += tape.mag[i] * tape.weights[i * nb + k];
        }
    }
    Ok(out)
}
