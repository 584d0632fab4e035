//! Frequency-band analysis: DFT band filtering, variance by scale (VBS),
//! dominant-scale labeling and per-pixel variance images.
//!
//! Frequencies are radial and normalized so that Nyquist along an axis is
//! 1.0: coefficient `(u, v)` of an `H × W` plane (signed indices) sits at
//! `r = 2 * sqrt((u/H)^2 + (v/W)^2)`. A band `(lo, hi]` keeps coefficients
//! with `lo < r <= hi`; the DC term belongs to bands starting at 0, and
//! bands ending at 1.0 also take the diagonal corners with `r > 1`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::latent::{uniform_sym, BranchedLatent, SamplePolicy};
use crate::networks::Generator;
use crate::rng;

/// Ordered partition of the normalized frequency axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub bands: Vec<(f64, f64)>,
}

impl Default for BandSpec {
    fn default() -> Self {
        BandSpec::five_band()
    }
}

impl BandSpec {
    /// (0,1/16], (1/16,1/8], (1/8,1/4], (1/4,1/2], (1/2,1].
    pub fn five_band() -> Self {
        BandSpec {
            bands: vec![
                (0.0, 1.0 / 16.0),
                (1.0 / 16.0, 1.0 / 8.0),
                (1.0 / 8.0, 1.0 / 4.0),
                (1.0 / 4.0, 1.0 / 2.0),
                (1.0 / 2.0, 1.0),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    /// The bands must be contiguous, start at 0 and end at 1.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("band spec: {m}")));
        let Some(first) = self.bands.first() else {
            return bad("no bands");
        };
        if first.0 != 0.0 {
            return bad("first band must start at 0");
        }
        if self.bands.last().map(|b| b.1) != Some(1.0) {
            return bad("last band must end at 1");
        }
        for w in self.bands.windows(2) {
            if w[0].1 != w[1].0 {
                return bad("bands must be contiguous");
            }
        }
        if self.bands.iter().any(|(lo, hi)| !(lo < hi)) {
            return bad("every band needs lo < hi");
        }
        Ok(())
    }

    /// Index of the band holding radial frequency `r`.
    pub fn band_of(&self, r: f64) -> Option<usize> {
        self.bands.iter().position(|&(lo, hi)| in_band(r, lo, hi))
    }
}

pub(crate) fn in_band(r: f64, lo: f64, hi: f64) -> bool {
    if r == 0.0 {
        return lo == 0.0;
    }
    r > lo && (r <= hi || hi >= 1.0)
}

/// Normalized radial frequency of DFT bin `(row, col)` in an `h × w` plane.
pub fn radial_frequency(row: usize, col: usize, h: usize, w: usize) -> f64 {
    let signed = |k: usize, n: usize| -> f64 {
        if k <= n / 2 {
            k as f64
        } else {
            k as f64 - n as f64
        }
    };
    let fu = signed(row, h) / h as f64;
    let fv = signed(col, w) / w as f64;
    2.0 * (fu * fu + fv * fv).sqrt()
}

/// Cached forward/inverse plans for one plane size.
pub struct Fft2d {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2d {
    pub fn new(h: usize, w: usize) -> Self {
        let mut p = FftPlanner::new();
        Fft2d {
            h,
            w,
            row_fwd: p.plan_fft_forward(w),
            row_inv: p.plan_fft_inverse(w),
            col_fwd: p.plan_fft_forward(h),
            col_inv: p.plan_fft_inverse(h),
        }
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for line in buf.chunks_mut(w) {
            rows.process(line);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            cols.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
    }

    pub fn forward(&self, plane: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut buf, false);
        buf
    }

    /// Inverse transform including the 1/(h*w) normalization; returns the real part.
    pub fn inverse_real(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.run(&mut spec, true);
        let k = 1.0 / (self.h * self.w) as f64;
        spec.iter().map(|c| c.re * k).collect()
    }
}

/// Per-plane band filter bank: computes every band of a plane from one forward DFT.
pub struct BandFilterBank {
    fft: Fft2d,
    /// Band index of every DFT bin.
    assignment: Vec<usize>,
    bands: usize,
}

impl BandFilterBank {
    pub fn new(h: usize, w: usize, spec: &BandSpec) -> Result<Self> {
        spec.validate()?;
        let mut assignment = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                let r = radial_frequency(row, col, h, w);
                assignment.push(spec.band_of(r).expect("partition covers every bin"));
            }
        }
        Ok(BandFilterBank {
            fft: Fft2d::new(h, w),
            assignment,
            bands: spec.len(),
        })
    }

    /// One filtered plane per band.
    pub fn decompose_plane(&self, plane: &[f64]) -> Vec<Vec<f64>> {
        let spec = self.fft.forward(plane);
        (0..self.bands)
            .map(|b| {
                let masked = spec
                    .iter()
                    .zip(&self.assignment)
                    .map(|(c, &a)| if a == b { *c } else { Complex64::new(0.0, 0.0) })
                    .collect();
                self.fft.inverse_real(masked)
            })
            .collect()
    }

    /// One filtered `C×H×W` map per band.
    pub fn decompose(&self, image: &Image) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::with_capacity(image.data.len()); self.bands];
        for c in 0..image.channels {
            let plane: Vec<f64> = image.plane(c).iter().map(|v| f64::from(*v)).collect();
            for (dst, band) in out.iter_mut().zip(self.decompose_plane(&plane)) {
                dst.extend(band);
            }
        }
        out
    }
}

/// Keeps only the frequencies in `(f_lo, f_hi]`; returns the real `C×H×W` map.
pub fn band_filter(image: &Image, f_lo: f64, f_hi: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&f_lo) || !(f_lo < f_hi && f_hi <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "band ({f_lo}, {f_hi}] must satisfy 0 <= lo < hi <= 1"
        )));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("band_filter input".into()));
    }
    let (h, w) = image.resolution();
    let fft = Fft2d::new(h, w);
    let mut out = Vec::with_capacity(image.data.len());
    for c in 0..image.channels {
        let plane: Vec<f64> = image.plane(c).iter().map(|v| f64::from(*v)).collect();
        let mut spec = fft.forward(&plane);
        for row in 0..h {
            for col in 0..w {
                if !in_band(radial_frequency(row, col, h, w), f_lo, f_hi) {
                    spec[row * w + col] = Complex64::new(0.0, 0.0);
                }
            }
        }
        out.extend(fft.inverse_real(spec));
    }
    Ok(out)
}

/// Anything that renders latents into images.
pub trait ImageModel {
    fn net_config(&self) -> &NetConfig;
    fn render(&self, zs: &[BranchedLatent]) -> Result<Vec<Image>>;
}

impl ImageModel for Generator {
    fn net_config(&self) -> &NetConfig {
        crate::networks::Network::config(self)
    }

    fn render(&self, zs: &[BranchedLatent]) -> Result<Vec<Image>> {
        self.generate_batch(zs)
    }
}

/// Which latent coordinates a VBS value measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum VbsTarget {
    /// One coordinate of the flattened latent.
    Dimension(usize),
    Subvector(usize),
}

impl VbsTarget {
    fn key(self) -> u64 {
        match self {
            VbsTarget::Dimension(d) => d as u64,
            VbsTarget::Subvector(t) => (1 << 32) | t as u64,
        }
    }

    /// Flat coordinate indices covered by the target.
    pub fn coordinates(self, config: &NetConfig) -> Result<std::ops::Range<usize>> {
        match self {
            VbsTarget::Dimension(d) if d < config.latent_dim() => Ok(d..d + 1),
            VbsTarget::Dimension(d) => Err(Error::IndexOutOfRange {
                index: d,
                len: config.latent_dim(),
            }),
            VbsTarget::Subvector(t) if t < config.branch_count() => {
                let start = config.subvector_offsets()[t];
                Ok(start..start + config.subvector_dims[t])
            }
            VbsTarget::Subvector(t) => Err(Error::IndexOutOfRange {
                index: t,
                len: config.branch_count(),
            }),
        }
    }

    pub fn label(self) -> String {
        match self {
            VbsTarget::Dimension(d) => format!("dim{d}"),
            VbsTarget::Subvector(t) => format!("z{t}"),
        }
    }
}

/// Sampling controls for one VBS evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VbsSampling {
    pub n_samples: usize,
    pub seed: u64,
    /// Target coordinates are drawn from U(-range, range).
    pub range: f32,
}

impl VbsSampling {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        VbsSampling {
            n_samples,
            seed,
            range: 1.0,
        }
    }
}

const RENDER_CHUNK: usize = 64;

/// Raw V for every band of `bank`: the per-element population standard
/// deviation of the band-filtered output, summed over height, width and depth.
pub fn vbs_raw_bands<M: ImageModel + ?Sized>(
    model: &M,
    bank: &BandFilterBank,
    target: VbsTarget,
    constant: &BranchedLatent,
    sampling: VbsSampling,
) -> Result<Vec<f64>> {
    let config = model.net_config();
    if sampling.n_samples < 2 {
        return Err(Error::InvalidConfig("VBS needs at least 2 samples".into()));
    }
    let coords = target.coordinates(config)?;
    constant.validate(config)?;
    let base = constant.flatten();
    let mut r = rng::rng(sampling.seed, &[0x7b5, target.key()]);

    let mut count = 0usize;
    let mut mean: Vec<Vec<f64>> = Vec::new();
    let mut m2: Vec<Vec<f64>> = Vec::new();
    let mut remaining = sampling.n_samples;
    while remaining > 0 {
        let n = remaining.min(RENDER_CHUNK);
        remaining -= n;
        let zs = (0..n)
            .map(|_| {
                let mut flat = base.clone();
                for i in coords.clone() {
                    flat[i] = uniform_sym(&mut r, sampling.range);
                }
                BranchedLatent::from_flat(config, &flat)
            })
            .collect::<Result<Vec<_>>>()?;
        for im in model.render(&zs)? {
            let maps = bank.decompose(&im);
            if mean.is_empty() {
                mean = maps.iter().map(|m| vec![0.0; m.len()]).collect();
                m2 = mean.clone();
            }
            count += 1;
            let k = count as f64;
            for ((map, mu), s) in maps.iter().zip(&mut mean).zip(&mut m2) {
                for ((x, mu), s) in map.iter().zip(mu.iter_mut()).zip(s.iter_mut()) {
                    let d = x - *mu;
                    *mu += d / k;
                    *s += d * (x - *mu);
                }
            }
        }
    }
    let n = count as f64;
    Ok(m2
        .iter()
        .map(|s| s.iter().map(|v| (v.max(0.0) / n).sqrt()).sum())
        .collect())
}

/// Raw V of `target` in a single band `(f_lo, f_hi]`.
pub fn vbs_raw<M: ImageModel + ?Sized>(
    model: &M,
    target: VbsTarget,
    constant: &BranchedLatent,
    band: (f64, f64),
    sampling: VbsSampling,
) -> Result<f64> {
    let (h, w) = model
        .render(std::slice::from_ref(constant))?
        .first()
        .map(Image::resolution)
        .ok_or_else(|| Error::DimensionMismatch("model rendered nothing".into()))?;
    // two-band partition whose first band is the requested one
    let (lo, hi) = band;
    let spec = if lo == 0.0 {
        if hi >= 1.0 {
            BandSpec { bands: vec![(0.0, 1.0)] }
        } else {
            BandSpec {
                bands: vec![(0.0, hi), (hi, 1.0)],
            }
        }
    } else if hi >= 1.0 {
        BandSpec {
            bands: vec![(0.0, lo), (lo, 1.0)],
        }
    } else {
        BandSpec {
            bands: vec![(0.0, lo), (lo, hi), (hi, 1.0)],
        }
    };
    let idx = spec.bands.iter().position(|b| b.0 == lo).expect("band present");
    let bank = BandFilterBank::new(h, w, &spec)?;
    Ok(vbs_raw_bands(model, &bank, target, constant, sampling)?[idx])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VbsMeta {
    pub n_constants: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// What the normalizing expectation averages over.
    pub cohort: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VbsReport {
    pub targets: Vec<VbsTarget>,
    pub bands: BandSpec,
    /// `raw[target][band]`, averaged over constants.
    pub raw: Vec<Vec<f64>>,
    /// `raw / cohort_mean`; `None` where the band is undefined.
    pub normalized: Vec<Vec<Option<f64>>>,
    pub cohort_mean: Vec<f64>,
    /// Bands whose cohort mean is zero or non-finite.
    pub undefined_bands: Vec<usize>,
    /// `per_constant[constant][target][band]` raw values (histogram mode).
    pub per_constant: Option<Vec<Vec<Vec<f64>>>>,
    pub meta: VbsMeta,
}

/// Options for [`vbs_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct VbsReportOptions {
    pub n_constants: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub keep_per_constant: bool,
}

impl Default for VbsReportOptions {
    fn default() -> Self {
        VbsReportOptions {
            n_constants: 8,
            n_samples: 16,
            seed: 0,
            keep_per_constant: false,
        }
    }
}

/// Every single coordinate of the latent.
pub fn dimension_targets(config: &NetConfig) -> Vec<VbsTarget> {
    (0..config.latent_dim()).map(VbsTarget::Dimension).collect()
}

pub fn subvector_targets(config: &NetConfig) -> Vec<VbsTarget> {
    (0..config.branch_count()).map(VbsTarget::Subvector).collect()
}

/// Computes normalized VBS for each target in each band.
///
/// Constants `c ~ U(-1, 1)` are shared across targets; raw values are
/// averaged over constants and divided by their mean over the target cohort.
pub fn vbs_report<M: ImageModel + ?Sized>(
    model: &M,
    targets: &[VbsTarget],
    bands: &BandSpec,
    opts: &VbsReportOptions,
) -> Result<VbsReport> {
    if targets.is_empty() {
        return Err(Error::InvalidConfig("VBS report needs at least one target".into()));
    }
    if opts.n_constants == 0 {
        return Err(Error::InvalidConfig("VBS report needs at least one constant".into()));
    }
    let config = model.net_config().clone();
    for t in targets {
        t.coordinates(&config)?;
    }
    let policy = SamplePolicy::uniform(config.branch_count());
    let constants: Vec<BranchedLatent> = (0..opts.n_constants)
        .map(|i| {
            let mut r = rng::rng(opts.seed, &[0xc0, i as u64]);
            policy.sample_with(&config, &mut r)
        })
        .collect();
    let (h, w) = model
        .render(&constants[..1])?
        .first()
        .map(Image::resolution)
        .ok_or_else(|| Error::DimensionMismatch("model rendered nothing".into()))?;
    let bank = BandFilterBank::new(h, w, bands)?;

    let mut per_constant = Vec::with_capacity(opts.n_constants);
    for (i, c) in constants.iter().enumerate() {
        let row = targets
            .iter()
            .map(|&t| {
                let sampling = VbsSampling::new(opts.n_samples, rng::derive(opts.seed, &[0x5a, i as u64]));
                vbs_raw_bands(model, &bank, t, c, sampling)
            })
            .collect::<Result<Vec<_>>>()?;
        per_constant.push(row);
    }

    let nb = bands.len();
    let raw: Vec<Vec<f64>> = (0..targets.len())
        .map(|t| {
            (0..nb)
                .map(|b| per_constant.iter().map(|c| c[t][b]).sum::<f64>() / opts.n_constants as f64)
                .collect()
        })
        .collect();
    let cohort_mean: Vec<f64> = (0..nb)
        .map(|b| raw.iter().map(|r| r[b]).sum::<f64>() / targets.len() as f64)
        .collect();
    let undefined_bands: Vec<usize> = cohort_mean
        .iter()
        .enumerate()
        .filter(|(_, m)| !(m.is_finite() && **m > 0.0))
        .map(|(b, _)| b)
        .collect();
    let normalized = raw
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(b, v)| (!undefined_bands.contains(&b)).then(|| v / cohort_mean[b]))
                .collect()
        })
        .collect();
    let cohort = match targets[0] {
        VbsTarget::Dimension(_) => "report targets (single dimensions)",
        VbsTarget::Subvector(_) => "report targets (sub-vectors)",
    };
    Ok(VbsReport {
        targets: targets.to_vec(),
        bands: bands.clone(),
        raw,
        normalized,
        cohort_mean,
        undefined_bands,
        per_constant: opts.keep_per_constant.then_some(per_constant),
        meta: VbsMeta {
            n_constants: opts.n_constants,
            n_samples: opts.n_samples,
            seed: opts.seed,
            cohort: cohort.into(),
        },
    })
}

impl VbsReport {
    fn target_index(&self, target: VbsTarget) -> Result<usize> {
        self.targets
            .iter()
            .position(|t| *t == target)
            .ok_or_else(|| Error::InvalidConfig(format!("target {target:?} not in report")))
    }

    /// Band with the largest normalized VBS; ties go to the lower-frequency band.
    pub fn dominant_scale(&self, target: VbsTarget) -> Result<usize> {
        if !self.undefined_bands.is_empty() {
            return Err(Error::UndefinedNormalization(self.undefined_bands.clone()));
        }
        let row = &self.normalized[self.target_index(target)?];
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (b, v) in row.iter().enumerate() {
            let v = v.expect("defined band");
            if v > best_v {
                best = b;
                best_v = v;
            }
        }
        Ok(best)
    }

    /// Per-constant normalized values of one band (the histogram population).
    pub fn normalized_samples(&self, band: usize) -> Option<Vec<f64>> {
        let pc = self.per_constant.as_ref()?;
        if self.undefined_bands.contains(&band) {
            return None;
        }
        let m = self.cohort_mean[band];
        Some(pc.iter().flat_map(|c| c.iter().map(move |t| t[band] / m)).collect())
    }

    /// Spread of the normalized VBS distribution: the population variance of
    /// the normalized values in each band, averaged over bands. Uses the
    /// per-constant samples when the report kept them.
    pub fn spread(&self) -> Result<f64> {
        if !self.undefined_bands.is_empty() {
            return Err(Error::UndefinedNormalization(self.undefined_bands.clone()));
        }
        let nb = self.bands.len();
        let mut total = 0.0;
        for b in 0..nb {
            let vals = self
                .normalized_samples(b)
                .unwrap_or_else(|| self.normalized.iter().map(|r| r[b].expect("defined band")).collect());
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        }
        Ok(total / nb as f64)
    }

    /// Mean of normalized values over the cohort, per band (1 by construction).
    pub fn cohort_normalized_mean(&self) -> Vec<Option<f64>> {
        (0..self.bands.len())
            .map(|b| {
                let vals: Option<Vec<f64>> = self.normalized.iter().map(|r| r[b]).collect();
                vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }

    /// One row per target: label, then raw and normalized values per band.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target");
        for b in 0..self.bands.len() {
            out.push_str(&format!(",raw_b{b}"));
        }
        for b in 0..self.bands.len() {
            out.push_str(&format!(",norm_b{b}"));
        }
        out.push('\n');
        for (t, target) in self.targets.iter().enumerate() {
            out.push_str(&target.label());
            for v in &self.raw[t] {
                out.push_str(&format!(",{v}"));
            }
            for v in &self.normalized[t] {
                match v {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push_str(",undefined"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Histogram-mode rows: constant, target, band, raw, normalized.
    pub fn samples_csv(&self) -> Option<String> {
        let pc = self.per_constant.as_ref()?;
        let mut out = String::from("constant,target,band,raw,normalized\n");
        for (c, row) in pc.iter().enumerate() {
            for (t, vals) in row.iter().enumerate() {
                for (b, v) in vals.iter().enumerate() {
                    let norm = if self.undefined_bands.contains(&b) {
                        "undefined".to_string()
                    } else {
                        format!("{}", v / self.cohort_mean[b])
                    };
                    out.push_str(&format!("{c},{},{b},{v},{norm}\n", self.targets[t].label()));
                }
            }
        }
        Some(out)
    }
}

/// Per-pixel variance over an image set, channel-averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Maximum value, used to scale the 8-bit rendering.
    pub display_max: f64,
}

impl VarianceImage {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// 8-bit rendering scaled so the maximum maps to white (all black for a zero map).
    pub fn display(&self) -> Image {
        let data = self
            .values
            .iter()
            .map(|v| if self.display_max > 0.0 { (v / self.display_max) as f32 } else { 0.0 })
            .collect();
        Image::new(1, self.height, self.width, data)
    }
}

pub fn variance_image(images: &[Image]) -> Result<VarianceImage> {
    if images.len() < 2 {
        return Err(Error::InvalidConfig("variance image needs at least 2 images".into()));
    }
    let first = &images[0];
    if images
        .iter()
        .any(|i| (i.channels, i.height, i.width) != (first.channels, first.height, first.width))
    {
        return Err(Error::DimensionMismatch("variance image inputs differ in shape".into()));
    }
    let n = images.len() as f64;
    let plane = first.height * first.width;
    let mut values = vec![0.0; plane];
    for c in 0..first.channels {
        for (p, out) in values.iter_mut().enumerate() {
            let mean = images.iter().map(|im| f64::from(im.plane(c)[p])).sum::<f64>() / n;
            let var = images
                .iter()
                .map(|im| {
                    let d = f64::from(im.plane(c)[p]) - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            *out += var / first.channels as f64;
        }
    }
    let display_max = values.iter().copied().fold(0.0, f64::max);
    Ok(VarianceImage {
        height: first.height,
        width: first.width,
        values,
        display_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng::rng(seed, &[]);
        Image::new(c, h, w, (0..c * h * w).map(|_| r.random::<f32>()).collect())
    }

    #[test]
    fn five_band_spec_is_a_partition() {
        let s = BandSpec::five_band();
        s.validate().unwrap();
        assert_eq!(s.band_of(0.0), Some(0));
        assert_eq!(s.band_of(1.0 / 16.0), Some(0));
        assert_eq!(s.band_of(0.07), Some(1));
        assert_eq!(s.band_of(1.3), Some(4));
        let broken = BandSpec {
            bands: vec![(0.0, 0.25), (0.3, 1.0)],
        };
        assert!(broken.validate().is_err());
    }

    #[test]
    fn bands_sum_to_original() {
        let im = random_image(3, 32, 32, 1);
        let spec = BandSpec::five_band();
        let mut acc = vec![0.0; im.data.len()];
        for (lo, hi) in &spec.bands {
            for (a, v) in acc.iter_mut().zip(band_filter(&im, *lo, *hi).unwrap()) {
                *a += v;
            }
        }
        let err: f64 = acc.iter().zip(&im.data).map(|(a, b)| (a - f64::from(*b)).powi(2)).sum();
        let norm: f64 = im.data.iter().map(|v| f64::from(*v).powi(2)).sum();
        assert!((err / norm).sqrt() < 1e-10);
    }

    #[test]
    fn constant_image_lives_in_dc_band() {
        let im = Image::filled(1, 16, 16, 0.3);
        let low = band_filter(&im, 0.0, 1.0 / 16.0).unwrap();
        assert!(low.iter().all(|v| (v - f64::from(0.3f32)).abs() < 1e-12));
        for (lo, hi) in BandSpec::five_band().bands.iter().skip(1) {
            assert!(band_filter(&im, *lo, *hi).unwrap().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn band_filter_rejects_bad_inputs() {
        let im = Image::filled(1, 4, 4, 0.3);
        assert!(band_filter(&im, 0.5, 0.25).is_err());
        let mut nan = im.clone();
        nan.data[0] = f32::NAN;
        assert!(matches!(band_filter(&nan, 0.0, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn variance_image_locality() {
        let a = random_image(3, 8, 8, 2);
        let z = variance_image(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));
        assert!(z.display().data.iter().all(|v| *v == 0.0));
        let mut b = a.clone();
        b.set(1, 3, 4, b.get(1, 3, 4) + 0.5);
        let v = variance_image(&[a.clone(), b]).unwrap();
        for (i, val) in v.values.iter().enumerate() {
            if i == 3 * 8 + 4 {
                // var of {x, x+0.5} = 0.0625, averaged over 3 channels
                assert!((val - 0.0625 / 3.0).abs() < 1e-7);
            } else {
                assert_eq!(*val, 0.0);
            }
        }
        assert!(variance_image(std::slice::from_ref(&a)).is_err());
        assert!(variance_image(&[a, Image::filled(3, 4, 4, 0.0)]).is_err());
    }
}
