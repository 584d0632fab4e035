//! Small raster plots written next to their CSV data. There is no text; the
//! CSV carries the numbers and the PNG shows the shape.

use branchgan::Image;

const W: usize = 480;
const H: usize = 320;
const MARGIN: usize = 24;

/// Distinct series colors.
const PALETTE: [[f32; 3]; 8] = [
    [0.12, 0.47, 0.71],
    [1.0, 0.5, 0.05],
    [0.17, 0.63, 0.17],
    [0.84, 0.15, 0.16],
    [0.58, 0.4, 0.74],
    [0.55, 0.34, 0.29],
    [0.89, 0.47, 0.76],
    [0.5, 0.5, 0.5],
];

struct Canvas {
    im: Image,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Canvas {
            im: Image::filled(3, H, W, 1.0),
        };
        let axis = [0.2; 3];
        c.line((MARGIN as f64, MARGIN as f64), (MARGIN as f64, (H - MARGIN) as f64), axis);
        c.line(
            (MARGIN as f64, (H - MARGIN) as f64),
            ((W - MARGIN) as f64, (H - MARGIN) as f64),
            axis,
        );
        c
    }

    fn dot(&mut self, x: i64, y: i64, rgb: [f32; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            for (ch, v) in rgb.iter().enumerate() {
                self.im.set(ch, y as usize, x as usize, *v);
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), rgb: [f32; 3]) {
        let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let x = a.0 + (b.0 - a.0) * t;
            let y = a.1 + (b.1 - a.1) * t;
            self.dot(x.round() as i64, y.round() as i64, rgb);
        }
    }

    fn rect(&mut self, x0: f64, x1: f64, y0: f64, y1: f64, rgb: [f32; 3]) {
        for x in x0.round() as i64..=x1.round() as i64 {
            for y in y0.min(y1).round() as i64..=y0.max(y1).round() as i64 {
                self.dot(x, y, rgb);
            }
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn to_px(v: f64, (lo, hi): (f64, f64), len: usize) -> f64 {
    (v - lo) / (hi - lo) * (len - 2 * MARGIN) as f64
}

/// One polyline per series, x given by index.
pub fn lines(series: &[Vec<f64>]) -> Image {
    let mut c = Canvas::new();
    let yr = range(series.iter().flatten().copied());
    let n = series.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let xr = (0.0, (n - 1) as f64);
    for (k, s) in series.iter().enumerate() {
        let rgb = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| {
                (
                    MARGIN as f64 + to_px(i as f64, xr, W),
                    (H - MARGIN) as f64 - to_px(*v, yr, H),
                )
            })
            .collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], rgb);
        }
        if let [p] = pts.as_slice() {
            c.dot(p.0 as i64, p.1 as i64, rgb);
        }
    }
    c.im
}

/// Histograms of several populations over a shared range, overlaid as outlines.
pub fn histograms(populations: &[Vec<f64>], bins: usize) -> Image {
    let mut c = Canvas::new();
    let xr = range(populations.iter().flatten().copied());
    let counts: Vec<Vec<f64>> = populations
        .iter()
        .map(|p| {
            let mut h = vec![0.0; bins];
            for v in p.iter().filter(|v| v.is_finite()) {
                let b = (((v - xr.0) / (xr.1 - xr.0)) * bins as f64).floor() as usize;
                h[b.min(bins - 1)] += 1.0 / p.len().max(1) as f64;
            }
            h
        })
        .collect();
    let yr = (0.0, counts.iter().flatten().copied().fold(1e-12, f64::max));
    let bw = (W - 2 * MARGIN) as f64 / bins as f64;
    for (k, h) in counts.iter().enumerate() {
        let rgb = PALETTE[k % PALETTE.len()];
        for (b, v) in h.iter().enumerate() {
            let x0 = MARGIN as f64 + b as f64 * bw;
            let top = (H - MARGIN) as f64 - to_px(*v, yr, H);
            c.line((x0, top), (x0 + bw, top), rgb);
            if populations.len() == 1 {
                c.rect(x0 + 1.0, x0 + bw - 1.0, top, (H - MARGIN) as f64 - 1.0, rgb);
            }
        }
    }
    c.im
}
