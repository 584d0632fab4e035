//! Strided 5×5 convolution geometry shared by the downsampling convolution
//! and its adjoint, the transposed convolution.
//!
//! Padding follows the "same" convention: the small side has
//! `ceil(big / 2)` samples and the total padding is split with the extra
//! pixel on the trailing edge.

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub big: (usize, usize),
    pub small: (usize, usize),
    pad: (usize, usize),
}

fn same_pad(big: usize, small: usize) -> usize {
    let needed = (small - 1) * STRIDE + KERNEL;
    needed.saturating_sub(big) / 2
}

impl ConvGeom {
    pub fn new(big: (usize, usize), small: (usize, usize)) -> Self {
        debug_assert_eq!(big.0.div_ceil(2), small.0);
        debug_assert_eq!(big.1.div_ceil(2), small.1);
        ConvGeom {
            big,
            small,
            pad: (same_pad(big.0, small.0), same_pad(big.1, small.1)),
        }
    }

    pub fn small_len(&self) -> usize {
        self.small.0 * self.small.1
    }

    pub fn big_len(&self) -> usize {
        self.big.0 * self.big.1
    }

    /// Unfolds `channels` planes of the big map into `[channels*25, small_len]`.
    pub fn im2col(&self, x: &[f32], channels: usize, col: &mut [f32]) {
        let (bh, bw) = self.big;
        let (sh, sw) = self.small;
        let sl = self.small_len();
        debug_assert_eq!(x.len(), channels * bh * bw);
        debug_assert_eq!(col.len(), channels * TAPS * sl);
        for c in 0..channels {
            let plane = &x[c * bh * bw..(c + 1) * bh * bw];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (c * TAPS + ky * KERNEL + kx) * sl;
                    let dst = &mut col[row..row + sl];
                    for oy in 0..sh {
                        let iy = (oy * STRIDE + ky) as isize - self.pad.0 as isize;
                        let line = &mut dst[oy * sw..(oy + 1) * sw];
                        if iy < 0 || iy >= bh as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * bw..(iy as usize + 1) * bw];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * STRIDE + kx) as isize - self.pad.1 as isize;
                            *d = if ix < 0 || ix >= bw as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back, accumulating into `x`.
    pub fn col2im(&self, col: &[f32], channels: usize, x: &mut [f32]) {
        let (bh, bw) = self.big;
        let (sh, sw) = self.small;
        let sl = self.small_len();
        for c in 0..channels {
            let plane = &mut x[c * bh * bw..(c + 1) * bh * bw];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (c * TAPS + ky * KERNEL + kx) * sl;
                    let src = &col[row..row + sl];
                    for oy in 0..sh {
                        let iy = (oy * STRIDE + ky) as isize - self.pad.0 as isize;
                        if iy < 0 || iy >= bh as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * bw..(iy as usize + 1) * bw];
                        for ox in 0..sw {
                            let ix = (ox * STRIDE + kx) as isize - self.pad.1 as isize;
                            if ix >= 0 && ix < bw as isize {
                                dst[ix as usize] += src[oy * sw + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = beta*c + op(a) * op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_matches_tf_convention() {
        let g = ConvGeom::new((16, 16), (8, 8));
        assert_eq!(g.pad, (1, 1));
        let g = ConvGeom::new((75, 100), (38, 50));
        assert_eq!(g.pad, (2, 1));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new((7, 10), (4, 5));
        let ch = 2;
        let x: Vec<f32> = (0..ch * 70).map(|i| ((i * 37 % 11) as f32) - 5.0).collect();
        let y: Vec<f32> = (0..ch * 25 * 20).map(|i| ((i * 13 % 7) as f32) - 3.0).collect();
        let mut col = vec![0.0; y.len()];
        g.im2col(&x, ch, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| f64::from(a * b)).sum();
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, ch, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| f64::from(a * b)).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
