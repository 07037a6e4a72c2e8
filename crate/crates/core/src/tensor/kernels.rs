//! Loop kernels shared by the forward and backward passes.

use crate::Scalar;

/// Geometry of a stride-1 2-D convolution over `[n, c, h, w]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    pub fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one image into a `[c*kh*kw, oh*ow]` column matrix.
pub(crate) fn im2col<S: Scalar>(img: &[S], g: &ConvGeom, cols: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    let pad = g.pad as isize;
    for ci in 0..g.in_ch {
        let plane = &img[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kj as isize - pad;
                        *out = if ix < 0 || ix >= g.width as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, img: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    let pad = g.pad as isize;
    for ci in 0..g.in_ch {
        let plane = &mut img[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = oy as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = ox as isize + kj as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `[planes, h, w]`; odd trailing rows and
/// columns are dropped. Returns the pooled values and the flat source index
/// of each maximum (first occurrence on ties).
pub(crate) fn max_pool2<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize) -> (Vec<S>, Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ph * pw);
    let mut arg = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..ph {
            for xo in 0..pw {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Row-wise log-sum-exp restricted to `mask` (all entries when `None`).
pub(crate) fn row_logsumexp<S: Scalar>(row: &[S], mask: Option<&[bool]>) -> Option<S> {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut mx = S::neg_infinity();
    let mut any = false;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) {
            any = true;
            if v > mx {
                mx = v;
            }
        }
    }
    if !any {
        return None;
    }
    let mut acc = S::zero();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) {
            acc += (v - mx).exp();
        }
    }
    Some(mx + acc.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 1,
            in_ch: 2,
            height: 4,
            width: 5,
            out_ch: 1,
            kh: 3,
            kw: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch() * g.out_pixels())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_picks_first_max() {
        let x = [1.0f32, 1.0, 0.0, 1.0];
        let (v, a) = max_pool2(&x, 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
