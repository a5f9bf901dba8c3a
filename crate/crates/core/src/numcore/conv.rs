//! Convolution geometry and the im2col/col2im pair shared by forward
//! convolution and its transpose.

use serde::{Deserialize, Serialize};

use super::tensor::Real;

/// Geometry of a square-kernel convolution from an `h×w` input with `c`
/// channels to an `out_h×out_w` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Forward-convolution geometry; `None` if the kernel does not fit.
    pub fn forward(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint is a transposed convolution
    /// from `in_h×in_w` (with `c` output channels) to the returned `h×w`.
    pub fn transposed(
        c: usize,
        in_h: usize,
        in_w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Option<Self> {
        if stride == 0 || in_h == 0 || in_w == 0 || out_pad >= stride {
            return None;
        }
        let h = ((in_h - 1) * stride + k + out_pad).checked_sub(2 * pad)?;
        let w = ((in_w - 1) * stride + k + out_pad).checked_sub(2 * pad)?;
        let g = ConvGeom::forward(c, h, w, k, stride, pad)?;
        (g.out_h == in_h && g.out_w == in_w).then_some(g)
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// `cols[(c*k+ky)*k+kx, oy*out_w+ox] = x[c, oy*s+ky-p, ox*s+kx-p]`.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncol = self.col_cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        let drow = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds columns into `x`.
    pub fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncol = self.col_cols();
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_arithmetic() {
        let g = ConvGeom::forward(3, 32, 32, 5, 2, 2).unwrap();
        assert_eq!((g.out_h, g.out_w), (16, 16));
        let t = ConvGeom::transposed(8, 8, 8, 5, 2, 2, 1).unwrap();
        assert_eq!((t.h, t.w), (16, 16));
        let t = ConvGeom::transposed(8, 8, 8, 4, 2, 1, 0).unwrap();
        assert_eq!((t.h, t.w), (16, 16));
        assert!(ConvGeom::forward(1, 2, 2, 5, 1, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::forward(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.c * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
