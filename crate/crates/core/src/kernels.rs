//! Raw NHWC kernels shared by the tape's forward and backward passes.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-filled so the output is `ceil(input / stride)`.
    Same,
    Valid,
}

/// Resolved geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub fin: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(
        (h, w, fin): (usize, usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        padding: Padding,
    ) -> Option<Self> {
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return None;
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(sh);
                let ow = w.div_ceil(sw);
                let th = ((oh.saturating_sub(1)) * sh + kh).saturating_sub(h);
                let tw = ((ow.saturating_sub(1)) * sw + kw).saturating_sub(w);
                (oh, ow, th / 2, tw / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return None;
                }
                ((h - kh) / sh + 1, (w - kw) / sw + 1, 0, 0)
            }
        };
        Some(Self {
            h,
            w,
            fin,
            kh,
            kw,
            sh,
            sw,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.fin
    }

    /// A 1×1, stride-1 convolution reads its input directly as the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1
    }

    /// Fill `cols` (`oh·ow × patch_len`) from one image `x` (`h × w × fin`).
    pub fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plen = self.patch_len();
        let fin = self.fin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                    for kx in 0..self.kw {
                        let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                        let dst = &mut row[(ky * self.kw + kx) * fin..][..fin];
                        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                            dst.fill(T::zero());
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * fin;
                            dst.copy_from_slice(&x[src..src + fin]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add patch gradients back onto one image gradient `dx`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plen = self.patch_len();
        let fin = self.fin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = &row[(ky * self.kw + kx) * fin..][..fin];
                        let dst = &mut dx[(iy as usize * self.w + ix as usize) * fin..][..fin];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a whole batch. `w` is `(kh, kw, fin, fout)`.
pub fn conv_forward<T: Scalar>(
    geo: &ConvGeometry,
    batch: usize,
    fout: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_img = geo.h * geo.w * geo.fin;
    let pixels = geo.oh * geo.ow;
    let plen = geo.patch_len();
    let mut out = vec![T::zero(); batch * pixels * fout];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); pixels * plen]
    };
    for b in 0..batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let ob = &mut out[b * pixels * fout..(b + 1) * pixels * fout];
        if let Some(bias) = bias {
            for px in ob.chunks_exact_mut(fout) {
                px.copy_from_slice(bias);
            }
        }
        let a = if geo.is_pointwise() {
            xb
        } else {
            geo.im2col(xb, &mut cols);
            &cols[..]
        };
        T::gemm(pixels, plen, fout, T::one(), a, false, w, false, T::one(), ob);
    }
    out
}

/// Gradients of a batch convolution. Each requested output is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    geo: &ConvGeometry,
    batch: usize,
    fout: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_img = geo.h * geo.w * geo.fin;
    let pixels = geo.oh * geo.ow;
    let plen = geo.patch_len();
    let pointwise = geo.is_pointwise();
    let mut cols = if pointwise || dw.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); pixels * plen]
    };
    let mut dcols = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); pixels * plen]
    };
    for b in 0..batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let dyb = &dy[b * pixels * fout..(b + 1) * pixels * fout];
        if let Some(db) = db.as_deref_mut() {
            for px in dyb.chunks_exact(fout) {
                for (d, g) in db.iter_mut().zip(px) {
                    *d += *g;
                }
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let a = if pointwise {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols[..]
            };
            T::gemm(plen, pixels, fout, T::one(), a, true, dyb, false, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_img..(b + 1) * in_img];
            if pointwise {
                T::gemm(pixels, fout, plen, T::one(), dyb, false, w, true, T::one(), dxb);
            } else {
                T::gemm(pixels, fout, plen, T::one(), dyb, false, w, true, T::zero(), &mut dcols);
                geo.col2im(&dcols, dxb);
            }
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(-|x|))` without overflow.
#[inline]
pub fn log1p_exp_neg_abs<T: Scalar>(x: T) -> T {
    (-x.abs()).exp().ln_1p()
}
