//! Raw compute kernels on contiguous buffers.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible.

use super::Element;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.group_in() == 1 && self.group_out() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch(&self) -> usize {
        self.group_in() * self.kernel_h * self.kernel_w
    }
}

/// Unfold channels `c0..c0+cg` of one image into a `[cg*kh*kw, ho*wo]` matrix.
fn im2col<T: Element>(g: &ConvGeom, image: &[T], c0: usize, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let mut row = 0;
    for c in c0..c0 + g.group_in() {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            src[iy as usize * g.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a column matrix back, accumulating into channels `c0..c0+cg` of one image.
fn col2im<T: Element>(g: &ConvGeom, cols: &[T], c0: usize, image: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let mut row = 0;
    for c in c0..c0 + g.group_in() {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        let d = &mut dst[iy as usize * g.width + ix as usize];
                        *d = *d + src[oy * wo + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let out_plane = ho * wo;
    let in_image = g.in_channels * g.height * g.width;
    let out_image = g.out_channels * out_plane;
    let mut out = vec![T::zero(); g.batch * out_image];

    if g.is_depthwise() {
        let kk = g.kernel_h * g.kernel_w;
        for b in 0..g.batch {
            for c in 0..g.in_channels {
                let src = &x[b * in_image + c * g.height * g.width..][..g.height * g.width];
                let dst = &mut out[b * out_image + c * out_plane..][..out_plane];
                let k = &w[c * kk..(c + 1) * kk];
                depthwise_plane(g, src, k, dst);
            }
        }
    } else {
        let patch = g.patch();
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); patch * out_plane]
        };
        for b in 0..g.batch {
            let image = &x[b * in_image..(b + 1) * in_image];
            for grp in 0..g.groups {
                let c0 = grp * g.group_in();
                let rhs: &[T] = if g.is_pointwise() {
                    &image[c0 * out_plane..(c0 + g.group_in()) * out_plane]
                } else {
                    im2col(g, image, c0, &mut cols);
                    &cols
                };
                let o0 = grp * g.group_out();
                let lhs = &w[o0 * patch..(o0 + g.group_out()) * patch];
                let dst = &mut out[b * out_image + o0 * out_plane..][..g.group_out() * out_plane];
                T::gemm(
                    g.group_out(),
                    patch,
                    out_plane,
                    lhs,
                    patch as isize,
                    1,
                    rhs,
                    out_plane as isize,
                    1,
                    T::zero(),
                    dst,
                    out_plane as isize,
                    1,
                );
            }
        }
    }

    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, &bv) in bias.iter().enumerate() {
                out[b * out_image + c * out_plane..][..out_plane]
                    .iter_mut()
                    .for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

fn depthwise_plane<T: Element>(g: &ConvGeom, src: &[T], k: &[T], dst: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = T::zero();
            for ky in 0..g.kernel_h {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy as usize >= g.height {
                    continue;
                }
                for kx in 0..g.kernel_w {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix as usize >= g.width {
                        continue;
                    }
                    acc = acc + k[ky * g.kernel_w + kx] * src[iy as usize * g.width + ix as usize];
                }
            }
            dst[oy * wo + ox] = acc;
        }
    }
}

/// Gradients of a convolution: returns `(dx, dw, dbias)`.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    want_bias: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let out_plane = ho * wo;
    let in_plane = g.height * g.width;
    let in_image = g.in_channels * in_plane;
    let out_image = g.out_channels * out_plane;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];

    if g.is_depthwise() {
        let kk = g.kernel_h * g.kernel_w;
        for b in 0..g.batch {
            for c in 0..g.in_channels {
                let src = &x[b * in_image + c * in_plane..][..in_plane];
                let dsrc = &mut dx[b * in_image + c * in_plane..][..in_plane];
                let dy = &dout[b * out_image + c * out_plane..][..out_plane];
                let k = &w[c * kk..(c + 1) * kk];
                let dk = &mut dw[c * kk..(c + 1) * kk];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gy = dy[oy * wo + ox];
                        for ky in 0..g.kernel_h {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy as usize >= g.height {
                                continue;
                            }
                            for kx in 0..g.kernel_w {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix as usize >= g.width {
                                    continue;
                                }
                                let at = iy as usize * g.width + ix as usize;
                                let ki = ky * g.kernel_w + kx;
                                dk[ki] = dk[ki] + gy * src[at];
                                dsrc[at] = dsrc[at] + gy * k[ki];
                            }
                        }
                    }
                }
            }
        }
    } else {
        let patch = g.patch();
        let pointwise = g.is_pointwise();
        let mut cols = vec![T::zero(); if pointwise { 0 } else { patch * out_plane }];
        let mut dcols = vec![T::zero(); if pointwise { 0 } else { patch * out_plane }];
        for b in 0..g.batch {
            let image = &x[b * in_image..(b + 1) * in_image];
            for grp in 0..g.groups {
                let c0 = grp * g.group_in();
                let o0 = grp * g.group_out();
                let dy = &dout[b * out_image + o0 * out_plane..][..g.group_out() * out_plane];
                let rhs: &[T] = if pointwise {
                    &image[c0 * out_plane..(c0 + g.group_in()) * out_plane]
                } else {
                    im2col(g, image, c0, &mut cols);
                    &cols
                };
                // dW_g += dY_g · colsᵀ
                T::gemm(
                    g.group_out(),
                    out_plane,
                    patch,
                    dy,
                    out_plane as isize,
                    1,
                    rhs,
                    1,
                    out_plane as isize,
                    T::one(),
                    &mut dw[o0 * patch..(o0 + g.group_out()) * patch],
                    patch as isize,
                    1,
                );
                // dcols = W_gᵀ · dY_g
                let wg = &w[o0 * patch..(o0 + g.group_out()) * patch];
                if pointwise {
                    let dst = &mut dx[b * in_image + c0 * in_plane..][..g.group_in() * in_plane];
                    T::gemm(
                        patch,
                        g.group_out(),
                        out_plane,
                        wg,
                        1,
                        patch as isize,
                        dy,
                        out_plane as isize,
                        1,
                        T::one(),
                        dst,
                        out_plane as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        patch,
                        g.group_out(),
                        out_plane,
                        wg,
                        1,
                        patch as isize,
                        dy,
                        out_plane as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        out_plane as isize,
                        1,
                    );
                    col2im(g, &dcols, c0, &mut dx[b * in_image..(b + 1) * in_image]);
                }
            }
        }
    }

    let dbias = want_bias.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for b in 0..g.batch {
            for (c, d) in db.iter_mut().enumerate() {
                for &v in &dout[b * out_image + c * out_plane..][..out_plane] {
                    *d = *d + v;
                }
            }
        }
        db
    });
    (dx, dw, dbias)
}

/// Row-wise softmax over the last dimension with max subtraction.
pub fn softmax_rows<T: Element>(x: &[T], row: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(row).zip(out.chunks_mut(row)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}
