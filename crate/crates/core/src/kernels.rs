//! Forward and backward kernels on raw tensors.
//!
//! Convolutions are direct (no im2col): for every weight tap the valid
//! output span of each row is computed once and the inner loop is a plain
//! slice axpy/dot, which the compiler vectorises for unit stride. Work is
//! split over output planes (forward), input planes (input gradient) and
//! output channels (weight gradient) so each chunk is written by exactly one
//! task.

use crate::exec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Shape-preserving convolution.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            kernel,
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    /// 3x3 stride-2 convolution halving each spatial dimension.
    pub fn down() -> Self {
        ConvSpec {
            kernel: 3,
            stride: 2,
            dilation: 1,
            padding: 1,
        }
    }

    pub fn out_dim(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (n + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }

    /// Output indices `lo..hi` whose input index `o * stride + offset` lies in `0..in_len`.
    #[inline]
    fn valid(&self, out_len: usize, in_len: usize, tap: usize) -> (usize, usize, isize) {
        let s = self.stride as isize;
        let offset = (tap * self.dilation) as isize - self.padding as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let last = in_len as isize - 1 - offset;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let hi = hi.min(out_len as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize, offset)
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let [n, cin, hi, wi] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    assert_eq!(cin, wcin, "conv input channels {cin} vs weight {wcin}");
    assert_eq!((kh, kw), (spec.kernel, spec.kernel), "kernel size mismatch");
    let (ho, wo) = (spec.out_dim(hi), spec.out_dim(wi));
    let k = spec.kernel;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let wd = w.data();
    exec::for_each_chunk(out.data_mut(), ho * wo, |idx, plane| {
        let (bn, co) = (idx / cout, idx % cout);
        if let Some(b) = b {
            plane.fill(b.data()[co]);
        }
        for ci in 0..cin {
            let inp = x.plane(bn, ci);
            for ky in 0..k {
                let (oy_lo, oy_hi, yoff) = spec.valid(ho, hi, ky);
                for kx in 0..k {
                    let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                    let (ox_lo, ox_hi, xoff) = spec.valid(wo, wi, kx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy as isize * spec.stride as isize + yoff) as usize;
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        let irow = &inp[iy * wi..(iy + 1) * wi];
                        if spec.stride == 1 {
                            let ix0 = (ox_lo as isize + xoff) as usize;
                            let len = ox_hi - ox_lo;
                            for (o, i) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[ix0..ix0 + len]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox as isize * spec.stride as isize + xoff) as usize;
                                orow[ox] += wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of the convolution output with respect to its input.
pub fn conv2d_backward_input(gout: &Tensor, w: &Tensor, in_shape: [usize; 4], spec: ConvSpec) -> Tensor {
    let [n, cin, hi, wi] = in_shape;
    let [_, cout, ho, wo] = gout.shape();
    let k = spec.kernel;
    let wd = w.data();
    let mut gin = Tensor::zeros([n, cin, hi, wi]);
    exec::for_each_chunk(gin.data_mut(), hi * wi, |idx, plane| {
        let (bn, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let g = gout.plane(bn, co);
            for ky in 0..k {
                let (oy_lo, oy_hi, yoff) = spec.valid(ho, hi, ky);
                for kx in 0..k {
                    let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                    let (ox_lo, ox_hi, xoff) = spec.valid(wo, wi, kx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy as isize * spec.stride as isize + yoff) as usize;
                        let grow = &g[oy * wo..(oy + 1) * wo];
                        let irow = &mut plane[iy * wi..(iy + 1) * wi];
                        if spec.stride == 1 {
                            let ix0 = (ox_lo as isize + xoff) as usize;
                            let len = ox_hi - ox_lo;
                            for (i, o) in irow[ix0..ix0 + len].iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                *i += wv * o;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox as isize * spec.stride as isize + xoff) as usize;
                                irow[ix] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Gradients with respect to the weights and the bias.
pub fn conv2d_backward_params(gout: &Tensor, x: &Tensor, w_shape: [usize; 4], spec: ConvSpec) -> (Tensor, Tensor) {
    let [n, cin, hi, wi] = x.shape();
    let [_, cout, ho, wo] = gout.shape();
    let k = spec.kernel;
    let mut gw = Tensor::zeros(w_shape);
    exec::for_each_chunk(gw.data_mut(), cin * k * k, |co, chunk| {
        for ci in 0..cin {
            for ky in 0..k {
                let (oy_lo, oy_hi, yoff) = spec.valid(ho, hi, ky);
                for kx in 0..k {
                    let (ox_lo, ox_hi, xoff) = spec.valid(wo, wi, kx);
                    let mut acc = 0.0;
                    if ox_lo < ox_hi {
                        for bn in 0..n {
                            let g = gout.plane(bn, co);
                            let inp = x.plane(bn, ci);
                            for oy in oy_lo..oy_hi {
                                let iy = (oy as isize * spec.stride as isize + yoff) as usize;
                                let grow = &g[oy * wo..(oy + 1) * wo];
                                let irow = &inp[iy * wi..(iy + 1) * wi];
                                if spec.stride == 1 {
                                    let ix0 = (ox_lo as isize + xoff) as usize;
                                    let len = ox_hi - ox_lo;
                                    acc += grow[ox_lo..ox_hi]
                                        .iter()
                                        .zip(&irow[ix0..ix0 + len])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = (ox as isize * spec.stride as isize + xoff) as usize;
                                        acc += grow[ox] * irow[ix];
                                    }
                                }
                            }
                        }
                    }
                    chunk[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    let mut gb = Tensor::zeros([cout, 1, 1, 1]);
    for co in 0..cout {
        gb.data_mut()[co] = (0..n).map(|bn| gout.plane(bn, co).iter().sum::<f64>()).sum();
    }
    (gw, gb)
}

/// Horizontal sampling position for a disparity-guided lookup.
///
/// Returns the two neighbouring columns, the interpolation weight of the
/// right neighbour, and whether the unclamped position was inside the row.
#[inline]
pub fn row_sample(x: usize, d: f64, sign: f64, width: usize) -> (usize, usize, f64, bool) {
    let max = (width - 1) as f64;
    let p = x as f64 + sign * d;
    let inside = p > 0.0 && p < max;
    let pc = p.clamp(0.0, max);
    let x0 = pc.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    (x0, x1, pc - x0 as f64, inside)
}

#[inline]
pub fn lerp_row(row: &[f64], x0: usize, x1: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        row[x0]
    } else {
        (1.0 - alpha) * row[x0] + alpha * row[x1]
    }
}

/// Backward warp along rows: `out(x, y) = src(x + sign * d(x, y), y)` with
/// bilinear sampling and clamp-to-edge. `disp` has one channel shared by all
/// source channels.
pub fn warp_forward(src: &Tensor, disp: &Tensor, sign: f64) -> Tensor {
    let [n, c, h, w] = src.shape();
    assert_eq!(disp.shape(), [n, 1, h, w], "warp disparity shape");
    let mut out = Tensor::zeros([n, c, h, w]);
    exec::for_each_chunk(out.data_mut(), h * w, |idx, plane| {
        let (bn, ch) = (idx / c, idx % c);
        let s = src.plane(bn, ch);
        let d = disp.plane(bn, 0);
        for y in 0..h {
            let row = &s[y * w..(y + 1) * w];
            for x in 0..w {
                let (x0, x1, a, _) = row_sample(x, d[y * w + x], sign, w);
                plane[y * w + x] = lerp_row(row, x0, x1, a);
            }
        }
    });
    out
}

/// Returns the gradients with respect to the source and to the disparity.
pub fn warp_backward(gout: &Tensor, src: &Tensor, disp: &Tensor, sign: f64) -> (Tensor, Tensor) {
    let [n, c, h, w] = src.shape();
    let mut gsrc = Tensor::zeros([n, c, h, w]);
    let mut gdisp = Tensor::zeros([n, 1, h, w]);
    for bn in 0..n {
        let d = disp.plane(bn, 0).to_vec();
        for ch in 0..c {
            let g = gout.plane(bn, ch).to_vec();
            let s = src.plane(bn, ch).to_vec();
            let gs = gsrc.plane_mut(bn, ch);
            let mut gd_local = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let (x0, x1, a, inside) = row_sample(x, d[i], sign, w);
                    gs[y * w + x0] += (1.0 - a) * g[i];
                    gs[y * w + x1] += a * g[i];
                    if inside {
                        gd_local[i] = g[i] * (s[y * w + x1] - s[y * w + x0]) * sign;
                    }
                }
            }
            for (acc, v) in gdisp.plane_mut(bn, 0).iter_mut().zip(&gd_local) {
                *acc += v;
            }
        }
    }
    (gsrc, gdisp)
}

/// Average over non-overlapping `f x f` blocks.
pub fn avg_pool(x: &Tensor, f: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert!(h % f == 0 && w % f == 0, "avg_pool {h}x{w} by {f}");
    let (ho, wo) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for bn in 0..n {
        for ch in 0..c {
            let s = x.plane(bn, ch);
            let o = out.plane_mut(bn, ch);
            for y in 0..h {
                for xx in 0..w {
                    o[(y / f) * wo + xx / f] += s[y * w + xx];
                }
            }
            o.iter_mut().for_each(|v| *v *= norm);
        }
    }
    out
}

pub fn avg_pool_backward(gout: &Tensor, f: usize) -> Tensor {
    let [n, c, ho, wo] = gout.shape();
    let norm = 1.0 / (f * f) as f64;
    Tensor::from_fn([n, c, ho * f, wo * f], |bn, ch, y, x| gout.at(bn, ch, y / f, x / f) * norm)
}

pub fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h * f, w * f], |bn, ch, y, xx| x.at(bn, ch, y / f, xx / f))
}

pub fn upsample_nearest_backward(gout: &Tensor, f: usize) -> Tensor {
    let [n, c, h, w] = gout.shape();
    let (ho, wo) = (h / f, w / f);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for bn in 0..n {
        for ch in 0..c {
            let g = gout.plane(bn, ch);
            let o = out.plane_mut(bn, ch);
            for y in 0..h {
                for xx in 0..w {
                    o[(y / f) * wo + xx / f] += g[y * w + xx];
                }
            }
        }
    }
    out
}
