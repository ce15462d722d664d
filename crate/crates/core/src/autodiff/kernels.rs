//! Slice-level kernels shared by forward and backward rules. Every loop nest
//! has a fixed iteration order so results are bit-reproducible.

use crate::tensor::Float;

/// `out[m,n] = a[m,k] · b[k,n]`, overwriting `out`.
pub fn matmul<F: Float>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    out[..m * n].fill(F::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `ga[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn matmul_grad_a<F: Float>(g: &[F], b: &[F], ga: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            ga[i * k + p] += s;
        }
    }
}

/// `gb[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn matmul_grad_b<F: Float>(a: &[F], g: &[F], gb: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (o, &gv) in gbrow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over a `[C, H, W]` map with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output extent `floor((n + 2·pad − k) / stride) + 1`, or `None` when it would be < 1.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

impl ConvGeom {
    /// Input row/column touched by output index `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub fn conv2d<F: Float>(x: &[F], w: &[F], bias: Option<&[F]>, out: &mut [F], g: &ConvGeom) {
    let plane = g.oh * g.ow;
    for co in 0..g.c_out {
        let b = bias.map_or(F::zero(), |b| b[co]);
        out[co * plane..(co + 1) * plane].fill(b);
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..g.ow {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            out[co * plane + oy * g.ow + ox] += wv * xin[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward<F: Float>(
    x: &[F],
    w: &[F],
    grad: &[F],
    gx: Option<&mut [F]>,
    gw: Option<&mut [F]>,
    gb: Option<&mut [F]>,
    g: &ConvGeom,
) {
    let plane = g.oh * g.ow;
    if let Some(gb) = gb {
        for co in 0..g.c_out {
            gb[co] += grad[co * plane..(co + 1) * plane].iter().copied().sum::<F>();
        }
    }
    if let Some(gw) = gw {
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut s = F::zero();
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..g.ow {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                s += grad[co * plane + oy * g.ow + ox] * xin[iy * g.w + ix];
                            }
                        }
                        gw[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] += s;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                let gxin = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..g.ow {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                gxin[iy * g.w + ix] += wv * grad[co * plane + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel convolution; `geom.c_out == geom.c_in` and the kernel is `[C, kh, kw]`.
pub fn depthwise<F: Float>(x: &[F], k: &[F], out: &mut [F], g: &ConvGeom) {
    let plane = g.oh * g.ow;
    out[..g.c_in * plane].fill(F::zero());
    for c in 0..g.c_in {
        let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let kv = k[(c * g.kh + ky) * g.kw + kx];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        out[c * plane + oy * g.ow + ox] += kv * xin[iy * g.w + ix];
                    }
                }
            }
        }
    }
}

pub fn depthwise_backward<F: Float>(
    x: &[F],
    k: &[F],
    grad: &[F],
    mut gx: Option<&mut [F]>,
    mut gk: Option<&mut [F]>,
    g: &ConvGeom,
) {
    let plane = g.oh * g.ow;
    for c in 0..g.c_in {
        let base = c * g.h * g.w;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let kidx = (c * g.kh + ky) * g.kw + kx;
                let kv = k[kidx];
                let mut s = F::zero();
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let gv = grad[c * plane + oy * g.ow + ox];
                        s += gv * x[base + iy * g.w + ix];
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[base + iy * g.w + ix] += kv * gv;
                        }
                    }
                }
                if let Some(gk) = gk.as_deref_mut() {
                    gk[kidx] += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_formula() {
        assert_eq!(conv_out_extent(16, 3, 2, 1), Some(8));
        assert_eq!(conv_out_extent(20, 3, 2, 1), Some(10));
        assert_eq!(conv_out_extent(128, 7, 4, 3), Some(32));
        assert_eq!(conv_out_extent(320, 7, 4, 3), Some(80));
        assert_eq!(conv_out_extent(1, 5, 1, 1), None);
    }

    #[test]
    fn matmul_hand_case() {
        let mut out = [0.0f64; 2];
        matmul(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], &mut out, 2, 2, 1);
        assert_eq!(out, [3.0, 7.0]);
    }
}
