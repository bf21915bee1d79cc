//! Raw convolution and interpolation loops shared by forward and backward.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const UNIT: ConvGeom = ConvGeom {
        stride: 1,
        padding: 0,
        dilation: 1,
    };

    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent along one axis, `None` if it would be non-positive.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn multiplies(&self) -> u64 {
        (self.cout * self.cin * self.k * self.k * self.oh * self.ow) as u64
    }
}

/// Range of output positions `o` with `0 <= o*stride + offset < input`.
fn valid_range(offset: isize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    let last = input as isize - offset - 1;
    let hi = if last < 0 {
        0
    } else {
        ((last / s + 1) as usize).min(output)
    };
    (lo, hi.max(lo))
}

/// Visits every (output row, input row, kernel tap) triple with the valid output column range.
#[inline]
fn for_each_tap(d: &ConvDims, mut f: impl FnMut(usize, usize, usize, usize, usize, isize, usize)) {
    let g = d.geom;
    for ky in 0..d.k {
        let yoff = (ky * g.dilation) as isize - g.padding as isize;
        let (ylo, yhi) = valid_range(yoff, g.stride, d.h, d.oh);
        for kx in 0..d.k {
            let xoff = (kx * g.dilation) as isize - g.padding as isize;
            let (xlo, xhi) = valid_range(xoff, g.stride, d.w, d.ow);
            if xlo >= xhi {
                continue;
            }
            for oy in ylo..yhi {
                let iy = (oy * g.stride) as isize + yoff;
                f(ky, kx, oy, iy as usize, xlo, xoff, xhi);
            }
        }
    }
}

pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let plane = d.oh * d.ow;
    let mut out = vec![0.0; d.cout * plane];
    let s = d.geom.stride;
    for co in 0..d.cout {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = b {
            out_c.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..d.cin {
            let x_c = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let w_base = (co * d.cin + ci) * d.k * d.k;
            for_each_tap(d, |ky, kx, oy, iy, xlo, xoff, xhi| {
                let wv = w[w_base + ky * d.k + kx];
                if wv == 0.0 {
                    return;
                }
                let in_row = &x_c[iy * d.w..(iy + 1) * d.w];
                let out_row = &mut out_c[oy * d.ow..(oy + 1) * d.ow];
                if s == 1 {
                    let start = (xlo as isize + xoff) as usize;
                    let src = &in_row[start..start + (xhi - xlo)];
                    for (o, &v) in out_row[xlo..xhi].iter_mut().zip(src) {
                        *o += wv * v;
                    }
                } else {
                    for ox in xlo..xhi {
                        out_row[ox] += wv * in_row[((ox * s) as isize + xoff) as usize];
                    }
                }
            });
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; each only computed when requested.
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = d.oh * d.ow;
    let in_plane = d.h * d.w;
    let s = d.geom.stride;
    let mut gx = want_x.then(|| vec![0.0; d.cin * in_plane]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    let gb = want_b.then(|| {
        (0..d.cout)
            .map(|co| g[co * plane..(co + 1) * plane].iter().sum())
            .collect::<Vec<f64>>()
    });
    if !want_x && !want_w {
        return (None, None, gb);
    }
    for co in 0..d.cout {
        let g_c = &g[co * plane..(co + 1) * plane];
        for ci in 0..d.cin {
            let x_c = &x[ci * in_plane..(ci + 1) * in_plane];
            let w_base = (co * d.cin + ci) * d.k * d.k;
            let mut gx_c = gx.as_mut().map(|v| &mut v[ci * in_plane..(ci + 1) * in_plane]);
            for_each_tap(d, |ky, kx, oy, iy, xlo, xoff, xhi| {
                let g_row = &g_c[oy * d.ow..(oy + 1) * d.ow];
                let tap = w_base + ky * d.k + kx;
                if let Some(gx_c) = gx_c.as_deref_mut() {
                    let wv = w[tap];
                    if wv != 0.0 {
                        let gx_row = &mut gx_c[iy * d.w..(iy + 1) * d.w];
                        if s == 1 {
                            let start = (xlo as isize + xoff) as usize;
                            for (dst, &gv) in gx_row[start..start + (xhi - xlo)]
                                .iter_mut()
                                .zip(&g_row[xlo..xhi])
                            {
                                *dst += wv * gv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                gx_row[((ox * s) as isize + xoff) as usize] += wv * g_row[ox];
                            }
                        }
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    let in_row = &x_c[iy * d.w..(iy + 1) * d.w];
                    let mut acc = 0.0;
                    if s == 1 {
                        let start = (xlo as isize + xoff) as usize;
                        for (&gv, &xv) in g_row[xlo..xhi].iter().zip(&in_row[start..start + (xhi - xlo)]) {
                            acc += gv * xv;
                        }
                    } else {
                        for ox in xlo..xhi {
                            acc += g_row[ox] * in_row[((ox * s) as isize + xoff) as usize];
                        }
                    }
                    gw[tap] += acc;
                }
            });
        }
    }
    (gx, gw, gb)
}

/// One interpolation tap along an axis: `value = src[lo]*(1-frac) + src[hi]*frac`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre source taps, clamped to the input edge.
pub(crate) fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn resize_forward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    ys: &[Tap],
    xs: &[Tap],
) -> Vec<f64> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ty in ys {
            let r0 = &plane[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &plane[ty.hi * w..(ty.hi + 1) * w];
            for tx in xs {
                // two horizontal blends then one vertical: six products, three sums
                let top = r0[tx.lo] * (1.0 - tx.frac) + r0[tx.hi] * tx.frac;
                let bot = r1[tx.lo] * (1.0 - tx.frac) + r1[tx.hi] * tx.frac;
                out.push(top * (1.0 - ty.frac) + bot * ty.frac);
            }
        }
    }
    out
}

pub(crate) fn resize_backward(
    g: &[f64],
    (c, h, w): (usize, usize, usize),
    ys: &[Tap],
    xs: &[Tap],
) -> Vec<f64> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let gv = g[(ch * oh + oy) * ow + ox];
                let top = gv * (1.0 - ty.frac);
                let bot = gv * ty.frac;
                plane[ty.lo * w + tx.lo] += top * (1.0 - tx.frac);
                plane[ty.lo * w + tx.hi] += top * tx.frac;
                plane[ty.hi * w + tx.lo] += bot * (1.0 - tx.frac);
                plane[ty.hi * w + tx.hi] += bot * tx.frac;
            }
        }
    }
    gx
}
