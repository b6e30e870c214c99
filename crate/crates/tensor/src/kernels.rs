//! Raw loops behind the tape operations.
//!
//! Every output element is accumulated from `0.0` in a fixed order so that
//! brute-force reference loops with the same order reproduce results exactly.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies inside the image.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride as i64, self.pad as i64, self.w as i64);
        let kx = kx as i64;
        let lo = if p > kx { (p - kx + s - 1) / s } else { 0 };
        let hi_incl = (w - 1 + p - kx).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, self.ow as i64);
        (lo.min(hi) as usize, hi as usize)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
        (iy >= 0 && iy < self.h as i64).then_some(iy as usize)
    }
}

/// Cross-correlation. Per output element: `sum over (ci, ky, kx)` in that order, then `+ bias`.
pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.cout * plane];
    for co in 0..g.cout {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..g.cin {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.ox_range(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let xrow = &x_c[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut out_c[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let off = ox0 + kx - g.pad;
                            let n = ox1 - ox0;
                            for (o, xv) in orow[ox0..ox1].iter_mut().zip(&xrow[off..off + n]) {
                                *o += wv * xv;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate().take(ox1).skip(ox0) {
                                *o += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            out_c.iter_mut().for_each(|o| *o += b[co]);
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.oh * g.ow;
    let mut gx = need_x.then(|| vec![0.0; g.cin * g.h * g.w]);
    let mut gk = need_k.then(|| vec![0.0; k.len()]);
    for co in 0..g.cout {
        let go_c = &gout[co * plane..(co + 1) * plane];
        for ci in 0..g.cin {
            let base = ci * g.h * g.w;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kidx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                    let wv = k[kidx];
                    let (ox0, ox1) = g.ox_range(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &go_c[oy * g.ow..(oy + 1) * g.ow];
                        let row0 = base + iy * g.w;
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.pad;
                            let gv = grow[ox];
                            if let Some(gx) = gx.as_mut() {
                                gx[row0 + ix] += wv * gv;
                            }
                            acc += gv * x[row0 + ix];
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    (gx, gk)
}
