//! Raw compute kernels shared by the tape's forward and backward passes.
//!
//! Everything here works on flat `f64` slices with explicit extents. The hot
//! loops (convolution) keep the innermost iteration over the contiguous
//! output/input width so the compiler can vectorize.

use alloc::vec;
use alloc::vec::Vec;

pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }
    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Valid output-column range [lo, hi) for a kernel column offset, i.e.
    /// the `ow` for which `iw = ow*stride + off` lands inside [0, w).
    fn ow_range(&self, off: isize) -> (usize, usize) {
        let lo = if off < 0 { (-off as usize).div_ceil(self.stride) } else { 0 };
        if off >= self.w as isize {
            return (lo, lo);
        }
        let hi = ((self.w as isize - 1 - off) / self.stride as isize + 1).max(0) as usize;
        (lo, hi.min(self.wo).max(lo))
    }
}

/// Cross-correlation: out[n,oc,oh,ow] = b[oc] + sum x[n,ic,ih,iw] * w[oc,icg,ky,kx].
pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.cout * d.ho * d.wo];
    let cin_g = d.cin_per_group();
    let cout_g = d.cout_per_group();
    for n in 0..d.n {
        for oc in 0..d.cout {
            let grp = oc / cout_g;
            for oh in 0..d.ho {
                let orow = ((n * d.cout + oc) * d.ho + oh) * d.wo;
                out[orow..orow + d.wo].fill(b[oc]);
                for icg in 0..cin_g {
                    let ic = grp * cin_g + icg;
                    for ky in 0..d.kh {
                        let ih = (oh * d.stride + ky) as isize - d.pad as isize;
                        if ih < 0 || ih as usize >= d.h {
                            continue;
                        }
                        let xrow = ((n * d.cin + ic) * d.h + ih as usize) * d.w;
                        for kx in 0..d.kw {
                            let wv = w[((oc * cin_g + icg) * d.kh + ky) * d.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let off = kx as isize - d.pad as isize;
                            let (ow_lo, ow_hi) = d.ow_range(off);
                            if ow_hi <= ow_lo {
                                continue;
                            }
                            let iw_lo = ((ow_lo * d.stride) as isize + off) as usize;
                            if d.stride == 1 {
                                let xs = &x[xrow + iw_lo..][..ow_hi - ow_lo];
                                let os = &mut out[orow + ow_lo..orow + ow_hi];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * d.stride) as isize + off) as usize;
                                    out[orow + ow] += wv * x[xrow + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_x, grad_w, grad_b).
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cin_g = d.cin_per_group();
    let cout_g = d.cout_per_group();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; d.cout];
    for n in 0..d.n {
        for oc in 0..d.cout {
            let grp = oc / cout_g;
            for oh in 0..d.ho {
                let orow = ((n * d.cout + oc) * d.ho + oh) * d.wo;
                for ow in 0..d.wo {
                    gb[oc] += g[orow + ow];
                }
                for icg in 0..cin_g {
                    let ic = grp * cin_g + icg;
                    for ky in 0..d.kh {
                        let ih = (oh * d.stride + ky) as isize - d.pad as isize;
                        if ih < 0 || ih as usize >= d.h {
                            continue;
                        }
                        let xrow = ((n * d.cin + ic) * d.h + ih as usize) * d.w;
                        for kx in 0..d.kw {
                            let widx = ((oc * cin_g + icg) * d.kh + ky) * d.kw + kx;
                            let wv = w[widx];
                            let off = kx as isize - d.pad as isize;
                            let (ow_lo, ow_hi) = d.ow_range(off);
                            if ow_hi <= ow_lo {
                                continue;
                            }
                            let iw_lo = ((ow_lo * d.stride) as isize + off) as usize;
                            let mut gw_acc = 0.0;
                            if d.stride == 1 {
                                let len = ow_hi - ow_lo;
                                let xs = &x[xrow + iw_lo..][..len];
                                let gxs = &mut gx[xrow + iw_lo..][..len];
                                let gs = &g[orow + ow_lo..orow + ow_hi];
                                for ((gxv, &xv), &go) in gxs.iter_mut().zip(xs).zip(gs) {
                                    gw_acc += go * xv;
                                    *gxv += go * wv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * d.stride) as isize + off) as usize;
                                    let go = g[orow + ow];
                                    gw_acc += go * x[xrow + iw];
                                    gx[xrow + iw] += go * wv;
                                }
                            }
                            gw[widx] += gw_acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// y[n,o] = sum_i x[n,i] w[o,i] + b[o]
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * cout];
    for i in 0..n {
        for o in 0..cout {
            let mut acc = b[o];
            let xr = i * cin;
            let wr = o * cin;
            for k in 0..cin {
                acc += x[xr + k] * w[wr + k];
            }
            out[i * cout + o] = acc;
        }
    }
    out
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * cin];
    let mut gw = vec![0.0; cout * cin];
    let mut gb = vec![0.0; cout];
    for i in 0..n {
        for o in 0..cout {
            let go = g[i * cout + o];
            gb[o] += go;
            let xr = i * cin;
            let wr = o * cin;
            for k in 0..cin {
                gx[xr + k] += go * w[wr + k];
                gw[wr + k] += go * x[xr + k];
            }
        }
    }
    (gx, gw, gb)
}

/// Per-axis source indices and blend weight, align-corners-false with edge clamp.
pub fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = libm::floor(src) as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let ys = bilinear_axis(h, ho);
    let xs = bilinear_axis(w, wo);
    let mut out = vec![0.0; n * c * ho * wo];
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(
    g: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let ys = bilinear_axis(h, ho);
    let xs = bilinear_axis(w, wo);
    let mut gx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let src = &g[nc * ho * wo..(nc + 1) * ho * wo];
        let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let go = src[oy * wo + ox];
                dst[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += go * (1.0 - fy) * fx;
                dst[y1 * w + x0] += go * fy * (1.0 - fx);
                dst[y1 * w + x1] += go * fy * fx;
            }
        }
    }
    gx
}

/// Unnormalized 2-D DFT of each HxW map, separable. Returns (re, im).
pub fn dft2(x: &[f64], maps: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let (cw, sw) = dft_tables(w);
    let (ch, sh) = dft_tables(h);
    let mut re = vec![0.0; x.len()];
    let mut im = vec![0.0; x.len()];
    // Row pass: A[y,v] = sum_k x[y,k] e^{-2pi i v k / W}
    let mut ar = vec![0.0; h * w];
    let mut ai = vec![0.0; h * w];
    for m in 0..maps {
        let src = &x[m * h * w..(m + 1) * h * w];
        ar.fill(0.0);
        ai.fill(0.0);
        for y in 0..h {
            for v in 0..w {
                let mut sr = 0.0;
                let mut si = 0.0;
                for k in 0..w {
                    let xv = src[y * w + k];
                    sr += xv * cw[v * w + k];
                    si -= xv * sw[v * w + k];
                }
                ar[y * w + v] = sr;
                ai[y * w + v] = si;
            }
        }
        // Column pass: F[u,v] = sum_y A[y,v] e^{-2pi i u y / H}
        let dre = &mut re[m * h * w..(m + 1) * h * w];
        let dim = &mut im[m * h * w..(m + 1) * h * w];
        for u in 0..h {
            for v in 0..w {
                let mut sr = 0.0;
                let mut si = 0.0;
                for y in 0..h {
                    let (c, s) = (ch[u * h + y], sh[u * h + y]);
                    sr += ar[y * w + v] * c + ai[y * w + v] * s;
                    si += ai[y * w + v] * c - ar[y * w + v] * s;
                }
                dre[u * w + v] = sr;
                dim[u * w + v] = si;
            }
        }
    }
    (re, im)
}

fn dft_tables(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut c = vec![0.0; n * n];
    let mut s = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let ang = 2.0 * core::f64::consts::PI * ((a * b) % n) as f64 / n as f64;
            c[a * n + b] = libm::cos(ang);
            s[a * n + b] = libm::sin(ang);
        }
    }
    (c, s)
}

/// Adjoint of the real part of `dft2`: gx[h,w] = sum_uv g[u,v] cos(...).
/// The cosine kernel is symmetric, so this is the real part of dft2(g).
pub fn dft2_adjoint_re(g: &[f64], maps: usize, h: usize, w: usize) -> Vec<f64> {
    dft2(g, maps, h, w).0
}

/// Adjoint of the imaginary part: gx[h,w] = -sum_uv g[u,v] sin(...),
/// which equals the imaginary part of dft2(g).
pub fn dft2_adjoint_im(g: &[f64], maps: usize, h: usize, w: usize) -> Vec<f64> {
    dft2(g, maps, h, w).1
}
