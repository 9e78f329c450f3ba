//! Raw numeric kernels. Everything here works on flat slices in NCHW order.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(a)` is `m×k` and `op(b)` is `k×n`. A transposed operand is stored in
/// its untransposed layout (`k×m` or `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (self.in_h + 2 * self.pad).saturating_sub(span) / self.stride + 1;
        let ow = (self.in_w + 2 * self.pad).saturating_sub(span) / self.stride + 1;
        (oh, ow)
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

/// Output positions `lo..hi` along one axis whose input index stays in bounds.
fn valid_range(out: usize, stride: usize, offset: isize, input: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 {
        ((-offset + s - 1) / s) as usize
    } else {
        0
    };
    let last = input as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
    let hi = hi.min(out);
    (lo.min(hi), hi)
}

/// Unfold one image (`in_c×in_h×in_w`) into a `(in_c·k·k) × (oh·ow)` matrix.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let dy = (ky * g.dilation) as isize - g.pad as isize;
            let (ylo, yhi) = valid_range(oh, g.stride, dy, g.in_h);
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let dx = (kx * g.dilation) as isize - g.pad as isize;
                let (xlo, xhi) = valid_range(ow, g.stride, dx, g.in_w);
                dst[..ylo * ow].fill(0.0);
                dst[yhi * ow..].fill(0.0);
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.stride as isize + dy) as usize;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    out_row[..xlo].fill(0.0);
                    out_row[xhi..].fill(0.0);
                    if xlo == xhi {
                        continue;
                    }
                    let first = (xlo as isize * g.stride as isize + dx) as usize;
                    if g.stride == 1 {
                        out_row[xlo..xhi].copy_from_slice(&src[first..first + xhi - xlo]);
                    } else {
                        for (o, v) in out_row[xlo..xhi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let dy = (ky * g.dilation) as isize - g.pad as isize;
            let (ylo, yhi) = valid_range(oh, g.stride, dy, g.in_h);
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let dx = (kx * g.dilation) as isize - g.pad as isize;
                let (xlo, xhi) = valid_range(ow, g.stride, dx, g.in_w);
                if xlo == xhi {
                    continue;
                }
                let first = (xlo as isize * g.stride as isize + dx) as usize;
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.stride as isize + dy) as usize;
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let s_row = &src[oy * ow + xlo..oy * ow + xhi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + s_row.len()].iter_mut().zip(s_row) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(s_row) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis taps of a 2x bilinear upsample with half-pixel centers.
pub fn bilinear_taps(input: usize) -> Vec<(usize, usize, f64)> {
    let out = input * 2;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}
