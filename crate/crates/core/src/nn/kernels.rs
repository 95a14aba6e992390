//! Low-level dense kernels: GEMM wrapper and volumetric im2col/col2im.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`. When `ta` is set,
/// `a` is stored as `k x m`; likewise `tb` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are sized m*k, k*n and m*n as asserted above and the
    // strides address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Stride-1 volumetric window geometry between a "large" grid and the
/// "small" grid of window positions, with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub large: [usize; 3],
    pub small: [usize; 3],
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
}

impl Window {
    /// Window positions of a `kernel` sliding over `large` with `padding`.
    pub fn positions(large: [usize; 3], kernel: [usize; 3], padding: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let span = large[i] + 2 * padding[i];
            if kernel[i] == 0 || span < kernel[i] {
                return None;
            }
            out[i] = span - kernel[i] + 1;
        }
        Some(out)
    }

    /// Large grid that a transposed window expands `small` into.
    pub fn expansion(small: [usize; 3], kernel: [usize; 3], padding: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let span = small[i] + kernel[i] - 1;
            if kernel[i] == 0 || span <= 2 * padding[i] {
                return None;
            }
            out[i] = span - 2 * padding[i];
        }
        Some(out)
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn cols(&self) -> usize {
        self.small.iter().product()
    }

    pub fn large_len(&self) -> usize {
        self.channels * self.large.iter().product::<usize>()
    }

    /// Unfolds `x` (`channels x large`) into `cols` (`rows x cols`).
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let [ld, lh, lw] = self.large;
        let [sd, sh, sw] = self.small;
        let [kd, kh, kw] = self.kernel;
        let [pd, ph, pw] = self.padding;
        let p = self.cols();
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &x[c * ld * lh * lw..(c + 1) * ld * lh * lw];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        row += 1;
                        // valid ow range: 0 <= ow + e - pw < lw
                        let ow_lo = pw.saturating_sub(e).min(sw);
                        let ow_hi = (lw + pw).saturating_sub(e).min(sw).max(ow_lo);
                        for od in 0..sd {
                            let id = (od + a) as isize - pd as isize;
                            for oh in 0..sh {
                                let ih = (oh + b) as isize - ph as isize;
                                let seg = &mut dst[(od * sh + oh) * sw..(od * sh + oh + 1) * sw];
                                if ow_hi == ow_lo || id < 0 || id >= ld as isize || ih < 0 || ih >= lh as isize {
                                    seg.fill(0.0);
                                    continue;
                                }
                                seg[..ow_lo].fill(0.0);
                                seg[ow_hi..].fill(0.0);
                                let base = (id as usize * lh + ih as usize) * lw;
                                let start = base + ow_lo + e - pw;
                                if ow_hi > ow_lo {
                                    seg[ow_lo..ow_hi]
                                        .copy_from_slice(&xc[start..start + (ow_hi - ow_lo)]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `cols` back onto `x`, accumulating overlapping windows.
    pub fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let [ld, lh, lw] = self.large;
        let [sd, sh, sw] = self.small;
        let [kd, kh, kw] = self.kernel;
        let [pd, ph, pw] = self.padding;
        let p = self.cols();
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &mut x[c * ld * lh * lw..(c + 1) * ld * lh * lw];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &cols[row * p..(row + 1) * p];
                        row += 1;
                        let ow_lo = pw.saturating_sub(e).min(sw);
                        let ow_hi = (lw + pw).saturating_sub(e).min(sw).max(ow_lo);
                        for od in 0..sd {
                            let id = (od + a) as isize - pd as isize;
                            if id < 0 || id >= ld as isize {
                                continue;
                            }
                            for oh in 0..sh {
                                let ih = (oh + b) as isize - ph as isize;
                                if ow_hi == ow_lo || ih < 0 || ih >= lh as isize {
                                    continue;
                                }
                                let seg = &src[(od * sh + oh) * sw..(od * sh + oh + 1) * sw];
                                let base = (id as usize * lh + ih as usize) * lw;
                                let start = base + ow_lo + e - pw;
                                let dst = &mut xc[start..start + (ow_hi - ow_lo)];
                                for (d, s) in dst.iter_mut().zip(&seg[ow_lo..ow_hi]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
