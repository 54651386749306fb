//! Raw convolution kernels on flat buffers.
//!
//! Everything here works on a single batch item in `[C, D, H, W]` layout and
//! lowers to GEMM through an `im2col` buffer built one chunk of output
//! positions at a time, so the scratch space stays bounded regardless of the
//! volume size. Chunks are processed in a fixed order, which keeps every
//! reduction order (and therefore every result) independent of the host.

use super::{direct, Element};

/// Scratch budget for one `im2col` chunk, in elements.
const CHUNK_ELEMS: usize = 1 << 17;

/// Geometry of a strided, zero-padded 3D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub cin: usize,
    pub input: [usize; 3],
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

/// `floor((in + 2 pad - k) / stride) + 1`, or `None` when the kernel does
/// not fit in the padded extent.
pub(crate) fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (kernel <= padded && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl Geometry {
    pub fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the lowered matrix: one per (input channel, kernel offset).
    pub fn krows(&self) -> usize {
        self.cin * self.kvol()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn chunk_len(&self) -> usize {
        (CHUNK_ELEMS / self.krows()).clamp(64, 8192).min(self.out_vol())
    }

    /// Calls `f(j, seg, od, oh, ow)` for each run of output positions
    /// `j..j + seg` that share `(od, oh)` inside the chunk `[j0, j0 + len)`.
    fn for_each_run(&self, j0: usize, len: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [_, oh_n, ow_n] = self.output;
        let end = j0 + len;
        let mut j = j0;
        while j < end {
            let ow = j % ow_n;
            let oh = (j / ow_n) % oh_n;
            let od = j / (ow_n * oh_n);
            let seg = (ow_n - ow).min(end - j);
            f(j, seg, od, oh, ow);
            j += seg;
        }
    }
}

/// Signed input coordinate touched by output coordinate `o` at kernel tap `k`.
#[inline]
fn tap(o: usize, stride: usize, k: usize, pad: usize) -> isize {
    (o * stride + k) as isize - pad as isize
}

/// For a run of `seg` outputs starting at `ow` with unit stride, the
/// sub-range `[lo, hi)` whose input column `ow + t + off` is in bounds.
#[inline]
fn valid_span(ow: usize, seg: usize, off: isize, width: usize) -> (usize, usize) {
    let start = ow as isize + off;
    let lo = (-start).clamp(0, seg as isize) as usize;
    let hi = (width as isize - start).clamp(0, seg as isize) as usize;
    (lo, hi.max(lo))
}

/// Lowers the chunk `[j0, j0 + len)` of output positions into
/// `cols[krows][len]`.
fn im2col<T: Element>(x: &[T], g: &Geometry, j0: usize, len: usize, cols: &mut [T]) {
    let [d_n, h_n, w_n] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    g.for_each_run(j0, len, |j, seg, od, oh, ow| {
        let col = j - j0;
        for ci in 0..g.cin {
            for a in 0..kd {
                let id = tap(od, sd, a, pd);
                for b in 0..kh {
                    let ih = tap(oh, sh, b, ph);
                    let inside = id >= 0 && (id as usize) < d_n && ih >= 0 && (ih as usize) < h_n;
                    let base = if inside {
                        ((ci * d_n + id as usize) * h_n + ih as usize) * w_n
                    } else {
                        0
                    };
                    for c in 0..kw {
                        let r = ((ci * kd + a) * kh + b) * kw + c;
                        let dst = &mut cols[r * len + col..r * len + col + seg];
                        if !inside {
                            dst.fill(T::zero());
                        } else if sw == 1 {
                            let off = c as isize - pw as isize;
                            let (lo, hi) = valid_span(ow, seg, off, w_n);
                            dst[..lo].fill(T::zero());
                            let src = (base as isize + ow as isize + off + lo as isize) as usize;
                            dst[lo..hi].copy_from_slice(&x[src..src + hi - lo]);
                            dst[hi..].fill(T::zero());
                        } else {
                            for (t, v) in dst.iter_mut().enumerate() {
                                let iw = tap(ow + t, sw, c, pw);
                                *v = if iw >= 0 && (iw as usize) < w_n {
                                    x[base + iw as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatters `cols[krows][len]` back onto `x`,
/// accumulating overlapping taps.
fn col2im<T: Element>(cols: &[T], g: &Geometry, j0: usize, len: usize, x: &mut [T]) {
    let [d_n, h_n, w_n] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    g.for_each_run(j0, len, |j, seg, od, oh, ow| {
        let col = j - j0;
        for ci in 0..g.cin {
            for a in 0..kd {
                let id = tap(od, sd, a, pd);
                if id < 0 || id as usize >= d_n {
                    continue;
                }
                for b in 0..kh {
                    let ih = tap(oh, sh, b, ph);
                    if ih < 0 || ih as usize >= h_n {
                        continue;
                    }
                    let base = ((ci * d_n + id as usize) * h_n + ih as usize) * w_n;
                    for c in 0..kw {
                        let r = ((ci * kd + a) * kh + b) * kw + c;
                        let src = &cols[r * len + col..r * len + col + seg];
                        if sw == 1 {
                            let off = c as isize - pw as isize;
                            let (lo, hi) = valid_span(ow, seg, off, w_n);
                            let dst0 = (base as isize + ow as isize + off + lo as isize) as usize;
                            for (d, &s) in x[dst0..dst0 + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d = *d + s;
                            }
                        } else {
                            for (t, &s) in src.iter().enumerate() {
                                let iw = tap(ow + t, sw, c, pw);
                                if iw >= 0 && (iw as usize) < w_n {
                                    let d = &mut x[base + iw as usize];
                                    *d = *d + s;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// `out[cout][out_vol] = weight * x (+ bias)`; `out` is overwritten.
pub(crate) fn forward<T: Element>(x: &[T], g: &Geometry, weight: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (krows, out_vol) = (g.krows(), g.out_vol());
    debug_assert_eq!(x.len(), g.cin * g.in_vol());
    debug_assert_eq!(out.len(), g.cout * out_vol);
    if g.is_pointwise() {
        T::gemm(g.cout, g.cin, out_vol, T::one(), weight, g.cin, 1, x, out_vol, 1, T::zero(), out, out_vol, 1);
    } else if direct::applies(g) {
        direct::forward(x, g, weight, out);
    } else {
        let chunk = g.chunk_len();
        let mut cols = vec![T::zero(); krows * chunk];
        let mut j0 = 0;
        while j0 < out_vol {
            let len = chunk.min(out_vol - j0);
            im2col(x, g, j0, len, &mut cols);
            T::gemm(
                g.cout,
                krows,
                len,
                T::one(),
                weight,
                krows,
                1,
                &cols,
                len,
                1,
                T::zero(),
                &mut out[j0..],
                out_vol,
                1,
            );
            j0 += len;
        }
    }
    if let Some(bias) = bias {
        for (row, &b) in out.chunks_exact_mut(out_vol).zip(bias) {
            row.iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

/// Accumulates `d loss / d weight` into `gw[cout][krows]` given the input
/// `x` and the output gradient `gout`.
pub(crate) fn weight_grad<T: Element>(x: &[T], g: &Geometry, gout: &[T], gw: &mut [T]) {
    let (krows, out_vol) = (g.krows(), g.out_vol());
    if g.is_pointwise() {
        T::gemm(g.cout, out_vol, g.cin, T::one(), gout, out_vol, 1, x, 1, out_vol, T::one(), gw, g.cin, 1);
        return;
    }
    if direct::applies(g) {
        return direct::weight_grad(x, g, gout, gw);
    }
    let chunk = g.chunk_len();
    let mut cols = vec![T::zero(); krows * chunk];
    let mut j0 = 0;
    while j0 < out_vol {
        let len = chunk.min(out_vol - j0);
        im2col(x, g, j0, len, &mut cols);
        T::gemm(g.cout, len, krows, T::one(), &gout[j0..], out_vol, 1, &cols, 1, len, T::one(), gw, krows, 1);
        j0 += len;
    }
}

/// Adjoint of [`forward`] without bias: accumulates `weight^T * y` scattered
/// back onto the input grid of `g` into `x`.
pub(crate) fn transposed<T: Element>(y: &[T], g: &Geometry, weight: &[T], x: &mut [T]) {
    let (krows, out_vol) = (g.krows(), g.out_vol());
    if g.is_pointwise() {
        T::gemm(g.cin, g.cout, out_vol, T::one(), weight, 1, g.cin, y, out_vol, 1, T::one(), x, out_vol, 1);
        return;
    }
    if direct::applies(g) {
        return direct::input_grad(y, g, weight, x);
    }
    let chunk = g.chunk_len();
    let mut cols = vec![T::zero(); krows * chunk];
    let mut j0 = 0;
    while j0 < out_vol {
        let len = chunk.min(out_vol - j0);
        T::gemm(krows, g.cout, len, T::one(), weight, 1, krows, &y[j0..], out_vol, 1, T::zero(), &mut cols, len, 1);
        col2im(&cols, g, j0, len, x);
        j0 += len;
    }
}
