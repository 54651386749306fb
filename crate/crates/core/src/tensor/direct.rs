//! Direct kernels for 3x3x3 convolutions with unit stride and one voxel of
//! zero padding, the shape of every feature convolution in the networks.
//!
//! The input is copied once into a zero-bordered buffer whose extents are
//! rounded up to whole tiles, after which every tap is an unconditional
//! slice read and every tile is written in full to a scratch buffer. Each tile covers `CB` output channels by `R`
//! rows by `L` columns and keeps its accumulators in registers across all
//! input channels and taps.
//!
//! The loops are written once and compiled per instruction set, with the
//! variant picked at runtime. The summation order of every output element
//! is fixed, so results are reproducible on a given machine; the AVX-512 and
//! AVX2 builds fuse multiply-adds and so agree with each other but not
//! bit-for-bit with the portable build.

use super::conv::Geometry;
use super::Element;

/// Tile width along W.
const L: usize = 16;
/// Rows per correlation tile.
const R: usize = 2;
const TAPS: usize = 27;

pub(crate) fn applies(g: &Geometry) -> bool {
    g.kernel == [3; 3] && g.stride == [1; 3] && g.pad == [1; 3] && g.output == g.input
}

#[derive(Clone, Copy)]
struct Dims {
    d: usize,
    h: usize,
    w: usize,
    /// H rounded up to a multiple of `R`.
    hr: usize,
    /// W rounded up to a multiple of `L`.
    wr: usize,
}

impl Dims {
    fn new([d, h, w]: [usize; 3]) -> Self {
        Self {
            d,
            h,
            w,
            hr: h.div_ceil(R) * R,
            wr: w.div_ceil(L) * L,
        }
    }

    fn pd(&self) -> usize {
        self.d + 2
    }

    fn ph(&self) -> usize {
        self.hr + 2
    }

    /// Padded row length: the rounded width, a border column on the left
    /// and one on the right.
    fn pw(&self) -> usize {
        self.wr + 2
    }

    fn pvol(&self) -> usize {
        self.pd() * self.ph() * self.pw()
    }

    /// Start of padded row `(z, y)` of channel `c`, in padded coordinates.
    fn prow(&self, c: usize, z: usize, y: usize) -> usize {
        ((c * self.pd() + z) * self.ph() + y) * self.pw()
    }
}

/// `[C, D, H, W]` into the zero-bordered `[C, D+2, hr+2, wr+2]` layout.
fn pad<T: Element>(x: &[T], c: usize, dm: Dims) -> Vec<T> {
    let mut p = vec![T::zero(); c * dm.pvol()];
    for ci in 0..c {
        for z in 0..dm.d {
            for y in 0..dm.h {
                let src = ((ci * dm.d + z) * dm.h + y) * dm.w;
                let dst = dm.prow(ci, z + 1, y + 1) + 1;
                p[dst..dst + dm.w].copy_from_slice(&x[src..src + dm.w]);
            }
        }
    }
    p
}

/// Reorders `[cout][cin][27]` weights into per-block `[cin][27][cb]` runs so
/// the `cb` weights of one tap are contiguous. With `flip`, the result is
/// the adjoint kernel `w'[ci][co][t] = w[co][ci][26 - t]` (channels swapped
/// and all three axes reversed).
fn arrange<T: Element>(w: &[T], cout: usize, cin: usize, flip: bool, cb: usize) -> Vec<T> {
    let (rows, cols) = if flip { (cin, cout) } else { (cout, cin) };
    let blocks = rows.div_ceil(cb);
    let mut out = vec![T::zero(); blocks * cols * TAPS * cb];
    for r in 0..rows {
        let (blk, k) = (r / cb, r % cb);
        for c in 0..cols {
            for t in 0..TAPS {
                let v = if flip {
                    w[(c * cin + r) * TAPS + (TAPS - 1 - t)]
                } else {
                    w[(r * cin + c) * TAPS + t]
                };
                out[((blk * cols + c) * TAPS + t) * cb + k] = v;
            }
        }
    }
    out
}

/// Pairwise sum of one tile's lanes.
#[inline(always)]
fn tree_sum<T: Element>(mut v: [T; L]) -> T {
    let mut n = L;
    while n > 1 {
        n /= 2;
        for i in 0..n {
            v[i] = v[i] + v[i + n];
        }
    }
    v[0]
}

/// `a + b * c`, fused when the build enables FMA.
#[inline(always)]
fn madd<T: Element, const FMA: bool>(a: T, b: T, c: T) -> T {
    if FMA {
        b.mul_add(c, a)
    } else {
        a + b * c
    }
}

/// `tile[co] = sum_ci sum_t wt[co][ci][t] * xp[ci] shifted by t` for one
/// block of `CB` output channels, over the rounded `[D, hr, wr]` grid. Each
/// tile holds `CB x R` accumulators of `L` lanes.
///
/// Everything here is inlined into the per-instruction-set entry points, so
/// the body is kept to a single instance of the tile loop.
#[inline(always)]
fn correlate_block<T: Element, const CB: usize, const FMA: bool>(
    xp: &[T],
    cin: usize,
    dm: Dims,
    wt: &[T],
    tile: &mut [T],
) {
    let tvol = dm.d * dm.hr * dm.wr;
    let pw = dm.pw();
    for z in 0..dm.d {
        for y in (0..dm.hr).step_by(R) {
            for w0 in (0..dm.wr).step_by(L) {
                let mut acc = [[[T::zero(); L]; R]; CB];
                for ci in 0..cin {
                    for a in 0..3 {
                        for b in 0..3 {
                            let base = dm.prow(ci, z + a, y + b) + w0;
                            let rows = &xp[base..base + (R - 1) * pw + L + 2];
                            for c in 0..3 {
                                let t = ((ci * 3 + a) * 3 + b) * 3 + c;
                                let wk: &[T; CB] = wt[t * CB..][..CB].try_into().unwrap();
                                for j in 0..R {
                                    let r: &[T; L] = rows[j * pw + c..j * pw + c + L].try_into().unwrap();
                                    for k in 0..CB {
                                        for l in 0..L {
                                            acc[k][j][l] = madd::<T, FMA>(acc[k][j][l], wk[k], r[l]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (k, acc_k) in acc.iter().enumerate() {
                    for (j, acc_kj) in acc_k.iter().enumerate() {
                        tile[k * tvol + (z * dm.hr + y + j) * dm.wr + w0..][..L].copy_from_slice(acc_kj);
                    }
                }
            }
        }
    }
}

/// Fills `tile` (`[cout rounded up to CB][D][hr][wr]`).
#[inline(always)]
fn correlate<T: Element, const CB: usize, const FMA: bool>(
    xp: &[T],
    cin: usize,
    dm: Dims,
    wt: &[T],
    tile: &mut [T],
) {
    let tvol = dm.d * dm.hr * dm.wr;
    let wlen = cin * TAPS * CB;
    for (wb, tb) in wt.chunks_exact(wlen).zip(tile.chunks_exact_mut(CB * tvol)) {
        correlate_block::<T, CB, FMA>(xp, cin, dm, wb, tb);
    }
}

/// `gw[co][ci][t] += sum_p gp[co][p] * xp[ci][p + t]` for the `n <= CB`
/// output channels of one block. `gp` holds `CB` channels of output gradient
/// with rows padded to `wr` and zeros beyond `w` (and beyond `n`), so the
/// garbage columns of `xp` contribute nothing.
#[inline(always)]
fn weight_grad_block<T: Element, const CB: usize, const FMA: bool>(
    xp: &[T],
    cin: usize,
    dm: Dims,
    gp: &[T],
    gw: &mut [T],
    n: usize,
) {
    let gvol = dm.d * dm.h * dm.wr;
    for z in 0..dm.d {
        for ci in 0..cin {
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = [[[T::zero(); L]; 3]; CB];
                    for y in 0..dm.h {
                        let xrow = dm.prow(ci, z + a, y + b);
                        let grow = (z * dm.h + y) * dm.wr;
                        for w0 in (0..dm.wr).step_by(L) {
                            let row = &xp[xrow + w0..xrow + w0 + L + 2];
                            let mut g = [[T::zero(); L]; CB];
                            for k in 0..CB {
                                g[k].copy_from_slice(&gp[k * gvol + grow + w0..][..L]);
                            }
                            for c in 0..3 {
                                let xc: &[T; L] = row[c..c + L].try_into().unwrap();
                                for k in 0..CB {
                                    for l in 0..L {
                                        acc[k][c][l] = madd::<T, FMA>(acc[k][c][l], g[k][l], xc[l]);
                                    }
                                }
                            }
                        }
                    }
                    for (k, acc_k) in acc.iter().enumerate().take(n) {
                        for (c, lanes) in acc_k.iter().enumerate() {
                            let s = tree_sum(*lanes);
                            let i = (k * cin + ci) * TAPS + (a * 3 + b) * 3 + c;
                            gw[i] = gw[i] + s;
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn weight_grad_all<T: Element, const CB: usize, const FMA: bool>(xp: &[T], cin: usize, dm: Dims, gp: &[T], cout: usize, gw: &mut [T]) {
    let gvol = dm.d * dm.h * dm.wr;
    for co0 in (0..cout).step_by(CB) {
        let n = CB.min(cout - co0);
        weight_grad_block::<T, CB, FMA>(
            xp,
            cin,
            dm,
            &gp[co0 * gvol..(co0 + CB) * gvol],
            &mut gw[co0 * cin * TAPS..(co0 + n) * cin * TAPS],
            n,
        );
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Isa {
    Avx512,
    Avx2,
    Portable,
}

fn isa() -> Isa {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        if has!("avx512f") && has!("fma") {
            return Isa::Avx512;
        }
        if has!("avx2") && has!("fma") {
            return Isa::Avx2;
        }
    }
    Isa::Portable
}

/// Output-channel block of the correlation kernel for an instruction set.
/// `CB x R` accumulator tiles plus the row operands must fit the register
/// file (32 vector registers with AVX-512, 16 otherwise).
fn correlate_cb(isa: Isa) -> usize {
    match isa {
        Isa::Avx512 => 4,
        _ => 2,
    }
}

fn run_correlate<T: Element>(isa: Isa, xp: &[T], cin: usize, dm: Dims, wt: &[T], tile: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx512f,fma")]
        fn avx512<T: Element>(xp: &[T], cin: usize, dm: Dims, wt: &[T], tile: &mut [T]) {
            correlate::<T, 4, true>(xp, cin, dm, wt, tile)
        }
        #[target_feature(enable = "avx2,fma")]
        fn avx2<T: Element>(xp: &[T], cin: usize, dm: Dims, wt: &[T], tile: &mut [T]) {
            correlate::<T, 2, true>(xp, cin, dm, wt, tile)
        }
        match isa {
            // SAFETY: both features were detected at runtime by `isa`.
            Isa::Avx512 => return unsafe { avx512(xp, cin, dm, wt, tile) },
            // SAFETY: as above.
            Isa::Avx2 => return unsafe { avx2(xp, cin, dm, wt, tile) },
            Isa::Portable => {}
        }
    }
    correlate::<T, 2, false>(xp, cin, dm, wt, tile)
}

/// Runs the correlation of `xp` (`cin` padded channels) with the arranged
/// weights and writes (or adds) the valid region into `out` (`[cout][D][H][W]`).
fn correlate_into<T: Element>(isa: Isa, xp: &[T], cin: usize, dm: Dims, weight: &[T], cout: usize, flip: bool, out: &mut [T], accumulate: bool) {
    let cb = correlate_cb(isa);
    let wt = arrange(weight, if flip { cin } else { cout }, if flip { cout } else { cin }, flip, cb);
    let tvol = dm.d * dm.hr * dm.wr;
    let mut tile = vec![T::zero(); cout.div_ceil(cb) * cb * tvol];
    run_correlate(isa, xp, cin, dm, &wt, &mut tile);
    for co in 0..cout {
        for z in 0..dm.d {
            for y in 0..dm.h {
                let src = &tile[co * tvol + (z * dm.hr + y) * dm.wr..][..dm.w];
                let dst = &mut out[((co * dm.d + z) * dm.h + y) * dm.w..][..dm.w];
                if accumulate {
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
    }
}

fn run_weight_grad<T: Element>(isa: Isa, xp: &[T], cin: usize, dm: Dims, gp: &[T], cout: usize, gw: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx512f,fma")]
        fn avx512<T: Element>(xp: &[T], cin: usize, dm: Dims, gp: &[T], cout: usize, gw: &mut [T]) {
            weight_grad_all::<T, 4, true>(xp, cin, dm, gp, cout, gw)
        }
        #[target_feature(enable = "avx2,fma")]
        fn avx2<T: Element>(xp: &[T], cin: usize, dm: Dims, gp: &[T], cout: usize, gw: &mut [T]) {
            weight_grad_all::<T, 2, true>(xp, cin, dm, gp, cout, gw)
        }
        match isa {
            // SAFETY: both features were detected at runtime by `isa`.
            Isa::Avx512 => return unsafe { avx512(xp, cin, dm, gp, cout, gw) },
            // SAFETY: as above.
            Isa::Avx2 => return unsafe { avx2(xp, cin, dm, gp, cout, gw) },
            Isa::Portable => {}
        }
    }
    weight_grad_all::<T, 2, false>(xp, cin, dm, gp, cout, gw)
}

/// Forward correlation; `out` (`[cout][D][H][W]`) is overwritten.
pub(crate) fn forward<T: Element>(x: &[T], g: &Geometry, weight: &[T], out: &mut [T]) {
    let dm = Dims::new(g.input);
    let isa = isa();
    let xp = pad(x, g.cin, dm);
    correlate_into(isa, &xp, g.cin, dm, weight, g.cout, false, out, false);
}

/// Adjoint of [`forward`] with respect to the input, accumulated into `x`.
pub(crate) fn input_grad<T: Element>(gout: &[T], g: &Geometry, weight: &[T], x: &mut [T]) {
    let dm = Dims::new(g.input);
    let isa = isa();
    let gp = pad(gout, g.cout, dm);
    correlate_into(isa, &gp, g.cout, dm, weight, g.cin, true, x, true);
}

/// Gradient with respect to the weights, accumulated into `gw`
/// (`[cout][cin][27]`).
pub(crate) fn weight_grad<T: Element>(x: &[T], g: &Geometry, gout: &[T], gw: &mut [T]) {
    let dm = Dims::new(g.input);
    let xp = pad(x, g.cin, dm);
    // rounded up to whole channel blocks so every block reads CB channels
    let mut gp = vec![T::zero(); g.cout.div_ceil(4) * 4 * dm.d * dm.h * dm.wr];
    for (dst, src) in gp.chunks_exact_mut(dm.wr).zip(gout.chunks_exact(dm.w)) {
        dst[..dm.w].copy_from_slice(src);
    }
    run_weight_grad(isa(), &xp, g.cin, dm, &gp, g.cout, gw);
}
