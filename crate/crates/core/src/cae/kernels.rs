//! Convolution, pooling and their adjoints on channel-major planes.
//!
//! Tensors are flat `Vec<T>` laid out as `[channel][y][x]`. Convolutions are
//! cross-correlations with zero "same" padding of `r = (k - 1) / 2`; filter
//! sizes are odd.
//!
//! The correlation loops work on blocks of [`BLOCK`] consecutive output
//! pixels held in a fixed-size accumulator so the compiler keeps them in
//! vector registers. Inputs live in [`Padded`] planes whose rows carry the
//! zero border plus enough slack that a block never reads out of bounds.

use crate::scalar::{Lane, Scalar};

/// Output pixels computed per inner block.
pub const BLOCK: usize = 64;

/// Spatial extent of a plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub height: usize,
    pub width: usize,
}

impl Extent {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Extent after `p×p` pooling; partial windows at the right/bottom edge
    /// are kept.
    pub fn pooled(&self, p: usize) -> Extent {
        Extent::new(self.height.div_ceil(p), self.width.div_ceil(p))
    }
}

#[inline(always)]
fn fma<T: Scalar>(a: T, b: T, c: T) -> T {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Extra zeros after every padded row so a lane-rounded filter row starting
/// at the last column stays inside the row.
const ROW_SLACK: usize = 8;

fn block_width(width: usize) -> usize {
    width.div_ceil(BLOCK) * BLOCK
}

/// Planes with a zero border of `radius` pixels and right-hand slack.
#[derive(Debug, Clone, PartialEq)]
pub struct Padded<T> {
    data: Vec<T>,
    channels: usize,
    extent: Extent,
    radius: usize,
    stride: usize,
    rows: usize,
}

impl<T: Scalar> Padded<T> {
    pub fn zeros(channels: usize, extent: Extent, radius: usize) -> Self {
        let stride = block_width(extent.width) + 2 * radius + ROW_SLACK;
        let rows = extent.height + 2 * radius;
        Self { data: vec![T::zero(); channels * stride * rows], channels, extent, radius, stride, rows }
    }

    pub fn from_planes(planes: &[T], channels: usize, extent: Extent, radius: usize) -> Self {
        let mut out = Self::zeros(channels, extent, radius);
        for (c, src) in planes.chunks_exact(extent.len()).take(channels).enumerate() {
            for (y, row) in src.chunks_exact(extent.width).enumerate() {
                let start = out.offset(c, y, 0);
                out.data[start..start + extent.width].copy_from_slice(row);
            }
        }
        out
    }

    #[inline]
    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.rows + y + self.radius) * self.stride + x + self.radius
    }

    fn plane(&self, c: usize) -> &[T] {
        let n = self.stride * self.rows;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Value at unpadded coordinates.
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(c, y, x);
        self.data[o] = v;
    }

    /// Unpadded `[channel][y][x]` copy.
    pub fn to_planes(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.channels * self.extent.len());
        for c in 0..self.channels {
            for y in 0..self.extent.height {
                let start = self.offset(c, y, 0);
                out.extend_from_slice(&self.data[start..start + self.extent.width]);
            }
        }
        out
    }
}

/// Like [`dispatch_k`] for kernels that treat `K == 0` as "read the filter
/// size from the trailing runtime argument".
macro_rules! dispatch_k0 {
    ($k:expr, $f:ident, ($($arg:expr),*)) => {
        match $k {
            1 => $f::<T, 1>($($arg,)* 1),
            3 => $f::<T, 3>($($arg,)* 3),
            5 => $f::<T, 5>($($arg,)* 5),
            7 => $f::<T, 7>($($arg,)* 7),
            9 => $f::<T, 9>($($arg,)* 9),
            11 => $f::<T, 11>($($arg,)* 11),
            13 => $f::<T, 13>($($arg,)* 13),
            15 => $f::<T, 15>($($arg,)* 15),
            k => $f::<T, 0>($($arg,)* k),
        }
    };
}

/// Dispatches to a kernel monomorphized on the filter size for the sizes
/// that matter, and to the dynamic fallback otherwise.
macro_rules! dispatch_k {
    ($k:expr, $fast:ident, $slow:ident, ($($arg:expr),*)) => {
        match $k {
            1 => $fast::<T, 1>($($arg),*),
            3 => $fast::<T, 3>($($arg),*),
            5 => $fast::<T, 5>($($arg),*),
            7 => $fast::<T, 7>($($arg),*),
            9 => $fast::<T, 9>($($arg),*),
            11 => $fast::<T, 11>($($arg),*),
            13 => $fast::<T, 13>($($arg),*),
            15 => $fast::<T, 15>($($arg),*),
            _ => $slow($($arg,)* $k),
        }
    };
}

/// Same-padded cross-correlation.
///
/// `weights` is `[out][in][k][k]` and `input.radius()` must be `k / 2`.
/// Returns `[out][y][x]`, plus `bias[out]` when given.
pub fn conv_forward<T: Scalar>(
    input: &Padded<T>,
    weights: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    k: usize,
) -> Vec<T> {
    assert_eq!(input.radius, k / 2, "padding radius must match the filter");
    assert_eq!(weights.len(), out_channels * input.channels * k * k, "weight bank shape");
    let mut out = vec![T::zero(); out_channels * input.extent.len()];
    dispatch_k!(k, forward_fixed, forward_dyn, (input, weights, bias, out_channels, &mut out));
    out
}

/// Lane vectors per output tile of the forward kernel.
const TILE_VECS: usize = 8;

fn forward_fixed<T: Scalar, const K: usize>(
    input: &Padded<T>,
    weights: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    out: &mut [T],
) {
    let full = out_channels / 3 * 3;
    for co in (0..full).step_by(3) {
        forward_tiles::<T, K, 3>(input, weights, bias, co, out);
    }
    match out_channels - full {
        1 => forward_tiles::<T, K, 1>(input, weights, bias, full, out),
        2 => forward_tiles::<T, K, 2>(input, weights, bias, full, out),
        _ => {}
    }
}

/// Output channels `co0..co0 + CB` of [`forward_fixed`]; the channels share
/// every input load.
#[inline(always)]
fn forward_tiles<T: Scalar, const K: usize, const CB: usize>(
    input: &Padded<T>,
    weights: &[T],
    bias: Option<&[T]>,
    co0: usize,
    out: &mut [T],
) {
    let width = T::Lane::WIDTH;
    let tile = TILE_VECS * width;
    debug_assert_eq!(BLOCK % tile, 0);
    let cin = input.channels;
    let Extent { height: h, width: w } = input.extent;
    let stride = input.stride;
    let bank_len = cin * K * K;
    let mut buf = vec![T::zero(); tile];
    for y in 0..h {
        for x0 in (0..w).step_by(tile) {
            let mut acc = [[T::Lane::splat(T::zero()); TILE_VECS]; CB];
            for (b, a) in acc.iter_mut().enumerate() {
                *a = [T::Lane::splat(bias.map_or(T::zero(), |bias| bias[co0 + b])); TILE_VECS];
            }
            for ci in 0..cin {
                let plane = input.plane(ci);
                for i in 0..K {
                    let base = (y + i) * stride + x0;
                    let row = &plane[base..base + tile + K - 1];
                    let mut krows = [[T::zero(); K]; CB];
                    for (b, kr) in krows.iter_mut().enumerate() {
                        let start = (co0 + b) * bank_len + (ci * K + i) * K;
                        kr.copy_from_slice(&weights[start..start + K]);
                    }
                    for j in 0..K {
                        let src = &row[j..j + tile];
                        let mut wv = [T::Lane::splat(T::zero()); CB];
                        for (b, w) in wv.iter_mut().enumerate() {
                            *w = T::Lane::splat(krows[b][j]);
                        }
                        for v in 0..TILE_VECS {
                            let x = T::Lane::load(&src[v * width..]);
                            for b in 0..CB {
                                acc[b][v] = x.mul_add(wv[b], acc[b][v]);
                            }
                        }
                    }
                }
            }
            let n = tile.min(w - x0);
            for (b, a) in acc.iter().enumerate() {
                for (v, lane) in a.iter().enumerate() {
                    lane.store(&mut buf[v * width..]);
                }
                let start = ((co0 + b) * h + y) * w + x0;
                out[start..start + n].copy_from_slice(&buf[..n]);
            }
        }
    }
}

fn forward_dyn<T: Scalar>(
    input: &Padded<T>,
    weights: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    out: &mut [T],
    k: usize,
) {
    let cin = input.channels;
    let Extent { height: h, width: w } = input.extent;
    for co in 0..out_channels {
        let b = bias.map_or(T::zero(), |b| b[co]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = b;
                for ci in 0..cin {
                    let plane = input.plane(ci);
                    for i in 0..k {
                        let row = &plane[(y + i) * input.stride + x..][..k];
                        let krow = &weights[((co * cin + ci) * k + i) * k..][..k];
                        for (&wv, &v) in krow.iter().zip(row) {
                            acc = fma(wv, v, acc);
                        }
                    }
                }
                out[(co * h + y) * w + x] = acc;
            }
        }
    }
}

/// Swaps the in/out axes of a weight bank and rotates every kernel by 180°.
pub fn transpose_flip<T: Scalar>(weights: &[T], out_channels: usize, in_channels: usize, k: usize) -> Vec<T> {
    let kk = k * k;
    let mut t = vec![T::zero(); weights.len()];
    for co in 0..out_channels {
        for ci in 0..in_channels {
            let src = &weights[(co * in_channels + ci) * kk..][..kk];
            let dst = &mut t[(ci * out_channels + co) * kk..][..kk];
            for (d, &s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = s;
            }
        }
    }
    t
}

/// Gradient of a same-padded correlation with respect to its input.
pub fn conv_input_grad<T: Scalar>(
    grad_out: &[T],
    out_channels: usize,
    extent: Extent,
    weights: &[T],
    in_channels: usize,
    k: usize,
) -> Vec<T> {
    let padded = Padded::from_planes(grad_out, out_channels, extent, k / 2);
    let flipped = transpose_flip(weights, out_channels, in_channels, k);
    conv_forward(&padded, &flipped, None, in_channels, k)
}

/// [`conv_input_grad`] followed by [`gather_active`], evaluated only at the
/// switch positions of active pooled cells.
#[allow(clippy::too_many_arguments)]
pub fn conv_input_grad_at_switches<T: Scalar>(
    grad_out: &[T],
    out_channels: usize,
    extent: Extent,
    weights: &[T],
    in_channels: usize,
    k: usize,
    pooled: &[T],
    switches: &[u32],
) -> Vec<T> {
    let padded = Padded::from_planes(grad_out, out_channels, extent, k / 2);
    let flipped = transpose_flip(weights, out_channels, in_channels, k);
    let mut out = vec![T::zero(); pooled.len()];
    let sparse = Sparse { padded: &padded, flipped: &flipped, in_channels, pooled, switches };
    dispatch_k!(k, gather_fixed, gather_dyn, (&sparse, &mut out));
    out
}

struct Sparse<'a, T> {
    padded: &'a Padded<T>,
    /// `[in][out][k][k]`
    flipped: &'a [T],
    in_channels: usize,
    pooled: &'a [T],
    switches: &'a [u32],
}

impl<T: Scalar> Sparse<'_, T> {
    /// Calls `f(cell, window)` for every active pooled cell, where `window`
    /// starts at the top-left corner of the filter footprint in plane 0.
    #[inline(always)]
    fn for_each_active(&self, mut f: impl FnMut(usize, usize, &[T])) {
        let n = self.pooled.len() / self.in_channels;
        let w = self.padded.extent.width;
        for ci in 0..self.in_channels {
            for q in 0..n {
                let cell = ci * n + q;
                if self.pooled[cell] > T::zero() {
                    let s = self.switches[cell] as usize;
                    let corner = (s / w) * self.padded.stride + s % w;
                    f(ci, cell, &self.padded.data[corner..]);
                }
            }
        }
    }
}

fn gather_fixed<T: Scalar, const K: usize>(sp: &Sparse<'_, T>, out: &mut [T]) {
    let width = T::Lane::WIDTH;
    let kp = K.div_ceil(width) * width;
    let cout = sp.padded.channels;
    let plane = sp.padded.rows * sp.padded.stride;
    let stride = sp.padded.stride;
    let bank = pad_rows(sp.flipped, K, kp);
    sp.for_each_active(|ci, cell, window| {
        let filters = &bank[ci * cout * K * kp..(ci + 1) * cout * K * kp];
        let span = (cout - 1) * plane + (K - 1) * stride + kp;
        let window = &window[..span];
        let mut acc = [T::Lane::splat(T::zero()); K];
        for (co, fco) in filters.chunks_exact(K * kp).enumerate() {
            for (i, a) in acc.iter_mut().enumerate() {
                let row = &window[co * plane + i * stride..][..kp];
                let wrow = &fco[i * kp..][..kp];
                for (x, wv) in row.chunks_exact(width).zip(wrow.chunks_exact(width)) {
                    *a = T::Lane::load(x).mul_add(T::Lane::load(wv), *a);
                }
            }
        }
        out[cell] = acc.iter().map(|a| a.sum()).sum();
    });
}

fn gather_dyn<T: Scalar>(sp: &Sparse<'_, T>, out: &mut [T], k: usize) {
    let cout = sp.padded.channels;
    let plane = sp.padded.rows * sp.padded.stride;
    let stride = sp.padded.stride;
    sp.for_each_active(|ci, cell, window| {
        let mut acc = T::zero();
        for co in 0..cout {
            for i in 0..k {
                let row = &window[co * plane + i * stride..][..k];
                let wrow = &sp.flipped[((ci * cout + co) * k + i) * k..][..k];
                for (&x, &wv) in row.iter().zip(wrow) {
                    acc = fma(x, wv, acc);
                }
            }
        }
        out[cell] = acc;
    });
}

/// Pooled cells that carry a nonzero value and, when `mask` is given, have
/// a positive mask entry: `(channel, switch position, value)`.
fn active_cells<'a, T: Scalar>(
    values: &'a [T],
    mask: Option<&'a [T]>,
    switches: &'a [u32],
    channels: usize,
) -> impl Iterator<Item = (usize, usize, T)> + 'a {
    let n = values.len() / channels;
    values.iter().zip(switches).enumerate().filter_map(move |(cell, (&v, &s))| {
        let active = v != T::zero() && mask.map_or(true, |m| m[cell] > T::zero());
        active.then_some((cell / n, s as usize, v))
    })
}

/// Geometry of a filter footprint inside a [`Padded`] tensor. Row
/// `t = channel * k + i` of the footprint whose top-left corner sits at
/// `corner` starts at `corner + offset(t)`; rows are `kp` wide, the filter
/// width rounded up to whole lanes.
#[derive(Clone, Copy)]
struct Footprint {
    k: usize,
    kp: usize,
    plane: usize,
    stride: usize,
    channels: usize,
}

impl Footprint {
    fn new<T: Scalar>(padded: &Padded<T>, k: usize) -> Self {
        let kp = k.div_ceil(T::Lane::WIDTH) * T::Lane::WIDTH;
        Self { k, kp, plane: padded.rows * padded.stride, stride: padded.stride, channels: padded.channels }
    }

    #[inline(always)]
    fn rows(&self) -> usize {
        self.channels * self.k
    }

    #[inline(always)]
    fn offset(&self, t: usize) -> usize {
        (t / self.k) * self.plane + (t % self.k) * self.stride
    }

    /// Top-left corner of the footprint of unpadded pixel `s` in a plane
    /// `width` pixels wide.
    #[inline(always)]
    fn corner(&self, s: usize, width: usize) -> usize {
        (s / width) * self.stride + s % width
    }

    /// Length of data the footprint spans from its corner.
    fn span(&self) -> usize {
        self.offset(self.rows() - 1) + self.kp
    }
}

/// `K` rows of filter width as a compile-time constant where possible.
#[inline(always)]
fn const_or<const K: usize>(k: usize) -> usize {
    if K == 0 {
        k
    } else {
        K
    }
}

/// Pads `[..][k]` filter rows to `kp` values with zeros.
fn pad_rows<T: Scalar>(rows: &[T], k: usize, kp: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows.len() / k * kp];
    for (dst, src) in out.chunks_exact_mut(kp).zip(rows.chunks_exact(k)) {
        dst[..k].copy_from_slice(src);
    }
    out
}

/// Adds `v · footprint(s)` of `padded` into `acc` (`[rows][kp]`) for every
/// active cell, with `acc` chosen per cell channel.
#[allow(clippy::too_many_arguments)]
fn accumulate_fixed<T: Scalar, const K: usize>(
    values: &[T],
    mask: Option<&[T]>,
    switches: &[u32],
    channels: usize,
    width_px: usize,
    padded: &Padded<T>,
    fp: Footprint,
    acc: &mut [T],
    k: usize,
) {
    let k = const_or::<K>(k);
    let width = T::Lane::WIDTH;
    let fp = Footprint { k, kp: k.div_ceil(width) * width, ..fp };
    let per_channel = fp.rows() * fp.kp;
    let span = fp.span();
    for (c, s, v) in active_cells(values, mask, switches, channels) {
        let vv = T::Lane::splat(v);
        let corner = fp.corner(s, width_px);
        let window = &padded.data[corner..corner + span];
        let dst = &mut acc[c * per_channel..(c + 1) * per_channel];
        for (t, arow) in dst.chunks_exact_mut(fp.kp).enumerate() {
            let row = &window[fp.offset(t)..][..fp.kp];
            for (a, x) in arow.chunks_exact_mut(width).zip(row.chunks_exact(width)) {
                T::Lane::load(x).mul_add(vv, T::Lane::load(a)).store(a);
            }
        }
    }
}

fn add_bias_grad<T: Scalar>(grad_out: &[T], out_channels: usize, grad_bias: &mut [T]) {
    let n = grad_out.len() / out_channels;
    for (gb, plane) in grad_bias.iter_mut().zip(grad_out.chunks_exact(n)) {
        *gb += plane.iter().copied().sum::<T>();
    }
}

/// [`conv_weight_grad`] where the layer input is `unpool(values, switches)`.
#[allow(clippy::too_many_arguments)]
pub fn unpooled_weight_grad<T: Scalar>(
    values: &[T],
    switches: &[u32],
    in_channels: usize,
    extent: Extent,
    grad_out: &[T],
    out_channels: usize,
    k: usize,
    grad_weights: &mut [T],
    grad_bias: &mut [T],
) {
    add_bias_grad(grad_out, out_channels, grad_bias);
    let gpad = Padded::from_planes(grad_out, out_channels, extent, k / 2);
    let fp = Footprint::new(&gpad, k);
    // `[in][out][i][kp]` of the flipped weight gradient.
    let mut acc = vec![T::zero(); in_channels * fp.rows() * fp.kp];
    dispatch_k0!(k, accumulate_fixed, (values, None, switches, in_channels, extent.width, &gpad, fp, &mut acc));
    for ci in 0..in_channels {
        for co in 0..out_channels {
            for i in 0..k {
                let row = &acc[((ci * out_channels + co) * k + (k - 1 - i)) * fp.kp..][..k];
                for j in 0..k {
                    grad_weights[((co * in_channels + ci) * k + i) * k + j] += row[k - 1 - j];
                }
            }
        }
    }
}

/// [`conv_weight_grad`] where the output gradient is
/// `scatter_active(grad_pooled, pooled, switches)`.
#[allow(clippy::too_many_arguments)]
pub fn switch_weight_grad<T: Scalar>(
    input: &Padded<T>,
    grad_pooled: &[T],
    pooled: &[T],
    switches: &[u32],
    out_channels: usize,
    k: usize,
    grad_weights: &mut [T],
    grad_bias: &mut [T],
) {
    assert_eq!(input.radius, k / 2, "padding radius must match the filter");
    let n = pooled.len() / out_channels;
    for (co, gb) in grad_bias.iter_mut().enumerate().take(out_channels) {
        let cells = co * n..(co + 1) * n;
        *gb += grad_pooled[cells.clone()]
            .iter()
            .zip(&pooled[cells])
            .filter(|(_, &p)| p > T::zero())
            .map(|(&g, _)| g)
            .sum::<T>();
    }
    let fp = Footprint::new(input, k);
    // `[out][in][i][kp]`
    let mut acc = vec![T::zero(); out_channels * fp.rows() * fp.kp];
    dispatch_k0!(k, accumulate_fixed, (grad_pooled, Some(pooled), switches, out_channels, input.extent.width, input, fp, &mut acc));
    for (row, dst) in acc.chunks_exact(fp.kp).zip(grad_weights.chunks_exact_mut(k)) {
        for (d, &a) in dst.iter_mut().zip(row) {
            *d += a;
        }
    }
}

/// Accumulates the weight and bias gradients of a same-padded correlation.
pub fn conv_weight_grad<T: Scalar>(
    input: &Padded<T>,
    grad_out: &[T],
    out_channels: usize,
    k: usize,
    grad_weights: &mut [T],
    grad_bias: &mut [T],
) {
    assert_eq!(input.radius, k / 2, "padding radius must match the filter");
    let extent = input.extent;
    let Extent { height: h, width: w } = extent;
    for (co, gb) in grad_bias.iter_mut().enumerate().take(out_channels) {
        *gb += grad_out[co * extent.len()..(co + 1) * extent.len()].iter().copied().sum::<T>();
    }
    // Gradient rows padded with zeros to a whole number of lanes.
    let gstride = w.div_ceil(LANES) * LANES;
    let mut g = vec![T::zero(); out_channels * h * gstride];
    for (src, dst) in grad_out.chunks_exact(w).zip(g.chunks_exact_mut(gstride)) {
        dst[..w].copy_from_slice(src);
    }
    dispatch_k!(k, weight_grad_fixed, weight_grad_dyn, (input, &g, gstride, out_channels, grad_weights));
}

/// Gradient rows are padded to a multiple of this many values, which
/// every lane width divides.
const LANES: usize = 8;

fn weight_grad_fixed<T: Scalar, const K: usize>(
    input: &Padded<T>,
    g: &[T],
    gstride: usize,
    out_channels: usize,
    grad_weights: &mut [T],
) {
    let width = T::Lane::WIDTH;
    debug_assert_eq!(LANES % width, 0);
    let cin = input.channels;
    let h = input.extent.height;
    let stride = input.stride;
    for co in 0..out_channels {
        let gplane = &g[co * h * gstride..(co + 1) * h * gstride];
        for ci in 0..cin {
            let plane = input.plane(ci);
            let gk = &mut grad_weights[(co * cin + ci) * K * K..][..K * K];
            for i in 0..K {
                let mut acc = [T::Lane::splat(T::zero()); K];
                for y in 0..h {
                    let grow = &gplane[y * gstride..(y + 1) * gstride];
                    let base = (y + i) * stride;
                    let irow = &plane[base..base + gstride + K - 1];
                    for (c, gchunk) in grow.chunks_exact(width).enumerate() {
                        let gl = T::Lane::load(gchunk);
                        let src = &irow[c * width..c * width + width + K - 1];
                        for (j, a) in acc.iter_mut().enumerate() {
                            *a = T::Lane::load(&src[j..]).mul_add(gl, *a);
                        }
                    }
                }
                for (j, a) in acc.iter().enumerate() {
                    gk[i * K + j] += a.sum();
                }
            }
        }
    }
}

fn weight_grad_dyn<T: Scalar>(
    input: &Padded<T>,
    g: &[T],
    gstride: usize,
    out_channels: usize,
    grad_weights: &mut [T],
    k: usize,
) {
    let cin = input.channels;
    let Extent { height: h, width: w } = input.extent;
    for co in 0..out_channels {
        for ci in 0..cin {
            let plane = input.plane(ci);
            for i in 0..k {
                for j in 0..k {
                    let mut acc = T::zero();
                    for y in 0..h {
                        let grow = &g[(co * h + y) * gstride..][..w];
                        let irow = &plane[(y + i) * input.stride + j..][..w];
                        for (&gv, &iv) in grow.iter().zip(irow) {
                            acc = fma(gv, iv, acc);
                        }
                    }
                    grad_weights[((co * cin + ci) * k + i) * k + j] += acc;
                }
            }
        }
    }
}

/// Rectified linear unit in place.
pub fn relu_in_place<T: Scalar>(values: &mut [T]) {
    for v in values {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Non-overlapping `p×p` max pooling.
///
/// Returns pooled values and, per pooled cell, the in-plane linear index of
/// the first maximum in row-major window order. Windows that extend past the
/// right/bottom edge only look at in-range pixels, which is what pooling an
/// edge-replicated plane yields: a replicated copy never beats the original
/// it was copied from, and the original comes first in window order.
pub fn max_pool<T: Scalar>(input: &[T], channels: usize, extent: Extent, p: usize) -> (Vec<T>, Vec<u32>) {
    let pooled = extent.pooled(p);
    let mut values = Vec::with_capacity(channels * pooled.len());
    let mut switches = Vec::with_capacity(channels * pooled.len());
    for plane in input.chunks_exact(extent.len()).take(channels) {
        for py in 0..pooled.height {
            let y0 = py * p;
            let y1 = (y0 + p).min(extent.height);
            for px in 0..pooled.width {
                let x0 = px * p;
                let x1 = (x0 + p).min(extent.width);
                let mut best_idx = y0 * extent.width + x0;
                let mut best = plane[best_idx];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = y * extent.width + x;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                switches.push(best_idx as u32);
            }
        }
    }
    (values, switches)
}

/// Scatters each pooled value back to its switch position; zeros elsewhere.
pub fn unpool<T: Scalar>(pooled: &[T], switches: &[u32], channels: usize, extent: Extent) -> Vec<T> {
    let mut out = vec![T::zero(); channels * extent.len()];
    scatter(pooled, switches, channels, extent, |c, s, v| out[c * extent.len() + s] = v);
    out
}

/// [`unpool`] straight into a zero-bordered buffer.
pub fn unpool_padded<T: Scalar>(
    pooled: &[T],
    switches: &[u32],
    channels: usize,
    extent: Extent,
    radius: usize,
) -> Padded<T> {
    let mut out = Padded::zeros(channels, extent, radius);
    scatter(pooled, switches, channels, extent, |c, s, v| out.set(c, s / extent.width, s % extent.width, v));
    out
}

fn scatter<T: Scalar>(
    pooled: &[T],
    switches: &[u32],
    channels: usize,
    _extent: Extent,
    mut put: impl FnMut(usize, usize, T),
) {
    let n = pooled.len() / channels;
    for c in 0..channels {
        for q in 0..n {
            put(c, switches[c * n + q] as usize, pooled[c * n + q]);
        }
    }
}

/// Adjoint of [`unpool`] restricted to active cells: reads `grad` at each
/// switch position for pooled cells whose value is positive, zero for the
/// rest. Every pooled tensor here is a ReLU output and the ReLU subgradient
/// at zero is zero.
pub fn gather_active<T: Scalar>(
    grad: &[T],
    pooled: &[T],
    switches: &[u32],
    channels: usize,
    extent: Extent,
) -> Vec<T> {
    let n = pooled.len() / channels;
    let mut out = vec![T::zero(); pooled.len()];
    for c in 0..channels {
        for q in 0..n {
            if pooled[c * n + q] > T::zero() {
                out[c * n + q] = grad[c * extent.len() + switches[c * n + q] as usize];
            }
        }
    }
    out
}

/// Adjoint of [`gather_active`]: a dense plane holding each active pooled
/// cell's gradient at its switch position.
pub fn scatter_active<T: Scalar>(
    grad_pooled: &[T],
    pooled: &[T],
    switches: &[u32],
    channels: usize,
    extent: Extent,
) -> Vec<T> {
    let n = pooled.len() / channels;
    let mut out = vec![T::zero(); channels * extent.len()];
    for c in 0..channels {
        for q in 0..n {
            if pooled[c * n + q] > T::zero() {
                out[c * extent.len() + switches[c * n + q] as usize] = grad_pooled[c * n + q];
            }
        }
    }
    out
}
