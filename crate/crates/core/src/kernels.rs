//! Raw numeric kernels behind the tape operations.
//!
//! Every kernel fixes its floating-point accumulation order so that repeated
//! runs are bit-identical. Convolution accumulates each output element over
//! (kernel row, kernel col, input channel), starting from zero, with padding
//! reads contributing an explicit `0.0`; the bias is added once at the end.
//! The fast paths below only reorganize memory layout (im2col plus blocked
//! dot products with one independent accumulator chain per output element),
//! never the order of additions within an output element.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvShape {
    pub fn infer(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvShape> {
        if input_shape.len() != 4 || weight_shape.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "want 4-d input and weight, got {:?} and {:?}",
                    input_shape, weight_shape
                ),
            ));
        }
        let (n, cin, h, w) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let (cout, wcin, kh, kw) = (
            weight_shape[0],
            weight_shape[1],
            weight_shape[2],
            weight_shape[3],
        );
        if kh != kw || kh % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("only square odd kernels, got {}x{}", kh, kw),
            ));
        }
        if wcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, weight expects {}", cin, wcin),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {} does not fit {}x{} with padding {}",
                    kh, h, w, pad
                ),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kh) / stride + 1;
        Ok(ConvShape {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

const LANES: usize = 8;

/// `acc[l] += w[l] * x` for 8 independent accumulator chains; compiles to one
/// vector multiply and one vector add.
#[inline(always)]
fn lanes_madd<T: Scalar>(acc: &mut [T; LANES], w: &[T; LANES], x: T) {
    for l in 0..LANES {
        acc[l] = acc[l] + w[l] * x;
    }
}

/// 32 accumulator chains (4 blocks of 8 output elements) walked over the same
/// patch. Several blocks in flight hide each chain's add latency without
/// changing any chain's summation order.
#[inline(always)]
fn dot_block4<T: Scalar>(
    row: &[T],
    w0: &[[T; LANES]],
    w1: &[[T; LANES]],
    w2: &[[T; LANES]],
    w3: &[[T; LANES]],
) -> [[T; LANES]; 4] {
    let k = row.len();
    assert!(w0.len() == k && w1.len() == k && w2.len() == k && w3.len() == k);
    let mut acc = [[T::zero(); LANES]; 4];
    for j in 0..k {
        let x = row[j];
        lanes_madd(&mut acc[0], &w0[j], x);
        lanes_madd(&mut acc[1], &w1[j], x);
        lanes_madd(&mut acc[2], &w2[j], x);
        lanes_madd(&mut acc[3], &w3[j], x);
    }
    acc
}

#[inline(always)]
fn dot_block2<T: Scalar>(row: &[T], w0: &[[T; LANES]], w1: &[[T; LANES]]) -> [[T; LANES]; 2] {
    let k = row.len();
    assert!(w0.len() == k && w1.len() == k);
    let mut acc = [[T::zero(); LANES]; 2];
    for j in 0..k {
        let x = row[j];
        lanes_madd(&mut acc[0], &w0[j], x);
        lanes_madd(&mut acc[1], &w1[j], x);
    }
    acc
}

#[inline(always)]
fn dot_block1<T: Scalar>(row: &[T], w0: &[[T; LANES]]) -> [T; LANES] {
    let k = row.len();
    assert!(w0.len() == k);
    let mut acc = [T::zero(); LANES];
    for j in 0..k {
        lanes_madd(&mut acc, &w0[j], row[j]);
    }
    acc
}

/// Two patches against the same two weight blocks: used when the channel
/// count offers fewer than four blocks, trading output positions for the
/// in-flight chains that hide add latency. Result layout: [patch][block].
#[inline(always)]
fn dot_block2x2<T: Scalar>(
    r0: &[T],
    r1: &[T],
    w0: &[[T; LANES]],
    w1: &[[T; LANES]],
) -> [[[T; LANES]; 2]; 2] {
    let k = r0.len();
    assert!(r1.len() == k && w0.len() == k && w1.len() == k);
    let mut acc = [[[T::zero(); LANES]; 2]; 2];
    for j in 0..k {
        let x0 = r0[j];
        let x1 = r1[j];
        lanes_madd(&mut acc[0][0], &w0[j], x0);
        lanes_madd(&mut acc[0][1], &w1[j], x0);
        lanes_madd(&mut acc[1][0], &w0[j], x1);
        lanes_madd(&mut acc[1][1], &w1[j], x1);
    }
    acc
}

/// Four patches against one weight block, for single-block channel counts.
#[inline(always)]
fn dot_block1x4<T: Scalar>(
    r0: &[T],
    r1: &[T],
    r2: &[T],
    r3: &[T],
    w0: &[[T; LANES]],
) -> [[T; LANES]; 4] {
    let k = r0.len();
    assert!(r1.len() == k && r2.len() == k && r3.len() == k && w0.len() == k);
    let mut acc = [[T::zero(); LANES]; 4];
    for j in 0..k {
        let w = &w0[j];
        lanes_madd(&mut acc[0], w, r0[j]);
        lanes_madd(&mut acc[1], w, r1[j]);
        lanes_madd(&mut acc[2], w, r2[j]);
        lanes_madd(&mut acc[3], w, r3[j]);
    }
    acc
}

/// Gather one sample into im2col layout: `col[oy*ow+ox][(ky*k+kx)*cin+ci]`,
/// so a straight walk over a patch row reproduces the fixed accumulation
/// order. Out-of-bounds taps are stored as zero.
fn im2col<T: Scalar>(x: &[T], s: &ConvShape, col: &mut [T]) {
    let plen = s.patch_len();
    for oy in 0..s.oh {
        for ox in 0..s.ow {
            let base = (oy * s.ow + ox) * plen;
            let mut j = base;
            for ky in 0..s.k {
                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                for kx in 0..s.k {
                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                    if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize {
                        let src = iy as usize * s.w + ix as usize;
                        for ci in 0..s.cin {
                            col[j + ci] = x[ci * s.h * s.w + src];
                        }
                    } else {
                        col[j..j + s.cin].fill(T::zero());
                    }
                    j += s.cin;
                }
            }
        }
    }
}

/// Repack `weight[cout][cin][k][k]` as lane-interleaved blocks of 8 output
/// channels in patch order: entry `[blk*plen + j]` holds lanes for output
/// channels `blk*8..blk*8+8`. Channels past `cout` are zero filled.
fn pack_weights<T: Scalar>(weight: &[T], s: &ConvShape) -> Vec<[T; LANES]> {
    let plen = s.patch_len();
    let blocks = s.cout.div_ceil(LANES);
    let mut packed = vec![[T::zero(); LANES]; blocks * plen];
    for co in 0..s.cout {
        let (blk, lane) = (co / LANES, co % LANES);
        for ci in 0..s.cin {
            for ky in 0..s.k {
                for kx in 0..s.k {
                    let j = (ky * s.k + kx) * s.cin + ci;
                    packed[blk * plen + j][lane] =
                        weight[((co * s.cin + ci) * s.k + ky) * s.k + kx];
                }
            }
        }
    }
    packed
}

/// out[n][co][oy][ox] = bias[co] + sum over (ky, kx, ci) of w*x.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], s: &ConvShape) -> Vec<T> {
    let plen = s.patch_len();
    let ohw = s.oh * s.ow;
    let blocks = s.cout.div_ceil(LANES);
    let packed = pack_weights(weight, s);
    let mut out = vec![T::zero(); s.n * s.cout * ohw];
    let mut col = vec![T::zero(); ohw * plen];

    fn write_lanes<T: Scalar>(
        acc: &[T; LANES],
        blk: usize,
        row: usize,
        cout: usize,
        ohw: usize,
        bias: &[T],
        out_n: &mut [T],
    ) {
        for (l, &a) in acc.iter().enumerate() {
            let co = blk * LANES + l;
            if co < cout {
                out_n[co * ohw + row] = a + bias[co];
            }
        }
    }

    for n in 0..s.n {
        im2col(
            &x[n * s.cin * s.h * s.w..(n + 1) * s.cin * s.h * s.w],
            s,
            &mut col,
        );
        let out_n = &mut out[n * s.cout * ohw..(n + 1) * s.cout * ohw];
        let mut blk = 0;
        while blk + 4 <= blocks {
            let w0 = &packed[blk * plen..(blk + 1) * plen];
            let w1 = &packed[(blk + 1) * plen..(blk + 2) * plen];
            let w2 = &packed[(blk + 2) * plen..(blk + 3) * plen];
            let w3 = &packed[(blk + 3) * plen..(blk + 4) * plen];
            for row in 0..ohw {
                let patch = &col[row * plen..(row + 1) * plen];
                let acc = dot_block4(patch, w0, w1, w2, w3);
                for (t, a) in acc.iter().enumerate() {
                    write_lanes(a, blk + t, row, s.cout, ohw, bias, out_n);
                }
            }
            blk += 4;
        }
        if blk + 2 <= blocks {
            let w0 = &packed[blk * plen..(blk + 1) * plen];
            let w1 = &packed[(blk + 1) * plen..(blk + 2) * plen];
            let mut row = 0;
            while row + 2 <= ohw {
                let r0 = &col[row * plen..(row + 1) * plen];
                let r1 = &col[(row + 1) * plen..(row + 2) * plen];
                let acc = dot_block2x2(r0, r1, w0, w1);
                for (r, a) in acc.iter().enumerate() {
                    write_lanes(&a[0], blk, row + r, s.cout, ohw, bias, out_n);
                    write_lanes(&a[1], blk + 1, row + r, s.cout, ohw, bias, out_n);
                }
                row += 2;
            }
            if row < ohw {
                let patch = &col[row * plen..(row + 1) * plen];
                let acc = dot_block2(patch, w0, w1);
                write_lanes(&acc[0], blk, row, s.cout, ohw, bias, out_n);
                write_lanes(&acc[1], blk + 1, row, s.cout, ohw, bias, out_n);
            }
            blk += 2;
        }
        if blk < blocks {
            let w0 = &packed[blk * plen..(blk + 1) * plen];
            let mut row = 0;
            while row + 4 <= ohw {
                let acc = dot_block1x4(
                    &col[row * plen..(row + 1) * plen],
                    &col[(row + 1) * plen..(row + 2) * plen],
                    &col[(row + 2) * plen..(row + 3) * plen],
                    &col[(row + 3) * plen..(row + 4) * plen],
                    w0,
                );
                for (r, a) in acc.iter().enumerate() {
                    write_lanes(a, blk, row + r, s.cout, ohw, bias, out_n);
                }
                row += 4;
            }
            while row < ohw {
                let patch = &col[row * plen..(row + 1) * plen];
                let acc = dot_block1(patch, w0);
                write_lanes(&acc, blk, row, s.cout, ohw, bias, out_n);
                row += 1;
            }
        }
    }
    out
}

/// Accumulates input, weight, and bias gradients for one convolution.
/// `d_input` may be `None` when the input needs no gradient (the network
/// entry layer). All gradient buffers are accumulated into with `+=`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    d_out: &[T],
    s: &ConvShape,
    mut d_input: Option<&mut [T]>,
    d_weight: &mut [T],
    d_bias: &mut [T],
) {
    let plen = s.patch_len();
    let ohw = s.oh * s.ow;
    let mut col = vec![T::zero(); ohw * plen];
    let mut dwp = vec![T::zero(); s.cout * plen];

    // Stride-1 input gradient is itself a stride-1 convolution of d_out with
    // the weight rotated 180 degrees and its channel axes swapped, so it can
    // ride the optimized forward path. Strided convs fall back to the
    // explicit gather/scatter below.
    if s.stride == 1 && s.pad < s.k {
        if let Some(dx) = d_input.take() {
            let mut wr = vec![T::zero(); weight.len()];
            for co in 0..s.cout {
                for ci in 0..s.cin {
                    for ky in 0..s.k {
                        for kx in 0..s.k {
                            wr[((ci * s.cout + co) * s.k + (s.k - 1 - ky)) * s.k
                                + (s.k - 1 - kx)] =
                                weight[((co * s.cin + ci) * s.k + ky) * s.k + kx];
                        }
                    }
                }
            }
            let adj = ConvShape::infer(
                &[s.n, s.cout, s.oh, s.ow],
                &[s.cin, s.cout, s.k, s.k],
                1,
                s.k - 1 - s.pad,
            )
            .expect("adjoint geometry of a valid stride-1 conv");
            debug_assert!(adj.oh == s.h && adj.ow == s.w);
            let zero_bias = vec![T::zero(); s.cin];
            let tmp = conv2d_forward(d_out, &wr, &zero_bias, &adj);
            for (d, t) in dx.iter_mut().zip(tmp) {
                *d = *d + t;
            }
        }
    }

    // Lane-interleaved transpose over patch positions for the d_col pass:
    // entry [jb*cout + co] holds lanes for patch positions jb*8..jb*8+8.
    let jblocks = plen.div_ceil(LANES);
    let need_dx = d_input.is_some();
    let mut wt = vec![[T::zero(); LANES]; if need_dx { jblocks * s.cout } else { 0 }];
    if need_dx {
        for co in 0..s.cout {
            for ci in 0..s.cin {
                for ky in 0..s.k {
                    for kx in 0..s.k {
                        let j = (ky * s.k + kx) * s.cin + ci;
                        wt[(j / LANES) * s.cout + co][j % LANES] =
                            weight[((co * s.cin + ci) * s.k + ky) * s.k + kx];
                    }
                }
            }
        }
    }

    let mut dout_col = vec![T::zero(); s.cout];
    let mut d_colrow = vec![T::zero(); jblocks * LANES];

    for n in 0..s.n {
        im2col(
            &x[n * s.cin * s.h * s.w..(n + 1) * s.cin * s.h * s.w],
            s,
            &mut col,
        );
        let dout_n = &d_out[n * s.cout * ohw..(n + 1) * s.cout * ohw];

        // Bias: row sums in (channel, position) order.
        for co in 0..s.cout {
            let mut acc = T::zero();
            for row in 0..ohw {
                acc = acc + dout_n[co * ohw + row];
            }
            d_bias[co] = d_bias[co] + acc;
        }

        // Weight gradient, packed: dwp[co][j] += d_out[co][row] * col[row][j],
        // four positions combined per sweep to cut read-modify-write traffic.
        // The order is fixed (ascending rows, pairwise grouping), which is all
        // determinism needs; only the forward pass promises a specific chain.
        let mut row = 0;
        while row + 4 <= ohw {
            let c0 = &col[row * plen..(row + 1) * plen];
            let c1 = &col[(row + 1) * plen..(row + 2) * plen];
            let c2 = &col[(row + 2) * plen..(row + 3) * plen];
            let c3 = &col[(row + 3) * plen..(row + 4) * plen];
            for co in 0..s.cout {
                let g0 = dout_n[co * ohw + row];
                let g1 = dout_n[co * ohw + row + 1];
                let g2 = dout_n[co * ohw + row + 2];
                let g3 = dout_n[co * ohw + row + 3];
                let dst = &mut dwp[co * plen..(co + 1) * plen];
                for j in 0..plen {
                    dst[j] = dst[j] + ((g0 * c0[j] + g1 * c1[j]) + (g2 * c2[j] + g3 * c3[j]));
                }
            }
            row += 4;
        }
        while row < ohw {
            let patch = &col[row * plen..(row + 1) * plen];
            for co in 0..s.cout {
                let g = dout_n[co * ohw + row];
                let dst = &mut dwp[co * plen..(co + 1) * plen];
                for (d, &c) in dst.iter_mut().zip(patch) {
                    *d = *d + g * c;
                }
            }
            row += 1;
        }

        // Input gradient: d_col = W^T d_out per position (summed over output
        // channels in ascending order), scattered back through the im2col
        // map; padding taps are dropped.
        if let Some(dx) = d_input.as_deref_mut() {
            let dx_n = &mut dx[n * s.cin * s.h * s.w..(n + 1) * s.cin * s.h * s.w];
            for row in 0..ohw {
                for co in 0..s.cout {
                    dout_col[co] = dout_n[co * ohw + row];
                }
                let mut jb = 0;
                while jb + 4 <= jblocks {
                    let acc = dot_block4(
                        &dout_col,
                        &wt[jb * s.cout..(jb + 1) * s.cout],
                        &wt[(jb + 1) * s.cout..(jb + 2) * s.cout],
                        &wt[(jb + 2) * s.cout..(jb + 3) * s.cout],
                        &wt[(jb + 3) * s.cout..(jb + 4) * s.cout],
                    );
                    for (t, a) in acc.iter().enumerate() {
                        d_colrow[(jb + t) * LANES..(jb + t + 1) * LANES].copy_from_slice(a);
                    }
                    jb += 4;
                }
                if jb + 2 <= jblocks {
                    let acc = dot_block2(
                        &dout_col,
                        &wt[jb * s.cout..(jb + 1) * s.cout],
                        &wt[(jb + 1) * s.cout..(jb + 2) * s.cout],
                    );
                    d_colrow[jb * LANES..(jb + 1) * LANES].copy_from_slice(&acc[0]);
                    d_colrow[(jb + 1) * LANES..(jb + 2) * LANES].copy_from_slice(&acc[1]);
                    jb += 2;
                }
                if jb < jblocks {
                    let acc = dot_block1(&dout_col, &wt[jb * s.cout..(jb + 1) * s.cout]);
                    d_colrow[jb * LANES..(jb + 1) * LANES].copy_from_slice(&acc);
                }
                let (oy, ox) = (row / s.ow, row % s.ow);
                let mut j = 0;
                for ky in 0..s.k {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    for kx in 0..s.k {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize {
                            let dst = iy as usize * s.w + ix as usize;
                            for ci in 0..s.cin {
                                let idx = ci * s.h * s.w + dst;
                                dx_n[idx] = dx_n[idx] + d_colrow[j + ci];
                            }
                        }
                        j += s.cin;
                    }
                }
            }
        }
    }

    // Unpack the accumulated weight gradient into [cout][cin][k][k] layout.
    for co in 0..s.cout {
        for ci in 0..s.cin {
            for ky in 0..s.k {
                for kx in 0..s.k {
                    let j = (ky * s.k + kx) * s.cin + ci;
                    let idx = ((co * s.cin + ci) * s.k + ky) * s.k + kx;
                    d_weight[idx] = d_weight[idx] + dwp[co * plen + j];
                }
            }
        }
    }
}

/// Max pooling with square window `k` and stride `stride`. Returns the output
/// and the flat per-sample-channel argmax index of each window winner; ties go
/// to the first element in row-major window order.
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Result<(Vec<T>, Vec<u32>, usize, usize)> {
    if k == 0
        || stride == 0
        || h < k
        || w < k
        || !(h - k).is_multiple_of(stride)
        || !(w - k).is_multiple_of(stride)
    {
        return Err(Error::dim(
            "maxpool2d",
            format!("window {} stride {} does not tile {}x{}", k, stride, h, w),
        ));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for nc in 0..n * c {
        let xp = &x[nc * h * w..(nc + 1) * h * w];
        let base = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = xp[oy * stride * w + ox * stride];
                let mut best_idx = (oy * stride * w + ox * stride) as u32;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = (oy * stride + ky) * w + ox * stride + kx;
                        if xp[idx] > best {
                            best = xp[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                out[base + oy * ow + ox] = best;
                arg[base + oy * ow + ox] = best_idx;
            }
        }
    }
    Ok((out, arg, oh, ow))
}

#[allow(clippy::too_many_arguments)]
pub fn maxpool_backward<T: Scalar>(
    d_out: &[T],
    arg: &[u32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    d_input: &mut [T],
) {
    for nc in 0..n * c {
        let base = nc * oh * ow;
        let ibase = nc * h * w;
        for o in 0..oh * ow {
            let idx = ibase + arg[base + o] as usize;
            d_input[idx] = d_input[idx] + d_out[base + o];
        }
    }
}

/// Transposed-convolution geometry: kernel `2*factor`, stride `factor`,
/// padding `factor/2`, so the output is exactly `factor` times the input
/// resolution. The weight layout is [cin][cout][k][k].
#[derive(Debug, Clone, Copy)]
pub struct UpShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub factor: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl UpShape {
    pub fn infer(input_shape: &[usize], weight_shape: &[usize], factor: usize) -> Result<UpShape> {
        if input_shape.len() != 4 || weight_shape.len() != 4 {
            return Err(Error::dim("upsample", "want 4-d input and weight"));
        }
        if factor == 0 || !factor.is_multiple_of(2) {
            return Err(Error::dim(
                "upsample",
                format!("factor must be even, got {}", factor),
            ));
        }
        let (n, cin, h, w) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let (wcin, cout, kh, kw) = (
            weight_shape[0],
            weight_shape[1],
            weight_shape[2],
            weight_shape[3],
        );
        if wcin != cin {
            return Err(Error::dim(
                "upsample",
                format!("input has {} channels, weight expects {}", cin, wcin),
            ));
        }
        if kh != 2 * factor || kw != 2 * factor {
            return Err(Error::dim(
                "upsample",
                format!(
                    "factor {} wants kernel {}, got {}x{}",
                    factor,
                    2 * factor,
                    kh,
                    kw
                ),
            ));
        }
        Ok(UpShape {
            n,
            cin,
            h,
            w,
            cout,
            factor,
            k: 2 * factor,
            pad: factor / 2,
            oh: h * factor,
            ow: w * factor,
        })
    }
}

/// out[n][co][oy][ox] = sum over (ky, kx, ci) of w[ci][co][ky][kx] * x[n][ci][iy][ix]
/// where oy = iy*factor + ky - pad and likewise for columns.
pub fn upsample_forward<T: Scalar>(x: &[T], weight: &[T], s: &UpShape) -> Vec<T> {
    let mut out = vec![T::zero(); s.n * s.cout * s.oh * s.ow];
    for n in 0..s.n {
        let xn = &x[n * s.cin * s.h * s.w..];
        let on = &mut out[n * s.cout * s.oh * s.ow..(n + 1) * s.cout * s.oh * s.ow];
        for co in 0..s.cout {
            for oy in 0..s.oh {
                let ty = oy + s.pad;
                for ox in 0..s.ow {
                    let tx = ox + s.pad;
                    let mut acc = T::zero();
                    for ky in 0..s.k {
                        if ty < ky || !(ty - ky).is_multiple_of(s.factor) {
                            continue;
                        }
                        let iy = (ty - ky) / s.factor;
                        if iy >= s.h {
                            continue;
                        }
                        for kx in 0..s.k {
                            if tx < kx || !(tx - kx).is_multiple_of(s.factor) {
                                continue;
                            }
                            let ix = (tx - kx) / s.factor;
                            if ix >= s.w {
                                continue;
                            }
                            for ci in 0..s.cin {
                                acc = acc
                                    + weight[((ci * s.cout + co) * s.k + ky) * s.k + kx]
                                        * xn[ci * s.h * s.w + iy * s.w + ix];
                            }
                        }
                    }
                    on[co * s.oh * s.ow + oy * s.ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    d_out: &[T],
    s: &UpShape,
    d_input: &mut [T],
    d_weight: &mut [T],
) {
    for n in 0..s.n {
        let xn = &x[n * s.cin * s.h * s.w..];
        let dn = &d_out[n * s.cout * s.oh * s.ow..];
        // d_input: adjoint gather over the output grid, (ky, kx, co) order.
        for ci in 0..s.cin {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let mut acc = T::zero();
                    for ky in 0..s.k {
                        let oy = iy * s.factor + ky;
                        if oy < s.pad || oy - s.pad >= s.oh {
                            continue;
                        }
                        for kx in 0..s.k {
                            let ox = ix * s.factor + kx;
                            if ox < s.pad || ox - s.pad >= s.ow {
                                continue;
                            }
                            for co in 0..s.cout {
                                acc = acc
                                    + weight[((ci * s.cout + co) * s.k + ky) * s.k + kx]
                                        * dn[co * s.oh * s.ow + (oy - s.pad) * s.ow + (ox - s.pad)];
                            }
                        }
                    }
                    let idx = n * s.cin * s.h * s.w + ci * s.h * s.w + iy * s.w + ix;
                    d_input[idx] = d_input[idx] + acc;
                }
            }
        }
        // d_weight in (ci, ky, kx, co, iy, ix) order per sample.
        for ci in 0..s.cin {
            for ky in 0..s.k {
                for kx in 0..s.k {
                    for co in 0..s.cout {
                        let mut acc = T::zero();
                        for iy in 0..s.h {
                            let oy = iy * s.factor + ky;
                            if oy < s.pad || oy - s.pad >= s.oh {
                                continue;
                            }
                            for ix in 0..s.w {
                                let ox = ix * s.factor + kx;
                                if ox < s.pad || ox - s.pad >= s.ow {
                                    continue;
                                }
                                acc = acc
                                    + xn[ci * s.h * s.w + iy * s.w + ix]
                                        * dn[co * s.oh * s.ow + (oy - s.pad) * s.ow + (ox - s.pad)];
                            }
                        }
                        let idx = ((ci * s.cout + co) * s.k + ky) * s.k + kx;
                        d_weight[idx] = d_weight[idx] + acc;
                    }
                }
            }
        }
    }
}

/// Per-pixel softmax over the channel axis followed by weighted cross entropy
/// against integer labels, averaged over every pixel of the batch. Returns the
/// scalar loss and the softmax probabilities (kept for the backward pass).
pub fn softmax_ce_forward<T: Scalar>(
    logits: &[T],
    labels: &[u32],
    class_weights: &[T],
    n: usize,
    kc: usize,
    hw: usize,
) -> Result<(T, Vec<T>)> {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for ni in 0..n {
        let base = ni * kc * hw;
        for p in 0..hw {
            let y = labels[ni * hw + p] as usize;
            if y >= kc {
                return Err(Error::Label {
                    label: y,
                    classes: kc,
                });
            }
            let mut m = logits[base + p];
            for c in 1..kc {
                let v = logits[base + c * hw + p];
                if v > m {
                    m = v;
                }
            }
            let mut denom = T::zero();
            for c in 0..kc {
                let e = (logits[base + c * hw + p] - m).exp();
                probs[base + c * hw + p] = e;
                denom = denom + e;
            }
            for c in 0..kc {
                probs[base + c * hw + p] = probs[base + c * hw + p] / denom;
            }
            // -log p[y] written as ln(denom) - (z_y - m) for stability.
            total = total + class_weights[y] * (denom.ln() - (logits[base + y * hw + p] - m));
        }
    }
    let count = T::cast((n * hw) as f64);
    Ok((total / count, probs))
}

#[allow(clippy::too_many_arguments)]
pub fn softmax_ce_backward<T: Scalar>(
    probs: &[T],
    labels: &[u32],
    class_weights: &[T],
    n: usize,
    kc: usize,
    hw: usize,
    upstream: T,
    d_logits: &mut [T],
) {
    let scale = upstream / T::cast((n * hw) as f64);
    for ni in 0..n {
        let base = ni * kc * hw;
        for p in 0..hw {
            let y = labels[ni * hw + p] as usize;
            let wy = class_weights[y] * scale;
            for c in 0..kc {
                let indicator = if c == y { T::one() } else { T::zero() };
                let idx = base + c * hw + p;
                d_logits[idx] = d_logits[idx] + wy * (probs[idx] - indicator);
            }
        }
    }
}

/// Plain (non-tape) softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<T: Scalar>(logits: &[T], n: usize, kc: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for ni in 0..n {
        let base = ni * kc * hw;
        for p in 0..hw {
            let mut m = logits[base + p];
            for c in 1..kc {
                let v = logits[base + c * hw + p];
                if v > m {
                    m = v;
                }
            }
            let mut denom = T::zero();
            for c in 0..kc {
                let e = (logits[base + c * hw + p] - m).exp();
                out[base + c * hw + p] = e;
                denom = denom + e;
            }
            for c in 0..kc {
                out[base + c * hw + p] = out[base + c * hw + p] / denom;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of an NCHW tensor to `out_h` x `out_w`. Each
/// destination cell samples the center of its source window; both dimensions
/// must divide the source exactly, and a same-size resize is the identity.
pub fn nearest_resize<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<T>> {
    if out_h == 0 || out_w == 0 || !h.is_multiple_of(out_h) || !w.is_multiple_of(out_w) {
        return Err(Error::dim(
            "nearest_resize",
            format!("{}x{} does not divide into {}x{}", h, w, out_h, out_w),
        ));
    }
    let (fy, fx) = (h / out_h, w / out_w);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for oy in 0..out_h {
            let sy = oy * fy + fy / 2;
            for ox in 0..out_w {
                let sx = ox * fx + fx / 2;
                dst[oy * out_w + ox] = src[sy * w + sx];
            }
        }
    }
    Ok(out)
}
