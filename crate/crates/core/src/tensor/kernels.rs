//! Raw forward/backward kernels over flat `f32` buffers.
//!
//! The tape validates shapes before calling into here, so these functions
//! assume consistent arguments.

use super::Shape;

/// Convolution geometry. Padding is always `dilation * (k - 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn padding(&self, k: usize) -> usize {
        self.dilation * (k - 1) / 2
    }

    pub fn out_len(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.padding(k) - self.dilation * (k - 1) - 1) / self.stride + 1
    }

    pub fn out_shape(&self, input: Shape, weight: Shape) -> Shape {
        let k = weight.h();
        Shape::new(
            input.n(),
            weight.n(),
            self.out_len(input.h(), k),
            self.out_len(input.w(), k),
        )
    }
}

/// Range of output columns whose source column `ox*stride + off` lands in
/// `[0, width)`, for `off = kx*dilation - pad`.
#[inline]
fn valid_range(off: isize, stride: usize, width: usize, out_w: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest ox with ox*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest ox with ox*s + off <= width-1
    let hi_incl = (width as isize - 1 - off).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, out_w as isize);
    (lo.min(hi).max(0) as usize, hi as usize)
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

/// Unfolds one `(sample, group)` slice of the input into rows of
/// `cpg * k * k` by `out_plane`, zero where the tap falls in padding.
#[allow(clippy::too_many_arguments)]
fn im2col(src: &[f32], xs: Shape, ys: Shape, cpg: usize, k: usize, pad: isize, g: ConvGeom, col: &mut [f32]) {
    let (in_plane, out_plane) = (xs.plane(), ys.plane());
    for cl in 0..cpg {
        let plane = &src[cl * in_plane..][..in_plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((cl * k + ky) * k + kx) * out_plane..][..out_plane];
                let offy = (ky * g.dilation) as isize - pad;
                let offx = (kx * g.dilation) as isize - pad;
                let (x_lo, x_hi) = valid_range(offx, g.stride, xs.w(), ys.w());
                for oy in 0..ys.h() {
                    let out = &mut row[oy * ys.w()..][..ys.w()];
                    let iy = (oy * g.stride) as isize + offy;
                    if iy < 0 || iy >= xs.h() as isize || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let line = &plane[iy as usize * xs.w()..][..xs.w()];
                    if g.stride == 1 {
                        let start = (x_lo as isize + offx) as usize;
                        out[x_lo..x_hi].copy_from_slice(&line[start..start + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            out[ox] = line[((ox * g.stride) as isize + offx) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f32], xs: Shape, ys: Shape, cpg: usize, k: usize, pad: isize, g: ConvGeom, dst: &mut [f32]) {
    let (in_plane, out_plane) = (xs.plane(), ys.plane());
    for cl in 0..cpg {
        let plane = &mut dst[cl * in_plane..][..in_plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((cl * k + ky) * k + kx) * out_plane..][..out_plane];
                let offy = (ky * g.dilation) as isize - pad;
                let offx = (kx * g.dilation) as isize - pad;
                let (x_lo, x_hi) = valid_range(offx, g.stride, xs.w(), ys.w());
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..ys.h() {
                    let iy = (oy * g.stride) as isize + offy;
                    if iy < 0 || iy >= xs.h() as isize {
                        continue;
                    }
                    let gin = &row[oy * ys.w()..][..ys.w()];
                    let line = &mut plane[iy as usize * xs.w()..][..xs.w()];
                    if g.stride == 1 {
                        let start = (x_lo as isize + offx) as usize;
                        for (d, s) in line[start..start + (x_hi - x_lo)].iter_mut().zip(&gin[x_lo..x_hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in x_lo..x_hi {
                            line[((ox * g.stride) as isize + offx) as usize] += gin[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Whether the input slice can serve directly as the column matrix.
fn is_pointwise(k: usize, g: ConvGeom) -> bool {
    k == 1 && g.stride == 1
}

pub fn conv2d_forward(
    x: &[f32],
    xs: Shape,
    w: &[f32],
    ws: Shape,
    bias: Option<&[f32]>,
    g: ConvGeom,
) -> (Vec<f32>, Shape) {
    let ys = g.out_shape(xs, ws);
    let k = ws.h();
    let pad = g.padding(k) as isize;
    let cpg = ws.c();
    let opg = ws.n() / g.groups;
    let (in_plane, out_plane) = (xs.plane(), ys.plane());
    let taps = cpg * k * k;
    let mut y = vec![0.0f32; ys.numel()];
    let mut col = vec![0.0f32; if is_pointwise(k, g) { 0 } else { taps * out_plane }];
    for n in 0..ys.n() {
        for grp in 0..g.groups {
            let src = &x[(n * xs.c() + grp * cpg) * in_plane..][..cpg * in_plane];
            let cols: &[f32] = if is_pointwise(k, g) {
                src
            } else {
                im2col(src, xs, ys, cpg, k, pad, g, &mut col);
                &col
            };
            for o in grp * opg..(grp + 1) * opg {
                let dst = &mut y[(n * ys.c() + o) * out_plane..][..out_plane];
                if let Some(b) = bias {
                    dst.fill(b[o]);
                }
                for (j, wv) in w[o * taps..(o + 1) * taps].iter().enumerate() {
                    axpy(*wv, &cols[j * out_plane..][..out_plane], dst);
                }
            }
        }
    }
    (y, ys)
}

/// Gradients of a convolution. Returns `(dx, dw, db)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    xs: Shape,
    w: &[f32],
    ws: Shape,
    dy: &[f32],
    ys: Shape,
    g: ConvGeom,
    with_bias: bool,
) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
    let k = ws.h();
    let pad = g.padding(k) as isize;
    let cpg = ws.c();
    let opg = ws.n() / g.groups;
    let (in_plane, out_plane) = (xs.plane(), ys.plane());
    let taps = cpg * k * k;
    let mut dx = vec![0.0f32; xs.numel()];
    let mut dw = vec![0.0f32; ws.numel()];
    let pointwise = is_pointwise(k, g);
    let mut col = vec![0.0f32; if pointwise { 0 } else { taps * out_plane }];
    let mut dcol = vec![0.0f32; if pointwise { 0 } else { taps * out_plane }];
    for n in 0..ys.n() {
        for grp in 0..g.groups {
            let off = (n * xs.c() + grp * cpg) * in_plane;
            let src = &x[off..][..cpg * in_plane];
            if !pointwise {
                im2col(src, xs, ys, cpg, k, pad, g, &mut col);
                dcol.fill(0.0);
            }
            for o in grp * opg..(grp + 1) * opg {
                let gy = &dy[(n * ys.c() + o) * out_plane..][..out_plane];
                for j in 0..taps {
                    let widx = o * taps + j;
                    if pointwise {
                        dw[widx] += dot(&src[j * out_plane..][..out_plane], gy);
                        axpy(w[widx], gy, &mut dx[off + j * in_plane..][..in_plane]);
                    } else {
                        dw[widx] += dot(&col[j * out_plane..][..out_plane], gy);
                        axpy(w[widx], gy, &mut dcol[j * out_plane..][..out_plane]);
                    }
                }
            }
            if !pointwise {
                col2im(&dcol, xs, ys, cpg, k, pad, g, &mut dx[off..][..cpg * in_plane]);
            }
        }
    }
    let db = with_bias.then(|| {
        let mut db = vec![0.0f32; ys.c()];
        for n in 0..ys.n() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dy[(n * ys.c() + o) * out_plane..][..out_plane]
                    .iter()
                    .sum::<f32>();
            }
        }
        db
    });
    (dx, dw, db)
}

/// Per `(sample, group)` mean and reciprocal standard deviation.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub fn group_norm_forward(
    x: &[f32],
    xs: Shape,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, GroupStats) {
    let cpg = xs.c() / groups;
    let plane = xs.plane();
    let span = cpg * plane;
    let mut y = vec![0.0f32; xs.numel()];
    let mut mean = Vec::with_capacity(xs.n() * groups);
    let mut rstd = Vec::with_capacity(xs.n() * groups);
    for n in 0..xs.n() {
        for gi in 0..groups {
            let start = (n * xs.c() + gi * cpg) * plane;
            let seg = &x[start..start + span];
            let m = seg.iter().map(|v| *v as f64).sum::<f64>() / span as f64;
            let var = seg
                .iter()
                .map(|v| {
                    let d = *v as f64 - m;
                    d * d
                })
                .sum::<f64>()
                / span as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            mean.push(m as f32);
            rstd.push(r as f32);
            for cl in 0..cpg {
                let c = gi * cpg + cl;
                let off = start + cl * plane;
                for i in off..off + plane {
                    let xhat = ((x[i] as f64 - m) * r) as f32;
                    y[i] = xhat * gamma[c] + beta[c];
                }
            }
        }
    }
    (y, GroupStats { mean, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    x: &[f32],
    xs: Shape,
    groups: usize,
    gamma: &[f32],
    stats: &GroupStats,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = xs.c() / groups;
    let plane = xs.plane();
    let span = cpg * plane;
    let mut dx = vec![0.0f32; xs.numel()];
    let mut dgamma = vec![0.0f32; xs.c()];
    let mut dbeta = vec![0.0f32; xs.c()];
    for n in 0..xs.n() {
        for gi in 0..groups {
            let sidx = n * groups + gi;
            let m = stats.mean[sidx] as f64;
            let r = stats.rstd[sidx] as f64;
            let start = (n * xs.c() + gi * cpg) * plane;
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for cl in 0..cpg {
                let c = gi * cpg + cl;
                let off = start + cl * plane;
                let (mut dg, mut db) = (0.0f64, 0.0f64);
                for i in off..off + plane {
                    let xhat = (x[i] as f64 - m) * r;
                    let g = dy[i] as f64;
                    dg += g * xhat;
                    db += g;
                    let dxhat = g * gamma[c] as f64;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                dgamma[c] += dg as f32;
                dbeta[c] += db as f32;
            }
            let inv = 1.0 / span as f64;
            for cl in 0..cpg {
                let c = gi * cpg + cl;
                let off = start + cl * plane;
                for i in off..off + plane {
                    let xhat = (x[i] as f64 - m) * r;
                    let dxhat = dy[i] as f64 * gamma[c] as f64;
                    dx[i] = (r * (dxhat - inv * sum_dxhat - xhat * inv * sum_dxhat_xhat)) as f32;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// 3x3 pooling with padding 1. Average pooling excludes padded cells.
/// For max pooling the returned indices record the winning input offset.
pub fn pool3x3_forward(x: &[f32], xs: Shape, stride: usize, kind: PoolKind) -> (Vec<f32>, Shape, Vec<usize>) {
    let geom = ConvGeom {
        stride,
        dilation: 1,
        groups: 1,
    };
    let ys = Shape::new(xs.n(), xs.c(), geom.out_len(xs.h(), 3), geom.out_len(xs.w(), 3));
    let mut y = vec![0.0f32; ys.numel()];
    let mut arg = Vec::new();
    if kind == PoolKind::Max {
        arg = vec![0usize; ys.numel()];
    }
    for nc in 0..xs.n() * xs.c() {
        let src = nc * xs.plane();
        for oy in 0..ys.h() {
            for ox in 0..ys.w() {
                let oi = nc * ys.plane() + oy * ys.w() + ox;
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                let mut sum = 0.0f32;
                let mut cnt = 0usize;
                for dy in 0..3 {
                    let iy = (oy * stride + dy) as isize - 1;
                    if iy < 0 || iy >= xs.h() as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = (ox * stride + dx) as isize - 1;
                        if ix < 0 || ix >= xs.w() as isize {
                            continue;
                        }
                        let ii = src + iy as usize * xs.w() + ix as usize;
                        let v = x[ii];
                        sum += v;
                        cnt += 1;
                        if v > best {
                            best = v;
                            best_i = ii;
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        y[oi] = best;
                        arg[oi] = best_i;
                    }
                    PoolKind::Avg => y[oi] = sum / cnt as f32,
                }
            }
        }
    }
    (y, ys, arg)
}

pub fn pool3x3_backward(
    xs: Shape,
    ys: Shape,
    stride: usize,
    kind: PoolKind,
    arg: &[usize],
    dy: &[f32],
) -> Vec<f32> {
    let mut dx = vec![0.0f32; xs.numel()];
    match kind {
        PoolKind::Max => {
            for (oi, g) in dy.iter().enumerate() {
                dx[arg[oi]] += g;
            }
        }
        PoolKind::Avg => {
            for nc in 0..xs.n() * xs.c() {
                let src = nc * xs.plane();
                for oy in 0..ys.h() {
                    for ox in 0..ys.w() {
                        let g = dy[nc * ys.plane() + oy * ys.w() + ox];
                        let mut cells = [0usize; 9];
                        let mut cnt = 0;
                        for dyy in 0..3 {
                            let iy = (oy * stride + dyy) as isize - 1;
                            if iy < 0 || iy >= xs.h() as isize {
                                continue;
                            }
                            for dxx in 0..3 {
                                let ix = (ox * stride + dxx) as isize - 1;
                                if ix < 0 || ix >= xs.w() as isize {
                                    continue;
                                }
                                cells[cnt] = src + iy as usize * xs.w() + ix as usize;
                                cnt += 1;
                            }
                        }
                        let share = g / cnt as f32;
                        for &c in &cells[..cnt] {
                            dx[c] += share;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for stride in 1..=2 {
            for width in 1..9 {
                let out_w = (width - 1) / stride + 1;
                for off in -4isize..=4 {
                    let (lo, hi) = valid_range(off, stride, width, out_w);
                    let expect: Vec<usize> = (0..out_w)
                        .filter(|ox| {
                            let ix = (*ox * stride) as isize + off;
                            ix >= 0 && ix < width as isize
                        })
                        .collect();
                    let got: Vec<usize> = (lo..hi).collect();
                    assert_eq!(got, expect, "stride {stride} width {width} off {off}");
                }
            }
        }
    }

    #[test]
    fn strided_output_size() {
        let g = ConvGeom {
            stride: 2,
            dilation: 1,
            groups: 1,
        };
        assert_eq!(g.out_len(64, 3), 32);
        assert_eq!(g.out_len(7, 3), 4);
        assert_eq!(g.out_len(7, 1), 4);
    }
}
