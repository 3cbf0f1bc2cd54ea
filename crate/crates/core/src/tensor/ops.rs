//! Differentiable operations and their backward rules.

use super::{numel, record_kink_signs, Scalar, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the im2col buffer, in elements. Samples are batched into
/// one matrix multiply until this is reached.
const COL_BUDGET: usize = 1 << 18;

pub(crate) enum Op<T: Scalar> {
    Conv2d {
        input: Tensor<T>,
        kernel: Tensor<T>,
        bias: Tensor<T>,
        geom: ConvGeometry,
    },
    Upsample {
        input: Tensor<T>,
        factor: usize,
    },
    UpsampleConv {
        input: Tensor<T>,
        kernel: Tensor<T>,
        bias: Tensor<T>,
        geom: ConvGeometry,
    },
    Dense {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Relu {
        input: Tensor<T>,
    },
    Sigmoid {
        input: Tensor<T>,
    },
    Reshape {
        input: Tensor<T>,
    },
    Add {
        lhs: Tensor<T>,
        rhs: Tensor<T>,
    },
    Mse {
        pred: Tensor<T>,
        target: Tensor<T>,
    },
    CrossEntropy {
        logits: Tensor<T>,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        input: Tensor<T>,
        weights: Vec<T>,
    },
}

type Accumulate<'a, T> = dyn FnMut(&Tensor<T>, Vec<T>) + 'a;

impl<T: Scalar> Op<T> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            }
            | Op::UpsampleConv {
                input,
                kernel,
                bias,
                ..
            } => vec![input, kernel, bias],
            Op::Dense {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::Upsample { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Reshape { input }
            | Op::WeightedSum { input, .. } => vec![input],
            Op::Add { lhs, rhs } => vec![lhs, rhs],
            Op::Mse { pred, target } => vec![pred, target],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Pushes each parent's gradient contribution given the output's
    /// values `out` and upstream gradient `g`.
    pub(crate) fn backward(&self, out: &[T], g: &[T], acc: &mut Accumulate<'_, T>) {
        match self {
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => conv2d_backward(input, kernel, bias, geom, g, acc),
            Op::UpsampleConv {
                input,
                kernel,
                bias,
                geom,
            } => upsample_conv_backward(input, kernel, bias, geom, g, acc),
            Op::Upsample { input, factor } => {
                let s = input.shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                let mut gi = vec![T::zero(); input.numel()];
                for plane in 0..n * c {
                    let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        let row = (oy / factor) * w;
                        for ox in 0..ow {
                            dst[row + ox / factor] += src[oy * ow + ox];
                        }
                    }
                }
                acc(input, gi);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (rows, fan_in) = (input.shape()[0], input.shape()[1]);
                let fan_out = weight.shape()[1];
                if input.requires_grad() {
                    let mut gx = vec![T::zero(); rows * fan_in];
                    T::gemm(
                        false,
                        true,
                        rows,
                        fan_in,
                        fan_out,
                        T::one(),
                        g,
                        &weight.data(),
                        T::zero(),
                        &mut gx,
                    );
                    acc(input, gx);
                }
                if weight.requires_grad() {
                    let mut gw = vec![T::zero(); fan_in * fan_out];
                    T::gemm(
                        true,
                        false,
                        fan_in,
                        fan_out,
                        rows,
                        T::one(),
                        &input.data(),
                        g,
                        T::zero(),
                        &mut gw,
                    );
                    acc(weight, gw);
                }
                if bias.requires_grad() {
                    let mut gb = vec![T::zero(); fan_out];
                    for row in g.chunks_exact(fan_out) {
                        gb.iter_mut().zip(row).for_each(|(b, v)| *b += *v);
                    }
                    acc(bias, gb);
                }
            }
            Op::Relu { input } => {
                let x = input.data();
                let gi = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                drop(x);
                acc(input, gi);
            }
            Op::Sigmoid { input } => {
                let gi = out
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                acc(input, gi);
            }
            Op::Reshape { input } => acc(input, g.to_vec()),
            Op::Add { lhs, rhs } => {
                acc(lhs, g.to_vec());
                acc(rhs, g.to_vec());
            }
            Op::Mse { pred, target } => {
                let n = T::from_usize(pred.numel()).unwrap();
                let scale = g[0] * (T::one() + T::one()) / n;
                let diff: Vec<T> = {
                    let (p, t) = (pred.data(), target.data());
                    p.iter()
                        .zip(t.iter())
                        .map(|(&a, &b)| scale * (a - b))
                        .collect()
                };
                if target.requires_grad() {
                    acc(target, diff.iter().map(|&d| -d).collect());
                }
                acc(pred, diff);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = logits.shape()[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let mut gi: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    gi[row * classes + label] -= scale;
                }
                acc(logits, gi);
            }
            Op::WeightedSum { input, weights } => {
                acc(input, weights.iter().map(|&w| w * g[0]).collect());
            }
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_output_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > size + 2 * padding {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn samples_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.patch_len() * self.positions()).max(1)).clamp(1, self.batch.max(1))
    }

    /// Output columns `lo..hi` whose input column lies inside the image for
    /// kernel column `kj`.
    fn valid_columns(&self, kj: usize) -> (usize, usize) {
        let (pad, stride) = (self.padding, self.stride);
        let lo = if kj >= pad {
            0
        } else {
            (pad - kj).div_ceil(stride)
        };
        let hi = if self.width + pad > kj {
            ((self.width - 1 + pad - kj) / stride + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds sample `x` (one `C x H x W` image) into columns starting at
    /// column offset `col0` of a row-major matrix with `stride_cols` columns.
    fn im2col<T2: Scalar>(&self, x: &[T2], col: &mut [T2], col0: usize, stride_cols: usize) {
        let (h, w, ow, stride) = (self.height, self.width, self.ow, self.stride);
        for c in 0..self.channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let (lo, hi) = self.valid_columns(kj);
                    let dst = &mut col
                        [row * stride_cols + col0..row * stride_cols + col0 + self.positions()];
                    for oy in 0..self.oh {
                        let iy = (oy * stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T2::zero());
                            continue;
                        }
                        line[..lo].fill(T2::zero());
                        line[hi..].fill(T2::zero());
                        if lo < hi {
                            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let first = lo * stride + kj - self.padding;
                            if stride == 1 {
                                line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (v, s) in line[lo..hi]
                                    .iter_mut()
                                    .zip(src[first..].iter().step_by(stride))
                                {
                                    *v = *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T2: Scalar>(&self, col: &[T2], col0: usize, stride_cols: usize, dx: &mut [T2]) {
        let (h, w, ow, stride) = (self.height, self.width, self.ow, self.stride);
        for c in 0..self.channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let (lo, hi) = self.valid_columns(kj);
                    if lo >= hi {
                        continue;
                    }
                    let src =
                        &col[row * stride_cols + col0..row * stride_cols + col0 + self.positions()];
                    for oy in 0..self.oh {
                        let iy = (oy * stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &src[oy * ow + lo..oy * ow + hi];
                        let first = lo * stride + kj - self.padding;
                        let dst = &mut plane[iy as usize * w + first..(iy as usize + 1) * w];
                        for (d, v) in dst.iter_mut().step_by(stride).zip(line) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
    g: &[T],
    acc: &mut Accumulate<'_, T>,
) {
    let x = input.data();
    let k = kernel.data();
    let (f, pl, p) = (geom.filters, geom.patch_len(), geom.positions());
    let image = geom.channels * geom.height * geom.width;
    let chunk = geom.samples_per_chunk();

    let mut gk = kernel.requires_grad().then(|| vec![T::zero(); f * pl]);
    let mut gx = input.requires_grad().then(|| vec![T::zero(); x.len()]);
    let mut col = Vec::new();
    let mut gout = Vec::new();
    let mut gcol = Vec::new();

    let mut start = 0;
    while start < geom.batch {
        let nb = chunk.min(geom.batch - start);
        let cols = nb * p;
        gout.resize(f * cols, T::zero());
        for s in 0..nb {
            let sample = &g[(start + s) * f * p..(start + s + 1) * f * p];
            for fi in 0..f {
                gout[fi * cols + s * p..fi * cols + (s + 1) * p]
                    .copy_from_slice(&sample[fi * p..(fi + 1) * p]);
            }
        }
        if let Some(gk) = gk.as_mut() {
            col.resize(pl * cols, T::zero());
            for s in 0..nb {
                geom.im2col(
                    &x[(start + s) * image..(start + s + 1) * image],
                    &mut col,
                    s * p,
                    cols,
                );
            }
            T::gemm(
                false,
                true,
                f,
                pl,
                cols,
                T::one(),
                &gout,
                &col,
                T::one(),
                gk,
            );
        }
        if let Some(gx) = gx.as_mut() {
            gcol.resize(pl * cols, T::zero());
            T::gemm(
                true,
                false,
                pl,
                cols,
                f,
                T::one(),
                &k,
                &gout,
                T::zero(),
                &mut gcol,
            );
            for s in 0..nb {
                geom.col2im(
                    &gcol,
                    s * p,
                    cols,
                    &mut gx[(start + s) * image..(start + s + 1) * image],
                );
            }
        }
        start += nb;
    }
    drop(x);
    drop(k);

    if let Some(gx) = gx {
        acc(input, gx);
    }
    if let Some(gk) = gk {
        acc(kernel, gk);
    }
    if bias.requires_grad() {
        let mut gb = vec![T::zero(); f];
        for sample in g.chunks_exact(f * p) {
            for (fi, b) in gb.iter_mut().enumerate() {
                *b += sample[fi * p..(fi + 1) * p].iter().copied().sum::<T>();
            }
        }
        acc(bias, gb);
    }
}

/// Row of the padded 3x3 low-resolution window that kernel row `k` reads
/// for output phase `phase` after 2x nearest upsampling.
fn phase_tap(phase: usize, k: usize) -> usize {
    (phase + k).div_ceil(2)
}

/// Collapses a `[F, C, 3, 3]` kernel into the four `[F, C, 2, 2]` kernels
/// that act on the low-resolution input, one per output phase `(a, b)`.
fn phase_kernels<T: Scalar>(k: &[T], filters: usize, channels: usize) -> [Vec<T>; 4] {
    std::array::from_fn(|phase| {
        let (a, b) = (phase / 2, phase % 2);
        let mut out = vec![T::zero(); filters * channels * 4];
        for fc in 0..filters * channels {
            for ki in 0..3 {
                for kj in 0..3 {
                    let (di, dj) = (phase_tap(a, ki) - a, phase_tap(b, kj) - b);
                    out[fc * 4 + di * 2 + dj] += k[fc * 9 + ki * 3 + kj];
                }
            }
        }
        out
    })
}

/// Copies the rows of a 3x3 im2col matrix used by phase `(a, b)`.
fn gather_phase_rows<T: Scalar>(
    col3: &[T],
    channels: usize,
    cols: usize,
    phase: usize,
    out: &mut Vec<T>,
) {
    let (a, b) = (phase / 2, phase % 2);
    out.resize(channels * 4 * cols, T::zero());
    for c in 0..channels {
        for di in 0..2 {
            for dj in 0..2 {
                let src = (c * 9 + (a + di) * 3 + (b + dj)) * cols;
                let dst = (c * 4 + di * 2 + dj) * cols;
                out[dst..dst + cols].copy_from_slice(&col3[src..src + cols]);
            }
        }
    }
}

fn upsample_conv_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
    g: &[T],
    acc: &mut Accumulate<'_, T>,
) {
    let x = input.data();
    let (f, c) = (geom.filters, geom.channels);
    let (h, w) = (geom.height, geom.width);
    let p = h * w;
    let image = c * p;
    let kp = phase_kernels(&kernel.data(), f, c);
    let chunk = geom.samples_per_chunk();

    let mut gkp = kernel
        .requires_grad()
        .then(|| std::array::from_fn::<_, 4, _>(|_| vec![T::zero(); f * c * 4]));
    let mut gx = input.requires_grad().then(|| vec![T::zero(); x.len()]);
    let (mut col3, mut colp, mut gout, mut gcolp, mut gcol3) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());

    let mut start = 0;
    while start < geom.batch {
        let nb = chunk.min(geom.batch - start);
        let cols = nb * p;
        col3.resize(c * 9 * cols, T::zero());
        for s in 0..nb {
            geom.im2col(
                &x[(start + s) * image..(start + s + 1) * image],
                &mut col3,
                s * p,
                cols,
            );
        }
        if gx.is_some() {
            gcol3.clear();
            gcol3.resize(c * 9 * cols, T::zero());
        }
        for phase in 0..4 {
            let (a, b) = (phase / 2, phase % 2);
            gout.resize(f * cols, T::zero());
            for s in 0..nb {
                let sample = &g[(start + s) * f * 4 * p..(start + s + 1) * f * 4 * p];
                for fi in 0..f {
                    let plane = &sample[fi * 4 * p..(fi + 1) * 4 * p];
                    let dst = &mut gout[fi * cols + s * p..fi * cols + (s + 1) * p];
                    for y in 0..h {
                        let row = &plane[(2 * y + a) * 2 * w..(2 * y + a + 1) * 2 * w];
                        for (d, v) in dst[y * w..(y + 1) * w]
                            .iter_mut()
                            .zip(row[b..].iter().step_by(2))
                        {
                            *d = *v;
                        }
                    }
                }
            }
            if let Some(gkp) = gkp.as_mut() {
                gather_phase_rows(&col3, c, cols, phase, &mut colp);
                T::gemm(
                    false,
                    true,
                    f,
                    c * 4,
                    cols,
                    T::one(),
                    &gout,
                    &colp,
                    T::one(),
                    &mut gkp[phase],
                );
            }
            if gx.is_some() {
                gcolp.resize(c * 4 * cols, T::zero());
                T::gemm(
                    true,
                    false,
                    c * 4,
                    cols,
                    f,
                    T::one(),
                    &kp[phase],
                    &gout,
                    T::zero(),
                    &mut gcolp,
                );
                for ci in 0..c {
                    for di in 0..2 {
                        for dj in 0..2 {
                            let dst = (ci * 9 + (a + di) * 3 + (b + dj)) * cols;
                            let src = (ci * 4 + di * 2 + dj) * cols;
                            gcol3[dst..dst + cols]
                                .iter_mut()
                                .zip(&gcolp[src..src + cols])
                                .for_each(|(d, v)| *d += *v);
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            for s in 0..nb {
                geom.col2im(
                    &gcol3,
                    s * p,
                    cols,
                    &mut gx[(start + s) * image..(start + s + 1) * image],
                );
            }
        }
        start += nb;
    }
    drop(x);

    if let Some(gx) = gx {
        acc(input, gx);
    }
    if let Some(gkp) = gkp {
        let mut gk = vec![T::zero(); f * c * 9];
        for (phase, gp) in gkp.iter().enumerate() {
            let (a, b) = (phase / 2, phase % 2);
            for fc in 0..f * c {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let (di, dj) = (phase_tap(a, ki) - a, phase_tap(b, kj) - b);
                        gk[fc * 9 + ki * 3 + kj] += gp[fc * 4 + di * 2 + dj];
                    }
                }
            }
        }
        acc(kernel, gk);
    }
    if bias.requires_grad() {
        let plane = 4 * p;
        let mut gb = vec![T::zero(); f];
        for sample in g.chunks_exact(f * plane) {
            for (fi, b) in gb.iter_mut().enumerate() {
                *b += sample[fi * plane..(fi + 1) * plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        acc(bias, gb);
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `self` is `[N, C, H, W]`, `kernel` is `[F, C, kh, kw]` and `bias` is
    /// `[F]`; the result is `[N, F, H', W']` with
    /// `H' = (H + 2 * padding - kh) / stride + 1`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Config(format!(
                "conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if ks[1] != xs[1] {
            return Err(Error::Config(format!(
                "conv2d kernel has {} input channels but input has {}",
                ks[1], xs[1]
            )));
        }
        if bias.shape() != [ks[0]] {
            return Err(Error::Config(format!(
                "conv2d bias shape {:?} does not match {} filters",
                bias.shape(),
                ks[0]
            )));
        }
        let oh = conv_output_extent(xs[2], ks[2], stride, padding);
        let ow = conv_output_extent(xs[3], ks[3], stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Config(format!(
                "conv2d kernel {}x{} with stride {stride}, padding {padding} does not fit input {}x{}",
                ks[2], ks[3], xs[2], xs[3]
            )));
        };
        let geom = ConvGeometry {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            oh,
            ow,
        };

        let (f, pl, p) = (geom.filters, geom.patch_len(), geom.positions());
        let image = geom.channels * geom.height * geom.width;
        let mut out = vec![T::zero(); geom.batch * f * p];
        {
            let x = self.data();
            let k = kernel.data();
            let b = bias.data();
            let chunk = geom.samples_per_chunk();
            let mut col = Vec::new();
            let mut prod = Vec::new();
            let mut start = 0;
            while start < geom.batch {
                let nb = chunk.min(geom.batch - start);
                let cols = nb * p;
                col.resize(pl * cols, T::zero());
                prod.resize(f * cols, T::zero());
                for s in 0..nb {
                    geom.im2col(
                        &x[(start + s) * image..(start + s + 1) * image],
                        &mut col,
                        s * p,
                        cols,
                    );
                }
                T::gemm(
                    false,
                    false,
                    f,
                    cols,
                    pl,
                    T::one(),
                    &k,
                    &col,
                    T::zero(),
                    &mut prod,
                );
                for s in 0..nb {
                    let dst = &mut out[(start + s) * f * p..(start + s + 1) * f * p];
                    for fi in 0..f {
                        let src = &prod[fi * cols + s * p..fi * cols + (s + 1) * p];
                        for (o, &v) in dst[fi * p..(fi + 1) * p].iter_mut().zip(src) {
                            *o = v + b[fi];
                        }
                    }
                }
                start += nb;
            }
        }
        Ok(Tensor::from_op(
            vec![geom.batch, f, oh, ow],
            out,
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
                geom,
            },
        ))
    }

    /// Nearest-neighbour upsampling of a `[N, C, H, W]` tensor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Config(format!("upsample expects rank 4, got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::Config("upsample factor must be at least 1".into()));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![T::zero(); n * c * oh * ow];
        {
            let x = self.data();
            for plane in 0..n * c {
                let src = &x[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                for oy in 0..oh {
                    let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                    for (ox, v) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                        *v = row[ox / factor];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            Op::Upsample {
                input: self.clone(),
                factor,
            },
        ))
    }

    /// `upsample_nearest(2)` followed by a 3x3 convolution with stride 1 and
    /// padding 1, evaluated as four 2x2 convolutions on the low-resolution
    /// input. Other geometries fall back to the two separate ops.
    pub fn upsample_conv2d(
        &self,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        factor: usize,
    ) -> Result<Tensor<T>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        let fused = factor == 2 && xs.len() == 4 && ks.len() == 4 && ks[2] == 3 && ks[3] == 3;
        if !fused {
            return self.upsample_nearest(factor)?.conv2d(
                kernel,
                bias,
                1,
                ks.get(2).map_or(0, |k| k / 2),
            );
        }
        if ks[1] != xs[1] {
            return Err(Error::Config(format!(
                "conv2d kernel has {} input channels but input has {}",
                ks[1], xs[1]
            )));
        }
        if bias.shape() != [ks[0]] {
            return Err(Error::Config(format!(
                "conv2d bias shape {:?} does not match {} filters",
                bias.shape(),
                ks[0]
            )));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ks[0],
            kh: 3,
            kw: 3,
            stride: 1,
            padding: 1,
            oh: xs[2],
            ow: xs[3],
        };
        let (f, c, h, w) = (geom.filters, geom.channels, geom.height, geom.width);
        let p = h * w;
        let image = c * p;
        let mut out = vec![T::zero(); geom.batch * f * 4 * p];
        {
            let x = self.data();
            let b = bias.data();
            let kp = phase_kernels(&kernel.data(), f, c);
            let chunk = geom.samples_per_chunk();
            let (mut col3, mut colp, mut prod) = (Vec::new(), Vec::new(), Vec::new());
            let mut start = 0;
            while start < geom.batch {
                let nb = chunk.min(geom.batch - start);
                let cols = nb * p;
                col3.resize(c * 9 * cols, T::zero());
                for s in 0..nb {
                    geom.im2col(
                        &x[(start + s) * image..(start + s + 1) * image],
                        &mut col3,
                        s * p,
                        cols,
                    );
                }
                prod.resize(f * cols, T::zero());
                for (phase, kernel_p) in kp.iter().enumerate() {
                    let (a, bb) = (phase / 2, phase % 2);
                    gather_phase_rows(&col3, c, cols, phase, &mut colp);
                    T::gemm(
                        false,
                        false,
                        f,
                        cols,
                        c * 4,
                        T::one(),
                        kernel_p,
                        &colp,
                        T::zero(),
                        &mut prod,
                    );
                    for s in 0..nb {
                        let sample = &mut out[(start + s) * f * 4 * p..(start + s + 1) * f * 4 * p];
                        for fi in 0..f {
                            let src = &prod[fi * cols + s * p..fi * cols + (s + 1) * p];
                            let plane = &mut sample[fi * 4 * p..(fi + 1) * 4 * p];
                            for y in 0..h {
                                let row = &mut plane[(2 * y + a) * 2 * w..(2 * y + a + 1) * 2 * w];
                                for (o, v) in row[bb..]
                                    .iter_mut()
                                    .step_by(2)
                                    .zip(&src[y * w..(y + 1) * w])
                                {
                                    *o = *v + b[fi];
                                }
                            }
                        }
                    }
                }
                start += nb;
            }
        }
        Ok(Tensor::from_op(
            vec![geom.batch, f, 2 * h, 2 * w],
            out,
            Op::UpsampleConv {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
                geom,
            },
        ))
    }

    /// Affine map `self @ weight + bias` for `self: [N, in]`, `weight: [in, out]`.
    pub fn dense(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Input(format!(
                "dense: input {xs:?} is incompatible with weight {ws:?}"
            )));
        }
        if bias.shape() != [ws[1]] {
            return Err(Error::Input(format!(
                "dense: bias {:?} does not match output width {}",
                bias.shape(),
                ws[1]
            )));
        }
        let (rows, fan_in, fan_out) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); rows * fan_out];
        {
            let b = bias.data();
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(&b);
            }
            T::gemm(
                false,
                false,
                rows,
                fan_out,
                fan_in,
                T::one(),
                &self.data(),
                &weight.data(),
                T::one(),
                &mut out,
            );
        }
        Ok(Tensor::from_op(
            vec![rows, fan_out],
            out,
            Op::Dense {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
            },
        ))
    }

    pub fn relu(&self) -> Tensor<T> {
        let x = self.data();
        record_kink_signs(&x);
        let out = x
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        drop(x);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Relu {
                input: self.clone(),
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&v| stable_sigmoid(v)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Sigmoid {
                input: self.clone(),
            },
        )
    }

    /// Same values viewed with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::Input(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape {
                input: self.clone(),
            },
        ))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        let rows = s.first().copied().unwrap_or(1);
        let cols = self.numel().checked_div(rows).unwrap_or(0);
        self.reshape(&[rows, cols])
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::Input(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Add {
                lhs: self.clone(),
                rhs: other.clone(),
            },
        ))
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse_loss(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != target.shape() {
            return Err(Error::Config(format!(
                "mse_loss: prediction {:?} and target {:?} differ in shape",
                self.shape(),
                target.shape()
            )));
        }
        let sum: T = self
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let value = sum / T::from_usize(self.numel().max(1)).unwrap();
        Ok(Tensor::from_op(
            vec![1],
            vec![value],
            Op::Mse {
                pred: self.clone(),
                target: target.clone(),
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Input(format!(
                "softmax_cross_entropy: logits {s:?} do not match {} labels",
                labels.len()
            )));
        }
        let classes = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let logits = self.data();
        let mut probs = vec![T::zero(); logits.len()];
        let mut total = T::zero();
        for (row, (z, p)) in logits
            .chunks_exact(classes)
            .zip(probs.chunks_exact_mut(classes))
            .enumerate()
        {
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut norm = T::zero();
            for (pi, &zi) in p.iter_mut().zip(z) {
                *pi = (zi - max).exp();
                norm += *pi;
            }
            p.iter_mut().for_each(|pi| *pi = *pi / norm);
            total += norm.ln() + max - z[labels[row]];
        }
        drop(logits);
        let value = total / T::from_usize(labels.len()).unwrap();
        Ok(Tensor::from_op(
            vec![1],
            vec![value],
            Op::CrossEntropy {
                logits: self.clone(),
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `sum_i weights[i] * self[i]`; reduces any op to a scalar for testing.
    pub fn weighted_sum(&self, weights: &[T]) -> Result<Tensor<T>> {
        if weights.len() != self.numel() {
            return Err(Error::Input(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                self.numel()
            )));
        }
        let value = self.data().iter().zip(weights).map(|(&x, &w)| x * w).sum();
        Ok(Tensor::from_op(
            vec![1],
            vec![value],
            Op::WeightedSum {
                input: self.clone(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Row-wise index of the largest entry of a `[N, K]` tensor; ties go to
    /// the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let k = self.shape().last().copied().unwrap_or(1).max(1);
        self.data()
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
