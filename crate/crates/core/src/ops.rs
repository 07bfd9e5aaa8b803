//! Structured ops on the tape: convolution via im2col, batch and layer
//! norm, pooling, unpooling, bilinear upsampling, padding, and softmax.
//!
//! All reductions run in a fixed order; means and averages accumulate in
//! f64 so that identities like `avg_pool(unpool(y)) == y` hold bitwise even
//! for window sizes that are not powers of two.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{BackwardArgs, OpRule, Tape, Var};
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    // ---- convolution ---------------------------------------------------

    /// 2D convolution with square kernel, built from im2col + matmul so its
    /// gradient reduces to the matmul gradient plus an index scatter.
    ///
    /// `x [N,Ci,H,W]`, `w [Co,Ci,K,K]`, `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let wsh = self.value(w).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        if xsh.len() != 4 || wsh.len() != 4 || xsh[1] != wsh[1] || wsh[2] != wsh[3] {
            return Err(Error::shape("conv2d", &xsh, &wsh));
        }
        if bsh != [wsh[0]] {
            return Err(Error::shape("conv2d bias", &wsh, &bsh));
        }
        let (n, ci, h, wd) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (co, k) = (wsh[0], wsh[2]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Contract(format!(
                "conv2d kernel {k} with stride {stride} and pad {pad} does not fit input {h}x{wd}"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let cols = self.im2col(x, k, stride, pad)?;
        let w2 = self.reshape(w, vec![co, ci * k * k])?;
        let y = self.matmul(w2, cols)?;
        let y = self.reshape(y, vec![co, n, oh, ow])?;
        let y = self.permute(y, &[1, 0, 2, 3])?;
        self.bias_channel(y, b)
    }

    /// Unfold `[N,C,H,W]` into `[C*K*K, N*OH*OW]` patch columns.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let sh = self.value(x).shape();
        if sh.len() != 4 {
            return Err(Error::shape("im2col", sh, &[0, 0, 0, 0]));
        }
        let meta = Im2colOp {
            n: sh[0],
            c: sh[1],
            h: sh[2],
            w: sh[3],
            k,
            stride,
            pad,
            oh: (sh[2] + 2 * pad - k) / stride + 1,
            ow: (sh[3] + 2 * pad - k) / stride + 1,
        };
        let out = meta.forward(self.value(x));
        Ok(self.push(out, vec![x], Box::new(meta)))
    }

    /// `x [N,C,H,W] + b [C]`, the channel-wise bias add.
    pub fn bias_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        if xsh.len() != 4 || bsh != [xsh[1]] {
            return Err(Error::shape("bias_channel", &xsh, &bsh));
        }
        let (n, c, hw) = (xsh[0], xsh[1], xsh[2] * xsh[3]);
        let bd = self.value(b).data();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len());
        for ni in 0..n {
            for ci in 0..c {
                let bv = bd[ci];
                let off = (ni * c + ci) * hw;
                data.extend(xd[off..off + hw].iter().map(|&v| v + bv));
            }
        }
        let out = Tensor::from_parts(xsh, data);
        Ok(self.push(out, vec![x, b], Box::new(BiasChannelOp { n, c, hw })))
    }

    // ---- normalization -------------------------------------------------

    /// Training-mode batch norm over `[N,C,H,W]`. Returns the normalized
    /// output plus the batch mean and unbiased variance per channel, which
    /// the caller folds into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let xsh = self.value(x).shape().to_vec();
        check_norm_shapes("batch_norm", &xsh, self.value(gamma).shape(), self.value(beta).shape())?;
        let (n, c, hw) = (xsh[0], xsh[1], xsh[2] * xsh[3]);
        let m = n * hw;
        let xd = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for &v in &xd[off..off + hw] {
                    mean[ci] += v.as_f64();
                }
            }
        }
        for mu in &mut mean {
            *mu /= m as f64;
        }
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for &v in &xd[off..off + hw] {
                    let d = v.as_f64() - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= m as f64;
        }
        let invstd: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64(1.0 / (v + eps).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut data = Vec::with_capacity(xd.len());
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                let (mu, inv, ga, be) = (mean_t[ci], invstd[ci], gd[ci], bd[ci]);
                for &v in &xd[off..off + hw] {
                    let xh = (v - mu) * inv;
                    xhat.push(xh);
                    data.push(ga * xh + be);
                }
            }
        }
        let unbiased = if m > 1 {
            var.iter().map(|&v| v * m as f64 / (m as f64 - 1.0)).collect()
        } else {
            var.clone()
        };
        let batch_mean = Tensor::from_parts(vec![c], mean_t.clone());
        let batch_var =
            Tensor::from_parts(vec![c], unbiased.into_iter().map(T::from_f64).collect());
        let out = Tensor::from_parts(xsh, data);
        let op = BatchNormTrainOp {
            n,
            c,
            hw,
            invstd,
            xhat,
        };
        let y = self.push(out, vec![x, gamma, beta], Box::new(op));
        Ok((y, batch_mean, batch_var))
    }

    /// Inference-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        check_norm_shapes("batch_norm", &xsh, self.value(gamma).shape(), self.value(beta).shape())?;
        let c = xsh[1];
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::shape("batch_norm stats", &xsh, running_mean.shape()));
        }
        let (n, hw) = (xsh[0], xsh[2] * xsh[3]);
        let mean: Vec<T> = running_mean.data().to_vec();
        let invstd: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut data = Vec::with_capacity(xd.len());
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                let (mu, inv, ga, be) = (mean[ci], invstd[ci], gd[ci], bd[ci]);
                for &v in &xd[off..off + hw] {
                    data.push(ga * (v - mu) * inv + be);
                }
            }
        }
        let out = Tensor::from_parts(xsh, data);
        let op = BatchNormEvalOp {
            n,
            c,
            hw,
            mean,
            invstd,
        };
        Ok(self.push(out, vec![x, gamma, beta], Box::new(op)))
    }

    /// Layer norm over the last axis, any rank.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let d = *xsh.last().expect("tensor rank >= 1");
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape("layer_norm", &xsh, self.value(gamma).shape()));
        }
        let rows = self.value(x).numel() / d;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut mean = Vec::with_capacity(rows);
        let mut invstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xd.len());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let e = v.as_f64() - mu;
                    e * e
                })
                .sum::<f64>()
                / d as f64;
            let inv = T::from_f64(1.0 / (var + eps).sqrt());
            let mu = T::from_f64(mu);
            mean.push(mu);
            invstd.push(inv);
            for (j, &v) in row.iter().enumerate() {
                data.push(gd[j] * ((v - mu) * inv) + bd[j]);
            }
        }
        let out = Tensor::from_parts(xsh, data);
        let op = LayerNormOp {
            rows,
            d,
            mean,
            invstd,
        };
        Ok(self.push(out, vec![x, gamma, beta], Box::new(op)))
    }

    // ---- pooling ---------------------------------------------------------

    /// Non-overlapping average pooling; extents must divide exactly.
    pub fn avg_pool(&mut self, x: Var, m: usize, n: usize) -> Result<Var> {
        let meta = PoolMeta::exact("avg_pool", self.value(x).shape(), m, n)?;
        self.pool(x, meta, PoolKind::Avg)
    }

    /// Non-overlapping max pooling; extents must divide exactly.
    pub fn max_pool(&mut self, x: Var, m: usize, n: usize) -> Result<Var> {
        let meta = PoolMeta::exact("max_pool", self.value(x).shape(), m, n)?;
        self.pool(x, meta, PoolKind::Max)
    }

    /// 2x2 stride-1 average pooling with same-size output; edge windows
    /// shrink to the valid region.
    pub fn avg_pool_same2(&mut self, x: Var) -> Result<Var> {
        let meta = PoolMeta::same2("avg_pool", self.value(x).shape())?;
        self.pool(x, meta, PoolKind::Avg)
    }

    /// 2x2 stride-1 max pooling with same-size output.
    pub fn max_pool_same2(&mut self, x: Var) -> Result<Var> {
        let meta = PoolMeta::same2("max_pool", self.value(x).shape())?;
        self.pool(x, meta, PoolKind::Max)
    }

    /// Global average pool to `[N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("global_avg_pool", &sh, &[0, 0, 0, 0]));
        }
        self.avg_pool(x, sh[2], sh[3])
    }

    /// Global max pool to `[N,C,1,1]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("global_max_pool", &sh, &[0, 0, 0, 0]));
        }
        self.max_pool(x, sh[2], sh[3])
    }

    fn pool(&mut self, x: Var, meta: PoolMeta, kind: PoolKind) -> Result<Var> {
        let xd = self.value(x).data();
        let planes = meta.n * meta.c;
        let mut data = Vec::with_capacity(planes * meta.oh * meta.ow);
        let mut argmax = if kind == PoolKind::Max {
            Vec::with_capacity(planes * meta.oh * meta.ow)
        } else {
            Vec::new()
        };
        for p in 0..planes {
            let base = p * meta.h * meta.w;
            for oy in 0..meta.oh {
                let (y0, y1) = meta.window(oy, meta.h, meta.kh, meta.sh);
                for ox in 0..meta.ow {
                    let (x0, x1) = meta.window(ox, meta.w, meta.kw, meta.sw);
                    match kind {
                        PoolKind::Avg => {
                            let mut acc = 0.0f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    acc += xd[base + y * meta.w + xx].as_f64();
                                }
                            }
                            let count = ((y1 - y0) * (x1 - x0)) as f64;
                            data.push(T::from_f64(acc / count));
                        }
                        PoolKind::Max => {
                            let mut best = xd[base + y0 * meta.w + x0];
                            let mut best_i = base + y0 * meta.w + x0;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let i = base + y * meta.w + xx;
                                    if xd[i] > best {
                                        best = xd[i];
                                        best_i = i;
                                    }
                                }
                            }
                            data.push(best);
                            argmax.push(best_i as u32);
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![meta.n, meta.c, meta.oh, meta.ow], data);
        let op = PoolOp { meta, kind, argmax };
        Ok(self.push(out, vec![x], Box::new(op)))
    }

    /// Nearest-neighbor unpooling: replicate each cell into an m x n block.
    pub fn unpool(&mut self, x: Var, m: usize, n: usize) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 || m == 0 || n == 0 {
            return Err(Error::shape("unpool", &sh, &[m, n]));
        }
        let (nn, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len() * m * n);
        for p in 0..nn * c {
            let base = p * h * w;
            for y in 0..h {
                for _ in 0..m {
                    for x_ in 0..w {
                        let v = xd[base + y * w + x_];
                        data.extend(std::iter::repeat(v).take(n));
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![nn, c, h * m, w * n], data);
        Ok(self.push(out, vec![x], Box::new(UnpoolOp { m, n })))
    }

    // ---- resampling --------------------------------------------------------

    /// Bilinear 2x upsampling with half-pixel alignment. Interpolation uses
    /// the `a + f*(b - a)` form, so constant inputs are preserved exactly.
    pub fn upsample_bilinear_2x(&mut self, x: Var) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("upsample_bilinear_2x", &sh, &[0, 0, 0, 0]));
        }
        let op = UpsampleBilinear2xOp {
            n: sh[0],
            c: sh[1],
            h: sh[2],
            w: sh[3],
        };
        let out = op.forward(self.value(x));
        Ok(self.push(out, vec![x], Box::new(op)))
    }

    /// Zero padding on the high side of the two spatial axes.
    pub fn zero_pad2d(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("zero_pad2d", &sh, &[0, 0, 0, 0]));
        }
        if pad_h == 0 && pad_w == 0 {
            return Ok(x);
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let (nh, nw) = (h + pad_h, w + pad_w);
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); n * c * nh * nw];
        for p in 0..n * c {
            for y in 0..h {
                let src = (p * h + y) * w;
                let dst = (p * nh + y) * nw;
                data[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
        let out = Tensor::from_parts(vec![n, c, nh, nw], data);
        Ok(self.push(out, vec![x], Box::new(ZeroPad2dOp { h, w })))
    }

    /// Crop the two spatial axes down to `[.., h, w]` starting at the origin.
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 || h > sh[2] || w > sh[3] {
            return Err(Error::shape("crop2d", &sh, &[h, w]));
        }
        let y = if h < sh[2] { self.slice(x, 2, 0, h)? } else { x };
        if w < sh[3] {
            self.slice(y, 3, 0, w)
        } else {
            Ok(y)
        }
    }

    // ---- softmax -------------------------------------------------------

    /// Max-subtracted softmax along one axis.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if axis >= sh.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {sh:?}"
            )));
        }
        let outer: usize = sh[..axis].iter().product();
        let extent = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mut mx = xd[at(0)];
                for e in 1..extent {
                    mx = mx.max(xd[at(e)]);
                }
                let mut denom = 0.0f64;
                for e in 0..extent {
                    denom += (xd[at(e)] - mx).exp().as_f64();
                }
                let denom = T::from_f64(denom);
                for e in 0..extent {
                    data[at(e)] = (xd[at(e)] - mx).exp() / denom;
                }
            }
        }
        let out = Tensor::from_parts(sh, data);
        Ok(self.push(
            out,
            vec![x],
            Box::new(SoftmaxOp {
                outer,
                extent,
                inner,
            }),
        ))
    }
}

fn check_norm_shapes(
    op: &'static str,
    xsh: &[usize],
    gsh: &[usize],
    bsh: &[usize],
) -> Result<()> {
    if xsh.len() != 4 {
        return Err(Error::shape(op, xsh, &[0, 0, 0, 0]));
    }
    if gsh != [xsh[1]] || bsh != [xsh[1]] {
        return Err(Error::shape(op, xsh, gsh));
    }
    Ok(())
}

// ---- im2col ------------------------------------------------------------

struct Im2colOp {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Im2colOp {
    fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let cols = self.n * self.oh * self.ow;
        let rows = self.c * self.k * self.k;
        let xd = x.data();
        let mut out = vec![T::zero(); rows * cols];
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let orow = &mut out[r * cols..(r + 1) * cols];
                    let mut col = 0;
                    for ni in 0..self.n {
                        let base = (ni * self.c + ci) * self.h * self.w;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                col += self.ow;
                                continue;
                            }
                            let row_base = base + iy as usize * self.w;
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    orow[col] = xd[row_base + ix as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![rows, cols], out)
    }
}

impl<T: Real> OpRule<T> for Im2colOp {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let cols = self.n * self.oh * self.ow;
        let mut dx = vec![T::zero(); args.inputs[0].numel()];
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut col = 0;
                    for ni in 0..self.n {
                        let base = (ni * self.c + ci) * self.h * self.w;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                col += self.ow;
                                continue;
                            }
                            let row_base = base + iy as usize * self.w;
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dx[row_base + ix as usize] += grow[col];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(
            args.inputs[0].shape().to_vec(),
            dx,
        ))]
    }
}

struct BiasChannelOp {
    n: usize,
    c: usize,
    hw: usize,
}

impl<T: Real> OpRule<T> for BiasChannelOp {
    fn name(&self) -> &'static str {
        "bias_channel"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let dx = args.needs[0].then(|| args.grad.clone());
        let db = args.needs[1].then(|| {
            let mut acc = vec![0.0f64; self.c];
            for ni in 0..self.n {
                for ci in 0..self.c {
                    let off = (ni * self.c + ci) * self.hw;
                    for &v in &g[off..off + self.hw] {
                        acc[ci] += v.as_f64();
                    }
                }
            }
            Tensor::from_parts(vec![self.c], acc.into_iter().map(T::from_f64).collect())
        });
        vec![dx, db]
    }
}

// ---- batch norm ----------------------------------------------------------

struct BatchNormTrainOp<T> {
    n: usize,
    c: usize,
    hw: usize,
    invstd: Vec<T>,
    xhat: Vec<T>,
}

impl<T: Real> OpRule<T> for BatchNormTrainOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let gamma = args.inputs[1].data();
        let m = (self.n * self.hw) as f64;
        let mut sum_g = vec![0.0f64; self.c];
        let mut sum_gx = vec![0.0f64; self.c];
        for ni in 0..self.n {
            for ci in 0..self.c {
                let off = (ni * self.c + ci) * self.hw;
                for j in off..off + self.hw {
                    sum_g[ci] += g[j].as_f64();
                    sum_gx[ci] += g[j].as_f64() * self.xhat[j].as_f64();
                }
            }
        }
        let dx = args.needs[0].then(|| {
            let mut dx = vec![T::zero(); g.len()];
            for ni in 0..self.n {
                for ci in 0..self.c {
                    let off = (ni * self.c + ci) * self.hw;
                    let coef = gamma[ci].as_f64() * self.invstd[ci].as_f64() / m;
                    for j in off..off + self.hw {
                        let v = m * g[j].as_f64()
                            - sum_g[ci]
                            - self.xhat[j].as_f64() * sum_gx[ci];
                        dx[j] = T::from_f64(coef * v);
                    }
                }
            }
            Tensor::from_parts(args.inputs[0].shape().to_vec(), dx)
        });
        let dgamma = args.needs[1].then(|| {
            Tensor::from_parts(
                vec![self.c],
                sum_gx.iter().map(|&v| T::from_f64(v)).collect(),
            )
        });
        let dbeta = args.needs[2].then(|| {
            Tensor::from_parts(
                vec![self.c],
                sum_g.iter().map(|&v| T::from_f64(v)).collect(),
            )
        });
        vec![dx, dgamma, dbeta]
    }
}

struct BatchNormEvalOp<T> {
    n: usize,
    c: usize,
    hw: usize,
    mean: Vec<T>,
    invstd: Vec<T>,
}

impl<T: Real> OpRule<T> for BatchNormEvalOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let x = args.inputs[0].data();
        let gamma = args.inputs[1].data();
        let mut dx = args.needs[0].then(|| vec![T::zero(); g.len()]);
        let mut sum_g = vec![0.0f64; self.c];
        let mut sum_gx = vec![0.0f64; self.c];
        for ni in 0..self.n {
            for ci in 0..self.c {
                let off = (ni * self.c + ci) * self.hw;
                let (mu, inv) = (self.mean[ci], self.invstd[ci]);
                for j in off..off + self.hw {
                    sum_g[ci] += g[j].as_f64();
                    sum_gx[ci] += g[j].as_f64() * ((x[j] - mu) * inv).as_f64();
                    if let Some(dx) = dx.as_mut() {
                        dx[j] = g[j] * gamma[ci] * inv;
                    }
                }
            }
        }
        vec![
            dx.map(|d| Tensor::from_parts(args.inputs[0].shape().to_vec(), d)),
            args.needs[1].then(|| {
                Tensor::from_parts(
                    vec![self.c],
                    sum_gx.iter().map(|&v| T::from_f64(v)).collect(),
                )
            }),
            args.needs[2].then(|| {
                Tensor::from_parts(
                    vec![self.c],
                    sum_g.iter().map(|&v| T::from_f64(v)).collect(),
                )
            }),
        ]
    }
}

// ---- layer norm ----------------------------------------------------------

struct LayerNormOp<T> {
    rows: usize,
    d: usize,
    mean: Vec<T>,
    invstd: Vec<T>,
}

impl<T: Real> OpRule<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let x = args.inputs[0].data();
        let gamma = args.inputs[1].data();
        let d = self.d;
        let mut dgamma = vec![0.0f64; d];
        let mut dbeta = vec![0.0f64; d];
        let mut dx = args.needs[0].then(|| Vec::with_capacity(g.len()));
        for r in 0..self.rows {
            let off = r * d;
            let (mu, inv) = (self.mean[r], self.invstd[r]);
            let mut sum_a = 0.0f64;
            let mut sum_ax = 0.0f64;
            for j in 0..d {
                let xh = ((x[off + j] - mu) * inv).as_f64();
                let a = g[off + j].as_f64() * gamma[j].as_f64();
                dgamma[j] += g[off + j].as_f64() * xh;
                dbeta[j] += g[off + j].as_f64();
                sum_a += a;
                sum_ax += a * xh;
            }
            if let Some(dx) = dx.as_mut() {
                let dm = d as f64;
                for j in 0..d {
                    let xh = ((x[off + j] - mu) * inv).as_f64();
                    let a = g[off + j].as_f64() * gamma[j].as_f64();
                    dx.push(T::from_f64(
                        inv.as_f64() * (a - sum_a / dm - xh * sum_ax / dm),
                    ));
                }
            }
        }
        vec![
            dx.map(|d| Tensor::from_parts(args.inputs[0].shape().to_vec(), d)),
            args.needs[1].then(|| {
                Tensor::from_parts(vec![d], dgamma.into_iter().map(T::from_f64).collect())
            }),
            args.needs[2].then(|| {
                Tensor::from_parts(vec![d], dbeta.into_iter().map(T::from_f64).collect())
            }),
        ]
    }
}

// ---- pooling ---------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum PoolKind {
    Avg,
    Max,
}

struct PoolMeta {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
    clamp: bool,
}

impl PoolMeta {
    fn exact(op: &'static str, sh: &[usize], m: usize, n: usize) -> Result<PoolMeta> {
        if sh.len() != 4 || m == 0 || n == 0 {
            return Err(Error::shape(op, sh, &[m, n]));
        }
        if sh[2] % m != 0 || sh[3] % n != 0 {
            return Err(Error::Contract(format!(
                "{op} window {m}x{n} does not divide extents {}x{}; pad the input to a multiple first",
                sh[2], sh[3]
            )));
        }
        Ok(PoolMeta {
            n: sh[0],
            c: sh[1],
            h: sh[2],
            w: sh[3],
            kh: m,
            kw: n,
            sh: m,
            sw: n,
            oh: sh[2] / m,
            ow: sh[3] / n,
            clamp: false,
        })
    }

    fn same2(op: &'static str, sh: &[usize]) -> Result<PoolMeta> {
        if sh.len() != 4 {
            return Err(Error::shape(op, sh, &[0, 0, 0, 0]));
        }
        Ok(PoolMeta {
            n: sh[0],
            c: sh[1],
            h: sh[2],
            w: sh[3],
            kh: 2,
            kw: 2,
            sh: 1,
            sw: 1,
            oh: sh[2],
            ow: sh[3],
            clamp: true,
        })
    }

    fn window(&self, o: usize, extent: usize, k: usize, s: usize) -> (usize, usize) {
        let lo = o * s;
        let hi = if self.clamp {
            (lo + k).min(extent)
        } else {
            lo + k
        };
        (lo, hi)
    }
}

struct PoolOp {
    meta: PoolMeta,
    kind: PoolKind,
    argmax: Vec<u32>,
}

impl<T: Real> OpRule<T> for PoolOp {
    fn name(&self) -> &'static str {
        match self.kind {
            PoolKind::Avg => "avg_pool",
            PoolKind::Max => "max_pool",
        }
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let m = &self.meta;
        let mut dx = vec![T::zero(); args.inputs[0].numel()];
        match self.kind {
            PoolKind::Max => {
                for (&gi, &src) in g.iter().zip(&self.argmax) {
                    dx[src as usize] += gi;
                }
            }
            PoolKind::Avg => {
                let mut oi = 0;
                for p in 0..m.n * m.c {
                    let base = p * m.h * m.w;
                    for oy in 0..m.oh {
                        let (y0, y1) = m.window(oy, m.h, m.kh, m.sh);
                        for ox in 0..m.ow {
                            let (x0, x1) = m.window(ox, m.w, m.kw, m.sw);
                            let count = T::from_usize((y1 - y0) * (x1 - x0));
                            let gv = g[oi] / count;
                            oi += 1;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dx[base + y * m.w + xx] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(
            args.inputs[0].shape().to_vec(),
            dx,
        ))]
    }
}

struct UnpoolOp {
    m: usize,
    n: usize,
}

impl<T: Real> OpRule<T> for UnpoolOp {
    fn name(&self) -> &'static str {
        "unpool"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let sh = args.inputs[0].shape();
        let (nn, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let (gh, gw) = (h * self.m, w * self.n);
        let mut dx = Vec::with_capacity(nn * c * h * w);
        for p in 0..nn * c {
            let base = p * gh * gw;
            for y in 0..h {
                for x_ in 0..w {
                    let mut acc = 0.0f64;
                    for dy in 0..self.m {
                        let row = base + (y * self.m + dy) * gw + x_ * self.n;
                        for dxn in 0..self.n {
                            acc += g[row + dxn].as_f64();
                        }
                    }
                    dx.push(T::from_f64(acc));
                }
            }
        }
        vec![Some(Tensor::from_parts(sh.to_vec(), dx))]
    }
}

// ---- bilinear upsample -----------------------------------------------------

struct UpsampleBilinear2xOp {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

/// Per-output-index source pair and interpolation weight for one axis,
/// half-pixel convention with edge clamping.
fn axis_table<T: Real>(in_len: usize) -> Vec<(usize, usize, T)> {
    (0..in_len * 2)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, T::from_f64(s - i0 as f64))
        })
        .collect()
}

impl UpsampleBilinear2xOp {
    fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let ys = axis_table::<T>(self.h);
        let xs = axis_table::<T>(self.w);
        let xd = x.data();
        let (oh, ow) = (self.h * 2, self.w * 2);
        let mut out = Vec::with_capacity(self.n * self.c * oh * ow);
        for p in 0..self.n * self.c {
            let base = p * self.h * self.w;
            for &(y0, y1, fy) in &ys {
                let r0 = base + y0 * self.w;
                let r1 = base + y1 * self.w;
                for &(x0, x1, fx) in &xs {
                    let a = xd[r0 + x0];
                    let b = xd[r0 + x1];
                    let c = xd[r1 + x0];
                    let d = xd[r1 + x1];
                    let top = a + fx * (b - a);
                    let bot = c + fx * (d - c);
                    out.push(top + fy * (bot - top));
                }
            }
        }
        Tensor::from_parts(vec![self.n, self.c, oh, ow], out)
    }
}

impl<T: Real> OpRule<T> for UpsampleBilinear2xOp {
    fn name(&self) -> &'static str {
        "upsample_bilinear_2x"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let ys = axis_table::<T>(self.h);
        let xs = axis_table::<T>(self.w);
        let g = args.grad.data();
        let mut dx = vec![T::zero(); args.inputs[0].numel()];
        let mut gi = 0;
        for p in 0..self.n * self.c {
            let base = p * self.h * self.w;
            for &(y0, y1, fy) in &ys {
                let r0 = base + y0 * self.w;
                let r1 = base + y1 * self.w;
                for &(x0, x1, fx) in &xs {
                    let gv = g[gi];
                    gi += 1;
                    let one = T::one();
                    dx[r0 + x0] += gv * (one - fy) * (one - fx);
                    dx[r0 + x1] += gv * (one - fy) * fx;
                    dx[r1 + x0] += gv * fy * (one - fx);
                    dx[r1 + x1] += gv * fy * fx;
                }
            }
        }
        vec![Some(Tensor::from_parts(
            args.inputs[0].shape().to_vec(),
            dx,
        ))]
    }
}

struct ZeroPad2dOp {
    h: usize,
    w: usize,
}

impl<T: Real> OpRule<T> for ZeroPad2dOp {
    fn name(&self) -> &'static str {
        "zero_pad2d"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let gsh = args.grad.shape();
        let (nh, nw) = (gsh[2], gsh[3]);
        let planes = gsh[0] * gsh[1];
        let mut dx = Vec::with_capacity(planes * self.h * self.w);
        for p in 0..planes {
            for y in 0..self.h {
                let src = (p * nh + y) * nw;
                dx.extend_from_slice(&g[src..src + self.w]);
            }
        }
        vec![Some(Tensor::from_parts(
            args.inputs[0].shape().to_vec(),
            dx,
        ))]
    }
}

// ---- softmax -----------------------------------------------------------

struct SoftmaxOp {
    outer: usize,
    extent: usize,
    inner: usize,
}

impl<T: Real> OpRule<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let y = args.output.data();
        let mut dx = vec![T::zero(); g.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |e: usize| (o * self.extent + e) * self.inner + i;
                let mut dot = 0.0f64;
                for e in 0..self.extent {
                    dot += (g[at(e)] * y[at(e)]).as_f64();
                }
                let dot = T::from_f64(dot);
                for e in 0..self.extent {
                    let j = at(e);
                    dx[j] = y[j] * (g[j] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(
            args.inputs[0].shape().to_vec(),
            dx,
        ))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f32) * 0.37 - 2.0));
        let mut wt = Tensor::zeros(&[1, 1, 3, 3]);
        wt.set(&[0, 0, 1, 1], 1.0);
        let w = tape.leaf(wt);
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_stride_two_halves_extents() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2, 3, 8, 8]));
        let w = tape.leaf(Tensor::ones(&[4, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
        // Interior outputs see the full 3x3x3 window of ones.
        assert_eq!(tape.value(y).at(&[0, 0, 1, 1]), 27.0);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[1, 3, 4, 4]));
        let w = tape.leaf(Tensor::ones(&[2, 4, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn batch_norm_train_normalizes_per_channel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4, 4], |i| {
            ((i * 37 + 11) % 17) as f32 * 0.5 - 3.0
        }));
        let gamma = tape.leaf(Tensor::ones(&[3]));
        let beta = tape.leaf(Tensor::zeros(&[3]));
        let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let yd = tape.value(y);
        for c in 0..3 {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for n in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        let v = yd.at(&[n, c, h, w]) as f64;
                        s += v;
                        s2 += v * v;
                    }
                }
            }
            let m = s / 32.0;
            let v = s2 / 32.0 - m * m;
            assert!(m.abs() < 1e-6, "channel mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "channel var {v}");
        }
        assert_eq!(mean.shape(), &[3]);
        assert_eq!(var.shape(), &[3]);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2, 2], 5.0));
        let gamma = tape.leaf(t(&[2], &[2.0, 1.0]));
        let beta = tape.leaf(t(&[2], &[0.5, 0.0]));
        let mean = t(&[2], &[5.0, 1.0]);
        let var = t(&[2], &[4.0, 1.0]);
        let y = tape
            .batch_norm_eval(x, gamma, beta, &mean, &var, 0.0)
            .unwrap();
        // Channel 0: (5-5)/2*2 + 0.5 = 0.5. Channel 1: (5-1)/1*1 = 4.
        assert_eq!(tape.value(y).at(&[0, 0, 0, 0]), 0.5);
        assert_eq!(tape.value(y).at(&[0, 1, 1, 1]), 4.0);
    }

    #[test]
    fn avg_pool_divisibility_error_mentions_padding() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 5, 4]));
        let err = tape.avg_pool(x, 2, 2).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn avg_pool_known_grid() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 2, 4], |i| i as f32));
        let y = tape.avg_pool(x, 2, 2).unwrap();
        // Windows: {0,1,4,5} and {2,3,6,7}.
        assert_eq!(tape.value(y).data(), &[2.5, 4.5]);
    }

    #[test]
    fn max_pool_routes_gradient_to_first_maximum() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[5.0, 5.0, 1.0, 5.0]));
        let y = tape.max_pool(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_after_unpool_is_identity_bitwise() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(m, n) in &[(2, 2), (4, 4), (7, 7), (3, 5)] {
            let mut tape = Tape::<f32>::new();
            let y0 = Tensor::<f32>::randn(&[2, 3, 4, 4], 1.0, &mut rng);
            let x = tape.leaf(y0.clone());
            let up = tape.unpool(x, m, n).unwrap();
            assert_eq!(tape.shape(up), &[2, 3, 4 * m, 4 * n]);
            let down = tape.avg_pool(up, m, n).unwrap();
            assert_eq!(tape.value(down).data(), y0.data(), "window {m}x{n}");
        }
    }

    #[test]
    fn same_size_pooling_keeps_extents() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32));
        let a = tape.avg_pool_same2(x).unwrap();
        let m = tape.max_pool_same2(x).unwrap();
        assert_eq!(tape.shape(a), &[1, 1, 3, 3]);
        assert_eq!(tape.shape(m), &[1, 1, 3, 3]);
        // Bottom-right window is the single corner cell.
        assert_eq!(tape.value(a).at(&[0, 0, 2, 2]), 8.0);
        assert_eq!(tape.value(m).at(&[0, 0, 2, 2]), 8.0);
        // Interior window averages {0,1,3,4}.
        assert_eq!(tape.value(a).at(&[0, 0, 0, 0]), 2.0);
        assert_eq!(tape.value(m).at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn global_pools_reduce_to_one_by_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4, 5], |i| (i % 13) as f32 - 6.0));
        let a = tape.global_avg_pool(x).unwrap();
        let m = tape.global_max_pool(x).unwrap();
        assert_eq!(tape.shape(a), &[2, 3, 1, 1]);
        assert_eq!(tape.shape(m), &[2, 3, 1, 1]);
        assert_eq!(tape.value(m).at(&[0, 0, 0, 0]), 6.0);
    }

    #[test]
    fn upsample_preserves_constants_exactly() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 5, 7], 3.0));
        let y = tape.upsample_bilinear_2x(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 10, 14]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn upsample_matches_hand_computed_grid() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[0.0, 4.0, 8.0, 12.0]));
        let y = tape.upsample_bilinear_2x(x).unwrap();
        let expect: [f32; 16] = [
            0.0, 1.0, 3.0, 4.0, 2.0, 3.0, 5.0, 6.0, 6.0, 7.0, 9.0, 10.0, 8.0, 9.0, 11.0, 12.0,
        ];
        assert_eq!(tape.value(y).data(), &expect);
    }

    #[test]
    fn downsample_by_avg_pool_inverts_upsample_on_smooth_ramp() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32 * 0.1));
        let up = tape.upsample_bilinear_2x(x).unwrap();
        let down = tape.avg_pool(up, 2, 2).unwrap();
        for (a, b) in tape.value(down).data().iter().zip(tape.value(x).data()) {
            assert!((a - b).abs() < 0.1, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_pad_then_crop_round_trips() {
        let mut tape = Tape::<f32>::new();
        let x0 = Tensor::from_fn(&[2, 2, 3, 5], |i| i as f32);
        let x = tape.leaf(x0.clone());
        let p = tape.zero_pad2d(x, 4, 2).unwrap();
        assert_eq!(tape.shape(p), &[2, 2, 7, 7]);
        let c = tape.crop2d(p, 3, 5).unwrap();
        assert_eq!(tape.value(c).data(), x0.data());
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 60]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 5, 3, 3], |i| {
            ((i * 31 + 7) % 23) as f32 * 0.3 - 3.0
        }));
        let y = tape.softmax(x, 1).unwrap();
        let yd = tape.value(y);
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let s: f32 = (0..5).map(|c| yd.at(&[n, c, h, w])).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::<f32>::new();
        let x0 = Tensor::from_fn(&[1, 4, 1, 1], |i| i as f32 * 0.7 - 1.0);
        let x = tape.leaf(x0.clone());
        let shifted = tape.add_scalar(x, 3.25);
        let y0 = tape.softmax(x, 1).unwrap();
        let y1 = tape.softmax(shifted, 1).unwrap();
        for (a, b) in tape.value(y0).data().iter().zip(tape.value(y1).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_survives_huge_gaps_without_overflow() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[0.5, 1000.5]));
        let y = tape.softmax(x, 0).unwrap();
        let yd = tape.value(y).data();
        assert!(yd[0] < 1e-6 && (yd[1] - 1.0).abs() < 1e-6);

        let z = tape.leaf(t(&[2], &[0.0, 0.0]));
        let yz = tape.softmax(z, 0).unwrap();
        assert_eq!(tape.value(yz).data(), &[0.5, 0.5]);
    }
}
