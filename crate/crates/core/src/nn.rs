//! Convolutional building blocks recorded on a [`Tape`]: 2-D convolution
//! (1x1 projections included), 2x2 max pooling, 2x2 transposed convolution,
//! channel concatenation and an optional per-channel affine normalization.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::real::{matmul_into, MatRef, Real};
use crate::rng::Rng64;
use crate::tensor::Tensor;

/// Weights of one convolution. For [`conv2d`] the weight is
/// `(out_ch, in_ch, k, k)`; for [`upconv2x2`] it is `(in_ch, out_ch, 2, 2)`,
/// the layout that makes it the adjoint of a stride-2 `conv2d` with the
/// same tensor. The bias is stored as `(out_ch, 1, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvParams<T> {
    /// He-normal weights (`std = sqrt(2 / fan_in)`) and zero bias.
    pub fn init(out_ch: usize, in_ch: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng64) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let weight = he_normal([out_ch, in_ch, k, k], fan_in, rng);
        ConvParams { weight, bias: Tensor::zeros([out_ch, 1, 1, 1]), stride, padding }
    }

    /// Transposed 2x2 stride-2 convolution weights `(in_ch, out_ch, 2, 2)`.
    pub fn init_up(in_ch: usize, out_ch: usize, rng: &mut Rng64) -> Self {
        let weight = he_normal([in_ch, out_ch, 2, 2], in_ch as f64, rng);
        ConvParams { weight, bias: Tensor::zeros([out_ch, 1, 1, 1]), stride: 2, padding: 0 }
    }

    /// 1x1 convolution with `weight[o][i] = (o == i)`, zero bias.
    pub fn identity(channels: usize) -> Self {
        let mut weight = Tensor::zeros([channels, channels, 1, 1]);
        for c in 0..channels {
            weight.set(c, c, 0, 0, T::ONE);
        }
        ConvParams { weight, bias: Tensor::zeros([channels, 1, 1, 1]), stride: 1, padding: 0 }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.numel()
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[3]
    }

    /// Puts weight and bias on the tape as tracked (`track`) or constant leaves.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> BoundConv {
        let weight = tape.leaf(self.weight.clone().with_requires_grad(track));
        let bias = tape.leaf(self.bias.clone().with_requires_grad(track));
        BoundConv { weight, bias, stride: self.stride, padding: self.padding }
    }
}

pub(crate) fn he_normal<T: Real>(shape: [usize; 4], fan_in: f64, rng: &mut Rng64) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Convolution parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl BoundConv {
    pub fn conv2d<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        conv2d(tape, x, self.weight, self.bias, self.stride, self.padding)
    }

    pub fn upconv2x2<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        upconv2x2(tape, x, self.weight, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one image `(cin, h, w)` into `(cin*k*k, oh*ow)`.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let out = &mut col[row * self.cols()..(row + 1) * self.cols()];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ky as isize - p;
                        let dst = &mut out[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = T::ZERO);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize { T::ZERO } else { src[ix as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds columns into `(cin, h, w)`.
    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * self.cols()..(row + 1) * self.cols()];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

struct ConvBack {
    geom: ConvGeom,
    n: usize,
    cout: usize,
}

impl<T: Real> Backward<T> for ConvBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (rows, cols, cout) = (g.rows(), g.cols(), self.cout);
        let in_len = g.cin * g.h * g.w;
        let mut gx = ctx.needs[0].then(|| vec![T::ZERO; x.len()]);
        let mut gw = ctx.needs[1].then(|| vec![T::ZERO; w.len()]);
        let mut gb = ctx.needs[2].then(|| vec![T::ZERO; cout]);
        let mut col = vec![T::ZERO; if g.is_pointwise() { 0 } else { rows * cols }];
        let mut gcol = vec![T::ZERO; if g.is_pointwise() || gx.is_none() { 0 } else { rows * cols }];

        for n in 0..self.n {
            let gy = &ctx.grad_out[n * cout * cols..(n + 1) * cout * cols];
            let xn = &x[n * in_len..(n + 1) * in_len];
            if let Some(gw) = gw.as_mut() {
                let cols_ref: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    g.im2col(xn, &mut col);
                    &col
                };
                matmul_into(cout, cols, rows, MatRef::row_major(gy, cols), MatRef::transposed(cols_ref, cols), gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                let gxn = &mut gx[n * in_len..(n + 1) * in_len];
                if g.is_pointwise() {
                    matmul_into(rows, cout, cols, MatRef::transposed(w, rows), MatRef::row_major(gy, cols), gxn, true);
                } else {
                    matmul_into(rows, cout, cols, MatRef::transposed(w, rows), MatRef::row_major(gy, cols), &mut gcol, false);
                    g.col2im(&gcol, gxn);
                }
            }
            if let Some(gb) = gb.as_mut() {
                for (o, b) in gb.iter_mut().enumerate() {
                    *b += gy[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
                }
            }
        }
        vec![gx, gw, gb]
    }
}

/// Cross-correlation with bias. Output spatial size is
/// `(h + 2*padding - k) / stride + 1`, which must be exact.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (n, cin, h, w) = tape.value(x).dims();
    let [cout, wcin, kh, kw] = tape.value(weight).shape();
    if kh != kw || !(1..=3).contains(&kh) {
        return Err(Error::shape(format!("conv2d: unsupported kernel {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d: input has {cin} channels, weight {:?} expects {wcin}",
            tape.value(weight).shape()
        )));
    }
    if tape.value(bias).numel() != cout {
        return Err(Error::shape(format!("conv2d: bias length {} for {cout} outputs", tape.value(bias).numel())));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d: stride must be positive"));
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
        return Err(Error::shape(format!(
            "conv2d: {h}x{w} input with kernel {kh}, padding {padding}, stride {stride} has no integer output size"
        )));
    }
    let geom = ConvGeom { cin, h, w, k: kh, stride, pad: padding, oh: (ph - kh) / stride + 1, ow: (pw - kw) / stride + 1 };
    let (rows, cols) = (geom.rows(), geom.cols());
    let xv = tape.value(x).data();
    let wv = tape.value(weight).data();
    let bv = tape.value(bias).data();
    let mut out = vec![T::ZERO; n * cout * cols];
    let mut col = vec![T::ZERO; if geom.is_pointwise() { 0 } else { rows * cols }];
    let in_len = cin * h * w;
    for b in 0..n {
        let xn = &xv[b * in_len..(b + 1) * in_len];
        let yn = &mut out[b * cout * cols..(b + 1) * cout * cols];
        for (o, bias) in bv.iter().enumerate() {
            yn[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v = *bias);
        }
        let cols_ref: &[T] = if geom.is_pointwise() {
            xn
        } else {
            geom.im2col(xn, &mut col);
            &col
        };
        matmul_into(cout, rows, cols, MatRef::row_major(wv, rows), MatRef::row_major(cols_ref, cols), yn, true);
    }
    let value = Tensor::from_vec([n, cout, geom.oh, geom.ow], out)?;
    tape.push("conv2d", value, vec![x, weight, bias], ConvBack { geom, n, cout })
}

struct PoolBack {
    argmax: Vec<usize>,
    in_len: usize,
}

impl<T: Real> Backward<T> for PoolBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::ZERO; self.in_len];
        for (&i, &g) in self.argmax.iter().zip(ctx.grad_out) {
            gx[i] += g;
        }
        vec![Some(gx)]
    }
}

/// 2x2 max pooling. Returns the pooled node and, per output element, the
/// flat input index that won; ties go to the first position in row-major
/// scan order of the block.
pub fn maxpool2x2<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Vec<usize>)> {
    let t = tape.value(x);
    let (n, c, h, w) = t.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2x2: odd spatial size {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = t.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::from_vec([n, c, oh, ow], out)?;
    let in_len = t.numel();
    let var = tape.push("maxpool2x2", value, vec![x], PoolBack { argmax: argmax.clone(), in_len })?;
    Ok((var, argmax))
}

struct UpConvBack {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

impl UpConvBack {
    /// `(n, cout, 2h, 2w)` grad to per-image `(cout*4, h*w)` blocks.
    fn gather<T: Real>(&self, g: &[T], n: usize, out: &mut [T]) {
        let (h, w) = (self.h, self.w);
        let img = &g[n * self.cout * 4 * h * w..(n + 1) * self.cout * 4 * h * w];
        for o in 0..self.cout {
            for a in 0..2 {
                for b in 0..2 {
                    let row = &mut out[((o * 2 + a) * 2 + b) * h * w..][..h * w];
                    for i in 0..h {
                        for j in 0..w {
                            row[i * w + j] = img[(o * 2 * h + 2 * i + a) * 2 * w + 2 * j + b];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Backward<T> for UpConvBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let hw = self.h * self.w;
        let rows = self.cout * 4;
        let mut gx = ctx.needs[0].then(|| vec![T::ZERO; x.len()]);
        let mut gw = ctx.needs[1].then(|| vec![T::ZERO; w.len()]);
        let mut gb = ctx.needs[2].then(|| vec![T::ZERO; self.cout]);
        let mut gy = vec![T::ZERO; rows * hw];
        for n in 0..self.n {
            self.gather(ctx.grad_out, n, &mut gy);
            let xn = &x[n * self.cin * hw..(n + 1) * self.cin * hw];
            if let Some(gx) = gx.as_mut() {
                let gxn = &mut gx[n * self.cin * hw..(n + 1) * self.cin * hw];
                matmul_into(self.cin, rows, hw, MatRef::row_major(w, rows), MatRef::row_major(&gy, hw), gxn, false);
            }
            if let Some(gw) = gw.as_mut() {
                matmul_into(self.cin, hw, rows, MatRef::row_major(xn, hw), MatRef::transposed(&gy, hw), gw, true);
            }
            if let Some(gb) = gb.as_mut() {
                for (o, b) in gb.iter_mut().enumerate() {
                    *b += gy[o * 4 * hw..(o + 1) * 4 * hw].iter().copied().sum::<T>();
                }
            }
        }
        vec![gx, gw, gb]
    }
}

/// Transposed 2x2 convolution at stride 2: `(n, cin, h, w)` to
/// `(n, cout, 2h, 2w)`, with weight `(cin, cout, 2, 2)`.
pub fn upconv2x2<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (n, cin, h, w) = tape.value(x).dims();
    let [wcin, cout, kh, kw] = tape.value(weight).shape();
    if (kh, kw) != (2, 2) {
        return Err(Error::shape(format!("upconv2x2: kernel {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "upconv2x2: input has {cin} channels, weight {:?} expects {wcin}",
            tape.value(weight).shape()
        )));
    }
    if tape.value(bias).numel() != cout {
        return Err(Error::shape(format!("upconv2x2: bias length {} for {cout} outputs", tape.value(bias).numel())));
    }
    let hw = h * w;
    let rows = cout * 4;
    let xv = tape.value(x).data();
    let wv = tape.value(weight).data();
    let bv = tape.value(bias).data();
    let mut out = vec![T::ZERO; n * cout * 4 * hw];
    let mut y = vec![T::ZERO; rows * hw];
    for b in 0..n {
        let xn = &xv[b * cin * hw..(b + 1) * cin * hw];
        matmul_into(rows, cin, hw, MatRef::transposed(wv, rows), MatRef::row_major(xn, hw), &mut y, false);
        let img = &mut out[b * cout * 4 * hw..(b + 1) * cout * 4 * hw];
        for o in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &y[((o * 2 + a) * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..w {
                            img[(o * 2 * h + 2 * i + a) * 2 * w + 2 * j + bb] = row[i * w + j] + bv[o];
                        }
                    }
                }
            }
        }
    }
    let value = Tensor::from_vec([n, cout, 2 * h, 2 * w], out)?;
    tape.push("upconv2x2", value, vec![x, weight, bias], UpConvBack { n, cin, cout, h, w })
}

struct ConcatBack {
    n: usize,
    a_len: usize,
    b_len: usize,
}

impl<T: Real> Backward<T> for ConcatBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let per = self.a_len + self.b_len;
        let g = ctx.grad_out;
        let ga = ctx.needs[0].then(|| (0..self.n).flat_map(|n| g[n * per..n * per + self.a_len].iter().copied()).collect());
        let gb = ctx.needs[1].then(|| (0..self.n).flat_map(|n| g[n * per + self.a_len..(n + 1) * per].iter().copied()).collect());
        vec![ga, gb]
    }
}

/// Concatenates along the channel axis: `(n, ca, h, w) ++ (n, cb, h, w)`.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (n, ca, h, w) = tape.value(a).dims();
    let (nb, cb, hb, wb) = tape.value(b).dims();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat: {:?} and {:?} differ outside the channel axis",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    let (a_len, b_len) = (ca * h * w, cb * h * w);
    let (av, bv) = (tape.value(a).data(), tape.value(b).data());
    let mut out = Vec::with_capacity(n * (a_len + b_len));
    for i in 0..n {
        out.extend_from_slice(&av[i * a_len..(i + 1) * a_len]);
        out.extend_from_slice(&bv[i * b_len..(i + 1) * b_len]);
    }
    let value = Tensor::from_vec([n, ca + cb, h, w], out)?;
    tape.push("concat", value, vec![a, b], ConcatBack { n, a_len, b_len })
}

const NORM_EPS: f64 = 1e-5;

struct NormBack {
    n: usize,
    c: usize,
    hw: usize,
    /// Normalized activations and per-plane inverse std.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl<T: Real> Backward<T> for NormBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let gamma = ctx.inputs[1].data();
        let g = ctx.grad_out;
        let mut gx = ctx.needs[0].then(|| vec![T::ZERO; g.len()]);
        let mut ggamma = vec![0.0f64; self.c];
        let mut gbeta = vec![0.0f64; self.c];
        for plane in 0..self.n * self.c {
            let ch = plane % self.c;
            let range = plane * self.hw..(plane + 1) * self.hw;
            let (gp, xh) = (&g[range.clone()], &self.xhat[range.clone()]);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (&gi, &xi) in gp.iter().zip(xh) {
                sum_g += gi.to_f64();
                sum_gx += gi.to_f64() * xi;
            }
            ggamma[ch] += sum_gx;
            gbeta[ch] += sum_g;
            if let Some(gx) = gx.as_mut() {
                let gam = gamma[ch].to_f64();
                let m = self.hw as f64;
                for ((o, &gi), &xi) in gx[range].iter_mut().zip(gp).zip(xh) {
                    let d = gam * (gi.to_f64() - sum_g / m - xi * sum_gx / m) * self.inv_std[plane];
                    *o = T::from_f64(d);
                }
            }
        }
        let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
        vec![gx, ctx.needs[1].then(|| to_t(ggamma)), ctx.needs[2].then(|| to_t(gbeta))]
    }
}

/// Per-sample, per-channel normalization over the spatial axes followed by
/// a learned affine map; `gamma` and `beta` have one entry per channel.
pub fn channel_norm<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims();
    if tape.value(gamma).numel() != c || tape.value(beta).numel() != c {
        return Err(Error::shape(format!("channel_norm: affine parameters must have {c} entries")));
    }
    let hw = h * w;
    let xv = tape.value(x).data();
    let (gv, bv) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut xhat = vec![0.0f64; xv.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    let mut out = vec![T::ZERO; xv.len()];
    for plane in 0..n * c {
        let range = plane * hw..(plane + 1) * hw;
        let xs = &xv[range.clone()];
        let mean = xs.iter().map(|v| v.to_f64()).sum::<f64>() / hw as f64;
        let var = xs.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(inv);
        let ch = plane % c;
        for ((xh, o), v) in xhat[range.clone()].iter_mut().zip(&mut out[range]).zip(xs) {
            *xh = (v.to_f64() - mean) * inv;
            *o = T::from_f64(gv[ch].to_f64() * *xh + bv[ch].to_f64());
        }
    }
    let value = Tensor::from_vec([n, c, h, w], out)?;
    tape.push("channel_norm", value, vec![x, gamma, beta], NormBack { n, c, hw, xhat, inv_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(shape: [usize; 4], rng: &mut Rng64) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct sliding-window reference.
    fn conv_oracle(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims();
        let [cout, _, k, _] = p.weight.shape();
        let (s, pad) = (p.stride as isize, p.padding as isize);
        let oh = (h + 2 * p.padding - k) / p.stride + 1;
        let ow = (w + 2 * p.padding - k) / p.stride + 1;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        for b in 0..n {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.data()[o];
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize * s + ky as isize - pad;
                                    let ix = ox as isize * s + kx as isize - pad;
                                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                        acc += x.at(b, c, iy as usize, ix as usize) * p.weight.at(o, c, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(b, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn run_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = p.bind(&mut tape, false);
        let y = bound.conv2d(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    fn run_up(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = p.bind(&mut tape, false);
        let y = bound.upconv2x2(&mut tape, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn pointwise_identity_conv_is_identity() {
        let mut rng = seeded(1);
        let x = random([2, 3, 4, 5], &mut rng);
        let y = run_conv(&x, &ConvParams::identity(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_on_constant_input() {
        let v = 0.75;
        let x = Tensor::<f64>::full([1, 1, 5, 5], v);
        let p = ConvParams {
            weight: Tensor::full([1, 1, 3, 3], 1.0),
            bias: Tensor::zeros([1, 1, 1, 1]),
            stride: 1,
            padding: 1,
        };
        let y = run_conv(&x, &p).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0 * v);
        assert_eq!(y.at(0, 0, 0, 2), 6.0 * v);
        assert_eq!(y.at(0, 0, 0, 0), 4.0 * v);
        assert_eq!(y, conv_oracle(&x, &p));
    }

    #[test]
    fn same_conv_shape() {
        let mut rng = seeded(2);
        let x = Tensor::<f64>::zeros([1, 3, 32, 32]);
        let p = ConvParams::init(8, 3, 3, 1, 1, &mut rng);
        assert_eq!(run_conv(&x, &p).unwrap().shape(), [1, 8, 32, 32]);
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let mut rng = seeded(3);
        for (k, stride, pad, size) in [(3, 1, 1, 7), (3, 1, 0, 7), (1, 1, 0, 5), (2, 2, 0, 8), (3, 2, 1, 9)] {
            let x = random([2, 3, size, size], &mut rng);
            let mut p = ConvParams::init(4, 3, k, stride, pad, &mut rng);
            p.bias = random([4, 1, 1, 1], &mut rng);
            let y = run_conv(&x, &p).unwrap();
            let diff = y.max_abs_diff(&conv_oracle(&x, &p)).unwrap();
            assert!(diff < 1e-12, "k={k} s={stride} p={pad}: {diff}");
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut rng = seeded(4);
        let p = ConvParams::<f64>::init(4, 3, 3, 1, 1, &mut rng);
        assert!(matches!(run_conv(&Tensor::zeros([1, 2, 4, 4]), &p), Err(Error::Shape(_))));
        let p = ConvParams::<f64>::init(4, 3, 2, 2, 0, &mut rng);
        assert!(matches!(run_conv(&Tensor::zeros([1, 3, 5, 5]), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_gradients() {
        let mut rng = seeded(5);
        for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (2, 2, 0)] {
            let x = random([1, 2, 6, 6], &mut rng);
            let w = random([3, 2, k, k], &mut rng);
            let b = random([3, 1, 1, 1], &mut rng);
            let probe = random([1, 3, (6 + 2 * pad - k) / stride + 1, (6 + 2 * pad - k) / stride + 1], &mut rng);
            let report = grad_check_many(
                |tape, v| {
                    let y = conv2d(tape, v[0], v[1], v[2], stride, pad)?;
                    let pr = tape.constant(probe.clone());
                    let yy = tape.mul(y, y)?;
                    let z = tape.mul(yy, pr)?;
                    tape.sum(z)
                },
                &[x, w, b],
                1e-5,
            )
            .unwrap();
            assert!(report.max() < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let (y, idx) = maxpool2x2(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        assert_eq!(idx, vec![3]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::full([1, 1, 4, 4], 2.0));
        let (y, _) = maxpool2x2(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        let mut expected = vec![0.0; 16];
        for i in [0, 2, 8, 10] {
            expected[i] = 1.0;
        }
        assert_eq!(g, expected.as_slice());

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros([1, 1, 3, 4]));
        assert!(maxpool2x2(&mut tape, x).is_err());
    }

    #[test]
    fn maxpool_matches_block_max_and_round_trips_shape() {
        let mut rng = seeded(6);
        let x = random([1, 2, 8, 8], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (y, _) = maxpool2x2(&mut tape, xv).unwrap();
        let y = tape.value(y);
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, b)| x.at(0, c, 2 * i + a, 2 * j + b))
                        .fold(f64::MIN, f64::max);
                    assert_eq!(y.at(0, c, i, j), m);
                }
            }
        }
        // Duplicating each pooled value back over its block restores the shape.
        let (n, c, h, w) = y.dims();
        let mut up = Tensor::<f64>::zeros([n, c, 2 * h, 2 * w]);
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    up.set(0, ch, i, j, y.at(0, ch, i / 2, j / 2));
                }
            }
        }
        assert_eq!(up.shape(), x.shape());
    }

    #[test]
    fn upconv_examples() {
        let mut rng = seeded(7);
        let p = ConvParams::<f64>::init_up(4, 2, &mut rng);
        assert_eq!(run_up(&Tensor::zeros([1, 4, 16, 16]), &p).shape(), [1, 2, 32, 32]);

        let ones = ConvParams {
            weight: Tensor::full([1, 1, 2, 2], 1.0),
            bias: Tensor::zeros([1, 1, 1, 1]),
            stride: 2,
            padding: 0,
        };
        let y = run_up(&Tensor::full([1, 1, 3, 3], 1.0), &ones);
        assert!(y.data().iter().all(|&v| v == 1.0));

        let zero = ConvParams {
            weight: Tensor::zeros([3, 2, 2, 2]),
            bias: Tensor::from_f64([2, 1, 1, 1], &[0.5, -1.5]).unwrap(),
            stride: 2,
            padding: 0,
        };
        let y = run_up(&random([2, 3, 2, 2], &mut rng), &zero);
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(y.at(b, 0, i, j), 0.5);
                    assert_eq!(y.at(b, 1, i, j), -1.5);
                }
            }
        }
    }

    #[test]
    fn upconv_is_adjoint_of_strided_conv() {
        let mut rng = seeded(8);
        for _ in 0..5 {
            let weight = random([3, 2, 2, 2], &mut rng);
            let conv = ConvParams { weight: weight.clone(), bias: Tensor::zeros([3, 1, 1, 1]), stride: 2, padding: 0 };
            let up = ConvParams { weight, bias: Tensor::zeros([2, 1, 1, 1]), stride: 2, padding: 0 };
            let x = random([2, 2, 6, 6], &mut rng);
            let y = random([2, 3, 3, 3], &mut rng);
            let cx = run_conv(&x, &conv).unwrap();
            let uy = run_up(&y, &up);
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(uy.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn upconv_concat_and_norm_gradients() {
        let mut rng = seeded(9);
        let x = random([2, 3, 3, 3], &mut rng);
        let w = random([3, 2, 2, 2], &mut rng);
        let b = random([2, 1, 1, 1], &mut rng);
        let skip = random([2, 1, 6, 6], &mut rng);
        let gamma = random([3, 1, 1, 1], &mut rng);
        let beta = random([3, 1, 1, 1], &mut rng);
        let probe = random([2, 3, 6, 6], &mut rng);
        let report = grad_check_many(
            |tape, v| {
                let y = upconv2x2(tape, v[0], v[1], v[2])?;
                let cat = concat_channels(tape, y, v[3])?;
                let nrm = channel_norm(tape, cat, v[4], v[5])?;
                let pr = tape.constant(probe.clone());
                let z = tape.mul(nrm, pr)?;
                let z = tape.mul(z, nrm)?;
                tape.sum(z)
            },
            &[x, w, b, skip, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(report.max() < 1e-4, "{report:?}");
    }
}
