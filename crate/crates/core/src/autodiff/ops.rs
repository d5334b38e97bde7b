use super::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::real::{matmul_into, MatRef, Real};
use crate::tensor::{Shape, Tensor};

/// Softmax over the unmasked positions. Where `mask[i]` is `true` the
/// position is masked out and receives exactly zero.
pub fn masked_softmax<T: Real>(logits: &[T], mask: &[bool]) -> Result<Vec<T>> {
    let mut out = vec![T::ZERO; logits.len()];
    masked_softmax_into(logits, mask, &mut out)?;
    Ok(out)
}

pub(crate) fn masked_softmax_into<T: Real>(logits: &[T], mask: &[bool], out: &mut [T]) -> Result<()> {
    if mask.len() != logits.len() {
        return Err(Error::shape(format!(
            "mask length {} for {} logits",
            mask.len(),
            logits.len()
        )));
    }
    if mask.iter().all(|&m| m) {
        return Err(Error::DegenerateWindow);
    }
    let mut max = T::NEG_INFINITY;
    for (&x, &m) in logits.iter().zip(mask) {
        if !m {
            if !x.is_finite() {
                return Err(Error::Numerical(format!("non-finite attention logit {x}")));
            }
            max = max.max(x);
        }
    }
    let mut total = T::ZERO;
    for ((o, &x), &m) in out.iter_mut().zip(logits).zip(mask) {
        *o = if m { T::ZERO } else { (x - max).exp() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Vector-Jacobian product of softmax: `dx_i = p_i (g_i - sum_j g_j p_j)`.
/// Masked positions have `p_i = 0` and so receive zero.
pub fn softmax_backward_row<T: Real>(probs: &[T], grad: &[T], out: &mut [T]) {
    let dot: T = probs.iter().zip(grad).map(|(&p, &g)| p * g).sum();
    for ((o, &p), &g) in out.iter_mut().zip(probs).zip(grad) {
        *o = p * (g - dot);
    }
}

/// Rows of a tensor viewed as a matrix: everything but the last axis.
fn as_matrix(shape: Shape) -> (usize, usize) {
    (shape[0] * shape[1] * shape[2], shape[3])
}

struct MatMulBack {
    r: usize,
    k: usize,
    c: usize,
}

impl<T: Real> Backward<T> for MatMulBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad_out;
        let (r, k, c) = (self.r, self.k, self.c);
        let ga = ctx.needs[0].then(|| {
            let mut ga = vec![T::ZERO; r * k];
            matmul_into(r, c, k, MatRef::row_major(g, c), MatRef::transposed(b, c), &mut ga, false);
            ga
        });
        let gb = ctx.needs[1].then(|| {
            let mut gb = vec![T::ZERO; k * c];
            matmul_into(k, r, c, MatRef::transposed(a, k), MatRef::row_major(g, c), &mut gb, false);
            gb
        });
        vec![ga, gb]
    }
}

struct AddBack;

impl<T: Real> Backward<T> for AddBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        ctx.needs.iter().map(|&n| n.then(|| ctx.grad_out.to_vec())).collect()
    }
}

struct SubBack;

impl<T: Real> Backward<T> for SubBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![
            ctx.needs[0].then(|| ctx.grad_out.to_vec()),
            ctx.needs[1].then(|| ctx.grad_out.iter().map(|&g| -g).collect()),
        ]
    }
}

struct MulBack;

impl<T: Real> Backward<T> for MulBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad_out;
        vec![
            ctx.needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
            ctx.needs[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
        ]
    }
}

struct ScaleBack<T>(T);

impl<T: Real> Backward<T> for ScaleBack<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad_out.iter().map(|&g| g * self.0).collect())]
    }
}

struct ReluBack;

impl<T: Real> Backward<T> for ReluBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0].data();
        vec![Some(
            ctx.grad_out
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                .collect(),
        )]
    }
}

struct SumBack {
    len: usize,
    scale: f64,
}

impl<T: Real> Backward<T> for SumBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![ctx.grad_out[0] * T::from_f64(self.scale); self.len])]
    }
}

struct ReshapeBack;

impl<T: Real> Backward<T> for ReshapeBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad_out.to_vec())]
    }
}

struct MaskedSoftmaxBack {
    cols: usize,
}

impl<T: Real> Backward<T> for MaskedSoftmaxBack {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let p = ctx.output.data();
        let mut gx = vec![T::ZERO; p.len()];
        for ((p, g), o) in p
            .chunks_exact(self.cols)
            .zip(ctx.grad_out.chunks_exact(self.cols))
            .zip(gx.chunks_exact_mut(self.cols))
        {
            softmax_backward_row(p, g, o);
        }
        vec![Some(gx)]
    }
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Shape> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa)
    }

    /// Matrix product with each operand viewed as `(n*c*h) x w`. The result
    /// has shape `(1, 1, rows_a, cols_b)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (r, k) = as_matrix(sa);
        let (k2, c) = as_matrix(sb);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: ({r}x{k}) from {sa:?} times ({k2}x{c}) from {sb:?}"
            )));
        }
        let mut out = vec![T::ZERO; r * c];
        matmul_into(
            r,
            k,
            c,
            MatRef::row_major(self.value(a).data(), k),
            MatRef::row_major(self.value(b).data(), c),
            &mut out,
            false,
        );
        let value = Tensor::from_vec([1, 1, r, c], out)?;
        self.push("matmul", value, vec![a, b], MatMulBack { r, k, c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        self.push("add", Tensor::from_vec(shape, data)?, vec![a, b], AddBack)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        self.push("sub", Tensor::from_vec(shape, data)?, vec![a, b], SubBack)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        self.push("mul", Tensor::from_vec(shape, data)?, vec![a, b], MulBack)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let value = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v * factor).collect())?;
        self.push("scale", value, vec![a], ScaleBack(factor))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let data = x.data().iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        self.push("relu", value, vec![a], ReluBack)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let total: T = x.data().iter().copied().sum();
        let len = x.numel();
        self.push("sum", Tensor::scalar(total), vec![a], SumBack { len, scale: 1.0 })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let len = x.numel();
        if len == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let total: T = x.data().iter().copied().sum();
        let value = Tensor::scalar(total / T::from_f64(len as f64));
        self.push("mean", value, vec![a], SumBack { len, scale: 1.0 / len as f64 })
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).clone().with_requires_grad(false).reshape(shape)?;
        self.push("reshape", value, vec![a], ReshapeBack)
    }

    /// Row-wise masked softmax over the last axis. `mask` has one entry per
    /// column (shared by all rows) or one per element; `true` masks out.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let (rows, cols) = as_matrix(x.shape());
        let per_element = mask.len() == x.numel();
        if !per_element && mask.len() != cols {
            return Err(Error::shape(format!(
                "mask of length {} for {rows}x{cols} logits",
                mask.len()
            )));
        }
        let mut out = vec![T::ZERO; x.numel()];
        for (r, (row, o)) in x.data().chunks_exact(cols.max(1)).zip(out.chunks_exact_mut(cols.max(1))).enumerate() {
            let m = if per_element { &mask[r * cols..(r + 1) * cols] } else { mask };
            masked_softmax_into(row, m, o)?;
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        self.push("masked_softmax", value, vec![a], MaskedSoftmaxBack { cols })
    }
}
