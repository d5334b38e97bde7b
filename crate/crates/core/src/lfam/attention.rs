//! Windowed source-target attention kernel.
//!
//! Each window gathers its query, key and value vectors into contiguous
//! `(m^2 x d)` blocks, forms the `(m^2 x m^2)` logit block with one GEMM,
//! applies the padded-key mask and softmax row by row, and aggregates the
//! values with a second GEMM. Windows are disjoint, so both passes write to
//! disjoint pixels and batch items can be split across threads without any
//! reduction.

use super::grid::WindowGrid;
use crate::autodiff::{masked_softmax, softmax_backward_row, Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::real::{matmul_into, MatRef, Real};
use crate::tensor::Tensor;
use crate::workers::parallel_map;

/// Attention maps of every window: for batch item `b` and window `win`, a
/// row-major `(m^2 x m^2)` block whose entry `[p, q]` weighs decoder slot `q`
/// for encoder slot `p`. Rows of padded query slots are all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub grid: WindowGrid,
    pub batch: usize,
    blocks: Vec<Vec<T>>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn block(&self, b: usize, win: usize) -> &[T] {
        &self.blocks[b * self.grid.len() + win]
    }

    pub fn row(&self, b: usize, win: usize, p: usize) -> &[T] {
        let a = self.grid.window_area();
        &self.block(b, win)[p * a..(p + 1) * a]
    }
}

/// Per-batch-item view of a `(n, c, h, w)` tensor's data.
fn item<T>(data: &[T], b: usize, c: usize, hw: usize) -> &[T] {
    &data[b * c * hw..(b + 1) * c * hw]
}

/// Copies the channel vectors of a window's slots into a `(m^2 x c)` block;
/// padded slots become zero rows.
fn gather<T: Real>(src: &[T], c: usize, hw: usize, slots: &[Option<usize>], out: &mut [T]) {
    for (s, pix) in slots.iter().enumerate() {
        let row = &mut out[s * c..(s + 1) * c];
        match pix {
            Some(p) => row.iter_mut().enumerate().for_each(|(ch, v)| *v = src[ch * hw + p]),
            None => row.iter_mut().for_each(|v| *v = T::ZERO),
        }
    }
}

fn scatter<T: Real>(block: &[T], c: usize, hw: usize, slots: &[Option<usize>], dst: &mut [T]) {
    for (s, pix) in slots.iter().enumerate() {
        if let Some(p) = pix {
            for ch in 0..c {
                dst[ch * hw + p] = block[s * c + ch];
            }
        }
    }
}

struct Dims {
    n: usize,
    d: usize,
    dv: usize,
    h: usize,
    w: usize,
}

fn check_inputs<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Dims> {
    let (n, d, h, w) = q.dims();
    let (kn, kd, kh, kw) = k.dims();
    let (vn, dv, vh, vw) = v.dims();
    if (n, d, h, w) != (kn, kd, kh, kw) {
        return Err(Error::shape(format!("attention: queries {:?} vs keys {:?}", q.shape(), k.shape())));
    }
    if (n, h, w) != (vn, vh, vw) {
        return Err(Error::shape(format!("attention: queries {:?} vs values {:?}", q.shape(), v.shape())));
    }
    Ok(Dims { n, d, dv, h, w })
}

/// Forward pass of windowed attention on plain tensors.
pub fn windowed_attention<T: Real>(
    queries: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    grid: &WindowGrid,
    scale_logits: bool,
) -> Result<(Tensor<T>, AttentionWeights<T>)> {
    let Dims { n, d, dv, h, w } = check_inputs(queries, keys, values)?;
    if (grid.h, grid.w) != (h, w) {
        return Err(Error::shape(format!("window grid {}x{} for a {h}x{w} map", grid.h, grid.w)));
    }
    let hw = h * w;
    let a = grid.window_area();
    let scale = if scale_logits { T::ONE / T::from_f64(d as f64).sqrt() } else { T::ONE };
    let slot_tables: Vec<Vec<Option<usize>>> = (0..grid.len()).map(|win| grid.slots(win)).collect();
    let (qd, kd, vd) = (queries.data(), keys.data(), values.data());

    let per_item = parallel_map(n, |b| -> Result<(Vec<T>, Vec<Vec<T>>)> {
        let (qb, kb, vb) = (item(qd, b, d, hw), item(kd, b, d, hw), item(vd, b, dv, hw));
        let mut out = vec![T::ZERO; dv * hw];
        let mut blocks = Vec::with_capacity(grid.len());
        let mut qw = vec![T::ZERO; a * d];
        let mut kw = vec![T::ZERO; a * d];
        let mut vw = vec![T::ZERO; a * dv];
        let mut logits = vec![T::ZERO; a * a];
        let mut yw = vec![T::ZERO; a * dv];
        for slots in &slot_tables {
            gather(qb, d, hw, slots, &mut qw);
            gather(kb, d, hw, slots, &mut kw);
            gather(vb, dv, hw, slots, &mut vw);
            T::gemm(a, d, a, scale, MatRef::row_major(&qw, d), MatRef::transposed(&kw, d), T::ZERO, &mut logits, (a as isize, 1));
            let key_mask: Vec<bool> = slots.iter().map(Option::is_none).collect();
            let mut weights = vec![T::ZERO; a * a];
            for (p, pix) in slots.iter().enumerate() {
                if pix.is_some() {
                    let row = masked_softmax(&logits[p * a..(p + 1) * a], &key_mask)?;
                    weights[p * a..(p + 1) * a].copy_from_slice(&row);
                }
            }
            matmul_into(a, a, dv, MatRef::row_major(&weights, a), MatRef::row_major(&vw, dv), &mut yw, false);
            scatter(&yw, dv, hw, slots, &mut out);
            blocks.push(weights);
        }
        Ok((out, blocks))
    });

    let mut out = Vec::with_capacity(n * dv * hw);
    let mut blocks = Vec::with_capacity(n * grid.len());
    for r in per_item {
        let (o, b) = r?;
        out.extend(o);
        blocks.extend(b);
    }
    Ok((
        Tensor::from_vec([n, dv, h, w], out)?,
        AttentionWeights { grid: grid.clone(), batch: n, blocks },
    ))
}

struct AttentionBack<T> {
    weights: AttentionWeights<T>,
    scale: T,
}

impl<T: Real> Backward<T> for AttentionBack<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (q, k, v) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let (n, d, h, w) = q.dims();
        let dv = v.shape()[1];
        let hw = h * w;
        let grid = &self.weights.grid;
        let a = grid.window_area();
        let slot_tables: Vec<Vec<Option<usize>>> = (0..grid.len()).map(|win| grid.slots(win)).collect();
        let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), ctx.grad_out);

        let per_item = parallel_map(n, |b| {
            let (qb, kb, vb, gb) = (item(qd, b, d, hw), item(kd, b, d, hw), item(vd, b, dv, hw), item(gd, b, dv, hw));
            let mut gq = vec![T::ZERO; d * hw];
            let mut gk = vec![T::ZERO; d * hw];
            let mut gv = vec![T::ZERO; dv * hw];
            let mut qw = vec![T::ZERO; a * d];
            let mut kw = vec![T::ZERO; a * d];
            let mut vw = vec![T::ZERO; a * dv];
            let mut gy = vec![T::ZERO; a * dv];
            let mut gw = vec![T::ZERO; a * a];
            let mut glogits = vec![T::ZERO; a * a];
            let mut block = vec![T::ZERO; a * d.max(dv)];
            for (win, slots) in slot_tables.iter().enumerate() {
                let weights = self.weights.block(b, win);
                gather(qb, d, hw, slots, &mut qw);
                gather(kb, d, hw, slots, &mut kw);
                gather(vb, dv, hw, slots, &mut vw);
                gather(gb, dv, hw, slots, &mut gy);

                // dV = W^T dY
                matmul_into(a, a, dv, MatRef::transposed(weights, a), MatRef::row_major(&gy, dv), &mut block[..a * dv], false);
                scatter(&block[..a * dv], dv, hw, slots, &mut gv);

                // dW = dY V^T, then through the row softmax.
                matmul_into(a, dv, a, MatRef::row_major(&gy, dv), MatRef::transposed(&vw, dv), &mut gw, false);
                for p in 0..a {
                    let r = p * a..(p + 1) * a;
                    softmax_backward_row(&weights[r.clone()], &gw[r.clone()], &mut glogits[r]);
                }

                // logits = s * Q K^T
                T::gemm(a, a, d, self.scale, MatRef::row_major(&glogits, a), MatRef::row_major(&kw, d), T::ZERO, &mut block[..a * d], (d as isize, 1));
                scatter(&block[..a * d], d, hw, slots, &mut gq);
                T::gemm(a, a, d, self.scale, MatRef::transposed(&glogits, a), MatRef::row_major(&qw, d), T::ZERO, &mut block[..a * d], (d as isize, 1));
                scatter(&block[..a * d], d, hw, slots, &mut gk);
            }
            (gq, gk, gv)
        });

        let mut gq = Vec::with_capacity(qd.len());
        let mut gk = Vec::with_capacity(kd.len());
        let mut gv = Vec::with_capacity(vd.len());
        for (q, k, v) in per_item {
            gq.extend(q);
            gk.extend(k);
            gv.extend(v);
        }
        vec![ctx.needs[0].then_some(gq), ctx.needs[1].then_some(gk), ctx.needs[2].then_some(gv)]
    }
}

/// Records windowed attention on the tape: queries and keys `(n, d, h, w)`,
/// values `(n, dv, h, w)`, result `(n, dv, h, w)`.
pub fn window_attention<T: Real>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: Var,
    values: Var,
    grid: &WindowGrid,
    scale_logits: bool,
) -> Result<Var> {
    let (out, weights) =
        windowed_attention(tape.value(queries), tape.value(keys), tape.value(values), grid, scale_logits)?;
    let d = tape.value(queries).shape()[1];
    let scale = if scale_logits { T::ONE / T::from_f64(d as f64).sqrt() } else { T::ONE };
    tape.push("window_attention", out, vec![queries, keys, values], AttentionBack { weights, scale })
}
