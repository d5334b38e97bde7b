//! Scalar-loop reference evaluations used to verify the windowed kernel.
//! Nothing here shares code with the GEMM path.

use super::{LfamConfig, LfamParams, ResidualSource};
use crate::error::{Error, Result};
use crate::nn::ConvParams;
use crate::real::Real;
use crate::tensor::Tensor;

/// Largest `h * w` the global oracle accepts.
pub const ORACLE_MAX_PIXELS: usize = 4096;

/// 1x1 convolution by explicit loops.
pub fn project<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Tensor<T> {
    let (n, cin, h, w) = x.dims();
    let cout = p.weight.shape()[0];
    let mut out = Tensor::zeros([n, cout, h, w]);
    for b in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = p.bias.data()[o];
                    for c in 0..cin {
                        acc += p.weight.at(o, c, 0, 0) * x.at(b, c, y, xx);
                    }
                    out.set(b, o, y, xx, acc);
                }
            }
        }
    }
    out
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut max = T::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut total = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Unrestricted attention of every encoder pixel over every decoder pixel,
/// with no residual: `O((hw)^2 d)` loops.
pub fn global_attention_oracle<T: Real>(
    encoder: &Tensor<T>,
    decoder: &Tensor<T>,
    params: &LfamParams<T>,
) -> Result<Tensor<T>> {
    if encoder.shape() != decoder.shape() {
        return Err(Error::shape(format!(
            "oracle: encoder {:?} and decoder {:?} differ",
            encoder.shape(),
            decoder.shape()
        )));
    }
    let (n, _, h, w) = encoder.dims();
    let hw = h * w;
    if hw > ORACLE_MAX_PIXELS {
        return Err(Error::ScaleGuard(format!(
            "global oracle refuses {h}x{w} maps (limit {ORACLE_MAX_PIXELS} pixels)"
        )));
    }
    let fq = project(encoder, &params.query);
    let fk = project(decoder, &params.key);
    let fv = project(decoder, &params.value);
    let d = fq.shape()[1];
    let dv = fv.shape()[1];
    let mut out = Tensor::zeros([n, dv, h, w]);
    let mut row = vec![T::ZERO; hw];
    for b in 0..n {
        for p in 0..hw {
            let (py, px) = (p / w, p % w);
            for (q, r) in row.iter_mut().enumerate() {
                let (qy, qx) = (q / w, q % w);
                let mut dot = T::ZERO;
                for c in 0..d {
                    dot += fq.at(b, c, py, px) * fk.at(b, c, qy, qx);
                }
                *r = dot;
            }
            softmax_in_place(&mut row);
            for c in 0..dv {
                let mut acc = T::ZERO;
                for (q, &wt) in row.iter().enumerate() {
                    acc += wt * fv.at(b, c, q / w, q % w);
                }
                out.set(b, c, py, px, acc);
            }
        }
    }
    Ok(out)
}

/// Windowed attention by explicit per-window loops that materialize each
/// `(m^2 x m^2)` map, including the residual from `cfg`.
pub fn naive_windowed_attention<T: Real>(
    encoder: &Tensor<T>,
    decoder: &Tensor<T>,
    params: &LfamParams<T>,
    cfg: &LfamConfig,
) -> Result<Tensor<T>> {
    if encoder.shape() != decoder.shape() {
        return Err(Error::shape("naive attention: encoder and decoder differ"));
    }
    let (query_src, kv_src) = if cfg.swap_qkv { (decoder, encoder) } else { (encoder, decoder) };
    let fq = project(query_src, &params.query);
    let fk = project(kv_src, &params.key);
    let fv = project(kv_src, &params.value);
    let (n, d, h, w) = fq.dims();
    let dv = fv.shape()[1];
    let m = cfg.local_range;
    let scale = if cfg.scale_logits { T::ONE / T::from_f64(d as f64).sqrt() } else { T::ONE };
    let mut out = Tensor::zeros([n, dv, h, w]);
    for b in 0..n {
        for wy in (0..h).step_by(m) {
            for wx in (0..w).step_by(m) {
                let pixels: Vec<(usize, usize)> = (wy..(wy + m).min(h))
                    .flat_map(|y| (wx..(wx + m).min(w)).map(move |x| (y, x)))
                    .collect();
                let k = pixels.len();
                let mut attn = vec![vec![T::ZERO; k]; k];
                for (i, &(py, px)) in pixels.iter().enumerate() {
                    for (j, &(qy, qx)) in pixels.iter().enumerate() {
                        let mut dot = T::ZERO;
                        for c in 0..d {
                            dot += fq.at(b, c, py, px) * fk.at(b, c, qy, qx);
                        }
                        attn[i][j] = dot * scale;
                    }
                    softmax_in_place(&mut attn[i]);
                }
                for (i, &(py, px)) in pixels.iter().enumerate() {
                    for c in 0..dv {
                        let mut acc = T::ZERO;
                        for (j, &(qy, qx)) in pixels.iter().enumerate() {
                            acc += attn[i][j] * fv.at(b, c, qy, qx);
                        }
                        out.set(b, c, py, px, acc);
                    }
                }
            }
        }
    }
    let residual = match cfg.residual_source {
        ResidualSource::Encoder => Some(encoder),
        ResidualSource::Decoder => Some(decoder),
        ResidualSource::None => None,
    };
    if let Some(r) = residual {
        for (o, v) in out.data_mut().iter_mut().zip(r.data()) {
            *o += *v;
        }
    }
    Ok(out)
}
