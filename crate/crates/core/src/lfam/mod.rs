//! Localized feature aggregation: source-target attention between an
//! encoder map `P` and a decoder map `Q` restricted to disjoint `m x m`
//! windows, followed by a residual connection.
//!
//! For an encoder pixel `p` and the decoder pixels `q` of the same window,
//! `W[p, q] = softmax_q(f_q(P_p) . f_k(Q_q))` and
//! `Y_p = sum_q W[p, q] * f_v(Q_q)`. The module output is `Y + P` with the
//! default residual source.

mod attention;
mod grid;
pub mod reference;

pub use attention::{window_attention, windowed_attention, AttentionWeights};
pub use crate::workers::{set_workers, workers};
pub use grid::{window_partition, WindowGrid};
pub use reference::{global_attention_oracle, naive_windowed_attention, ORACLE_MAX_PIXELS};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundConv, ConvParams};
use crate::real::Real;
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const DEFAULT_LOCAL_RANGE: usize = 7;

/// Which map is added to the aggregated output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResidualSource {
    #[default]
    Encoder,
    Decoder,
    None,
}

impl ResidualSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ResidualSource::Encoder => "encoder",
            ResidualSource::Decoder => "decoder",
            ResidualSource::None => "none",
        }
    }
}

impl std::str::FromStr for ResidualSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(ResidualSource::Encoder),
            "decoder" => Ok(ResidualSource::Decoder),
            "none" => Ok(ResidualSource::None),
            other => Err(Error::config(format!("unknown residual source `{other}` (encoder|decoder|none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LfamConfig {
    /// Window side `m`.
    pub local_range: usize,
    pub residual_source: ResidualSource,
    /// Projection width `d`; `None` means the input channel count.
    pub proj_channels: Option<usize>,
    /// Divide logits by `sqrt(d)` before the softmax.
    pub scale_logits: bool,
    /// Take queries from the decoder and keys/values from the encoder.
    pub swap_qkv: bool,
}

impl Default for LfamConfig {
    fn default() -> Self {
        LfamConfig {
            local_range: DEFAULT_LOCAL_RANGE,
            residual_source: ResidualSource::Encoder,
            proj_channels: None,
            scale_logits: false,
            swap_qkv: false,
        }
    }
}

impl LfamConfig {
    pub fn with_local_range(mut self, m: usize) -> Self {
        self.local_range = m;
        self
    }

    pub fn with_residual(mut self, residual: ResidualSource) -> Self {
        self.residual_source = residual;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_range == 0 {
            return Err(Error::config("lfam local_range must be >= 1"));
        }
        if self.proj_channels == Some(0) {
            return Err(Error::config("lfam proj_channels must be >= 1"));
        }
        Ok(())
    }

    pub fn projection_width(&self, channels: usize) -> usize {
        self.proj_channels.unwrap_or(channels)
    }
}

/// The three 1x1 projections `f_q`, `f_k`, `f_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct LfamParams<T> {
    pub query: ConvParams<T>,
    pub key: ConvParams<T>,
    pub value: ConvParams<T>,
}

impl<T: Real> LfamParams<T> {
    pub fn init(channels: usize, cfg: &LfamConfig, rng: &mut Rng64) -> Self {
        let d = cfg.projection_width(channels);
        LfamParams {
            query: ConvParams::init(d, channels, 1, 1, 0, rng),
            key: ConvParams::init(d, channels, 1, 1, 0, rng),
            value: ConvParams::init(d, channels, 1, 1, 0, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> BoundLfam {
        BoundLfam {
            query: self.query.bind(tape, track),
            key: self.key.bind(tape, track),
            value: self.value.bind(tape, track),
        }
    }

    /// Evaluates the module on plain tensors, also returning the
    /// pre-residual aggregation and the attention maps.
    pub fn apply(&self, encoder: &Tensor<T>, decoder: &Tensor<T>, cfg: &LfamConfig) -> Result<LfamOutput<T>> {
        let mut tape = Tape::new();
        let p = tape.constant(encoder.clone());
        let q = tape.constant(decoder.clone());
        let bound = self.bind(&mut tape, false);
        let parts = lfam_parts(&mut tape, p, q, &bound, cfg)?;
        let weights = windowed_attention(
            tape.value(parts.queries),
            tape.value(parts.keys),
            tape.value(parts.values),
            &parts.grid,
            cfg.scale_logits,
        )?
        .1;
        Ok(LfamOutput {
            output: tape.value(parts.output).clone(),
            aggregated: tape.value(parts.aggregated).clone(),
            weights,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LfamOutput<T> {
    /// `Y` plus the residual.
    pub output: Tensor<T>,
    /// `Y` alone.
    pub aggregated: Tensor<T>,
    pub weights: AttentionWeights<T>,
}

/// Projection parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLfam {
    pub query: BoundConv,
    pub key: BoundConv,
    pub value: BoundConv,
}

struct LfamParts {
    queries: Var,
    keys: Var,
    values: Var,
    grid: WindowGrid,
    aggregated: Var,
    output: Var,
}

fn check_projections<T: Real>(tape: &Tape<T>, bound: &BoundLfam, channels: usize, cfg: &LfamConfig) -> Result<()> {
    let shape = |c: &BoundConv| tape.value(c.weight).shape();
    let (sq, sk, sv) = (shape(&bound.query), shape(&bound.key), shape(&bound.value));
    for s in [sq, sk, sv] {
        if s[1] != channels || s[2] != 1 || s[3] != 1 {
            return Err(Error::config(format!(
                "lfam projection weight {s:?} is not a 1x1 map from {channels} channels"
            )));
        }
    }
    if sq[0] != sk[0] || sk[0] != sv[0] {
        return Err(Error::config(format!(
            "lfam projection widths differ: query {}, key {}, value {}",
            sq[0], sk[0], sv[0]
        )));
    }
    if let Some(d) = cfg.proj_channels {
        if d != sq[0] {
            return Err(Error::config(format!("lfam proj_channels = {d} but projections have width {}", sq[0])));
        }
    }
    if cfg.residual_source != ResidualSource::None && sv[0] != channels {
        return Err(Error::config(format!(
            "a {} residual needs projection width {channels}, got {}",
            cfg.residual_source.as_str(),
            sv[0]
        )));
    }
    Ok(())
}

fn lfam_parts<T: Real>(
    tape: &mut Tape<T>,
    encoder: Var,
    decoder: Var,
    bound: &BoundLfam,
    cfg: &LfamConfig,
) -> Result<LfamParts> {
    cfg.validate()?;
    let (se, sd) = (tape.value(encoder).shape(), tape.value(decoder).shape());
    if se != sd {
        return Err(Error::shape(format!("lfam: encoder {se:?} and decoder {sd:?} differ")));
    }
    let [_, channels, h, w] = se;
    check_projections(tape, bound, channels, cfg)?;
    let (query_src, kv_src) = if cfg.swap_qkv { (decoder, encoder) } else { (encoder, decoder) };
    let queries = bound.query.conv2d(tape, query_src)?;
    let keys = bound.key.conv2d(tape, kv_src)?;
    let values = bound.value.conv2d(tape, kv_src)?;
    let grid = window_partition(h, w, cfg.local_range)?;
    let aggregated = window_attention(tape, queries, keys, values, &grid, cfg.scale_logits)?;
    let output = match cfg.residual_source {
        ResidualSource::Encoder => tape.add(aggregated, encoder)?,
        ResidualSource::Decoder => tape.add(aggregated, decoder)?,
        ResidualSource::None => aggregated,
    };
    Ok(LfamParts { queries, keys, values, grid, aggregated, output })
}

/// Records the module on the tape; gradients reach both maps and all
/// three projections.
pub fn lfam_forward<T: Real>(
    tape: &mut Tape<T>,
    encoder: Var,
    decoder: Var,
    params: &BoundLfam,
    cfg: &LfamConfig,
) -> Result<Var> {
    Ok(lfam_parts(tape, encoder, decoder, params, cfg)?.output)
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

    fn random_params(c: usize, cfg: &LfamConfig, rng: &mut Rng64) -> LfamParams<f64> {
        let mut p = LfamParams::init(c, cfg, rng);
        for conv in [&mut p.query, &mut p.key, &mut p.value] {
            conv.bias = random(conv.bias.shape(), rng);
        }
        p
    }

    #[test]
    fn global_window_matches_oracle() {
        let mut rng = seeded(11);
        let cfg = LfamConfig::default().with_local_range(8).with_residual(ResidualSource::None);
        let params = random_params(4, &cfg, &mut rng);
        let p = random([1, 4, 8, 8], &mut rng);
        let q = random([1, 4, 8, 8], &mut rng);
        let out = params.apply(&p, &q, &cfg).unwrap().output;
        let oracle = global_attention_oracle(&p, &q, &params).unwrap();
        assert!(out.max_abs_diff(&oracle).unwrap() < 1e-6);
    }

    #[test]
    fn zero_key_weights_give_window_means() {
        let mut rng = seeded(12);
        let cfg = LfamConfig::default().with_local_range(3);
        let mut params = random_params(2, &cfg, &mut rng);
        params.key.weight = Tensor::zeros(params.key.weight.shape());
        let p = random([1, 2, 5, 4], &mut rng);
        let q = random([1, 2, 5, 4], &mut rng);
        let res = params.apply(&p, &q, &cfg).unwrap();
        let fv = reference::project(&q, &params.value);
        let grid = window_partition(5, 4, 3).unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..4 {
                    let win = grid.window_of(y, x);
                    let pix: Vec<usize> = grid.slots(win).into_iter().flatten().collect();
                    let mean = pix.iter().map(|&i| fv.at(0, c, i / 4, i % 4)).sum::<f64>() / pix.len() as f64;
                    let got = res.output.at(0, c, y, x);
                    assert!((got - (mean + p.at(0, c, y, x))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encoder_residual_adds_exactly_p() {
        let mut rng = seeded(13);
        let cfg = LfamConfig::default().with_local_range(3);
        let params = random_params(3, &cfg, &mut rng);
        let p = random([2, 3, 6, 6], &mut rng);
        let q = random([2, 3, 6, 6], &mut rng);
        let with = params.apply(&p, &q, &cfg).unwrap().output;
        let without = params.apply(&p, &q, &cfg.clone().with_residual(ResidualSource::None)).unwrap().output;
        for ((a, b), pv) in with.data().iter().zip(without.data()).zip(p.data()) {
            assert_eq!(*a, *b + *pv);
        }
    }

    #[test]
    fn shape_and_config_errors() {
        let mut rng = seeded(14);
        let cfg = LfamConfig::default();
        let params = random_params(2, &cfg, &mut rng);
        let p = random([1, 2, 4, 4], &mut rng);
        let q = random([1, 2, 4, 6], &mut rng);
        assert!(matches!(params.apply(&p, &q, &cfg), Err(Error::Shape(_))));

        let mut bad = params.clone();
        bad.key = ConvParams::init(3, 2, 1, 1, 0, &mut rng);
        assert!(matches!(bad.apply(&p, &p, &cfg), Err(Error::Config(_))));

        let narrow = LfamConfig { proj_channels: Some(1), ..cfg.clone() };
        let np = LfamParams::<f64>::init(2, &narrow, &mut rng);
        assert!(matches!(np.apply(&p, &p, &narrow), Err(Error::Config(_))));
        let narrow_none = narrow.with_residual(ResidualSource::None);
        assert_eq!(np.apply(&p, &p, &narrow_none).unwrap().output.shape(), [1, 1, 4, 4]);

        assert!(LfamConfig::default().with_local_range(0).validate().is_err());
    }

    #[test]
    fn rows_are_stochastic_and_padded_keys_zero() {
        let mut rng = seeded(15);
        let cfg = LfamConfig::default().with_local_range(4);
        let params = random_params(3, &cfg, &mut rng);
        let p = random([2, 3, 7, 6], &mut rng);
        let q = random([2, 3, 7, 6], &mut rng);
        let w = params.apply(&p, &q, &cfg).unwrap().weights;
        let a = w.grid.window_area();
        for b in 0..2 {
            for win in 0..w.grid.len() {
                let slots = w.grid.slots(win);
                for (pi, ps) in slots.iter().enumerate() {
                    let row = w.row(b, win, pi);
                    if ps.is_none() {
                        assert!(row.iter().all(|&v| v == 0.0));
                        continue;
                    }
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    for (qi, qs) in slots.iter().enumerate() {
                        assert!((0.0..=1.0).contains(&row[qi]));
                        if qs.is_none() {
                            assert_eq!(row[qi], 0.0);
                        }
                    }
                }
                assert_eq!(w.block(b, win).len(), a * a);
            }
        }
    }

    #[test]
    fn scaled_keys_keep_row_argmax() {
        let mut rng = seeded(16);
        let cfg = LfamConfig::default().with_local_range(3);
        let params = random_params(2, &cfg, &mut rng);
        let p = random([1, 2, 6, 6], &mut rng);
        let q = random([1, 2, 6, 6], &mut rng);
        let mut scaled = params.clone();
        scaled.key.weight.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        scaled.key.bias.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let w1 = params.apply(&p, &q, &cfg).unwrap().weights;
        let w2 = scaled.apply(&p, &q, &cfg).unwrap().weights;
        let argmax = |r: &[f64]| r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best });
        for win in 0..w1.grid.len() {
            for pi in 0..9 {
                assert_eq!(argmax(w1.row(0, win, pi)), argmax(w2.row(0, win, pi)));
            }
        }
        assert_ne!(w1, w2);
    }

    #[test]
    fn swap_uses_decoder_queries() {
        let mut rng = seeded(17);
        let cfg = LfamConfig::default().with_local_range(4).with_residual(ResidualSource::None);
        let params = random_params(2, &cfg, &mut rng);
        let p = random([1, 2, 4, 4], &mut rng);
        let q = random([1, 2, 4, 4], &mut rng);
        let swapped = LfamConfig { swap_qkv: true, ..cfg.clone() };
        let a = params.apply(&p, &q, &swapped).unwrap().output;
        let b = params.apply(&q, &p, &cfg).unwrap().output;
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_reach_maps_and_projections() {
        let mut rng = seeded(18);
        for (m, residual, scale) in [
            (4, ResidualSource::Encoder, false),
            (3, ResidualSource::Decoder, true),
            (1, ResidualSource::None, false),
        ] {
            let cfg = LfamConfig { scale_logits: scale, ..LfamConfig::default().with_local_range(m).with_residual(residual) };
            let params = random_params(4, &cfg, &mut rng);
            let p = random([1, 4, 8, 8], &mut rng);
            let q = random([1, 4, 8, 8], &mut rng);
            let probe = random([1, 4, 8, 8], &mut rng);
            let inputs = vec![
                p,
                q,
                params.query.weight.clone(),
                params.query.bias.clone(),
                params.key.weight.clone(),
                params.key.bias.clone(),
                params.value.weight.clone(),
                params.value.bias.clone(),
            ];
            let report = grad_check_many(
                |tape, v| {
                    let bound = BoundLfam {
                        query: BoundConv { weight: v[2], bias: v[3], stride: 1, padding: 0 },
                        key: BoundConv { weight: v[4], bias: v[5], stride: 1, padding: 0 },
                        value: BoundConv { weight: v[6], bias: v[7], stride: 1, padding: 0 },
                    };
                    let y = lfam_forward(tape, v[0], v[1], &bound, &cfg)?;
                    let pr = tape.constant(probe.clone());
                    let z = tape.mul(y, pr)?;
                    let z = tape.mul(z, y)?;
                    tape.sum(z)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(report.max() < 1e-4, "m={m}: {report:?}");
        }
    }
}
