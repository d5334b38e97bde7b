//! Double-precision finite-difference checks of every differentiable op,
//! the attention module and a small end-to-end network.

use rand::Rng;

use crate::autodiff::{grad_check_many, Tape, Var};
use crate::error::Result;
use crate::lfam::{lfam_forward, BoundLfam, LfamConfig, ResidualSource};
use crate::nn::{conv2d, upconv2x2, BoundConv};
use crate::rng::{stream, Rng64};
use crate::tensor::Tensor;
use crate::train::{focal_iou_loss, weighted_ce, FocalIouConfig};
use crate::unet::{build_unet, forward_tape, AttentionImpl, SkipMode, UNetConfig};

pub const SUITE_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn random(shape: [usize; 4], scale: f64, rng: &mut Rng64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-scale..scale)).collect()).expect("length matches")
}

/// `sum(out * probe)` for a fixed random probe, so every output element
/// carries a distinct weight.
fn probe_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let probe = random(tape.value(out).shape(), 1.0, &mut stream(seed, 99));
    let p = tape.constant(probe);
    let prod = tape.mul(out, p)?;
    tape.sum(prod)
}

fn case(name: impl Into<String>, tolerance: f64, max_error: f64) -> GradCase {
    GradCase { name: name.into(), max_error, tolerance }
}

pub fn run_grad_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = stream(seed, 0);
    let mut cases = Vec::new();

    let logits = random([1, 1, 5, 6], 2.0, &mut rng);
    let mask: Vec<bool> = (0..6).map(|i| i == 2 || i == 5).collect();
    let e = grad_check_many(
        |t, v| {
            let s = t.masked_softmax(v[0], &mask)?;
            probe_sum(t, s, seed)
        },
        &[logits],
        SUITE_EPS,
    )?;
    cases.push(case("masked_softmax", OP_TOLERANCE, e.max()));

    for (k, stride, pad, size) in [(3, 1, 1, 6), (3, 2, 1, 7), (1, 1, 0, 5)] {
        let xs = [random([2, 3, size, size], 1.0, &mut rng), random([4, 3, k, k], 1.0, &mut rng), random([4, 1, 1, 1], 1.0, &mut rng)];
        let e = grad_check_many(
            |t, v| {
                let y = conv2d(t, v[0], v[1], v[2], stride, pad)?;
                probe_sum(t, y, seed)
            },
            &xs,
            SUITE_EPS,
        )?;
        cases.push(case(format!("conv2d k={k} stride={stride} pad={pad}"), OP_TOLERANCE, e.max()));
    }

    let xs = [random([2, 3, 3, 4], 1.0, &mut rng), random([3, 2, 2, 2], 1.0, &mut rng), random([2, 1, 1, 1], 1.0, &mut rng)];
    let e = grad_check_many(
        |t, v| {
            let y = upconv2x2(t, v[0], v[1], v[2])?;
            probe_sum(t, y, seed)
        },
        &xs,
        SUITE_EPS,
    )?;
    cases.push(case("upconv2x2", OP_TOLERANCE, e.max()));

    let logits = random([1, 3, 4, 4], 2.0, &mut rng);
    let target: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
    let e = grad_check_many(|t, v| focal_iou_loss(t, v[0], &target, &FocalIouConfig::default()), std::slice::from_ref(&logits), SUITE_EPS)?;
    cases.push(case("focal_iou_loss", OP_TOLERANCE, e.max()));
    let weights = [0.4, 1.0, 2.2];
    let e = grad_check_many(|t, v| weighted_ce(t, v[0], &target, &weights), &[logits], SUITE_EPS)?;
    cases.push(case("weighted_ce", OP_TOLERANCE, e.max()));

    for residual in [ResidualSource::Encoder, ResidualSource::Decoder, ResidualSource::None] {
        for m in [1, 3, 4] {
            let c = 3;
            let cfg = LfamConfig::default().with_local_range(m).with_residual(residual);
            let mut xs = vec![random([1, c, 7, 8], 1.0, &mut rng), random([1, c, 7, 8], 1.0, &mut rng)];
            for _ in 0..3 {
                xs.push(random([c, c, 1, 1], 1.0, &mut rng));
                xs.push(random([c, 1, 1, 1], 0.5, &mut rng));
            }
            let e = grad_check_many(
                |t, v| {
                    let conv = |w: Var, b: Var| BoundConv { weight: w, bias: b, stride: 1, padding: 0 };
                    let bound = BoundLfam { query: conv(v[2], v[3]), key: conv(v[4], v[5]), value: conv(v[6], v[7]) };
                    let y = lfam_forward(t, v[0], v[1], &bound, &cfg)?;
                    probe_sum(t, y, seed)
                },
                &xs,
                SUITE_EPS,
            )?;
            cases.push(case(format!("lfam_forward m={m} residual={}", residual.as_str()), OP_TOLERANCE, e.max()));
        }
    }

    let cfg = UNetConfig::new(1, 2, 2, 2).with_skips(SkipMode::Lfam(LfamConfig::default().with_local_range(4)));
    let mut model = build_unet::<f64>(&cfg, seed)?;
    for p in model.params_mut() {
        if p.shape()[1..] == [1, 1, 1] {
            *p = random(p.shape(), 0.1, &mut rng);
        }
    }
    let mut xs = vec![random([1, 1, 8, 8], 1.0, &mut rng)];
    xs.extend(model.params().iter().cloned());
    let e = grad_check_many(
        |t, v| {
            let y = forward_tape(&model, t, &v[1..], v[0], AttentionImpl::Windowed)?;
            probe_sum(t, y, seed)
        },
        &xs,
        SUITE_EPS,
    )?;
    cases.push(case("unet depth=2 base=2 lfam m=4", NETWORK_TOLERANCE, e.max()));
    Ok(cases)
}
