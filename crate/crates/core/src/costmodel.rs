//! Analytic FLOP accounting for global versus windowed attention.
//!
//! Conventions: one multiply-add is 2 flops; the softmax costs 5 flops per
//! logit (max scan, subtract, exp, sum, divide). Logits cost `2 d` per
//! (query, key) pair and aggregation `2 d` per (query, key) pair. Windowed
//! attention counts padded window slots, i.e. `N m^4` pairs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::unet::{count_cost, SkipMode, UNetConfig};

/// Ratio reported for the original 256x256 configuration with `m = 7`.
pub const REPORTED_NETWORK_RATIO: f64 = 0.0466;

pub const FLOPS_PER_MAC: u64 = 2;
pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlops {
    pub logits: u64,
    pub aggregate: u64,
    pub softmax: u64,
}

impl AttentionFlops {
    /// Cost of `pairs` (query, key) interactions at width `d`.
    fn for_pairs(pairs: u64, d: u64) -> Self {
        AttentionFlops {
            logits: FLOPS_PER_MAC * pairs * d,
            aggregate: FLOPS_PER_MAC * pairs * d,
            softmax: SOFTMAX_FLOPS_PER_ELEMENT * pairs,
        }
    }

    pub fn matmul(&self) -> u64 {
        self.logits + self.aggregate
    }

    pub fn total(&self) -> u64 {
        self.matmul() + self.softmax
    }
}

pub fn global_attention_cost(h: usize, w: usize, d: usize) -> AttentionFlops {
    let hw = (h * w) as u64;
    AttentionFlops::for_pairs(hw * hw, d as u64)
}

pub fn local_attention_cost(h: usize, w: usize, d: usize, m: usize) -> AttentionFlops {
    let m = m.max(1);
    let windows = (h.div_ceil(m) * w.div_ceil(m)) as u64;
    let m4 = (m as u64).pow(4);
    AttentionFlops::for_pairs(windows * m4, d as u64)
}

/// `2 (hw)^2 d + 2 (hw)^2 d + 5 (hw)^2`.
pub fn attention_flops_global(h: usize, w: usize, d: usize) -> u64 {
    global_attention_cost(h, w, d).total()
}

/// `N (2 m^4 d + 2 m^4 d + 5 m^4)` with `N = ceil(h/m) ceil(w/m)`.
pub fn attention_flops_local(h: usize, w: usize, d: usize, m: usize) -> u64 {
    local_attention_cost(h, w, d, m).total()
}

/// One attention site: an `h x w` map of width `channels` with range `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionLevel {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCost {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub m: usize,
    pub windows: usize,
    pub flops_global: u64,
    pub flops_local: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub levels: Vec<LevelCost>,
    pub total_global: u64,
    pub total_local: u64,
    /// `total_local / total_global`, attention only.
    pub ratio: f64,
    /// Non-attention network flops (convolutions and projections), when known.
    pub network_base: Option<u64>,
    /// Whole-network ratio `(base + local) / (base + global)`, when known.
    pub network_ratio: Option<f64>,
    pub reported_ratio: f64,
}

pub fn cost_report(levels: &[FusionLevel], network_base: Option<u64>) -> CostReport {
    let levels: Vec<LevelCost> = levels
        .iter()
        .map(|l| LevelCost {
            h: l.h,
            w: l.w,
            channels: l.channels,
            m: l.m,
            windows: l.h.div_ceil(l.m.max(1)) * l.w.div_ceil(l.m.max(1)),
            flops_global: attention_flops_global(l.h, l.w, l.channels),
            flops_local: attention_flops_local(l.h, l.w, l.channels, l.m),
        })
        .collect();
    let total_global: u64 = levels.iter().map(|l| l.flops_global).sum();
    let total_local: u64 = levels.iter().map(|l| l.flops_local).sum();
    let ratio = if total_global == 0 { 1.0 } else { total_local as f64 / total_global as f64 };
    let network_ratio = network_base.map(|b| (b + total_local) as f64 / (b + total_global) as f64);
    CostReport {
        levels,
        total_global,
        total_local,
        ratio,
        network_base,
        network_ratio,
        reported_ratio: REPORTED_NETWORK_RATIO,
    }
}

/// The four fusion sites of a 256x256 input: spatial 256/128/64/32 with
/// 64/256/512/1024 channels.
pub fn reference_levels(m: usize) -> Vec<FusionLevel> {
    [(256, 64), (128, 256), (64, 512), (32, 1024)]
        .into_iter()
        .map(|(s, c)| FusionLevel { h: s, w: s, channels: c, m })
        .collect()
}

/// Fusion sites of a network: one per Lfam level, finest first, at the
/// level's resolution and projection width.
pub fn network_levels(cfg: &UNetConfig, h: usize, w: usize) -> Vec<FusionLevel> {
    cfg.skips
        .iter()
        .enumerate()
        .filter_map(|(level, skip)| match skip {
            SkipMode::Lfam(l) => Some(FusionLevel {
                h: h >> level,
                w: w >> level,
                channels: l.projection_width(cfg.width(level)),
                m: l.local_range,
            }),
            _ => None,
        })
        .collect()
}

/// Report over the network's own fusion sites, with the non-attention
/// flops of the same network as the base.
pub fn network_cost_report(cfg: &UNetConfig, h: usize, w: usize) -> Result<CostReport> {
    let levels = network_levels(cfg, h, w);
    let attention: u64 = levels.iter().map(|l| attention_flops_local(l.h, l.w, l.channels, l.m)).sum();
    let base = count_cost(cfg, h, w)? - attention;
    Ok(cost_report(&levels, Some(base)))
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>8} {:>4} {:>8} {:>22} {:>18} {:>10}",
            "h", "w", "channels", "m", "windows", "global_flops", "local_flops", "ratio"
        );
        for l in &self.levels {
            let r = l.flops_local as f64 / l.flops_global.max(1) as f64;
            let _ = writeln!(
                s,
                "{:>6} {:>6} {:>8} {:>4} {:>8} {:>22} {:>18} {:>10.3e}",
                l.h, l.w, l.channels, l.m, l.windows, l.flops_global, l.flops_local, r
            );
        }
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>8} {:>4} {:>8} {:>22} {:>18} {:>10.3e}",
            "total", "", "", "", "", self.total_global, self.total_local, self.ratio
        );
        if let (Some(base), Some(r)) = (self.network_base, self.network_ratio) {
            let _ = writeln!(s, "network (incl. {base} non-attention flops) ratio: {r:.4}");
        }
        let _ = writeln!(s, "attention-only ratio: {:.4e}   reported ratio: {}", self.ratio, self.reported_ratio);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
