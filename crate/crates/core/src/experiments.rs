//! Desk-scale experiment harness: the synthetic training run and the
//! skip-mode / local-range ablation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, LabeledImage};
use crate::error::Result;
use crate::lfam::{LfamConfig, ResidualSource};
use crate::train::{evaluate, train_loop, IouSummary, RunLog, TrainConfig};
use crate::unet::{build_unet, SkipMode, UNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSetup {
    pub n_images: usize,
    pub held_out: usize,
    pub size: usize,
    pub num_classes: usize,
    pub rare_class_frac: f64,
    pub base_channels: usize,
    pub depth: usize,
    pub local_range: usize,
    pub train: TrainConfig,
}

impl Default for DeskSetup {
    fn default() -> Self {
        DeskSetup {
            n_images: 64,
            held_out: 16,
            size: 32,
            num_classes: 4,
            rare_class_frac: 0.015,
            base_channels: 8,
            depth: 2,
            local_range: 4,
            train: TrainConfig { epochs: 150, batch_size: 8, lr_base: 1e-3, ..TrainConfig::default() },
        }
    }
}

impl DeskSetup {
    pub fn rare_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn lfam(&self) -> SkipMode {
        SkipMode::Lfam(LfamConfig::default().with_local_range(self.local_range))
    }

    pub fn unet(&self, skip: SkipMode) -> UNetConfig {
        UNetConfig::new(1, self.num_classes, self.base_channels, self.depth).with_skips(skip)
    }

    /// `(train, held_out)`; both come from one generator call, the last
    /// `held_out` images being reserved.
    pub fn dataset(&self, seed: u64) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
        let mut all = gen_synthetic(self.n_images, self.size, self.num_classes, self.rare_class_frac, seed)?;
        let test = all.split_off(self.n_images - self.held_out.min(self.n_images));
        Ok((all, test))
    }
}

#[derive(Clone, Debug)]
pub struct DeskResult {
    pub log: RunLog<f32>,
    /// Final model scored on the held-out images.
    pub held_out: IouSummary,
    pub seconds: f64,
}

/// Builds, trains and scores one model. The held-out images double as the
/// per-epoch validation set in the log; nothing is selected on them.
pub fn desk_run(setup: &DeskSetup, skip: SkipMode, seed: u64, out_dir: Option<&Path>) -> Result<DeskResult> {
    let start = Instant::now();
    let (train, test) = setup.dataset(seed)?;
    let mut model = build_unet::<f32>(&setup.unet(skip), seed)?;
    let cfg = TrainConfig { seed, ..setup.train.clone() };
    let log = train_loop(&mut model, &train, &test, &cfg, out_dir)?;
    let held_out = evaluate(&model, &test, cfg.batch_size)?;
    Ok(DeskResult { log, held_out, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub rare_iou: Vec<f64>,
    pub mean_iou: Vec<f64>,
}

fn mean_spread(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl AblationRow {
    pub fn rare(&self) -> (f64, f64) {
        mean_spread(&self.rare_iou)
    }

    pub fn mean(&self) -> (f64, f64) {
        mean_spread(&self.mean_iou)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Variants compared: concatenation, the three residual sources at the
/// setup's local range, and the encoder residual at each of `ranges`.
pub fn ablation_variants(setup: &DeskSetup, ranges: &[usize]) -> Vec<(String, SkipMode)> {
    let mut v = vec![("concat".to_string(), SkipMode::Concat)];
    for r in [ResidualSource::Encoder, ResidualSource::Decoder, ResidualSource::None] {
        let cfg = LfamConfig::default().with_local_range(setup.local_range).with_residual(r);
        v.push((format!("lfam m={} residual={}", setup.local_range, r.as_str()), SkipMode::Lfam(cfg)));
    }
    for &m in ranges {
        let cfg = LfamConfig::default().with_local_range(m);
        v.push((format!("lfam m={m} residual=encoder"), SkipMode::Lfam(cfg)));
    }
    v
}

pub fn run_ablation(setup: &DeskSetup, seeds: &[u64], ranges: &[usize]) -> Result<AblationReport> {
    let rare = setup.rare_class();
    let mut rows = Vec::new();
    for (label, skip) in ablation_variants(setup, ranges) {
        let mut row = AblationRow { label, seeds: seeds.to_vec(), rare_iou: Vec::new(), mean_iou: Vec::new() };
        for &seed in seeds {
            let r = desk_run(setup, skip.clone(), seed, None)?;
            row.rare_iou.push(r.held_out.per_class[rare].unwrap_or(0.0));
            row.mean_iou.push(r.held_out.mean);
        }
        rows.push(row);
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Whether the encoder residual has the highest mean rare-class IoU of
    /// the three residual sources at local range `m`.
    pub fn encoder_residual_best(&self, m: usize) -> Option<bool> {
        let get = |r: &str| self.row(&format!("lfam m={m} residual={r}")).map(|row| row.rare().0);
        let (e, d, n) = (get("encoder")?, get("decoder")?, get("none")?);
        Some(e >= d && e >= n)
    }

    /// Whether the encoder-residual module at `m` beats the concat baseline
    /// on mean rare-class IoU.
    pub fn lfam_beats_concat(&self, m: usize) -> Option<bool> {
        let lfam = self.row(&format!("lfam m={m} residual=encoder"))?.rare().0;
        Some(lfam > self.row("concat")?.rare().0)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>22} {:>22}", "variant", "rare IoU (mean ± sd)", "mean IoU (mean ± sd)");
        for r in &self.rows {
            let (rm, rs) = r.rare();
            let (mm, ms) = r.mean();
            let _ = writeln!(s, "{:<28} {:>13.4} ± {:<6.4} {:>13.4} ± {:<6.4}", r.label, rm, rs, mm, ms);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
