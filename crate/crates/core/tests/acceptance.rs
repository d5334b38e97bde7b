//! Acceptance checks 1-9. Runs without the libtest harness so the per-
//! criterion lines are always printed. Pass criterion numbers as arguments
//! to run a subset, e.g. `cargo test -p lfam-core --test acceptance -- 3 4`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use lfam_core::costmodel::{cost_report, global_attention_cost, local_attention_cost, reference_levels, REPORTED_NETWORK_RATIO};
use lfam_core::data::{crop_tiles, kfold_split, LabeledImage, Mask};
use lfam_core::experiments::{desk_run, run_ablation, DeskSetup};
use lfam_core::gradsuite::{run_grad_suite, NETWORK_TOLERANCE, OP_TOLERANCE, SUITE_EPS};
use lfam_core::lfam::{
    global_attention_oracle, naive_windowed_attention, set_workers, window_partition, LfamConfig, LfamParams, ResidualSource,
};
use lfam_core::rng::{seeded, Rng64};
use lfam_core::train::{argmax_classes, cosine_lr, focal_iou_loss, mean_iou, weighted_ce, FocalIouConfig, IouAccumulator, ScheduleKind, ScheduleState};
use lfam_core::{Real, Tape, Tensor};
use rand::Rng;

const GRAD_RUNTIME_LIMIT_S: f64 = 120.0;
const ORACLE_TOL: f64 = 1e-6;
const ROW_SUM_TOL: f64 = 1e-6;
const REFERENCE_RATIO_LIMIT: f64 = 0.05;
const SCHEDULE_TOL: f64 = 1e-12;
const FOCAL_CE_TOL: f64 = 1e-9;
const PERFECT_LOSS_LIMIT: f64 = 1e-6;
const DESK_MIN_HELD_OUT_MIOU: f64 = 0.80;
const DESK_LOSS_FACTOR: f64 = 0.5;
const DESK_RUNTIME_LIMIT_S: f64 = 15.0 * 60.0;
const DESK_MAX_EPOCHS: usize = 300;
/// Epochs per ablation run; the full grid is 21 runs.
const ABLATION_EPOCHS: usize = 40;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random<T: Real>(shape: [usize; 4], rng: &mut Rng64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap()
}

fn max_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).expect("same shape")
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let cases = run_grad_suite(0).expect("suite runs");
    let secs = start.elapsed().as_secs_f64();
    for c in &cases {
        println!("    {:<40} max rel err {:.3e}  tol {:.0e}  {}", c.name, c.max_error, c.tolerance, if c.passed() { "ok" } else { "FAIL" });
    }
    let has = |prefix: &str| cases.iter().any(|c| c.name.starts_with(prefix));
    let mut covered = ["masked_softmax", "conv2d", "upconv2x2", "focal_iou_loss", "weighted_ce", "unet"].iter().all(|p| has(p));
    for r in ["encoder", "decoder", "none"] {
        for m in [1, 3, 4] {
            covered &= has(&format!("lfam_forward m={m} residual={r}"));
        }
    }
    let op_ok = cases.iter().filter(|c| !c.name.starts_with("unet")).all(|c| c.tolerance == OP_TOLERANCE && c.passed());
    let net_ok = cases.iter().filter(|c| c.name.starts_with("unet")).all(|c| c.tolerance == NETWORK_TOLERANCE && c.passed());
    outcome(
        covered && op_ok && net_ok && secs < GRAD_RUNTIME_LIMIT_S && SUITE_EPS == 1e-5,
        format!("{} cases, eps {SUITE_EPS:e}, ops < {OP_TOLERANCE:e}, network < {NETWORK_TOLERANCE:e}, {secs:.1}s (limit {GRAD_RUNTIME_LIMIT_S}s)", cases.len()),
    )
}

fn c2_oracles() -> Outcome {
    let mut worst_global = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = seeded(seed);
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let m = h.max(w) + rng.random_range(0..3);
        let cfg = LfamConfig::default().with_local_range(m).with_residual(ResidualSource::None);
        let params = LfamParams::<f64>::init(c, &cfg, &mut rng);
        let (p, q) = (random::<f64>([n, c, h, w], &mut rng), random::<f64>([n, c, h, w], &mut rng));
        let fast = params.apply(&p, &q, &cfg).unwrap().output;
        let oracle = global_attention_oracle(&p, &q, &params).unwrap();
        worst_global = worst_global.max(max_abs_diff(&fast, &oracle));
    }
    // the largest admissible shape as well
    let mut rng = seeded(10);
    let cfg = LfamConfig::default().with_local_range(16).with_residual(ResidualSource::None);
    let params = LfamParams::<f64>::init(8, &cfg, &mut rng);
    let (p, q) = (random::<f64>([2, 8, 16, 16], &mut rng), random::<f64>([2, 8, 16, 16], &mut rng));
    worst_global = worst_global.max(max_abs_diff(&params.apply(&p, &q, &cfg).unwrap().output, &global_attention_oracle(&p, &q, &params).unwrap()));

    let mut worst_naive = 0.0f64;
    let mut shapes = vec![(1, 3, 10, 10, 3), (2, 4, 10, 10, 3), (1, 2, 7, 9, 4), (2, 5, 16, 16, 4), (1, 3, 12, 5, 5), (1, 2, 6, 6, 1)];
    let mut rng = seeded(11);
    for _ in 0..10 {
        shapes.push((rng.random_range(1..=2), rng.random_range(1..=6), rng.random_range(1..=14), rng.random_range(1..=14), rng.random_range(1..=6)));
    }
    for (i, &(n, c, h, w, m)) in shapes.iter().enumerate() {
        let residual = [ResidualSource::Encoder, ResidualSource::Decoder, ResidualSource::None][i % 3];
        let mut cfg = LfamConfig::default().with_local_range(m).with_residual(residual);
        cfg.scale_logits = i % 2 == 1;
        cfg.swap_qkv = i % 4 == 3;
        let params = LfamParams::<f64>::init(c, &cfg, &mut rng);
        let (p, q) = (random::<f64>([n, c, h, w], &mut rng), random::<f64>([n, c, h, w], &mut rng));
        let fast = params.apply(&p, &q, &cfg).unwrap().output;
        let naive = naive_windowed_attention(&p, &q, &params, &cfg).unwrap();
        worst_naive = worst_naive.max(max_abs_diff(&fast, &naive));
    }
    outcome(
        worst_global < ORACLE_TOL && worst_naive < ORACLE_TOL,
        format!(
            "global oracle max diff {worst_global:.2e} over 11 shapes, naive windows max diff {worst_naive:.2e} over {} shapes incl. 10x10 m=3 (tol {ORACLE_TOL:e})",
            shapes.len()
        ),
    )
}

fn c3_locality() -> Outcome {
    let mut rng = seeded(3);
    let (n, c, h, w, m) = (2, 4, 10, 10, 3);
    let cfg = LfamConfig::default().with_local_range(m);
    let params = LfamParams::<f64>::init(c, &cfg, &mut rng);
    let p = random::<f64>([n, c, h, w], &mut rng);
    let q = random::<f64>([n, c, h, w], &mut rng);
    let grid = window_partition(h, w, m).unwrap();
    let base = params.apply(&p, &q, &cfg).unwrap().aggregated;
    let y_at = |t: &Tensor<f64>, b: usize, y: usize, x: usize| -> Vec<u64> { (0..c).map(|ch| t.at(b, ch, y, x).to_bits()).collect() };
    let perturb = |b: usize, y: usize, x: usize, rng: &mut Rng64| {
        let mut q2 = q.clone();
        for ch in 0..c {
            let v = q2.at(b, ch, y, x) + rng.random_range(0.5..2.0);
            q2.set(b, ch, y, x, v);
        }
        params.apply(&p, &q2, &cfg).unwrap().aggregated
    };
    let (mut outside_changed, mut inside_changed) = (0, 0);
    for _ in 0..100 {
        let b = rng.random_range(0..n);
        let (py, px) = (rng.random_range(0..h), rng.random_range(0..w));
        let (qy, qx) = loop {
            let cand = (rng.random_range(0..h), rng.random_range(0..w));
            if grid.window_of(cand.0, cand.1) != grid.window_of(py, px) {
                break cand;
            }
        };
        if y_at(&perturb(b, qy, qx, &mut rng), b, py, px) != y_at(&base, b, py, px) {
            outside_changed += 1;
        }
        // non-vacuity: a pixel inside the window does move Y_p
        let (iy, ix) = ((py / m) * m, (px / m) * m);
        if y_at(&perturb(b, iy, ix, &mut rng), b, py, px) != y_at(&base, b, py, px) {
            inside_changed += 1;
        }
    }
    outcome(
        outside_changed == 0 && inside_changed == 100,
        format!("100 pairs on 10x10 m=3: {outside_changed} outside perturbations changed Y_p bits (need 0); {inside_changed}/100 inside perturbations did"),
    )
}

fn stochasticity<T: Real>(seed: u64) -> (f64, usize, usize) {
    let mut rng = seeded(seed);
    let (n, c, h, w, m) = (2, 8, 32, 32, 7);
    let cfg = LfamConfig::default().with_local_range(m);
    let params = LfamParams::<T>::init(c, &cfg, &mut rng);
    let out = params.apply(&random([n, c, h, w], &mut rng), &random([n, c, h, w], &mut rng), &cfg).unwrap();
    let grid = &out.weights.grid;
    let (mut worst, mut nonzero_pad, mut rows) = (0.0f64, 0, 0);
    for b in 0..n {
        for win in 0..grid.len() {
            let slots = grid.slots(win);
            for (s, slot) in slots.iter().enumerate() {
                let row = out.weights.row(b, win, s);
                let pad_cols = slots.iter().zip(row).filter(|(k, v)| k.is_none() && v.to_f64() != 0.0).count();
                nonzero_pad += pad_cols;
                if slot.is_some() {
                    rows += 1;
                    let sum: f64 = row.iter().map(|v| v.to_f64()).sum();
                    worst = worst.max((sum - 1.0).abs());
                } else {
                    nonzero_pad += row.iter().filter(|v| v.to_f64() != 0.0).count();
                }
            }
        }
    }
    (worst, nonzero_pad, rows)
}

fn c4_stochasticity() -> Outcome {
    let (w64, z64, rows) = stochasticity::<f64>(4);
    let (w32, z32, _) = stochasticity::<f32>(4);
    outcome(
        w64 < ROW_SUM_TOL && w32 < ROW_SUM_TOL && z64 == 0 && z32 == 0 && rows == 2 * 32 * 32,
        format!("32x32 m=7, {rows} real rows: max |sum-1| f64 {w64:.1e}, f32 {w32:.1e} (tol {ROW_SUM_TOL:e}); nonzero padded entries {}", z64 + z32),
    )
}

fn c5_cost() -> Outcome {
    let mut checked = 0;
    let mut exact = true;
    for m in 1..=8usize {
        for rows in 1..=6usize {
            for cols in 1..=6usize {
                let (h, w) = (rows * m, cols * m);
                for d in [1, 3, 16] {
                    let (l, g) = (local_attention_cost(h, w, d, m), global_attention_cost(h, w, d));
                    // ratio == m^2 / (hw) in integers
                    exact &= l.matmul() as u128 * (h * w) as u128 == g.matmul() as u128 * (m * m) as u128;
                    checked += 1;
                }
            }
        }
    }
    let r = cost_report(&reference_levels(7), None);
    println!("{}", r.to_table().lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n"));
    outcome(
        exact && r.ratio < REFERENCE_RATIO_LIMIT,
        format!(
            "{checked} divisible (h,w,d,m) exact; reference geometry attention-only ratio {:.4e} < {REFERENCE_RATIO_LIMIT} (reported network ratio {REPORTED_NETWORK_RATIO}, not compared)",
            r.ratio
        ),
    )
}

/// Mean cross-entropy by direct log-sum-exp over a `(n, k, h, w)` tensor.
fn oracle_ce(logits: &Tensor<f64>, target: &[u8]) -> f64 {
    let (n, k, h, w) = logits.dims();
    let mut total = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let z: Vec<f64> = (0..k).map(|c| logits.at(b, c, y, x)).collect();
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                total += lse - z[target[(b * h + y) * w + x] as usize];
            }
        }
    }
    total / (n * h * w) as f64
}

fn c6_schedule_losses() -> Outcome {
    let mut worst_lr = 0.0f64;
    for (lr_base, max_epoch) in [(1e-3, 100), (0.1, 300), (2.5, 2)] {
        let at = |epoch| cosine_lr(&ScheduleState { lr_base, epoch, max_epoch, kind: ScheduleKind::Cosine });
        for (got, want) in [(at(0), lr_base), (at(max_epoch / 2), lr_base / 2.0), (at(max_epoch), 0.0)] {
            worst_lr = worst_lr.max((got - want).abs());
        }
    }

    let mut rng = seeded(6);
    let logits = random::<f64>([2, 4, 5, 5], &mut rng);
    let target: Vec<u8> = (0..50).map(|_| rng.random_range(0..4)).collect();
    let plain = FocalIouConfig { gamma: 0.0, alpha: 1.0, focal_weight: 1.0, iou_weight: 0.0, iou_per_image: false };
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let focal0 = focal_iou_loss(&mut tape, l, &target, &plain).unwrap();
    let focal0 = tape.value(focal0).data()[0];
    let ce = weighted_ce(&mut tape, l, &target, &[1.0; 4]).unwrap();
    let ce = tape.value(ce).data()[0];
    let oracle = oracle_ce(&logits, &target);
    let focal_gap = (focal0 - ce).abs().max((focal0 - oracle).abs());

    let mut perfect = Tensor::<f64>::zeros([2, 4, 5, 5]);
    for b in 0..2 {
        for y in 0..5 {
            for x in 0..5 {
                perfect.set(b, target[(b * 5 + y) * 5 + x] as usize, y, x, 40.0);
            }
        }
    }
    let p = tape.constant(perfect.clone());
    let perfect_loss = focal_iou_loss(&mut tape, p, &target, &FocalIouConfig::default()).unwrap();
    let perfect_loss = tape.value(perfect_loss).data()[0];
    let mut acc = IouAccumulator::new(4);
    acc.update(&argmax_classes(&perfect), &target).unwrap();
    let miou = mean_iou(&acc).mean;
    outcome(
        worst_lr <= SCHEDULE_TOL && focal_gap <= FOCAL_CE_TOL && perfect_loss < PERFECT_LOSS_LIMIT && miou == 1.0,
        format!(
            "cosine endpoint err {worst_lr:.1e} (tol {SCHEDULE_TOL:e}); |focal(gamma=0) - CE| {focal_gap:.1e} (tol {FOCAL_CE_TOL:e}); perfect loss {perfect_loss:.1e} (< {PERFECT_LOSS_LIMIT:e}), mIoU {miou}"
        ),
    )
}

fn c7_desk_training() -> Outcome {
    set_workers(1);
    let setup = DeskSetup::default();
    let (train, test) = setup.dataset(0).unwrap();
    let (rare, pixels) = train.iter().chain(&test).fold((0usize, 0usize), |(r, t), s| {
        (r + s.mask.data.iter().filter(|&&c| c as usize == setup.rare_class()).count(), t + s.mask.data.len())
    });
    let share = rare as f64 / pixels as f64;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs.iter().map(|d| desk_run(&setup, setup.lfam(), 0, Some(d.path())).unwrap()).collect();
    let logs: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(d.path().join("log.csv")).unwrap()).collect();
    let identical = logs[0] == logs[1] && runs[0].log.csv(setup.num_classes) == runs[1].log.csv(setup.num_classes);
    let r = &runs[0];
    let s = &r.log.summary;
    let rare_iou = r.held_out.per_class[setup.rare_class()].unwrap_or(0.0);
    println!(
        "    setup: {} images ({} held out) {}x{}, {} classes, rare share {:.2}%, base {}, depth {}, m={}, Adam lr {}, batch {}, {} epochs",
        setup.n_images, setup.held_out, setup.size, setup.size, setup.num_classes, 100.0 * share, setup.base_channels,
        setup.depth, setup.local_range, setup.train.lr_base, setup.train.batch_size, setup.train.epochs
    );
    println!("    held-out per-class IoU: {:?}", r.held_out.per_class.iter().map(|v| v.map(|x| (x * 1e4).round() / 1e4)).collect::<Vec<_>>());
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    outcome(
        s.final_train_loss < DESK_LOSS_FACTOR * s.initial_train_loss
            && r.held_out.mean >= DESK_MIN_HELD_OUT_MIOU
            && slowest < DESK_RUNTIME_LIMIT_S
            && identical
            && setup.train.epochs <= DESK_MAX_EPOCHS
            && (0.005..0.03).contains(&share),
        format!(
            "loss {:.4} -> {:.4} (need < {DESK_LOSS_FACTOR} x initial); held-out mIoU {:.4} (need >= {DESK_MIN_HELD_OUT_MIOU}), rare IoU {rare_iou:.4}; {slowest:.0}s per run (limit {DESK_RUNTIME_LIMIT_S}s); logs identical: {identical}",
            s.initial_train_loss, s.final_train_loss, r.held_out.mean
        ),
    )
}

fn c8_ablation() -> Outcome {
    set_workers(1);
    let epochs = std::env::var("LFAM_ABLATION_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(ABLATION_EPOCHS);
    let mut setup = DeskSetup::default();
    setup.train.epochs = epochs;
    let start = Instant::now();
    let report = run_ablation(&setup, &[0, 1, 2], &[3, 5, 7]).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("    {epochs} epochs per run, 3 seeds, held-out rare-class IoU:");
    println!("{}", report.to_table().lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n"));
    let order = report.encoder_residual_best(setup.local_range);
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    let expected = ["concat", "lfam m=4 residual=encoder", "lfam m=4 residual=decoder", "lfam m=4 residual=none", "lfam m=3 residual=encoder", "lfam m=5 residual=encoder", "lfam m=7 residual=encoder"];
    let well_formed = labels == expected
        && report.rows.iter().all(|r| r.rare_iou.len() == 3 && r.rare_iou.iter().chain(&r.mean_iou).all(|v| (0.0..=1.0).contains(v)))
        && serde_json::from_str::<serde_json::Value>(&report.to_json()).is_ok()
        && order.is_some();
    let observed = match order {
        Some(true) => "observed",
        Some(false) => "not observed",
        None => "undetermined",
    };
    let vs_concat = match report.lfam_beats_concat(setup.local_range) {
        Some(true) => "observed",
        Some(false) => "not observed",
        None => "undetermined",
    };
    outcome(
        well_formed,
        format!(
            "report well-formed: {well_formed}; encoder residual best of the three sources at m={m}: {observed}; encoder-residual lfam above concat at m={m}: {vs_concat} (recorded, not gated); {secs:.0}s",
            m = setup.local_range
        ),
    )
}

fn c9_protocol() -> Outcome {
    let size = 1024;
    let data: Vec<f32> = (0..size * size).map(|i| (i % 997) as f32).collect();
    let img = LabeledImage::new(
        Tensor::from_vec([1, 1, size, size], data).unwrap(),
        Mask::new(size, size, (0..size * size).map(|i| (i % 3) as u8).collect()).unwrap(),
    )
    .unwrap();
    let tiles = crop_tiles(&img, 256).unwrap();
    let aligned = tiles.iter().enumerate().all(|(t, tile)| {
        let (oy, ox) = (256 * (t / 4), 256 * (t % 4));
        [(0, 0), (17, 201), (255, 255)]
            .iter()
            .all(|&(y, x)| tile.image.at(0, 0, y, x) == img.image.at(0, 0, oy + y, ox + x) && tile.mask.at(y, x) == img.mask.at(oy + y, ox + x))
    });
    let total: usize = (0..20).map(|_| crop_tiles(&img, 256).unwrap().len()).sum();

    let plan = kfold_split(total, 5, 0.25, 0).unwrap();
    let sizes: Vec<(usize, usize, usize)> = plan.folds.iter().map(|f| (f.train.len(), f.val.len(), f.test.len())).collect();
    let partitions = plan.folds.iter().all(|f| {
        let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
        all.sort_unstable();
        all == (0..total).collect::<Vec<_>>()
    });
    let small = kfold_split(100, 4, 0.25, 0).unwrap();
    let test_sizes: Vec<usize> = small.folds.iter().map(|f| f.test.len()).collect();
    outcome(
        tiles.len() == 16 && aligned && total == 320 && sizes.iter().all(|&s| s == (192, 64, 64)) && partitions && test_sizes == [25; 4],
        format!("1024^2 / 256 -> {} tiles, 20 images -> {total}; kfold(320,5) train/val/test {:?}; kfold(100,4) test {:?}", tiles.len(), sizes[0], test_sizes),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient suite", c1_gradients),
        (2, "oracle equivalence", c2_oracles),
        (3, "locality", c3_locality),
        (4, "attention-map stochasticity", c4_stochasticity),
        (5, "cost model", c5_cost),
        (6, "schedule and losses", c6_schedule_losses),
        (7, "desk-scale training", c7_desk_training),
        (8, "ablation report", c8_ablation),
        (9, "protocol plumbing", c9_protocol),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        println!("criterion {id} ({name}): running");
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} ({name}): {status} [{:.1}s] {}", start.elapsed().as_secs_f64(), result.detail);
        if !result.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
