//! Synthetic segmentation scenes. Class 0 is background; classes
//! `1..K-1` are large rectangles, discs or ring outlines; class `K-1` is the
//! rare class, drawn last as small discs. Shapes never touch: each keeps a
//! background margin from everything drawn before it. Each class has its
//! own mean intensity, perturbed by seeded Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledImage, Mask};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng64};
use crate::tensor::Tensor;
use crate::workers::parallel_map;

const NOISE_STD: f64 = 0.04;
const MAX_RETRIES: usize = 200;
const MAX_LAYOUTS: usize = 20;
/// Background gap kept around every shape.
const MARGIN: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Blob {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Disc { cy: f64, cx: f64, r: f64 },
    Ring { cy: f64, cx: f64, r_in: f64, r_out: f64 },
}

impl Blob {
    /// The shape's footprint enlarged by `m` pixels (rings become discs).
    pub fn grown(&self, m: f64) -> Blob {
        match *self {
            Blob::Rect { y0, x0, h, w } => {
                let m = m.ceil() as usize;
                let (ny, nx) = (y0.saturating_sub(m), x0.saturating_sub(m));
                Blob::Rect { y0: ny, x0: nx, h: h + m + (y0 - ny), w: w + m + (x0 - nx) }
            }
            Blob::Disc { cy, cx, r } => Blob::Disc { cy, cx, r: r + m },
            Blob::Ring { cy, cx, r_out, .. } => Blob::Disc { cy, cx, r: r_out + m },
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Blob::Rect { y0, x0, h, w } => (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x),
            Blob::Disc { cy, cx, r } => dist(cy, cx, y, x) <= r,
            Blob::Ring { cy, cx, r_in, r_out } => {
                let d = dist(cy, cx, y, x);
                d >= r_in && d <= r_out
            }
        }
    }
}

fn dist(cy: f64, cx: f64, y: usize, x: usize) -> f64 {
    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
    (dy * dy + dx * dx).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub sample: LabeledImage,
    /// Every drawn shape with its class, in painting order.
    pub shapes: Vec<(u8, Blob)>,
}

pub fn gen_synthetic(
    n_images: usize,
    size: usize,
    num_classes: usize,
    rare_class_frac: f64,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    Ok(gen_synthetic_with_shapes(n_images, size, num_classes, rare_class_frac, seed)?
        .into_iter()
        .map(|s| s.sample)
        .collect())
}

/// Like [`gen_synthetic`] but also returns the shapes behind each mask.
/// Image `i` depends only on `(seed, i)`.
pub fn gen_synthetic_with_shapes(
    n_images: usize,
    size: usize,
    num_classes: usize,
    rare_class_frac: f64,
    seed: u64,
) -> Result<Vec<SyntheticImage>> {
    if !(2..=256).contains(&num_classes) {
        return Err(Error::config(format!("num_classes must be in [2, 256], got {num_classes}")));
    }
    if !(rare_class_frac > 0.0 && rare_class_frac < 0.1) {
        return Err(Error::config(format!("rare_class_frac must be in (0, 0.1), got {rare_class_frac}")));
    }
    if size == 0 {
        return Err(Error::config("image size must be >= 1"));
    }
    parallel_map(n_images, |i| one_image(size, num_classes, rare_class_frac, &mut stream(seed, i as u64)))
        .into_iter()
        .collect()
}

fn place_common(kind: usize, size: usize, rng: &mut Rng64) -> Result<Blob> {
    let s = size as f64;
    let blob = match kind % 3 {
        0 => {
            let lo = (size / 6).max(2);
            let hi = (size / 3).max(lo + 1);
            let (h, w) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            if h > size || w > size {
                return Err(Error::Generation(format!("no room for a {h}x{w} rectangle in {size}x{size}")));
            }
            Blob::Rect { y0: rng.random_range(0..=size - h), x0: rng.random_range(0..=size - w), h, w }
        }
        1 => {
            let r = rng.random_range(s / 10.0..s / 6.0).max(1.5);
            let (cy, cx) = center(r, s, rng)?;
            Blob::Disc { cy, cx, r }
        }
        _ => {
            let r_out = rng.random_range(s / 8.0..s / 5.0).max(3.0);
            let (cy, cx) = center(r_out, s, rng)?;
            Blob::Ring { cy, cx, r_in: r_out - (r_out / 3.0).max(1.5), r_out }
        }
    };
    Ok(blob)
}

fn center(r: f64, s: f64, rng: &mut Rng64) -> Result<(f64, f64)> {
    if 2.0 * r >= s {
        return Err(Error::Generation(format!("no room for radius {r:.1} in a {s}-pixel image")));
    }
    Ok((rng.random_range(r..s - r), rng.random_range(r..s - r)))
}

/// Retries whole layouts that paint themselves into a corner.
fn one_image(size: usize, k: usize, rare_frac: f64, rng: &mut Rng64) -> Result<SyntheticImage> {
    let mut last = None;
    for _ in 0..MAX_LAYOUTS {
        match try_layout(size, k, rare_frac, rng) {
            Err(e @ Error::Generation(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one layout attempt"))
}

fn try_layout(size: usize, k: usize, rare_frac: f64, rng: &mut Rng64) -> Result<SyntheticImage> {
    let rare = (k - 1) as u8;
    let mut mask = vec![0u8; size * size];
    let mut shapes = Vec::new();
    let paint = |mask: &mut [u8], class: u8, blob: &Blob| {
        for y in 0..size {
            for x in 0..size {
                if blob.contains(y, x) {
                    mask[y * size + x] = class;
                }
            }
        }
    };
    let clashes = |mask: &[u8], blob: &Blob| {
        let g = blob.grown(MARGIN);
        (0..size * size).any(|i| mask[i] != 0 && g.contains(i / size, i % size))
    };
    let mut failures = 0usize;
    let give_up = |failures: &mut usize, what: &str| {
        *failures += 1;
        if *failures > MAX_RETRIES {
            Err(Error::Generation(format!(
                "could not place {what} after {MAX_RETRIES} retries in a {size}x{size} image"
            )))
        } else {
            Ok(())
        }
    };
    for class in 1..rare {
        let mut placed = 0;
        let wanted = rng.random_range(1..=2);
        while placed < wanted {
            let blob = place_common(class as usize - 1, size, rng)?;
            if clashes(&mask, &blob) {
                give_up(&mut failures, "shapes")?;
                continue;
            }
            paint(&mut mask, class, &blob);
            shapes.push((class, blob));
            placed += 1;
            failures = 0;
        }
    }

    let target = rare_frac * (size * size) as f64;
    let mut rare_count = 0usize;
    loop {
        let r = rng.random_range(1.0..2.2);
        let area = std::f64::consts::PI * r * r;
        if rare_count > 0 && rare_count as f64 + area / 2.0 > target {
            break;
        }
        let (cy, cx) = center(r, size as f64, rng)?;
        let blob = Blob::Disc { cy, cx, r };
        let pixels: Vec<usize> =
            (0..size * size).filter(|&i| blob.contains(i / size, i % size)).collect();
        if pixels.is_empty() || clashes(&mask, &blob) {
            give_up(&mut failures, "rare blobs")?;
            continue;
        }
        for &i in &pixels {
            mask[i] = rare;
        }
        rare_count += pixels.len();
        shapes.push((rare, blob));
        failures = 0;
    }

    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    let data = mask
        .iter()
        .map(|&c| {
            let mean = 0.1 + 0.8 * c as f64 / (k - 1) as f64;
            (mean + noise.sample(rng)).clamp(0.0, 1.0) as f32
        })
        .collect();
    let sample = LabeledImage::new(Tensor::from_vec([1, 1, size, size], data)?, Mask::new(size, size, mask)?)?;
    Ok(SyntheticImage { sample, shapes })
}
