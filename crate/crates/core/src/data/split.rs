use rand::seq::SliceRandom;

use super::{LabeledImage, Mask};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Non-overlapping `tile x tile` crops in row-major order; remainder rows
/// and columns are dropped.
pub fn crop_tiles(img: &LabeledImage, tile: usize) -> Result<Vec<LabeledImage>> {
    let [_, c, h, w] = img.image.shape();
    if tile == 0 || tile > h || tile > w {
        return Err(Error::shape(format!("tile {tile} does not fit a {h}x{w} image")));
    }
    let mut out = Vec::with_capacity((h / tile) * (w / tile));
    for ty in 0..h / tile {
        for tx in 0..w / tile {
            let (y0, x0) = (ty * tile, tx * tile);
            let mut data = Vec::with_capacity(c * tile * tile);
            for ch in 0..c {
                for y in y0..y0 + tile {
                    let row = (ch * h + y) * w;
                    data.extend_from_slice(&img.image.data()[row + x0..row + x0 + tile]);
                }
            }
            let mut labels = Vec::with_capacity(tile * tile);
            for y in y0..y0 + tile {
                labels.extend_from_slice(&img.mask.data[y * w + x0..y * w + x0 + tile]);
            }
            out.push(LabeledImage {
                image: Tensor::from_vec([1, c, tile, tile], data)?,
                mask: Mask { h: tile, w: tile, data: labels },
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold id of every index.
    pub assignment: Vec<usize>,
    pub folds: Vec<Fold>,
}

/// Seeded k-fold plan. Fold `i` is the test set of split `i`; the remaining
/// indices are shuffled again per split and the first
/// `round(val_frac_of_train * remaining)` become validation.
pub fn kfold_split(n: usize, k: usize, val_frac_of_train: f64, seed: u64) -> Result<FoldPlan> {
    if k < 2 || n < k {
        return Err(Error::config(format!("kfold needs k >= 2 and n >= k, got n={n}, k={k}")));
    }
    if !(0.0..1.0).contains(&val_frac_of_train) {
        return Err(Error::config(format!("val fraction {val_frac_of_train} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, 0));
    let mut assignment = vec![0; n];
    let mut start = 0;
    let mut members = Vec::with_capacity(k);
    for fold in 0..k {
        let size = n / k + usize::from(fold < n % k);
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        for &i in &idx {
            assignment[i] = fold;
        }
        members.push(idx);
        start += size;
    }
    let folds = (0..k)
        .map(|fold| {
            let mut rest: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
            rest.shuffle(&mut stream(seed, 1 + fold as u64));
            let n_val = (val_frac_of_train * rest.len() as f64).round() as usize;
            let mut val = rest[..n_val].to_vec();
            let mut train = rest[n_val..].to_vec();
            val.sort_unstable();
            train.sort_unstable();
            Fold { train, val, test: members[fold].clone() }
        })
        .collect();
    Ok(FoldPlan { k, assignment, folds })
}

/// Inverse-frequency weights `total / (K * max(count_k, 1))`, rescaled to
/// mean 1.
pub fn compute_class_weights<'a>(masks: impl IntoIterator<Item = &'a Mask>, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for m in masks {
        for &l in &m.data {
            let slot = counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::Label(format!("label {l} outside [0, {num_classes})")))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::config("class weights need at least one labeled pixel"));
    }
    let raw: Vec<f64> =
        counts.iter().map(|&c| total as f64 / (num_classes as f64 * c.max(1) as f64)).collect();
    let mean = raw.iter().sum::<f64>() / num_classes as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}
