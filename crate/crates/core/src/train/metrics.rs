use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-pixel argmax over the class axis of `(n, K, h, w)` logits; ties go to
/// the lowest class index. Output is `n * h * w` labels.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let (n, k, h, w) = logits.dims();
    let hw = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for s in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if data[(b * k + c) * hw + s] > data[(b * k + best) * hw + s] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Integer intersection and union counts per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouSummary {
    /// `None` for classes absent from both prediction and target.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes; 0 when no class is defined.
    pub mean: f64,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        IouAccumulator { intersection: vec![0; num_classes], union: vec![0; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.union.len()
    }

    pub fn update(&mut self, prediction: &[u8], target: &[u8]) -> Result<()> {
        if prediction.len() != target.len() {
            return Err(Error::shape(format!("{} predictions for {} targets", prediction.len(), target.len())));
        }
        let k = self.num_classes();
        for (&p, &t) in prediction.iter().zip(target) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Label(format!("label {} outside [0, {k})", p.max(t))));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    pub fn update_logits<T: Real>(&mut self, logits: &Tensor<T>, target: &[u8]) -> Result<()> {
        self.update(&argmax_classes(logits), target)
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }
}

pub fn mean_iou(acc: &IouAccumulator) -> IouSummary {
    let per_class: Vec<Option<f64>> = acc
        .intersection
        .iter()
        .zip(&acc.union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    IouSummary { per_class, mean }
}
