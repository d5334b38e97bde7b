use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub lr_base: f64,
    pub epoch: usize,
    pub max_epoch: usize,
    pub kind: ScheduleKind,
}

/// `lr_base * (cos(pi * epoch / max_epoch) + 1) / 2` for the cosine kind.
/// Epochs past `max_epoch` are clamped to it.
pub fn cosine_lr(s: &ScheduleState) -> f64 {
    match s.kind {
        ScheduleKind::Constant => s.lr_base,
        ScheduleKind::Cosine => {
            if s.max_epoch == 0 {
                return s.lr_base;
            }
            let t = s.epoch.min(s.max_epoch) as f64 / s.max_epoch as f64;
            s.lr_base * ((t * std::f64::consts::PI).cos() + 1.0) / 2.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lr(epoch: usize, max_epoch: usize) -> f64 {
        cosine_lr(&ScheduleState { lr_base: 0.01, epoch, max_epoch, kind: ScheduleKind::Cosine })
    }

    #[test]
    fn endpoints() {
        assert!((lr(0, 100) - 0.01).abs() < 1e-12);
        assert!((lr(50, 100) - 0.005).abs() < 1e-12);
        assert!(lr(100, 100).abs() < 1e-12);
        let c = ScheduleState { lr_base: 0.3, epoch: 7, max_epoch: 9, kind: ScheduleKind::Constant };
        assert_eq!(cosine_lr(&c), 0.3);
    }

    #[test]
    fn monotone_and_bounded() {
        let values: Vec<f64> = (0..=37).map(|e| lr(e, 37)).collect();
        assert!(values.windows(2).all(|w| w[1] <= w[0]));
        assert!(values.iter().all(|&v| (0.0..=0.01).contains(&v)));
    }
}
