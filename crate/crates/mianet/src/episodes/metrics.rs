//! Segmentation metrics over episode streams.
//!
//! Per-class IoU sums intersections and unions across all episodes of the
//! class before dividing; mIoU averages the per-class values. A
//! per-episode-mean variant exists behind [`MiouMode`] since both conventions
//! circulate. FB-IoU pools foreground and background counts over every
//! episode regardless of class; a pair with empty foreground on both sides
//! adds nothing to the foreground accumulator.

use crate::error::{Error, Result};
use crate::tensor::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiouMode {
    /// Σ intersections / Σ unions per class, then mean over classes.
    Accumulate,
    /// Mean of per-episode IoUs per class, then mean over classes.
    PerEpisodeMean,
}

#[derive(Debug, Clone, Copy, Default)]
struct ClassCounts {
    inter: u64,
    union: u64,
    episodes: u64,
    episode_iou_sum: f64,
}

#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    mode: MiouMode,
    per_class: Vec<ClassCounts>,
    fg_inter: u64,
    fg_union: u64,
    bg_inter: u64,
    bg_union: u64,
}

impl MetricAccumulator {
    pub fn new(n_classes: usize, mode: MiouMode) -> Self {
        Self {
            mode,
            per_class: vec![ClassCounts::default(); n_classes],
            fg_inter: 0,
            fg_union: 0,
            bg_inter: 0,
            bg_union: 0,
        }
    }

    pub fn add(&mut self, class_id: usize, pred: &BinaryMask, truth: &BinaryMask) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        if class_id >= self.per_class.len() {
            return Err(Error::Config(format!(
                "class id {class_id} out of range (have {})",
                self.per_class.len()
            )));
        }
        let mut inter = 0u64;
        let mut union = 0u64;
        let mut bg_inter = 0u64;
        let mut bg_union = 0u64;
        for (p, t) in pred.data().iter().zip(truth.data()) {
            inter += u64::from(*p == 1 && *t == 1);
            union += u64::from(*p == 1 || *t == 1);
            bg_inter += u64::from(*p == 0 && *t == 0);
            bg_union += u64::from(*p == 0 || *t == 0);
        }
        let c = &mut self.per_class[class_id];
        c.inter += inter;
        c.union += union;
        c.episodes += 1;
        // both-empty episode counts as a perfect match in per-episode mode
        c.episode_iou_sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        self.fg_inter += inter;
        self.fg_union += union;
        self.bg_inter += bg_inter;
        self.bg_union += bg_union;
        Ok(())
    }

    /// IoU of one class, or `None` if it saw no episodes.
    pub fn class_iou(&self, class_id: usize) -> Option<f64> {
        let c = self.per_class.get(class_id)?;
        if c.episodes == 0 {
            return None;
        }
        Some(match self.mode {
            MiouMode::Accumulate => {
                if c.union == 0 {
                    1.0
                } else {
                    c.inter as f64 / c.union as f64
                }
            }
            MiouMode::PerEpisodeMean => c.episode_iou_sum / c.episodes as f64,
        })
    }

    /// Mean IoU over `classes`; classes without episodes are skipped and
    /// returned so callers can warn.
    pub fn miou_over(&self, classes: &[usize]) -> (f64, Vec<usize>) {
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut skipped = Vec::new();
        for &c in classes {
            match self.class_iou(c) {
                Some(iou) => {
                    sum += iou;
                    n += 1;
                }
                None => skipped.push(c),
            }
        }
        let miou = if n == 0 { 0.0 } else { sum / n as f64 };
        (miou, skipped)
    }

    /// Mean of foreground and background IoU; a side whose accumulated union
    /// is zero drops out of the mean.
    pub fn fb_iou(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        if self.fg_union > 0 {
            sum += self.fg_inter as f64 / self.fg_union as f64;
            n += 1;
        }
        if self.bg_union > 0 {
            sum += self.bg_inter as f64 / self.bg_union as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        debug_assert_eq!(self.per_class.len(), other.per_class.len());
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.inter += b.inter;
            a.union += b.union;
            a.episodes += b.episodes;
            a.episode_iou_sum += b.episode_iou_sum;
        }
        self.fg_inter += other.fg_inter;
        self.fg_union += other.fg_union;
        self.bg_inter += other.bg_inter;
        self.bg_union += other.bg_union;
    }
}
