use crate::error::{Error, Result};
use crate::mask::Mask;

/// Pixel confusion counts with change as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion_from_masks(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.n(), pred.h(), pred.w()) != (gt.n(), gt.h(), gt.w()) {
        return Err(Error::Dimension(format!(
            "prediction {}x{}x{} and ground truth {}x{}x{} differ",
            pred.n(),
            pred.h(),
            pred.w(),
            gt.n(),
            gt.h(),
            gt.w()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub iou: f64,
    pub f1: f64,
    pub oa: f64,
    pub counts: ConfusionCounts,
    /// Set when some ratio was 0/0 and therefore reported as 1.0.
    pub degenerate: bool,
}

impl MetricsReport {
    /// `key=value` pairs on one line.
    pub fn to_record(&self) -> String {
        let c = &self.counts;
        format!(
            "iou={} f1={} oa={} tp={} fp={} fn={} tn={} degenerate={}",
            self.iou, self.f1, self.oa, c.tp, c.fp, c.fn_, c.tn, self.degenerate
        )
    }
}

pub fn metrics_from_confusion(c: &ConfusionCounts) -> MetricsReport {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let oa = ratio(c.tp + c.tn, c.total());
    MetricsReport {
        iou,
        f1,
        oa,
        counts: *c,
        degenerate,
    }
}
