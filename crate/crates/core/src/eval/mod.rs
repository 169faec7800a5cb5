//! Change-class metrics and model complexity profiling.

mod complexity;
mod metrics;

pub use complexity::{
    complexity_report, conv_flops, count_flops, count_params, measure_latency, median, ComplexityReport,
    Environment, FlopReport, LatencyReport, ParamReport, INTERP_FLOPS_PER_OUTPUT,
};
pub use metrics::{confusion_from_masks, metrics_from_confusion, ConfusionCounts, MetricsReport};

use crate::data::BitemporalSample;
use crate::error::Result;
use crate::mask::Mask;
use crate::network::Model;
use crate::tensor::Tensor;

/// Predicted masks for `samples`, run `batch_size` at a time.
pub fn predict_samples(model: &Model, samples: &[BitemporalSample], batch_size: usize) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let pre: Vec<_> = chunk.iter().map(|s| s.pre.clone()).collect();
        let post: Vec<_> = chunk.iter().map(|s| s.post.clone()).collect();
        let (_, mask) = model.predict(&Tensor::stack(&pre)?, &Tensor::stack(&post)?)?;
        out.extend((0..chunk.len()).map(|i| mask.sample(i)));
    }
    Ok(out)
}

/// Accumulated metrics of `model` over `samples`.
pub fn evaluate(model: &Model, samples: &[BitemporalSample], batch_size: usize) -> Result<MetricsReport> {
    let preds = predict_samples(model, samples, batch_size)?;
    let mut counts = ConfusionCounts::default();
    for (p, s) in preds.iter().zip(samples) {
        counts.merge(&confusion_from_masks(p, &s.mask)?);
    }
    Ok(metrics_from_confusion(&counts))
}
