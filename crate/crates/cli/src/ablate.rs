use std::time::Instant;

use eocd::config::RunConfigFile;
use eocd::data::BitemporalSample;
use eocd::eval::{count_flops, evaluate};
use eocd::losses::{DistillLoss, GtLoss, LossConfig};
use eocd::network::{FusionMode, Model, ModelConfig};
use eocd::train::{fit, Teacher, TeacherKind, TrainConfig};
use eocd::Error;

use crate::output::Output;
use crate::{load_config, open_split, AblateArgs, CmdResult};

/// One trained configuration of an ablation table.
pub struct Row {
    pub name: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Whether the row trains against the teacher at all.
    pub distill: bool,
}

fn loss(alpha2: f64, gt_loss: GtLoss, distill_loss: DistillLoss) -> LossConfig {
    LossConfig {
        alpha2,
        gt_loss,
        distill_loss,
        ..LossConfig::default()
    }
}

/// The rows of `preset`, all sharing the seed and schedule of `base`.
pub fn preset_rows(preset: &str, base: &RunConfigFile) -> eocd::Result<Vec<Row>> {
    let m = base.model.clone();
    let alpha2 = base.loss.alpha2;
    let row = |name: &str, model: ModelConfig, loss: LossConfig| Row {
        name: name.to_string(),
        distill: loss.distill_loss != DistillLoss::None,
        model,
        loss,
    };
    Ok(match preset {
        "components" => vec![
            row("naive_fusion", m.clone().with_fusion(FusionMode::Naive), loss(0.0, GtLoss::Ce, DistillLoss::None)),
            row("emff", m.clone().with_fusion(FusionMode::Emff), loss(0.0, GtLoss::Ce, DistillLoss::None)),
            row("emff+bce", m.clone().with_fusion(FusionMode::Emff), loss(alpha2, GtLoss::Ce, DistillLoss::None)),
            row("emff+bce+mae", m.with_fusion(FusionMode::Emff), loss(alpha2, GtLoss::Ce, DistillLoss::Mae)),
        ],
        "losses" => [
            ("ce+kl", GtLoss::Ce, DistillLoss::Kl),
            ("ce+mse", GtLoss::Ce, DistillLoss::Mse),
            ("miou+mae", GtLoss::SoftMiou, DistillLoss::Mae),
            ("ce+mae", GtLoss::Ce, DistillLoss::Mae),
        ]
        .into_iter()
        .map(|(name, g, d)| row(name, m.clone(), loss(alpha2, g, d)))
        .collect(),
        "backbones" => ["micro", "tiny", "small", "wide"]
            .into_iter()
            .map(|name| {
                let model = ModelConfig {
                    input_size: m.input_size,
                    fusion_mode: m.fusion_mode,
                    ..ModelConfig::preset(name)?
                };
                Ok(row(name, model, base.loss))
            })
            .collect::<eocd::Result<_>>()?,
        other => {
            return Err(Error::Usage(format!(
                "unknown ablation preset `{other}` (components, losses, backbones)"
            )))
        }
    })
}

pub struct RowResult {
    pub name: String,
    pub iou: f64,
    pub f1: f64,
    pub oa: f64,
    pub params: usize,
    pub flops: u64,
    pub seconds: f64,
}

pub fn run_row(
    row: &Row,
    base: &TrainConfig,
    teacher: &Teacher,
    data: [&[BitemporalSample]; 3],
    on_epoch: &mut dyn FnMut(&str),
) -> eocd::Result<RowResult> {
    let start = Instant::now();
    let cfg = TrainConfig {
        loss: row.loss,
        ..base.clone()
    };
    let none = Teacher::None;
    let teacher = if row.distill { teacher } else { &none };
    let student = Model::new(row.model.clone(), cfg.seed)?;
    let params = student.param_count();
    let [h, w] = row.model.input_size;
    let flops = count_flops(&row.model, (h, w))?.total;
    let outcome = fit(student, teacher, data[0], data[1], &cfg, &mut |r| {
        on_epoch(&format!("row={} {}", row.name, r.to_line()))
    })?;
    let m = evaluate(&outcome.best, data[2], cfg.batch_size)?;
    Ok(RowResult {
        name: row.name.clone(),
        iou: m.iou,
        f1: m.f1,
        oa: m.oa,
        params,
        flops,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn cmd_ablate(a: AblateArgs, out: &mut Output) -> CmdResult {
    let mut run = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    match &a.teacher {
        Some(p) => {
            run.train.teacher = TeacherKind::Checkpoint;
            run.train.teacher_checkpoint = p.display().to_string();
        }
        None => run.train.teacher = TeacherKind::Oracle,
    }
    let extra = [("data", a.data.display().to_string()), ("preset", a.preset.clone())];
    let rows = preset_rows(&a.preset, &run)?;
    out.config("ablate", &extra, "", &run)?;
    run.validate()?;
    let base = run.train_config();
    let teacher = Teacher::from_config(&base)?;
    let train = open_split(&a.data, "train")?.load_all()?;
    let val = open_split(&a.data, "val")?.load_all()?;
    let test = open_split(&a.data, "test")?.load_all()?;
    let mut results = Vec::new();
    for row in &rows {
        let r = run_row(row, &base, &teacher, [&train, &val, &test], &mut |l| out.line(l))?;
        out.line(&format!(
            "row={} iou={} f1={} oa={} params={} flops={} seconds={:.1}",
            r.name, r.iou, r.f1, r.oa, r.params, r.flops, r.seconds
        ));
        results.push(r);
    }
    let [h, w] = run.model.input_size;
    out.line(&format!(
        "\n{:<14} {:>8} {:>8} {:>8} {:>10} {:>14}   (test split, FLOPs at {h}x{w})",
        "row", "iou", "f1", "oa", "params", "flops"
    ));
    for r in &results {
        out.line(&format!(
            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>10} {:>14}",
            r.name, r.iou, r.f1, r.oa, r.params, r.flops
        ));
    }
    Ok(())
}
