//! Prompt-mode comparison: trains one model per prompt mode under the same
//! configuration and seed and tabulates the resulting metrics.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::backbone::PromptMode;
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::metrics::MetricReport;
use crate::model::{Model, ParameterCounts};
use crate::train::{evaluate_split, DataSource, EpochLog, Trainer};
use crate::Error;

pub const MODES: [PromptMode; 3] = [PromptMode::None, PromptMode::Shallow, PromptMode::Deep];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: PromptMode,
    pub parameters: ParameterCounts,
    pub final_loss: f64,
    pub report: MetricReport,
}

/// Trains each prompt mode for `cfg.epochs` on the training split and
/// evaluates on `split`. Everything except the prompt mode is shared.
pub fn prompt_ablation(
    cfg: &RunConfig,
    ds: &Dataset,
    split: Split,
    mut progress: impl Write,
) -> Result<Vec<AblationRow>, Error> {
    let data = DataSource::new(ds, cfg.paths.features.as_deref());
    if data.features.is_some() {
        return Err(Error::Config(
            "prompt modes change the backbone output, so precomputed features cannot be used".into(),
        ));
    }
    let train = ds.split_indices(Split::Train);
    let mut rows = Vec::new();
    for mode in MODES {
        let mut c = cfg.clone();
        c.model.backbone.prompt_mode = mode;
        let mut trainer = Trainer::new(c)?;
        let mut last: Option<EpochLog> = None;
        for _ in 0..trainer.cfg.epochs {
            let log = trainer.train_epoch(&data, &train)?;
            let _ = writeln!(progress, "{mode}: epoch {} total {:.6}", log.epoch, log.total);
            last = Some(log);
        }
        let eval = evaluate_split(&trainer.model, &trainer.store, &data, split, &cfg.thresholds)?;
        rows.push(AblationRow {
            mode,
            parameters: Model::parameter_breakdown(&trainer.store),
            final_loss: last.map_or(f64::NAN, |l| l.total),
            report: eval.report,
        });
    }
    Ok(rows)
}

/// Markdown table, one row per prompt mode.
pub fn render_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| prompts | trainable | final loss |");
    let thresholds: Vec<f64> = rows
        .first()
        .map(|r| r.report.group_map.iter().map(|(t, _)| *t).collect())
        .unwrap_or_default();
    for t in &thresholds {
        let _ = write!(s, " mAP@{t} |");
    }
    s.push_str(" outlier mIoU | membership | individual | social |\n|---|---|---|");
    s.push_str(&"---|".repeat(thresholds.len() + 4));
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} | {} | {:.4} |", r.mode, r.parameters.trainable, r.final_loss);
        for (_, m) in &r.report.group_map {
            let _ = write!(s, " {:.4} |", m.map);
        }
        let _ = writeln!(
            s,
            " {:.4} | {:.4} | {:.4} | {:.4} |",
            r.report.outlier_miou, r.report.membership_accuracy, r.report.individual_accuracy, r.report.social_accuracy
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn three_rows_deterministically() {
        let mut cfg = RunConfig::default();
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg.data = SyntheticConfig {
            clips: 6,
            frame_count: 5,
            ..Default::default()
        };
        cfg.model.backbone = BackboneConfig {
            layers: 2,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg.data).unwrap();
        let a = prompt_ablation(&cfg, &ds, Split::All, std::io::sink()).unwrap();
        let b = prompt_ablation(&cfg, &ds, Split::All, std::io::sink()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|r| r.mode).collect::<Vec<_>>(), MODES.to_vec());
        assert_eq!(a[0].parameters.prompts, 0);
        assert!(a[2].parameters.prompts > a[1].parameters.prompts);
        let table = render_table(&a);
        assert_eq!(table.lines().count(), 5);
    }
}
