//! Group-detection evaluation: Group IoU, Group mAP, Outlier mIoU,
//! individual, social and membership accuracy.
//!
//! Ratios with an empty denominator are vacuous: they score 1 when nothing
//! was predicted either and 0 otherwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::hungarian;
use crate::data::ClipTargets;
use crate::heads::GroupPrediction;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("IoU threshold {0} is outside (0, 1]")]
    Threshold(f64),
    #[error("clip {clip}: {message}")]
    Inconsistent { clip: String, message: String },
}

/// Predictions and ground truth for one clip, over a shared actor index space.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub clip_id: String,
    pub predictions: Vec<GroupPrediction>,
    /// Predicted action per actor.
    pub actions: Vec<usize>,
    pub gt: ClipTargets,
}

impl EvalRecord {
    /// Actors that belong to no predicted group.
    pub fn predicted_outliers(&self) -> Vec<usize> {
        let mut covered = vec![false; self.gt.actor_count()];
        for p in &self.predictions {
            for &m in &p.members {
                covered[m] = true;
            }
        }
        (0..covered.len()).filter(|&i| !covered[i]).collect()
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let err = |message: String| MetricError::Inconsistent {
            clip: self.clip_id.clone(),
            message,
        };
        let m = self.gt.actor_count();
        if self.actions.len() != m {
            return Err(err(format!("{} predicted actions for {m} actors", self.actions.len())));
        }
        let mut seen = vec![false; m];
        for p in &self.predictions {
            for &a in &p.members {
                if a >= m {
                    return Err(err(format!("predicted member {a} out of range")));
                }
                if seen[a] {
                    return Err(err(format!("actor {a} is in two predicted groups")));
                }
                seen[a] = true;
            }
        }
        Ok(())
    }
}

/// Jaccard index of two member sets (any order, no duplicates); both empty → 1.
pub fn group_iou(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Area under the precision envelope given per-rank TP flags.
fn average_precision(tp: &[bool], positives: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / positives as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// AP per activity class; `None` for classes with no ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Dataset-wide rank order of predictions of one class: confidence
/// descending, then clip id, then member list.
pub fn ranked_predictions(records: &[EvalRecord], class: usize) -> Vec<(usize, &GroupPrediction)> {
    let mut preds: Vec<(usize, &GroupPrediction)> = records
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| rec.predictions.iter().filter(|p| p.activity == class).map(move |p| (r, p)))
        .collect();
    preds.sort_by(|(ra, a), (rb, b)| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| records[*ra].clip_id.cmp(&records[*rb].clip_id))
            .then_with(|| a.members.cmp(&b.members))
    });
    preds
}

pub fn group_map_report(records: &[EvalRecord], threshold: f64, num_classes: usize) -> Result<MapReport, MetricError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MetricError::Threshold(threshold));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let positives: usize = records
            .iter()
            .map(|r| r.gt.groups.iter().filter(|g| g.activity == c).count())
            .sum();
        if positives == 0 {
            per_class.push(None);
            continue;
        }
        let mut used: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.gt.groups.len()]).collect();
        let tp: Vec<bool> = ranked_predictions(records, c)
            .into_iter()
            .map(|(r, p)| {
                let mut best: Option<(usize, f64)> = None;
                for (gi, gt) in records[r].gt.groups.iter().enumerate() {
                    if gt.activity != c || used[r][gi] {
                        continue;
                    }
                    let iou = group_iou(&p.members, &gt.members);
                    if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                match best {
                    Some((gi, _)) => {
                        used[r][gi] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.push(Some(average_precision(&tp, positives)));
    }
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if scored.is_empty() {
        let any_pred = records.iter().any(|r| !r.predictions.is_empty());
        if any_pred {
            0.0
        } else {
            1.0
        }
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(MapReport { map, per_class })
}

pub fn group_map(records: &[EvalRecord], threshold: f64, num_classes: usize) -> Result<f64, MetricError> {
    Ok(group_map_report(records, threshold, num_classes)?.map)
}

/// Mean over clips of the IoU between predicted outliers and GT singletons.
pub fn outlier_miou(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 1.0;
    }
    records
        .iter()
        .map(|r| group_iou(&r.predicted_outliers(), &r.gt.singletons))
        .sum::<f64>()
        / records.len() as f64
}

pub fn individual_accuracy(records: &[EvalRecord]) -> f64 {
    let total: usize = records.iter().map(|r| r.gt.actions.len()).sum();
    if total == 0 {
        return 1.0;
    }
    let correct: usize = records
        .iter()
        .map(|r| r.actions.iter().zip(&r.gt.actions).filter(|(a, b)| a == b).count())
        .sum();
    correct as f64 / total as f64
}

/// GT group → prediction index, maximising total Group IoU.
pub fn match_by_iou(record: &EvalRecord) -> Vec<Option<usize>> {
    let (n, p) = (record.gt.groups.len(), record.predictions.len());
    if n == 0 || p == 0 {
        return vec![None; n];
    }
    let cost: Vec<Vec<f64>> = record
        .gt
        .groups
        .iter()
        .map(|g| record.predictions.iter().map(|pr| -group_iou(&pr.members, &g.members)).collect())
        .collect();
    hungarian(&cost).expect("finite costs").row_to_col(n)
}

/// Fraction of GT groups whose matched prediction has IoU ≥ 0.5 and the right activity.
pub fn social_accuracy(records: &[EvalRecord]) -> f64 {
    let total: usize = records.iter().map(|r| r.gt.groups.len()).sum();
    if total == 0 {
        return if records.iter().any(|r| !r.predictions.is_empty()) {
            0.0
        } else {
            1.0
        };
    }
    let correct: usize = records
        .iter()
        .map(|r| {
            match_by_iou(r)
                .iter()
                .zip(&r.gt.groups)
                .filter(|(m, g)| match m {
                    Some(p) => {
                        let pr = &r.predictions[*p];
                        group_iou(&pr.members, &g.members) >= 0.5 && pr.activity == g.activity
                    }
                    None => false,
                })
                .count()
        })
        .sum();
    correct as f64 / total as f64
}

/// Fraction of actors whose predicted group is the one matched to their GT
/// group, or who are correctly left ungrouped as singletons.
pub fn membership_accuracy(records: &[EvalRecord]) -> f64 {
    let total: usize = records.iter().map(|r| r.gt.actor_count()).sum();
    if total == 0 {
        return 1.0;
    }
    let mut correct = 0usize;
    for r in records {
        let matching = match_by_iou(r);
        let mut pred_of = vec![None; r.gt.actor_count()];
        for (pi, p) in r.predictions.iter().enumerate() {
            for &m in &p.members {
                pred_of[m] = Some(pi);
            }
        }
        for (i, owner) in r.gt.group_of_actor().into_iter().enumerate() {
            let ok = match owner {
                Some(g) => matching[g].is_some() && matching[g] == pred_of[i],
                None => pred_of[i].is_none(),
            };
            correct += usize::from(ok);
        }
    }
    correct as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `(threshold, report)` per requested threshold.
    pub group_map: Vec<(f64, MapReport)>,
    pub outlier_miou: f64,
    pub individual_accuracy: f64,
    pub social_accuracy: f64,
    pub membership_accuracy: f64,
}

pub fn evaluate(records: &[EvalRecord], thresholds: &[f64], num_classes: usize) -> Result<MetricReport, MetricError> {
    for r in records {
        r.validate()?;
    }
    let group_map = thresholds
        .iter()
        .map(|&t| Ok((t, group_map_report(records, t, num_classes)?)))
        .collect::<Result<_, MetricError>>()?;
    Ok(MetricReport {
        group_map,
        outlier_miou: outlier_miou(records),
        individual_accuracy: individual_accuracy(records),
        social_accuracy: social_accuracy(records),
        membership_accuracy: membership_accuracy(records),
    })
}
