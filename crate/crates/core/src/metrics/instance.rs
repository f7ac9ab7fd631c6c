use std::collections::HashMap;

use serde::Serialize;

use crate::error::Result;
use crate::types::{check_same_shape, InstanceMap, LabelMap, FOREGROUND};

/// `2|P ∩ G| / (|P| + |G|)` over foreground pixels; two empty masks score 1.
pub fn dice(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    check_same_shape("dice", pred.shape(), gt.shape())?;
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.grid().data().iter().zip(gt.grid().data()) {
        let (a, b) = (a == FOREGROUND, b == FOREGROUND);
        inter += (a && b) as usize;
        sp += a as usize;
        sg += b as usize;
    }
    if sp + sg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + sg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchedPair {
    pub gt: u32,
    pub pred: u32,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    /// False positives, ascending.
    pub unmatched_pred: Vec<u32>,
    /// False negatives, ascending.
    pub unmatched_gt: Vec<u32>,
}

struct Overlaps {
    gt_area: Vec<usize>,
    pred_area: Vec<usize>,
    /// Intersections per gt id, as (pred id, pixels) sorted by pred id.
    by_gt: Vec<Vec<(u32, usize)>>,
}

fn overlaps(pred: &InstanceMap, gt: &InstanceMap) -> Result<Overlaps> {
    check_same_shape("instance metric", pred.shape(), gt.shape())?;
    let mut table: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.grid().data().iter().zip(gt.grid().data()) {
        if p > 0 && g > 0 {
            *table.entry((g, p)).or_default() += 1;
        }
    }
    let mut by_gt = vec![Vec::new(); gt.count() as usize + 1];
    for ((g, p), n) in table {
        by_gt[g as usize].push((p, n));
    }
    for row in &mut by_gt {
        row.sort_unstable();
    }
    Ok(Overlaps { gt_area: gt.areas(), pred_area: pred.areas(), by_gt })
}

fn unused(areas_len: usize, used: &[bool]) -> Vec<u32> {
    (1..areas_len).filter(|&i| !used[i]).map(|i| i as u32).collect()
}

/// Aggregated Jaccard index together with the greedy matching it used.
///
/// GT instances are visited in ascending id; each takes the unused prediction
/// of highest IoU (lowest id on ties) among those it overlaps, and no
/// prediction is matched twice.
pub fn aji_match(pred: &InstanceMap, gt: &InstanceMap) -> Result<(f64, MatchResult)> {
    let ov = overlaps(pred, gt)?;
    let mut used = vec![false; ov.pred_area.len()];
    let mut result = MatchResult::default();
    let (mut num, mut den) = (0usize, 0usize);
    for g in 1..ov.gt_area.len() {
        let mut best: Option<(u32, usize, f64)> = None;
        for &(p, inter) in &ov.by_gt[g] {
            if used[p as usize] {
                continue;
            }
            let union = ov.gt_area[g] + ov.pred_area[p as usize] - inter;
            let iou = inter as f64 / union as f64;
            if best.is_none_or(|(_, _, b)| iou > b) {
                best = Some((p, inter, iou));
            }
        }
        match best {
            Some((p, inter, iou)) => {
                used[p as usize] = true;
                num += inter;
                den += ov.gt_area[g] + ov.pred_area[p as usize] - inter;
                result.pairs.push(MatchedPair { gt: g as u32, pred: p, iou });
            }
            None => {
                den += ov.gt_area[g];
                result.unmatched_gt.push(g as u32);
            }
        }
    }
    result.unmatched_pred = unused(ov.pred_area.len(), &used);
    den += result.unmatched_pred.iter().map(|&p| ov.pred_area[p as usize]).sum::<usize>();
    let score = if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok((score, result))
}

pub fn aji(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    aji_match(pred, gt).map(|(s, _)| s)
}

/// Panoptic quality with true positives at IoU > 0.5.
pub fn pq(pred: &InstanceMap, gt: &InstanceMap) -> Result<(f64, MatchResult)> {
    let ov = overlaps(pred, gt)?;
    let mut used = vec![false; ov.pred_area.len()];
    let mut result = MatchResult::default();
    let mut iou_sum = 0f64;
    for g in 1..ov.gt_area.len() {
        let hit = ov.by_gt[g].iter().find_map(|&(p, inter)| {
            let iou = inter as f64 / (ov.gt_area[g] + ov.pred_area[p as usize] - inter) as f64;
            (iou > 0.5).then_some((p, iou))
        });
        match hit {
            Some((p, iou)) => {
                assert!(!used[p as usize], "IoU > 0.5 matches are unique");
                used[p as usize] = true;
                iou_sum += iou;
                result.pairs.push(MatchedPair { gt: g as u32, pred: p, iou });
            }
            None => result.unmatched_gt.push(g as u32),
        }
    }
    result.unmatched_pred = unused(ov.pred_area.len(), &used);
    let tp = result.pairs.len() as f64;
    let (fp, fn_) = (result.unmatched_pred.len() as f64, result.unmatched_gt.len() as f64);
    let score = if tp + fp + fn_ == 0.0 { 1.0 } else { iou_sum / (tp + 0.5 * fp + 0.5 * fn_) };
    Ok((score, result))
}
