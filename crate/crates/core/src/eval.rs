//! AP50 with all-point interpolation, grouped by base/novel category,
//! detector inference with branch fusion, and pseudo-label quality.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedspace::{fuse_scores, CategorySpace};
use crate::error::{Error, Result};
use crate::geometry::{apply_deltas, iou, nms, soft_nms, BoundingBox, Detection};
use crate::heads::{forward_closed, forward_open, DetectorParams};
use crate::selftrain::{generate_pls, Phase, PseudoLabel, TrainerConfig};
use crate::synthworld::SceneSplit;

pub const AP_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneDetection {
    pub scene_id: u64,
    pub det: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub scene_id: u64,
    pub bbox: BoundingBox,
}

/// Descending score, then scene id, then box coordinates.
fn detection_order(a: &SceneDetection, b: &SceneDetection) -> Ordering {
    b.det
        .score
        .total_cmp(&a.det.score)
        .then_with(|| a.scene_id.cmp(&b.scene_id))
        .then_with(|| a.det.bbox.coord_cmp(&b.det.bbox))
}

/// Greedy score-ordered matching. Returns the TP flag of each detection in
/// ranked order.
pub fn match_detections(dets: &[SceneDetection], gts: &[SceneBox], iou_thresh: f64) -> Vec<bool> {
    let mut ranked = dets.to_vec();
    ranked.sort_by(detection_order);
    let mut used = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.scene_id != d.scene_id {
                    continue;
                }
                let o = iou(&d.det.bbox, &g.bbox);
                if best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= iou_thresh => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the monotone precision envelope of a ranked TP/FP sequence.
pub fn all_point_ap(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if tp_flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let step = 1.0 / n_gt as f64;
    tp_flags
        .iter()
        .zip(&precision)
        .filter(|(hit, _)| **hit)
        .map(|(_, p)| p * step)
        .sum()
}

/// AP for one class across scenes.
///
/// No ground truth and no detections gives 1; no ground truth with
/// detections gives 0. Group averages skip classes without ground truth
/// either way.
pub fn average_precision(dets: &[SceneDetection], gts: &[SceneBox], iou_thresh: f64) -> f64 {
    all_point_ap(&match_detections(dets, gts, iou_thresh), gts.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    Fused,
    OpenOnly,
    ClosedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NmsKind {
    Hard { iou: f64 },
    Soft { sigma: f64, score_floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub alpha: f64,
    pub branch_mode: BranchMode,
    pub nms: NmsKind,
    /// Per-class detections below this score are not emitted.
    pub min_score: f64,
    pub max_dets_per_scene: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            branch_mode: BranchMode::Fused,
            nms: NmsKind::Hard { iou: 0.5 },
            min_score: 1e-3,
            max_dets_per_scene: 100,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("eval.alpha", "must be in [0, 1]"));
        }
        match self.nms {
            NmsKind::Hard { iou } if !(iou > 0.0 && iou < 1.0) => {
                return Err(Error::config("eval.nms.iou", "must be in (0, 1)"))
            }
            NmsKind::Soft { sigma, score_floor }
                if !(sigma > 0.0) || !(0.0..1.0).contains(&score_floor) =>
            {
                return Err(Error::config(
                    "eval.nms",
                    "need sigma > 0 and score_floor in [0, 1)",
                ))
            }
            _ => {}
        }
        if !(self.min_score > 0.0 && self.min_score <= 1.0) {
            return Err(Error::config("eval.min_score", "must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApGroups {
    pub ap50_novel: Option<f64>,
    pub ap50_base: Option<f64>,
    pub ap50_all: Option<f64>,
    /// Only classes with ground truth in the split appear here.
    pub per_class_ap: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when no class of the group has ground truth.
    pub ap50_novel: Option<f64>,
    pub ap50_base: Option<f64>,
    pub ap50_all: Option<f64>,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub n_scenes: usize,
    pub config_fingerprint: String,
    pub pl_quality_series: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `update_index,ap50_novel` rows.
pub fn write_pl_quality_csv(series: &[(usize, f64)], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "update_index,ap50_novel")?;
    for (i, q) in series {
        writeln!(w, "{i},{q}")?;
    }
    Ok(())
}

fn macro_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class AP over `classes`, macro-averaged into novel/base/all groups.
pub fn grouped_ap(
    dets: &[SceneDetection],
    gts: &[(u64, usize, BoundingBox)],
    classes: &[usize],
    space: &CategorySpace,
) -> ApGroups {
    let mut per_class_ap = BTreeMap::new();
    for &c in classes {
        let class_gts: Vec<SceneBox> = gts
            .iter()
            .filter(|(_, k, _)| *k == c)
            .map(|(scene_id, _, bbox)| SceneBox {
                scene_id: *scene_id,
                bbox: *bbox,
            })
            .collect();
        if class_gts.is_empty() {
            continue;
        }
        let class_dets: Vec<SceneDetection> = dets
            .iter()
            .filter(|d| d.det.class_id == c)
            .copied()
            .collect();
        per_class_ap.insert(c, average_precision(&class_dets, &class_gts, AP_IOU));
    }
    let group = |pred: &dyn Fn(usize) -> bool| {
        macro_mean(
            per_class_ap
                .iter()
                .filter(|(c, _)| pred(**c))
                .map(|(_, ap)| *ap),
        )
    };
    ApGroups {
        ap50_novel: group(&|c| space.is_novel(c)),
        ap50_base: group(&|c| space.is_base(c)),
        ap50_all: group(&|_| true),
        per_class_ap,
    }
}

fn split_ground_truth(split: &SceneSplit) -> Vec<(u64, usize, BoundingBox)> {
    split
        .scenes
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| (s.scene_id, o.class_id, o.bbox)))
        .collect()
}

/// Detections of one scene after score thresholding and suppression.
pub fn detect_scene(
    params: &DetectorParams,
    split: &SceneSplit,
    index: usize,
    space: &CategorySpace,
    opts: &EvalOptions,
) -> Result<Vec<Detection>> {
    let regions = &split.regions[index];
    let n_cat = space.n_categories();
    let mut dets = Vec::new();
    for (prop, f) in regions.proposals.iter().zip(&regions.features) {
        let p_open = forward_open(f, params, space)?;
        let (p_closed, deltas) = forward_closed(f, params, space)?;
        let scores: Vec<f64> = match opts.branch_mode {
            BranchMode::Fused => {
                let fused = fuse_scores(&p_open, &p_closed, opts.alpha, space);
                if fused.is_background_argmax(space) {
                    continue;
                }
                fused.0
            }
            BranchMode::OpenOnly => {
                if p_open.is_background_argmax(space) {
                    continue;
                }
                p_open.0
            }
            BranchMode::ClosedOnly => {
                if p_closed.is_background_argmax(space) {
                    continue;
                }
                p_closed.0
            }
        };
        let bbox = apply_deltas(&prop.bbox, &deltas);
        for (c, &s) in scores.iter().take(n_cat).enumerate() {
            if s >= opts.min_score {
                dets.push(Detection::new(bbox, c, s.min(1.0))?);
            }
        }
    }
    let mut kept = match opts.nms {
        NmsKind::Hard { iou } => nms(&dets, iou),
        NmsKind::Soft { sigma, score_floor } => soft_nms(&dets, sigma, score_floor.max(opts.min_score)),
    };
    kept.truncate(opts.max_dets_per_scene);
    Ok(kept)
}

/// Runs inference over a split and reports grouped AP50. The fingerprint and
/// PL-quality series are left empty for the caller to fill.
pub fn evaluate_detector(
    params: &DetectorParams,
    split: &SceneSplit,
    space: &CategorySpace,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    let per_scene: Vec<Vec<Detection>> = (0..split.scenes.len())
        .into_par_iter()
        .map(|i| detect_scene(params, split, i, space, opts))
        .collect::<Result<_>>()?;
    let dets: Vec<SceneDetection> = per_scene
        .into_iter()
        .zip(&split.scenes)
        .flat_map(|(ds, s)| {
            ds.into_iter().map(move |det| SceneDetection {
                scene_id: s.scene_id,
                det,
            })
        })
        .collect();
    let classes: Vec<usize> = (0..space.n_categories()).collect();
    let groups = grouped_ap(&dets, &split_ground_truth(split), &classes, space);
    Ok(EvalReport {
        ap50_novel: groups.ap50_novel,
        ap50_base: groups.ap50_base,
        ap50_all: groups.ap50_all,
        per_class_ap: groups.per_class_ap,
        n_scenes: split.scenes.len(),
        config_fingerprint: String::new(),
        pl_quality_series: Vec::new(),
    })
}

/// AP50 over novel categories of pseudo labels against the scenes' full
/// ground truth. Zero when no novel class has ground truth.
pub fn pl_quality_of(labels: &[(u64, PseudoLabel)], split: &SceneSplit, space: &CategorySpace) -> f64 {
    let dets: Vec<SceneDetection> = labels
        .iter()
        .map(|(scene_id, pl)| SceneDetection {
            scene_id: *scene_id,
            det: Detection {
                bbox: pl.bbox,
                class_id: pl.class_id,
                score: pl.score,
            },
        })
        .collect();
    grouped_ap(&dets, &split_ground_truth(split), space.novel_ids(), space)
        .ap50_novel
        .unwrap_or(0.0)
}

pub fn evaluate_pl_quality(
    teacher: &DetectorParams,
    split: &SceneSplit,
    space: &CategorySpace,
    cfg: &TrainerConfig,
    phase: Phase,
) -> Result<f64> {
    use rayon::prelude::*;
    let labels: Vec<Vec<(u64, PseudoLabel)>> = (0..split.scenes.len())
        .into_par_iter()
        .map(|i| {
            let id = split.scenes[i].scene_id;
            generate_pls(teacher, &split.regions[i], space, cfg, phase)
                .map(|pls| pls.into_iter().map(|p| (id, p)).collect())
        })
        .collect::<Result<_>>()?;
    let flat: Vec<(u64, PseudoLabel)> = labels.into_iter().flatten().collect();
    Ok(pl_quality_of(&flat, split, space))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn sd(scene_id: u64, b: BoundingBox, score: f64) -> SceneDetection {
        SceneDetection {
            scene_id,
            det: Detection::new(b, 0, score).unwrap(),
        }
    }

    fn sb(scene_id: u64, b: BoundingBox) -> SceneBox {
        SceneBox { scene_id, bbox: b }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let g1 = bb(0.1, 0.1, 0.3, 0.3);
        let g2 = bb(0.5, 0.5, 0.7, 0.8);
        let gts = [sb(0, g1), sb(1, g2)];
        let dets = [sd(0, g1, 0.9), sd(1, g2, 0.8)];
        assert_eq!(average_precision(&dets, &gts, 0.5), 1.0);
    }

    #[test]
    fn no_predictions_score_zero() {
        let gts = [sb(0, bb(0.1, 0.1, 0.3, 0.3))];
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        assert_eq!(average_precision(&[sd(0, bb(0.0, 0.0, 0.1, 0.1), 0.5)], &[], 0.5), 0.0);
    }

    #[test]
    fn tp_fp_tp_hand_example() {
        let g1 = bb(0.1, 0.1, 0.3, 0.3);
        let g2 = bb(0.5, 0.5, 0.7, 0.8);
        let gts = [sb(0, g1), sb(0, g2)];
        let dets = [
            sd(0, g1, 0.9),
            sd(0, bb(0.8, 0.0, 0.9, 0.1), 0.8),
            sd(0, g2, 0.7),
        ];
        assert_abs_diff_eq!(average_precision(&dets, &gts, 0.5), 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let g = bb(0.1, 0.1, 0.3, 0.3);
        let dets = [sd(0, g, 0.9), sd(0, g, 0.8)];
        assert_eq!(match_detections(&dets, &[sb(0, g)], 0.5), vec![true, false]);
    }

    #[test]
    fn matching_respects_scene_boundaries() {
        let g = bb(0.1, 0.1, 0.3, 0.3);
        assert_eq!(match_detections(&[sd(1, g, 0.9)], &[sb(0, g)], 0.5), vec![false]);
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        write_pl_quality_csv(&[(0, 0.25), (1, 0.5)], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "update_index,ap50_novel\n0,0.25\n1,0.5\n");
    }

    #[test]
    fn options_validation() {
        let mut o = EvalOptions::default();
        assert!(o.validate().is_ok());
        o.alpha = 1.5;
        assert!(o.validate().is_err());
        let o = EvalOptions {
            nms: NmsKind::Soft {
                sigma: 0.0,
                score_floor: 0.1,
            },
            ..Default::default()
        };
        assert!(o.validate().is_err());
    }
}
