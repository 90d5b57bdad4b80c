//! Teacher-student self-training: online pseudo labels from the teacher's
//! open branch, proposal matching with asymmetric loss routing, teacher
//! update strategies and the training driver.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::embedspace::CategorySpace;
use crate::error::{Error, Result};
use crate::eval::evaluate_pl_quality;
use crate::geometry::{apply_deltas, encode_deltas, iou, nms, BoundingBox, BoxDeltas, Detection};
use crate::heads::{
    closed_branch_loss_with_pseudo_boxes, forward_closed, forward_open, open_branch_loss, sgd_step,
    DetectorParams, MatchedBatch, MatchedEntry,
};
use crate::rng::{self, Stream};
use crate::synthworld::{RegionSet, SceneObject, SceneSplit};

const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UpdateStrategy {
    /// Copy the student into the teacher after each listed iteration.
    Periodic { update_iters: Vec<usize> },
    /// `teacher = m * teacher + (1 - m) * student` after every iteration.
    Ema { momentum: f64 },
    NoUpdate,
    EveryIter,
}

impl UpdateStrategy {
    /// Periodic updates at the given fractions of the schedule.
    pub fn periodic_at(total_iters: usize, fractions: &[f64]) -> Self {
        let mut update_iters: Vec<usize> = fractions
            .iter()
            .map(|f| ((total_iters as f64) * f).round() as usize)
            .filter(|&i| i < total_iters)
            .collect();
        update_iters.dedup();
        UpdateStrategy::Periodic { update_iters }
    }

    /// `n` updates spread evenly over the schedule.
    pub fn periodic_evenly(total_iters: usize, n: usize) -> Self {
        let fractions: Vec<f64> = (1..=n).map(|k| k as f64 / (n + 1) as f64).collect();
        Self::periodic_at(total_iters, &fractions)
    }

    pub fn applies_at(&self, iter: usize) -> bool {
        match self {
            UpdateStrategy::Periodic { update_iters } => update_iters.binary_search(&iter).is_ok(),
            UpdateStrategy::Ema { .. } | UpdateStrategy::EveryIter => true,
            UpdateStrategy::NoUpdate => false,
        }
    }
}

/// When the RPN objectness is averaged into the teacher's scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpnScoreFusion {
    InitialPhase,
    Always,
    Never,
}

/// Whether the teacher has been updated yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreFirstUpdate,
    PostUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub start_iter: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub total_iters: usize,
    pub batch_scenes: usize,
    pub lr_schedule: Vec<LrStep>,
    /// PL confidence threshold.
    pub delta: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub strategy: UpdateStrategy,
    pub use_pls: bool,
    pub rpn_score_fusion: RpnScoreFusion,
    pub pl_nms_thresh: f64,
    pub max_pls_per_scene: usize,
    /// Train the box head on pseudo boxes as well (ablation only).
    #[serde(default)]
    pub pseudo_box_regression: bool,
    /// Reuse PLs per scene until the teacher changes.
    #[serde(default)]
    pub cache_pls: bool,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("trainer.total_iters", "must be >= 1"));
        }
        if self.batch_scenes == 0 {
            return Err(Error::config("trainer.batch_scenes", "must be >= 1"));
        }
        if self.lr_schedule.first().map(|s| s.start_iter) != Some(0) {
            return Err(Error::config("trainer.lr_schedule", "must start at iteration 0"));
        }
        if !self
            .lr_schedule
            .windows(2)
            .all(|w| w[0].start_iter < w[1].start_iter)
        {
            return Err(Error::config("trainer.lr_schedule", "start iterations must increase"));
        }
        if !self.lr_schedule.iter().all(|s| s.lr > 0.0 && s.lr.is_finite()) {
            return Err(Error::config("trainer.lr_schedule", "learning rates must be positive"));
        }
        // values above 1 are allowed and disable pseudo labelling entirely
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("trainer.delta", "must be positive"));
        }
        if !(0.0 < self.bg_iou && self.bg_iou <= self.fg_iou && self.fg_iou < 1.0) {
            return Err(Error::config(
                "trainer.bg_iou",
                "need 0 < bg_iou <= fg_iou < 1",
            ));
        }
        if !(self.pl_nms_thresh > 0.0 && self.pl_nms_thresh < 1.0) {
            return Err(Error::config("trainer.pl_nms_thresh", "must be in (0, 1)"));
        }
        match &self.strategy {
            UpdateStrategy::Periodic { update_iters } => {
                if !update_iters.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::config(
                        "trainer.strategy.update_iters",
                        "must be strictly increasing",
                    ));
                }
                if update_iters.iter().any(|&i| i >= self.total_iters) {
                    return Err(Error::config(
                        "trainer.strategy.update_iters",
                        "must lie within the schedule",
                    ));
                }
            }
            UpdateStrategy::Ema { momentum } => {
                if !(0.0..=1.0).contains(momentum) {
                    return Err(Error::config("trainer.strategy.momentum", "must be in [0, 1]"));
                }
            }
            UpdateStrategy::NoUpdate | UpdateStrategy::EveryIter => {}
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|s| s.start_iter <= iter)
            .map(|s| s.lr)
            .unwrap_or(self.lr_schedule[0].lr)
    }

    pub fn rpn_fusion_active(&self, phase: Phase) -> bool {
        match self.rpn_score_fusion {
            RpnScoreFusion::Always => true,
            RpnScoreFusion::Never => false,
            RpnScoreFusion::InitialPhase => phase == Phase::PreFirstUpdate,
        }
    }

    /// Iterations after which PL quality is recorded: the scheduled updates
    /// for `Periodic`, and the default 40/60/80% marks otherwise.
    pub fn quality_checkpoints(&self) -> Vec<usize> {
        match &self.strategy {
            UpdateStrategy::Periodic { update_iters } => update_iters.clone(),
            _ => match UpdateStrategy::periodic_at(self.total_iters, &DEFAULT_UPDATE_FRACTIONS) {
                UpdateStrategy::Periodic { update_iters } => update_iters,
                _ => unreachable!(),
            },
        }
    }
}

/// Teacher score with the RPN objectness averaged in.
pub fn rpn_fused_score(objectness: f64, p: f64) -> f64 {
    0.5 * (objectness + p)
}

/// Three updates at 40%, 60% and 80% of the schedule.
pub const DEFAULT_UPDATE_FRACTIONS: [f64; 3] = [0.4, 0.6, 0.8];

/// Teacher pseudo labels for one scene.
///
/// Scores come from the open branch (averaged with RPN objectness when the
/// fusion is active for `phase`) and boxes from the closed-branch refinement.
/// Labels below `delta` or with background argmax are dropped, then
/// class-wise NMS and truncation to `max_pls_per_scene` apply.
pub fn generate_pls(
    teacher: &DetectorParams,
    regions: &RegionSet,
    space: &CategorySpace,
    cfg: &TrainerConfig,
    phase: Phase,
) -> Result<Vec<PseudoLabel>> {
    let fuse = cfg.rpn_fusion_active(phase);
    let mut cands = Vec::new();
    for (prop, f) in regions.proposals.iter().zip(&regions.features) {
        let probs = forward_open(f, teacher, space)?;
        if probs.is_background_argmax(space) {
            continue;
        }
        let (class_id, p) = probs.best_foreground(space);
        let score = if fuse { rpn_fused_score(prop.objectness, p) } else { p };
        if score < cfg.delta || score <= 0.0 {
            continue;
        }
        let (_, deltas) = forward_closed(f, teacher, space)?;
        let bbox = apply_deltas(&prop.bbox, &deltas);
        cands.push(Detection {
            bbox,
            class_id,
            score: score.min(1.0),
        });
    }
    let mut kept = nms(&cands, cfg.pl_nms_thresh);
    kept.truncate(cfg.max_pls_per_scene);
    Ok(kept
        .into_iter()
        .map(|d| PseudoLabel {
            bbox: d.bbox,
            class_id: d.class_id,
            score: d.score,
        })
        .collect())
}

/// Training targets for one scene.
#[derive(Debug, Clone, Default)]
pub struct Matched {
    /// GT foreground, PL foreground and background entries.
    pub open: MatchedBatch,
    /// GT foreground and background entries, matched against GT alone.
    pub closed: MatchedBatch,
    /// Proposals whose open-branch target is a PL, with deltas towards the
    /// PL box. Consumed only by the pseudo-box regression ablation.
    pub pseudo_boxes: Vec<(Vec<f64>, BoxDeltas)>,
}

fn best_match<'a, I>(bbox: &BoundingBox, targets: I) -> Option<(usize, f64)>
where
    I: IntoIterator<Item = &'a BoundingBox>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in targets.into_iter().enumerate() {
        let o = iou(bbox, t);
        if best.map_or(true, |(_, b)| o > b) {
            best = Some((i, o));
        }
    }
    best
}

/// Assigns each proposal to its highest-IoU target.
///
/// Foreground needs IoU >= `fg_iou`, background IoU < `bg_iou`; the band in
/// between is ignored. Ground truth wins ties against pseudo labels within
/// 1e-9. Only GT-matched entries carry regression targets. The closed batch
/// never sees pseudo labels: its background is decided against GT alone.
pub fn match_proposals(
    regions: &RegionSet,
    gts: &[SceneObject],
    pls: &[PseudoLabel],
    fg_iou: f64,
    bg_iou: f64,
    space: &CategorySpace,
) -> Matched {
    let bg = space.background_id();
    let mut out = Matched::default();
    for (prop, f) in regions.proposals.iter().zip(&regions.features) {
        let gt = best_match(&prop.bbox, gts.iter().map(|g| &g.bbox));
        let pl = best_match(&prop.bbox, pls.iter().map(|p| &p.bbox));
        let gt_iou = gt.map_or(0.0, |(_, o)| o);
        let pl_iou = pl.map_or(0.0, |(_, o)| o);

        // closed branch: ground truth only
        if gt_iou >= fg_iou {
            let (gi, _) = gt.expect("matched gt exists");
            let target = encode_deltas(&prop.bbox, &gts[gi].bbox);
            out.closed
                .entries
                .push(MatchedEntry::gt(f.clone(), gts[gi].class_id, target));
        } else if gt_iou < bg_iou {
            out.closed.entries.push(MatchedEntry::bg(f.clone(), bg));
        }

        // open branch: ground truth and pseudo labels
        let gt_wins = gt.is_some() && gt_iou >= pl_iou - TIE_EPS;
        let best_iou = gt_iou.max(pl_iou);
        if best_iou >= fg_iou {
            if gt_wins {
                let (gi, _) = gt.expect("matched gt exists");
                let target = encode_deltas(&prop.bbox, &gts[gi].bbox);
                out.open
                    .entries
                    .push(MatchedEntry::gt(f.clone(), gts[gi].class_id, target));
            } else {
                let (pi, _) = pl.expect("matched pl exists");
                out.open
                    .entries
                    .push(MatchedEntry::pl(f.clone(), pls[pi].class_id));
                out.pseudo_boxes
                    .push((f.clone(), encode_deltas(&prop.bbox, &pls[pi].bbox)));
            }
        } else if best_iou < bg_iou {
            out.open.entries.push(MatchedEntry::bg(f.clone(), bg));
        }
    }
    out
}

/// Applies one step of `strategy` after training iteration `iter`.
pub fn teacher_update(
    strategy: &UpdateStrategy,
    teacher: &DetectorParams,
    student: &DetectorParams,
    iter: usize,
) -> DetectorParams {
    match strategy {
        UpdateStrategy::Periodic { .. } if strategy.applies_at(iter) => student.clone(),
        UpdateStrategy::Periodic { .. } | UpdateStrategy::NoUpdate => teacher.clone(),
        UpdateStrategy::Ema { momentum } => teacher.blend(student, *momentum),
        UpdateStrategy::EveryIter => student.clone(),
    }
}

/// Which part of the run an external PL table replaces the teacher for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionScope {
    /// Before the first teacher update, for scenes present in the table.
    PreFirstUpdate,
    /// For the whole run; scenes absent from the table get no PLs.
    WholeRun,
}

/// One line of a PL file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlRecord {
    pub scene_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

/// Pseudo labels keyed by scene id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlTable {
    pub by_scene: BTreeMap<u64, Vec<PseudoLabel>>,
}

impl PlTable {
    pub fn is_empty(&self) -> bool {
        self.by_scene.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_scene.values().map(Vec::len).sum()
    }

    pub fn get(&self, scene_id: u64) -> Option<&[PseudoLabel]> {
        self.by_scene.get(&scene_id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, scene_id: u64, pls: Vec<PseudoLabel>) {
        self.by_scene.entry(scene_id).or_default().extend(pls);
    }

    /// One `{"scene_id", "box", "class_id", "score"}` record per line, in
    /// scene order.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for (&scene_id, pls) in &self.by_scene {
            for p in pls {
                let rec = PlRecord {
                    scene_id,
                    bbox: p.bbox,
                    class_id: p.class_id,
                    score: p.score,
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Loads an external PL file. Every scene id must be in `known_scenes` and
/// every class id must name a real category. Scores are not thresholded.
pub fn inject_external_pls(
    path: &Path,
    known_scenes: &HashSet<u64>,
    space: &CategorySpace,
) -> Result<PlTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = PlTable::default();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: PlRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.class_id >= space.n_categories() {
            return Err(parse_err(format!("class_id {} is not a category", rec.class_id)));
        }
        if !(rec.score > 0.0 && rec.score <= 1.0) {
            return Err(parse_err(format!("score {} outside (0, 1]", rec.score)));
        }
        if !known_scenes.contains(&rec.scene_id) {
            return Err(Error::UnknownScene {
                path: path.to_path_buf(),
                scene_id: rec.scene_id,
            });
        }
        table.insert(
            rec.scene_id,
            vec![PseudoLabel {
                bbox: rec.bbox,
                class_id: rec.class_id,
                score: rec.score,
            }],
        );
    }
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct PlInjection {
    pub table: PlTable,
    pub scope: InjectionScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterLoss {
    pub open: f64,
    pub closed: f64,
    pub n_pls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlQualityPoint {
    /// 0 for the initial teacher, k after the k-th checkpoint.
    pub update_index: usize,
    /// Iteration after which the teacher was measured; `None` at init.
    pub iter: Option<usize>,
    pub ap50_novel: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<IterLoss>,
    pub pl_quality: Vec<PlQualityPoint>,
    /// Iterations after which the teacher actually changed.
    pub updates_applied: Vec<usize>,
}

impl TrainHistory {
    pub fn pl_quality_series(&self) -> Vec<(usize, f64)> {
        self.pl_quality
            .iter()
            .map(|p| (p.update_index, p.ap50_novel))
            .collect()
    }
}

/// Callbacks from inside the training loop.
pub trait TrainObserver {
    fn on_iteration(&mut self, _iter: usize, _student: &DetectorParams, _teacher: &DetectorParams) {}
    /// Called once at init (`iter == None`) and after every quality checkpoint.
    fn on_checkpoint(&mut self, _index: usize, _iter: Option<usize>, _teacher: &DetectorParams, _phase: Phase) {}
}

impl TrainObserver for () {}

/// The splits a training run reads.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a SceneSplit,
    pub pl_eval: &'a SceneSplit,
}

fn base_gts(objects: &[SceneObject], space: &CategorySpace) -> Vec<SceneObject> {
    objects
        .iter()
        .filter(|o| space.is_base(o.class_id))
        .copied()
        .collect()
}

/// Runs the full teacher-student schedule and returns the final student.
pub fn train(
    cfg: &TrainerConfig,
    space: &CategorySpace,
    data: TrainData<'_>,
    injection: Option<&PlInjection>,
    observer: &mut dyn TrainObserver,
) -> Result<(DetectorParams, TrainHistory)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("splits.train", "training split is empty"));
    }
    let dim = space.dim();
    let mut student = DetectorParams::init(dim);
    let mut teacher = student.clone();
    let mut phase = Phase::PreFirstUpdate;
    let mut history = TrainHistory::default();
    let checkpoints = cfg.quality_checkpoints();

    let init_q = evaluate_pl_quality(&teacher, data.pl_eval, space, cfg, phase)?;
    history.pl_quality.push(PlQualityPoint {
        update_index: 0,
        iter: None,
        ap50_novel: init_q,
    });
    observer.on_checkpoint(0, None, &teacher, phase);

    let mut cache: HashMap<usize, Vec<PseudoLabel>> = HashMap::new();
    let n_train = data.train.len();
    let batch = cfg.batch_scenes.min(n_train);

    for iter in 0..cfg.total_iters {
        let mut brng = rng::stream(cfg.seed, Stream::Batches, iter as u64);
        let mut picks = index::sample(&mut brng, n_train, batch).into_vec();
        picks.sort_unstable();

        let mut open = MatchedBatch::default();
        let mut closed = MatchedBatch::default();
        let mut pseudo_boxes = Vec::new();
        let mut n_pls = 0;
        for &si in &picks {
            let scene = &data.train.scenes[si];
            let regions = &data.train.regions[si];
            let pls: Vec<PseudoLabel> = match injection {
                Some(inj) if inj.scope == InjectionScope::WholeRun => {
                    inj.table.get(scene.scene_id).unwrap_or(&[]).to_vec()
                }
                _ if !cfg.use_pls => Vec::new(),
                Some(inj) if phase == Phase::PreFirstUpdate && inj.table.get(scene.scene_id).is_some() => {
                    inj.table.get(scene.scene_id).unwrap_or(&[]).to_vec()
                }
                _ if cfg.cache_pls => match cache.get(&si) {
                    Some(p) => p.clone(),
                    None => {
                        let p = generate_pls(&teacher, regions, space, cfg, phase)?;
                        cache.insert(si, p.clone());
                        p
                    }
                },
                _ => generate_pls(&teacher, regions, space, cfg, phase)?,
            };
            n_pls += pls.len();
            let m = match_proposals(
                regions,
                &base_gts(&scene.objects, space),
                &pls,
                cfg.fg_iou,
                cfg.bg_iou,
                space,
            );
            open.extend(m.open);
            closed.extend(m.closed);
            pseudo_boxes.extend(m.pseudo_boxes);
        }

        let (open_loss, g_open) = open_branch_loss(&open, &student, space)?;
        let extra: &[(Vec<f64>, BoxDeltas)] = if cfg.pseudo_box_regression {
            &pseudo_boxes
        } else {
            &[]
        };
        let (closed_loss, g_closed) = closed_branch_loss_with_pseudo_boxes(&closed, extra, &student, space)?;
        if !open_loss.is_finite() || !closed_loss.is_finite() {
            return Err(Error::Divergence {
                iter,
                reason: format!("non-finite loss (open {open_loss}, closed {closed_loss})"),
            });
        }
        student = sgd_step(&student, &g_open.merge(g_closed), cfg.lr_at(iter), iter)?;
        history.losses.push(IterLoss {
            open: open_loss,
            closed: closed_loss,
            n_pls,
        });

        if cfg.strategy.applies_at(iter) {
            teacher = teacher_update(&cfg.strategy, &teacher, &student, iter);
            phase = Phase::PostUpdate;
            history.updates_applied.push(iter);
            cache.clear();
        }
        observer.on_iteration(iter, &student, &teacher);

        if let Ok(k) = checkpoints.binary_search(&iter) {
            let q = evaluate_pl_quality(&teacher, data.pl_eval, space, cfg, phase)?;
            history.pl_quality.push(PlQualityPoint {
                update_index: k + 1,
                iter: Some(iter),
                ap50_novel: q,
            });
            log::debug!("iter {iter}: PL quality {q:.4}");
            observer.on_checkpoint(k + 1, Some(iter), &teacher, phase);
        }
    }
    Ok((student, history))
}

/// Teacher PLs for every scene of a split.
pub fn export_pls(
    teacher: &DetectorParams,
    split: &SceneSplit,
    space: &CategorySpace,
    cfg: &TrainerConfig,
    phase: Phase,
) -> Result<PlTable> {
    let mut table = PlTable::default();
    for (scene, regions) in split.scenes.iter().zip(&split.regions) {
        let pls = generate_pls(teacher, regions, space, cfg, phase)?;
        table.by_scene.insert(scene.scene_id, pls);
    }
    Ok(table)
}
