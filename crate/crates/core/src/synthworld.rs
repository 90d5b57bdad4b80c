//! The synthetic universe: prototype spaces standing in for text embeddings,
//! scenes of ground-truth objects, a frozen region-feature oracle standing in
//! for the pretrained backbone, and a simulated external RPN.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedspace::{dot, norm, CategorySpace};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::rng::{self, Rng, Stream};

/// Object pairs in one scene stay below this IoU.
pub const SCENE_OBJECT_MAX_IOU: f64 = 0.3;
const PLACEMENT_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpnCoverage {
    /// Class-agnostic proposals for every object.
    All,
    /// Proposals only for base-category objects.
    BaseOnly,
}

/// A pair of categories whose prototypes are forced to a given cosine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub a: usize,
    pub b: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_base: usize,
    pub n_novel: usize,
    pub dim: usize,
    pub temperature: f64,
    /// Inclusive `[min, max]` object count per scene.
    pub objects_per_scene: [usize; 2],
    pub feature_noise_sigma: f64,
    #[serde(default)]
    pub confusion_pairs: Vec<ConfusionPair>,
    /// Cosine between each scene's clutter direction and one world-wide
    /// clutter direction; 0 leaves clutter isotropic across scenes.
    #[serde(default)]
    pub clutter_coherence: f64,
    /// Weight of a world-wide direction added to every region feature before
    /// normalization, a region-vs-prototype domain gap.
    #[serde(default)]
    pub domain_offset: f64,
    /// Region features of class `c` are built from a visual prototype at
    /// angle `atan(visual_gap)` from the classifier prototype `t_c`.
    #[serde(default)]
    pub visual_gap: f64,
    /// Share of the visual offset produced by one linear map common to all
    /// classes, so the gap learned on base classes transfers to novel ones.
    #[serde(default)]
    pub gap_sharing: f64,
    /// Sampling weight of each novel class relative to a base class.
    #[serde(default = "one")]
    pub novel_weight: f64,
    pub rpn_jitter_sigma: f64,
    /// Object proposals are the object box scaled by this factor about its
    /// center before jitter, a systematic bias the box head must undo.
    #[serde(default = "one")]
    pub rpn_box_scale: f64,
    pub rpn_distractors: usize,
    pub rpn_coverage: RpnCoverage,
    pub rpn_objectness_noise: f64,
    pub min_box_side: f64,
    pub max_box_side: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let sig = [
            ("feature_noise_sigma", self.feature_noise_sigma),
            ("rpn_jitter_sigma", self.rpn_jitter_sigma),
            ("rpn_objectness_noise", self.rpn_objectness_noise),
        ];
        for (name, v) in sig {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("world.{name}"), "must be >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.clutter_coherence) {
            return Err(Error::config("world.clutter_coherence", "must lie in [0, 1)"));
        }
        if !(self.domain_offset >= 0.0 && self.domain_offset.is_finite()) {
            return Err(Error::config("world.domain_offset", "must be >= 0"));
        }
        if !(self.visual_gap >= 0.0 && self.visual_gap.is_finite()) {
            return Err(Error::config("world.visual_gap", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gap_sharing) {
            return Err(Error::config("world.gap_sharing", "must lie in [0, 1]"));
        }
        if !(self.rpn_box_scale > 0.0 && self.rpn_box_scale.is_finite()) {
            return Err(Error::config("world.rpn_box_scale", "must be > 0"));
        }
        if !(self.novel_weight > 0.0 && self.novel_weight.is_finite()) {
            return Err(Error::config("world.novel_weight", "must be > 0"));
        }
        if self.n_base < 1 {
            return Err(Error::config("world.n_base", "must be >= 1"));
        }
        if self.n_novel < 1 {
            return Err(Error::config("world.n_novel", "must be >= 1"));
        }
        if self.dim < 8.max(self.n_base + self.n_novel) {
            return Err(Error::config(
                "world.dim",
                "must be >= max(8, n_base + n_novel)",
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("world.temperature", "must be positive"));
        }
        if !(0.0 < self.min_box_side
            && self.min_box_side < self.max_box_side
            && self.max_box_side <= 1.0)
        {
            return Err(Error::config(
                "world.min_box_side/max_box_side",
                "need 0 < min_box_side < max_box_side <= 1",
            ));
        }
        if self.objects_per_scene[0] > self.objects_per_scene[1] {
            return Err(Error::config("world.objects_per_scene", "min exceeds max"));
        }
        let n = self.n_base + self.n_novel;
        for p in &self.confusion_pairs {
            if p.a >= n || p.b >= n || p.a == p.b {
                return Err(Error::config(
                    "world.confusion_pairs",
                    format!("bad category pair ({}, {})", p.a, p.b),
                ));
            }
            if !(p.cosine > -1.0 && p.cosine < 1.0) {
                return Err(Error::config(
                    "world.confusion_pairs",
                    format!("cosine {} outside (-1, 1)", p.cosine),
                ));
            }
        }
        Ok(())
    }

    pub fn n_categories(&self) -> usize {
        self.n_base + self.n_novel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub objects: Vec<SceneObject>,
    pub clutter_direction: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

pub(crate) fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&v);
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
        Some(v)
    } else {
        None
    }
}

/// Samples prototypes uniformly on the sphere, then rotates the second member
/// of each confusion pair (in list order) to the requested cosine with the first.
pub fn gen_category_space(cfg: &WorldConfig) -> Result<CategorySpace> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::Categories, 0);
    let n = cfg.n_categories();
    let mut protos: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(cfg.dim, &mut rng)).collect();
    for p in &cfg.confusion_pairs {
        let anchor = protos[p.a].clone();
        let mut target = protos[p.b].clone();
        let proj = dot(&target, &anchor);
        target
            .iter_mut()
            .zip(&anchor)
            .for_each(|(t, a)| *t -= proj * a);
        let ortho = match normalize(target) {
            Some(o) => o,
            None => unit_vector(cfg.dim, &mut rng),
        };
        let s = (1.0 - p.cosine * p.cosine).sqrt();
        let rotated: Vec<f64> = anchor
            .iter()
            .zip(&ortho)
            .map(|(a, o)| p.cosine * a + s * o)
            .collect();
        protos[p.b] = normalize(rotated).expect("rotated prototype has unit norm");
    }
    CategorySpace::new(
        protos,
        (0..cfg.n_base).collect(),
        (cfg.n_base..n).collect(),
        cfg.temperature,
    )
}

/// The world-wide clutter direction scene clutter is pulled toward.
pub fn shared_clutter(cfg: &WorldConfig) -> Vec<f64> {
    unit_vector(cfg.dim, &mut rng::stream(cfg.seed, Stream::Categories, 1))
}

/// The world-wide direction every region feature is offset along.
pub fn domain_direction(cfg: &WorldConfig) -> Vec<f64> {
    unit_vector(cfg.dim, &mut rng::stream(cfg.seed, Stream::Categories, 2))
}

/// The direction region features of `class_id` point along: `t_c` itself
/// when `visual_gap` is 0, otherwise `t_c + visual_gap * xi_c` normalized,
/// with `xi_c` a fixed unit vector orthogonal to `t_c`.
pub fn visual_prototype(space: &CategorySpace, cfg: &WorldConfig, class_id: usize) -> Vec<f64> {
    let t = space.prototype(class_id);
    if cfg.visual_gap == 0.0 {
        return t.to_vec();
    }
    let mut r = rng::stream(cfg.seed, Stream::Categories, 16 + class_id as u64);
    let shared = shared_offset(cfg, t);
    let s = cfg.gap_sharing;
    let xi = loop {
        let own = unit_vector(cfg.dim, &mut r);
        let mut z: Vec<f64> = own.iter().zip(&shared).map(|(o, m)| s * m + (1.0 - s * s).sqrt() * o).collect();
        let p = dot(&z, t);
        z.iter_mut().zip(t).for_each(|(zi, ti)| *zi -= p * ti);
        if let Some(z) = normalize(z) {
            break z;
        }
    };
    let g = cfg.visual_gap;
    normalize(t.iter().zip(&xi).map(|(a, b)| a + g * b).collect()).expect("non-zero")
}

/// Image of `t` under a fixed random linear map, scaled to unit length.
fn shared_offset(cfg: &WorldConfig, t: &[f64]) -> Vec<f64> {
    if cfg.gap_sharing == 0.0 {
        return vec![0.0; t.len()];
    }
    let mut r = rng::stream(cfg.seed, Stream::Categories, 3);
    let rows: Vec<Vec<f64>> = (0..cfg.dim).map(|_| unit_vector(cfg.dim, &mut r)).collect();
    normalize(rows.iter().map(|row| dot(row, t)).collect()).unwrap_or_else(|| vec![0.0; t.len()])
}

fn one() -> f64 {
    1.0
}

fn random_box(cfg: &WorldConfig, rng: &mut Rng) -> BoundingBox {
    let w = rng.gen_range(cfg.min_box_side..=cfg.max_box_side);
    let h = rng.gen_range(cfg.min_box_side..=cfg.max_box_side);
    let x = rng.gen_range(0.0..=(1.0 - w));
    let y = rng.gen_range(0.0..=(1.0 - h));
    BoundingBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).expect("sampled box is valid")
}

/// Places objects uniformly, rejecting placements that overlap an existing
/// object at IoU >= 0.3. After 100 failed placements the scene keeps the
/// objects it already has.
pub fn gen_scene(space: &CategorySpace, cfg: &WorldConfig, scene_id: u64, rng: &mut Rng) -> Scene {
    let [lo, hi] = cfg.objects_per_scene;
    let count = rng.gen_range(lo..=hi);
    let n_cat = space.n_categories();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    'objects: for _ in 0..count {
        let class_id = if cfg.novel_weight == 1.0 {
            rng.gen_range(0..n_cat)
        } else {
            let total = cfg.n_base as f64 + cfg.novel_weight * cfg.n_novel as f64;
            let u = rng.gen_range(0.0..total);
            if u < cfg.n_base as f64 {
                u as usize
            } else {
                (cfg.n_base + ((u - cfg.n_base as f64) / cfg.novel_weight) as usize).min(n_cat - 1)
            }
        };
        for _ in 0..PLACEMENT_RETRIES {
            let bbox = random_box(cfg, rng);
            if objects
                .iter()
                .all(|o| iou(&o.bbox, &bbox) < SCENE_OBJECT_MAX_IOU)
            {
                objects.push(SceneObject { bbox, class_id });
                continue 'objects;
            }
        }
        break;
    }
    let mut clutter_direction = unit_vector(space.dim(), rng);
    if cfg.clutter_coherence > 0.0 {
        let c = cfg.clutter_coherence;
        let shared = shared_clutter(cfg);
        let s = (1.0 - c * c).sqrt();
        let mixed = shared
            .iter()
            .zip(&clutter_direction)
            .map(|(g, z)| c * g + s * z)
            .collect();
        clutter_direction = normalize(mixed).unwrap_or(shared);
    }
    Scene {
        scene_id,
        objects,
        clutter_direction,
    }
}

/// Frozen region embedding: overlap-weighted mixture of object prototypes and
/// the scene clutter direction plus isotropic noise, normalized to unit norm.
///
/// Overlap weights are `area(box ∩ obj) / area(box)`.
pub fn region_feature(
    scene: &Scene,
    bbox: &BoundingBox,
    space: &CategorySpace,
    cfg: &WorldConfig,
    rng: &mut Rng,
) -> Vec<f64> {
    let dim = space.dim();
    let mut f = vec![0.0; dim];
    let area = bbox.area();
    let mut covered = 0.0;
    for obj in &scene.objects {
        let w = bbox.intersection_area(&obj.bbox) / area;
        if w > 0.0 {
            covered += w;
            let t = visual_prototype(space, cfg, obj.class_id);
            f.iter_mut().zip(&t).for_each(|(x, t)| *x += w * t);
        }
    }
    let w_bg = (1.0 - covered).max(0.0);
    if w_bg > 0.0 {
        f.iter_mut()
            .zip(&scene.clutter_direction)
            .for_each(|(x, c)| *x += w_bg * c);
    }
    if cfg.domain_offset > 0.0 {
        let b = cfg.domain_offset;
        f.iter_mut()
            .zip(domain_direction(cfg))
            .for_each(|(x, g)| *x += b * g);
    }
    if cfg.feature_noise_sigma > 0.0 {
        for x in f.iter_mut() {
            *x += cfg.feature_noise_sigma * gaussian(rng);
        }
    }
    normalize(f).unwrap_or_else(|| scene.clutter_direction.clone())
}

fn max_object_iou(scene: &Scene, bbox: &BoundingBox) -> f64 {
    scene
        .objects
        .iter()
        .map(|o| iou(&o.bbox, bbox))
        .fold(0.0, f64::max)
}

fn jitter_box(b: &BoundingBox, sigma: f64, rng: &mut Rng) -> BoundingBox {
    if sigma == 0.0 {
        return *b;
    }
    let mut c = b.to_array();
    for v in c.iter_mut() {
        *v = (*v + sigma * gaussian(rng)).clamp(0.0, 1.0);
    }
    if c[0] > c[2] {
        c.swap(0, 2);
    }
    if c[1] > c[3] {
        c.swap(1, 3);
    }
    BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap_or_else(|_| {
        // collapsed under jitter: keep the collapsed center at minimum size
        let (cx, cy) = (0.5 * (c[0] + c[2]), 0.5 * (c[1] + c[3]));
        let s = crate::geometry::MIN_BOX_SIDE * 100.0;
        BoundingBox::from_center_clipped(cx, cy, s, s).unwrap_or(*b)
    })
}

/// Simulated external RPN: one jittered copy per covered object plus uniform
/// distractors. Objectness is the proposal's best IoU against any scene
/// object, perturbed and clamped to `[0, 1]`.
pub fn rpn_propose(
    scene: &Scene,
    space: &CategorySpace,
    cfg: &WorldConfig,
    rng: &mut Rng,
) -> Vec<Proposal> {
    let mut boxes = Vec::with_capacity(scene.objects.len() + cfg.rpn_distractors);
    for obj in &scene.objects {
        let covered = match cfg.rpn_coverage {
            RpnCoverage::All => true,
            RpnCoverage::BaseOnly => space.is_base(obj.class_id),
        };
        if covered {
            let b = if cfg.rpn_box_scale == 1.0 {
                obj.bbox
            } else {
                let (cx, cy) = obj.bbox.center();
                let k = cfg.rpn_box_scale;
                BoundingBox::from_center_clipped(cx, cy, k * obj.bbox.width(), k * obj.bbox.height())
                    .unwrap_or(obj.bbox)
            };
            boxes.push(jitter_box(&b, cfg.rpn_jitter_sigma, rng));
        }
    }
    for _ in 0..cfg.rpn_distractors {
        boxes.push(random_box(cfg, rng));
    }
    boxes
        .into_iter()
        .map(|bbox| {
            let mut s = max_object_iou(scene, &bbox);
            if cfg.rpn_objectness_noise > 0.0 {
                s += cfg.rpn_objectness_noise * gaussian(rng);
            }
            Proposal {
                bbox,
                objectness: s.clamp(0.0, 1.0),
            }
        })
        .collect()
}

/// Proposals of one scene with their frozen features, in proposal order.
#[derive(Debug, Clone)]
pub struct RegionSet {
    pub proposals: Vec<Proposal>,
    pub features: Vec<Vec<f64>>,
}

impl RegionSet {
    /// Proposals and features for a scene, drawn from the scene's keyed
    /// proposal and feature streams.
    pub fn for_scene(scene: &Scene, space: &CategorySpace, cfg: &WorldConfig) -> Self {
        let mut prop_rng = rng::stream(cfg.seed, Stream::Proposals, scene.scene_id);
        let proposals = rpn_propose(scene, space, cfg, &mut prop_rng);
        let mut feat_rng = rng::stream(cfg.seed, Stream::Features, scene.scene_id);
        let features = proposals
            .iter()
            .map(|p| region_feature(scene, &p.bbox, space, cfg, &mut feat_rng))
            .collect();
        Self {
            proposals,
            features,
        }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// A contiguous range of scenes generated from keyed per-scene streams.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Scene `id` is drawn from stream `(cfg.seed, Scene, id)`, so any id
    /// range can be regenerated independently.
    pub fn generate(space: &CategorySpace, cfg: &WorldConfig, ids: std::ops::Range<u64>) -> Self {
        let scenes = ids
            .map(|id| {
                let mut r = rng::stream(cfg.seed, Stream::Scene, id);
                gen_scene(space, cfg, id, &mut r)
            })
            .collect();
        Self { scenes }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.scenes.iter().map(|s| s.scene_id)
    }

    pub fn regions(&self, space: &CategorySpace, cfg: &WorldConfig) -> Vec<RegionSet> {
        use rayon::prelude::*;
        self.scenes
            .par_iter()
            .map(|s| RegionSet::for_scene(s, space, cfg))
            .collect()
    }

    /// One JSON record per line: `{"scene_id", "objects": [{"box", "class_id"}]}`.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for s in &self.scenes {
            let rec = SceneRecord {
                scene_id: s.scene_id,
                objects: s.objects.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scenes together with their proposals and frozen features.
#[derive(Debug, Clone, Default)]
pub struct SceneSplit {
    pub scenes: Vec<Scene>,
    pub regions: Vec<RegionSet>,
}

impl SceneSplit {
    pub fn build(space: &CategorySpace, cfg: &WorldConfig, ids: std::ops::Range<u64>) -> Self {
        let ds = Dataset::generate(space, cfg, ids);
        let regions = ds.regions(space, cfg);
        Self {
            scenes: ds.scenes,
            regions,
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            scenes: self.scenes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub objects: Vec<SceneObject>,
}

/// Reads a dataset export back as records.
pub fn read_scene_records(path: &Path) -> Result<Vec<SceneRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn small_cfg() -> WorldConfig {
        WorldConfig {
            n_base: 2,
            n_novel: 1,
            dim: 8,
            temperature: 0.05,
            objects_per_scene: [1, 3],
            feature_noise_sigma: 0.0,
            confusion_pairs: vec![],
            clutter_coherence: 0.0,
            domain_offset: 0.0,
            visual_gap: 0.0,
            gap_sharing: 0.0,
            novel_weight: 1.0,
            rpn_box_scale: 1.0,
            rpn_jitter_sigma: 0.0,
            rpn_distractors: 0,
            rpn_coverage: RpnCoverage::All,
            rpn_objectness_noise: 0.0,
            min_box_side: 0.1,
            max_box_side: 0.3,
            seed: 11,
        }
    }

    #[test]
    fn category_space_construction() {
        let space = gen_category_space(&small_cfg()).unwrap();
        assert_eq!(space.n_categories(), 3);
        assert_eq!(space.base_ids(), &[0, 1]);
        assert_eq!(space.novel_ids(), &[2]);
        assert_eq!(space.background_id(), 3);
        for t in space.prototypes() {
            assert_abs_diff_eq!(norm(t), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn confusion_pair_is_enforced() {
        let mut cfg = small_cfg();
        cfg.confusion_pairs = vec![ConfusionPair {
            a: 0,
            b: 2,
            cosine: 0.9,
        }];
        let space = gen_category_space(&cfg).unwrap();
        assert_abs_diff_eq!(dot(space.prototype(0), space.prototype(2)), 0.9, epsilon = 1e-9);

        cfg.confusion_pairs[0].cosine = 1.0;
        assert!(gen_category_space(&cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.dim = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.min_box_side = 0.5;
        cfg.max_box_side = 0.4;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.feature_noise_sigma = -1.0;
        assert!(cfg.validate().is_err());
        let knobs: [(&str, fn(&mut WorldConfig)); 5] = [
            ("world.clutter_coherence", |c| c.clutter_coherence = 1.0),
            ("world.visual_gap", |c| c.visual_gap = -0.1),
            ("world.gap_sharing", |c| c.gap_sharing = 1.5),
            ("world.novel_weight", |c| c.novel_weight = 0.0),
            ("world.rpn_box_scale", |c| c.rpn_box_scale = 0.0),
        ];
        for (name, f) in knobs {
            let mut cfg = small_cfg();
            f(&mut cfg);
            assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == name), "{name}");
        }
    }

    #[test]
    fn visual_gap_sets_the_prototype_angle() {
        for sharing in [0.0, 0.5, 1.0] {
            let cfg = WorldConfig {
                visual_gap: 2.0,
                gap_sharing: sharing,
                ..small_cfg()
            };
            let space = gen_category_space(&cfg).unwrap();
            for c in 0..3 {
                let v = visual_prototype(&space, &cfg, c);
                assert_abs_diff_eq!(norm(&v), 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(dot(&v, space.prototype(c)), 1.0 / 5f64.sqrt(), epsilon = 1e-12);
                assert_eq!(v, visual_prototype(&space, &cfg, c));
            }
        }
        let cfg = small_cfg();
        let space = gen_category_space(&cfg).unwrap();
        assert_eq!(visual_prototype(&space, &cfg, 1), space.prototype(1));
    }

    #[test]
    fn novel_weight_thins_novel_objects() {
        let count = |w: f64| {
            let cfg = WorldConfig { novel_weight: w, ..small_cfg() };
            let space = gen_category_space(&cfg).unwrap();
            Dataset::generate(&space, &cfg, 0..300)
                .scenes
                .iter()
                .flat_map(|s| &s.objects)
                .filter(|o| o.class_id == 2)
                .count()
        };
        let (rare, even) = (count(0.1), count(1.0));
        assert!(rare * 4 < even, "{rare} vs {even}");
    }

    #[test]
    fn box_scale_shrinks_object_proposals() {
        let cfg = WorldConfig { rpn_box_scale: 0.5, ..small_cfg() };
        let space = gen_category_space(&cfg).unwrap();
        let s = gen_scene(&space, &cfg, 0, &mut rng::stream(2, Stream::Scene, 0));
        let props = rpn_propose(&s, &space, &cfg, &mut rng::stream(2, Stream::Proposals, 0));
        for (p, o) in props.iter().zip(&s.objects) {
            assert_abs_diff_eq!(iou(&p.bbox, &o.bbox), 0.25, epsilon = 1e-9);
            assert_abs_diff_eq!(p.bbox.center().0, o.bbox.center().0, epsilon = 1e-12);
        }
    }

    #[test]
    fn scenes_respect_construction_invariants() {
        let cfg = small_cfg();
        let space = gen_category_space(&cfg).unwrap();
        for id in 0..200 {
            let mut r = rng::stream(1, Stream::Scene, id);
            let s = gen_scene(&space, &cfg, id, &mut r);
            assert!((1..=3).contains(&s.objects.len()));
            assert_abs_diff_eq!(norm(&s.clutter_direction), 1.0, epsilon = 1e-12);
            for (i, a) in s.objects.iter().enumerate() {
                assert!(a.class_id < 3);
                for b in &s.objects[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) < SCENE_OBJECT_MAX_IOU);
                }
            }
        }
        let mut one = cfg.clone();
        one.objects_per_scene = [1, 1];
        let mut r = rng::stream(1, Stream::Scene, 0);
        assert_eq!(gen_scene(&space, &one, 0, &mut r).objects.len(), 1);
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = small_cfg();
        let space = gen_category_space(&cfg).unwrap();
        let a = gen_scene(&space, &cfg, 5, &mut rng::stream(3, Stream::Scene, 5));
        let b = gen_scene(&space, &cfg, 5, &mut rng::stream(3, Stream::Scene, 5));
        assert_eq!(a, b);
    }

    fn lone_object_scene(space: &CategorySpace, class_id: usize, b: BoundingBox) -> Scene {
        let mut clutter = vec![0.0; space.dim()];
        clutter[space.dim() - 1] = 1.0;
        Scene {
            scene_id: 0,
            objects: vec![SceneObject { bbox: b, class_id }],
            clutter_direction: clutter,
        }
    }

    #[test]
    fn region_feature_mixture_rule() {
        let cfg = small_cfg();
        let space = gen_category_space(&cfg).unwrap();
        let obj = BoundingBox::new(0.2, 0.2, 0.4, 0.4).unwrap();
        let scene = lone_object_scene(&space, 1, obj);
        let mut r = rng::stream(0, Stream::Features, 0);

        let f = region_feature(&scene, &obj, &space, &cfg, &mut r);
        for (a, b) in f.iter().zip(space.prototype(1)) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let empty = BoundingBox::new(0.6, 0.6, 0.8, 0.8).unwrap();
        let f = region_feature(&scene, &empty, &space, &cfg, &mut r);
        assert_eq!(f, scene.clutter_direction);

        let half = BoundingBox::new(0.3, 0.2, 0.5, 0.4).unwrap();
        let f = region_feature(&scene, &half, &space, &cfg, &mut r);
        let mix: Vec<f64> = space
            .prototype(1)
            .iter()
            .zip(&scene.clutter_direction)
            .map(|(t, c)| 0.5 * t + 0.5 * c)
            .collect();
        let want = normalize(mix).unwrap();
        for (a, b) in f.iter().zip(&want) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_rpn_returns_ground_truth() {
        let cfg = small_cfg();
        let space = gen_category_space(&cfg).unwrap();
        let s = gen_scene(&space, &cfg, 0, &mut rng::stream(2, Stream::Scene, 0));
        let props = rpn_propose(&s, &space, &cfg, &mut rng::stream(2, Stream::Proposals, 0));
        assert_eq!(props.len(), s.objects.len());
        for (p, o) in props.iter().zip(&s.objects) {
            assert_eq!(p.bbox, o.bbox);
            assert_eq!(p.objectness, 1.0);
        }
    }

    #[test]
    fn distractor_far_from_objects_has_zero_objectness() {
        let mut cfg = small_cfg();
        cfg.rpn_coverage = RpnCoverage::BaseOnly;
        cfg.rpn_distractors = 40;
        let space = gen_category_space(&cfg).unwrap();
        let obj = BoundingBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
        let scene = lone_object_scene(&space, 2, obj);
        let props = rpn_propose(&scene, &space, &cfg, &mut rng::stream(0, Stream::Proposals, 0));
        assert_eq!(props.len(), 40);
        for p in props {
            if p.bbox.intersection_area(&obj) == 0.0 {
                assert_eq!(p.objectness, 0.0);
            }
        }
    }

    #[test]
    fn jsonl_export_roundtrip() {
        let cfg = small_cfg();
        let space = gen_category_space(&cfg).unwrap();
        let ds = Dataset::generate(&space, &cfg, 0..5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        ds.export(&path).unwrap();
        let recs = read_scene_records(&path).unwrap();
        assert_eq!(recs.len(), 5);
        for (r, s) in recs.iter().zip(&ds.scenes) {
            assert_eq!(r.scene_id, s.scene_id);
            assert_eq!(r.objects, s.objects);
        }
    }
}
