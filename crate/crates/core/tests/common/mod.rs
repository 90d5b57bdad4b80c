//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use ovd_selftrain::embedspace::CategorySpace;
use ovd_selftrain::eval::{SceneBox, SceneDetection};
use ovd_selftrain::geometry::{BoundingBox, BoxDeltas, Detection};
use ovd_selftrain::heads::{
    closed_branch_loss, open_branch_loss, DetectorParams, MatchedBatch, MatchedEntry,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_space(dim: usize, n_base: usize, n_novel: usize, tau: f64, rng: &mut ChaCha8Rng) -> CategorySpace {
    let protos = (0..n_base + n_novel).map(|_| unit(dim, rng)).collect();
    CategorySpace::new(
        protos,
        (0..n_base).collect(),
        (n_base..n_base + n_novel).collect(),
        tau,
    )
    .unwrap()
}

/// Identity plus a random perturbation in every parameter group.
pub fn random_params(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> DetectorParams {
    let mut p = DetectorParams::init(dim);
    let mut jitter = |m: &mut ovd_selftrain::heads::Matrix| {
        m.data_mut()
            .iter_mut()
            .for_each(|x| *x += scale * rng.sample::<f64, _>(StandardNormal));
    };
    jitter(&mut p.open.w);
    jitter(&mut p.closed.w);
    jitter(&mut p.box_head.r);
    for b in &mut p.box_head.b {
        *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

/// GT entries (with targets spread across both smooth-L1 regimes), BG
/// entries and, when `with_pl`, PL entries on arbitrary categories.
pub fn random_batch(space: &CategorySpace, n: usize, with_pl: bool, rng: &mut ChaCha8Rng) -> MatchedBatch {
    let mut entries = Vec::new();
    for _ in 0..n {
        let f = unit(space.dim(), rng);
        let kind = rng.gen_range(0..if with_pl { 3 } else { 2 });
        entries.push(match kind {
            0 => {
                let base = space.base_ids();
                let label = base[rng.gen_range(0..base.len())];
                let t = BoxDeltas::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                );
                MatchedEntry::gt(f, label, t)
            }
            1 => MatchedEntry::bg(f, space.background_id()),
            _ => MatchedEntry::pl(f, rng.gen_range(0..space.n_categories())),
        });
    }
    MatchedBatch { entries }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if s == 0.0 { 0.0 } else { d / s }
}

fn central<F: Fn(&DetectorParams) -> f64>(
    p: &DetectorParams,
    h: f64,
    len: usize,
    get: impl Fn(&mut DetectorParams) -> &mut [f64],
    loss: F,
) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let mut plus = p.clone();
            get(&mut plus)[i] += h;
            let mut minus = p.clone();
            get(&mut minus)[i] -= h;
            (loss(&plus) - loss(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error of the analytic gradients against central
/// differences with step `h`, over open W, closed W, R and b.
pub fn gradient_check(p: &DetectorParams, open: &MatchedBatch, closed: &MatchedBatch, space: &CategorySpace, h: f64) -> f64 {
    let d = p.dim();
    let (_, go) = open_branch_loss(open, p, space).unwrap();
    let (_, gc) = closed_branch_loss(closed, p, space).unwrap();
    let lo = |q: &DetectorParams| open_branch_loss(open, q, space).unwrap().0;
    let lc = |q: &DetectorParams| closed_branch_loss(closed, q, space).unwrap().0;

    let n_open = central(p, h, d * d, |q| q.open.w.data_mut(), lo);
    let n_closed = central(p, h, d * d, |q| q.closed.w.data_mut(), lc);
    let n_r = central(p, h, 4 * d, |q| q.box_head.r.data_mut(), lc);
    let n_b = central(p, h, 4, |q| &mut q.box_head.b[..], lc);
    let gbox = gc.box_head.unwrap();
    [
        rel_err(go.open.unwrap().data(), &n_open),
        rel_err(gc.closed.unwrap().data(), &n_closed),
        rel_err(gbox.r.data(), &n_r),
        rel_err(&gbox.b, &n_b),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn closed_part(batch: &MatchedBatch) -> MatchedBatch {
    MatchedBatch {
        entries: batch
            .entries
            .iter()
            .filter(|e| e.source != ovd_selftrain::heads::Source::Pl)
            .cloned()
            .collect(),
    }
}

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `a` ranks before `b`: higher score, then lower scene id, then smaller
/// coordinates.
fn ranks_before(a: &SceneDetection, b: &SceneDetection) -> bool {
    if a.det.score != b.det.score {
        return a.det.score > b.det.score;
    }
    if a.scene_id != b.scene_id {
        return a.scene_id < b.scene_id;
    }
    a.det.bbox.to_array() < b.det.bbox.to_array()
}

/// Brute-force AP: repeatedly take the best remaining detection, greedily
/// claim the unmatched same-scene GT of highest IoU, then integrate the
/// precision envelope by scanning every later rank.
pub fn brute_force_ap(dets: &[SceneDetection], gts: &[SceneBox], thresh: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut left: Vec<SceneDetection> = dets.to_vec();
    let mut claimed = vec![false; gts.len()];
    let mut hits = Vec::new();
    while !left.is_empty() {
        let mut top = 0;
        for i in 1..left.len() {
            if ranks_before(&left[i], &left[top]) {
                top = i;
            }
        }
        let d = left.remove(top);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if claimed[j] || g.scene_id != d.scene_id {
                continue;
            }
            let o = box_iou(d.det.bbox.to_array(), g.bbox.to_array());
            if best.is_none() || o > best.unwrap().1 {
                best = Some((j, o));
            }
        }
        let hit = matches!(best, Some((_, o)) if o >= thresh);
        if hit {
            claimed[best.unwrap().0] = true;
        }
        hits.push(hit);
    }
    let precision_at = |k: usize| hits[..=k].iter().filter(|h| **h).count() as f64 / (k + 1) as f64;
    let step = 1.0 / gts.len() as f64;
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let envelope = (k..hits.len()).map(precision_at).fold(0.0, f64::max);
            ap += envelope * step;
        }
    }
    ap
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let w = rng.gen_range(0.05..0.5);
    let h = rng.gen_range(0.05..0.5);
    let x = rng.gen_range(0.0..1.0 - w);
    let y = rng.gen_range(0.0..1.0 - h);
    BoundingBox::new(x, y, x + w, y + h).unwrap()
}

fn nudge(b: &BoundingBox, s: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    let mut c = b.to_array();
    for v in &mut c {
        *v = (*v + s * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
    }
    let (x0, x1) = (c[0].min(c[2]), c[0].max(c[2]).max(c[0].min(c[2]) + 1e-3));
    let (y0, y1) = (c[1].min(c[3]), c[1].max(c[3]).max(c[1].min(c[3]) + 1e-3));
    BoundingBox::new(x0, y0, x1.min(1.0), y1.min(1.0)).unwrap_or(*b)
}

/// One class's detections and GT over up to three scenes, with at most
/// five detections per GT box and coarse scores so that ties occur.
pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> (Vec<SceneDetection>, Vec<SceneBox>) {
    let n_scenes = rng.gen_range(1..=3u64);
    let mut gts = Vec::new();
    for s in 0..n_scenes {
        for _ in 0..rng.gen_range(0..=3) {
            gts.push(SceneBox { scene_id: s, bbox: random_box(rng) });
        }
    }
    let cap = 5 * gts.len().max(1);
    let n_dets = rng.gen_range(0..=cap);
    let dets = (0..n_dets)
        .map(|_| {
            let (scene_id, bbox) = if !gts.is_empty() && rng.gen_bool(0.7) {
                let g = gts[rng.gen_range(0..gts.len())];
                (g.scene_id, nudge(&g.bbox, 0.04, rng))
            } else {
                (rng.gen_range(0..n_scenes), random_box(rng))
            };
            let score = rng.gen_range(1..=10) as f64 / 10.0;
            SceneDetection { scene_id, det: Detection::new(bbox, 0, score).unwrap() }
        })
        .collect();
    (dets, gts)
}
