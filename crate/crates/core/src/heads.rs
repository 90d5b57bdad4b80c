//! The split-and-fusion head: an open branch (classification only, trained on
//! ground truth and pseudo labels) and a closed branch (classification plus
//! class-agnostic box refinement, trained on ground truth only).
//!
//! Each branch applies a learnable square matrix to the frozen region feature
//! before the cosine classifier. Both matrices start at identity, which makes
//! the untrained detector exactly the zero-shot classifier of the feature
//! oracle. Losses return exact analytic gradients.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedspace::{classify, cosine_logits, dot, softmax, CategorySpace, ProbVector};
use crate::error::{Error, Result};
use crate::geometry::{BoxDeltas, DELTA_LOG_CLAMP};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self += scale * a b^T`
    fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            row.iter_mut().zip(b).for_each(|(m, &bv)| *m += s * bv);
        }
    }

    fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Learnable map applied to the region feature ahead of one branch's classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    pub w: Matrix,
}

/// Class-agnostic box refinement: `deltas = R f + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxHeadParams {
    pub r: Matrix,
    pub b: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub open: BranchParams,
    pub closed: BranchParams,
    #[serde(rename = "box")]
    pub box_head: BoxHeadParams,
}

impl DetectorParams {
    /// Identity branch maps and zero box refinement.
    pub fn init(dim: usize) -> Self {
        Self {
            open: BranchParams {
                w: Matrix::identity(dim),
            },
            closed: BranchParams {
                w: Matrix::identity(dim),
            },
            box_head: BoxHeadParams {
                r: Matrix::zeros(4, dim),
                b: [0.0; 4],
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.open.w.cols()
    }

    fn same_shape(&self, other: &DetectorParams) -> bool {
        self.open.w.same_shape(&other.open.w)
            && self.closed.w.same_shape(&other.closed.w)
            && self.box_head.r.same_shape(&other.box_head.r)
    }

    /// Elementwise `m * self + (1 - m) * other`.
    pub fn blend(&self, other: &DetectorParams, m: f64) -> DetectorParams {
        let mix = |a: &Matrix, b: &Matrix| {
            let mut out = a.clone();
            out.data
                .iter_mut()
                .zip(&b.data)
                .for_each(|(x, y)| *x = m * *x + (1.0 - m) * y);
            out
        };
        let mut b = self.box_head.b;
        b.iter_mut()
            .zip(other.box_head.b)
            .for_each(|(x, y)| *x = m * *x + (1.0 - m) * y);
        DetectorParams {
            open: BranchParams {
                w: mix(&self.open.w, &other.open.w),
            },
            closed: BranchParams {
                w: mix(&self.closed.w, &other.closed.w),
            },
            box_head: BoxHeadParams {
                r: mix(&self.box_head.r, &other.box_head.r),
                b,
            },
        }
    }
}

pub fn forward_open(f: &[f64], params: &DetectorParams, space: &CategorySpace) -> Result<ProbVector> {
    check_dim(f, params)?;
    classify(&params.open.w.matvec(f), space)
}

pub fn forward_closed(
    f: &[f64],
    params: &DetectorParams,
    space: &CategorySpace,
) -> Result<(ProbVector, BoxDeltas)> {
    check_dim(f, params)?;
    let probs = classify(&params.closed.w.matvec(f), space)?;
    Ok((probs, predict_deltas(f, &params.box_head)))
}

/// Box refinement output with the log-size components clamped.
pub fn predict_deltas(f: &[f64], head: &BoxHeadParams) -> BoxDeltas {
    let raw = head.r.matvec(f);
    BoxDeltas::new(
        raw[0] + head.b[0],
        raw[1] + head.b[1],
        raw[2] + head.b[2],
        raw[3] + head.b[3],
    )
    .clamped()
}

fn check_dim(f: &[f64], params: &DetectorParams) -> Result<()> {
    if f.len() != params.dim() {
        Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: f.len(),
        })
    } else {
        Ok(())
    }
}

/// Where a training entry's label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Gt,
    Pl,
    Bg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedEntry {
    pub feature: Vec<f64>,
    pub label: usize,
    pub source: Source,
    /// Present exactly when `source == Source::Gt`.
    pub target: Option<BoxDeltas>,
}

impl MatchedEntry {
    pub fn gt(feature: Vec<f64>, label: usize, target: BoxDeltas) -> Self {
        Self {
            feature,
            label,
            source: Source::Gt,
            target: Some(target),
        }
    }

    pub fn pl(feature: Vec<f64>, label: usize) -> Self {
        Self {
            feature,
            label,
            source: Source::Pl,
            target: None,
        }
    }

    pub fn bg(feature: Vec<f64>, background_id: usize) -> Self {
        Self {
            feature,
            label: background_id,
            source: Source::Bg,
            target: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchedBatch {
    pub entries: Vec<MatchedEntry>,
}

impl MatchedBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: MatchedBatch) {
        self.entries.extend(other.entries);
    }

    pub fn count(&self, source: Source) -> usize {
        self.entries.iter().filter(|e| e.source == source).count()
    }
}

/// Gradients per parameter group; `None` leaves that group untouched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub open: Option<Matrix>,
    pub closed: Option<Matrix>,
    pub box_head: Option<BoxHeadParams>,
}

impl Gradients {
    pub fn merge(self, other: Gradients) -> Gradients {
        Gradients {
            open: self.open.or(other.open),
            closed: self.closed.or(other.closed),
            box_head: self.box_head.or(other.box_head),
        }
    }
}

/// Mean cross-entropy of the cosine classifier behind `w`, plus `dL/dw`.
fn classification_loss(
    entries: &[MatchedEntry],
    w: &Matrix,
    space: &CategorySpace,
) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    if entries.is_empty() {
        return Ok((0.0, grad));
    }
    let inv_tau = 1.0 / space.temperature();
    let n_cat = space.n_categories();
    let mut loss = 0.0;
    for e in entries {
        let u = w.matvec(&e.feature);
        let (logits, norm_u) = cosine_logits(&u, space)?;
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        loss += lse - logits[e.label];

        let mut g = softmax(&logits);
        g[e.label] -= 1.0;
        // dL/du_hat; the background logit is constant and contributes nothing
        let mut v = vec![0.0; u.len()];
        for (c, gc) in g.iter().take(n_cat).enumerate() {
            let s = gc * inv_tau;
            v.iter_mut()
                .zip(space.prototype(c))
                .for_each(|(vi, ti)| *vi += s * ti);
        }
        let u_hat: Vec<f64> = u.iter().map(|x| x / norm_u).collect();
        let proj = dot(&v, &u_hat);
        let du: Vec<f64> = v
            .iter()
            .zip(&u_hat)
            .map(|(vi, ui)| (vi - proj * ui) / norm_u)
            .collect();
        grad.add_outer(&du, &e.feature, 1.0);
    }
    let n = entries.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

fn smooth_l1(e: f64) -> (f64, f64) {
    // beta = 1
    if e.abs() < 1.0 {
        (0.5 * e * e, e)
    } else {
        (e.abs() - 0.5, e.signum())
    }
}

/// Mean smooth-L1 over every delta component of every `(feature, target)` pair.
pub fn box_regression_loss<'a>(
    targets: impl IntoIterator<Item = (&'a [f64], BoxDeltas)>,
    head: &BoxHeadParams,
) -> (f64, BoxHeadParams) {
    let mut gr = Matrix::zeros(head.r.rows(), head.r.cols());
    let mut gb = [0.0; 4];
    let mut loss = 0.0;
    let mut count = 0usize;
    for (f, target) in targets {
        let raw = head.r.matvec(f);
        let t = target.to_array();
        let mut g = [0.0; 4];
        for k in 0..4 {
            let pre = raw[k] + head.b[k];
            let clamped_out = k >= 2 && pre.abs() > DELTA_LOG_CLAMP;
            let pred = if k >= 2 {
                pre.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP)
            } else {
                pre
            };
            let (l, d) = smooth_l1(pred - t[k]);
            loss += l;
            g[k] = if clamped_out { 0.0 } else { d };
        }
        gr.add_outer(&g, f, 1.0);
        gb.iter_mut().zip(g).for_each(|(b, gk)| *b += gk);
        count += 1;
    }
    if count == 0 {
        return (0.0, BoxHeadParams { r: gr, b: gb });
    }
    let denom = 4.0 * count as f64;
    gr.scale(1.0 / denom);
    gb.iter_mut().for_each(|b| *b /= denom);
    (loss / denom, BoxHeadParams { r: gr, b: gb })
}

fn gt_targets(batch: &MatchedBatch) -> impl Iterator<Item = (&[f64], BoxDeltas)> {
    batch
        .entries
        .iter()
        .filter_map(|e| e.target.map(|t| (e.feature.as_slice(), t)))
}

fn reject_pseudo(batch: &MatchedBatch) -> Result<()> {
    if let Some(i) = batch.entries.iter().position(|e| e.source == Source::Pl) {
        return Err(Error::Contract(format!(
            "closed-branch batch entry {i} is pseudo-labelled"
        )));
    }
    Ok(())
}

/// Mean cross-entropy over all entries plus mean smooth-L1 over the GT
/// regression targets, with gradients for the closed classifier and box head.
///
/// The batch must not contain pseudo-labelled entries.
pub fn closed_branch_loss(
    batch: &MatchedBatch,
    params: &DetectorParams,
    space: &CategorySpace,
) -> Result<(f64, Gradients)> {
    closed_branch_loss_with_pseudo_boxes(batch, &[], params, space)
}

/// Closed-branch loss whose regression term also covers extra
/// `(feature, target)` pairs encoded from pseudo boxes. Only the
/// pseudo-box ablation calls this with a non-empty `pseudo_boxes`.
pub fn closed_branch_loss_with_pseudo_boxes(
    batch: &MatchedBatch,
    pseudo_boxes: &[(Vec<f64>, BoxDeltas)],
    params: &DetectorParams,
    space: &CategorySpace,
) -> Result<(f64, Gradients)> {
    reject_pseudo(batch)?;
    let (ce, gw) = classification_loss(&batch.entries, &params.closed.w, space)?;
    let extra = pseudo_boxes.iter().map(|(f, t)| (f.as_slice(), *t));
    let (reg, gbox) = box_regression_loss(gt_targets(batch).chain(extra), &params.box_head);
    Ok((
        ce + reg,
        Gradients {
            open: None,
            closed: Some(gw),
            box_head: Some(gbox),
        },
    ))
}

/// Mean cross-entropy of the open branch over GT, PL and BG entries.
pub fn open_branch_loss(
    batch: &MatchedBatch,
    params: &DetectorParams,
    space: &CategorySpace,
) -> Result<(f64, Gradients)> {
    let (ce, gw) = classification_loss(&batch.entries, &params.open.w, space)?;
    Ok((
        ce,
        Gradients {
            open: Some(gw),
            closed: None,
            box_head: None,
        },
    ))
}

/// `params - lr * grads` for every group that has a gradient.
pub fn sgd_step(
    params: &DetectorParams,
    grads: &Gradients,
    lr: f64,
    iter: usize,
) -> Result<DetectorParams> {
    let diverged = |what: &str| Error::Divergence {
        iter,
        reason: format!("non-finite gradient in {what}"),
    };
    let step = |p: &Matrix, g: &Matrix, what: &str| -> Result<Matrix> {
        if !p.same_shape(g) {
            return Err(Error::DimensionMismatch {
                expected: p.data.len(),
                got: g.data.len(),
            });
        }
        if !g.is_finite() {
            return Err(diverged(what));
        }
        let mut out = p.clone();
        out.data
            .iter_mut()
            .zip(&g.data)
            .for_each(|(x, gx)| *x -= lr * gx);
        Ok(out)
    };
    let mut next = params.clone();
    if let Some(g) = &grads.open {
        next.open.w = step(&params.open.w, g, "open branch")?;
    }
    if let Some(g) = &grads.closed {
        next.closed.w = step(&params.closed.w, g, "closed branch")?;
    }
    if let Some(g) = &grads.box_head {
        next.box_head.r = step(&params.box_head.r, &g.r, "box head")?;
        if !g.b.iter().all(|v| v.is_finite()) {
            return Err(diverged("box head bias"));
        }
        next.box_head
            .b
            .iter_mut()
            .zip(g.b)
            .for_each(|(x, gx)| *x -= lr * gx);
    }
    Ok(next)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    params: DetectorParams,
}

/// Writes params as versioned JSON. Floats round-trip bit-exactly.
pub fn save_checkpoint(params: &DetectorParams, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&CheckpointFile {
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let p = file.params;
    let d = p.open.w.cols();
    let ok = p.open.w.rows() == d
        && p.closed.w.rows() == d
        && p.closed.w.cols() == d
        && p.box_head.r.rows() == 4
        && p.box_head.r.cols() == d
        && [&p.open.w, &p.closed.w, &p.box_head.r]
            .iter()
            .all(|m| m.data.len() == m.rows * m.cols);
    if !ok {
        return Err(Error::Contract(format!(
            "{}: inconsistent parameter shapes",
            path.display()
        )));
    }
    if !p.same_shape(&DetectorParams::init(d)) {
        return Err(Error::Contract("checkpoint shape mismatch".into()));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn axis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn space3() -> CategorySpace {
        CategorySpace::new(
            vec![axis(8, 0), axis(8, 1), axis(8, 2)],
            vec![0, 1],
            vec![2],
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn identity_init_matches_classifier() {
        let s = space3();
        let p = DetectorParams::init(8);
        let f = [0.6, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(forward_open(&f, &p, &s).unwrap(), classify(&f, &s).unwrap());
        let (probs, d) = forward_closed(&f, &p, &s).unwrap();
        assert_eq!(probs, classify(&f, &s).unwrap());
        assert_eq!(d, BoxDeltas::default());
    }

    #[test]
    fn scaled_branch_map_is_invariant() {
        let s = space3();
        let mut p = DetectorParams::init(8);
        p.open.w.scale(3.0);
        let f = [0.6, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0];
        let a = forward_open(&f, &p, &s).unwrap();
        let b = classify(&f, &s).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_onto_prototype_sets_argmax() {
        let s = space3();
        let mut p = DetectorParams::init(8);
        // swap axes 0 and 2 so t_0 lands on t_2
        p.open.w = Matrix::identity(8);
        p.open.w.set(0, 0, 0.0);
        p.open.w.set(2, 2, 0.0);
        p.open.w.set(0, 2, 1.0);
        p.open.w.set(2, 0, 1.0);
        let probs = forward_open(&axis(8, 0), &p, &s).unwrap();
        assert_eq!(probs.best_foreground(&s).0, 2);
    }

    #[test]
    fn crafted_box_head_output() {
        let mut p = DetectorParams::init(8);
        p.box_head.r.set(0, 3, 0.5);
        let f = axis(8, 3);
        let (_, d) = forward_closed(&f, &p, &space3()).unwrap();
        assert_eq!(d, BoxDeltas::new(0.5, 0.0, 0.0, 0.0));
    }

    #[test]
    fn degenerate_projection_errors() {
        let mut p = DetectorParams::init(8);
        p.open.w = Matrix::zeros(8, 8);
        assert!(matches!(
            forward_open(&axis(8, 0), &p, &space3()),
            Err(Error::DegenerateFeature)
        ));
    }

    #[test]
    fn uniform_prediction_costs_ln_c() {
        let s = space3();
        let p = DetectorParams::init(8);
        // orthogonal to every prototype: all four logits are 0
        let f = axis(8, 5);
        let batch = MatchedBatch {
            entries: vec![MatchedEntry::bg(f.clone(), 3), MatchedEntry::pl(f, 2)],
        };
        let (l, _) = open_branch_loss(&batch, &p, &s).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_prediction_costs_nothing() {
        let s = CategorySpace::new(vec![axis(8, 0), axis(8, 1)], vec![0], vec![1], 1e-3).unwrap();
        let p = DetectorParams::init(8);
        let batch = MatchedBatch {
            entries: vec![MatchedEntry::gt(axis(8, 0), 0, BoxDeltas::default())],
        };
        let (l, _) = closed_branch_loss(&batch, &p, &s).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn smooth_l1_quadratic_branch() {
        let (l, _) = box_regression_loss(
            [(axis(8, 0).as_slice(), BoxDeltas::new(0.5, 0.5, 0.5, 0.5))],
            &DetectorParams::init(8).box_head,
        );
        assert_abs_diff_eq!(l, 0.125, epsilon = 1e-15);
    }

    #[test]
    fn closed_loss_rejects_pseudo_labels() {
        let batch = MatchedBatch {
            entries: vec![MatchedEntry::pl(axis(8, 0), 2)],
        };
        let r = closed_branch_loss(&batch, &DetectorParams::init(8), &space3());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn pseudo_labels_change_open_loss() {
        let s = space3();
        let p = DetectorParams::init(8);
        let f = [0.0, 0.0, 0.8, 0.6, 0.0, 0.0, 0.0, 0.0];
        let with_pl = MatchedBatch {
            entries: vec![MatchedEntry::pl(f.to_vec(), 2)],
        };
        let as_bg = MatchedBatch {
            entries: vec![MatchedEntry::bg(f.to_vec(), 3)],
        };
        let (a, _) = open_branch_loss(&with_pl, &p, &s).unwrap();
        let (b, _) = open_branch_loss(&as_bg, &p, &s).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let p = DetectorParams::init(8);
        assert_eq!(sgd_step(&p, &Gradients::default(), 0.1, 0).unwrap(), p);
        let mut g = Matrix::zeros(8, 8);
        g.set(0, 0, 0.5);
        let grads = Gradients {
            open: Some(g.clone()),
            ..Default::default()
        };
        let next = sgd_step(&p, &grads, 0.1, 0).unwrap();
        assert_abs_diff_eq!(next.open.w.get(0, 0), 0.95, epsilon = 1e-15);
        assert_eq!(next.closed, p.closed);
        assert_eq!(next.box_head, p.box_head);
        assert_eq!(sgd_step(&p, &grads, 0.0, 0).unwrap(), p);

        g.set(1, 1, f64::NAN);
        let bad = Gradients {
            open: Some(g),
            ..Default::default()
        };
        assert!(matches!(
            sgd_step(&p, &bad, 0.1, 17),
            Err(Error::Divergence { iter: 17, .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut p = DetectorParams::init(8);
        for (i, v) in p.open.w.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.1234567).sin() / 3.0;
        }
        p.box_head.b = [1e-300, -0.1, std::f64::consts::PI, 2.0 / 3.0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        for (a, b) in p.open.w.data().iter().zip(q.open.w.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(p, q);
    }
}
