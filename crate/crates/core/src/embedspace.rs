//! Cosine-softmax classifier over fixed category prototypes and the
//! base/novel-asymmetric geometric-mean fusion of two branch outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-9;

/// Category prototypes, the base/novel partition and the softmax temperature.
///
/// Categories are indexed `0..n_categories()`; the background slot is the
/// last index and carries the all-zero embedding implicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpace {
    prototypes: Vec<Vec<f64>>,
    base_ids: Vec<usize>,
    novel_ids: Vec<usize>,
    temperature: f64,
    dim: usize,
}

impl CategorySpace {
    /// `prototypes[c]` is category `c`. Every category must be in exactly one
    /// of `base_ids` / `novel_ids`.
    pub fn new(
        prototypes: Vec<Vec<f64>>,
        base_ids: Vec<usize>,
        novel_ids: Vec<usize>,
        temperature: f64,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive and finite"));
        }
        let dim = prototypes.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::config("prototypes", "need at least one category"));
        }
        for (c, t) in prototypes.iter().enumerate() {
            if t.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: t.len(),
                });
            }
            let n = norm(t);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::config(
                    "prototypes",
                    format!("prototype {c} has norm {n}, expected 1"),
                ));
            }
        }
        let n = prototypes.len();
        let mut seen = vec![0u8; n];
        for &c in base_ids.iter().chain(novel_ids.iter()) {
            if c >= n {
                return Err(Error::config("base_ids/novel_ids", format!("id {c} out of range")));
            }
            seen[c] += 1;
        }
        if seen.iter().any(|&s| s != 1) {
            return Err(Error::config(
                "base_ids/novel_ids",
                "base and novel sets must be disjoint and cover every category",
            ));
        }
        let mut base_ids = base_ids;
        let mut novel_ids = novel_ids;
        base_ids.sort_unstable();
        novel_ids.sort_unstable();
        Ok(Self {
            prototypes,
            base_ids,
            novel_ids,
            temperature,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Same prototypes under a different temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        Self::new(
            self.prototypes.clone(),
            self.base_ids.clone(),
            self.novel_ids.clone(),
            temperature,
        )
    }

    /// Count of real (non-background) categories.
    pub fn n_categories(&self) -> usize {
        self.prototypes.len()
    }

    /// Vocabulary size including background.
    pub fn vocab_size(&self) -> usize {
        self.prototypes.len() + 1
    }

    pub fn background_id(&self) -> usize {
        self.prototypes.len()
    }

    pub fn base_ids(&self) -> &[usize] {
        &self.base_ids
    }

    pub fn novel_ids(&self) -> &[usize] {
        &self.novel_ids
    }

    pub fn is_base(&self, c: usize) -> bool {
        self.base_ids.binary_search(&c).is_ok()
    }

    pub fn is_novel(&self, c: usize) -> bool {
        self.novel_ids.binary_search(&c).is_ok()
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.prototypes[c]
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }
}

/// A probability distribution over every category including background.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(pub Vec<f64>);

impl ProbVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Highest-probability non-background category and its probability.
    pub fn best_foreground(&self, space: &CategorySpace) -> (usize, f64) {
        argmax(&self.0[..space.n_categories()])
    }

    pub fn is_background_argmax(&self, space: &CategorySpace) -> bool {
        let bg = space.background_id();
        let (_, best_fg) = self.best_foreground(space);
        self.0[bg] >= best_fg
    }
}

/// Per-category fused ranking scores (not a distribution).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScores(pub Vec<f64>);

impl FusedScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_background_argmax(&self, space: &CategorySpace) -> bool {
        let (_, best_fg) = argmax(&self.0[..space.n_categories()]);
        self.0[space.background_id()] >= best_fg
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cosine logits `<r, t_c> / tau` for every category, background last at 0.
///
/// Returns the logits and `|r|` so callers computing gradients can reuse it.
pub(crate) fn cosine_logits(r: &[f64], space: &CategorySpace) -> Result<(Vec<f64>, f64)> {
    if r.len() != space.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            got: r.len(),
        });
    }
    let n = norm(r);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateFeature);
    }
    let scale = 1.0 / (n * space.temperature());
    let mut logits: Vec<f64> = space
        .prototypes
        .iter()
        .map(|t| dot(r, t) * scale)
        .collect();
    // the background embedding is all-zero; its cosine is defined as 0
    logits.push(0.0);
    Ok((logits, n))
}

/// Temperature-scaled cosine softmax of a region embedding against every
/// category prototype plus the zero background embedding.
pub fn classify(r: &[f64], space: &CategorySpace) -> Result<ProbVector> {
    let (logits, _) = cosine_logits(r, space)?;
    Ok(ProbVector(softmax(&logits)))
}

/// Weighted geometric mean of the two branch outputs.
///
/// Base categories lean on the closed branch (`closed^(1-alpha) * open^alpha`),
/// every other category leans on the open branch
/// (`closed^alpha * open^(1-alpha)`). Background uses equal weights.
pub fn fuse_scores(
    p_open: &ProbVector,
    p_closed: &ProbVector,
    alpha: f64,
    space: &CategorySpace,
) -> FusedScores {
    debug_assert!((0.0..=1.0).contains(&alpha));
    let bg = space.background_id();
    let fused = p_open
        .0
        .iter()
        .zip(&p_closed.0)
        .enumerate()
        .map(|(c, (&open, &closed))| {
            let closed_weight = if c == bg {
                0.5
            } else if space.is_base(c) {
                1.0 - alpha
            } else {
                alpha
            };
            closed.powf(closed_weight) * open.powf(1.0 - closed_weight)
        })
        .collect();
    FusedScores(fused)
}
