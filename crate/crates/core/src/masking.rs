//! Visible/masked partitions of the patch grid.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

/// How the visible set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Uniform sampling without replacement.
    Random,
    /// Keep the patches the teacher's `[CLS]` attends to most.
    AttentiveTopK,
    /// Sample without replacement with probability proportional to the
    /// teacher's `[CLS]` attention.
    AttentiveStochastic,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskKind::Random),
            "attentive" | "attentive-topk" => Ok(MaskKind::AttentiveTopK),
            "attentive-stochastic" => Ok(MaskKind::AttentiveStochastic),
            other => Err(Error::Config(format!("unknown mask type `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::Random => "random",
            MaskKind::AttentiveTopK => "attentive",
            MaskKind::AttentiveStochastic => "attentive-stochastic",
        })
    }
}

/// Visible and masked patch indices of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub n_total: usize,
    pub ratio: f64,
    /// Strictly increasing.
    pub visible: Vec<usize>,
    /// Strictly increasing complement of `visible`.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    fn from_visible(n_total: usize, ratio: f64, mut visible: Vec<usize>) -> Self {
        visible.sort_unstable();
        let mut is_visible = vec![false; n_total];
        for &i in &visible {
            is_visible[i] = true;
        }
        let masked = (0..n_total).filter(|&i| !is_visible[i]).collect();
        MaskPlan {
            n_total,
            ratio,
            visible,
            masked,
        }
    }

    /// Plan with an explicit visible set; duplicates and out-of-range
    /// indices are rejected.
    pub fn with_visible(n_total: usize, visible: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; n_total];
        for &i in &visible {
            if i >= n_total {
                return Err(Error::Index { index: i, len: n_total });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("patch {i} listed twice")));
            }
        }
        if visible.is_empty() {
            return Err(Error::Contract("no visible patch".into()));
        }
        let ratio = 1.0 - visible.len() as f64 / n_total as f64;
        Ok(Self::from_visible(n_total, ratio, visible))
    }

    /// Everything visible.
    pub fn full(n_total: usize) -> Self {
        Self::from_visible(n_total, 0.0, (0..n_total).collect())
    }

    pub fn num_visible(&self) -> usize {
        self.visible.len()
    }
}

/// `round(N·(1 − r))`, rounding halves up.
///
/// A tolerance of 1e-9 absorbs binary representation error so that, e.g.,
/// `5·(1 − 0.9)` rounds as the exact 0.5 it stands for.
pub fn visible_count(n: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let keep = (n as f64 * (1.0 - ratio) + 0.5 + 1e-9).floor() as usize;
    if keep == 0 {
        return Err(Error::Config(format!(
            "mask ratio {ratio} leaves no visible patch out of {n}"
        )));
    }
    Ok(keep.min(n))
}

/// Uniform sample of `round(N(1 − r))` patches without replacement.
pub fn random_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    let keep = visible_count(n, ratio)?;
    let visible = rand::seq::index::sample(rng, n, keep).into_vec();
    Ok(MaskPlan::from_visible(n, ratio, visible))
}

/// Per-patch importance: mean over heads of the `[CLS]` row's attention to
/// each patch token. `attn` is `h×(N+1)×(N+1)`.
pub fn cls_attention_scores<T: Scalar>(attn: &Tensor<T>) -> Result<Vec<f64>> {
    let &[h, rows, cols] = attn.shape() else {
        return Err(Error::Contract(format!(
            "attention must be h×n×n, got {:?}",
            attn.shape()
        )));
    };
    if rows != cols || rows < 2 {
        return Err(Error::Contract(format!("attention must be square, got {:?}", attn.shape())));
    }
    let data = attn.data();
    let mut scores = vec![0.0; cols - 1];
    for head in 0..h {
        let row = &data[head * rows * cols..head * rows * cols + cols];
        for (s, &a) in scores.iter_mut().zip(&row[1..]) {
            *s += a.to_f64().unwrap();
        }
    }
    scores.iter_mut().for_each(|s| *s /= h as f64);
    Ok(scores)
}

/// Indices of the `keep` largest scores, ties toward the lower index,
/// returned in ascending index order.
pub fn top_k_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

/// Weighted sampling without replacement (Efraimidis–Spirakis keys).
fn weighted_sample(scores: &[f64], keep: usize, rng: &mut Rng) -> Vec<usize> {
    let keys: Vec<f64> = scores
        .iter()
        .map(|&w| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            if w > 0.0 {
                u.ln() / w
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    top_k_indices(&keys, keep)
}

/// Attentive masking from precomputed patch scores.
pub fn attentive_mask_from_scores(
    scores: &[f64],
    n: usize,
    ratio: f64,
    kind: MaskKind,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    if scores.len() != n {
        return Err(Error::Contract(format!(
            "{} attention scores for {n} patches",
            scores.len()
        )));
    }
    let keep = visible_count(n, ratio)?;
    let visible = match kind {
        MaskKind::AttentiveTopK => top_k_indices(scores, keep),
        MaskKind::AttentiveStochastic => weighted_sample(scores, keep, rng),
        MaskKind::Random => return random_mask(n, ratio, rng),
    };
    Ok(MaskPlan::from_visible(n, ratio, visible))
}

/// Attentive masking driven by the teacher's last-layer attention on the
/// intact image.
pub fn attentive_mask<T: Scalar>(
    n: usize,
    ratio: f64,
    teacher_attn: &Tensor<T>,
    kind: MaskKind,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    let scores = cls_attention_scores(teacher_attn)?;
    attentive_mask_from_scores(&scores, n, ratio, kind, rng)
}

/// Build a plan of the requested kind. Attentive kinds need the teacher
/// attention.
pub fn make_mask<T: Scalar>(
    kind: MaskKind,
    n: usize,
    ratio: f64,
    teacher_attn: Option<&Tensor<T>>,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    match (kind, teacher_attn) {
        (MaskKind::Random, _) => random_mask(n, ratio, rng),
        (_, Some(attn)) => attentive_mask(n, ratio, attn, kind, rng),
        (_, None) => Err(Error::Contract("attentive masking needs teacher attention".into())),
    }
}

/// Rows of `x: N×d` at the plan's visible positions, in ascending order.
pub fn apply_mask<T: Scalar>(x: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
    let (rows, _) = x.dims2();
    if x.shape().len() != 2 || rows != plan.n_total {
        return Err(Error::Contract(format!(
            "apply_mask: tensor {:?} vs plan over {} patches",
            x.shape(),
            plan.n_total
        )));
    }
    x.gather_rows(&plan.visible)
}
