//! Dynamic alignment of multi-level student features to teacher targets.
//!
//! Every student block output `x_i` passes through its own adaptor `A_i`
//! into the teacher's feature space. In dynamic mode a learnable `S×K`
//! matrix `W` mixes the adapted features into one prediction per target
//! level,
//!
//! ```text
//! ŷ_j = Σ_i w_ij · A_i(x_i),   j = 1..K
//! ```
//!
//! and the targets are the last `K` teacher blocks, gathered at the visible
//! positions and normalised per token. The loss is the mean smooth-L1
//! distance over every element of every level.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::tensor::{Graph, Param, Parameters, Scalar, Tensor, Var};
use crate::vit::{EncoderOutput, EncoderVars, Linear, LN_EPS};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    Dynamic,
    Layerwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptorKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetNorm {
    LayerNorm,
    BatchNorm,
    None,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, { $($s:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $v { return f.write_str($s); })+
                unreachable!()
            }
        }
    };
}

str_enum!(AlignMode, "align mode", { "dynamic" => AlignMode::Dynamic, "layerwise" => AlignMode::Layerwise });
str_enum!(AdaptorKind, "adaptor", { "linear" => AdaptorKind::Linear, "mlp" => AdaptorKind::Mlp });
str_enum!(TargetNorm, "target normalization", {
    "layernorm" => TargetNorm::LayerNorm,
    "batchnorm" => TargetNorm::BatchNorm,
    "none" => TargetNorm::None,
});

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub mode: AlignMode,
    /// Number of final teacher blocks used as targets.
    pub top_k: usize,
    pub adaptor: AdaptorKind,
    pub include_cls: bool,
    pub normalize: TargetNorm,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            mode: AlignMode::Dynamic,
            top_k: 3,
            adaptor: AdaptorKind::Linear,
            include_cls: false,
            normalize: TargetNorm::LayerNorm,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self, student_depth: usize, teacher_depth: usize) -> Result<()> {
        let max = student_depth.min(teacher_depth);
        if self.top_k == 0 || self.top_k > max {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={max} (student depth {student_depth}, teacher depth {teacher_depth})",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Per-block projection from student to teacher width.
#[derive(Clone, Debug)]
pub enum Adaptor<T> {
    Linear(Linear<T>),
    /// Two linear layers with a GELU between, hidden width = student width.
    Mlp(Linear<T>, Linear<T>),
}

impl<T: Scalar> Adaptor<T> {
    pub fn new(kind: AdaptorKind, d_student: usize, d_teacher: usize, rng: &mut Rng) -> Self {
        match kind {
            AdaptorKind::Linear => Adaptor::Linear(Linear::new(d_student, d_teacher, rng)),
            AdaptorKind::Mlp => Adaptor::Mlp(
                Linear::new(d_student, d_student, rng),
                Linear::new(d_student, d_teacher, rng),
            ),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Adaptor::Linear(l) => l.out_dim(),
            Adaptor::Mlp(_, l) => l.out_dim(),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        match self {
            Adaptor::Linear(l) => l.forward(g, x),
            Adaptor::Mlp(a, b) => {
                let h = a.forward(g, x)?;
                let h = g.gelu(h);
                b.forward(g, h)
            }
        }
    }

    fn cast<U: Scalar>(&self) -> Adaptor<U> {
        match self {
            Adaptor::Linear(l) => Adaptor::Linear(l.cast()),
            Adaptor::Mlp(a, b) => Adaptor::Mlp(a.cast(), b.cast()),
        }
    }
}

impl<T> Parameters<T> for Adaptor<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        match self {
            Adaptor::Linear(l) => l.params(),
            Adaptor::Mlp(a, b) => {
                let mut v: Vec<_> = a.params().into_iter().map(|(n, p)| (format!("0.{n}"), p)).collect();
                v.extend(b.params().into_iter().map(|(n, p)| (format!("1.{n}"), p)));
                v
            }
        }
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        match self {
            Adaptor::Linear(l) => l.params_mut(),
            Adaptor::Mlp(a, b) => {
                let mut v: Vec<_> = a.params_mut().into_iter().map(|(n, p)| (format!("0.{n}"), p)).collect();
                v.extend(b.params_mut().into_iter().map(|(n, p)| (format!("1.{n}"), p)));
                v
            }
        }
    }
}

/// Adaptors for every student block plus the mixing matrix.
#[derive(Clone, Debug)]
pub struct AlignmentHead<T> {
    pub config: AlignmentConfig,
    pub adaptors: Vec<Adaptor<T>>,
    /// `S×K`, present in dynamic mode only.
    pub mixing: Option<Param<T>>,
}

/// One-hot `S×K` pattern with `w_ij = 1` iff `i = S − K + j`.
pub fn layerwise_pattern<T: Scalar>(s: usize, k: usize) -> Tensor<T> {
    Tensor::from_fn(&[s, k], |flat| {
        let (i, j) = (flat / k, flat % k);
        if i == s - k + j {
            T::one()
        } else {
            T::zero()
        }
    })
}

impl<T: Scalar> AlignmentHead<T> {
    pub fn new(
        config: AlignmentConfig,
        student_depth: usize,
        teacher_depth: usize,
        d_student: usize,
        d_teacher: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate(student_depth, teacher_depth)?;
        let adaptors = (0..student_depth)
            .map(|_| Adaptor::new(config.adaptor, d_student, d_teacher, rng))
            .collect();
        let mixing = match config.mode {
            AlignMode::Dynamic => Some(Param::new(layerwise_pattern(student_depth, config.top_k), false)),
            AlignMode::Layerwise => None,
        };
        Ok(AlignmentHead {
            config,
            adaptors,
            mixing,
        })
    }

    pub fn student_depth(&self) -> usize {
        self.adaptors.len()
    }

    /// Predictions `ŷ_1..ŷ_K` from the student's per-block outputs. The
    /// `[CLS]` row (row 0) is dropped unless `include_cls` is set.
    pub fn adapt_and_mix<'a>(&'a self, g: &mut Graph<'a, T>, per_block: &[Var]) -> Result<Vec<Var>> {
        let s = self.adaptors.len();
        if per_block.len() != s {
            return Err(Error::Contract(format!(
                "{} student feature maps for {s} adaptors",
                per_block.len()
            )));
        }
        let rows = g.value(per_block[0]).dims2().0;
        if per_block.iter().any(|&v| g.value(v).dims2().0 != rows) {
            return Err(Error::Contract("student feature maps differ in token count".into()));
        }
        let k = self.config.top_k;
        let select = |g: &mut Graph<'a, T>, x: Var| -> Result<Var> {
            if self.config.include_cls {
                Ok(x)
            } else {
                let idx: Vec<usize> = (1..rows).collect();
                g.gather_rows(x, &idx)
            }
        };
        match (&self.mixing, self.config.mode) {
            (Some(w), AlignMode::Dynamic) => {
                let w = g.param(w);
                let mut adapted = Vec::with_capacity(s);
                for (a, &x) in self.adaptors.iter().zip(per_block) {
                    let x = select(g, x)?;
                    adapted.push(a.forward(g, x)?);
                }
                (0..k)
                    .map(|j| {
                        let mut acc = g.scale_by(adapted[0], w, j)?;
                        for (i, &ai) in adapted.iter().enumerate().skip(1) {
                            let term = g.scale_by(ai, w, i * k + j)?;
                            acc = g.add(acc, term)?;
                        }
                        Ok(acc)
                    })
                    .collect()
            }
            _ => (0..k)
                .map(|j| {
                    let i = s - k + j;
                    let x = select(g, per_block[i])?;
                    self.adaptors[i].forward(g, x)
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AlignmentHead<U> {
        AlignmentHead {
            config: self.config.clone(),
            adaptors: self.adaptors.iter().map(|a| a.cast()).collect(),
            mixing: self.mixing.as_ref().map(|m| m.cast()),
        }
    }
}

impl<T> Parameters<T> for AlignmentHead<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, a) in self.adaptors.iter().enumerate() {
            out.extend(a.params().into_iter().map(|(n, p)| (format!("adaptors.{i}.{n}"), p)));
        }
        if let Some(w) = &self.mixing {
            out.push(("mixing".into(), w));
        }
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, a) in self.adaptors.iter_mut().enumerate() {
            out.extend(a.params_mut().into_iter().map(|(n, p)| (format!("adaptors.{i}.{n}"), p)));
        }
        if let Some(w) = &mut self.mixing {
            out.push(("mixing".into(), w));
        }
        out
    }
}

/// Normalised teacher targets for one image, one map per level.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet<T> {
    pub levels: Vec<Tensor<T>>,
}

/// Teacher rows matching the student's token order: `[CLS]` (optional)
/// followed by the visible patches in ascending order.
pub fn target_rows(plan: &MaskPlan, include_cls: bool) -> Vec<usize> {
    let mut rows = Vec::with_capacity(plan.visible.len() + 1);
    if include_cls {
        rows.push(0);
    }
    rows.extend(plan.visible.iter().map(|&i| i + 1));
    rows
}

fn layernorm_rows<T: Scalar>(x: &mut Tensor<T>) {
    let (_, d) = x.dims2();
    let n = T::from_usize(d).unwrap();
    let eps = T::lit(LN_EPS);
    for row in x.data_mut().chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * r);
    }
}

fn batchnorm_columns<T: Scalar>(maps: &mut [Tensor<T>]) {
    let d = maps[0].dims2().1;
    let count: usize = maps.iter().map(|m| m.dims2().0).sum();
    let n = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); d];
    for m in maps.iter() {
        for row in m.data().chunks(d) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / n);
    let mut var = vec![T::zero(); d];
    for m in maps.iter() {
        for row in m.data().chunks(d) {
            for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc = *acc + (v - mu) * (v - mu);
            }
        }
    }
    let eps = T::lit(LN_EPS);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v / n + eps).sqrt()).collect();
    for m in maps.iter_mut() {
        for row in m.data_mut().chunks_mut(d) {
            for ((v, &mu), &r) in row.iter_mut().zip(&mean).zip(&rstd) {
                *v = (*v - mu) * r;
            }
        }
    }
}

/// Build targets for a batch of images from the teacher's intact-image
/// features. Levels are the last `K` teacher blocks. Batch normalisation
/// pools statistics over every gathered token of every image in the batch.
pub fn normalize_targets<T: Scalar>(
    batch: &[(&EncoderOutput<T>, &MaskPlan)],
    config: &AlignmentConfig,
) -> Result<Vec<TargetSet<T>>> {
    let k = config.top_k;
    let mut sets = Vec::with_capacity(batch.len());
    for (teacher, plan) in batch {
        let t = teacher.per_block.len();
        if k == 0 || k > t {
            return Err(Error::Config(format!("top_k {k} exceeds teacher depth {t}")));
        }
        let rows = target_rows(plan, config.include_cls);
        let mut levels = Vec::with_capacity(k);
        for level in &teacher.per_block[t - k..] {
            if level.dims2().0 != plan.n_total + 1 {
                return Err(Error::Contract(format!(
                    "teacher map {:?} is not over {} + 1 tokens",
                    level.shape(),
                    plan.n_total
                )));
            }
            let mut y = level.gather_rows(&rows)?;
            if config.normalize == TargetNorm::LayerNorm {
                layernorm_rows(&mut y);
            }
            levels.push(y);
        }
        sets.push(TargetSet { levels });
    }
    if config.normalize == TargetNorm::BatchNorm && !sets.is_empty() {
        for j in 0..k {
            let mut maps: Vec<Tensor<T>> = sets.iter_mut().map(|s| std::mem::replace(&mut s.levels[j], Tensor::zeros(&[1]))).collect();
            batchnorm_columns(&mut maps);
            for (s, m) in sets.iter_mut().zip(maps) {
                s.levels[j] = m;
            }
        }
    }
    Ok(sets)
}

/// Mean smooth-L1 over all elements of all levels.
pub fn alignment_loss<T: Scalar>(g: &mut Graph<'_, T>, predictions: &[Var], targets: &TargetSet<T>) -> Result<Var> {
    if predictions.len() != targets.levels.len() || predictions.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} target levels",
            predictions.len(),
            targets.levels.len()
        )));
    }
    let total: usize = targets.levels.iter().map(|t| t.numel()).sum();
    let scale = T::one() / T::from_usize(total).unwrap();
    let mut loss: Option<Var> = None;
    for (&p, t) in predictions.iter().zip(&targets.levels) {
        let term = g.smooth_l1(p, t.clone(), scale)?;
        loss = Some(match loss {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(loss.unwrap())
}

/// Loss for one image from precomputed targets.
pub fn maskalign_loss<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    student: &EncoderVars<T>,
    targets: &TargetSet<T>,
    head: &'a AlignmentHead<T>,
) -> Result<Var> {
    let predictions = head.adapt_and_mix(g, &student.per_block)?;
    alignment_loss(g, &predictions, targets)
}

/// Adapt, normalise targets for this single image and compute the loss.
pub fn maskalign_step<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    student: &EncoderVars<T>,
    teacher: &EncoderOutput<T>,
    plan: &MaskPlan,
    head: &'a AlignmentHead<T>,
) -> Result<Var> {
    let rows = g.value(student.per_block[0]).dims2().0;
    if rows != plan.num_visible() + 1 {
        return Err(Error::Contract(format!(
            "student ran on {} tokens, plan has {} visible patches",
            rows,
            plan.num_visible()
        )));
    }
    let targets = normalize_targets(&[(teacher, plan)], &head.config)?;
    maskalign_loss(g, student, &targets[0], head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn identity_linear(d: usize) -> Linear<f64> {
        let mut l = Linear::zeros(d, d);
        l.weight.value = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        l
    }

    fn identity_head(s: usize, k: usize, d: usize, w: Vec<f64>) -> AlignmentHead<f64> {
        AlignmentHead {
            config: AlignmentConfig {
                top_k: k,
                include_cls: true,
                ..AlignmentConfig::default()
            },
            adaptors: (0..s).map(|_| Adaptor::Linear(identity_linear(d))).collect(),
            mixing: Some(Param::new(Tensor::new(vec![s, k], w).unwrap(), false)),
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn one_hot_mixing_selects_block() {
        let mut rng = Rng::seed_from_u64(0);
        let x1 = rand_tensor(&[3, 4], &mut rng);
        let x2 = rand_tensor(&[3, 4], &mut rng);
        let head = identity_head(2, 1, 4, vec![0.0, 1.0]);
        let mut g = Graph::new();
        let (a, b) = (g.constant(x1), g.constant(x2.clone()));
        let y = head.adapt_and_mix(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(y[0]), &x2);
    }

    #[test]
    fn convex_mix_of_equal_inputs() {
        let mut rng = Rng::seed_from_u64(1);
        let x = rand_tensor(&[3, 4], &mut rng);
        let head = identity_head(2, 1, 4, vec![0.5, 0.5]);
        let mut g = Graph::new();
        let (a, b) = (g.constant(x.clone()), g.constant(x.clone()));
        let y = head.adapt_and_mix(&mut g, &[a, b]).unwrap();
        for (p, q) in g.value(y[0]).data().iter().zip(x.data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn depth_mismatch_is_rejected() {
        let head = identity_head(2, 1, 4, vec![0.0, 1.0]);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(head.adapt_and_mix(&mut g, &[a]), Err(Error::Contract(_))));
    }

    #[test]
    fn top_k_bounds() {
        let mut c = AlignmentConfig::default();
        c.top_k = 7;
        assert!(c.validate(6, 6).is_err());
        c.top_k = 0;
        assert!(c.validate(6, 6).is_err());
        c.top_k = 6;
        assert!(c.validate(6, 12).is_ok());
    }

    fn teacher_out(t: usize, n: usize, d: usize, rng: &mut Rng) -> EncoderOutput<f64> {
        EncoderOutput {
            per_block: (0..t).map(|_| rand_tensor(&[n + 1, d], rng)).collect(),
            last_attention: Tensor::full(&[1, n + 1, n + 1], 1.0 / (n + 1) as f64),
            output: Tensor::zeros(&[n + 1, d]),
        }
    }

    #[test]
    fn target_normalisation_modes() {
        let plan = MaskPlan::full(1);
        let out = EncoderOutput {
            per_block: vec![Tensor::new(vec![2, 3], vec![5., 5., 5., 1., 2., 3.]).unwrap()],
            last_attention: Tensor::full(&[1, 2, 2], 0.5),
            output: Tensor::zeros(&[2, 3]),
        };
        let mut cfg = AlignmentConfig {
            top_k: 1,
            include_cls: true,
            ..AlignmentConfig::default()
        };
        let t = normalize_targets(&[(&out, &plan)], &cfg).unwrap();
        let d = t[0].levels[0].data();
        assert_eq!(&d[..3], &[0., 0., 0.]);
        for (a, b) in d[3..].iter().zip([-1.22474f64, 0.0, 1.22474]) {
            assert!((a - b).abs() < 1e-5);
        }
        cfg.normalize = TargetNorm::None;
        let t = normalize_targets(&[(&out, &plan)], &cfg).unwrap();
        assert_eq!(t[0].levels[0], out.per_block[0]);
        cfg.top_k = 2;
        assert!(matches!(normalize_targets(&[(&out, &plan)], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn batchnorm_targets_are_standardised_per_channel() {
        let mut rng = Rng::seed_from_u64(5);
        let a = teacher_out(2, 6, 4, &mut rng);
        let b = teacher_out(2, 6, 4, &mut rng);
        let plan = MaskPlan::full(6);
        let cfg = AlignmentConfig {
            top_k: 2,
            normalize: TargetNorm::BatchNorm,
            ..AlignmentConfig::default()
        };
        let sets = normalize_targets(&[(&a, &plan), (&b, &plan)], &cfg).unwrap();
        for j in 0..2 {
            for c in 0..4 {
                let col: Vec<f64> = sets
                    .iter()
                    .flat_map(|s| s.levels[j].data().chunks(4).map(move |r| r[c]))
                    .collect();
                let m = col.iter().sum::<f64>() / col.len() as f64;
                let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
                assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn loss_reference_values() {
        for (d, want) in [(0.0, 0.0), (1.0, 0.5), (2.0, 1.5), (0.5, 0.125)] {
            let mut g = Graph::new();
            let p = g.constant(Tensor::scalar(d));
            let l = alignment_loss(&mut g, &[p], &TargetSet { levels: vec![Tensor::scalar(0.0)] }).unwrap();
            assert_eq!(g.value(l).data()[0], want);
        }
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::zeros(&[2, 2]));
        let bad = TargetSet { levels: vec![Tensor::zeros(&[2, 3])] };
        assert!(alignment_loss(&mut g, &[p], &bad).is_err());
    }

    #[test]
    fn zero_adaptors_ignore_mixing_scale() {
        let mut rng = Rng::seed_from_u64(8);
        let teacher = teacher_out(2, 4, 4, &mut rng);
        let plan = MaskPlan::full(4);
        let mut head = identity_head(2, 2, 4, vec![0.3, -0.7, 1.1, 0.2]);
        for a in &mut head.adaptors {
            *a = Adaptor::Linear(Linear::zeros(4, 4));
        }
        let xs: Vec<Tensor<f64>> = (0..2).map(|_| rand_tensor(&[5, 4], &mut rng)).collect();
        let loss = |head: &AlignmentHead<f64>| {
            let mut g = Graph::new();
            let vars = EncoderVars {
                per_block: xs.iter().map(|x| g.constant(x.clone())).collect(),
                last_attention: None,
                output: g.constant(Tensor::zeros(&[1])),
            };
            let l = maskalign_step(&mut g, &vars, &teacher, &plan, head).unwrap();
            g.value(l).data()[0]
        };
        let before = loss(&head);
        let w = head.mixing.as_mut().unwrap();
        w.value = w.value.map(|v| 2.0 * v);
        assert_eq!(before, loss(&head));
        assert!(before > 0.0);
    }
}
