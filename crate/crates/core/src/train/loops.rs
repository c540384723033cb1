//! Teacher training, alignment pretraining, linear probing and fine-tuning.
//!
//! Every loop builds one tape per image. Images in a batch are processed in
//! parallel and their gradients summed in batch order, so results do not
//! depend on the number of worker threads.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;

use crate::alignment::{maskalign_loss, normalize_targets, AlignmentConfig, AlignmentHead};
use crate::checkpoint::{store_params, store_vit, Checkpoint, FrozenTeacher};
use crate::error::{Error, Result};
use crate::masking::{make_mask, MaskKind, MaskPlan};
use crate::par::{self, ExecMode};
use crate::tensor::{Gradients, Graph, Param, Parameters, Tensor, Var};
use crate::train::data::{augment, Dataset, NUM_CLASSES};
use crate::train::optim::{cosine_lr, layer_id_for, layerwise_lr_scale, AdamW};
use crate::vit::{EncoderVars, Linear, ViTConfig, VisionTransformer};
use crate::Rng;

const ADAM_EPS: f64 = 1e-8;
/// Mask ratio the equal-compute protocol is normalised to.
pub const REFERENCE_MASK_RATIO: f64 = 0.7;

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const PURPOSE_AUGMENT: u64 = 0;
const PURPOSE_MASK: u64 = 1;
const PURPOSE_DROP: u64 = 2;

/// Generator for one purpose: streams 0 and 1 are model init and batch
/// order, per-image streams follow.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_rng(seed: u64, sample: u64, purpose: u64) -> Rng {
    stream_rng(seed, 16 + sample * 4 + purpose)
}

/// Feature fed to a classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pool {
    /// Final-norm `[CLS]` row.
    #[default]
    Cls,
    /// Mean of the final-norm patch rows.
    Mean,
}

impl std::str::FromStr for Pool {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Pool::Cls),
            "mean" => Ok(Pool::Mean),
            _ => Err(Error::Config(format!("unknown pool '{s}' (expected cls or mean)"))),
        }
    }
}

impl std::fmt::Display for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pool::Cls => "cls",
            Pool::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub mask_ratio: f64,
    pub mask_kind: MaskKind,
    pub alignment: AlignmentConfig,
    pub drop_path_rate: f64,
    pub seed: u64,
    /// Fine-tuning only.
    pub layer_decay: f64,
    /// Scale the step count by `(1 − 0.7)/(1 − r)`.
    pub equal_compute: bool,
    pub pool: Pool,
    pub augment: bool,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    /// Pretraining defaults.
    fn default() -> Self {
        TrainConfig {
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 128,
            epochs: 20,
            warmup_fraction: 0.1,
            mask_ratio: 0.7,
            mask_kind: MaskKind::AttentiveTopK,
            alignment: AlignmentConfig::default(),
            drop_path_rate: 0.1,
            seed: 0,
            layer_decay: 1.0,
            equal_compute: false,
            pool: Pool::Cls,
            augment: true,
            exec: ExecMode::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self::default()
    }

    /// Supervised teacher training.
    pub fn teacher() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            beta2: 0.999,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            beta2: 0.999,
            epochs: 30,
            warmup_fraction: 0.05,
            drop_path_rate: 0.2,
            layer_decay: 0.6,
            ..Self::default()
        }
    }

    /// Linear probe on frozen features.
    pub fn probe() -> Self {
        TrainConfig {
            base_lr: 3e-3,
            weight_decay: 0.0,
            beta2: 0.999,
            batch_size: 256,
            epochs: 100,
            warmup_fraction: 0.0,
            augment: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 || self.layer_decay <= 0.0 {
            return Err(Error::Config("learning rate, weight decay and layer decay must be non-negative".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW<f32> {
        AdamW::new(self.beta1, self.beta2, ADAM_EPS, self.weight_decay)
    }
}

/// Optimiser steps for a run. With `equal_compute` the count is scaled so
/// that every mask ratio sees the same number of student tokens as the
/// reference ratio.
pub fn planned_steps(epochs: usize, steps_per_epoch: usize, mask_ratio: f64, equal_compute: bool) -> usize {
    let base = (epochs * steps_per_epoch) as f64;
    if equal_compute {
        (base * (1.0 - REFERENCE_MASK_RATIO) / (1.0 - mask_ratio)).round().max(1.0) as usize
    } else {
        (base as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Write `step,lr,loss` rows under a header line.
pub fn write_loss_trace(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for p in trace {
        out.push_str(&format!("{},{:e},{}\n", p.step, p.lr, p.loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

type GradList = Vec<Option<Tensor<f32>>>;

fn collect_grads(g: &Graph<'_, f32>, grads: &Gradients<f32>, params: &[&Param<f32>]) -> GradList {
    params
        .iter()
        .map(|p| g.param_var(p).and_then(|v| grads.get(v).cloned()))
        .collect()
}

/// Sum per-image gradient lists in order.
fn reduce_grads(lists: Vec<GradList>) -> GradList {
    let mut iter = lists.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for list in iter {
        for (a, g) in acc.iter_mut().zip(list) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    acc
}

fn apply_grads(params: &mut [&mut Param<f32>], grads: GradList) {
    for (p, g) in params.iter_mut().zip(grads) {
        p.zero_grad();
        if let Some(g) = g {
            p.accumulate_grad(&g);
        }
    }
}

fn guard_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, value: loss })
    }
}

fn pool_rows(output: &Tensor<f32>, pool: Pool) -> Tensor<f32> {
    let (n, d) = output.dims2();
    match pool {
        Pool::Cls => Tensor::new(vec![1, d], output.row(0).to_vec()).unwrap(),
        Pool::Mean => {
            let mut acc = vec![0.0f32; d];
            for i in 1..n {
                for (a, &v) in acc.iter_mut().zip(output.row(i)) {
                    *a += v;
                }
            }
            let inv = 1.0 / (n - 1).max(1) as f32;
            Tensor::new(vec![1, d], acc.into_iter().map(|v| v * inv).collect()).unwrap()
        }
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Encoder plus a linear classifier on pooled final features.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub encoder: VisionTransformer<f32>,
    pub head: Linear<f32>,
    pub pool: Pool,
}

impl Classifier {
    pub fn new(encoder: VisionTransformer<f32>, pool: Pool, rng: &mut Rng) -> Self {
        let head = Linear::new(encoder.embed_dim(), NUM_CLASSES, rng);
        Classifier { encoder, head, pool }
    }

    /// Logits `1×C` on the tape. `rng` selects train mode.
    pub fn logits<'a>(&'a self, g: &mut Graph<'a, f32>, image: &Tensor<f32>, rng: Option<&mut Rng>) -> Result<Var> {
        let vars = self.encoder.forward_image(g, image, None, rng)?;
        let pooled = match self.pool {
            Pool::Cls => g.gather_rows(vars.output, &[0])?,
            Pool::Mean => {
                let n = g.value(vars.output).dims2().0;
                let rows: Vec<usize> = (1..n).collect();
                let patches = g.gather_rows(vars.output, &rows)?;
                g.mean_rows(patches)?
            }
        };
        self.head.forward(g, pooled)
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<usize> {
        let out = self.encoder.infer(image, None)?;
        let feat = pool_rows(&out.output, self.pool);
        let mut logits = feat.matmul(&self.head.weight.value)?;
        for (l, &b) in logits.data_mut().iter_mut().zip(self.head.bias.value.data()) {
            *l += b;
        }
        Ok(argmax(logits.data()))
    }

    /// Top-1 accuracy in eval mode.
    pub fn accuracy(&self, data: &Dataset, mode: ExecMode) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let preds = par::map(mode, &data.images, |_, img| self.predict(img));
        let mut correct = 0usize;
        for (p, &label) in preds.into_iter().zip(&data.labels) {
            correct += usize::from(p? == label);
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Encoder under `encoder.` and head under `head.`.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        store_vit(&mut ckpt, "encoder.", &self.encoder)?;
        store_params(&mut ckpt, "head.", &self.head)?;
        Ok(ckpt)
    }
}

impl Parameters<f32> for Classifier {
    fn params(&self) -> Vec<(String, &Param<f32>)> {
        let mut out: Vec<_> = self
            .encoder
            .params()
            .into_iter()
            .map(|(n, p)| (format!("encoder.{n}"), p))
            .collect();
        out.extend(self.head.params().into_iter().map(|(n, p)| (format!("head.{n}"), p)));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<f32>)> {
        let mut out: Vec<_> = self
            .encoder
            .params_mut()
            .into_iter()
            .map(|(n, p)| (format!("encoder.{n}"), p))
            .collect();
        out.extend(self.head.params_mut().into_iter().map(|(n, p)| (format!("head.{n}"), p)));
        out
    }
}

/// Per-parameter learning-rate multipliers for layer-wise decay.
pub fn classifier_lr_scales(model: &Classifier, decay: f64) -> Result<Vec<(String, f64)>> {
    let depth = model.encoder.depth();
    model
        .params()
        .into_iter()
        .map(|(name, _)| {
            let id = match name.strip_prefix("encoder.") {
                Some(rest) => layer_id_for(rest, depth),
                None => depth + 1,
            };
            Ok((name, layerwise_lr_scale(id, depth, decay)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    pub model: Classifier,
    pub epochs: Vec<EpochStats>,
    pub trace: Vec<TracePoint>,
    /// Multipliers actually passed to the optimiser, by parameter name.
    pub lr_scales: Vec<(String, f64)>,
}

/// End-to-end cross-entropy training; `val` is scored after every epoch.
pub fn train_classifier(
    mut model: Classifier,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    layer_decay: Option<f64>,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let lr_scales = match layer_decay {
        Some(d) => classifier_lr_scales(&model, d)?,
        None => model.params().into_iter().map(|(n, _)| (n, 1.0)).collect(),
    };
    let scales: Vec<f64> = lr_scales.iter().map(|(_, s)| *s).collect();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = planned_steps(cfg.epochs, steps_per_epoch, cfg.mask_ratio, false);
    let mut opt = cfg.optimizer();
    let mut shuffle = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut epochs = Vec::new();
    let mut trace = Vec::with_capacity(total);
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let (mut loss_sum, mut seen, mut correct) = (0.0f64, 0usize, 0usize);
        for idx in train.batches(cfg.batch_size, &mut shuffle) {
            if step >= total {
                break;
            }
            let lr = cosine_lr(step, total, cfg.warmup_fraction, cfg.base_lr)?;
            let b = idx.len();
            let inv_b = 1.0 / b as f32;
            let first_sample = (step * cfg.batch_size) as u64;
            let m = &model;
            let results = par::map(cfg.exec, &idx, |i, &k| -> Result<(f64, bool, GradList)> {
                let sample = first_sample + i as u64;
                let image = if cfg.augment {
                    augment(&train.images[k], &mut sample_rng(cfg.seed, sample, PURPOSE_AUGMENT))
                } else {
                    train.images[k].clone()
                };
                let mut drop = sample_rng(cfg.seed, sample, PURPOSE_DROP);
                let mut g = Graph::new();
                let logits = m.logits(&mut g, &image, Some(&mut drop))?;
                let hit = argmax(g.value(logits).data()) == train.labels[k];
                let loss = g.cross_entropy(logits, &[train.labels[k]])?;
                let value = g.value(loss).data()[0] as f64;
                let scaled = g.scale(loss, inv_b);
                let grads = g.backward(scaled)?;
                let params: Vec<&Param<f32>> = m.params().into_iter().map(|(_, p)| p).collect();
                Ok((value, hit, collect_grads(&g, &grads, &params)))
            });
            let mut lists = Vec::with_capacity(b);
            let mut batch_loss = 0.0;
            for r in results {
                let (l, hit, grads) = r?;
                batch_loss += l;
                correct += usize::from(hit);
                lists.push(grads);
            }
            let batch_loss = batch_loss / b as f64;
            guard_finite(step, batch_loss)?;
            let mut params: Vec<&mut Param<f32>> = model.params_mut().into_iter().map(|(_, p)| p).collect();
            apply_grads(&mut params, reduce_grads(lists));
            opt.step(&mut params, lr, Some(&scales));
            trace.push(TracePoint { step, lr, loss: batch_loss });
            loss_sum += batch_loss * b as f64;
            seen += b;
            step += 1;
        }
        let val_accuracy = match val {
            Some(v) => Some(model.accuracy(v, cfg.exec)?),
            None => None,
        };
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            train_accuracy: Some(correct as f64 / seen as f64),
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.3}{}",
            stats.mean_loss,
            correct as f64 / seen as f64,
            val_accuracy.map_or(String::new(), |a| format!(" val acc {a:.3}"))
        );
        epochs.push(stats);
        epoch += 1;
    }
    Ok(SupervisedOutcome {
        model,
        epochs,
        trace,
        lr_scales,
    })
}

/// Supervised training of a fresh teacher encoder with a `[CLS]` head.
pub fn train_teacher(
    vit_config: ViTConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<SupervisedOutcome> {
    let vit_config = ViTConfig {
        drop_path_rate: cfg.drop_path_rate,
        ..vit_config
    };
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    let encoder = VisionTransformer::new(vit_config, &mut rng)?;
    let model = Classifier::new(encoder, Pool::Cls, &mut rng);
    train_classifier(model, train, val, cfg, None)
}

/// End-to-end fine-tuning of a pretrained encoder with layer-wise decay.
pub fn finetune(
    mut encoder: VisionTransformer<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<SupervisedOutcome> {
    encoder.config.drop_path_rate = cfg.drop_path_rate;
    encoder.set_trainable(true);
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    let model = Classifier::new(encoder, cfg.pool, &mut rng);
    train_classifier(model, train, val, cfg, Some(cfg.layer_decay))
}

/// Student and alignment head as initialised for `cfg.seed`.
pub fn init_student(
    vit_config: ViTConfig,
    teacher: &FrozenTeacher,
    cfg: &TrainConfig,
) -> Result<(VisionTransformer<f32>, AlignmentHead<f32>)> {
    let vit_config = ViTConfig {
        drop_path_rate: cfg.drop_path_rate,
        ..vit_config
    };
    let tc = teacher.config();
    if (tc.image_h, tc.image_w, tc.channels, tc.patch_size) != (vit_config.image_h, vit_config.image_w, vit_config.channels, vit_config.patch_size) {
        return Err(Error::Config("student and teacher must share image and patch geometry".into()));
    }
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    let student = VisionTransformer::new(vit_config, &mut rng)?;
    let head = AlignmentHead::new(
        cfg.alignment.clone(),
        student.depth(),
        teacher.encoder().depth(),
        student.embed_dim(),
        teacher.encoder().embed_dim(),
        &mut rng,
    )?;
    Ok((student, head))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub student: VisionTransformer<f32>,
    pub head: AlignmentHead<f32>,
    pub epochs: Vec<EpochStats>,
    pub trace: Vec<TracePoint>,
}

impl PretrainOutcome {
    /// Student encoder under `encoder.`; the alignment head is not included.
    pub fn student_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        store_vit(&mut ckpt, "encoder.", &self.student)?;
        Ok(ckpt)
    }

    pub fn head_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        store_params(&mut ckpt, "", &self.head)?;
        Ok(ckpt)
    }
}

/// Student rows must cover exactly the visible tokens plus `[CLS]`.
fn audit_student(g: &Graph<'_, f32>, vars: &EncoderVars<f32>, plan: &MaskPlan) -> Result<()> {
    let want = plan.num_visible() + 1;
    for &v in &vars.per_block {
        let rows = g.value(v).dims2().0;
        if rows != want {
            return Err(Error::Contract(format!("student block produced {rows} rows, expected {want}")));
        }
    }
    if let Some(a) = &vars.last_attention {
        if a.shape()[1] != want || a.shape()[2] != want {
            return Err(Error::Contract(format!("student attention {:?} over masked positions", a.shape())));
        }
    }
    Ok(())
}

struct StudentParams<'m> {
    student: &'m VisionTransformer<f32>,
    head: &'m AlignmentHead<f32>,
}

impl StudentParams<'_> {
    fn list(&self) -> Vec<&Param<f32>> {
        let mut out: Vec<&Param<f32>> = self.student.params().into_iter().map(|(_, p)| p).collect();
        out.extend(self.head.params().into_iter().map(|(_, p)| p));
        out
    }
}

/// Alignment pretraining of a fresh student against a frozen teacher.
pub fn pretrain(
    vit_config: ViTConfig,
    teacher: &FrozenTeacher,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    let (student, head) = init_student(vit_config, teacher, cfg)?;
    pretrain_from(student, head, teacher, data, cfg)
}

/// Alignment pretraining from the given student and head.
pub fn pretrain_from(
    mut student: VisionTransformer<f32>,
    mut head: AlignmentHead<f32>,
    teacher: &FrozenTeacher,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    cfg.alignment.validate(student.depth(), teacher.encoder().depth())?;
    let n = student.config.num_patches();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = planned_steps(cfg.epochs, steps_per_epoch, cfg.mask_ratio, cfg.equal_compute);
    let mut opt = cfg.optimizer();
    let mut shuffle = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut epochs = Vec::new();
    let mut trace = Vec::with_capacity(total);
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for idx in data.batches(cfg.batch_size, &mut shuffle) {
            if step >= total {
                break;
            }
            let lr = cosine_lr(step, total, cfg.warmup_fraction, cfg.base_lr)?;
            let b = idx.len();
            let first_sample = (step * cfg.batch_size) as u64;
            let images: Vec<Tensor<f32>> = par::map(cfg.exec, &idx, |i, &k| {
                if cfg.augment {
                    augment(&data.images[k], &mut sample_rng(cfg.seed, first_sample + i as u64, PURPOSE_AUGMENT))
                } else {
                    data.images[k].clone()
                }
            });
            // one teacher pass serves both masking and targets
            let features = teacher.forward(&images, cfg.exec)?;
            let plans = features
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let mut rng = sample_rng(cfg.seed, first_sample + i as u64, PURPOSE_MASK);
                    make_mask(cfg.mask_kind, n, cfg.mask_ratio, Some(&f.last_attention), &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<_> = features.iter().zip(&plans).collect();
            let targets = normalize_targets(&pairs, &cfg.alignment)?;
            drop(features);

            let inv_b = 1.0 / b as f32;
            let sp = StudentParams {
                student: &student,
                head: &head,
            };
            let results = par::map_range(cfg.exec, b, |i| -> Result<(f64, GradList)> {
                let mut drop_rng = sample_rng(cfg.seed, first_sample + i as u64, PURPOSE_DROP);
                let mut g = Graph::new();
                let vars = sp
                    .student
                    .forward_image(&mut g, &images[i], Some(&plans[i].visible), Some(&mut drop_rng))?;
                audit_student(&g, &vars, &plans[i])?;
                let loss = maskalign_loss(&mut g, &vars, &targets[i], sp.head)?;
                let value = g.value(loss).data()[0] as f64;
                let scaled = g.scale(loss, inv_b);
                let grads = g.backward(scaled)?;
                Ok((value, collect_grads(&g, &grads, &sp.list())))
            });
            let mut lists = Vec::with_capacity(b);
            let mut batch_loss = 0.0;
            for r in results {
                let (l, grads) = r?;
                batch_loss += l;
                lists.push(grads);
            }
            let batch_loss = batch_loss / b as f64;
            guard_finite(step, batch_loss)?;
            let mut params: Vec<&mut Param<f32>> = student.params_mut().into_iter().map(|(_, p)| p).collect();
            params.extend(head.params_mut().into_iter().map(|(_, p)| p));
            apply_grads(&mut params, reduce_grads(lists));
            opt.step(&mut params, lr, None);
            trace.push(TracePoint { step, lr, loss: batch_loss });
            loss_sum += batch_loss * b as f64;
            seen += b;
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            train_accuracy: None,
            val_accuracy: None,
        };
        log::info!("pretrain epoch {epoch}: loss {:.5}", stats.mean_loss);
        epochs.push(stats);
        epoch += 1;
    }
    Ok(PretrainOutcome {
        student,
        head,
        epochs,
        trace,
    })
}

/// Pooled final-norm features of every image, one row each.
pub fn extract_features(encoder: &VisionTransformer<f32>, data: &Dataset, pool: Pool, mode: ExecMode) -> Result<Tensor<f32>> {
    let rows = par::map(mode, &data.images, |_, img| -> Result<Vec<f32>> {
        let out = encoder.infer(img, None)?;
        Ok(pool_rows(&out.output, pool).into_data())
    });
    let d = encoder.embed_dim();
    let mut flat = Vec::with_capacity(data.len() * d);
    for r in rows {
        flat.extend(r?);
    }
    Tensor::new(vec![data.len(), d], flat)
}

/// Per-column mean and standard deviation.
fn column_stats(x: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    let (n, d) = x.dims2();
    let mut mean = vec![0.0f64; d];
    for row in x.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; d];
    for row in x.data().chunks(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var.iter().map(|s| ((s / n as f64).sqrt() + 1e-6) as f32).collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

fn standardize(x: &mut Tensor<f32>, mean: &[f32], std: &[f32]) {
    let d = mean.len();
    for row in x.data_mut().chunks_mut(d) {
        for ((v, &m), &s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs: Vec<EpochStats>,
}

fn linear_accuracy(head: &Linear<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let logits = x.matmul(&head.weight.value)?;
    let c = head.out_dim();
    let bias = head.bias.value.data();
    let mut correct = 0;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let shifted: Vec<f32> = row.iter().zip(bias).map(|(a, b)| a + b).collect();
        correct += usize::from(argmax(&shifted) == label);
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Train a linear classifier on standardised frozen features.
pub fn linear_probe(encoder: &VisionTransformer<f32>, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut xtr = extract_features(encoder, train, cfg.pool, cfg.exec)?;
    let mut xte = extract_features(encoder, test, cfg.pool, cfg.exec)?;
    let (mean, std) = column_stats(&xtr);
    standardize(&mut xtr, &mean, &std);
    standardize(&mut xte, &mean, &std);

    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut head = Linear::new(encoder.embed_dim(), NUM_CLASSES, &mut rng);
    let mut opt = cfg.optimizer();
    let mut shuffle = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = planned_steps(cfg.epochs, steps_per_epoch, 0.0, false);
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in train.batches(cfg.batch_size, &mut shuffle) {
            let lr = cosine_lr(step, total, cfg.warmup_fraction, cfg.base_lr)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let grads = {
                let mut g = Graph::new();
                let x = g.constant(xtr.gather_rows(&idx)?);
                let logits = head.forward(&mut g, x)?;
                let loss = g.cross_entropy(logits, &labels)?;
                let value = g.value(loss).data()[0] as f64;
                guard_finite(step, value)?;
                loss_sum += value * idx.len() as f64;
                seen += idx.len();
                let grads = g.backward(loss)?;
                let params: Vec<&Param<f32>> = head.params().into_iter().map(|(_, p)| p).collect();
                collect_grads(&g, &grads, &params)
            };
            let mut params: Vec<&mut Param<f32>> = head.params_mut().into_iter().map(|(_, p)| p).collect();
            apply_grads(&mut params, grads);
            opt.step(&mut params, lr, None);
            step += 1;
        }
        epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            train_accuracy: None,
            val_accuracy: None,
        });
    }
    let report = ProbeReport {
        train_accuracy: linear_accuracy(&head, &xtr, &train.labels)?,
        test_accuracy: linear_accuracy(&head, &xte, &test.labels)?,
        epochs,
    };
    log::info!(
        "probe: train acc {:.3} test acc {:.3}",
        report.train_accuracy,
        report.test_accuracy
    );
    Ok(report)
}
