//! Finite-difference oracle and small fixtures shared by the test targets.
#![allow(dead_code)]

use maskalign::alignment::{AdaptorKind, AlignMode, AlignmentConfig, AlignmentHead, TargetNorm};
use maskalign::masking::MaskPlan;
use maskalign::tensor::{Graph, Parameters, Tensor, Var};
use maskalign::vit::{EncoderOutput, ViTConfig, VisionTransformer};
use maskalign::{Result, Rng};
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// `|a − n| / max(1, |a|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest relative error between tape gradients and central differences
/// for `f` at `inputs`. Non-scalar outputs are contracted with a fixed random
/// tensor so that every output element contributes a distinct upstream
/// gradient.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let probe = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Option<Tensor<f64>>, Graph<'static, f64>, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = f(&mut g, &vars).expect("op under test");
        let shape = g.value(out).shape().to_vec();
        let (loss, w) = if g.value(out).numel() == 1 {
            (out, None)
        } else {
            let w = weights.cloned().unwrap_or_else(|| randn(&shape, &mut rng(seed ^ 0x5eed)));
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv).unwrap();
            (g.sum(prod), Some(w))
        };
        (g.value(loss).data()[0], w, g, vec![loss].into_iter().chain(vars).collect())
    };
    let (_, weights, g, vars) = probe(inputs, None);
    let grads = g.backward(vars[0]).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k + 1]);
        for j in 0..input.numel() {
            let a = analytic.map_or(0.0, |t| t.data()[j]);
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let fp = probe(&plus, weights.as_ref()).0;
            let fm = probe(&minus, weights.as_ref()).0;
            worst = worst.max(rel_err(a, (fp - fm) / (2.0 * FD_STEP)));
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn case_matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[3, 4], &mut r), randn(&[4, 2], &mut r)];
    gradcheck(&ins, seed, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        Ok(g.sum(y))
    })
}

fn case_matmul_general(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[3, 4], &mut r), randn(&[4, 5], &mut r)];
    gradcheck(&ins, seed, |g, v| g.matmul(v[0], v[1]))
}

fn case_matmul_nt(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[3, 4], &mut r), randn(&[5, 4], &mut r)];
    gradcheck(&ins, seed, |g, v| g.matmul_nt(v[0], v[1]))
}

fn case_add_sub_mul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[2, 3], &mut r), randn(&[2, 3], &mut r)];
    gradcheck(&ins, seed, |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(v[0], v[1])?;
        g.mul(s, d)
    })
}

fn case_add_row(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[4, 3], &mut r), randn(&[3], &mut r)];
    gradcheck(&ins, seed, |g, v| g.add_row(v[0], v[1]))
}

fn case_scale(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[3, 2], &mut r), randn(&[2, 3], &mut r)];
    gradcheck(&ins, seed, |g, v| {
        let x = g.scale(v[0], 0.37);
        g.scale_by(x, v[1], 4)
    })
}

fn case_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[5], &mut r), randn(&[2, 3, 4], &mut r)];
    gradcheck(&ins, seed, |g, v| {
        let a = g.softmax(v[0], 0)?;
        let b = g.softmax(v[1], 1)?;
        let c = g.softmax(v[1], 2)?;
        let sa = sum_sq(g, a)?;
        let sb = sum_sq(g, b)?;
        let sc = sum_sq(g, c)?;
        let t = g.add(sa, sb)?;
        g.add(t, sc)
    })
}

fn g_sq(g: &mut Graph<'_, f64>, x: Var) -> Result<Var> {
    let w = g.constant(Tensor::from_fn(g.value(x).shape(), |i| 1.0 + 0.1 * i as f64));
    let y = g.mul(x, x)?;
    g.mul(y, w)
}

fn sum_sq(g: &mut Graph<'_, f64>, x: Var) -> Result<Var> {
    let y = g_sq(g, x)?;
    Ok(g.sum(y))
}

fn case_layernorm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[8], &mut r), randn(&[3, 8], &mut r), randn(&[8], &mut r), randn(&[8], &mut r)];
    gradcheck(&ins, seed, |g, v| {
        let a = g.layernorm(v[0], 0, 1e-6, None)?;
        let b = g.layernorm(v[1], 1, 1e-6, Some((v[2], v[3])))?;
        let sa = sum_sq(g, a)?;
        let sb = sum_sq(g, b)?;
        g.add(sa, sb)
    })
}

fn case_gelu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut x = randn(&[12], &mut r);
    x.data_mut()[0] = 0.0;
    x.data_mut()[1] = 4.5;
    gradcheck(&[x], seed, |g, v| Ok(g.gelu(v[0])))
}

fn case_rows_and_cols(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[4, 3], &mut r), randn(&[2, 3], &mut r), randn(&[4, 2], &mut r)];
    gradcheck(&ins, seed, |g, v| {
        let picked = g.gather_rows(v[0], &[3, 1, 1])?;
        let stacked = g.concat_rows(&[picked, v[1]])?;
        let sliced = g.slice_cols(v[0], 1, 2)?;
        let joined = g.concat_cols(&[sliced, v[2]])?;
        let a = sum_sq(g, stacked)?;
        let b = sum_sq(g, joined)?;
        g.add(a, b)
    })
}

fn case_reductions(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ins = [randn(&[3, 4], &mut r)];
    gradcheck(&ins, seed, |g, v| {
        let m = g.mean_rows(v[0])?;
        let m = g_sq(g, m)?;
        let a = g.sum(m);
        let sq = g_sq(g, v[0])?;
        let b = g.mean(sq);
        g.add(a, b)
    })
}

fn case_smooth_l1(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = randn(&[4, 5], &mut r).map(|v| 2.0 * v);
    let target = randn(&[4, 5], &mut r);
    gradcheck(&[x], seed, move |g, v| g.smooth_l1(v[0], target.clone(), 0.05))
}

fn case_cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = randn(&[3, 10], &mut r);
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..10)).collect();
    gradcheck(&[x], seed, move |g, v| g.cross_entropy(v[0], &labels))
}

pub const OP_CASES: &[OpCase] = &[
    OpCase { name: "matmul (sum)", run: case_matmul },
    OpCase { name: "matmul", run: case_matmul_general },
    OpCase { name: "matmul_nt", run: case_matmul_nt },
    OpCase { name: "add/sub/mul", run: case_add_sub_mul },
    OpCase { name: "add_row", run: case_add_row },
    OpCase { name: "scale/scale_by", run: case_scale },
    OpCase { name: "softmax", run: case_softmax },
    OpCase { name: "layernorm", run: case_layernorm },
    OpCase { name: "gelu", run: case_gelu },
    OpCase { name: "gather/concat/slice", run: case_rows_and_cols },
    OpCase { name: "sum/mean/mean_rows", run: case_reductions },
    OpCase { name: "smooth_l1", run: case_smooth_l1 },
    OpCase { name: "cross_entropy", run: case_cross_entropy },
];

/// Tiny 2-block student plus a dynamic head whose mixing matrix is moved off
/// its one-hot initialisation.
pub struct Composite {
    pub student: VisionTransformer<f64>,
    pub head: AlignmentHead<f64>,
    pub image: Tensor<f64>,
    pub teacher: EncoderOutput<f64>,
    pub plan: MaskPlan,
}

pub fn composite_config() -> ViTConfig {
    ViTConfig {
        image_h: 8,
        image_w: 8,
        channels: 3,
        patch_size: 2,
        embed_dim: 8,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        drop_path_rate: 0.0,
    }
}

pub fn composite(seed: u64, adaptor: AdaptorKind, include_cls: bool) -> Composite {
    let mut r = rng(seed);
    let cfg = composite_config();
    let mut student: VisionTransformer<f64> = VisionTransformer::new(cfg.clone(), &mut r).unwrap();
    // larger weights keep the test away from the near-linear regime
    for (_, p) in student.params_mut() {
        if p.value.numel() > 1 && p.decay {
            p.value = p.value.map(|v| v * 10.0);
        }
    }
    let align = AlignmentConfig {
        mode: AlignMode::Dynamic,
        top_k: 2,
        adaptor,
        include_cls,
        normalize: TargetNorm::LayerNorm,
    };
    let mut head = AlignmentHead::new(align, 2, 3, 8, 6, &mut r).unwrap();
    for (_, p) in head.params_mut() {
        let noise = randn(p.value.shape(), &mut r);
        for (v, e) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * e;
        }
    }
    let n = cfg.num_patches();
    let teacher = EncoderOutput {
        per_block: (0..3).map(|_| randn(&[n + 1, 6], &mut r)).collect(),
        last_attention: Tensor::full(&[1, n + 1, n + 1], 1.0 / (n + 1) as f64),
        output: randn(&[n + 1, 6], &mut r),
    };
    let visible = maskalign::masking::random_mask(n, 0.5, &mut r).unwrap().visible;
    Composite {
        student,
        head,
        image: randn(&[3, 8, 8], &mut r),
        teacher,
        plan: MaskPlan::with_visible(n, visible).unwrap(),
    }
}

fn composite_loss(c: &Composite) -> f64 {
    let mut g = Graph::new();
    let vars = c
        .student
        .forward_image(&mut g, &c.image, Some(&c.plan.visible), None)
        .unwrap();
    let loss = maskalign::alignment::maskalign_step(&mut g, &vars, &c.teacher, &c.plan, &c.head).unwrap();
    g.value(loss).data()[0]
}

/// Largest relative error over every student and head parameter entry.
pub fn composite_gradcheck(c: &mut Composite) -> f64 {
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars = c
            .student
            .forward_image(&mut g, &c.image, Some(&c.plan.visible), None)
            .unwrap();
        let loss = maskalign::alignment::maskalign_step(&mut g, &vars, &c.teacher, &c.plan, &c.head).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut all: Vec<&maskalign::tensor::Param<f64>> = c.student.params().into_iter().map(|(_, p)| p).collect();
        all.extend(c.head.params().into_iter().map(|(_, p)| p));
        all.iter()
            .map(|p| {
                g.param_var(p)
                    .and_then(|v| grads.get(v))
                    .map_or(vec![0.0; p.value.numel()], |t| t.data().to_vec())
            })
            .collect()
    };
    let n_student = c.student.params().len();
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let nudge = |c: &mut Composite, delta: f64| {
                let p = if k < n_student {
                    c.student.params_mut().into_iter().nth(k).unwrap().1
                } else {
                    c.head.params_mut().into_iter().nth(k - n_student).unwrap().1
                };
                p.value.data_mut()[j] += delta;
            };
            nudge(c, FD_STEP);
            let fp = composite_loss(c);
            nudge(c, -2.0 * FD_STEP);
            let fm = composite_loss(c);
            nudge(c, FD_STEP);
            worst = worst.max(rel_err(a, (fp - fm) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Indices of the `k` largest scores by repeated arg-max, ties to the lower
/// index, then sorted ascending.
pub fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| s > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out.sort_unstable();
    out
}

/// `round(N·(100 − p)/100)` with halves up, in integer arithmetic.
pub fn visible_oracle(n: usize, percent: usize) -> usize {
    (2 * n * (100 - percent) + 100) / 200
}

/// Plain-loop smooth-L1 with unit transition point.
pub fn smooth_l1_oracle(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Checkpoint of random names, shapes and raw bit patterns (NaNs included).
pub fn random_checkpoint(r: &mut Rng) -> maskalign::checkpoint::Checkpoint {
    let mut ckpt = maskalign::checkpoint::Checkpoint::new();
    for t in 0..r.random_range(0..6) {
        let ndim = r.random_range(1..=4);
        let shape: Vec<usize> = (0..ndim).map(|_| r.random_range(1..=5)).collect();
        let n = shape.iter().product();
        let data = (0..n).map(|_| f32::from_bits(r.random())).collect();
        let name_len = r.random_range(0..12);
        let name: String = (0..name_len)
            .map(|_| char::from_u32(r.random_range(0x20..0x2000)).unwrap_or('x'))
            .collect();
        ckpt.insert(format!("{t}.{name}"), Tensor::new(shape, data).unwrap()).unwrap();
    }
    ckpt
}

/// Labelled 3×32×32 images whose class sets the channel balance and the
/// stripe orientation, plus noise. Learnable but not trivial.
pub fn synthetic_dataset(n: usize, seed: u64) -> maskalign::train::Dataset {
    let mut r = rng(seed);
    let mut ds = maskalign::train::Dataset::default();
    for i in 0..n {
        let label = i % 10;
        let freq = 1.0 + (label % 5) as f32;
        let horizontal = label >= 5;
        let tint = [(label as f32 * 0.7).sin(), (label as f32 * 1.3).cos(), (label as f32 * 0.4).sin()];
        let phase: f32 = r.random_range(0.0..std::f32::consts::TAU);
        let img = Tensor::from_fn(&[3, 32, 32], |k| {
            let (c, y, x) = (k / 1024, (k / 32) % 32, k % 32);
            let t = if horizontal { y } else { x } as f32;
            let noise: f32 = r.sample(StandardNormal);
            (0.5 * (freq * t * 0.2 + phase).sin() + 0.4 * tint[c] + 0.3 * noise).clamp(-1.0, 1.0)
        });
        ds.images.push(img);
        ds.labels.push(label);
    }
    ds
}

pub fn tiny_vit() -> ViTConfig {
    ViTConfig {
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        ..ViTConfig::default()
    }
}
