use std::borrow::Cow;
use std::collections::HashMap;

use super::{axis_geometry, gemm_into, Param, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    ScaleBy {
        x: Var,
        s: Var,
        idx: usize,
    },
    Softmax {
        x: Var,
        geom: (usize, usize, usize),
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        geom: (usize, usize, usize),
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SmoothL1 {
        pred: Var,
        target: Tensor<T>,
        scale: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order of the computation; [`Graph::backward`] walks it once
/// in reverse.
///
/// Parameters are borrowed for the lifetime of the graph, so many graphs can
/// read the same weights concurrently without copying them.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    bound: HashMap<usize, Var>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Owned leaf, differentiable if `requires_grad`.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn borrow(&mut self, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a parameter as a leaf. Binding the same parameter twice returns
    /// the same variable, so gradients from every use accumulate in one place.
    pub fn param(&mut self, p: &'a Param<T>) -> Var {
        let key = p as *const Param<T> as usize;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            op: Op::Leaf,
            requires_grad: p.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(key, v);
        v
    }

    /// Variable a parameter was bound to, if any.
    pub fn param_var(&self, p: &Param<T>) -> Option<Var> {
        self.bound.get(&(p as *const Param<T> as usize)).copied()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(t.dims2())
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (br, bc) = self.matrix("matmul", b)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            n,
            trans_b,
            &mut out,
            T::zero(),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a vector along the trailing axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap();
        if tb.numel() != d {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// `x * s[idx]`, differentiable in both `x` and the selected entry of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let n = self.value(s).numel();
        if idx >= n {
            return Err(Error::Index { index: idx, len: n });
        }
        let c = self.value(s).data()[idx];
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy { x, s, idx }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let geom = axis_geometry(tx.shape(), axis)?;
        let (outer, len, inner) = geom;
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(src[at(k)]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, geom }, rg))
    }

    /// Normalise each slice along `axis` to zero mean and unit variance, then
    /// optionally apply a per-position scale and bias of the axis length.
    pub fn layernorm(
        &mut self,
        x: Var,
        axis: usize,
        eps: f64,
        affine: Option<(Var, Var)>,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let tx = self.value(x);
        let geom = axis_geometry(tx.shape(), axis)?;
        let (outer, len, inner) = geom;
        if let Some((g, b)) = affine {
            for p in [g, b] {
                if self.value(p).numel() != len {
                    return Err(Error::Dimension {
                        op: "layernorm",
                        lhs: tx.shape().to_vec(),
                        rhs: self.value(p).shape().to_vec(),
                    });
                }
            }
        }
        let eps = T::lit(eps);
        let n = T::from_usize(len).unwrap();
        let src = tx.data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mean = (0..len).map(|k| src[at(k)]).sum::<T>() / n;
                let var = (0..len)
                    .map(|k| {
                        let d = src[at(k)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for k in 0..len {
                    xhat[at(k)] = (src[at(k)] - mean) * r;
                }
            }
        }
        let mut out = xhat.clone();
        if let Some((g, b)) = affine {
            let (gd, bd) = (self.value(g).data(), self.value(b).data());
            for (j, y) in out.iter_mut().enumerate() {
                let k = (j / inner) % len;
                *y = *y * gd[k] + bd[k];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let (gamma, beta) = match affine {
            Some((g, b)) => (Some(g), Some(b)),
            None => (None, None),
        };
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                geom,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_value);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.matrix("gather_rows", x)?;
        let out = self.value(x).gather_rows(idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let d = self.matrix("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != d {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, d], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                index: start + len,
                len: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, rg))
    }

    /// Place matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let r = self.matrix("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix("concat_cols", p)?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::from_usize(t.numel()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column means of a matrix, as a `1×d` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix("mean_rows", x)?;
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(r).unwrap();
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + src[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), rg))
    }

    /// `scale · Σ smooth_l1(pred − target)` with unit transition point.
    /// The target is a constant and receives no gradient.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor<T>, scale: T) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(Error::Dimension {
                op: "smooth_l1",
                lhs: tp.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let s = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| smooth_l1_value(p - t))
            .sum::<T>()
            * scale;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(s), Op::SmoothL1 { pred, target, scale }, rg))
    }

    /// Mean softmax cross-entropy of `logits: B×C` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index { index: label, len: c });
            }
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            loss = loss + (log_z - row[label]);
        }
        loss = loss / T::from_usize(b).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let tl = self.value(loss);
        if tl.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                tl.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(tl.shape().to_vec(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'a, T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = dy.data();
        let shaped = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape().to_vec(), data).unwrap();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2();
                let n = node.value.dims2().1;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    // dA = dY · op(B)ᵀ
                    let mut da = vec![T::zero(); m * k];
                    gemm_into(g, m, n, false, bd, k, !*trans_b, &mut da, T::zero());
                    self.accumulate(grads, *a, shaped(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // B is n×k: dB = dYᵀ · A
                        gemm_into(g, n, m, true, ad, k, false, &mut db, T::zero());
                    } else {
                        // dB = Aᵀ · dY
                        gemm_into(ad, k, m, true, g, n, false, &mut db, T::zero());
                    }
                    self.accumulate(grads, *b, shaped(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = g.iter().zip(bd).map(|(&u, &w)| u * w).collect();
                    self.accumulate(grads, *a, shaped(*a, d));
                }
                if self.wants(*b) {
                    let d = g.iter().zip(ad).map(|(&u, &w)| u * w).collect();
                    self.accumulate(grads, *b, shaped(*b, d));
                }
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, dy.clone());
                if self.wants(*bias) {
                    let d = self.value(*bias).numel();
                    let mut db = vec![T::zero(); d];
                    for (i, &v) in g.iter().enumerate() {
                        db[i % d] = db[i % d] + v;
                    }
                    self.accumulate(grads, *bias, shaped(*bias, db));
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, dy.map(|v| v * *c)),
            Op::ScaleBy { x, s, idx } => {
                let tx = self.value(*x);
                if self.wants(*x) {
                    let c = self.value(*s).data()[*idx];
                    self.accumulate(grads, *x, dy.map(|v| v * c));
                }
                if self.wants(*s) {
                    let mut ds = vec![T::zero(); self.value(*s).numel()];
                    ds[*idx] = g.iter().zip(tx.data()).map(|(&u, &w)| u * w).sum();
                    self.accumulate(grads, *s, shaped(*s, ds));
                }
            }
            Op::Softmax { x, geom } => {
                let (outer, len, inner) = *geom;
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                geom,
                xhat,
                rstd,
            } => {
                let (outer, len, inner) = *geom;
                let n = T::from_usize(len).unwrap();
                if let Some(b) = beta {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); len];
                        for (j, &v) in g.iter().enumerate() {
                            let k = (j / inner) % len;
                            db[k] = db[k] + v;
                        }
                        self.accumulate(grads, *b, shaped(*b, db));
                    }
                }
                let dxhat: Vec<T> = match gamma {
                    Some(gm) => {
                        let gd = self.value(*gm).data();
                        if self.wants(*gm) {
                            let mut dg = vec![T::zero(); len];
                            for (j, (&v, &h)) in g.iter().zip(xhat).enumerate() {
                                let k = (j / inner) % len;
                                dg[k] = dg[k] + v * h;
                            }
                            self.accumulate(grads, *gm, shaped(*gm, dg));
                        }
                        g.iter()
                            .enumerate()
                            .map(|(j, &v)| v * gd[(j / inner) % len])
                            .collect()
                    }
                    None => g.to_vec(),
                };
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let mean_d = (0..len).map(|k| dxhat[at(k)]).sum::<T>() / n;
                            let mean_dh = (0..len).map(|k| dxhat[at(k)] * xhat[at(k)]).sum::<T>() / n;
                            let r = rstd[o * inner + i];
                            for k in 0..len {
                                dx[at(k)] = r * (dxhat[at(k)] - mean_d - xhat[at(k)] * mean_dh);
                            }
                        }
                    }
                    self.accumulate(grads, *x, shaped(*x, dx));
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                let dx = g.iter().zip(xd).map(|(&u, &v)| u * gelu_grad(v)).collect();
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::GatherRows { x, idx } => {
                let (n, d) = self.value(*x).dims2();
                let mut dx = vec![T::zero(); n * d];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[src * d + c] = dx[src * d + c] + g[r * d + c];
                    }
                }
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        self.accumulate(grads, p, shaped(p, g[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2();
                let w = node.value.dims2().1;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, shaped(p, dp));
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let t = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(t.shape(), g[0]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let v = g[0] / T::from_usize(t.numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(t.shape(), v));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).dims2();
                let inv = T::one() / T::from_usize(r).unwrap();
                let dx = (0..r * c).map(|j| g[j % c] * inv).collect();
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::SmoothL1 { pred, target, scale } => {
                let pd = self.value(*pred).data();
                let c = g[0] * *scale;
                let dx = pd
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| c * smooth_l1_grad(p - t))
                    .collect();
                self.accumulate(grads, *pred, shaped(*pred, dx));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).dims2().1;
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    dx[r * c + label] = dx[r * c + label] - scale;
                }
                self.accumulate(grads, *logits, shaped(*logits, dx));
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_value<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// `½d²` for `|d| ≤ 1`, else `|d| − ½`.
pub fn smooth_l1_value<T: Scalar>(d: T) -> T {
    let half = T::lit(0.5);
    if d.abs() <= T::one() {
        half * d * d
    } else {
        d.abs() - half
    }
}

/// Derivative of [`smooth_l1_value`]: `d` inside the unit band, `sign(d)` outside.
pub fn smooth_l1_grad<T: Scalar>(d: T) -> T {
    if d.abs() <= T::one() {
        d
    } else {
        d.signum()
    }
}
