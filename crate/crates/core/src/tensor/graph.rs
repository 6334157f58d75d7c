use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gemm, Broadcast};
use super::{Float, Tensor};
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    Scale { x: Var, factor: F },
    Sigmoid(Var),
    Swish(Var),
    Relu(Var),
    Dropout { x: Var, multiplier: Vec<F> },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gather {
        src: Var,
        ids: Vec<usize>,
        skip: Option<usize>,
    },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    SumAll(Var),
    SumLast(Var),
    /// Scalar-valued op whose local gradients were computed alongside its value.
    Fused { inputs: Vec<Var>, local: Vec<Tensor<F>> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    trainable: bool,
}

/// A tape of primitive operations. Nodes are appended in execution order, so
/// the tape index is a topological order and the graph is acyclic by
/// construction.
pub struct Graph<F: Float = f32> {
    nodes: Vec<Node<F>>,
    training: bool,
}

/// Gradients of a scalar with respect to the trainable leaves of a graph.
pub struct Gradients<F: Float> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<F: Float> Graph<F> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    fn push_node(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b), false)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b), true)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::bmm(self.value(a), self.value(b), false)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b: false }, &[a, b]))
    }

    /// Batched `a · bᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::bmm(self.value(a), self.value(b), true)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b: true }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::resolve(self.shape(a), self.shape(b))?;
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b, bc }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::resolve(self.shape(a), self.shape(b))?;
        let out = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b, bc }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = kernels::swish(self.value(x));
        self.push(out, Op::Swish(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Inverted dropout. Returns `x` itself when `p == 0` or the graph is in
    /// inference mode.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return contract_err(format!("dropout probability {p} outside [0, 1)"));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = F::of(1.0 / (1.0 - p));
        let multiplier: Vec<F> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .zip(&multiplier)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, multiplier }, &[x]))
    }

    /// Softmax over the last dimension; `mask` is a constant additive mask.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<F>>) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (out, cache) =
            kernels::layer_norm_impl(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: cache.xhat,
                inv_std: cache.inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Rows of `src` (viewed as `[rows, last_dim]`) selected by `ids`, giving
    /// `[ids.len(), last_dim]`. Row `skip`, if given, never receives gradient.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize], skip: Option<usize>) -> Result<Var> {
        let out = kernels::gather_rows(self.value(src), ids)?;
        Ok(self.push(
            out,
            Op::Gather {
                src,
                ids: ids.to_vec(),
                skip,
            },
            &[src],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(x), axes)?;
        Ok(self.push(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        let out = kernels::sum_last(self.value(x));
        self.push(out, Op::SumLast(x), &[x])
    }

    /// Records a scalar produced outside the graph together with its
    /// gradient with respect to each input.
    pub fn fused_scalar(&mut self, inputs: &[Var], value: F, local: Vec<Tensor<F>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return contract_err("fused op needs one local gradient per input");
        }
        for (v, g) in inputs.iter().zip(&local) {
            if self.shape(*v) != g.shape() {
                return dim_err(format!(
                    "fused op local gradient {:?} does not match input {:?}",
                    g.shape(),
                    self.shape(*v)
                ));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                local,
            },
            inputs,
        ))
    }

    /// Reverse-mode gradients of the scalar `loss` for every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if !self.value(loss).is_scalar() {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }

        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.trainable {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = g.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    // dA = dC·Bᵀ, or dC·B when B was stored transposed
                    gemm(m, k, n, g.data(), false, bv.data(), !trans_b, &mut da);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    if *trans_b {
                        gemm(n, k, m, g.data(), true, av.data(), false, &mut db);
                    } else {
                        gemm(k, n, m, av.data(), true, g.data(), false, &mut db);
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![F::zero(); bs * m * k];
                    for t in 0..bs {
                        gemm(
                            m,
                            k,
                            n,
                            &g.data()[t * m * n..(t + 1) * m * n],
                            false,
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            !trans_b,
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); bs * k * n];
                    for t in 0..bs {
                        let gs = &g.data()[t * m * n..(t + 1) * m * n];
                        let as_ = &av.data()[t * m * k..(t + 1) * m * k];
                        let out = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm(n, k, m, gs, true, as_, false, out);
                        } else {
                            gemm(k, n, m, as_, true, gs, false, out);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add { a, b, bc } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let db = reduce_broadcast(g.data(), bc, self.value(*b), |gi, _| gi);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * bv.data()[bc.index(i)])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?);
                }
                if self.wants(*b) {
                    let db = reduce_broadcast(g.data(), bc, bv, |gi, i| gi * av.data()[i]);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.map(|v| v * *factor));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = zip_map(g, y, |gi, yi| gi * yi * (F::one() - yi));
                self.accumulate(grads, *x, data);
            }
            Op::Swish(x) => {
                let data = zip_map(g, self.value(*x), |gi, xi| {
                    let s = kernels::sigmoid_scalar(xi);
                    gi * (s + xi * s * (F::one() - s))
                });
                self.accumulate(grads, *x, data);
            }
            Op::Relu(x) => {
                let data = zip_map(g, self.value(*x), |gi, xi| {
                    if xi > F::zero() {
                        gi
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(grads, *x, data);
            }
            Op::Dropout { x, multiplier } => {
                let data = g.data().iter().zip(multiplier).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut dx = vec![F::zero(); y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (&y.data()[r * n..(r + 1) * n], &g.data()[r * n..(r + 1) * n]);
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = gv.numel();
                let rows = inv_std.len();
                let df = F::of(d as f64);
                if self.wants(*gain) {
                    let mut dg = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(vec![d], dg)?);
                }
                if self.wants(*bias) {
                    let mut db = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g.data()[r * d + j];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![d], db)?);
                }
                if self.wants(*x) {
                    let mut dx = vec![F::zero(); rows * d];
                    for r in 0..rows {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= df;
                        mean_dh_h /= df;
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv.data()[j];
                            dx[r * d + j] =
                                inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::Gather { src, ids, skip } => {
                let sv = self.value(*src);
                let d = sv.last_dim();
                let mut ds = vec![F::zero(); sv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    if Some(id) == *skip {
                        continue;
                    }
                    for j in 0..d {
                        ds[id * d + j] += g.data()[r * d + j];
                    }
                }
                self.accumulate(grads, *src, Tensor::new(sv.shape().to_vec(), ds)?);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Permute { x, axes } => {
                let inv = kernels::inverse_permutation(axes);
                self.accumulate(grads, *x, kernels::permute(g, &inv)?);
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::SumLast(x) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let data = (0..xv.numel()).map(|i| g.data()[i / d]).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Fused { inputs, local } => {
                let s = g.item();
                for (v, l) in inputs.iter().zip(local) {
                    self.accumulate(grads, *v, l.map(|x| x * s));
                }
            }
        }
        Ok(())
    }
}

fn zip_map<F: Float>(g: &Tensor<F>, other: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn reduce_broadcast<F: Float>(
    g: &[F],
    bc: &Broadcast,
    target: &Tensor<F>,
    term: impl Fn(F, usize) -> F,
) -> Tensor<F> {
    let mut out = vec![F::zero(); target.numel()];
    for (i, &gi) in g.iter().enumerate() {
        out[bc.index(i)] += term(gi, i);
    }
    Tensor::new(target.shape().to_vec(), out).expect("same shape")
}
