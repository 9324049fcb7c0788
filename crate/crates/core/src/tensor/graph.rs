use std::sync::atomic::{AtomicU64, Ordering};

use super::ops;
use super::{gemm, Result, Scalar, Strided, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

pub(super) enum Op<T> {
    Input,
    Param,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Relu {
        x: usize,
    },
    MaskUnits {
        x: usize,
        keep: Vec<bool>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cache: ops::LayerNormCache<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        dims: ops::AttentionDims,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Topologically ordered record of a forward pass.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological sort; [`Graph::backward`] visits it in exact reverse.
pub struct Graph<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::Graph(format!(
                "variable {} was not recorded on this graph",
                var.index
            )));
        }
        Ok(var.index)
    }

    fn node(&self, var: Var) -> Result<&Node<T>> {
        let idx = self.check(var)?;
        Ok(&self.nodes[idx])
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Constant leaf: receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Trainable leaf: always receives a gradient of its own shape.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(var)?.value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::MatMul { a: ia, b: ib }, rg))
    }

    /// Element-wise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                expected: format!("{:?}", va.shape()),
                found: format!("{:?}", vb.shape()),
            });
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let rg = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::Add { a: ia, b: ib }, rg))
    }

    /// Adds a `[d]` bias to every row of a `[..., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let d = vx.last_dim();
        if vb.shape() != [d] {
            return Err(TensorError::Shape {
                op: "add_bias",
                expected: format!("[{}]", d),
                found: format!("{:?}", vb.shape()),
            });
        }
        let mut value = vx.clone();
        for row in value.data_mut().chunks_mut(d) {
            for (a, b) in row.iter_mut().zip(vb.data()) {
                *a = *a + *b;
            }
        }
        let rg = self.needs(ix) || self.needs(ib);
        Ok(self.push(value, Op::AddBias { x: ix, bias: ib }, rg))
    }

    /// Element-wise `max(0, x)`; output is exactly `0.0` wherever `x <= 0`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let mut value = self.nodes[ix].value.clone();
        for v in value.data_mut() {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        let rg = self.needs(ix);
        Ok(self.push(value, Op::Relu { x: ix }, rg))
    }

    /// Zeroes every column `u` of a `[..., h]` tensor where `keep[u]` is false.
    pub fn mask_units(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let ix = self.check(x)?;
        let vx = &self.nodes[ix].value;
        let h = vx.last_dim();
        if keep.len() != h {
            return Err(TensorError::Shape {
                op: "mask_units",
                expected: format!("mask of length {}", h),
                found: format!("length {}", keep.len()),
            });
        }
        let mut value = vx.clone();
        for row in value.data_mut().chunks_mut(h) {
            for (v, &k) in row.iter_mut().zip(keep) {
                if !k {
                    *v = T::zero();
                }
            }
        }
        let rg = self.needs(ix);
        Ok(self.push(
            value,
            Op::MaskUnits {
                x: ix,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (value, cache) = ops::layer_norm_forward(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        )?;
        let rg = self.needs(ix) || self.needs(ig) || self.needs(ib);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                cache,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let vt = &self.nodes[it].value;
        let (rows, d) = vt.dims2("embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Shape {
                op: "embedding",
                expected: "at least one id".into(),
                found: "none".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.needs(it);
        Ok(self.push(
            value,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over `[batch * seq, d]` projections.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let dims = ops::AttentionDims::new(&self.nodes[iq].value, batch, seq, heads)?;
        for other in [ik, iv] {
            if self.nodes[other].value.shape() != self.nodes[iq].value.shape() {
                return Err(TensorError::Shape {
                    op: "causal_attention",
                    expected: format!("{:?}", self.nodes[iq].value.shape()),
                    found: format!("{:?}", self.nodes[other].value.shape()),
                });
            }
        }
        let (value, probs) = ops::attention_forward(
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
            dims,
        );
        let rg = self.needs(iq) || self.needs(ik) || self.needs(iv);
        Ok(self.push(
            value,
            Op::CausalAttention {
                q: iq,
                k: ik,
                v: iv,
                dims,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (loss, probs) = ops::cross_entropy_forward(&self.nodes[il].value, targets)?;
        let rg = self.needs(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let total = self.nodes[ix]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let rg = self.needs(ix);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x: ix }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every [`Graph::param`] leaf receives a gradient tensor of its own
    /// shape (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), T::one()));

        for idx in (0..=il).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let grad = match &node.op {
                Op::Param => continue,
                Op::Input => {
                    grads[idx] = None;
                    continue;
                }
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(idx, &grad, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match node.op {
                Op::Param => Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, idx: usize, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b } => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let slot = grad_slot(grads, *a, va.shape());
                    gemm(
                        m,
                        n,
                        k,
                        Strided::row_major(grad.data(), n),
                        Strided::transposed(vb.data(), n),
                        T::one(),
                        slot.data_mut(),
                        0,
                        k,
                    );
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let slot = grad_slot(grads, *b, vb.shape());
                    gemm(
                        k,
                        m,
                        n,
                        Strided::transposed(va.data(), k),
                        Strided::row_major(grad.data(), n),
                        T::one(),
                        slot.data_mut(),
                        0,
                        n,
                    );
                }
            }
            Op::Add { a, b } => {
                for i in [*a, *b] {
                    if self.needs(i) {
                        grad_slot(grads, i, grad.shape()).add_assign(grad);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    grad_slot(grads, *x, grad.shape()).add_assign(grad);
                }
                if self.needs(*bias) {
                    let d = grad.last_dim();
                    let slot = grad_slot(grads, *bias, &[d]);
                    let acc = slot.data_mut();
                    for row in grad.data().chunks(d) {
                        for (a, g) in acc.iter_mut().zip(row) {
                            *a = *a + *g;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let input = self.nodes[*x].value.data();
                    let slot = grad_slot(grads, *x, grad.shape());
                    for ((s, g), v) in slot.data_mut().iter_mut().zip(grad.data()).zip(input) {
                        if *v > T::zero() {
                            *s = *s + *g;
                        }
                    }
                }
            }
            Op::MaskUnits { x, keep } => {
                if self.needs(*x) {
                    let h = keep.len();
                    let slot = grad_slot(grads, *x, grad.shape());
                    for (srow, grow) in slot.data_mut().chunks_mut(h).zip(grad.data().chunks(h)) {
                        for ((s, g), &k) in srow.iter_mut().zip(grow).zip(keep) {
                            if k {
                                *s = *s + *g;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let vx = &self.nodes[*x].value;
                let vg = &self.nodes[*gain].value;
                let (dx, dgain, dbias) = ops::layer_norm_backward(vx, vg, cache, grad);
                if self.needs(*x) {
                    grad_slot(grads, *x, vx.shape()).add_assign(&dx);
                }
                if self.needs(*gain) {
                    grad_slot(grads, *gain, vg.shape()).add_assign(&dgain);
                }
                if self.needs(*bias) {
                    grad_slot(grads, *bias, vg.shape()).add_assign(&dbias);
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let shape = self.nodes[*table].value.shape().to_vec();
                    let d = shape[1];
                    let slot = grad_slot(grads, *table, &shape);
                    let acc = slot.data_mut();
                    for (row, &id) in grad.data().chunks(d).zip(ids) {
                        for (a, g) in acc[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *a = *a + *g;
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let (dq, dk, dv) = ops::attention_backward(
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                    *dims,
                    probs,
                    grad,
                );
                for (i, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(i) {
                        grad_slot(grads, i, g.shape()).add_assign(&g);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let shape = self.nodes[*logits].value.shape().to_vec();
                    let dl = ops::cross_entropy_backward(&shape, targets, probs, grad.data()[0]);
                    grad_slot(grads, *logits, &shape).add_assign(&dl);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let g = grad.data()[0];
                    let slot = grad_slot(grads, *x, self.nodes[*x].value.shape());
                    for s in slot.data_mut() {
                        *s = *s + g;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    idx: usize,
    shape: &[usize],
) -> &'a mut Tensor<T> {
    grads[idx].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Parameter gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar = f32> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter leaf.
    pub fn get(&self, var: Var) -> Result<&Tensor<T>> {
        if var.graph != self.graph {
            return Err(TensorError::Graph(
                "variable belongs to a different graph".into(),
            ));
        }
        self.grads
            .get(var.index)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| TensorError::Graph(format!("no gradient recorded for node {}", var.index)))
    }

    /// Moves the gradient for a parameter leaf out of the set.
    pub fn take(&mut self, var: Var) -> Result<Tensor<T>> {
        if var.graph != self.graph {
            return Err(TensorError::Graph(
                "variable belongs to a different graph".into(),
            ));
        }
        self.grads
            .get_mut(var.index)
            .and_then(|g| g.take())
            .ok_or_else(|| TensorError::Graph(format!("no gradient recorded for node {}", var.index)))
    }
}
