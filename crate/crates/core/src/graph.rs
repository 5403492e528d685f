//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! A [`Tape`] records every operation applied during a forward pass as a
//! node holding its inputs, its computed value, and any auxiliaries the
//! backward rule needs. Calling [`Tape::backward`] on a scalar node then
//! walks the tape in reverse, accumulating gradients for every node that
//! transitively depends on a [`Tape::leaf`]. Subgraphs that only touch
//! constants (frozen encoder weights, cached hidden states) are marked
//! `needs_grad = false` at construction and skipped entirely, which is the
//! main performance lever: the frozen backbone never pays for backward.
//!
//! The operation set is exactly what the prompted dual-encoder pipeline
//! needs; every backward rule is validated against central finite
//! differences (see [`crate::gradcheck`]).

use crate::error::{DdpError, Result};
use crate::param::Parameter;
use crate::tensor::{
    matmul_into, matmul_nt_into, matmul_tn_into, row_moments, softmax_row_in_place, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Untracked input; gradients never flow into it.
    Constant,
    /// Tracked input cloned from a [`Parameter`]; index into `Tape::leaves`.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Add a length-c vector to every row of an r×c matrix.
    AddRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    /// Rows [start, end) of the input.
    SliceRows(NodeId, usize, usize),
    SoftmaxRows(NodeId, f64),
    LayerNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    Gelu(NodeId),
    /// Multi-head scaled-dot attention over already-projected q/k/v.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    },
    Cosine(NodeId, NodeId),
    /// Binary cross-entropy of a logit against a fixed 0/1 target.
    BceWithLogit(NodeId, f64),
    SumAll(NodeId),
    AddN(Vec<NodeId>),
}

/// Backward auxiliaries captured during the forward pass.
#[derive(Debug)]
enum Aux {
    None,
    /// Per-head post-softmax attention matrices.
    Attention(Vec<Tensor>),
    /// Per-row (sigma, x̂) from layer normalization.
    LayerNorm { sigma: Vec<f64>, xhat: Tensor },
}

struct Node {
    op: Op,
    value: Tensor,
    aux: Aux,
    needs_grad: bool,
}

/// Recorded forward computation supporting one reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
    /// (node index, parameter identifier) of each tracked leaf.
    leaves: Vec<(usize, String)>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Aux, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            aux,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Value computed at a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Untracked constant input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, Aux::None, false)
    }

    /// Tracked input cloned from a parameter's current value. After
    /// [`Tape::backward`], the gradient is available via [`Tape::leaf_grad`].
    pub fn leaf(&mut self, param: &Parameter) -> NodeId {
        let id = self.push(
            Op::Leaf,
            param.value().clone(),
            Aux::None,
            true,
        );
        self.leaves.push((id.0, param.identifier().to_string()));
        id
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = elementwise(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, Aux::None, ng))
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = elementwise(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), out, Aux::None, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = elementwise(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, Aux::None, ng))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(DdpError::Numeric("scale by non-finite constant".into()));
        }
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.values().iter().map(|x| x * c).collect())?;
        let ng = self.needs(a);
        Ok(self.push(Op::Scale(a, c), out, Aux::None, ng))
    }

    /// Add a length-c bias vector to every row of an r×c matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, c) = (self.value(a).rows(), self.value(a).cols());
        let bv = self.value(bias);
        if bv.len() != c {
            return Err(DdpError::Shape(format!(
                "add_row bias length {} vs {} columns",
                bv.len(),
                c
            )));
        }
        let mut vals = self.value(a).values().to_vec();
        for row in vals.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bv.values()) {
                *x += b;
            }
        }
        let out = Tensor::new(vec![m, c], vals)?;
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRow(a, bias), out, Aux::None, ng))
    }

    /// Matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), out, Aux::None, ng))
    }

    /// Stack the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(DdpError::Shape(format!(
                "concat_rows widths {} vs {}",
                va.cols(),
                vb.cols()
            )));
        }
        let mut vals = va.values().to_vec();
        vals.extend_from_slice(vb.values());
        let out = Tensor::new(vec![va.rows() + vb.rows(), va.cols()], vals)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatRows(a, b), out, Aux::None, ng))
    }

    /// Rows [start, end) of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (m, c) = (v.rows(), v.cols());
        if start > end || end > m {
            return Err(DdpError::Shape(format!(
                "slice_rows [{start}, {end}) of {m} rows"
            )));
        }
        let vals = v.values()[start * c..end * c].to_vec();
        let out = Tensor::new(vec![end - start, c], vals)?;
        let ng = self.needs(a);
        Ok(self.push(Op::SliceRows(a, start, end), out, Aux::None, ng))
    }

    /// Row-wise temperature softmax.
    pub fn softmax_rows(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        let out = self.value(a).softmax_rows(tau)?;
        let ng = self.needs(a);
        Ok(self.push(Op::SoftmaxRows(a, tau), out, Aux::None, ng))
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (out, sigma, xhat) =
            layer_norm_forward(self.value(x), self.value(scale), self.value(shift), eps)?;
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            Op::LayerNorm { x, scale, shift },
            out,
            Aux::LayerNorm { sigma, xhat },
            ng,
        ))
    }

    /// GELU activation (tanh approximation, smooth everywhere).
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let vals = v.values().iter().map(|&x| gelu_value(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), vals)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Gelu(a), out, Aux::None, ng))
    }

    /// Multi-head scaled-dot-product attention over already-projected
    /// queries (Lq×d), keys and values (Lk×d). The key/value length may
    /// exceed the query length — that is exactly the prompt-augmented case.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (out, attn_aux) =
            attention_forward(self.value(q), self.value(k), self.value(v), heads)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Op::Attention { q, k, v, heads },
            out,
            Aux::Attention(attn_aux),
            ng,
        ))
    }

    /// Cosine similarity of two same-length nodes; scalar output.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let c = crate::tensor::cosine(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Cosine(a, b), Tensor::scalar(c), Aux::None, ng))
    }

    /// Binary cross-entropy of a scalar logit against target y ∈ {0, 1},
    /// computed in the softplus form, which never overflows:
    /// `y·softplus(−z) + (1−y)·softplus(z)`.
    pub fn bce_with_logit(&mut self, z: NodeId, target: f64) -> Result<NodeId> {
        if target != 0.0 && target != 1.0 {
            return Err(DdpError::Domain(format!(
                "bce target must be 0 or 1, got {target}"
            )));
        }
        let zv = self.value(z).item()?;
        let loss = target * softplus(-zv) + (1.0 - target) * softplus(zv);
        let ng = self.needs(z);
        Ok(self.push(
            Op::BceWithLogit(z, target),
            Tensor::scalar(loss),
            Aux::None,
            ng,
        ))
    }

    /// Sum of all elements; scalar output.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).values().iter().sum();
        if !s.is_finite() {
            return Err(DdpError::Numeric("sum_all overflow".into()));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s), Aux::None, ng))
    }

    /// Elementwise sum of any number of same-shape nodes.
    pub fn add_n(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let first = ids
            .first()
            .ok_or_else(|| DdpError::Usage("add_n of zero nodes".into()))?;
        let shape = self.value(*first).shape().to_vec();
        let mut vals = self.value(*first).values().to_vec();
        for id in &ids[1..] {
            let v = self.value(*id);
            if v.shape() != shape.as_slice() {
                return Err(DdpError::Shape("add_n shape mismatch".into()));
            }
            for (acc, x) in vals.iter_mut().zip(v.values()) {
                *acc += x;
            }
        }
        let out = Tensor::new(shape, vals)?;
        let ng = ids.iter().any(|id| self.needs(*id));
        Ok(self.push(Op::AddN(ids.to_vec()), out, Aux::None, ng))
    }

    /// Reverse sweep from a scalar loss node. Gradients of leaves are
    /// afterwards available through [`Tape::leaf_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(DdpError::Usage(
                "backward requires a scalar loss node".into(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]; zeros if the leaf did not
    /// influence the loss.
    pub fn leaf_grad(&self, id: NodeId) -> Result<Tensor> {
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            _ => return Err(DdpError::Usage("leaf_grad on a non-leaf node".into())),
        }
        if self.grads.is_empty() {
            return Err(DdpError::Usage("leaf_grad before backward".into()));
        }
        Ok(match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        })
    }

    fn add_grad(&mut self, id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, x) in acc.values_mut().iter_mut().zip(g.values()) {
                    *a += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        // Ops are dispatched on a shallow copy of the inputs' ids; values are
        // read immutably from the tape while gradients accumulate.
        match &self.nodes[idx].op {
            Op::Constant | Op::Leaf => {}
            &Op::Add(a, b) => {
                self.add_grad(a, g.clone());
                self.add_grad(b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.add_grad(a, g.clone());
                let neg = Tensor::new(
                    g.shape().to_vec(),
                    g.values().iter().map(|x| -x).collect(),
                )?;
                self.add_grad(b, neg);
            }
            &Op::Mul(a, b) => {
                let ga = elementwise(g, self.value(b), "mul-bwd", |x, y| x * y)?;
                let gb = elementwise(g, self.value(a), "mul-bwd", |x, y| x * y)?;
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            &Op::Scale(a, c) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.values().iter().map(|x| x * c).collect(),
                )?;
                self.add_grad(a, ga);
            }
            &Op::AddRow(a, bias) => {
                self.add_grad(a, g.clone());
                let c = self.value(bias).len();
                let mut gb = vec![0.0; c];
                for row in g.values().chunks(c) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                self.add_grad(bias, Tensor::new(vec![c], gb)?);
            }
            &Op::Matmul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let ga = if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(g.values(), bv.values(), &mut ga, m, n, k);
                    Some(Tensor::new(vec![m, k], ga)?)
                } else {
                    None
                };
                let gb = if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(av.values(), g.values(), &mut gb, m, k, n);
                    Some(Tensor::new(vec![k, n], gb)?)
                } else {
                    None
                };
                if let Some(ga) = ga {
                    self.add_grad(a, ga);
                }
                if let Some(gb) = gb {
                    self.add_grad(b, gb);
                }
            }
            &Op::ConcatRows(a, b) => {
                let (ra, c) = (self.value(a).rows(), self.value(a).cols());
                let rb = self.value(b).rows();
                let ga = Tensor::new(vec![ra, c], g.values()[..ra * c].to_vec())?;
                let gb = Tensor::new(vec![rb, c], g.values()[ra * c..].to_vec())?;
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            &Op::SliceRows(a, start, _end) => {
                let (m, c) = (self.value(a).rows(), self.value(a).cols());
                let mut vals = vec![0.0; m * c];
                vals[start * c..start * c + g.len()].copy_from_slice(g.values());
                self.add_grad(a, Tensor::new(vec![m, c], vals)?);
            }
            &Op::SoftmaxRows(a, tau) => {
                let y = &self.nodes[idx].value;
                let c = y.cols();
                let mut vals = Vec::with_capacity(g.len());
                for (g_row, y_row) in g.values().chunks(c).zip(y.values().chunks(c)) {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(x, y)| x * y).sum();
                    for (gj, yj) in g_row.iter().zip(y_row) {
                        vals.push(yj * (gj - dot) / tau);
                    }
                }
                self.add_grad(a, Tensor::new(y.shape().to_vec(), vals)?);
            }
            &Op::LayerNorm { x, scale, shift } => {
                let (sigma, xhat) = match &self.nodes[idx].aux {
                    Aux::LayerNorm { sigma, xhat } => (sigma.clone(), xhat.clone()),
                    _ => unreachable!("layer_norm aux missing"),
                };
                let d = xhat.cols();
                let sv = self.value(scale).values().to_vec();
                if self.needs(shift) {
                    let mut gs = vec![0.0; d];
                    for row in g.values().chunks(d) {
                        for (acc, x) in gs.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    self.add_grad(shift, Tensor::new(vec![d], gs)?);
                }
                if self.needs(scale) {
                    let mut gs = vec![0.0; d];
                    for (g_row, xh_row) in g.values().chunks(d).zip(xhat.values().chunks(d)) {
                        for j in 0..d {
                            gs[j] += g_row[j] * xh_row[j];
                        }
                    }
                    self.add_grad(scale, Tensor::new(vec![d], gs)?);
                }
                if self.needs(x) {
                    let mut vals = Vec::with_capacity(g.len());
                    for (r, (g_row, xh_row)) in g
                        .values()
                        .chunks(d)
                        .zip(xhat.values().chunks(d))
                        .enumerate()
                    {
                        let gy: Vec<f64> =
                            g_row.iter().zip(&sv).map(|(x, s)| x * s).collect();
                        let m1 = gy.iter().sum::<f64>() / d as f64;
                        let m2 = gy.iter().zip(xh_row).map(|(a, b)| a * b).sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            vals.push((gy[j] - m1 - xh_row[j] * m2) / sigma[r]);
                        }
                    }
                    self.add_grad(x, Tensor::new(xhat.shape().to_vec(), vals)?);
                }
            }
            &Op::Gelu(a) => {
                let xv = self.value(a);
                let vals = xv
                    .values()
                    .iter()
                    .zip(g.values())
                    .map(|(&x, &gx)| gx * gelu_derivative(x))
                    .collect();
                self.add_grad(a, Tensor::new(xv.shape().to_vec(), vals)?);
            }
            &Op::Attention { q, k, v, heads } => {
                self.attention_backward(idx, q, k, v, heads, g)?;
            }
            &Op::Cosine(a, b) => {
                let gs = g.item()?;
                let (ua, ub) = (self.value(a), self.value(b));
                let (mut dot, mut nu2, mut nv2) = (0.0, 0.0, 0.0);
                for (x, y) in ua.values().iter().zip(ub.values()) {
                    dot += x * y;
                    nu2 += x * x;
                    nv2 += y * y;
                }
                let (nu, nv) = (nu2.sqrt(), nv2.sqrt());
                let c = dot / (nu * nv);
                let ga = if self.needs(a) {
                    let vals = ua
                        .values()
                        .iter()
                        .zip(ub.values())
                        .map(|(x, y)| gs * (y / (nu * nv) - c * x / nu2))
                        .collect();
                    Some(Tensor::new(ua.shape().to_vec(), vals)?)
                } else {
                    None
                };
                let gb = if self.needs(b) {
                    let vals = ub
                        .values()
                        .iter()
                        .zip(ua.values())
                        .map(|(y, x)| gs * (x / (nu * nv) - c * y / nv2))
                        .collect();
                    Some(Tensor::new(ub.shape().to_vec(), vals)?)
                } else {
                    None
                };
                if let Some(ga) = ga {
                    self.add_grad(a, ga);
                }
                if let Some(gb) = gb {
                    self.add_grad(b, gb);
                }
            }
            &Op::BceWithLogit(z, target) => {
                let gs = g.item()?;
                let zv = self.value(z).item()?;
                let dz = sigmoid(zv) - target;
                self.add_grad(z, Tensor::scalar(gs * dz));
            }
            &Op::SumAll(a) => {
                let gs = g.item()?;
                let shape = self.value(a).shape().to_vec();
                let n: usize = shape.iter().product();
                self.add_grad(a, Tensor::new(shape, vec![gs; n])?);
            }
            Op::AddN(ids) => {
                for id in ids.clone() {
                    self.add_grad(id, g.clone());
                }
            }
        }
        Ok(())
    }

    fn attention_backward(
        &mut self,
        idx: usize,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        g: &Tensor,
    ) -> Result<()> {
        let attn = match &self.nodes[idx].aux {
            Aux::Attention(a) => a.clone(),
            _ => unreachable!("attention aux missing"),
        };
        let (qv, kv, vv) = (
            self.value(q).clone(),
            self.value(k).clone(),
            self.value(v).clone(),
        );
        let d = qv.cols();
        let (lq, lk, dh) = (qv.rows(), kv.rows(), d / heads);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; lq * d];
        let mut gk = vec![0.0; lk * d];
        let mut gv = vec![0.0; lk * d];
        let mut qh = vec![0.0; lq * dh];
        let mut kh = vec![0.0; lk * dh];
        let mut vh = vec![0.0; lk * dh];
        let mut gh = vec![0.0; lq * dh];
        for h in 0..heads {
            let c0 = h * dh;
            copy_head(qv.values(), &mut qh, d, dh, c0);
            copy_head(kv.values(), &mut kh, d, dh, c0);
            copy_head(vv.values(), &mut vh, d, dh, c0);
            copy_head(g.values(), &mut gh, d, dh, c0);
            let a = attn[h].values();
            // dV = Aᵀ G
            let mut dvh = vec![0.0; lk * dh];
            matmul_tn_into(a, &gh, &mut dvh, lq, lk, dh);
            // dA = G Vᵀ
            let mut da = vec![0.0; lq * lk];
            matmul_nt_into(&gh, &vh, &mut da, lq, dh, lk);
            // dS = A ⊙ (dA − rowsum(dA ⊙ A)), then scale by 1/√dh.
            let mut ds = vec![0.0; lq * lk];
            for r in 0..lq {
                let a_row = &a[r * lk..(r + 1) * lk];
                let da_row = &da[r * lk..(r + 1) * lk];
                let dot: f64 = a_row.iter().zip(da_row).map(|(x, y)| x * y).sum();
                for j in 0..lk {
                    ds[r * lk + j] = a_row[j] * (da_row[j] - dot) * inv_sqrt;
                }
            }
            // dQ = dS K, dK = dSᵀ Q
            let mut dqh = vec![0.0; lq * dh];
            matmul_into(&ds, &kh, &mut dqh, lq, lk, dh);
            let mut dkh = vec![0.0; lk * dh];
            matmul_tn_into(&ds, &qh, &mut dkh, lq, lk, dh);
            scatter_head(&dqh, &mut gq, d, dh, c0);
            scatter_head(&dkh, &mut gk, d, dh, c0);
            scatter_head(&dvh, &mut gv, d, dh, c0);
        }
        self.add_grad(q, Tensor::new(vec![lq, d], gq)?);
        self.add_grad(k, Tensor::new(vec![lk, d], gk)?);
        self.add_grad(v, Tensor::new(vec![lk, d], gv)?);
        Ok(())
    }
}

fn elementwise(
    a: &Tensor,
    b: &Tensor,
    what: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(DdpError::Shape(format!(
            "{what} over shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| f(*x, *y))
            .collect(),
    )
}

/// Copy one head's dh-wide column block out of a full-width row-major buffer.
fn copy_head(full: &[f64], head: &mut [f64], d: usize, dh: usize, c0: usize) {
    let rows = full.len() / d;
    for r in 0..rows {
        head[r * dh..(r + 1) * dh].copy_from_slice(&full[r * d + c0..r * d + c0 + dh]);
    }
}

/// Add one head's dh-wide block back into the full-width buffer.
fn scatter_head(head: &[f64], full: &mut [f64], d: usize, dh: usize, c0: usize) {
    let rows = head.len() / dh;
    for r in 0..rows {
        for j in 0..dh {
            full[r * d + c0 + j] += head[r * dh + j];
        }
    }
}

/// Per-row layer-norm forward pass, shared by the tape op and the
/// gradient-free encoder paths so both produce identical bits. Returns the
/// output plus the per-row deviations and normalized values the backward
/// rule consumes.
pub(crate) fn layer_norm_forward(
    xv: &Tensor,
    sv: &Tensor,
    hv: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let d = xv.cols();
    if sv.len() != d || hv.len() != d {
        return Err(DdpError::Shape(format!(
            "layer_norm affine lengths {}/{} vs width {}",
            sv.len(),
            hv.len(),
            d
        )));
    }
    let rows = xv.rows();
    let mut sigma = Vec::with_capacity(rows);
    let mut xhat_vals = Vec::with_capacity(rows * d);
    let mut out_vals = Vec::with_capacity(rows * d);
    for row in xv.values().chunks(d) {
        let (mean, s) = row_moments(row, eps);
        sigma.push(s);
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) / s;
            xhat_vals.push(xh);
            out_vals.push(sv.values()[j] * xh + hv.values()[j]);
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), out_vals)?;
    let xhat = Tensor::new(xv.shape().to_vec(), xhat_vals)?;
    Ok((out, sigma, xhat))
}

/// Multi-head scaled-dot-product attention forward pass, shared by the tape
/// op and the gradient-free encoder paths so both produce identical bits.
/// Returns the output plus each head's softmaxed score matrix.
pub(crate) fn attention_forward(
    qv: &Tensor,
    kv: &Tensor,
    vv: &Tensor,
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let d = qv.cols();
    if heads == 0 || d % heads != 0 {
        return Err(DdpError::Shape(format!(
            "attention width {d} not divisible into {heads} heads"
        )));
    }
    if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
        return Err(DdpError::Shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            qv.shape(),
            kv.shape(),
            vv.shape()
        )));
    }
    let (lq, lk, dh) = (qv.rows(), kv.rows(), d / heads);
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut out_vals = vec![0.0; lq * d];
    let mut attn_aux = Vec::with_capacity(heads);
    let mut qh = vec![0.0; lq * dh];
    let mut kh = vec![0.0; lk * dh];
    let mut vh = vec![0.0; lk * dh];
    for h in 0..heads {
        let c0 = h * dh;
        copy_head(qv.values(), &mut qh, d, dh, c0);
        copy_head(kv.values(), &mut kh, d, dh, c0);
        copy_head(vv.values(), &mut vh, d, dh, c0);
        // S = Q Kᵀ / √dh, then per-row softmax.
        let mut scores = vec![0.0; lq * lk];
        matmul_nt_into(&qh, &kh, &mut scores, lq, dh, lk);
        for s in scores.iter_mut() {
            *s *= inv_sqrt;
        }
        for row in scores.chunks_mut(lk) {
            softmax_row_in_place(row, 1.0);
        }
        // O = A V, scattered back into the head's columns.
        let mut oh = vec![0.0; lq * dh];
        matmul_into(&scores, &vh, &mut oh, lq, lk, dh);
        for r in 0..lq {
            out_vals[r * d + c0..r * d + c0 + dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
        }
        attn_aux.push(Tensor::new(vec![lq, lk], scores)?);
    }
    let out = Tensor::new(vec![lq, d], out_vals)?;
    Ok((out, attn_aux))
}

pub(crate) fn gelu_value(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // √(2/π)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Numerically stable softplus: ln(1 + eˣ).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn leaf_from(tape: &mut Tape, name: &str, shape: Vec<usize>, rng: &mut Rng) -> NodeId {
        let n = shape.iter().product();
        let p = Parameter::new(name, Tensor::new(shape, rng.gaussian_vec(n, 1.0)).unwrap());
        tape.leaf(&p)
    }

    #[test]
    fn quadratic_gradient_is_two_theta() {
        // loss = Σ θ² via mul + sum_all; dθ = 2θ.
        let mut tape = Tape::new();
        let p = Parameter::new("t", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let x = tape.leaf(&p);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.leaf_grad(x).unwrap();
        assert_eq!(g.values(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_subgraphs_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let p = Parameter::new("t", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let x = tape.leaf(&p);
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.leaf_grad(x).unwrap().values(), &[3.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(1);
        let a = leaf_from(&mut tape, "a", vec![2], &mut rng);
        let b = leaf_from(&mut tape, "b", vec![2], &mut rng);
        let loss = tape.sum_all(a).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.leaf_grad(b).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(2);
        let a = leaf_from(&mut tape, "a", vec![2, 2], &mut rng);
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one_with_prompt_length() {
        // Post-softmax attention over prompt-augmented keys: every stored
        // attention row must be a distribution over L_P + L key positions.
        let mut tape = Tape::new();
        let mut rng = Rng::new(5);
        let q = leaf_from(&mut tape, "q", vec![4, 8], &mut rng);
        let k = leaf_from(&mut tape, "k", vec![9, 8], &mut rng);
        let v = leaf_from(&mut tape, "v", vec![9, 8], &mut rng);
        let o = tape.attention(q, k, v, 2).unwrap();
        assert_eq!(tape.value(o).shape(), &[4, 8]);
        match &tape.nodes[o.0].aux {
            Aux::Attention(mats) => {
                for m in mats {
                    assert_eq!(m.shape(), &[4, 9]);
                    for r in 0..4 {
                        let s: f64 = (0..9).map(|j| m.at(r, j)).sum();
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
            _ => panic!("missing attention aux"),
        }
    }

    #[test]
    fn bce_with_logit_matches_closed_form() {
        let mut tape = Tape::new();
        let p = Parameter::new("z", Tensor::scalar(0.4));
        let z = tape.leaf(&p);
        let l1 = tape.bce_with_logit(z, 1.0).unwrap();
        // -ln σ(0.4)
        let expect = -(sigmoid(0.4f64).ln());
        assert!((tape.value(l1).item().unwrap() - expect).abs() < 1e-15);
        tape.backward(l1).unwrap();
        let g = tape.leaf_grad(z).unwrap().item().unwrap();
        assert!((g - (sigmoid(0.4) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_fractional_target() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert!(tape.bce_with_logit(z, 0.5).is_err());
    }

    #[test]
    fn slice_of_concat_recovers_parts() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(7);
        let a = leaf_from(&mut tape, "a", vec![2, 3], &mut rng);
        let b = leaf_from(&mut tape, "b", vec![4, 3], &mut rng);
        let cat = tape.concat_rows(a, b).unwrap();
        let back = tape.slice_rows(cat, 2, 6).unwrap();
        assert_eq!(tape.value(back).values(), tape.value(b).values());
        // Gradient of sum(back) w.r.t. a must be zero, w.r.t. b all ones.
        let loss = tape.sum_all(back).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.leaf_grad(a).unwrap().values().iter().all(|&x| x == 0.0));
        assert!(tape.leaf_grad(b).unwrap().values().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_matches_naive_in_safe_range() {
        for z in [-30.0, -3.0, -0.1, 0.0, 0.1, 3.0, 30.0] {
            let naive = 1.0 / (1.0 + (-z as f64).exp());
            assert!((sigmoid(z) - naive).abs() < 1e-15);
        }
    }
}
