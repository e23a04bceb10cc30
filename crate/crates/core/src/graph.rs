//! Reverse-mode differentiation over a recorded evaluation order.
//!
//! Every node stores its forward value (a 2-D matrix) and the operation that
//! produced it. `backward` walks the nodes in reverse and applies each
//! operation's analytic backward transform. Parameters marked non-trainable
//! and plain inputs are leaves that never request gradients, so backward work
//! stops at a frozen sub-graph unless gradients must flow through it.

use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, gemm, gemm_view, Tensor, TensorError, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// matrix + broadcast row vector
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Input and the elementwise derivative (empty when no gradient is needed).
    Gelu(Var, Tensor),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<Tensor>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Mean(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SupCon {
        sim: Var,
        tau: f64,
        positives: Vec<Vec<usize>>,
        probs: Tensor,
        anchors: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    name: &'static str,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    nonfinite: Option<String>,
    sign_error: Option<&'static str>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            nonfinite: None,
            sign_error: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operation that produced a non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    /// Per-head attention weights (`n_q × n_k` each) recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Test hook: negates the incoming gradient of every `op` node during
    /// backward, so that gradient checks can be shown to catch the fault.
    #[doc(hidden)]
    pub fn inject_sign_error(&mut self, op: &'static str) {
        self.sign_error = Some(op);
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(name.to_string());
        }
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(id) => self.params.get(*id).trainable,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            name,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Gelu(a, _) | Op::SliceRows(a, _) | Op::SliceCols(a, _) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatRows(vs) | Op::Mean(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::L2NormalizeRows { x, .. } => vec![*x],
            Op::SupCon { sim, .. } => vec![*sim],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
        }
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf. Inputs never receive gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        let t = if t.shape().len() == 2 { t } else { t.as_matrix() };
        self.push(t, Op::Input, "input")
    }

    /// A parameter leaf viewed as a matrix `[rows, last extent]`.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.value(id).as_matrix();
        self.push(value, Op::Param(id), "param")
    }

    /// A parameter of shape `[a, b, c]` viewed as `[a, b * c]`.
    pub fn param_flat3(&mut self, id: ParamId) -> Var {
        let t = self.params.value(id);
        let s = t.shape();
        let rows = s[0];
        let value = Tensor::new(vec![rows, t.len() / rows], t.data().to_vec())
            .expect("consistent parameter shape");
        self.push(value, Op::Param(id), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner extents");
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            false,
            false,
            n,
            k,
            m,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            out.data_mut(),
        );
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner extents");
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            false,
            true,
            n,
            k,
            m,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            out.data_mut(),
        );
        self.push(out, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shapes");
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        if !self.needs_grad(a) {
            let out = self.value(a).map(tensor::gelu);
            return self.push(out, Op::Gelu(a, Tensor::zeros(&[0])), "gelu");
        }
        let x = self.value(a);
        let mut out = Tensor::zeros(x.shape());
        let mut deriv = Tensor::zeros(x.shape());
        for ((o, d), &v) in out.data_mut().iter_mut().zip(deriv.data_mut()).zip(x.data()) {
            (*o, *d) = tensor::gelu_with_grad(v);
        }
        self.push(out, Op::Gelu(a, deriv), "gelu")
    }

    /// Row-wise layer normalization with affine row vectors `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let mut xhat = Tensor::zeros(&[n, c]);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let (h, inv) = tensor::normalize(self.value(x).row(i), eps);
            xhat.row_mut(i).copy_from_slice(&h);
            inv_std.push(inv);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for i in 0..n {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Scaled dot-product attention over already-projected `q` (`n_q×D`),
    /// `k`, `v` (`n_k×D`), split into `heads` column blocks. Returns the
    /// concatenated per-head outputs (`n_q×D`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        assert_eq!(d, dk);
        assert_eq!(self.shape(v), (nk, d));
        assert!(heads > 0 && d % heads == 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(&[nq, d]);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut w = Tensor::zeros(&[nq, nk]);
            gemm_view(
                nq,
                dh,
                nk,
                scale,
                qv.data(),
                View::col_block(d, off),
                kv.data(),
                View::col_block_t(d, off),
                0.0,
                w.data_mut(),
                View::dense(nk),
            );
            for i in 0..nq {
                tensor::softmax_in_place(w.row_mut(i));
            }
            gemm_view(
                nq,
                nk,
                dh,
                1.0,
                w.data(),
                View::dense(nk),
                vv.data(),
                View::col_block(d, off),
                0.0,
                out.data_mut(),
                View::col_block(d, off),
            );
            weights.push(w);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
            "attention",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows column extent");
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Tensor::new(vec![rows, c], data).expect("concat shape");
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, c) = self.shape(a);
        assert!(start + len <= c);
        let src = self.value(a);
        let mut out = Tensor::zeros(&[n, len]);
        for i in 0..n {
            out.row_mut(i)
                .copy_from_slice(&src.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    /// Elementwise mean of same-shaped operands.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        out.scale_assign(1.0 / parts.len() as f64);
        self.push(out, Op::Mean(parts.to_vec()), "mean")
    }

    /// Mean cross-entropy over the rows whose target is `Some`. Returns a
    /// `1×1` node; with no targeted rows the value is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (n, c) = self.shape(logits);
        assert_eq!(targets.len(), n);
        let lv = self.value(logits);
        let mut probs = Tensor::zeros(&[n, c]);
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            let row = lv.row(i);
            let p = probs.row_mut(i);
            p.copy_from_slice(row);
            tensor::softmax_in_place(p);
            if let Some(t) = targets[i] {
                assert!(t < c, "cross_entropy target out of range");
                total += tensor::log_sum_exp(row) - row[t];
                count += 1;
            }
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            "cross_entropy",
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (n, _) = self.shape(x);
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let r = out.row_mut(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in r.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        self.push(out, Op::L2NormalizeRows { x, norms }, "l2_normalize")
    }

    /// Supervised-contrastive objective on a similarity matrix `sim` (`M×M`):
    /// mean over anchors with non-empty `positives[i]` of
    /// `-(1/|P_i|) Σ_p log(exp(s_ip/τ) / Σ_{a≠i} exp(s_ia/τ))`.
    pub fn supcon(&mut self, sim: Var, positives: &[Vec<usize>], tau: f64) -> Var {
        let (m, m2) = self.shape(sim);
        assert_eq!(m, m2);
        assert_eq!(positives.len(), m);
        let s = self.value(sim);
        let mut probs = Tensor::zeros(&[m, m]);
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..m {
            if positives[i].is_empty() {
                continue;
            }
            anchors += 1;
            let logits: Vec<f64> = (0..m).filter(|&a| a != i).map(|a| s.at(i, a) / tau).collect();
            let lse = tensor::log_sum_exp(&logits);
            let mut term = 0.0;
            for &p in &positives[i] {
                term += lse - s.at(i, p) / tau;
            }
            total += term / positives[i].len() as f64;
            let row = probs.row_mut(i);
            for a in 0..m {
                if a != i {
                    row[a] = (s.at(i, a) / tau - lse).exp();
                }
            }
        }
        let value = if anchors > 0 { total / anchors as f64 } else { 0.0 };
        self.push(
            Tensor::scalar(value),
            Op::SupCon {
                sim,
                tau,
                positives: positives.to_vec(),
                probs,
                anchors,
            },
            "supcon",
        )
    }

    /// `Σ wᵢ xᵢ` over `1×1` operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            assert_eq!(self.shape(v), (1, 1), "weighted_sum expects scalars");
            total += w * self.scalar(v);
        }
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            "weighted_sum",
        )
    }

    /// Accumulates `d loss / d θ` for every trainable parameter reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if let Some(op) = &self.nonfinite {
            return Err(TensorError::NonFinite { op: op.clone() });
        }
        if self.shape(loss) != (1, 1) {
            return Err(TensorError::Invalid("backward needs a scalar loss".into()));
        }
        let mut grads = Gradients::new(self.params.len());
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = if self.sign_error == Some(node.name) { g.map(|v| -v) } else { g };
            self.backprop_node(node, &g, &mut adj, &mut grads);
        }
        if !grads.is_finite() {
            return Err(TensorError::NonFinite {
                op: "backward".into(),
            });
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
        grads: &mut Gradients,
    ) {
        let send = |v: Var, t: Tensor, adj: &mut [Option<Tensor>]| match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let shape = self.params.value(*id).shape().to_vec();
                grads.accumulate(*id, &shape, g);
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                if self.wants(*a) {
                    let mut da = Tensor::zeros(&[n, k]);
                    gemm(false, true, n, m, k, g.data(), self.value(*b).data(), 0.0, da.data_mut());
                    send(*a, da, adj);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(&[k, m]);
                    gemm(true, false, k, n, m, self.value(*a).data(), g.data(), 0.0, db.data_mut());
                    send(*b, db, adj);
                }
            }
            Op::MatMulT(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).0;
                if self.wants(*a) {
                    let mut da = Tensor::zeros(&[n, k]);
                    gemm(false, false, n, m, k, g.data(), self.value(*b).data(), 0.0, da.data_mut());
                    send(*a, da, adj);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(&[m, k]);
                    gemm(true, false, m, n, k, g.data(), self.value(*a).data(), 0.0, db.data_mut());
                    send(*b, db, adj);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    send(*a, g.clone(), adj);
                }
                if self.wants(*b) {
                    send(*b, g.clone(), adj);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    send(*a, g.clone(), adj);
                }
                if self.wants(*row) {
                    send(*row, column_sums(g), adj);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    send(*a, g.map(|v| v * s), adj);
                }
            }
            Op::Gelu(a, deriv) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    for (o, dv) in d.data_mut().iter_mut().zip(deriv.data()) {
                        *o *= dv;
                    }
                    send(*a, d, adj);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = (xhat.rows(), xhat.cols());
                if self.wants(*beta) {
                    send(*beta, column_sums(g), adj);
                }
                if self.wants(*gamma) {
                    let mut dg = Tensor::zeros(&[1, c]);
                    for i in 0..n {
                        for (j, o) in dg.data_mut().iter_mut().enumerate() {
                            *o += g.at(i, j) * xhat.at(i, j);
                        }
                    }
                    send(*gamma, dg, adj);
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(&[n, c]);
                    let cf = c as f64;
                    for i in 0..n {
                        let dxhat: Vec<f64> = (0..c).map(|j| g.at(i, j) * gam[j]).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum();
                        let hrow = xhat.row(i);
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] / cf * (cf * dxhat[j] - sum - hrow[j] * dot);
                        }
                    }
                    send(*x, dx, adj);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (nq, d) = self.shape(*q);
                let nk = self.shape(*k).0;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Tensor::zeros(&[nq, d]);
                let mut dk = Tensor::zeros(&[nk, d]);
                let mut dv = Tensor::zeros(&[nk, d]);
                let need_qk = self.wants(*q) || self.wants(*k);
                let gd = g.data();
                for (h, w) in weights.iter().enumerate() {
                    let off = h * dh;
                    let blk = View::col_block(d, off);
                    // dV = Pᵀ dO
                    gemm_view(nk, nq, dh, 1.0, w.data(), View::dense_t(nk), gd, blk, 0.0, dv.data_mut(), blk);
                    if !need_qk {
                        continue;
                    }
                    // dP = dO Vᵀ, then dS = P ⊙ (dP − Σ_j P dP) · scale
                    let mut ds = Tensor::zeros(&[nq, nk]);
                    gemm_view(
                        nq,
                        dh,
                        nk,
                        1.0,
                        gd,
                        blk,
                        vv.data(),
                        View::col_block_t(d, off),
                        0.0,
                        ds.data_mut(),
                        View::dense(nk),
                    );
                    for i in 0..nq {
                        let wi = w.row(i);
                        let row = ds.row_mut(i);
                        let inner: f64 = row.iter().zip(wi).map(|(a, b)| a * b).sum();
                        for (x, p) in row.iter_mut().zip(wi) {
                            *x = p * (*x - inner) * scale;
                        }
                    }
                    gemm_view(nq, nk, dh, 1.0, ds.data(), View::dense(nk), kv.data(), blk, 0.0, dq.data_mut(), blk);
                    gemm_view(nk, nq, dh, 1.0, ds.data(), View::dense_t(nk), qv.data(), blk, 0.0, dk.data_mut(), blk);
                }
                if self.wants(*q) {
                    send(*q, dq, adj);
                }
                if self.wants(*k) {
                    send(*k, dk, adj);
                }
                if self.wants(*v) {
                    send(*v, dv, adj);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    if self.wants(p) {
                        send(p, g.slice_rows(start, r), adj);
                    }
                    start += r;
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let (n, c) = self.shape(*a);
                    let mut d = Tensor::zeros(&[n, c]);
                    let len = g.rows();
                    d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                    send(*a, d, adj);
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let (n, c) = self.shape(*a);
                    let len = g.cols();
                    let mut d = Tensor::zeros(&[n, c]);
                    for i in 0..n {
                        d.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                    }
                    send(*a, d, adj);
                }
            }
            Op::Mean(parts) => {
                let s = 1.0 / parts.len() as f64;
                for &p in parts {
                    if self.wants(p) {
                        send(p, g.map(|v| v * s), adj);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.wants(*logits) && *count > 0 {
                    let up = g.data()[0] / *count as f64;
                    let mut d = Tensor::zeros(probs.shape());
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = d.row_mut(i);
                        row.copy_from_slice(probs.row(i));
                        row[*t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= up;
                        }
                    }
                    send(*logits, d, adj);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.wants(*x) {
                    let u = &node.value;
                    let mut d = g.clone();
                    for (i, &norm) in norms.iter().enumerate() {
                        let ui = u.row(i);
                        let gi = g.row(i);
                        let dot: f64 = ui.iter().zip(gi).map(|(a, b)| a * b).sum();
                        let clamped = norm <= 1e-12;
                        for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                            *o = if clamped {
                                gi[j] / norm
                            } else {
                                (gi[j] - ui[j] * dot) / norm
                            };
                        }
                    }
                    send(*x, d, adj);
                }
            }
            Op::SupCon {
                sim,
                tau,
                positives,
                probs,
                anchors,
            } => {
                if self.wants(*sim) && *anchors > 0 {
                    let up = g.data()[0] / *anchors as f64;
                    let m = probs.rows();
                    let mut d = Tensor::zeros(&[m, m]);
                    for i in 0..m {
                        let pos = &positives[i];
                        if pos.is_empty() {
                            continue;
                        }
                        let row = d.row_mut(i);
                        for (a, r) in row.iter_mut().enumerate() {
                            if a != i {
                                *r = probs.at(i, a) / tau;
                            }
                        }
                        let w = 1.0 / (pos.len() as f64 * tau);
                        for &p in pos {
                            row[p] -= w;
                        }
                        for r in row.iter_mut() {
                            *r *= up;
                        }
                    }
                    send(*sim, d, adj);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        send(v, Tensor::scalar(g.data()[0] * w), adj);
                    }
                }
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = Tensor::zeros(&[1, c]);
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}
