//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops are recorded during the forward pass; `backward` replays them in
//! reverse. Nodes only reference earlier nodes, so the recorded graph cannot
//! cycle, and gradient buffers are allocated only along paths that reach a
//! gradient-requiring leaf. Forward values live behind `Arc`s, which makes
//! leaves of shared parameters free and lets callers keep taps of
//! intermediate activations without copying.

use std::sync::Arc;

use crate::num::Scalar;
use crate::tensor::{self, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    /// a(m,k) · b(k,n)
    MmNn(Var, Var),
    /// a(m,q) · b(p,q)ᵀ
    MmNt(Var, Var),
    /// batched over leading dim
    BmmNn(Var, Var),
    BmmNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// a + c·b
    Axpy(Var, Var, T),
    Scale(Var, T),
    /// x(rows,d) + bias(d) broadcast over rows
    AddBiasRow(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
    },
    Silu(Var),
    /// (n, h·d) -> (h, n, d)
    SplitHeads(Var, usize),
    /// (h, n, d) -> (n, h·d)
    MergeHeads(Var),
    Reshape(Var),
    /// out row i = x row perm[i]
    PermuteRows(Var, Arc<Vec<usize>>),
    /// Σx -> scalar
    SumAll(Var),
    /// ‖x‖²/2 -> scalar
    HalfSumSq(Var),
    /// mean((a-b)²) -> scalar
    MseMean(Var, Var),
}

struct Node<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
    name: Option<String>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        let n: usize = shape.iter().product();
        debug_assert_eq!(n, data.len());
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            op,
            needs_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    /// Forward value as a tensor; shares the node's buffer.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_arc(&self.node(v).shape, Arc::clone(&self.node(v).data))
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        assert_eq!(self.node(v).data.len(), 1, "scalar: node is not scalar");
        self.node(v).data[0]
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let grad = t.requires_grad;
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.data_arc(),
            op: Op::Leaf,
            needs_grad: grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient, whatever the tensor's flag.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        let mut v = t.clone();
        v.requires_grad = false;
        self.leaf(&v)
    }

    /// Leaf bound to a named parameter; backward exports its gradient
    /// under this name.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        let p = store.param(name);
        let v = self.leaf(&p.value);
        self.nodes[v.0].name = Some(name.to_string());
        self.nodes[v.0].needs_grad = p.trainable;
        v
    }

    // ── Ops ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul: need rank-2 operands"
        );
        assert_eq!(sa[1], sb[0], "matmul: inner extents {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        tensor::mm_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::MmNn(a, b), ng)
    }

    /// a(m,q) · b(p,q)ᵀ -> (m,p)
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul_nt: need rank-2 operands"
        );
        assert_eq!(sa[1], sb[1], "matmul_nt: inner extents {sa:?} x {sb:?}ᵀ");
        let (m, q, p) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::ZERO; m * p];
        tensor::mm_nt(self.data(a), self.data(b), m, q, p, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, p], out, Op::MmNt(a, b), ng)
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm: need rank-3 operands");
        assert_eq!(sa[0], sb[0], "bmm: batch extents differ");
        assert_eq!(sa[2], sb[1], "bmm: inner extents {sa:?} x {sb:?}");
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::ZERO; bt * m * n];
        for i in 0..bt {
            tensor::mm_nn(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![bt, m, n], out, Op::BmmNn(a, b), ng)
    }

    /// Batched a(b,m,q) · b(b,p,q)ᵀ -> (b,m,p)
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3,
            "bmm_nt: need rank-3 operands"
        );
        assert_eq!(sa[0], sb[0], "bmm_nt: batch extents differ");
        assert_eq!(sa[2], sb[2], "bmm_nt: inner extents {sa:?} x {sb:?}ᵀ");
        let (bt, m, q, p) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::ZERO; bt * m * p];
        for i in 0..bt {
            tensor::mm_nt(
                &self.data(a)[i * m * q..(i + 1) * m * q],
                &self.data(b)[i * p * q..(i + 1) * p * q],
                m,
                q,
                p,
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![bt, m, p], out, Op::BmmNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let (sh, ng) = (self.shape(a).to_vec(), self.needs(a) || self.needs(b));
        self.push(sh, out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let (sh, ng) = (self.shape(a).to_vec(), self.needs(a) || self.needs(b));
        self.push(sh, out, Op::Sub(a, b), ng)
    }

    /// a + c·b. Callers that need `c == 0` to be an exact no-op must skip
    /// the call instead.
    pub fn axpy(&mut self, a: Var, b: Var, c: T) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "axpy: shape mismatch");
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| x + c * y)
            .collect();
        let (sh, ng) = (self.shape(a).to_vec(), self.needs(a) || self.needs(b));
        self.push(sh, out, Op::Axpy(a, b, c), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| c * x).collect();
        let (sh, ng) = (self.shape(a).to_vec(), self.needs(a));
        self.push(sh, out, Op::Scale(a, c), ng)
    }

    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        assert_eq!(sb.len(), 1, "add_bias_row: bias must be rank 1");
        let d = sb[0];
        assert_eq!(
            *sx.last().expect("rank >= 1"),
            d,
            "add_bias_row: width mismatch {sx:?} + ({d})"
        );
        let bd = self.data(bias).to_vec();
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        self.push(sx, out, Op::AddBiasRow(x, bias), ng)
    }

    /// y = x·w + bias, broadcasting over leading axes of x.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sw.len(), 2, "affine: weight must be rank 2");
        let din = *sx.last().expect("affine: input rank >= 1");
        assert_eq!(din, sw[0], "affine: input width {sx:?} vs weight {sw:?}");
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let x2 = self.reshape(x, &[rows.max(1), din]);
        let y = self.matmul(x2, w);
        let y = self.add_bias_row(y, bias);
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let sh = self.shape(x).to_vec();
        let row = *sh.last().expect("softmax: rank >= 1");
        let mut out = self.data(x).to_vec();
        tensor::softmax_rows_inplace(&mut out, row);
        let ng = self.needs(x);
        self.push(sh, out, Op::SoftmaxRows(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().expect("layer_norm: rank >= 1");
        assert!(d >= 2, "layer_norm: last extent must be >= 2");
        assert!(eps > T::ZERO, "layer_norm: eps must be positive");
        assert_eq!(self.shape(gain), &[d], "layer_norm: gain width");
        assert_eq!(self.shape(bias), &[d], "layer_norm: bias width");
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        let inv_d = T::ONE / T::from_f64(d as f64);
        for r in out.chunks_mut(d) {
            let mut mean = T::ZERO;
            for &v in r.iter() {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in r.iter() {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv = T::ONE / (var + eps).sqrt();
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(sh, out, Op::LayerNorm { x, gain, bias, eps }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| v / (T::ONE + (-v).exp()))
            .collect();
        let (sh, ng) = (self.shape(x).to_vec(), self.needs(x));
        self.push(sh, out, Op::Silu(x), ng)
    }

    /// (n, h·d) -> (h, n, d)
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 2, "split_heads: need rank-2 input");
        let (n, hd) = (sh[0], sh[1]);
        assert!(
            heads >= 1 && hd % heads == 0,
            "split_heads: width {hd} not divisible by {heads} heads"
        );
        let d = hd / heads;
        let xd = self.data(x);
        let mut out = vec![T::ZERO; n * hd];
        for h in 0..heads {
            for i in 0..n {
                let src = i * hd + h * d;
                let dst = h * n * d + i * d;
                out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
            }
        }
        let ng = self.needs(x);
        self.push(vec![heads, n, d], out, Op::SplitHeads(x, heads), ng)
    }

    /// (h, n, d) -> (n, h·d); exact inverse of `split_heads`.
    pub fn merge_heads(&mut self, x: Var) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 3, "merge_heads: need rank-3 input");
        let (heads, n, d) = (sh[0], sh[1], sh[2]);
        let xd = self.data(x);
        let mut out = vec![T::ZERO; n * heads * d];
        for h in 0..heads {
            for i in 0..n {
                let src = h * n * d + i * d;
                let dst = i * heads * d + h * d;
                out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
            }
        }
        let ng = self.needs(x);
        self.push(vec![n, heads * d], out, Op::MergeHeads(x), ng)
    }

    /// Zero-copy: shares the input buffer.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.node(x).data.len(),
            "reshape: {:?} -> {shape:?} changes element count",
            self.shape(x)
        );
        let data = Arc::clone(&self.node(x).data);
        let ng = self.needs(x);
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data,
            op: Op::Reshape(x),
            needs_grad: ng,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Row reorder of a rank-2 tensor: out row i = x row perm[i].
    pub fn permute_rows(&mut self, x: Var, perm: Arc<Vec<usize>>) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 2, "permute_rows: need rank-2 input");
        let (n, d) = (sh[0], sh[1]);
        assert_eq!(perm.len(), n, "permute_rows: perm length");
        let xd = self.data(x);
        let mut out = vec![T::ZERO; n * d];
        for (i, &p) in perm.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&xd[p * d..(p + 1) * d]);
        }
        let ng = self.needs(x);
        self.push(sh, out, Op::PermuteRows(x, perm), ng)
    }

    /// Σx as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::ZERO, |acc, &v| acc + v);
        let ng = self.needs(x);
        self.push(vec![1], vec![s], Op::SumAll(x), ng)
    }

    /// ‖x‖²/2 as a scalar node.
    pub fn half_sum_sq(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::ZERO, |acc, &v| acc + v * v);
        let half = T::from_f64(0.5);
        let ng = self.needs(x);
        self.push(vec![1], vec![s * half], Op::HalfSumSq(x), ng)
    }

    /// mean((a - b)²) as a scalar node.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse_mean: shape mismatch");
        let n = self.node(a).data.len();
        let mut s = T::ZERO;
        for (&x, &y) in self.data(a).iter().zip(self.data(b).iter()) {
            let d = x - y;
            s = s + d * d;
        }
        let out = s / T::from_f64(n as f64);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![1], vec![out], Op::MseMean(a, b), ng)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns per-node gradients for
    /// every node on a gradient-requiring path.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.node(loss).data.len(),
            1,
            "backward: loss must be scalar"
        );
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Grads { grads };
        }
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let dy = grads[idx].take().expect("checked above");
            self.step_back(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Grads { grads }
    }

    /// Backward and accumulate `scale ×` gradients of named parameter
    /// leaves into the store.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>, scale: T) {
        let grads = self.backward(loss);
        self.export_grads(&grads, store, scale);
    }

    /// Adds `scale ×` the named-leaf gradients from `grads` into the store,
    /// in tape order.
    pub fn export_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>, scale: T) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.name, &grads.grads[idx]) {
                store.accumulate_grad(name, g, scale);
            }
        }
    }

    /// Collects `(name, grad)` pairs for named leaves, in tape order.
    pub fn named_grads(&self, grads: &Grads<T>) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.name, &grads.grads[idx]) {
                out.push((name.clone(), g.clone()));
            }
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: &[T]) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::ZERO; self.node(v).data.len()]);
        for (s, &c) in slot.iter_mut().zip(contrib.iter()) {
            *s = *s + c;
        }
    }

    fn step_back(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MmNn(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    tensor::mm_nt(dy, self.data(*b), m, n, k, &mut da);
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    tensor::mm_tn(self.data(*a), dy, m, k, n, &mut db);
                    self.accum(grads, *b, &db);
                }
            }
            Op::MmNt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, q, p) = (sa[0], sa[1], sb[0]);
                if self.needs(*a) {
                    let mut da = vec![T::ZERO; m * q];
                    tensor::mm_nn(dy, self.data(*b), m, p, q, &mut da);
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; p * q];
                    tensor::mm_tn(dy, self.data(*a), m, p, q, &mut db);
                    self.accum(grads, *b, &db);
                }
            }
            Op::BmmNn(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.needs(*a) {
                    let mut da = vec![T::ZERO; bt * m * k];
                    for i in 0..bt {
                        tensor::mm_nt(
                            &dy[i * m * n..(i + 1) * m * n],
                            &self.data(*b)[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; bt * k * n];
                    for i in 0..bt {
                        tensor::mm_tn(
                            &self.data(*a)[i * m * k..(i + 1) * m * k],
                            &dy[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::BmmNt(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bt, m, q, p) = (sa[0], sa[1], sa[2], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![T::ZERO; bt * m * q];
                    for i in 0..bt {
                        tensor::mm_nn(
                            &dy[i * m * p..(i + 1) * m * p],
                            &self.data(*b)[i * p * q..(i + 1) * p * q],
                            m,
                            p,
                            q,
                            &mut da[i * m * q..(i + 1) * m * q],
                        );
                    }
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; bt * p * q];
                    for i in 0..bt {
                        tensor::mm_tn(
                            &dy[i * m * p..(i + 1) * m * p],
                            &self.data(*a)[i * m * q..(i + 1) * m * q],
                            m,
                            p,
                            q,
                            &mut db[i * p * q..(i + 1) * p * q],
                        );
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, dy);
                self.accum(grads, *b, dy);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, dy);
                if self.needs(*b) {
                    let neg: Vec<T> = dy.iter().map(|&v| -v).collect();
                    self.accum(grads, *b, &neg);
                }
            }
            Op::Axpy(a, b, c) => {
                self.accum(grads, *a, dy);
                if self.needs(*b) {
                    let scaled: Vec<T> = dy.iter().map(|&v| *c * v).collect();
                    self.accum(grads, *b, &scaled);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let scaled: Vec<T> = dy.iter().map(|&v| *c * v).collect();
                    self.accum(grads, *a, &scaled);
                }
            }
            Op::AddBiasRow(x, bias) => {
                self.accum(grads, *x, dy);
                if self.needs(*bias) {
                    let d = self.node(*bias).data.len();
                    let mut db = vec![T::ZERO; d];
                    for (i, &v) in dy.iter().enumerate() {
                        db[i % d] = db[i % d] + v;
                    }
                    self.accum(grads, *bias, &db);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let y = &self.nodes[idx].data;
                    let row = *self.nodes[idx].shape.last().unwrap();
                    let mut dx = vec![T::ZERO; y.len()];
                    for r in 0..y.len() / row {
                        let ys = &y[r * row..(r + 1) * row];
                        let ds = &dy[r * row..(r + 1) * row];
                        let mut s = T::ZERO;
                        for j in 0..row {
                            s = s + ds[j] * ys[j];
                        }
                        for j in 0..row {
                            dx[r * row + j] = ys[j] * (ds[j] - s);
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.nodes[idx].shape.last().unwrap();
                let xd = self.data(*x);
                let g = self.data(*gain);
                let inv_d = T::ONE / T::from_f64(d as f64);
                let rows = xd.len() / d;
                let mut dx = if self.needs(*x) {
                    vec![T::ZERO; xd.len()]
                } else {
                    Vec::new()
                };
                let mut dg = vec![T::ZERO; d];
                let mut db = vec![T::ZERO; d];
                for r in 0..rows {
                    let xs = &xd[r * d..(r + 1) * d];
                    let ds = &dy[r * d..(r + 1) * d];
                    let mut mean = T::ZERO;
                    for &v in xs.iter() {
                        mean = mean + v;
                    }
                    mean = mean * inv_d;
                    let mut var = T::ZERO;
                    for &v in xs.iter() {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var * inv_d;
                    let inv = T::ONE / (var + *eps).sqrt();
                    // x̂, h = g·dy, and the two row means backward needs
                    let mut mh = T::ZERO;
                    let mut mhx = T::ZERO;
                    for j in 0..d {
                        let xh = (xs[j] - mean) * inv;
                        let h = g[j] * ds[j];
                        mh = mh + h;
                        mhx = mhx + h * xh;
                        dg[j] = dg[j] + ds[j] * xh;
                        db[j] = db[j] + ds[j];
                    }
                    mh = mh * inv_d;
                    mhx = mhx * inv_d;
                    if self.needs(*x) {
                        for j in 0..d {
                            let xh = (xs[j] - mean) * inv;
                            dx[r * d + j] = inv * (g[j] * ds[j] - mh - xh * mhx);
                        }
                    }
                }
                if self.needs(*x) {
                    self.accum(grads, *x, &dx);
                }
                self.accum(grads, *gain, &dg);
                self.accum(grads, *bias, &db);
            }
            Op::Silu(x) => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    let dx: Vec<T> = xd
                        .iter()
                        .zip(dy.iter())
                        .map(|(&v, &g)| {
                            let s = T::ONE / (T::ONE + (-v).exp());
                            g * s * (T::ONE + v * (T::ONE - s))
                        })
                        .collect();
                    self.accum(grads, *x, &dx);
                }
            }
            Op::SplitHeads(x, heads) => {
                if self.needs(*x) {
                    let sh = &self.nodes[idx].shape;
                    let (h, n, d) = (sh[0], sh[1], sh[2]);
                    debug_assert_eq!(h, *heads);
                    let mut dx = vec![T::ZERO; n * h * d];
                    for hh in 0..h {
                        for i in 0..n {
                            let src = hh * n * d + i * d;
                            let dst = i * h * d + hh * d;
                            for c in 0..d {
                                dx[dst + c] = dx[dst + c] + dy[src + c];
                            }
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Op::MergeHeads(x) => {
                if self.needs(*x) {
                    let sh = self.shape(*x);
                    let (h, n, d) = (sh[0], sh[1], sh[2]);
                    let mut dx = vec![T::ZERO; h * n * d];
                    for hh in 0..h {
                        for i in 0..n {
                            let dst = hh * n * d + i * d;
                            let src = i * h * d + hh * d;
                            for c in 0..d {
                                dx[dst + c] = dx[dst + c] + dy[src + c];
                            }
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, dy);
            }
            Op::PermuteRows(x, perm) => {
                if self.needs(*x) {
                    let d = self.shape(*x)[1];
                    let mut dx = vec![T::ZERO; self.node(*x).data.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        for c in 0..d {
                            dx[p * d + c] = dx[p * d + c] + dy[i * d + c];
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let dl = dy[0];
                    let dx = vec![dl; self.node(*x).data.len()];
                    self.accum(grads, *x, &dx);
                }
            }
            Op::HalfSumSq(x) => {
                if self.needs(*x) {
                    let dl = dy[0];
                    let dx: Vec<T> = self.data(*x).iter().map(|&v| v * dl).collect();
                    self.accum(grads, *x, &dx);
                }
            }
            Op::MseMean(a, b) => {
                let n = self.node(*a).data.len();
                let c = dy[0] * T::from_f64(2.0 / n as f64);
                if self.needs(*a) {
                    let da: Vec<T> = self
                        .data(*a)
                        .iter()
                        .zip(self.data(*b).iter())
                        .map(|(&x, &y)| c * (x - y))
                        .collect();
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<T> = self
                        .data(*a)
                        .iter()
                        .zip(self.data(*b).iter())
                        .map(|(&x, &y)| -c * (x - y))
                        .collect();
                    self.accum(grads, *b, &db);
                }
            }
        }
    }
}

/// Per-node gradients from one backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

#[cfg(test)]
#[allow(clippy::identity_op)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn randt(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::seeded(seed);
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        rng.fill_normal(&mut data, 1.0);
        Tensor::new(shape, data)
    }

    /// Brute-force triple-loop product, independent of the mm kernels.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    /// Central finite differences for the gradient of `f` at `x`.
    fn fd_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64, h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.numel()];
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn matmul_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let m = randt(&[2, 2], 1);
        let i2 = tape.leaf(&Tensor::eye(2));
        let mv = tape.leaf(&m);
        let c = tape.matmul(i2, mv);
        assert!(tape.tensor(c).bitwise_eq(&m) || tape.tensor(c).max_abs_diff(&m) == 0.0);
    }

    #[test]
    fn matmul_hand_sum() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&Tensor::new(&[2, 1], vec![1.0, 1.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.data(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = randt(&[5, 7], 2);
        let b = randt(&[7, 3], 3);
        let expect = matmul_oracle(&a, &b);
        let mut tape: Tape<f64> = Tape::new();
        let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
        let c = tape.matmul(av, bv);
        for (got, want) in tape.data(c).iter().zip(expect.iter()) {
            assert!(rel_close(*got, *want, 1e-6), "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_nt_and_tn_match_oracle() {
        let a = randt(&[4, 6], 10);
        let bt = randt(&[5, 6], 11); // represents b = btᵀ, (6,5)
        let b = {
            let mut data = vec![0.0; 30];
            for i in 0..5 {
                for j in 0..6 {
                    data[j * 5 + i] = bt.data()[i * 6 + j];
                }
            }
            Tensor::new(&[6, 5], data)
        };
        let expect = matmul_oracle(&a, &b);
        let mut tape: Tape<f64> = Tape::new();
        let (av, btv) = (tape.leaf(&a), tape.leaf(&bt));
        let c = tape.matmul_nt(av, btv);
        for (got, want) in tape.data(c).iter().zip(expect.iter()) {
            assert!(rel_close(*got, *want, 1e-6));
        }
    }

    #[test]
    #[should_panic(expected = "matmul: inner extents")]
    fn matmul_shape_mismatch_panics() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 2]));
        let b = tape.leaf(&Tensor::zeros(&[3, 1]));
        tape.matmul(a, b);
    }

    #[test]
    fn softmax_zero_row_is_uniform() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 4]));
        let y = tape.softmax_rows(x);
        for &v in tape.data(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = randt(&[3, 5], 4);
        let shifted = Tensor::new(
            x.shape(),
            x.data().iter().map(|v| v + 13.5).collect::<Vec<_>>(),
        );
        let mut tape: Tape<f64> = Tape::new();
        let (a, b) = (tape.leaf(&x), tape.leaf(&shifted));
        let (ya, yb) = (tape.softmax_rows(a), tape.softmax_rows(b));
        assert!(tape.tensor(ya).max_abs_diff(&tape.tensor(yb)) <= 1e-6);
    }

    #[test]
    fn softmax_closed_form() {
        // row [0, ln 3] → [1/4, 3/4]
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::new(&[1, 2], vec![0.0, 3.0f64.ln()]));
        let y = tape.softmax_rows(x);
        assert!((tape.data(y)[0] - 0.25).abs() < 1e-12);
        assert!((tape.data(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "softmax: non-finite input")]
    fn softmax_nan_input_errors() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::new(&[1, 2], vec![0.0, f64::NAN]));
        tape.softmax_rows(x);
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::filled(&[2, 8], 3.25));
        let g = tape.leaf(&Tensor::filled(&[8], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 1e-5);
        for &v in tape.data(y) {
            assert!(
                v.abs() < 1e-9,
                "constant slice should normalize to 0, got {v}"
            );
        }
    }

    #[test]
    fn layer_norm_moments() {
        let x = randt(&[4, 16], 5);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(&x);
        let g = tape.leaf(&Tensor::filled(&[16], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[16]));
        let y = tape.layer_norm(xv, g, b, 1e-5);
        for row in tape.data(y).chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let x = randt(&[3, 8], 6);
        let gain = randt(&[8], 7);
        let bias = randt(&[8], 8);
        let run = |xt: &Tensor<f64>, gt: &Tensor<f64>, bt: &Tensor<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let (xv, gv, bv) = (
                tape.leaf(&xt.clone().with_grad()),
                tape.leaf(&gt.clone().with_grad()),
                tape.leaf(&bt.clone().with_grad()),
            );
            let y = tape.layer_norm(xv, gv, bv, 1e-5);
            let loss = tape.half_sum_sq(y);
            (tape, xv, gv, bv, loss)
        };
        let (tape, xv, gv, bv, loss) = run(&x, &gain, &bias);
        let grads = tape.backward(loss);
        let num_x = fd_grad(
            &x,
            |xt| {
                let (t, _, _, _, l) = run(xt, &gain, &bias);
                t.scalar(l)
            },
            1e-5,
        );
        let num_g = fd_grad(
            &gain,
            |gt| {
                let (t, _, _, _, l) = run(&x, gt, &bias);
                t.scalar(l)
            },
            1e-5,
        );
        for (a, n) in grads.get(xv).unwrap().iter().zip(num_x.iter()) {
            assert!(rel_close(*a, *n, 1e-4), "dx {a} vs {n}");
        }
        for (a, n) in grads.get(gv).unwrap().iter().zip(num_g.iter()) {
            assert!(rel_close(*a, *n, 1e-4), "dgain {a} vs {n}");
        }
        assert!(grads.get(bv).is_some());
    }

    #[test]
    fn affine_identity_and_zero() {
        let x = randt(&[3, 4], 9);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(&x);
        let w = tape.leaf(&Tensor::eye(4));
        let b = tape.leaf(&Tensor::zeros(&[4]));
        let y = tape.affine(xv, w, b);
        assert!(tape.tensor(y).max_abs_diff(&x) == 0.0);

        let zero = tape.leaf(&Tensor::zeros(&[2, 4]));
        let bias = tape.leaf(&Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
        let w2 = tape.leaf(&Tensor::zeros(&[4, 3]));
        let y2 = tape.affine(zero, w2, bias);
        assert_eq!(tape.data(y2), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn affine_matches_matmul_plus_bias_oracle() {
        let x = randt(&[2, 3, 5], 12);
        let w = randt(&[5, 4], 13);
        let b = randt(&[4], 14);
        let x2 = Tensor::new(&[6, 5], x.data().to_vec());
        let mm = matmul_oracle(&x2, &w);
        let mut tape: Tape<f64> = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = tape.affine(xv, wv, bv);
        assert_eq!(tape.shape(y), &[2, 3, 4]);
        for (i, got) in tape.data(y).iter().enumerate() {
            let want = mm[i] + b.data()[i % 4];
            assert!(rel_close(*got, want, 1e-6));
        }
    }

    #[test]
    fn split_heads_index_arithmetic() {
        // n=2, h=2, d=3: element (row 1, col 4) lands at head 1, row 1, col 1.
        let x = Tensor::new(&[2, 6], (0..12).map(|i| i as f64).collect::<Vec<_>>());
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.split_heads(xv, 2);
        assert_eq!(tape.shape(y), &[2, 2, 3]);
        let val = x.data()[1 * 6 + 4];
        // index (h=1, n=1, c=1) in (2,2,3)
        assert_eq!(tape.data(y)[1 * 2 * 3 + 1 * 3 + 1], val);
    }

    #[test]
    fn split_merge_round_trip_bitwise() {
        let x = randt(&[6, 8], 15);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.split_heads(xv, 4);
        let m = tape.merge_heads(s);
        assert!(tape.tensor(m).bitwise_eq(&x));
    }

    #[test]
    fn split_heads_reference_shape() {
        // 77×640 with 10 heads → (10, 77, 64)
        let x = Tensor::<f64>::zeros(&[77, 640]);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.split_heads(xv, 10);
        assert_eq!(tape.shape(y), &[10, 77, 64]);
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn split_heads_divisibility_violation() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 7]));
        tape.split_heads(x, 2);
    }

    #[test]
    fn backprop_sum_gives_ones() {
        let x = randt(&[3, 3], 16).with_grad();
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(&x);
        let loss = tape.sum_all(xv);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(xv).unwrap(), &[1.0; 9]);
    }

    #[test]
    fn backprop_half_sum_sq_gives_input() {
        let x = randt(&[5], 17).with_grad();
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(&x);
        let loss = tape.half_sum_sq(xv);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(xv).unwrap(), x.data());
    }

    #[test]
    fn backprop_through_attention_block_matches_fd() {
        // softmax((q·kᵀ)/√d)·v with all three inputs trainable
        let q = randt(&[3, 4], 18);
        let k = randt(&[5, 4], 19);
        let v = randt(&[5, 4], 20);
        let run = |qt: &Tensor<f64>, kt: &Tensor<f64>, vt: &Tensor<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let qv = tape.leaf(&qt.clone().with_grad());
            let kv = tape.leaf(&kt.clone().with_grad());
            let vv = tape.leaf(&vt.clone().with_grad());
            let s = tape.matmul_nt(qv, kv);
            let s = tape.scale(s, 0.5);
            let p = tape.softmax_rows(s);
            let o = tape.matmul(p, vv);
            let loss = tape.half_sum_sq(o);
            (tape, qv, kv, vv, loss)
        };
        let (tape, qv, kv, vv, loss) = run(&q, &k, &v);
        let grads = tape.backward(loss);
        for (tensor, var, tag) in [(&q, qv, "q"), (&k, kv, "k"), (&v, vv, "v")] {
            let num = fd_grad(
                tensor,
                |t| {
                    let (tp, _, _, _, l) = match tag {
                        "q" => run(t, &k, &v),
                        "k" => run(&q, t, &v),
                        _ => run(&q, &k, t),
                    };
                    tp.scalar(l)
                },
                1e-5,
            );
            for (a, n) in grads.get(var).unwrap().iter().zip(num.iter()) {
                assert!(rel_close(*a, *n, 1e-5), "{tag}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn backprop_ignores_frozen_leaves() {
        let x = randt(&[4], 21); // requires_grad defaults to false
        let w = randt(&[4], 22).with_grad();
        let mut tape: Tape<f64> = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let y = tape.add(xv, wv);
        let loss = tape.half_sum_sq(y);
        let grads = tape.backward(loss);
        assert!(grads.get(xv).is_none());
        assert!(grads.get(wv).is_some());
    }

    #[test]
    fn permute_rows_round_trip() {
        let x = randt(&[16, 3], 23);
        let perm = Arc::new(crate::tensor::merge2x2_perm(4));
        let inv = Arc::new(crate::tensor::invert_perm(&perm));
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(&x);
        let p = tape.permute_rows(xv, perm);
        let back = tape.permute_rows(p, inv);
        assert!(tape.tensor(back).bitwise_eq(&x));
    }

    #[test]
    fn ops_are_deterministic() {
        let a = randt(&[17, 31], 24);
        let b = randt(&[31, 9], 25);
        let run = || {
            let mut tape: Tape<f64> = Tape::new();
            let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
            let c = tape.matmul(av, bv);
            let s = tape.softmax_rows(c);
            tape.tensor(s)
        };
        assert!(run().bitwise_eq(&run()));
    }

    proptest! {
        #[test]
        fn prop_softmax_rows_sum_to_one(seed in 0u64..500, rows in 1usize..6, cols in 1usize..9) {
            let mut rng = Rng::seeded(seed);
            let mut data = vec![0.0f64; rows * cols];
            rng.fill_uniform(&mut data, -30.0, 30.0);
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(&Tensor::new(&[rows, cols], data));
            let y = tape.softmax_rows(x);
            for row in tape.data(y).chunks(cols) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn prop_split_merge_bitwise_identity(seed in 0u64..500, n in 1usize..8, h in 1usize..5, d in 1usize..6) {
            let mut rng = Rng::seeded(seed);
            let mut data = vec![0.0f64; n * h * d];
            rng.fill_normal(&mut data, 2.0);
            let x = Tensor::new(&[n, h * d], data);
            let mut tape: Tape<f64> = Tape::new();
            let xv = tape.leaf(&x);
            let s = tape.split_heads(xv, h);
            let m = tape.merge_heads(s);
            prop_assert!(tape.tensor(m).bitwise_eq(&x));
        }
    }
}
