//! Dense row-major tensors, the named parameter store, and the raw numeric
//! kernels the tape is built on.
//!
//! Tensors are immutable value buffers behind an `Arc`, so snapshotting a
//! parameter onto a tape is a pointer copy. All kernels accumulate into the
//! output buffer with a fixed iteration order; identical inputs give bitwise
//! identical outputs regardless of worker count.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::num::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    /// Marks parameters that receive gradients; plain values leave it false.
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor: shape {:?} implies {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![T::ZERO; n])
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(&[1], vec![v])
    }

    /// Identity matrix (d, d).
    pub fn eye(d: usize) -> Self {
        let mut data = vec![T::ZERO; d * d];
        for i in 0..d {
            data[i * d + i] = T::ONE;
        }
        Tensor::new(&[d, d], data)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn from_arc(shape: &[usize], data: Arc<Vec<T>>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "tensor: shape/data mismatch");
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    /// Same buffer, new shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        Tensor::from_arc(shape, self.data_arc())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Mutable access to the element buffer, copying if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        let v: &mut Vec<T> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor::new(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|x| x.to_f32())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|x| x.to_f64())
    }

    /// Exact element-wise equality (bitwise for finite values).
    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub fn from_f32<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    t.map(|x| T::from_f32(x))
}

// ── Parameter store ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
    /// Populated by backprop; same length as the value buffer.
    pub grad: Option<Vec<T>>,
}

/// Named tensors with per-name trainable flags. Iteration order is the
/// lexicographic name order, which makes every consumer deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, mut value: Tensor<T>, trainable: bool) {
        assert!(
            !self.map.contains_key(name),
            "param store: duplicate name {name}"
        );
        value.requires_grad = trainable;
        self.map.insert(
            name.to_string(),
            Param {
                value,
                trainable,
                grad: None,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("param store: missing {name}"))
            .value
    }

    pub fn param(&self, name: &str) -> &Param<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("param store: missing {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param<T> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("param store: missing {name}"))
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Marks every name starting with `prefix` (un)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.map.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
                p.value.requires_grad = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.map.values_mut() {
            p.trainable = trainable;
            p.value.requires_grad = trainable;
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.map.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `scale * grad` into the stored gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[T], scale: T) {
        let p = self.param_mut(name);
        assert_eq!(
            p.value.numel(),
            grad.len(),
            "grad length mismatch for {name}"
        );
        let slot = p.grad.get_or_insert_with(|| vec![T::ZERO; grad.len()]);
        for (s, &g) in slot.iter_mut().zip(grad.iter()) {
            *s = *s + scale * g;
        }
    }

    /// Frozen parameters must never carry gradients; asserted once per
    /// optimizer step.
    pub fn assert_frozen_clean(&self) {
        for (k, p) in self.map.iter() {
            if !p.trainable {
                assert!(p.grad.is_none(), "frozen parameter {k} received a gradient");
            }
        }
    }

    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, p) in self.map.iter() {
            out.insert(k, p.value.map(|x| U::from_f64(x.to_f64())), p.trainable);
        }
        out
    }

    pub fn total_elems(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }
}

// ── Raw kernels ───────────────────────────────────────────────────────
//
// All matmul kernels accumulate into `out` (callers zero-fill for a plain
// product). The dot kernel keeps eight independent partial sums so the
// reduction order is fixed and the loop vectorizes.

#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    let chunks = n / 8;
    let mut acc = [T::ZERO; 8];
    for c in 0..chunks {
        let xo = &x[c * 8..c * 8 + 8];
        let yo = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + xo[l] * yo[l];
        }
    }
    let mut tail = T::ZERO;
    for r in chunks * 8..n {
        tail = tail + x[r] * y[r];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy_row<T: Scalar>(out: &mut [T], x: &[T], a: T) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = *o + a * v;
    }
}

/// out(m,n) += a(m,k) · b(k,n)
///
/// Four rows of b are folded per pass over the output row, which quarters
/// the store traffic; the summation order is fixed.
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (ar[p], ar[p + 1], ar[p + 2], ar[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                or[j] = or[j] + (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            p += 4;
        }
        while p < k {
            axpy_row(or, &b[p * n..(p + 1) * n], ar[p]);
            p += 1;
        }
    }
}

/// out(m,p) += a(m,q) · b(p,q)ᵀ
///
/// Two a-rows against two b-rows per tile, so each load feeds four dot
/// products.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, q: usize, p: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * q);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), m * p);
    let mut i = 0;
    while i + 2 <= m {
        let a0 = &a[i * q..(i + 1) * q];
        let a1 = &a[(i + 1) * q..(i + 2) * q];
        let mut j = 0;
        while j + 2 <= p {
            let b0 = &b[j * q..(j + 1) * q];
            let b1 = &b[(j + 1) * q..(j + 2) * q];
            let (mut s00, mut s01, mut s10, mut s11) = (T::ZERO, T::ZERO, T::ZERO, T::ZERO);
            for t in 0..q {
                let (x0, x1, y0, y1) = (a0[t], a1[t], b0[t], b1[t]);
                s00 = s00 + x0 * y0;
                s01 = s01 + x0 * y1;
                s10 = s10 + x1 * y0;
                s11 = s11 + x1 * y1;
            }
            out[i * p + j] = out[i * p + j] + s00;
            out[i * p + j + 1] = out[i * p + j + 1] + s01;
            out[(i + 1) * p + j] = out[(i + 1) * p + j] + s10;
            out[(i + 1) * p + j + 1] = out[(i + 1) * p + j + 1] + s11;
            j += 2;
        }
        if j < p {
            let br = &b[j * q..(j + 1) * q];
            out[i * p + j] = out[i * p + j] + dot(a0, br);
            out[(i + 1) * p + j] = out[(i + 1) * p + j] + dot(a1, br);
        }
        i += 2;
    }
    if i < m {
        let ar = &a[i * q..(i + 1) * q];
        for j in 0..p {
            out[i * p + j] = out[i * p + j] + dot(ar, &b[j * q..(j + 1) * q]);
        }
    }
}

/// out(k,n) += a(m,k)ᵀ · b(m,n)
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (p, &aip) in ar.iter().enumerate() {
            axpy_row(&mut out[p * n..(p + 1) * n], br, aip);
        }
    }
}

/// Row-wise numerically stabilized softmax over the last axis, in place.
/// Panics on non-finite input.
pub fn softmax_rows_inplace<T: Scalar>(data: &mut [T], row: usize) {
    assert!(row >= 1, "softmax: empty rows");
    for r in data.chunks_mut(row) {
        let mut mx = r[0];
        for &v in r.iter() {
            assert!(v.is_finite(), "softmax: non-finite input");
            mx = mx.maxv(v);
        }
        let mut sum = T::ZERO;
        for v in r.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in r.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Grid permutation that groups each 2x2 neighborhood of a g×g row-major
/// grid into four consecutive rows; used by the token merge resample.
pub fn merge2x2_perm(g: usize) -> Vec<usize> {
    assert!(g >= 2 && g % 2 == 0, "merge2x2: grid side {g} not even");
    let mut perm = Vec::with_capacity(g * g);
    for gi in 0..g / 2 {
        for gj in 0..g / 2 {
            perm.push((2 * gi) * g + 2 * gj);
            perm.push((2 * gi) * g + 2 * gj + 1);
            perm.push((2 * gi + 1) * g + 2 * gj);
            perm.push((2 * gi + 1) * g + 2 * gj + 1);
        }
    }
    perm
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
