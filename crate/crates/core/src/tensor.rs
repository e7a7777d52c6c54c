//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! Tensors are immutable once built (parameters are mutated only between
//! forward passes, by the optimizer or by finite-difference probes) and
//! carry their provenance as an op graph behind `Rc`. `backward` walks the
//! graph once in reverse topological order and accumulates gradients into
//! every reachable tensor that requires them. The graph lives on one
//! thread; nothing here is `Send`.
//!
//! Two numeric modes exist process-wide: `F64` computes and stores at full
//! precision, `F32` rounds every stored value (op outputs and gradient
//! accumulations) through 32-bit precision. Gradient checking is only
//! meaningful in `F64`.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU8, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Precision;

// ===================== Numeric mode =====================

static MODE: AtomicU8 = AtomicU8::new(1); // 0 = f32, 1 = f64

/// Sets the process-wide numeric mode. Call once at startup; switching
/// mid-run mixes precisions and voids the determinism contract.
pub fn set_precision(p: Precision) {
    MODE.store(if p == Precision::F32 { 0 } else { 1 }, Ordering::Relaxed);
}

pub fn precision() -> Precision {
    if MODE.load(Ordering::Relaxed) == 0 {
        Precision::F32
    } else {
        Precision::F64
    }
}

/// Rounds a value to the active storage precision.
#[inline]
pub fn quantize(x: f64) -> f64 {
    if MODE.load(Ordering::Relaxed) == 0 {
        x as f32 as f64
    } else {
        x
    }
}

#[inline]
fn quantize_buf(buf: &mut [f64]) {
    if MODE.load(Ordering::Relaxed) == 0 {
        for v in buf.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

// ===================== Tensor and op graph =====================

const COSINE_EPS: f64 = 1e-12;
const CE_CLAMP: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Matmul(Tensor, Tensor),
    /// Same-shape addition.
    Add(Tensor, Tensor),
    /// `[r x c] + [c]`, the bias pattern.
    AddRow(Tensor, Tensor),
    /// `any + [1]`.
    AddScalar(Tensor, Tensor),
    /// Same-shape elementwise product.
    Mul(Tensor, Tensor),
    /// `any * [1]`.
    MulScalar(Tensor, Tensor),
    /// Multiplication by a compile-time constant.
    Scale(Tensor, f64),
    Sigmoid(Tensor),
    Relu(Tensor),
    Gelu(Tensor),
    Softmax(Tensor, usize),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
    },
    Embedding(Tensor, Vec<usize>),
    Concat(Vec<Tensor>, usize),
    Stack(Vec<Tensor>),
    SliceRows(Tensor, usize, usize),
    SliceCols(Tensor, usize, usize),
    /// Single row of a matrix, as a vector.
    Row(Tensor, usize),
    Transpose(Tensor),
    Reshape(Tensor),
    MeanPool(Tensor, usize),
    SumAll(Tensor),
    Dot(Tensor, Tensor),
    /// `out[i][j] = u[i] + v[j] + c`.
    OuterAdd(Tensor, Tensor, Tensor),
    Cosine(Tensor, Tensor),
    CrossEntropy(Tensor, usize),
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    needs_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// A handle to one node of the computation graph. Cloning is cheap and
/// aliases the same node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, mut data: Vec<f64>, needs_grad: bool, op: Op) -> Tensor {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        quantize_buf(&mut data);
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                needs_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), data, false, Op::Leaf)
    }

    /// A trainable leaf. Usually created through [`ParamStore::register`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), data, true, Op::Leaf)
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor::constant(vec![x], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![0.0; numel_of(shape)], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Overwrites the value of a leaf in place. Panics on interior nodes;
    /// the graph never rewrites history.
    pub fn set_data(&self, data: &[f64]) {
        assert!(matches!(self.inner.op, Op::Leaf), "set_data on non-leaf tensor");
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        let mut d = self.inner.data.borrow_mut();
        d.copy_from_slice(data);
        quantize_buf(&mut d);
    }

    /// Writes one coordinate of a leaf (finite-difference probes).
    pub fn set_at(&self, idx: usize, value: f64) {
        assert!(matches!(self.inner.op, Op::Leaf), "set_at on non-leaf tensor");
        self.inner.data.borrow_mut()[idx] = quantize(value);
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![0.0; self.numel()]);
    }

    fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.shape() {
            [r, c] => (*r, *c),
            s => panic!("expected a matrix, got shape {s:?}"),
        }
    }
}

fn add_grad(t: &Tensor, delta: &[f64]) {
    if !t.inner.needs_grad {
        return;
    }
    let mut g = t.inner.grad.borrow_mut();
    match g.as_mut() {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b = quantize(*b + *d);
            }
        }
        None => {
            let mut buf = delta.to_vec();
            quantize_buf(&mut buf);
            *g = Some(buf);
        }
    }
}

// ===================== Forward ops =====================

impl Tensor {
    /// Matrix product `[m x k] @ [k x n] -> [m x n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = self.rows_cols();
        let (k2, n) = rhs.rows_cols();
        assert_eq!(
            k, k2,
            "matmul shape mismatch: [{m}x{k}] @ [{k2}x{n}]"
        );
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        drop(a);
        drop(b);
        let ng = self.inner.needs_grad || rhs.inner.needs_grad;
        Tensor::new(vec![m, n], out, ng, Op::Matmul(self.clone(), rhs.clone()))
    }

    /// Elementwise/broadcast addition: same shape, `[r x c] + [c]`, or
    /// `any + [1]`.
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        let ng = self.inner.needs_grad || rhs.inner.needs_grad;
        if self.shape() == rhs.shape() {
            let out = self
                .data()
                .iter()
                .zip(rhs.data().iter())
                .map(|(a, b)| a + b)
                .collect();
            return Tensor::new(self.shape().to_vec(), out, ng, Op::Add(self.clone(), rhs.clone()));
        }
        if rhs.numel() == 1 {
            let s = rhs.data()[0];
            let out = self.data().iter().map(|a| a + s).collect();
            return Tensor::new(
                self.shape().to_vec(),
                out,
                ng,
                Op::AddScalar(self.clone(), rhs.clone()),
            );
        }
        if let ([r, c], [c2]) = (self.shape(), rhs.shape()) {
            assert_eq!(
                c, c2,
                "add shape mismatch: [{r}x{c}] + [{c2}]"
            );
            let b = rhs.data();
            let mut out = self.to_vec();
            for row in out.chunks_mut(*c) {
                for (o, bv) in row.iter_mut().zip(b.iter()) {
                    *o += bv;
                }
            }
            drop(b);
            return Tensor::new(
                self.shape().to_vec(),
                out,
                ng,
                Op::AddRow(self.clone(), rhs.clone()),
            );
        }
        panic!(
            "add shape mismatch: {:?} + {:?}",
            self.shape(),
            rhs.shape()
        );
    }

    /// Elementwise product: same shape or `any * [1]`.
    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        let ng = self.inner.needs_grad || rhs.inner.needs_grad;
        if self.shape() == rhs.shape() {
            let out = self
                .data()
                .iter()
                .zip(rhs.data().iter())
                .map(|(a, b)| a * b)
                .collect();
            return Tensor::new(self.shape().to_vec(), out, ng, Op::Mul(self.clone(), rhs.clone()));
        }
        if rhs.numel() == 1 {
            let s = rhs.data()[0];
            let out = self.data().iter().map(|a| a * s).collect();
            return Tensor::new(
                self.shape().to_vec(),
                out,
                ng,
                Op::MulScalar(self.clone(), rhs.clone()),
            );
        }
        panic!(
            "mul shape mismatch: {:?} * {:?}",
            self.shape(),
            rhs.shape()
        );
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|a| a * c).collect();
        Tensor::new(
            self.shape().to_vec(),
            out,
            self.inner.needs_grad,
            Op::Scale(self.clone(), c),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        Tensor::new(
            self.shape().to_vec(),
            out,
            self.inner.needs_grad,
            Op::Sigmoid(self.clone()),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        Tensor::new(
            self.shape().to_vec(),
            out,
            self.inner.needs_grad,
            Op::Relu(self.clone()),
        )
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
    pub fn gelu(&self) -> Tensor {
        let out = self.data().iter().map(|&x| gelu_scalar(x)).collect();
        Tensor::new(
            self.shape().to_vec(),
            out,
            self.inner.needs_grad,
            Op::Gelu(self.clone()),
        )
    }

    /// Softmax along `axis`. For matrices, axis 1 normalizes each row and
    /// axis 0 each column; vectors use axis 0. The maximum is subtracted
    /// per group before exponentiation, so arbitrarily large inputs stay
    /// finite and all-equal groups come out exactly uniform.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let mut out = self.to_vec();
        match *self.shape() {
            [n] => {
                assert_eq!(axis, 0, "softmax axis {axis} on a vector");
                softmax_group(&mut out, 0, n, 1);
            }
            [r, c] => match axis {
                1 => {
                    for i in 0..r {
                        softmax_group(&mut out, i * c, c, 1);
                    }
                }
                0 => {
                    for j in 0..c {
                        softmax_group(&mut out, j, r, c);
                    }
                }
                _ => panic!("softmax axis {axis} on a matrix"),
            },
            ref s => panic!("softmax on shape {s:?}"),
        }
        Tensor::new(
            self.shape().to_vec(),
            out,
            self.inner.needs_grad,
            Op::Softmax(self.clone(), axis),
        )
    }

    /// Per-row layer normalization with learned gain and bias over the
    /// last dimension. A zero-variance row normalizes to zeros (epsilon
    /// 1e-5 inside the square root).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Tensor {
        let d = *self.shape().last().expect("layer_norm on empty shape");
        assert_eq!(gain.shape(), &[d], "layer_norm gain shape {:?} != [{d}]", gain.shape());
        assert_eq!(bias.shape(), &[d], "layer_norm bias shape {:?} != [{d}]", bias.shape());
        let x = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut out = vec![0.0; x.len()];
        for (orow, xrow) in out.chunks_mut(d).zip(x.chunks(d)) {
            let (mean, inv_std) = row_moments(xrow);
            for j in 0..d {
                orow[j] = g[j] * (xrow[j] - mean) * inv_std + b[j];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        let ng = self.inner.needs_grad || gain.inner.needs_grad || bias.inner.needs_grad;
        Tensor::new(
            self.shape().to_vec(),
            out,
            ng,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
            },
        )
    }

    /// Gathers rows of `self` (a `[V x d]` table) by id: `out[i] =
    /// table[ids[i]]`. Gradients scatter-add back into the gathered rows,
    /// so repeated ids accumulate.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Tensor {
        let (v, d) = self.rows_cols();
        let table = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range for table with {v} rows");
            out.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        drop(table);
        Tensor::new(
            vec![ids.len(), d],
            out,
            self.inner.needs_grad,
            Op::Embedding(self.clone(), ids.to_vec()),
        )
    }

    /// Concatenates along `axis`. Vectors concatenate along axis 0;
    /// matrices along rows (0) or columns (1).
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let ng = parts.iter().any(|p| p.inner.needs_grad);
        let first = parts[0].shape().to_vec();
        if first.len() == 1 {
            assert_eq!(axis, 0, "concat axis {axis} on vectors");
            let mut out = Vec::new();
            for p in parts {
                assert_eq!(p.shape().len(), 1, "concat rank mismatch");
                out.extend_from_slice(&p.data());
            }
            let n = out.len();
            return Tensor::new(vec![n], out, ng, Op::Concat(parts.to_vec(), 0));
        }
        match axis {
            0 => {
                let c = first[1];
                let mut out = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let (r, pc) = p.rows_cols();
                    assert_eq!(pc, c, "concat column mismatch: {pc} vs {c}");
                    out.extend_from_slice(&p.data());
                    rows += r;
                }
                Tensor::new(vec![rows, c], out, ng, Op::Concat(parts.to_vec(), 0))
            }
            1 => {
                let r = first[0];
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| {
                        let (pr, pc) = p.rows_cols();
                        assert_eq!(pr, r, "concat row mismatch: {pr} vs {r}");
                        pc
                    })
                    .collect();
                let total: usize = widths.iter().sum();
                let mut out = vec![0.0; r * total];
                let mut off = 0;
                for (p, w) in parts.iter().zip(&widths) {
                    let d = p.data();
                    for i in 0..r {
                        out[i * total + off..i * total + off + w]
                            .copy_from_slice(&d[i * w..(i + 1) * w]);
                    }
                    off += w;
                }
                Tensor::new(vec![r, total], out, ng, Op::Concat(parts.to_vec(), 1))
            }
            _ => panic!("concat axis {axis} unsupported"),
        }
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack(rows: &[Tensor]) -> Tensor {
        assert!(!rows.is_empty(), "stack of zero tensors");
        let d = rows[0].numel();
        let ng = rows.iter().any(|p| p.inner.needs_grad);
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            assert_eq!(r.shape(), &[d], "stack expects [{d}] vectors, got {:?}", r.shape());
            out.extend_from_slice(&r.data());
        }
        Tensor::new(vec![rows.len(), d], out, ng, Op::Stack(rows.to_vec()))
    }

    /// Rows `r0..r1` as a new matrix.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Tensor {
        let (r, c) = self.rows_cols();
        assert!(r0 < r1 && r1 <= r, "slice_rows {r0}..{r1} out of range for {r} rows");
        let out = self.data()[r0 * c..r1 * c].to_vec();
        Tensor::new(
            vec![r1 - r0, c],
            out,
            self.inner.needs_grad,
            Op::SliceRows(self.clone(), r0, r1),
        )
    }

    /// Columns `c0..c1` as a new matrix.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Tensor {
        let (r, c) = self.rows_cols();
        assert!(c0 < c1 && c1 <= c, "slice_cols {c0}..{c1} out of range for {c} columns");
        let d = self.data();
        let w = c1 - c0;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + c0..i * c + c1]);
        }
        drop(d);
        Tensor::new(
            vec![r, w],
            out,
            self.inner.needs_grad,
            Op::SliceCols(self.clone(), c0, c1),
        )
    }

    /// Row `i` as a vector.
    pub fn row(&self, i: usize) -> Tensor {
        let (r, c) = self.rows_cols();
        assert!(i < r, "row {i} out of range for {r} rows");
        let out = self.data()[i * c..(i + 1) * c].to_vec();
        Tensor::new(vec![c], out, self.inner.needs_grad, Op::Row(self.clone(), i))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.rows_cols();
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        drop(d);
        Tensor::new(vec![c, r], out, self.inner.needs_grad, Op::Transpose(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape {:?} -> {shape:?} changes element count",
            self.shape()
        );
        Tensor::new(
            shape.to_vec(),
            self.to_vec(),
            self.inner.needs_grad,
            Op::Reshape(self.clone()),
        )
    }

    /// Mean along `axis`: a matrix pools to a vector (axis 0 averages
    /// rows, axis 1 averages each row); a vector pools to a scalar.
    pub fn mean_pool(&self, axis: usize) -> Tensor {
        match *self.shape() {
            [n] => {
                assert_eq!(axis, 0, "mean_pool axis {axis} on a vector");
                let m = self.data().iter().sum::<f64>() / n as f64;
                Tensor::new(vec![1], vec![m], self.inner.needs_grad, Op::MeanPool(self.clone(), 0))
            }
            [r, c] => {
                let d = self.data();
                let out = match axis {
                    0 => {
                        let mut acc = vec![0.0; c];
                        for row in d.chunks(c) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        acc.iter().map(|a| a / r as f64).collect::<Vec<_>>()
                    }
                    1 => d.chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect(),
                    _ => panic!("mean_pool axis {axis} on a matrix"),
                };
                drop(d);
                let len = out.len();
                Tensor::new(
                    vec![len],
                    out,
                    self.inner.needs_grad,
                    Op::MeanPool(self.clone(), axis),
                )
            }
            ref s => panic!("mean_pool on shape {s:?}"),
        }
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::new(vec![1], vec![s], self.inner.needs_grad, Op::SumAll(self.clone()))
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "dot shape mismatch: {:?} . {:?}",
            self.shape(),
            rhs.shape()
        );
        assert_eq!(self.shape().len(), 1, "dot expects vectors");
        let s = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a * b).sum();
        let ng = self.inner.needs_grad || rhs.inner.needs_grad;
        Tensor::new(vec![1], vec![s], ng, Op::Dot(self.clone(), rhs.clone()))
    }

    /// `out[i][j] = u[i] + v[j] + c` for vectors `u` `v` and scalar `c`.
    pub fn outer_add(u: &Tensor, v: &Tensor, c: &Tensor) -> Tensor {
        let (m, n) = (u.numel(), v.numel());
        assert_eq!(u.shape(), &[m], "outer_add u must be a vector");
        assert_eq!(v.shape(), &[n], "outer_add v must be a vector");
        assert_eq!(c.numel(), 1, "outer_add c must be a scalar");
        let (ud, vd) = (u.data(), v.data());
        let cv = c.data()[0];
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(ud[i] + vd[j] + cv);
            }
        }
        drop(ud);
        drop(vd);
        let ng = u.inner.needs_grad || v.inner.needs_grad || c.inner.needs_grad;
        Tensor::new(
            vec![m, n],
            out,
            ng,
            Op::OuterAdd(u.clone(), v.clone(), c.clone()),
        )
    }

    /// Cosine similarity of two vectors with an epsilon-guarded
    /// denominator: `a.b / (|a||b| + 1e-12)`. Two zero vectors give 0.
    pub fn cosine_similarity(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "cosine shape mismatch: {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        assert_eq!(self.shape().len(), 1, "cosine_similarity expects vectors");
        let (a, b) = (self.data(), rhs.data());
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = dot / (na * nb + COSINE_EPS);
        drop(a);
        drop(b);
        let ng = self.inner.needs_grad || rhs.inner.needs_grad;
        Tensor::new(vec![1], vec![s], ng, Op::Cosine(self.clone(), rhs.clone()))
    }

    /// Negative log-likelihood of `target` under a probability vector,
    /// clamped below at 1e-12 so a zero probability stays finite.
    pub fn cross_entropy(&self, target: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "cross_entropy expects a probability vector");
        assert!(
            target < self.numel(),
            "cross_entropy target {target} out of range for {} classes",
            self.numel()
        );
        let p = self.data()[target];
        let loss = -(p.max(CE_CLAMP)).ln();
        Tensor::new(
            vec![1],
            vec![loss],
            self.inner.needs_grad,
            Op::CrossEntropy(self.clone(), target),
        )
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_group(buf: &mut [f64], start: usize, len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for k in 0..len {
        max = max.max(buf[start + k * stride]);
    }
    let mut sum = 0.0;
    for k in 0..len {
        let e = (buf[start + k * stride] - max).exp();
        buf[start + k * stride] = e;
        sum += e;
    }
    for k in 0..len {
        buf[start + k * stride] /= sum;
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

// ===================== Backward =====================

impl Tensor {
    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into
    /// every reachable tensor with `needs_grad`; leaves that were
    /// `zero_grad`-initialized but unreachable keep their zeros.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape()
        );
        let order = topo_order(self);
        add_grad(self, &[1.0]);
        for node in order.iter().rev() {
            let g = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            backward_step(node, &g);
        }
        // Interior nodes are transient; only leaves keep their gradients.
        for node in order {
            if !matches!(node.inner.op, Op::Leaf) && !Rc::ptr_eq(&node.inner, &self.inner) {
                node.clear_grad();
            }
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    // Iterative post-order; recursion would overflow on long decode chains.
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) || !node.inner.needs_grad {
            continue;
        }
        stack.push((node.clone(), true));
        for_each_parent(&node.inner.op, &mut |p| {
            if p.inner.needs_grad && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        });
    }
    order
}

fn for_each_parent(op: &Op, f: &mut dyn FnMut(&Tensor)) {
    match op {
        Op::Leaf => {}
        Op::Matmul(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::AddScalar(a, b)
        | Op::Mul(a, b)
        | Op::MulScalar(a, b)
        | Op::Dot(a, b)
        | Op::Cosine(a, b) => {
            f(a);
            f(b);
        }
        Op::Scale(a, _)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Gelu(a)
        | Op::Softmax(a, _)
        | Op::Embedding(a, _)
        | Op::SliceRows(a, _, _)
        | Op::SliceCols(a, _, _)
        | Op::Row(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::MeanPool(a, _)
        | Op::SumAll(a)
        | Op::CrossEntropy(a, _) => f(a),
        Op::LayerNorm { x, gain, bias } => {
            f(x);
            f(gain);
            f(bias);
        }
        Op::OuterAdd(u, v, c) => {
            f(u);
            f(v);
            f(c);
        }
        Op::Concat(parts, _) | Op::Stack(parts) => {
            for p in parts {
                f(p);
            }
        }
    }
}

fn backward_step(node: &Tensor, g: &[f64]) {
    match &node.inner.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = a.rows_cols();
            let n = b.shape()[1];
            if a.inner.needs_grad {
                let bd = b.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for (p, dv) in darow.iter_mut().enumerate() {
                        let brow = &bd[p * n..(p + 1) * n];
                        *dv = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                drop(bd);
                add_grad(a, &da);
            }
            if b.inner.needs_grad {
                let ad = a.data();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &ad[i * k..(i + 1) * k];
                    for (p, &av) in arow.iter().enumerate() {
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        for (dv, gv) in dbrow.iter_mut().zip(grow) {
                            *dv += av * gv;
                        }
                    }
                }
                drop(ad);
                add_grad(b, &db);
            }
        }
        Op::Add(a, b) => {
            add_grad(a, g);
            add_grad(b, g);
        }
        Op::AddRow(a, b) => {
            add_grad(a, g);
            if b.inner.needs_grad {
                let c = b.numel();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                add_grad(b, &db);
            }
        }
        Op::AddScalar(a, s) => {
            add_grad(a, g);
            add_grad(s, &[g.iter().sum()]);
        }
        Op::Mul(a, b) => {
            if a.inner.needs_grad {
                let bd = b.data();
                let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(x, y)| x * y).collect();
                drop(bd);
                add_grad(a, &da);
            }
            if b.inner.needs_grad {
                let ad = a.data();
                let db: Vec<f64> = g.iter().zip(ad.iter()).map(|(x, y)| x * y).collect();
                drop(ad);
                add_grad(b, &db);
            }
        }
        Op::MulScalar(a, s) => {
            if a.inner.needs_grad {
                let sv = s.data()[0];
                let da: Vec<f64> = g.iter().map(|x| x * sv).collect();
                add_grad(a, &da);
            }
            if s.inner.needs_grad {
                let ad = a.data();
                let ds: f64 = g.iter().zip(ad.iter()).map(|(x, y)| x * y).sum();
                drop(ad);
                add_grad(s, &[ds]);
            }
        }
        Op::Scale(a, c) => {
            let da: Vec<f64> = g.iter().map(|x| x * c).collect();
            add_grad(a, &da);
        }
        Op::Sigmoid(a) => {
            let y = node.data();
            let da: Vec<f64> = g.iter().zip(y.iter()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
            drop(y);
            add_grad(a, &da);
        }
        Op::Relu(a) => {
            let x = a.data();
            let da: Vec<f64> = g
                .iter()
                .zip(x.iter())
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect();
            drop(x);
            add_grad(a, &da);
        }
        Op::Gelu(a) => {
            let x = a.data();
            let da: Vec<f64> =
                g.iter().zip(x.iter()).map(|(gv, xv)| gv * gelu_derivative(*xv)).collect();
            drop(x);
            add_grad(a, &da);
        }
        Op::Softmax(a, axis) => {
            // dx = y * (g - sum(g * y)) per normalization group.
            let y = node.data();
            let mut da = vec![0.0; y.len()];
            let groups: Vec<(usize, usize, usize)> = match *node.shape() {
                [n] => vec![(0, n, 1)],
                [r, c] => {
                    if *axis == 1 {
                        (0..r).map(|i| (i * c, c, 1)).collect()
                    } else {
                        (0..c).map(|j| (j, r, c)).collect()
                    }
                }
                _ => unreachable!(),
            };
            for (start, len, stride) in groups {
                let mut inner = 0.0;
                for k in 0..len {
                    let idx = start + k * stride;
                    inner += g[idx] * y[idx];
                }
                for k in 0..len {
                    let idx = start + k * stride;
                    da[idx] = y[idx] * (g[idx] - inner);
                }
            }
            drop(y);
            add_grad(a, &da);
        }
        Op::LayerNorm { x, gain, bias } => {
            let d = *node.shape().last().unwrap();
            let xd = x.data();
            let gd = gain.data();
            let rows = xd.len() / d;
            let mut dx = vec![0.0; xd.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let xrow = &xd[r * d..(r + 1) * d];
                let grow = &g[r * d..(r + 1) * d];
                let (mean, inv_std) = row_moments(xrow);
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for j in 0..d {
                    xhat[j] = (xrow[j] - mean) * inv_std;
                    dxhat[j] = grow[j] * gd[j];
                    sum_dxhat += dxhat[j];
                    sum_dxhat_xhat += dxhat[j] * xhat[j];
                    dgain[j] += grow[j] * xhat[j];
                    dbias[j] += grow[j];
                }
                let dn = d as f64;
                for j in 0..d {
                    dx[r * d + j] =
                        inv_std / dn * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
            drop(xd);
            drop(gd);
            add_grad(x, &dx);
            add_grad(gain, &dgain);
            add_grad(bias, &dbias);
        }
        Op::Embedding(table, ids) => {
            if table.inner.needs_grad {
                let (v, d) = table.rows_cols();
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                add_grad(table, &dt);
            }
        }
        Op::Concat(parts, axis) => {
            if parts[0].shape().len() == 1 || *axis == 0 {
                let mut off = 0;
                for p in parts {
                    let n = p.numel();
                    add_grad(p, &g[off..off + n]);
                    off += n;
                }
            } else {
                let r = parts[0].shape()[0];
                let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
                let mut off = 0;
                for p in parts {
                    let w = p.shape()[1];
                    if p.inner.needs_grad {
                        let mut dp = vec![0.0; r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        add_grad(p, &dp);
                    }
                    off += w;
                }
            }
        }
        Op::Stack(rows) => {
            let d = rows[0].numel();
            for (i, p) in rows.iter().enumerate() {
                add_grad(p, &g[i * d..(i + 1) * d]);
            }
        }
        Op::SliceRows(a, r0, _r1) => {
            if a.inner.needs_grad {
                let (r, c) = a.rows_cols();
                let mut da = vec![0.0; r * c];
                da[r0 * c..r0 * c + g.len()].copy_from_slice(g);
                add_grad(a, &da);
            }
        }
        Op::SliceCols(a, c0, c1) => {
            if a.inner.needs_grad {
                let (r, c) = a.rows_cols();
                let w = c1 - c0;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + c0..i * c + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                add_grad(a, &da);
            }
        }
        Op::Row(a, i) => {
            if a.inner.needs_grad {
                let (r, c) = a.rows_cols();
                let mut da = vec![0.0; r * c];
                da[i * c..(i + 1) * c].copy_from_slice(g);
                add_grad(a, &da);
            }
        }
        Op::Transpose(a) => {
            if a.inner.needs_grad {
                let (r, c) = a.rows_cols();
                let mut da = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = g[i * r + j];
                    }
                }
                add_grad(a, &da);
            }
        }
        Op::Reshape(a) => {
            add_grad(a, g);
        }
        Op::MeanPool(a, axis) => {
            if a.inner.needs_grad {
                match *a.shape() {
                    [n] => {
                        let da = vec![g[0] / n as f64; n];
                        add_grad(a, &da);
                    }
                    [r, c] => {
                        let mut da = vec![0.0; r * c];
                        if *axis == 0 {
                            for i in 0..r {
                                for j in 0..c {
                                    da[i * c + j] = g[j] / r as f64;
                                }
                            }
                        } else {
                            for i in 0..r {
                                for j in 0..c {
                                    da[i * c + j] = g[i] / c as f64;
                                }
                            }
                        }
                        add_grad(a, &da);
                    }
                    _ => unreachable!(),
                }
            }
        }
        Op::SumAll(a) => {
            let da = vec![g[0]; a.numel()];
            add_grad(a, &da);
        }
        Op::Dot(a, b) => {
            if a.inner.needs_grad {
                let bd = b.data();
                let da: Vec<f64> = bd.iter().map(|v| g[0] * v).collect();
                drop(bd);
                add_grad(a, &da);
            }
            if b.inner.needs_grad {
                let ad = a.data();
                let db: Vec<f64> = ad.iter().map(|v| g[0] * v).collect();
                drop(ad);
                add_grad(b, &db);
            }
        }
        Op::OuterAdd(u, v, c) => {
            let (m, n) = (u.numel(), v.numel());
            if u.inner.needs_grad {
                let du: Vec<f64> = (0..m).map(|i| g[i * n..(i + 1) * n].iter().sum()).collect();
                add_grad(u, &du);
            }
            if v.inner.needs_grad {
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dv[j] += g[i * n + j];
                    }
                }
                add_grad(v, &dv);
            }
            add_grad(c, &[g.iter().sum()]);
        }
        Op::Cosine(a, b) => {
            // s = a.b / D with D = |a||b| + eps;
            // ds/da = b/D - s * |b| * a / (D * |a|), norm term dropped at |a| = 0.
            let ad = a.data();
            let bd = b.data();
            let dot: f64 = ad.iter().zip(bd.iter()).map(|(x, y)| x * y).sum();
            let na = ad.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = bd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dd = na * nb + COSINE_EPS;
            let s = dot / dd;
            if a.inner.needs_grad {
                let coef = if na > 0.0 { s * nb / (dd * na) } else { 0.0 };
                let da: Vec<f64> = ad
                    .iter()
                    .zip(bd.iter())
                    .map(|(av, bv)| g[0] * (bv / dd - coef * av))
                    .collect();
                add_grad(a, &da);
            }
            if b.inner.needs_grad {
                let coef = if nb > 0.0 { s * na / (dd * nb) } else { 0.0 };
                let db: Vec<f64> = ad
                    .iter()
                    .zip(bd.iter())
                    .map(|(av, bv)| g[0] * (av / dd - coef * bv))
                    .collect();
                add_grad(b, &db);
            }
        }
        Op::CrossEntropy(dist, target) => {
            if dist.inner.needs_grad {
                let p = dist.data()[*target];
                let mut dd = vec![0.0; dist.numel()];
                if p > CE_CLAMP {
                    dd[*target] = -g[0] / p;
                }
                add_grad(dist, &dd);
            }
        }
    }
}

// ===================== Parameter store =====================

/// Named trainable parameters. Iteration order is always lexicographic by
/// name, which fixes optimizer update order, checkpoint layout, and
/// gradient-check traversal.
#[derive(Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { map: BTreeMap::new() }
    }

    /// Registers a new trainable tensor under a unique name and returns a
    /// handle to it.
    pub fn register(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert!(
            !self.map.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let t = Tensor::param(data, shape);
        self.map.insert(name.to_string(), t.clone());
        t
    }

    pub fn get(&self, name: &str) -> Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .clone()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn total_params(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Resets every parameter's gradient to zeros, so parameters a forward
    /// pass never touches still report a (zero) gradient afterwards.
    pub fn zero_grad(&self) {
        for t in self.map.values() {
            t.zero_grad();
        }
    }

    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .map(|(n, t)| (n.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }
}

// ===================== Initialization =====================

/// Deterministic normal draws via Box-Muller over a seeded stream.
pub fn normal_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-18);
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        out.push(r * t.cos() * std);
        if out.len() < n {
            out.push(r * t.sin() * std);
        }
    }
    out
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ===================== Gradient checking =====================

/// Result of comparing analytic gradients against fourth-order
/// finite differences (five-point stencil), so the comparison is free of
/// the O(eps^2) truncation error that deep softmax/layer-norm stacks
/// otherwise exhibit. `max_rel_error` uses `|a - n| / max(|a|, |n|, 1e-6)`.
/// The 1e-6 floor reflects what differencing can resolve in f64: an
/// objective of magnitude F carries roundoff of order F*ulp/eps (~1e-10
/// for F~10, eps=1e-4), so coordinates whose true gradient sits near that
/// noise are floored rather than reported as huge relative errors. A
/// wrong gradient RULE still surfaces — its error scales with the
/// gradient itself, not with the roundoff.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub per_param: BTreeMap<String, f64>,
}

impl GradReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

/// Checks every coordinate of every parameter. Only practical for small
/// stores; use [`grad_check_sampled`] for full models.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64) -> GradReport
where
    F: Fn(&ParamStore) -> Tensor,
{
    grad_check_impl(f, params, eps, None, 0)
}

/// Checks a deterministic sample of `per_param` coordinates per parameter
/// tensor (all of them when the tensor is smaller than the sample).
pub fn grad_check_sampled<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> GradReport
where
    F: Fn(&ParamStore) -> Tensor,
{
    grad_check_impl(f, params, eps, Some(per_param), seed)
}

fn grad_check_impl<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
    per_param: Option<usize>,
    seed: u64,
) -> GradReport
where
    F: Fn(&ParamStore) -> Tensor,
{
    params.zero_grad();
    let loss = f(params);
    assert_eq!(loss.numel(), 1, "grad_check objective must be scalar");
    loss.backward();
    let analytic = params.grads();

    let mut per_param_err: BTreeMap<String, f64> = BTreeMap::new();
    let mut worst = ("<none>".to_string(), 0.0);
    for (name, t) in params.iter() {
        let n = t.numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => {
                let mut rng = seeded_rng(seed ^ name_hash(name));
                let mut picked: Vec<usize> = Vec::with_capacity(k);
                while picked.len() < k {
                    let c = rng.random_range(0..n);
                    if !picked.contains(&c) {
                        picked.push(c);
                    }
                }
                picked
            }
            _ => (0..n).collect(),
        };
        let base = t.to_vec();
        let a = &analytic[name];
        let mut max_err = 0.0_f64;
        for &c in &coords {
            let probe = |offset: f64| {
                t.set_at(c, base[c] + offset);
                f(params).item()
            };
            let (p2, p1, m1, m2) =
                (probe(2.0 * eps), probe(eps), probe(-eps), probe(-2.0 * eps));
            t.set_at(c, base[c]);
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * eps);
            let rel = (a[c] - numeric).abs() / a[c].abs().max(numeric.abs()).max(1e-6);
            max_err = max_err.max(rel);
        }
        per_param_err.insert(name.clone(), max_err);
        if max_err > worst.1 {
            worst = (name.clone(), max_err);
        }
    }
    GradReport {
        max_rel_error: worst.1,
        worst_param: worst.0,
        per_param: per_param_err,
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; the hash only decorrelates sampling streams across names.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ===================== Tests =====================
