//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to row-major storage plus an
//! optional gradient accumulator. Differentiable operations live on a
//! [`Tape`], which records one gradient-propagation rule per operation in
//! execution order; [`Tape::backward`] replays them in exact reverse order.
//!
//! Precision is a type parameter: the same graph code runs at 64-bit for
//! finite-difference validation and at 32-bit for training. A tape and its
//! tensors are confined to one thread (`Rc` storage enforces this at compile
//! time); independent tapes may run concurrently.

pub mod kernels;
mod optim;

pub use optim::Adam;

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

/// Scalar element type for tensors; implemented for `f32` and `f64`.
pub trait Elem:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Checkpoint archive dtype code.
    const DTYPE_CODE: u8;
    /// Bits per element, for diagnostics and CLI dispatch.
    const BITS: u8;
    /// Bytes per element in the serialized archive.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Elem for f32 {
    const DTYPE_CODE: u8 = 0;
    const BITS: u8 = 32;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Elem for f64 {
    const DTYPE_CODE: u8 = 1;
    const BITS: u8 = 64;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

struct TensorInner<E: Elem> {
    data: Vec<E>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

/// Shared handle to tensor storage. Cloning aliases the same buffer.
pub struct Tensor<E: Elem> {
    inner: Rc<RefCell<TensorInner<E>>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Elem> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor{:?} requires_grad={} grad={}",
            inner.shape,
            inner.requires_grad,
            inner.grad.is_some()
        )
    }
}

impl<E: Elem> Tensor<E> {
    pub fn from_vec(data: Vec<E>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                data,
                shape: shape.to_vec(),
                requires_grad,
                grad: None,
            })),
        })
    }

    pub fn from_f64s(vals: &[f64], shape: &[usize], requires_grad: bool) -> Result<Self> {
        Tensor::from_vec(vals.iter().map(|&v| E::from_f64(v)).collect(), shape, requires_grad)
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![E::zero(); numel], shape, requires_grad)
            .expect("zeros shape is consistent by construction")
    }

    pub fn full(shape: &[usize], value: f64, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![E::from_f64(value); numel], shape, requires_grad)
            .expect("full shape is consistent by construction")
    }

    /// Seeded Gaussian init with standard deviation `std`.
    pub fn randn(
        rng: &mut impl rand::Rng,
        shape: &[usize],
        std: f64,
        requires_grad: bool,
    ) -> Self {
        use rand_distr::Distribution;
        let numel: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0f64, std).expect("std must be finite");
        let data: Vec<E> = (0..numel).map(|_| E::from_f64(dist.sample(rng))).collect();
        Tensor::from_vec(data, shape, requires_grad)
            .expect("randn shape is consistent by construction")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.inner.borrow_mut().requires_grad = requires_grad;
    }

    /// Copy of the tensor data.
    pub fn value(&self) -> Vec<E> {
        self.inner.borrow().data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.iter().map(|&v| Elem::to_f64(v)).collect()
    }

    /// The single element of a scalar tensor.
    pub fn scalar(&self) -> Result<E> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar tensor, got shape {:?}",
                inner.shape
            )));
        }
        Ok(inner.data[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replace the stored data; shape must be unchanged.
    pub fn set_data(&self, data: Vec<E>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::contract(format!(
                "set_data length {} does not match shape {:?}",
                data.len(),
                inner.shape
            )));
        }
        inner.data = data;
        Ok(())
    }

    /// Deep copy of data and shape; grad and graph history are not copied.
    pub fn detached_copy(&self, requires_grad: bool) -> Tensor<E> {
        let inner = self.inner.borrow();
        Tensor::from_vec(inner.data.clone(), &inner.shape, requires_grad)
            .expect("copy of a valid tensor is valid")
    }

    pub fn ptr_eq(&self, other: &Tensor<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(delta.len(), inner.data.len());
        match &mut inner.grad {
            Some(g) => {
                for (gv, &d) in g.iter_mut().zip(delta) {
                    *gv += d;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    pub(crate) fn with_data_mut<R>(&self, f: impl FnOnce(&mut [E]) -> R) -> R {
        f(&mut self.inner.borrow_mut().data)
    }
}

struct Node<E: Elem> {
    out: Tensor<E>,
    op: &'static str,
    back: Box<dyn Fn()>,
}

/// Records differentiable operations in execution order.
///
/// An operation is recorded only when at least one input requires a gradient;
/// its output is then marked `requires_grad` so downstream operations keep
/// recording. `backward` resets the gradients of all tape outputs, seeds the
/// loss with 1, and replays the rules in reverse recording order, so leaf
/// gradients accumulate across repeated calls until explicitly cleared.
pub struct Tape<E: Elem> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Names of recorded operations, oldest first.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    fn record(&self, out: &Tensor<E>, op: &'static str, back: Box<dyn Fn()>) {
        out.set_requires_grad(true);
        self.nodes.borrow_mut().push(Node { out: out.clone(), op, back });
    }

    /// Propagate gradients from a scalar loss to every reachable
    /// `requires_grad` tensor.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        if !nodes.iter().any(|n| n.out.ptr_eq(loss)) {
            return Err(Error::contract(
                "backward loss is not an output of this tape".to_string(),
            ));
        }
        // Intermediate grads are per-pass scratch; leaf grads persist and
        // therefore accumulate across repeated backward calls.
        for node in nodes.iter() {
            node.out.zero_grad();
        }
        loss.accumulate_grad(&[E::one()]);
        for node in nodes.iter().rev() {
            (node.back)();
        }
        Ok(())
    }

    // ── Arithmetic ──────────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, BinaryKind::Add)
    }

    pub fn sub(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.broadcast_binary(a, b, "sub", |x, y| x - y, BinaryKind::Sub)
    }

    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, BinaryKind::Mul)
    }

    fn broadcast_binary(
        &self,
        a: &Tensor<E>,
        b: &Tensor<E>,
        op: &'static str,
        f: fn(E, E) -> E,
        kind: BinaryKind,
    ) -> Result<Tensor<E>> {
        let ash = a.shape();
        let bsh = b.shape();
        let out_shape = kernels::broadcast_shapes(&ash, &bsh).ok_or(Error::ShapeMismatch {
            op,
            lhs: ash.clone(),
            rhs: bsh.clone(),
        })?;
        let numel: usize = out_shape.iter().product();
        let mut data = vec![E::zero(); numel];
        if ash == bsh {
            a.with_data(|ad| {
                b.with_data(|bd| {
                    for ((o, &x), &y) in data.iter_mut().zip(ad).zip(bd) {
                        *o = f(x, y);
                    }
                })
            });
        } else {
            let mut ax = vec![E::zero(); numel];
            let mut bx = vec![E::zero(); numel];
            a.with_data(|ad| kernels::broadcast_expand(ad, &ash, &mut ax, &out_shape));
            b.with_data(|bd| kernels::broadcast_expand(bd, &bsh, &mut bx, &out_shape));
            for ((o, &x), &y) in data.iter_mut().zip(&ax).zip(&bx) {
                *o = f(x, y);
            }
        }
        let out = Tensor::from_vec(data, &out_shape, false)?;
        if a.requires_grad() || b.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            let osh = out_shape.clone();
            self.record(
                &out,
                op,
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    if a2.requires_grad() {
                        let ash = a2.shape();
                        let mut da = vec![E::zero(); a2.numel()];
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => {
                                kernels::broadcast_reduce(&g, &osh, &mut da, &ash);
                            }
                            BinaryKind::Mul => {
                                let mut tmp = vec![E::zero(); g.len()];
                                b2.with_data(|bd| {
                                    kernels::broadcast_expand(bd, &b2.shape(), &mut tmp, &osh)
                                });
                                for (t, &gv) in tmp.iter_mut().zip(&g) {
                                    *t = *t * gv;
                                }
                                kernels::broadcast_reduce(&tmp, &osh, &mut da, &ash);
                            }
                        }
                        a2.accumulate_grad(&da);
                    }
                    if b2.requires_grad() {
                        let bsh = b2.shape();
                        let mut db = vec![E::zero(); b2.numel()];
                        match kind {
                            BinaryKind::Add => {
                                kernels::broadcast_reduce(&g, &osh, &mut db, &bsh);
                            }
                            BinaryKind::Sub => {
                                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                                kernels::broadcast_reduce(&neg, &osh, &mut db, &bsh);
                            }
                            BinaryKind::Mul => {
                                let mut tmp = vec![E::zero(); g.len()];
                                a2.with_data(|ad| {
                                    kernels::broadcast_expand(ad, &a2.shape(), &mut tmp, &osh)
                                });
                                for (t, &gv) in tmp.iter_mut().zip(&g) {
                                    *t = *t * gv;
                                }
                                kernels::broadcast_reduce(&tmp, &osh, &mut db, &bsh);
                            }
                        }
                        b2.accumulate_grad(&db);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Multiply by a compile-time-known scalar.
    pub fn scale(&self, a: &Tensor<E>, factor: f64) -> Result<Tensor<E>> {
        let c = E::from_f64(factor);
        let data: Vec<E> = a.with_data(|ad| ad.iter().map(|&v| v * c).collect());
        let out = Tensor::from_vec(data, &a.shape(), false)?;
        if a.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &out,
                "scale",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    let da: Vec<E> = g.iter().map(|&v| v * c).collect();
                    a2.accumulate_grad(&da);
                }),
            );
        }
        Ok(out)
    }

    // ── Matrix products ─────────────────────────────────────────────────

    /// Batched matrix product `a · b` with broadcastable leading dimensions.
    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.matmul_impl(a, b, false)
    }

    /// Batched matrix product against a transposed right operand, `a · bᵀ`.
    pub fn matmul_nt(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: &Tensor<E>, b: &Tensor<E>, nt: bool) -> Result<Tensor<E>> {
        let op: &'static str = if nt { "matmul_nt" } else { "matmul" };
        let ash = a.shape();
        let bsh = b.shape();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::ShapeMismatch { op, lhs: ash, rhs: bsh });
        }
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = if nt {
            (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
        } else {
            (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
        };
        if ka != kb {
            return Err(Error::ShapeMismatch { op, lhs: ash, rhs: bsh });
        }
        let k = ka;
        let batch = kernels::broadcast_shapes(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2])
            .ok_or(Error::ShapeMismatch { op, lhs: ash.clone(), rhs: bsh.clone() })?;
        let total: usize = batch.iter().product::<usize>().max(1);
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        let a_off = batch_offsets(&ash[..ash.len() - 2], &batch, m * k);
        let b_off = batch_offsets(&bsh[..bsh.len() - 2], &batch, k * n);
        let a_full = is_full_batch(&ash[..ash.len() - 2], &batch);
        let b_full = is_full_batch(&bsh[..bsh.len() - 2], &batch);

        let mut data = vec![E::zero(); total * m * n];
        a.with_data(|ad| {
            b.with_data(|bd| {
                if b_off.iter().all(|&o| o == 0) && !nt {
                    // Right operand shared across the whole batch: flatten.
                    kernels::matmul_nn(ad, bd, &mut data, total * m, k, n);
                } else if b_off.iter().all(|&o| o == 0) && nt {
                    kernels::matmul_nt(ad, bd, &mut data, total * m, k, n);
                } else {
                    use rayon::prelude::*;
                    let work = total * m * k * n;
                    let run = |i: usize, chunk: &mut [E]| {
                        let asl = &ad[a_off[i]..a_off[i] + m * k];
                        let bsl = &bd[b_off[i]..b_off[i] + k * n];
                        if nt {
                            kernels::matmul_nt(asl, bsl, chunk, m, k, n);
                        } else {
                            kernels::matmul_nn(asl, bsl, chunk, m, k, n);
                        }
                    };
                    if work >= 1 << 18 && total > 1 {
                        data.par_chunks_mut(m * n)
                            .enumerate()
                            .for_each(|(i, chunk)| run(i, chunk));
                    } else {
                        for (i, chunk) in data.chunks_mut(m * n).enumerate() {
                            run(i, chunk);
                        }
                    }
                }
            })
        });
        let out = Tensor::from_vec(data, &out_shape, false)?;

        if a.requires_grad() || b.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(
                &out,
                op,
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    if a2.requires_grad() {
                        let mut da = vec![E::zero(); a2.numel()];
                        b2.with_data(|bd| {
                            matmul_backward_lhs(
                                &g, bd, &mut da, m, k, n, total, &a_off, &b_off, a_full, nt,
                            )
                        });
                        a2.accumulate_grad(&da);
                    }
                    if b2.requires_grad() {
                        let mut db = vec![E::zero(); b2.numel()];
                        a2.with_data(|ad| {
                            matmul_backward_rhs(
                                &g, ad, &mut db, m, k, n, total, &a_off, &b_off, b_full, nt,
                            )
                        });
                        b2.accumulate_grad(&db);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Transpose the last two axes.
    pub fn transpose(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let ash = a.shape();
        if ash.len() < 2 {
            return Err(Error::contract(format!("transpose needs rank >= 2, got {ash:?}")));
        }
        let (r, c) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash.clone();
        let nd = out_shape.len();
        out_shape.swap(nd - 2, nd - 1);
        let mut data = vec![E::zero(); a.numel()];
        a.with_data(|ad| transpose_batched(ad, &mut data, batch, r, c));
        let out = Tensor::from_vec(data, &out_shape, false)?;
        if a.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &out,
                "transpose",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    let mut da = vec![E::zero(); a2.numel()];
                    transpose_batched(&g, &mut da, batch, c, r);
                    a2.accumulate_grad(&da);
                }),
            );
        }
        Ok(out)
    }

    pub fn reshape(&self, a: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a.shape(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_vec(a.value(), shape, false)?;
        if a.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &out,
                "reshape",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    a2.accumulate_grad(&g);
                }),
            );
        }
        Ok(out)
    }

    // ── Slicing and joining ─────────────────────────────────────────────

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, a: &Tensor<E>, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let ash = a.shape();
        if axis >= ash.len() || start + len > ash[axis] || len == 0 {
            return Err(Error::contract(format!(
                "narrow axis {axis} range {start}..{} out of bounds for shape {ash:?}",
                start + len
            )));
        }
        let outer: usize = ash[..axis].iter().product();
        let asize = ash[axis];
        let inner: usize = ash[axis + 1..].iter().product();
        let mut out_shape = ash.clone();
        out_shape[axis] = len;
        let mut data = vec![E::zero(); outer * len * inner];
        a.with_data(|ad| {
            for o in 0..outer {
                let src = &ad[(o * asize + start) * inner..(o * asize + start + len) * inner];
                data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
            }
        });
        let out = Tensor::from_vec(data, &out_shape, false)?;
        if a.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &out,
                "narrow",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    let mut da = vec![E::zero(); a2.numel()];
                    for o in 0..outer {
                        let dst =
                            &mut da[(o * asize + start) * inner..(o * asize + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                    a2.accumulate_grad(&da);
                }),
            );
        }
        Ok(out)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors".to_string()));
        }
        let base = parts[0].shape();
        if axis >= base.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of bounds for shape {base:?}"
            )));
        }
        let mut axis_total = 0usize;
        for p in parts {
            let psh = p.shape();
            if psh.len() != base.len()
                || psh
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::ShapeMismatch { op: "concat", lhs: base, rhs: psh });
            }
            axis_total += psh[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let mut data = vec![E::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let plen = p.shape()[axis];
            p.with_data(|pd| {
                for o in 0..outer {
                    let dst_start = (o * axis_total + offset) * inner;
                    data[dst_start..dst_start + plen * inner]
                        .copy_from_slice(&pd[o * plen * inner..(o + 1) * plen * inner]);
                }
            });
            spans.push((offset, plen));
            offset += plen;
        }
        let out = Tensor::from_vec(data, &out_shape, false)?;
        if parts.iter().any(|p| p.requires_grad()) {
            let parts2: Vec<Tensor<E>> = parts.to_vec();
            let o2 = out.clone();
            self.record(
                &out,
                "concat",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    for (p, &(off, plen)) in parts2.iter().zip(&spans) {
                        if !p.requires_grad() {
                            continue;
                        }
                        let mut dp = vec![E::zero(); p.numel()];
                        for o in 0..outer {
                            let src_start = (o * axis_total + off) * inner;
                            let dst = &mut dp[o * plen * inner..(o + 1) * plen * inner];
                            for (d, &s) in
                                dst.iter_mut().zip(&g[src_start..src_start + plen * inner])
                            {
                                *d = *d + s;
                            }
                        }
                        p.accumulate_grad(&dp);
                    }
                }),
            );
        }
        Ok(out)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let s: E = a.with_data(|ad| ad.iter().copied().sum());
        let out = Tensor::from_vec(vec![s], &[1], false)?;
        if a.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &out,
                "sum_all",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    a2.accumulate_grad(&vec![g[0]; a2.numel()]);
                }),
            );
        }
        Ok(out)
    }

    pub fn mean_all(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let n = a.numel();
        let inv = E::from_f64(1.0 / n as f64);
        let s: E = a.with_data(|ad| ad.iter().copied().sum());
        let out = Tensor::from_vec(vec![s * inv], &[1], false)?;
        if a.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &out,
                "mean_all",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    a2.accumulate_grad(&vec![g[0] * inv; a2.numel()]);
                }),
            );
        }
        Ok(out)
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        let ash = a.shape();
        if axis >= ash.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of bounds for shape {ash:?}"
            )));
        }
        let outer: usize = ash[..axis].iter().product();
        let asize = ash[axis];
        let inner: usize = ash[axis + 1..].iter().product();
        let mut data = vec![E::zero(); a.numel()];
        a.with_data(|ad| kernels::softmax(ad, &mut data, outer, asize, inner));
        let out = Tensor::from_vec(data, &ash, false)?;
        if a.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &out,
                "softmax",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    let mut da = vec![E::zero(); a2.numel()];
                    o2.with_data(|s| kernels::softmax_backward(s, &g, &mut da, outer, asize, inner));
                    a2.accumulate_grad(&da);
                }),
            );
        }
        Ok(out)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(
        &self,
        x: &Tensor<E>,
        gain: &Tensor<E>,
        bias: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let xsh = x.shape();
        let d = *xsh.last().ok_or_else(|| Error::contract("layer_norm on rank-0".to_string()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: xsh, rhs: gain.shape() });
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive".to_string()));
        }
        let epse = E::from_f64(eps);
        let mut data = vec![E::zero(); x.numel()];
        x.with_data(|xd| {
            gain.with_data(|gd| {
                bias.with_data(|bd| kernels::layer_norm(xd, gd, bd, epse, &mut data, d))
            })
        });
        let out = Tensor::from_vec(data, &xsh, false)?;
        if x.requires_grad() || gain.requires_grad() || bias.requires_grad() {
            let (x2, g2, b2, o2) = (x.clone(), gain.clone(), bias.clone(), out.clone());
            self.record(
                &out,
                "layer_norm",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    let mut dx = vec![E::zero(); x2.numel()];
                    let mut dgain = vec![E::zero(); d];
                    let mut dbias = vec![E::zero(); d];
                    x2.with_data(|xd| {
                        g2.with_data(|gaind| {
                            kernels::layer_norm_backward(
                                xd, gaind, &g, epse, &mut dx, &mut dgain, &mut dbias, d,
                            )
                        })
                    });
                    if x2.requires_grad() {
                        x2.accumulate_grad(&dx);
                    }
                    if g2.requires_grad() {
                        g2.accumulate_grad(&dgain);
                    }
                    if b2.requires_grad() {
                        b2.accumulate_grad(&dbias);
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn gelu(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let mut data = vec![E::zero(); a.numel()];
        a.with_data(|ad| kernels::gelu(ad, &mut data));
        let out = Tensor::from_vec(data, &a.shape(), false)?;
        if a.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &out,
                "gelu",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    let mut da = vec![E::zero(); a2.numel()];
                    a2.with_data(|ad| kernels::gelu_backward(ad, &g, &mut da));
                    a2.accumulate_grad(&da);
                }),
            );
        }
        Ok(out)
    }

    // ── Lookup and loss ─────────────────────────────────────────────────

    /// Gather rows of a 2-D `table` by id, producing `[ids.len(), d]`.
    pub fn embedding(&self, table: &Tensor<E>, ids: &[usize]) -> Result<Tensor<E>> {
        let tsh = table.shape();
        if tsh.len() != 2 {
            return Err(Error::contract(format!("embedding table must be 2-D, got {tsh:?}")));
        }
        let (v, d) = (tsh[0], tsh[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let mut data = vec![E::zero(); ids.len() * d];
        table.with_data(|td| {
            for (row, &id) in ids.iter().enumerate() {
                data[row * d..(row + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
            }
        });
        let out = Tensor::from_vec(data, &[ids.len(), d], false)?;
        if table.requires_grad() {
            let (t2, o2) = (table.clone(), out.clone());
            let ids2 = ids.to_vec();
            self.record(
                &out,
                "embedding",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    let mut dt = vec![E::zero(); t2.numel()];
                    for (row, &id) in ids2.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        for (dv, &gv) in dst.iter_mut().zip(&g[row * d..(row + 1) * d]) {
                            *dv = *dv + gv;
                        }
                    }
                    t2.accumulate_grad(&dt);
                }),
            );
        }
        Ok(out)
    }

    /// Mean next-token negative log-likelihood of `logits` `[n, v]` against
    /// integer `targets`.
    pub fn cross_entropy(&self, logits: &Tensor<E>, targets: &[usize]) -> Result<Tensor<E>> {
        let lsh = logits.shape();
        if lsh.len() != 2 || lsh[0] != targets.len() {
            return Err(Error::contract(format!(
                "cross_entropy expects [n, v] logits matching {} targets, got {lsh:?}",
                targets.len()
            )));
        }
        let (n, v) = (lsh[0], lsh[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!("target class {bad} out of range for {v}")));
        }
        let mut total = E::zero();
        logits.with_data(|ld| {
            for (row, &t) in targets.iter().enumerate() {
                let r = &ld[row * v..(row + 1) * v];
                let mut mx = r[0];
                for &x in r {
                    if x > mx {
                        mx = x;
                    }
                }
                let mut lse = E::zero();
                for &x in r {
                    lse = lse + (x - mx).exp();
                }
                total = total - (r[t] - mx - lse.ln());
            }
        });
        let inv_n = E::from_f64(1.0 / n as f64);
        let out = Tensor::from_vec(vec![total * inv_n], &[1], false)?;
        if logits.requires_grad() {
            let (l2, o2) = (logits.clone(), out.clone());
            let t2 = targets.to_vec();
            self.record(
                &out,
                "cross_entropy",
                Box::new(move || {
                    let Some(g) = o2.grad() else { return };
                    let mut dl = vec![E::zero(); l2.numel()];
                    l2.with_data(|ld| {
                        for (row, &t) in t2.iter().enumerate() {
                            let r = &ld[row * v..(row + 1) * v];
                            let mut mx = r[0];
                            for &x in r {
                                if x > mx {
                                    mx = x;
                                }
                            }
                            let mut lse = E::zero();
                            for &x in r {
                                lse = lse + (x - mx).exp();
                            }
                            for (c, dst) in dl[row * v..(row + 1) * v].iter_mut().enumerate() {
                                let sm = (r[c] - mx).exp() / lse;
                                let onehot = if c == t { E::one() } else { E::zero() };
                                *dst = g[0] * (sm - onehot) * inv_n;
                            }
                        }
                    });
                    l2.accumulate_grad(&dl);
                }),
            );
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Per-flat-batch-index element offsets for an operand whose leading dims
/// broadcast to `batch`; `unit` is the matrix size in elements.
fn batch_offsets(lead: &[usize], batch: &[usize], unit: usize) -> Vec<usize> {
    let total: usize = batch.iter().product::<usize>().max(1);
    let nd = batch.len();
    let mut padded = vec![1usize; nd];
    if !lead.is_empty() {
        padded[nd - lead.len()..].copy_from_slice(lead);
    }
    let mut offsets = Vec::with_capacity(total);
    let mut coords = vec![0usize; nd];
    for flat in 0..total {
        let mut rem = flat;
        for i in (0..nd).rev() {
            coords[i] = rem % batch[i];
            rem /= batch[i];
        }
        let mut off = 0usize;
        let mut stride = 1usize;
        for i in (0..nd).rev() {
            let c = if padded[i] == 1 { 0 } else { coords[i] };
            off += c * stride;
            stride *= padded[i];
        }
        offsets.push(off * unit);
    }
    offsets
}

fn is_full_batch(lead: &[usize], batch: &[usize]) -> bool {
    lead.len() == batch.len() && lead == batch
}

fn transpose_batched<E: Elem>(src: &[E], dst: &mut [E], batch: usize, r: usize, c: usize) {
    for bi in 0..batch {
        let s = &src[bi * r * c..(bi + 1) * r * c];
        let d = &mut dst[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
}

/// dL/dA for a (possibly batched) product. Forward was `out = a·b` (nn) or
/// `out = a·bᵀ` (nt); `g` has shape [total, m, n].
#[allow(clippy::too_many_arguments)]
fn matmul_backward_lhs<E: Elem>(
    g: &[E],
    bd: &[E],
    da: &mut [E],
    m: usize,
    k: usize,
    n: usize,
    total: usize,
    a_off: &[usize],
    b_off: &[usize],
    a_full: bool,
    nt: bool,
) {
    use rayon::prelude::*;
    if b_off.iter().all(|&o| o == 0) && a_full {
        // Shared right operand: one flattened kernel call.
        if nt {
            kernels::matmul_nn(g, bd, da, total * m, n, k);
        } else {
            kernels::matmul_nt(g, bd, da, total * m, n, k);
        }
        return;
    }
    if a_full && total > 1 && total * m * k * n >= 1 << 18 {
        da.par_chunks_mut(m * k).enumerate().for_each(|(i, chunk)| {
            let gs = &g[i * m * n..(i + 1) * m * n];
            let bs = &bd[b_off[i]..];
            if nt {
                kernels::matmul_nn(gs, &bs[..n * k], chunk, m, n, k);
            } else {
                kernels::matmul_nt(gs, &bs[..k * n], chunk, m, n, k);
            }
        });
        return;
    }
    for i in 0..total {
        let gs = &g[i * m * n..(i + 1) * m * n];
        let chunk = &mut da[a_off[i]..a_off[i] + m * k];
        let bs = &bd[b_off[i]..];
        if nt {
            kernels::matmul_nn(gs, &bs[..n * k], chunk, m, n, k);
        } else {
            kernels::matmul_nt(gs, &bs[..k * n], chunk, m, n, k);
        }
    }
}

/// dL/dB counterpart of `matmul_backward_lhs`.
#[allow(clippy::too_many_arguments)]
fn matmul_backward_rhs<E: Elem>(
    g: &[E],
    ad: &[E],
    db: &mut [E],
    m: usize,
    k: usize,
    n: usize,
    total: usize,
    a_off: &[usize],
    b_off: &[usize],
    b_full: bool,
    nt: bool,
) {
    use rayon::prelude::*;
    if b_off.iter().all(|&o| o == 0) {
        // Shared right operand: reduce over the whole batch in one call.
        if nt {
            kernels::matmul_tn(g, ad, db, total * m, n, k);
        } else {
            kernels::matmul_tn(ad, g, db, total * m, k, n);
        }
        return;
    }
    if b_full && total > 1 && total * m * k * n >= 1 << 18 {
        let unit = if nt { n * k } else { k * n };
        db.par_chunks_mut(unit).enumerate().for_each(|(i, chunk)| {
            let gs = &g[i * m * n..(i + 1) * m * n];
            let asl = &ad[a_off[i]..a_off[i] + m * k];
            if nt {
                kernels::matmul_tn(gs, asl, chunk, m, n, k);
            } else {
                kernels::matmul_tn(asl, gs, chunk, m, k, n);
            }
        });
        return;
    }
    for i in 0..total {
        let gs = &g[i * m * n..(i + 1) * m * n];
        let asl = &ad[a_off[i]..a_off[i] + m * k];
        if nt {
            let chunk = &mut db[b_off[i]..b_off[i] + n * k];
            kernels::matmul_tn(gs, asl, chunk, m, n, k);
        } else {
            let chunk = &mut db[b_off[i]..b_off[i] + k * n];
            kernels::matmul_tn(asl, gs, chunk, m, k, n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0, 5.0, 6.0], &[2, 2], false).unwrap();
        let c = tape.matmul(&i, &b).unwrap();
        assert_eq!(c.value(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let tape = Tape::new();
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2], false).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2, 1], false).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), vec![1, 1]);
        assert_eq!(c.value(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = Tensor::zeros(&[2, 3], false);
        let b = Tensor::zeros(&[4, 2], false);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "message was: {msg}");
    }

    #[test]
    fn matmul_associativity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let a = Tensor::<f64>::randn(&mut rng, &[4, 4], 1.0, false);
        let b = Tensor::<f64>::randn(&mut rng, &[4, 4], 1.0, false);
        let v = Tensor::<f64>::randn(&mut rng, &[4, 1], 1.0, false);
        let left = tape.matmul(&tape.matmul(&a, &b).unwrap(), &v).unwrap();
        let right = tape.matmul(&a, &tape.matmul(&b, &v).unwrap()).unwrap();
        assert!(close(&left.to_f64_vec(), &right.to_f64_vec(), 1e-9));
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_vec(vec![0.0, 0.0, 0.0], &[3], false).unwrap();
        let s = tape.softmax(&x, 0).unwrap();
        assert!(close(&s.value(), &[1.0 / 3.0; 3], 1e-12));

        let big = Tensor::<f64>::from_vec(vec![1000.0, 0.0], &[2], false).unwrap();
        let s = tape.softmax(&big, 0).unwrap();
        assert!(close(&s.value(), &[1.0, 0.0], 1e-12));
        assert!(s.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_vec(vec![5.0, 5.0, 5.0], &[1, 3], false).unwrap();
        let gain = Tensor::from_vec(vec![1.0; 3], &[3], false).unwrap();
        let bias = Tensor::from_vec(vec![0.0; 3], &[3], false).unwrap();
        let out = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert!(close(&out.value(), &[0.0; 3], 1e-9));
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0], &[1, 2], false).unwrap();
        let gain = Tensor::from_vec(vec![1.0; 2], &[2], false).unwrap();
        let bias = Tensor::from_vec(vec![0.0; 2], &[2], false).unwrap();
        let out = tape.layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        assert!(close(&out.value(), &[-1.0, 1.0], 1e-5));
    }

    #[test]
    fn backward_square_at_three() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_vec(vec![3.0], &[1], true).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        tape.backward(&sq).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_of_softmax_sum_is_zero() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_vec(vec![0.3, -0.8, 1.1], &[3], true).unwrap();
        let s = tape.softmax(&x, 0).unwrap();
        let loss = tape.sum_all(&s).unwrap();
        tape.backward(&loss).unwrap();
        assert!(close(&x.grad().unwrap(), &[0.0; 3], 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2], true).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![1.0], &[1], true).unwrap();
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates_leaf_grads() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_vec(vec![3.0], &[1], true).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        tape.backward(&sq).unwrap();
        tape.backward(&sq).unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        tape.backward(&sq).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
            let tape = Tape::new();
            let a = Tensor::<f32>::randn(&mut rng, &[64, 64], 0.5, false);
            let b = Tensor::<f32>::randn(&mut rng, &[64, 64], 0.5, false);
            let c = tape.matmul(&a, &b).unwrap();
            let s = tape.softmax(&c, 1).unwrap();
            s.value()
        };
        let first = run();
        let second = run();
        assert_eq!(first, second, "same seed and inputs must be bit-identical");
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let tape = Tape::<f64>::new();
        let table = Tensor::zeros(&[4, 3], false);
        assert!(tape.embedding(&table, &[0, 4]).is_err());
    }

    #[test]
    fn tape_records_ops_in_order() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2], true).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        let z = tape.softmax(&y, 0).unwrap();
        let _ = tape.sum_all(&z).unwrap();
        assert_eq!(tape.op_names(), vec!["mul", "softmax", "sum_all"]);
    }
}
