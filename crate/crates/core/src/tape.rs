//! Reverse-mode autodiff on a per-pass tape.
//!
//! A forward pass appends nodes to a [`Tape`]; each node owns its value and,
//! for non-leaves, a boxed backward rule. [`Tape::backward`] walks the nodes
//! in reverse creation order exactly once, accumulating gradients into
//! parents. Parents always precede children, so creation order is already a
//! topological order. The tape is rebuilt every pass.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a tape node, valid only for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub struct BackwardArgs<'a, T: Real> {
    pub grad: &'a Tensor<T>,
    pub output: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    /// Which inputs need a gradient; rules may return `None` for the rest.
    pub needs: &'a [bool],
}

pub trait OpRule<T: Real> {
    fn name(&self) -> &'static str;

    /// One gradient contribution per parent, aligned with the parent list.
    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires: bool,
    parents: Vec<Var>,
    rule: Option<Box<dyn OpRule<T>>>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input. Its gradient is available after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, true, Vec::new(), None)
    }

    /// Non-differentiable input (data, masks, frozen values).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, false, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        rule: Box<dyn OpRule<T>>,
    ) -> Var {
        debug_assert!(
            value.is_finite(),
            "op {} produced a non-finite value",
            rule.name()
        );
        let requires = parents.iter().any(|p| self.nodes[p.0].requires);
        self.push_node(value, requires, parents, Some(rule))
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        requires: bool,
        parents: Vec<Var>,
        rule: Option<Box<dyn OpRule<T>>>,
    ) -> Var {
        let id = self.nodes.len();
        debug_assert!(parents.iter().all(|p| p.0 < id));
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            parents,
            rule,
        });
        Var(id)
    }

    /// Reverse sweep from a scalar loss. Each node is visited once; fan-out
    /// gradients accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                ln.value.shape()
            )));
        }
        if !ln.requires {
            return Err(Error::Contract(
                "backward root does not depend on any differentiable input".into(),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(&[1]));

        for id in (0..=loss.0).rev() {
            let parents = self.nodes[id].parents.clone();
            if parents.is_empty() {
                continue;
            }
            let contribs = {
                let (before, rest) = self.nodes.split_at_mut(id);
                let node = &rest[0];
                if !node.requires {
                    continue;
                }
                let Some(grad) = node.grad.as_ref() else {
                    continue;
                };
                let rule = node.rule.as_ref().expect("non-leaf node has a rule");
                let inputs: Vec<&Tensor<T>> =
                    parents.iter().map(|p| &before[p.0].value).collect();
                let needs: Vec<bool> = parents.iter().map(|p| before[p.0].requires).collect();
                let args = BackwardArgs {
                    grad,
                    output: &node.value,
                    inputs: &inputs,
                    needs: &needs,
                };
                rule.backward(&args)
            };
            debug_assert_eq!(contribs.len(), parents.len());
            for (p, c) in parents.iter().zip(contribs) {
                let Some(c) = c else { continue };
                if !self.nodes[p.0].requires {
                    continue;
                }
                debug_assert_eq!(c.shape(), self.nodes[p.0].value.shape());
                match &mut self.nodes[p.0].grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    // ---- elementwise binary ops -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (shape, plan) = plan_broadcast(
            kind.name(),
            self.value(a).shape(),
            self.value(b).shape(),
        )?;
        let out = bin_forward(kind, self.value(a), self.value(b), &plan, &shape);
        Ok(self.push(out, vec![a, b], Box::new(BinaryOp { kind, plan })))
    }

    // ---- elementwise unary ops --------------------------------------------

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnKind::Neg, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Silu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnKind::Exp, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnKind::Softplus, x)
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, vec![x], Box::new(UnaryOp { kind }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, vec![x], Box::new(ScaleOp { c }))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v + c);
        self.push(out, vec![x], Box::new(AddScalarOp))
    }

    // ---- matrix ops --------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape("matmul", ash, bsh));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let out = Tensor::from_parts(
            vec![m, n],
            matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n),
        );
        Ok(self.push(out, vec![a, b], Box::new(MatmulOp { m, k, n })))
    }

    /// Fused `x @ w + b` for `x [m,k]`, `w [k,n]`, `b [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xsh, wsh, bsh) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xsh.len() != 2 || wsh.len() != 2 || xsh[1] != wsh[0] {
            return Err(Error::shape("linear", xsh, wsh));
        }
        if bsh != [wsh[1]] {
            return Err(Error::shape("linear bias", wsh, bsh));
        }
        let (m, k, n) = (xsh[0], xsh[1], wsh[1]);
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(self.value(b).data());
        }
        matmul_accumulate(
            self.value(x).data(),
            self.value(w).data(),
            &mut data,
            m,
            k,
            n,
        );
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(out, vec![x, w, b], Box::new(LinearOp { m, k, n })))
    }

    // ---- structure ops -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut extents = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let sh = self.value(p).shape();
            let same_other = sh.len() == first.len()
                && sh
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(Error::shape("concat", &first, sh));
            }
            extents.push(sh[axis]);
            total += sh[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * total * inner];
        let mut base = 0;
        for (&p, &e) in parts.iter().zip(&extents) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_off = (o * total + base) * inner;
                let src_off = o * e * inner;
                data[dst_off..dst_off + e * inner]
                    .copy_from_slice(&src[src_off..src_off + e * inner]);
            }
            base += e;
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            parts.to_vec(),
            Box::new(ConcatOp {
                axis,
                extents,
                outer,
                inner,
            }),
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if axis >= sh.len() || len == 0 || start + len > sh[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) on axis {axis} out of range for shape {sh:?}",
                start + len
            )));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let mut shape = sh.clone();
        shape[axis] = len;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_off = (o * sh[axis] + start) * inner;
            let dst_off = o * len * inner;
            data[dst_off..dst_off + len * inner]
                .copy_from_slice(&src[src_off..src_off + len * inner]);
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            vec![x],
            Box::new(SliceOp {
                axis_extent: sh[axis],
                start,
                len,
                outer,
                inner,
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let in_shape = self.value(x).shape().to_vec();
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, vec![x], Box::new(ReshapeOp { in_shape })))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sh = self.value(x).shape();
        let r = sh.len();
        let mut seen = vec![false; r];
        let valid = perm.len() == r && perm.iter().all(|&p| p < r && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Contract(format!(
                "permute {perm:?} is not a permutation of rank {r}"
            )));
        }
        let out = permute_kernel(self.value(x), perm);
        Ok(self.push(
            out,
            vec![x],
            Box::new(PermuteOp {
                perm: perm.to_vec(),
            }),
        ))
    }

    // ---- reductions --------------------------------------------------------

    /// Full sum to a `[1]` scalar, accumulated in f64 in a fixed order.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(T::from_f64(s));
        self.push(out, vec![x], Box::new(SumOp))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }
}

// ---- broadcast planning ----------------------------------------------------

/// Which operand is the reduced ("small") one.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Side {
    Balanced,
    LhsSmall,
    RhsSmall,
}

#[derive(Clone, Debug)]
struct Plan {
    side: Side,
    lead: usize,
    tail: usize,
}

/// Broadcasting is deliberately narrow: shapes must match exactly, or the
/// smaller operand is a `[1]` scalar, or both ranks match and the smaller
/// shape equals the larger with a trailing run of extents replaced by 1.
fn plan_broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Plan)> {
    if a == b {
        return Ok((
            a.to_vec(),
            Plan {
                side: Side::Balanced,
                lead: a.iter().product(),
                tail: 1,
            },
        ));
    }
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if b == [1] {
        return Ok((
            a.to_vec(),
            Plan {
                side: Side::RhsSmall,
                lead: 1,
                tail: numel(a),
            },
        ));
    }
    if a == [1] {
        return Ok((
            b.to_vec(),
            Plan {
                side: Side::LhsSmall,
                lead: 1,
                tail: numel(b),
            },
        ));
    }
    if a.len() == b.len() {
        if let Some(k) = trailing_split(a, b) {
            return Ok((
                a.to_vec(),
                Plan {
                    side: Side::RhsSmall,
                    lead: numel(&a[..k]),
                    tail: numel(&a[k..]),
                },
            ));
        }
        if let Some(k) = trailing_split(b, a) {
            return Ok((
                b.to_vec(),
                Plan {
                    side: Side::LhsSmall,
                    lead: numel(&b[..k]),
                    tail: numel(&b[k..]),
                },
            ));
        }
    }
    Err(Error::shape(op, a, b))
}

/// Smallest k with big[..k] == small[..k] and small[k..] all ones.
fn trailing_split(big: &[usize], small: &[usize]) -> Option<usize> {
    (0..big.len())
        .find(|&k| big[..k] == small[..k] && small[k..].iter().all(|&e| e == 1))
}

// ---- elementwise ops -------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
        }
    }
}

fn bin_forward<T: Real>(
    kind: BinKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    plan: &Plan,
    shape: &[usize],
) -> Tensor<T> {
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(shape.iter().product());
    match plan.side {
        Side::Balanced => {
            out.extend(ad.iter().zip(bd).map(|(&x, &y)| kind.apply(x, y)));
        }
        Side::RhsSmall => {
            for (j, &bv) in bd.iter().enumerate() {
                out.extend(
                    ad[j * plan.tail..(j + 1) * plan.tail]
                        .iter()
                        .map(|&x| kind.apply(x, bv)),
                );
            }
        }
        Side::LhsSmall => {
            for (j, &av) in ad.iter().enumerate() {
                out.extend(
                    bd[j * plan.tail..(j + 1) * plan.tail]
                        .iter()
                        .map(|&y| kind.apply(av, y)),
                );
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

struct BinaryOp {
    kind: BinKind,
    plan: Plan,
}

impl BinaryOp {
    /// Sum `vals` over tail blocks, producing the small operand's gradient.
    fn reduce<T: Real>(
        plan: &Plan,
        small_shape: &[usize],
        mut val: impl FnMut(usize) -> f64,
    ) -> Tensor<T> {
        let mut out = Vec::with_capacity(plan.lead);
        for j in 0..plan.lead {
            let mut acc = 0.0;
            for t in 0..plan.tail {
                acc += val(j * plan.tail + t);
            }
            out.push(T::from_f64(acc));
        }
        Tensor::from_parts(small_shape.to_vec(), out)
    }
}

/// Operand view in the output's index space: `tail == 1` reads directly,
/// otherwise each value covers a block of `tail` output elements.
#[derive(Clone, Copy)]
struct OperandView<'a, T> {
    d: &'a [T],
    tail: usize,
}

impl<T: Real> OperandView<'_, T> {
    fn get(&self, i: usize) -> T {
        self.d[i / self.tail]
    }
}

impl<T: Real> OpRule<T> for BinaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let (a, b) = (args.inputs[0], args.inputs[1]);
        let plan = &self.plan;
        let av = OperandView {
            d: a.data(),
            tail: if plan.side == Side::LhsSmall { plan.tail } else { 1 },
        };
        let bv = OperandView {
            d: b.data(),
            tail: if plan.side == Side::RhsSmall { plan.tail } else { 1 },
        };
        let n = g.len();
        let grad_for = |is_small: bool, shape: &[usize], elem: &dyn Fn(usize) -> T| {
            if is_small {
                Self::reduce(plan, shape, |i| elem(i).as_f64())
            } else {
                Tensor::from_parts(shape.to_vec(), (0..n).map(elem).collect())
            }
        };
        let da = args.needs[0].then(|| {
            let kind = self.kind;
            grad_for(plan.side == Side::LhsSmall, a.shape(), &|i| match kind {
                BinKind::Add | BinKind::Sub => g[i],
                BinKind::Mul => g[i] * bv.get(i),
                BinKind::Div => g[i] / bv.get(i),
            })
        });
        let db = args.needs[1].then(|| {
            let kind = self.kind;
            grad_for(plan.side == Side::RhsSmall, b.shape(), &|i| match kind {
                BinKind::Add => g[i],
                BinKind::Sub => -g[i],
                BinKind::Mul => g[i] * av.get(i),
                BinKind::Div => {
                    let bi = bv.get(i);
                    -g[i] * av.get(i) / (bi * bi)
                }
            })
        });
        vec![da, db]
    }
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Relu,
    Sigmoid,
    Silu,
    Exp,
    Softplus,
}

pub(crate) fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn stable_softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl UnKind {
    fn name(self) -> &'static str {
        match self {
            UnKind::Neg => "neg",
            UnKind::Relu => "relu",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Silu => "silu",
            UnKind::Exp => "exp",
            UnKind::Softplus => "softplus",
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            UnKind::Neg => -x,
            UnKind::Relu => x.max(T::zero()),
            UnKind::Sigmoid => stable_sigmoid(x),
            UnKind::Silu => x * stable_sigmoid(x),
            UnKind::Exp => x.exp(),
            UnKind::Softplus => stable_softplus(x),
        }
    }

    /// d(apply)/dx given input x and output y.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            UnKind::Neg => -T::one(),
            UnKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnKind::Sigmoid => y * (T::one() - y),
            UnKind::Silu => {
                let s = stable_sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            UnKind::Exp => y,
            UnKind::Softplus => stable_sigmoid(x),
        }
    }
}

struct UnaryOp {
    kind: UnKind,
}

impl<T: Real> OpRule<T> for UnaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = args.inputs[0];
        let data = args
            .grad
            .data()
            .iter()
            .zip(x.data().iter().zip(args.output.data()))
            .map(|(&g, (&xi, &yi))| g * self.kind.derivative(xi, yi))
            .collect();
        vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
    }
}

struct ScaleOp<T> {
    c: T,
}

impl<T: Real> OpRule<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(args.grad.map(|g| g * self.c))]
    }
}

struct AddScalarOp;

impl<T: Real> OpRule<T> for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(args.grad.clone())]
    }
}

// ---- matrix ops ------------------------------------------------------------

fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_accumulate(a, b, &mut out, m, k, n);
    out
}

/// `out += a @ b`, row-major, i-k-j order so the inner loop is contiguous.
fn matmul_accumulate<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `da = g @ b^T` for g `[m,n]`, b `[k,n]`.
fn matmul_grad_lhs<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut da = Vec::with_capacity(m * k);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            da.push(s);
        }
    }
    da
}

/// `db = a^T @ g` for a `[m,k]`, g `[m,n]`.
fn matmul_grad_rhs<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut db = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d = *d + av * gv;
            }
        }
    }
    db
}

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> OpRule<T> for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let g = args.grad.data();
        let da = args.needs[0].then(|| {
            Tensor::from_parts(vec![m, k], matmul_grad_lhs(g, args.inputs[1].data(), m, k, n))
        });
        let db = args.needs[1].then(|| {
            Tensor::from_parts(vec![k, n], matmul_grad_rhs(args.inputs[0].data(), g, m, k, n))
        });
        vec![da, db]
    }
}

struct LinearOp {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> OpRule<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let g = args.grad.data();
        let dx = args.needs[0].then(|| {
            Tensor::from_parts(vec![m, k], matmul_grad_lhs(g, args.inputs[1].data(), m, k, n))
        });
        let dw = args.needs[1].then(|| {
            Tensor::from_parts(vec![k, n], matmul_grad_rhs(args.inputs[0].data(), g, m, k, n))
        });
        let db = args.needs[2].then(|| {
            let mut acc = vec![0.0f64; n];
            for i in 0..m {
                for (a, &gv) in acc.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                    *a += gv.as_f64();
                }
            }
            Tensor::from_parts(vec![n], acc.into_iter().map(T::from_f64).collect())
        });
        vec![dx, dw, db]
    }
}

// ---- structure ops ---------------------------------------------------------

struct ConcatOp {
    axis: usize,
    extents: Vec<usize>,
    outer: usize,
    inner: usize,
}

impl<T: Real> OpRule<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let total: usize = self.extents.iter().sum();
        let mut out = Vec::with_capacity(self.extents.len());
        let mut base = 0;
        for (pi, &e) in self.extents.iter().enumerate() {
            if !args.needs[pi] {
                out.push(None);
                base += e;
                continue;
            }
            let mut shape = args.inputs[pi].shape().to_vec();
            shape[self.axis] = e;
            let mut data = vec![T::zero(); self.outer * e * self.inner];
            for o in 0..self.outer {
                let src_off = (o * total + base) * self.inner;
                let dst_off = o * e * self.inner;
                data[dst_off..dst_off + e * self.inner]
                    .copy_from_slice(&g[src_off..src_off + e * self.inner]);
            }
            out.push(Some(Tensor::from_parts(shape, data)));
            base += e;
        }
        out
    }
}

struct SliceOp {
    axis_extent: usize,
    start: usize,
    len: usize,
    outer: usize,
    inner: usize,
}

impl<T: Real> OpRule<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let mut data = vec![T::zero(); args.inputs[0].numel()];
        for o in 0..self.outer {
            let dst_off = (o * self.axis_extent + self.start) * self.inner;
            let src_off = o * self.len * self.inner;
            data[dst_off..dst_off + self.len * self.inner]
                .copy_from_slice(&g[src_off..src_off + self.len * self.inner]);
        }
        vec![Some(Tensor::from_parts(
            args.inputs[0].shape().to_vec(),
            data,
        ))]
    }
}

struct ReshapeOp {
    in_shape: Vec<usize>,
}

impl<T: Real> OpRule<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.clone();
        vec![Some(
            g.reshaped(self.in_shape.clone())
                .expect("reshape backward restores the original shape"),
        )]
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_kernel<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let ish = x.shape();
    let r = ish.len();
    let osh: Vec<usize> = perm.iter().map(|&p| ish[p]).collect();
    let istr = strides(ish);
    let ostr_in: Vec<usize> = perm.iter().map(|&p| istr[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; r];
    let src = x.data();
    for _ in 0..x.numel() {
        let mut ii = 0;
        for a in 0..r {
            ii += idx[a] * ostr_in[a];
        }
        out.push(src[ii]);
        for a in (0..r).rev() {
            idx[a] += 1;
            if idx[a] < osh[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::from_parts(osh, out)
}

struct PermuteOp {
    perm: Vec<usize>,
}

impl<T: Real> OpRule<T> for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut inv = vec![0usize; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        vec![Some(permute_kernel(args.grad, &inv))]
    }
}

struct SumOp;

impl<T: Real> OpRule<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.item();
        vec![Some(Tensor::full(args.inputs[0].shape(), g))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn matmul_small_case() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1.5, -0.25]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, y).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        // z = 4x^2, dz/dx = 8x.
        assert_eq!(tape.grad(x).unwrap().data(), &[12.0, -2.0]);
    }

    #[test]
    fn concat_then_slice_restores_parts_bitwise() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        let sa = tape.slice(c, 1, 0, 2).unwrap();
        let sb = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(sa).data(), tape.value(a).data());
        assert_eq!(tape.value(sb).data(), tape.value(b).data());
    }

    #[test]
    fn concat_routes_gradients_to_parts() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[1, 1], &[3.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        let w = tape.constant(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let y = tape.mul(c, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[30.0]);
    }

    #[test]
    fn trailing_broadcast_add_reduces_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(t(&[2, 1], &[10.0, 20.0]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]
        );
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 6]);
        assert_eq!(tape.grad(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn scalar_broadcast_against_any_rank() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.leaf(t(&[1], &[2.0]));
        let y = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[10.0]);
    }

    #[test]
    fn incompatible_broadcast_is_a_shape_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 1, 4]));
        let b = tape.leaf(Tensor::zeros(&[2, 3, 1]));
        assert!(matches!(
            tape.add(a, b),
            Err(crate::error::Error::Shape { .. })
        ));
    }

    #[test]
    fn div_gradients_match_quotient_rule() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(&[2], &[6.0, 8.0]));
        let b = tape.leaf(t(&[2], &[2.0, 4.0]));
        let y = tape.div(a, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.5, 0.25]);
        assert_eq!(tape.grad(b).unwrap().data(), &[-1.5, -0.5]);
    }

    #[test]
    fn relu_gradient_is_zero_at_kink_and_below() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn permute_round_trips_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f32));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[1, 0, 2]), tape.value(x).at(&[0, 2, 1]));
        let w = tape.constant(Tensor::from_fn(&[4, 2, 3], |i| (i % 7) as f32));
        let y = tape.mul(p, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let gx = tape.grad(x).unwrap();
        assert_eq!(gx.at(&[0, 2, 1]), tape.value(w).at(&[1, 0, 2]));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn gradients_do_not_flow_into_constants() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let k = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, k).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(k).is_none());
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(t(&[3, 2], &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.25, -0.5]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.75, 7.0, -0.75, 17.5]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0]);
        let gw = tape.grad(w).unwrap();
        // dw = x^T @ ones = column sums of x in each output column.
        assert_eq!(gw.data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }
}
