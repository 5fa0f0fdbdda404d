//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable primitive is a method on [`Tape`]. A primitive
//! computes its value eagerly; if at least one input carries a tape handle,
//! it also appends a node recording the input handles and whatever its
//! backward rule needs (inputs for products and convolutions, `u - thr` for
//! thresholds). Untracked inputs never create nodes, so running a model on
//! an empty tape without registered parameters is a plain forward pass.
//!
//! Node inputs always refer to earlier nodes, so the reverse sweep in
//! [`Tape::backward_seeded`] is a single pass from the end of the tape.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::surrogate::SurrogateFn;
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    /// Position of the node on its tape.
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

enum Op<F> {
    Leaf {
        requires_grad: bool,
    },
    Identity {
        x: NodeId,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
        bcast: Bcast,
    },
    Sub {
        a: Option<NodeId>,
        b: Option<NodeId>,
        bcast: Bcast,
    },
    Mul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Option<Tensor<F>>,
        bv: Option<Tensor<F>>,
        bcast: Bcast,
    },
    Scale {
        x: NodeId,
        c: F,
    },
    SumAll {
        x: NodeId,
    },
    SumAxis {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    /// `x[rows×k] · w[k×n]`
    Linear {
        x: Option<NodeId>,
        w: Option<NodeId>,
        xv: Option<Tensor<F>>,
        wv: Option<Tensor<F>>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Option<NodeId>,
        w: Option<NodeId>,
        xv: Option<Tensor<F>>,
        wv: Option<Tensor<F>>,
        geom: ConvGeom,
        batch: usize,
    },
    Threshold {
        x: NodeId,
        centered: Vec<F>,
        surrogate: SurrogateFn,
    },
    SmoothThreshold {
        x: NodeId,
        centered: Vec<F>,
        surrogate: SurrogateFn,
        sharpness: F,
    },
    SoftmaxCrossEntropy {
        x: NodeId,
        probs: Vec<F>,
        target: Vec<F>,
    },
    Select {
        x: NodeId,
        index: usize,
        row_len: usize,
    },
    Stack {
        xs: Vec<Option<NodeId>>,
        row_len: usize,
    },
}

impl<F: Scalar> Op<F> {
    fn saved_elements(&self) -> usize {
        let t = |v: &Option<Tensor<F>>| v.as_ref().map_or(0, |t| t.numel());
        match self {
            Op::Mul { av, bv, .. } | Op::Linear { xv: av, wv: bv, .. } => t(av) + t(bv),
            Op::Conv2d { xv, wv, .. } => t(xv) + t(wv),
            Op::Threshold { centered, .. } | Op::SmoothThreshold { centered, .. } => centered.len(),
            Op::SoftmaxCrossEntropy { probs, target, .. } => probs.len() + target.len(),
            _ => 0,
        }
    }
}

struct Node<F> {
    op: Op<F>,
    shape: Vec<usize>,
    numel: usize,
}

/// Size of a tape, for memory accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TapeStats {
    pub nodes: usize,
    /// Scalars held by nodes for their backward rules.
    pub saved_elements: usize,
}

/// A gradient contribution injected into the reverse sweep.
///
/// The grad is added to `node`'s slot once the sweep has processed every
/// node at index `>= position`, i.e. just before node `position - 1`.
#[derive(Debug, Clone)]
pub struct Seed<F: Scalar> {
    pub node: NodeId,
    pub grad: Tensor<F>,
    pub position: usize,
}

/// Gradients of the requires-grad leaves, keyed by node.
#[derive(Debug, Clone)]
pub struct Gradients<F: Scalar> {
    map: BTreeMap<NodeId, Tensor<F>>,
}

impl<F: Scalar> Default for Gradients<F> {
    fn default() -> Self {
        Gradients {
            map: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for a tensor registered with [`Tape::param`].
    pub fn get(&self, t: &Tensor<F>) -> Option<&Tensor<F>> {
        t.node().and_then(|n| self.map.get(&n))
    }

    pub fn get_node(&self, n: NodeId) -> Option<&Tensor<F>> {
        self.map.get(&n)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor<F>)> {
        self.map.iter()
    }
}

pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> TapeStats {
        TapeStats {
            nodes: self.nodes.len(),
            saved_elements: self.nodes.iter().map(|n| n.op.saved_elements()).sum(),
        }
    }

    fn handle(&self, t: &Tensor<F>) -> Result<Option<NodeId>> {
        match t.node() {
            None => Ok(None),
            Some(n) if n.tape == self.id && n.index < self.nodes.len() => Ok(Some(n)),
            Some(n) => Err(Error::Contract(format!(
                "tensor handle {n:?} was not recorded on this tape"
            ))),
        }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Tensor<F> {
        let id = NodeId {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
            numel: value.numel(),
        });
        value.with_node(Some(id))
    }

    /// Registers a trainable leaf; its gradient appears in [`Gradients`].
    pub fn param(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.push(
            Op::Leaf {
                requires_grad: true,
            },
            t.detach(),
        )
    }

    /// Records a leaf that does not receive a gradient.
    pub fn constant(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.push(
            Op::Leaf {
                requires_grad: false,
            },
            t.detach(),
        )
    }

    /// Pass-through node. The executor places one on every state value that
    /// crosses a time-step boundary, so gradients arriving from the next step
    /// are summed on their own before they meet same-step contributions.
    pub fn identity(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let value = x.detach();
        Ok(match self.handle(x)? {
            Some(x) => self.push(Op::Identity { x }, value),
            None => value,
        })
    }

    pub fn reshape(&mut self, x: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
        let value = x.reshaped(shape)?;
        Ok(match self.handle(x)? {
            Some(x) => self.push(Op::Identity { x }, value),
            None => value,
        })
    }

    fn bcast(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<Bcast> {
        if a.shape() == b.shape() {
            Ok(Bcast::Same)
        } else if a.rank() == 0 {
            Ok(Bcast::LhsScalar)
        } else if b.rank() == 0 {
            Ok(Bcast::RhsScalar)
        } else {
            Err(Error::shape(op, a.shape(), b.shape()))
        }
    }

    fn zip(a: &Tensor<F>, b: &Tensor<F>, bcast: Bcast, f: impl Fn(F, F) -> F) -> Tensor<F> {
        match bcast {
            Bcast::Same => Tensor::from_parts(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            Bcast::LhsScalar => {
                let x = a.data()[0];
                Tensor::from_parts(
                    b.shape().to_vec(),
                    b.data().iter().map(|&y| f(x, y)).collect(),
                )
            }
            Bcast::RhsScalar => {
                let y = b.data()[0];
                Tensor::from_parts(
                    a.shape().to_vec(),
                    a.data().iter().map(|&x| f(x, y)).collect(),
                )
            }
        }
    }

    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let bcast = Self::bcast("add", a, b)?;
        let value = Self::zip(a, b, bcast, |x, y| x + y);
        let (ha, hb) = (self.handle(a)?, self.handle(b)?);
        Ok(if ha.is_some() || hb.is_some() {
            self.push(
                Op::Add {
                    a: ha,
                    b: hb,
                    bcast,
                },
                value,
            )
        } else {
            value
        })
    }

    pub fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let bcast = Self::bcast("sub", a, b)?;
        let value = Self::zip(a, b, bcast, |x, y| x - y);
        let (ha, hb) = (self.handle(a)?, self.handle(b)?);
        Ok(if ha.is_some() || hb.is_some() {
            self.push(
                Op::Sub {
                    a: ha,
                    b: hb,
                    bcast,
                },
                value,
            )
        } else {
            value
        })
    }

    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let bcast = Self::bcast("mul", a, b)?;
        let value = Self::zip(a, b, bcast, |x, y| x * y);
        let (ha, hb) = (self.handle(a)?, self.handle(b)?);
        Ok(if ha.is_some() || hb.is_some() {
            // Each side's gradient needs only the other side's value.
            let av = hb.map(|_| a.detach());
            let bv = ha.map(|_| b.detach());
            self.push(
                Op::Mul {
                    a: ha,
                    b: hb,
                    av,
                    bv,
                    bcast,
                },
                value,
            )
        } else {
            value
        })
    }

    pub fn scale(&mut self, x: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v * c).collect(),
        );
        Ok(match self.handle(x)? {
            Some(x) => self.push(Op::Scale { x, c }, value),
            None => value,
        })
    }

    pub fn sum_all(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut acc = F::ZERO;
        for &v in x.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc);
        Ok(match self.handle(x)? {
            Some(x) => self.push(Op::SumAll { x }, value),
            None => value,
        })
    }

    /// Sums over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
        if axis >= x.rank() {
            return Err(Error::Contract(format!(
                "sum_axis: axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let shape = x.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = x.data();
        let mut out = vec![F::ZERO; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, out);
        Ok(match self.handle(x)? {
            Some(x) => self.push(
                Op::SumAxis {
                    x,
                    outer,
                    len,
                    inner,
                },
                value,
            ),
            None => value,
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        self.linear(a, b)
    }

    /// Applies `w[k×n]` to the last axis of `x[..., k]`, treating every
    /// leading index as an independent row.
    pub fn linear(&mut self, x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
        if x.rank() == 0 || w.rank() != 2 || *x.shape().last().unwrap() != w.shape()[0] {
            return Err(Error::shape("linear", x.shape(), w.shape()));
        }
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / k;
        let mut out = vec![F::ZERO; rows * n];
        kernels::matmul(x.data(), w.data(), &mut out, rows, k, n);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_parts(shape, out);
        let (hx, hw) = (self.handle(x)?, self.handle(w)?);
        Ok(if hx.is_some() || hw.is_some() {
            let xv = hw.map(|_| x.detach());
            let wv = hx.map(|_| w.detach());
            self.push(
                Op::Linear {
                    x: hx,
                    w: hw,
                    xv,
                    wv,
                    rows,
                    k,
                    n,
                },
                value,
            )
        } else {
            value
        })
    }

    /// 2-D cross-correlation. `x` is `[C×H×W]` or a batch `[B×C×H×W]`;
    /// `w` is `[C_out×C×k×k]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<F>,
        w: &Tensor<F>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<F>> {
        if stride == 0 {
            return Err(Error::validation("conv2d stride", "must be positive"));
        }
        let ws = w.shape();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", x.shape(), ws));
        }
        let (batch, img) = match x.rank() {
            3 => (None, x.shape()),
            4 => (Some(x.shape()[0]), &x.shape()[1..]),
            _ => return Err(Error::shape("conv2d", x.shape(), ws)),
        };
        if img[0] != ws[1] {
            return Err(Error::shape("conv2d", x.shape(), ws));
        }
        let k = ws[2];
        if ConvGeom::out_extent(img[1], k, stride, padding).is_none()
            || ConvGeom::out_extent(img[2], k, stride, padding).is_none()
        {
            return Err(Error::shape("conv2d", x.shape(), ws));
        }
        let geom = ConvGeom {
            c_in: img[0],
            h: img[1],
            w: img[2],
            c_out: ws[0],
            k,
            stride,
            pad: padding,
        };
        let b = batch.unwrap_or(1);
        let (in_len, out_len, p) = (geom.in_len(), geom.out_len(), geom.h_out() * geom.w_out());
        let mut out = vec![F::ZERO; b * out_len];
        for bi in 0..b {
            let col = kernels::im2col(&x.data()[bi * in_len..(bi + 1) * in_len], &geom);
            kernels::matmul(
                w.data(),
                &col,
                &mut out[bi * out_len..(bi + 1) * out_len],
                geom.c_out,
                geom.patch_len(),
                p,
            );
        }
        let mut shape = batch.map(|b| vec![b]).unwrap_or_default();
        shape.extend([geom.c_out, geom.h_out(), geom.w_out()]);
        let value = Tensor::from_parts(shape, out);
        let (hx, hw) = (self.handle(x)?, self.handle(w)?);
        Ok(if hx.is_some() || hw.is_some() {
            let xv = hw.map(|_| x.detach());
            let wv = hx.map(|_| w.detach());
            self.push(
                Op::Conv2d {
                    x: hx,
                    w: hw,
                    xv,
                    wv,
                    geom,
                    batch: b,
                },
                value,
            )
        } else {
            value
        })
    }

    /// Heaviside step `u >= thr`; backward multiplies by the surrogate
    /// derivative at `u - thr`.
    pub fn threshold(
        &mut self,
        u: &Tensor<F>,
        thr: F,
        surrogate: SurrogateFn,
    ) -> Result<Tensor<F>> {
        let value = Tensor::from_parts(
            u.shape().to_vec(),
            u.data()
                .iter()
                .map(|&v| if v >= thr { F::ONE } else { F::ZERO })
                .collect(),
        );
        Ok(match self.handle(u)? {
            Some(x) => {
                let centered = u.data().iter().map(|&v| v - thr).collect();
                self.push(
                    Op::Threshold {
                        x,
                        centered,
                        surrogate,
                    },
                    value,
                )
            }
            None => value,
        })
    }

    /// Smooth stand-in for [`threshold`](Self::threshold): the surrogate's
    /// sigmoid-shaped primitive at `u - thr`, differentiated exactly.
    pub fn smooth_threshold(
        &mut self,
        u: &Tensor<F>,
        thr: F,
        surrogate: SurrogateFn,
        sharpness: F,
    ) -> Result<Tensor<F>> {
        if !(sharpness > F::ZERO && sharpness.is_finite()) {
            return Err(Error::validation(
                "sharpness",
                "must be positive and finite",
            ));
        }
        let centered: Vec<F> = u.data().iter().map(|&v| v - thr).collect();
        let value = Tensor::from_parts(
            u.shape().to_vec(),
            centered
                .iter()
                .map(|&x| surrogate.smooth_step(x, sharpness))
                .collect(),
        );
        Ok(match self.handle(u)? {
            Some(x) => self.push(
                Op::SmoothThreshold {
                    x,
                    centered,
                    surrogate,
                    sharpness,
                },
                value,
            ),
            None => value,
        })
    }

    /// `-log softmax(logits)[class]` for a one-hot `target`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor<F>,
        target: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        if logits.rank() != 1 || logits.numel() < 2 {
            return Err(Error::validation(
                "logits",
                format!(
                    "need a vector of at least 2 classes, got {:?}",
                    logits.shape()
                ),
            ));
        }
        if target.shape() != logits.shape() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                logits.shape(),
                target.shape(),
            ));
        }
        let ones = target.data().iter().filter(|&&v| v == F::ONE).count();
        let zeros = target.data().iter().filter(|&&v| v == F::ZERO).count();
        if ones != 1 || ones + zeros != target.numel() {
            return Err(Error::validation("target", "must be one-hot"));
        }
        let class = target.data().iter().position(|&v| v == F::ONE).unwrap();
        let l = logits.data();
        let (argmax, m) =
            l.iter().copied().enumerate().fold(
                (0, l[0]),
                |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) },
            );
        // The argmax term contributes exactly 1 to the shifted sum, so
        // ln(sum) = ln_1p(rest); this keeps small losses accurate.
        let mut rest = F::ZERO;
        for (i, &v) in l.iter().enumerate() {
            if i != argmax {
                rest += (v - m).exp();
            }
        }
        let loss = (m - l[class]) + rest.ln_1p();
        let denom = F::ONE + rest;
        let probs = l.iter().map(|&v| (v - m).exp() / denom).collect();
        let value = Tensor::scalar(loss);
        Ok(match self.handle(logits)? {
            Some(x) => self.push(
                Op::SoftmaxCrossEntropy {
                    x,
                    probs,
                    target: target.to_vec(),
                },
                value,
            ),
            None => value,
        })
    }

    /// Index `index` along the first axis.
    pub fn select(&mut self, x: &Tensor<F>, index: usize) -> Result<Tensor<F>> {
        let value = x.row(index)?;
        let row_len = value.numel();
        Ok(match self.handle(x)? {
            Some(x) => self.push(Op::Select { x, index, row_len }, value),
            None => value,
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Tensor<F>]) -> Result<Tensor<F>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let row_len = first.numel();
        let mut data = Vec::with_capacity(row_len * xs.len());
        let mut handles = Vec::with_capacity(xs.len());
        for x in xs {
            if x.shape() != first.shape() {
                return Err(Error::shape("stack", first.shape(), x.shape()));
            }
            data.extend_from_slice(x.data());
            handles.push(self.handle(x)?);
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(first.shape());
        let value = Tensor::from_parts(shape, data);
        Ok(if handles.iter().any(Option::is_some) {
            self.push(
                Op::Stack {
                    xs: handles,
                    row_len,
                },
                value,
            )
        } else {
            value
        })
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: &Tensor<F>) -> Result<Gradients<F>> {
        if output.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar seed, got shape {:?}",
                output.shape()
            )));
        }
        let node = self
            .handle(output)?
            .ok_or_else(|| Error::Contract("backward from an untracked tensor".into()))?;
        self.backward_seeded(vec![Seed {
            node,
            grad: Tensor::full(output.shape(), F::ONE),
            position: self.nodes.len(),
        }])
    }

    /// Reverse sweep with explicit gradient seeds. Seeds sharing a position
    /// are added in the order given. Gradient slots are fresh on every call.
    pub fn backward_seeded(&self, mut seeds: Vec<Seed<F>>) -> Result<Gradients<F>> {
        let n = self.nodes.len();
        for s in &seeds {
            if s.node.tape != self.id || s.node.index >= n {
                return Err(Error::Contract(format!(
                    "seed node {:?} is not on this tape",
                    s.node
                )));
            }
            if s.position <= s.node.index || s.position > n {
                return Err(Error::Contract(format!(
                    "seed for node {} injected at position {} would miss it",
                    s.node.index, s.position
                )));
            }
            if s.grad.numel() != self.nodes[s.node.index].numel {
                return Err(Error::Contract(format!(
                    "seed gradient has {} elements, node {} has {}",
                    s.grad.numel(),
                    s.node.index,
                    self.nodes[s.node.index].numel
                )));
            }
        }
        // Stable sort keeps caller order among equal positions.
        seeds.sort_by_key(|s| std::cmp::Reverse(s.position));

        let mut slots: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        let mut grads = BTreeMap::new();
        let mut next_seed = 0;
        for i in (0..n).rev() {
            while next_seed < seeds.len() && seeds[next_seed].position > i {
                let s = &seeds[next_seed];
                let slot = Self::slot(&mut slots, &self.nodes, s.node);
                for (d, &v) in slot.iter_mut().zip(s.grad.data()) {
                    *d += v;
                }
                next_seed += 1;
            }
            let node = &self.nodes[i];
            if let Op::Leaf { requires_grad } = node.op {
                if requires_grad {
                    let g = slots[i].take().unwrap_or_else(|| vec![F::ZERO; node.numel]);
                    let id = NodeId {
                        tape: self.id,
                        index: i,
                    };
                    grads.insert(id, Tensor::from_parts(node.shape.clone(), g));
                }
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.backprop_node(&node.op, &g, &mut slots);
        }
        Ok(Gradients { map: grads })
    }

    fn slot<'a>(slots: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], id: NodeId) -> &'a mut Vec<F> {
        let len = nodes[id.index].numel;
        slots[id.index].get_or_insert_with(|| vec![F::ZERO; len])
    }

    fn add_into(
        slots: &mut [Option<Vec<F>>],
        nodes: &[Node<F>],
        id: NodeId,
        f: impl Fn(usize) -> F,
    ) {
        let slot = Self::slot(slots, nodes, id);
        for (i, d) in slot.iter_mut().enumerate() {
            *d += f(i);
        }
    }

    fn add_scalar_into(slots: &mut [Option<Vec<F>>], nodes: &[Node<F>], id: NodeId, v: F) {
        Self::slot(slots, nodes, id)[0] += v;
    }

    fn backprop_node(&self, op: &Op<F>, g: &[F], slots: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        match op {
            Op::Leaf { .. } => {}
            Op::Identity { x } => Self::add_into(slots, nodes, *x, |i| g[i]),
            Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                let neg_b = matches!(op, Op::Sub { .. });
                let total = || {
                    let mut acc = F::ZERO;
                    for &v in g {
                        acc += v;
                    }
                    acc
                };
                if let Some(a) = a {
                    match bcast {
                        Bcast::LhsScalar => Self::add_scalar_into(slots, nodes, *a, total()),
                        _ => Self::add_into(slots, nodes, *a, |i| g[i]),
                    }
                }
                if let Some(b) = b {
                    let sign = if neg_b { -F::ONE } else { F::ONE };
                    match bcast {
                        Bcast::RhsScalar => Self::add_scalar_into(slots, nodes, *b, sign * total()),
                        _ if neg_b => Self::add_into(slots, nodes, *b, |i| -g[i]),
                        _ => Self::add_into(slots, nodes, *b, |i| g[i]),
                    }
                }
            }
            Op::Mul {
                a,
                b,
                av,
                bv,
                bcast,
            } => {
                if let (Some(a), Some(bv)) = (a, bv) {
                    let bd = bv.data();
                    match bcast {
                        Bcast::Same => Self::add_into(slots, nodes, *a, |i| g[i] * bd[i]),
                        Bcast::RhsScalar => Self::add_into(slots, nodes, *a, |i| g[i] * bd[0]),
                        Bcast::LhsScalar => {
                            let mut acc = F::ZERO;
                            for (gi, bi) in g.iter().zip(bd) {
                                acc += *gi * *bi;
                            }
                            Self::add_scalar_into(slots, nodes, *a, acc)
                        }
                    }
                }
                if let (Some(b), Some(av)) = (b, av) {
                    let ad = av.data();
                    match bcast {
                        Bcast::Same => Self::add_into(slots, nodes, *b, |i| g[i] * ad[i]),
                        Bcast::LhsScalar => Self::add_into(slots, nodes, *b, |i| g[i] * ad[0]),
                        Bcast::RhsScalar => {
                            let mut acc = F::ZERO;
                            for (gi, ai) in g.iter().zip(ad) {
                                acc += *gi * *ai;
                            }
                            Self::add_scalar_into(slots, nodes, *b, acc)
                        }
                    }
                }
            }
            Op::Scale { x, c } => Self::add_into(slots, nodes, *x, |i| g[i] * *c),
            Op::SumAll { x } => Self::add_into(slots, nodes, *x, |_| g[0]),
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let (len, inner) = (*len, *inner);
                let _ = outer;
                Self::add_into(slots, nodes, *x, |idx| {
                    let o = idx / (len * inner);
                    let i = idx % inner;
                    g[o * inner + i]
                })
            }
            Op::Linear {
                x,
                w,
                xv,
                wv,
                rows,
                k,
                n,
            } => {
                let (rows, k, n) = (*rows, *k, *n);
                if let (Some(x), Some(wv)) = (x, wv) {
                    let wt = kernels::transpose(wv.data(), k, n);
                    let mut tmp = vec![F::ZERO; rows * k];
                    kernels::matmul(g, &wt, &mut tmp, rows, n, k);
                    Self::add_into(slots, nodes, *x, |i| tmp[i]);
                }
                if let (Some(w), Some(xv)) = (w, xv) {
                    let slot = Self::slot(slots, nodes, *w);
                    kernels::accumulate_at_b(xv.data(), g, slot, rows, k, n);
                }
            }
            Op::Conv2d {
                x,
                w,
                xv,
                wv,
                geom,
                batch,
            } => {
                let (q, p) = (geom.patch_len(), geom.h_out() * geom.w_out());
                let (in_len, out_len) = (geom.in_len(), geom.out_len());
                let wt = wv
                    .as_ref()
                    .map(|wv| kernels::transpose(wv.data(), geom.c_out, q));
                for bi in (0..*batch).rev() {
                    let gb = &g[bi * out_len..(bi + 1) * out_len];
                    if let (Some(w), Some(xv)) = (w, xv) {
                        let col = kernels::im2col(&xv.data()[bi * in_len..(bi + 1) * in_len], geom);
                        let col_t = kernels::transpose(&col, q, p);
                        let mut tmp = vec![F::ZERO; geom.c_out * q];
                        kernels::matmul(gb, &col_t, &mut tmp, geom.c_out, p, q);
                        Self::add_into(slots, nodes, *w, |i| tmp[i]);
                    }
                    if let (Some(x), Some(wt)) = (x, &wt) {
                        let mut dcol = vec![F::ZERO; q * p];
                        kernels::matmul(wt, gb, &mut dcol, q, geom.c_out, p);
                        let slot = Self::slot(slots, nodes, *x);
                        kernels::col2im_add(&dcol, geom, &mut slot[bi * in_len..(bi + 1) * in_len]);
                    }
                }
            }
            Op::Threshold {
                x,
                centered,
                surrogate,
            } => Self::add_into(slots, nodes, *x, |i| {
                g[i] * surrogate.derivative(centered[i])
            }),
            Op::SmoothThreshold {
                x,
                centered,
                surrogate,
                sharpness,
            } => Self::add_into(slots, nodes, *x, |i| {
                g[i] * surrogate.smooth_step_derivative(centered[i], *sharpness)
            }),
            Op::SoftmaxCrossEntropy { x, probs, target } => {
                Self::add_into(slots, nodes, *x, |i| g[0] * (probs[i] - target[i]))
            }
            Op::Select { x, index, row_len } => {
                let slot = Self::slot(slots, nodes, *x);
                let base = index * row_len;
                for (d, &v) in slot[base..base + row_len].iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Stack { xs, row_len } => {
                for (t, x) in xs.iter().enumerate() {
                    if let Some(x) = x {
                        let part = &g[t * row_len..(t + 1) * row_len];
                        Self::add_into(slots, nodes, *x, |i| part[i]);
                    }
                }
            }
        }
    }
}
