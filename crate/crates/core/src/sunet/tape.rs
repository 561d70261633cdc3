//! Reverse-mode gradients for the fixed operator set of the network.
//!
//! Operations are recorded on a [`Tape`] as they run. Trainable tensors live
//! in a [`ParamSet`] outside the tape; a node only takes part in the
//! backward pass when some trainable tensor lies upstream of it.

use std::ops::Range;

use crate::conv::{conv3d_backward, conv3d_forward, maxpool2_backward, maxpool2_forward, upconv2_backward, upconv2_forward, Real, Shape4};

pub type NodeId = usize;
pub type ParamId = usize;

/// Named tensors with a per-tensor frozen flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<T>>,
    /// Frozen tensors never receive gradients or updates.
    pub frozen: Vec<bool>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<T>, frozen: bool) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "tensor shape");
        self.names.push(name.into());
        self.shapes.push(shape);
        self.values.push(values);
        self.frozen.push(frozen);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn trainable(&self, p: ParamId) -> bool {
        !self.frozen[p]
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|v| v.iter().map(|&x| U::of(x.f64())).collect()).collect(),
            frozen: self.frozen.clone(),
        }
    }
}

enum Op<T> {
    Input,
    /// `y = x·scale[c] + shift[c]` with constant coefficients.
    Affine { x: NodeId, scale: Vec<T> },
    Conv { x: NodeId, w: ParamId, b: Option<ParamId>, k: usize },
    UpConv { x: NodeId, w: ParamId, b: ParamId },
    Relu { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    Concat { parts: Vec<NodeId> },
}

struct Node<T> {
    value: Vec<T>,
    shape: Shape4,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn value(&self, n: NodeId) -> &[T] {
        &self.nodes[n].value
    }

    pub fn shape(&self, n: NodeId) -> Shape4 {
        self.nodes[n].shape
    }

    pub fn take_value(&mut self, n: NodeId) -> Vec<T> {
        std::mem::take(&mut self.nodes[n].value)
    }

    fn push(&mut self, value: Vec<T>, shape: Shape4, op: Op<T>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Vec<T>, shape: Shape4) -> NodeId {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "input shape");
        self.push(value, shape, Op::Input, false)
    }

    pub fn affine(&mut self, x: NodeId, scale: &[T], shift: &[T]) -> NodeId {
        let shape = self.shape(x);
        assert!(scale.len() == shape[0] && shift.len() == shape[0], "affine channels");
        let vox = shape[1] * shape[2] * shape[3];
        let mut value = self.nodes[x].value.clone();
        for (c, chunk) in value.chunks_exact_mut(vox).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
        }
        let ng = self.nodes[x].needs_grad;
        self.push(value, shape, Op::Affine { x, scale: scale.to_vec() }, ng)
    }

    /// Same-padded convolution; the kernel size follows from the weight
    /// shape `[C_out, C_in, k, k, k]`.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let ws = &self.params.shapes[w];
        let (c_out, k) = (ws[0], ws[2]);
        let shape = self.shape(x);
        assert_eq!(ws[1], shape[0], "conv input channels of {}", self.params.names[w]);
        let value = conv3d_forward(
            &self.nodes[x].value,
            shape,
            &self.params.values[w],
            c_out,
            k,
            b.map(|b| self.params.values[b].as_slice()),
        );
        let ng = self.nodes[x].needs_grad || self.params.trainable(w) || b.is_some_and(|b| self.params.trainable(b));
        self.push(value, [c_out, shape[1], shape[2], shape[3]], Op::Conv { x, w, b, k }, ng)
    }

    /// 2³ stride-2 transposed convolution.
    pub fn upconv(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let c_out = self.params.shapes[w][0];
        let shape = self.shape(x);
        assert_eq!(self.params.shapes[w][1], shape[0], "upconv input channels");
        let value = upconv2_forward(&self.nodes[x].value, shape, &self.params.values[w], c_out, &self.params.values[b]);
        let ng = self.nodes[x].needs_grad || self.params.trainable(w) || self.params.trainable(b);
        self.push(value, [c_out, 2 * shape[1], 2 * shape[2], 2 * shape[3]], Op::UpConv { x, w, b }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|&v| v.max(T::zero())).collect();
        let (shape, ng) = (self.shape(x), self.nodes[x].needs_grad);
        self.push(value, shape, Op::Relu { x }, ng)
    }

    pub fn maxpool(&mut self, x: NodeId) -> NodeId {
        let (value, argmax, shape) = maxpool2_forward(&self.nodes[x].value, self.shape(x));
        let ng = self.nodes[x].needs_grad;
        self.push(value, shape, Op::MaxPool { x, argmax }, ng)
    }

    /// Channel-wise concatenation of same-extent nodes.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let s0 = self.shape(parts[0]);
        let mut c = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[1..], s0[1..], "concat extents");
            c += s[0];
            value.extend_from_slice(&self.nodes[p].value);
        }
        let ng = parts.iter().any(|&p| self.nodes[p].needs_grad);
        self.push(value, [c, s0[1], s0[2], s0[3]], Op::Concat { parts: parts.to_vec() }, ng)
    }

    /// Channels of `x` whose gradient is needed.
    fn grad_channels(&self, x: NodeId) -> Option<Range<usize>> {
        let node = &self.nodes[x];
        if !node.needs_grad {
            return None;
        }
        let Op::Concat { parts } = &node.op else {
            return Some(0..node.shape[0]);
        };
        let mut start = 0;
        let (mut lo, mut hi) = (usize::MAX, 0);
        for &p in parts {
            let c = self.nodes[p].shape[0];
            if self.nodes[p].needs_grad {
                lo = lo.min(start);
                hi = hi.max(start + c);
            }
            start += c;
        }
        Some(lo..hi)
    }

    /// Adds `g` (channels `first..`) into the gradient of `x`, splitting it
    /// across the parts of concatenations.
    fn accumulate(&self, grads: &mut [Option<Vec<T>>], x: NodeId, first: usize, g: &[T]) {
        let node = &self.nodes[x];
        if !node.needs_grad {
            return;
        }
        let vox = node.shape[1] * node.shape[2] * node.shape[3];
        let channels = g.len() / vox;
        if let Op::Concat { parts } = &node.op {
            let mut start = 0;
            for &p in parts {
                let c = self.nodes[p].shape[0];
                let lo = start.max(first);
                let hi = (start + c).min(first + channels);
                if lo < hi {
                    self.accumulate(grads, p, lo - start, &g[(lo - first) * vox..(hi - first) * vox]);
                }
                start += c;
            }
            return;
        }
        let buf = grads[x].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        for (d, &s) in buf[first * vox..].iter_mut().zip(g) {
            *d = *d + s;
        }
    }

    /// Back-propagates `seed` (the gradient of the loss with respect to
    /// `out`) and returns one gradient per trainable parameter.
    pub fn backward(&self, out: NodeId, seed: Vec<T>) -> Vec<Option<Vec<T>>> {
        let mut pgrads: Vec<Option<Vec<T>>> = (0..self.params.len())
            .map(|p| self.params.trainable(p).then(|| vec![T::zero(); self.params.values[p].len()]))
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        self.accumulate(&mut grads, out, 0, &seed);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Concat { .. } => {}
                Op::Affine { x, scale } => {
                    let vox = node.shape[1] * node.shape[2] * node.shape[3];
                    let gx: Vec<T> = g.iter().enumerate().map(|(j, &v)| v * scale[j / vox]).collect();
                    self.accumulate(&mut grads, *x, 0, &gx);
                }
                Op::Relu { x } => {
                    let gx: Vec<T> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *x, 0, &gx);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = maxpool2_backward(&g, argmax, self.nodes[*x].value.len());
                    self.accumulate(&mut grads, *x, 0, &gx);
                }
                Op::Conv { x, w, b, k } => {
                    let range = self.grad_channels(*x);
                    let (gw, gb) = split_two(&mut pgrads, *w, *b);
                    let gx = conv3d_backward(
                        &self.nodes[*x].value,
                        self.nodes[*x].shape,
                        &self.params.values[*w],
                        node.shape[0],
                        *k,
                        &g,
                        gw,
                        gb,
                        range.clone(),
                    );
                    if let (Some(gx), Some(r)) = (gx, range) {
                        self.accumulate(&mut grads, *x, r.start, &gx);
                    }
                }
                Op::UpConv { x, w, b } => {
                    let need = self.nodes[*x].needs_grad;
                    let (gw, gb) = split_two(&mut pgrads, *w, Some(*b));
                    let gx = upconv2_backward(
                        &self.nodes[*x].value,
                        self.nodes[*x].shape,
                        &self.params.values[*w],
                        node.shape[0],
                        &g,
                        gw,
                        gb,
                        need,
                    );
                    if let Some(gx) = gx {
                        self.accumulate(&mut grads, *x, 0, &gx);
                    }
                }
            }
        }
        pgrads
    }
}

/// Mutable borrows of two distinct parameter gradients.
fn split_two<T>(grads: &mut [Option<Vec<T>>], a: ParamId, b: Option<ParamId>) -> (Option<&mut [T]>, Option<&mut [T]>) {
    match b {
        None => (grads[a].as_deref_mut(), None),
        Some(b) => {
            assert_ne!(a, b);
            if a < b {
                let (lo, hi) = grads.split_at_mut(b);
                (lo[a].as_deref_mut(), hi[0].as_deref_mut())
            } else {
                let (lo, hi) = grads.split_at_mut(a);
                (hi[0].as_deref_mut(), lo[b].as_deref_mut())
            }
        }
    }
}
