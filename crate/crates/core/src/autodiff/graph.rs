//! Tape of primitive operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so a node's inputs always carry
//! smaller ids and the tape is acyclic by construction. `backward` walks the
//! tape once in reverse.

use super::tensor::{numel, Real, Shape, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Input,
    Param(usize),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Unary {
        input: NodeId,
        kind: Activation,
    },
    BceMean {
        pred: NodeId,
        target: Vec<T>,
    },
    Sum {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    AddConst {
        input: NodeId,
    },
    WeightedSum {
        weights: NodeId,
        descriptors: Vec<T>,
        dim: usize,
    },
    L2Norm {
        input: NodeId,
    },
    Sample {
        map: NodeId,
        taps: Vec<[(usize, T); 4]>,
    },
    WeightedMean {
        weights: NodeId,
        values: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Lower and upper bounds applied to predictions before the logarithms in
/// [`Graph::bce_mean`].
pub const BCE_CLAMP: f64 = 1e-7;

/// A forward pass recorded for differentiation.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Discrete choices taken by the forward pass: ReLU signs, pooling
    /// winners and BCE clamping. Two recordings of the same computation with
    /// equal patterns lie on the same smooth piece of the loss.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary {
                    input,
                    kind: Activation::Relu,
                } => out.extend(self.nodes[input.0].value.data().iter().map(|v| usize::from(*v > T::zero()))),
                Op::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
                Op::BceMean { pred, .. } => out.extend(self.nodes[pred.0].value.data().iter().map(|v| {
                    let v = v.as_f64();
                    usize::from(v > BCE_CLAMP) + usize::from(v >= 1.0 - BCE_CLAMP)
                })),
                _ => {}
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>, AutodiffError> {
        self.nodes
            .get(id.0)
            .ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn shape_of(&self, id: NodeId) -> Result<Shape, AutodiffError> {
        Ok(self.node(id)?.value.shape())
    }

    /// Constant input; receives a gradient but is not a trainable parameter.
    pub fn input(&mut self, tensor: Tensor<T>) -> NodeId {
        self.push(Op::Input, tensor)
    }

    /// Trainable leaf identified by its index in the owning parameter set.
    pub fn param(&mut self, index: usize, tensor: &Tensor<T>) -> NodeId {
        let mut value = tensor.clone();
        value.clear_grad();
        self.push(Op::Param(index), value)
    }

    /// Same-size zero-padded convolution with stride 1.
    ///
    /// `kernel` is `[out_c, in_c, kh, kw]` with odd spatial extents and `bias`
    /// holds `out_c` values.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let xs = self.shape_of(input)?;
        let ks = self.shape_of(kernel)?;
        let bs = self.shape_of(bias)?;
        if ks[1] != xs[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ks,
            });
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(AutodiffError::EvenKernel { shape: ks });
        }
        if numel(&bs) != ks[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d bias",
                left: ks,
                right: bs,
            });
        }
        let value = conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            value,
        ))
    }

    /// 2×2 max pooling with stride 2.
    pub fn pool_down(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let [n, c, h, w] = self.shape_of(input)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::OddExtent { shape: [n, c, h, w] });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.nodes[input.0].value.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2 { input, argmax }, value))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let [n, c, h, w] = self.shape_of(input)?;
        let x = self.nodes[input.0].value.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                let row = &x[base + (y / 2) * w..base + (y / 2 + 1) * w];
                for v in row {
                    out.push(*v);
                    out.push(*v);
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(Op::Upsample2 { input }, value))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_channels",
                left: sa,
                right: sb,
            });
        }
        let [n, ca, h, w] = sa;
        let cb = sb[1];
        let plane = h * w;
        let xa = self.nodes[a.0].value.data();
        let xb = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for bn in 0..n {
            out.extend_from_slice(&xa[bn * ca * plane..(bn + 1) * ca * plane]);
            out.extend_from_slice(&xb[bn * cb * plane..(bn + 1) * cb * plane]);
        }
        let value = Tensor::new([n, ca + cb, h, w], out)?;
        Ok(self.push(Op::Concat { a, b }, value))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> Result<NodeId, AutodiffError> {
        let x = &self.node(input)?.value;
        let out: Vec<T> = match kind {
            Activation::Relu => x.data().iter().map(|v| v.max(T::zero())).collect(),
            Activation::Sigmoid => x.data().iter().map(|v| sigmoid(*v)).collect(),
        };
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::Unary { input, kind }, value))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Mean binary cross entropy of `pred` against a constant `target`.
    ///
    /// Predictions are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the
    /// logarithms; the derivative is taken at the clamped value.
    pub fn bce_mean(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId, AutodiffError> {
        let p = &self.node(pred)?.value;
        if p.shape() != target.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_mean",
                left: p.shape(),
                right: target.shape(),
            });
        }
        if let Some(bad) = target
            .data()
            .iter()
            .find(|s| !(s.as_f64() >= 0.0 && s.as_f64() <= 1.0))
        {
            return Err(AutodiffError::TargetRange(bad.as_f64()));
        }
        let mut acc = 0.0f64;
        for (a, s) in p.data().iter().zip(target.data()) {
            let a = a.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let s = s.as_f64();
            acc -= s * a.ln() + (1.0 - s) * (1.0 - a).ln();
        }
        let mean = if p.is_empty() { 0.0 } else { acc / p.len() as f64 };
        Ok(self.push(
            Op::BceMean {
                pred,
                target: target.data().to_vec(),
            },
            Tensor::scalar(T::from_f64(mean)),
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let x = &self.node(input)?.value;
        let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        Ok(self.push(Op::Sum { input }, Tensor::scalar(T::from_f64(s))))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: Binary) -> Result<NodeId, AutodiffError> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: kind.name(),
                left: sa,
                right: sb,
            });
        }
        let xa = self.nodes[a.0].value.data();
        let xb = self.nodes[b.0].value.data();
        let out = xa
            .iter()
            .zip(xb)
            .map(|(p, q)| match kind {
                Binary::Add => *p + *q,
                Binary::Sub => *p - *q,
                Binary::Mul => *p * *q,
            })
            .collect();
        let value = Tensor::new(sa, out)?;
        let op = match kind {
            Binary::Add => Op::Add { a, b },
            Binary::Sub => Op::Sub { a, b },
            Binary::Mul => Op::Mul { a, b },
        };
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Binary::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> Result<NodeId, AutodiffError> {
        let x = &self.node(input)?.value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|v| *v * factor).collect())?;
        Ok(self.push(Op::Scale { input, factor }, value))
    }

    pub fn add_const(&mut self, input: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        let x = &self.node(input)?.value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|v| *v + c).collect())?;
        Ok(self.push(Op::AddConst { input }, value))
    }

    /// `Σ_p weights[p] · descriptors[p, :]` over a `[1, 1, h, w]` weight grid
    /// and a constant `h·w × dim` descriptor grid; yields a `[1, 1, 1, dim]`
    /// vector.
    pub fn weighted_sum(
        &mut self,
        weights: NodeId,
        descriptors: Vec<T>,
        dim: usize,
    ) -> Result<NodeId, AutodiffError> {
        let ws = self.shape_of(weights)?;
        let cells = numel(&ws);
        if ws[0] != 1 || ws[1] != 1 || descriptors.len() != cells * dim {
            return Err(AutodiffError::DescriptorGrid {
                weights: ws,
                len: descriptors.len(),
                dim,
            });
        }
        let w = self.nodes[weights.0].value.data();
        let mut acc = vec![0.0f64; dim];
        for (p, a) in w.iter().enumerate() {
            let a = a.as_f64();
            for (k, d) in descriptors[p * dim..(p + 1) * dim].iter().enumerate() {
                acc[k] += a * d.as_f64();
            }
        }
        let value = Tensor::vector(acc.into_iter().map(T::from_f64).collect());
        Ok(self.push(
            Op::WeightedSum {
                weights,
                descriptors,
                dim,
            },
            value,
        ))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let x = &self.node(input)?.value;
        let n: f64 = x.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        Ok(self.push(Op::L2Norm { input }, Tensor::scalar(T::from_f64(n))))
    }

    /// Bilinear samples of a `[1, 1, h, w]` map at pixel positions `(x, y)`.
    pub fn sample_points(
        &mut self,
        map: NodeId,
        points: &[(f64, f64)],
    ) -> Result<NodeId, AutodiffError> {
        let [n, c, h, w] = self.shape_of(map)?;
        if n != 1 || c != 1 {
            return Err(AutodiffError::NotAMap { shape: [n, c, h, w] });
        }
        let mut taps: Vec<[(usize, T); 4]> = Vec::with_capacity(points.len());
        for &(x, y) in points {
            taps.push(
                bilinear_taps(w, h, x, y)
                    .ok_or(AutodiffError::SampleOutOfBounds { x, y, h, w })?,
            );
        }
        let m = self.nodes[map.0].value.data();
        let out = taps
            .iter()
            .map(|t| {
                let v: f64 = t.iter().map(|(i, wt)| m[*i].as_f64() * wt.as_f64()).sum();
                T::from_f64(v)
            })
            .collect();
        Ok(self.push(Op::Sample { map, taps }, Tensor::vector(out)))
    }

    /// `Σ w_k v_k / Σ w_k` with differentiable weights and constant values.
    pub fn weighted_mean(&mut self, weights: NodeId, values: &[T]) -> Result<NodeId, AutodiffError> {
        let w = &self.node(weights)?.value;
        if w.len() != values.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "weighted_mean",
                left: w.shape(),
                right: [1, 1, 1, values.len()],
            });
        }
        let total: f64 = w.data().iter().map(|v| v.as_f64()).sum();
        if !(total > 0.0) {
            return Err(AutodiffError::ZeroWeight);
        }
        let num: f64 = w
            .data()
            .iter()
            .zip(values)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        Ok(self.push(
            Op::WeightedMean {
                weights,
                values: values.to_vec(),
            },
            Tensor::scalar(T::from_f64(num / total)),
        ))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: root.value.shape(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `id`, if `id` lies
    /// on a path to it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Parameter leaves on this tape as `(parameter index, node)` pairs.
    pub fn param_nodes(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(p) => Some((p, NodeId(i))),
            _ => None,
        })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let (gx, gk, gb) = conv2d_backward(x, k, g);
                accumulate(grads, *input, gx);
                accumulate(grads, *kernel, gk);
                accumulate(grads, *bias, gb);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gx = vec![T::zero(); self.nodes[input.0].value.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                accumulate(grads, *input, gx);
            }
            Op::Upsample2 { input } => {
                let [n, c, h, w] = self.nodes[input.0].value.shape();
                let ow = 2 * w;
                let mut gx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let ob = plane * 4 * h * w;
                    let ib = plane * h * w;
                    for y in 0..2 * h {
                        for x in 0..ow {
                            gx[ib + (y / 2) * w + x / 2] += g[ob + y * ow + x];
                        }
                    }
                }
                accumulate(grads, *input, gx);
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.nodes[a.0].value.shape();
                let cb = self.nodes[b.0].value.shape()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for bn in 0..n {
                    let base = bn * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Unary { input, kind } => {
                let gx = match kind {
                    Activation::Relu => self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(x, gv)| if *x > T::zero() { *gv } else { T::zero() })
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(s, gv)| *gv * *s * (T::one() - *s))
                        .collect(),
                };
                accumulate(grads, *input, gx);
            }
            Op::BceMean { pred, target } => {
                let p = self.nodes[pred.0].value.data();
                let scale = g[0].as_f64() / p.len().max(1) as f64;
                let gx = p
                    .iter()
                    .zip(target)
                    .map(|(a, s)| {
                        let a = a.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        let s = s.as_f64();
                        T::from_f64(scale * (-s / a + (1.0 - s) / (1.0 - a)))
                    })
                    .collect();
                accumulate(grads, *pred, gx);
            }
            Op::Sum { input } => {
                let n = self.nodes[input.0].value.len();
                accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.iter().map(|v| -*v).collect());
            }
            Op::Mul { a, b } => {
                let xa = self.nodes[a.0].value.data();
                let xb = self.nodes[b.0].value.data();
                accumulate(grads, *a, g.iter().zip(xb).map(|(gv, v)| *gv * *v).collect());
                accumulate(grads, *b, g.iter().zip(xa).map(|(gv, v)| *gv * *v).collect());
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, g.iter().map(|v| *v * *factor).collect());
            }
            Op::AddConst { input } => {
                accumulate(grads, *input, g.to_vec());
            }
            Op::WeightedSum {
                weights,
                descriptors,
                dim,
            } => {
                let cells = self.nodes[weights.0].value.len();
                let gw = (0..cells)
                    .map(|p| {
                        let s: f64 = descriptors[p * dim..(p + 1) * dim]
                            .iter()
                            .zip(g)
                            .map(|(d, gv)| d.as_f64() * gv.as_f64())
                            .sum();
                        T::from_f64(s)
                    })
                    .collect();
                accumulate(grads, *weights, gw);
            }
            Op::L2Norm { input } => {
                let x = self.nodes[input.0].value.data();
                let n = node.value.data()[0].as_f64();
                let gx = if n > 0.0 {
                    let f = g[0].as_f64() / n;
                    x.iter().map(|v| T::from_f64(v.as_f64() * f)).collect()
                } else {
                    vec![T::zero(); x.len()]
                };
                accumulate(grads, *input, gx);
            }
            Op::Sample { map, taps } => {
                let mut gm = vec![T::zero(); self.nodes[map.0].value.len()];
                for (t, gv) in taps.iter().zip(g) {
                    for (i, wt) in t {
                        gm[*i] += *wt * *gv;
                    }
                }
                accumulate(grads, *map, gm);
            }
            Op::WeightedMean { weights, values } => {
                let w = self.nodes[weights.0].value.data();
                let total: f64 = w.iter().map(|v| v.as_f64()).sum();
                let mean = node.value.data()[0].as_f64();
                let f = g[0].as_f64() / total;
                let gw = values
                    .iter()
                    .map(|v| T::from_f64(f * (v.as_f64() - mean)))
                    .collect();
                accumulate(grads, *weights, gw);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    // keep the open interval (0, 1) even where the exponential saturates
    let hi = T::one() - T::epsilon() / T::from_f64(2.0);
    s.max(T::min_positive_value()).min(hi)
}

/// The four `(flat index, weight)` taps of a bilinear sample on an `h × w`
/// grid, or `None` when `(x, y)` lies outside `[0, w-1] × [0, h-1]`.
pub(crate) fn bilinear_taps<T: Real>(w: usize, h: usize, x: f64, y: f64) -> Option<[(usize, T); 4]> {
    if w == 0 || h == 0 || !(x >= 0.0 && y >= 0.0) || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some([
        (y0 * w + x0, T::from_f64((1.0 - fx) * (1.0 - fy))),
        (y0 * w + x1, T::from_f64(fx * (1.0 - fy))),
        (y1 * w + x0, T::from_f64((1.0 - fx) * fy)),
        (y1 * w + x1, T::from_f64(fx * fy)),
    ])
}

/// Row span `[lo, hi)` of outputs whose tap at offset `d` stays inside `[0, n)`.
#[inline]
fn valid_span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

fn conv2d_forward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let [o, _, kh, kw] = k.shape();
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::zero(); n * o * plane];
    for bn in 0..n {
        for oc in 0..o {
            let out_plane = &mut out[(bn * o + oc) * plane..(bn * o + oc + 1) * plane];
            out_plane.fill(b.data()[oc]);
            for ic in 0..c {
                let in_plane = &xd[(bn * c + ic) * plane..(bn * c + ic + 1) * plane];
                for ky in 0..kh {
                    let dy = ky as isize - ph;
                    let (y0, y1) = valid_span(h, dy);
                    for kx in 0..kw {
                        let dx = kx as isize - pw;
                        let (x0, x1) = valid_span(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = kd[((oc * c + ic) * kh + ky) * kw + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let orow = &mut out_plane[y * w + x0..y * w + x1];
                            let irow = &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * *iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, o, h, w], out).expect("conv output length")
}

fn conv2d_backward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let [o, _, kh, kw] = k.shape();
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let xd = x.data();
    let kd = k.data();
    let mut gx = vec![T::zero(); xd.len()];
    let mut gk = vec![T::zero(); kd.len()];
    let mut gb = vec![T::zero(); o];
    for bn in 0..n {
        for oc in 0..o {
            let g_plane = &g[(bn * o + oc) * plane..(bn * o + oc + 1) * plane];
            let bsum: f64 = g_plane.iter().map(|v| v.as_f64()).sum();
            gb[oc] += T::from_f64(bsum);
            for ic in 0..c {
                let in_off = (bn * c + ic) * plane;
                for ky in 0..kh {
                    let dy = ky as isize - ph;
                    let (y0, y1) = valid_span(h, dy);
                    for kx in 0..kw {
                        let dx = kx as isize - pw;
                        let (x0, x1) = valid_span(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let kidx = ((oc * c + ic) * kh + ky) * kw + kx;
                        let wv = kd[kidx];
                        let mut acc = 0.0f64;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let grow = &g_plane[y * w + x0..y * w + x1];
                            let istart = in_off + iy * w + ix0;
                            let irow = &xd[istart..istart + (x1 - x0)];
                            let mut row_acc = T::zero();
                            for (gv, iv) in grow.iter().zip(irow) {
                                row_acc += *gv * *iv;
                            }
                            acc += row_acc.as_f64();
                            let girow = &mut gx[istart..istart + (x1 - x0)];
                            for (gi, gv) in girow.iter_mut().zip(grow) {
                                *gi += wv * *gv;
                            }
                        }
                        gk[kidx] += T::from_f64(acc);
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}
