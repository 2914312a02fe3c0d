//! Minimal reverse-mode differentiation over dense 4-D tensors.
//!
//! Covers exactly the operators the stability network and its losses need:
//! same-padded convolution, 2×2 max pooling, nearest upsampling, channel
//! concatenation, ReLU/sigmoid, BCE and a few reductions.

mod graph;
mod tensor;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use graph::{Activation, Graph, NodeId, BCE_CLAMP};
pub(crate) use graph::bilinear_taps;
pub use tensor::{Real, Shape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Shape, len: usize },
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("conv2d kernel {shape:?} must have odd spatial extents")]
    EvenKernel { shape: Shape },
    #[error("pool_down needs even height and width, got {shape:?}")]
    OddExtent { shape: Shape },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Shape },
    #[error("expected a single-channel map, got shape {shape:?}")]
    NotAMap { shape: Shape },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("bce target value {0} outside [0, 1]")]
    TargetRange(f64),
    #[error("channel range {start}..{end} outside 0..{channels}")]
    ChannelRange {
        start: usize,
        end: usize,
        channels: usize,
    },
    #[error("descriptor grid of length {len} (dim {dim}) does not cover weights {weights:?}")]
    DescriptorGrid { weights: Shape, len: usize, dim: usize },
    #[error("sample point ({x}, {y}) outside {w}x{h} map")]
    SampleOutOfBounds { x: f64, y: f64, h: usize, w: usize },
    #[error("weights sum to zero")]
    ZeroWeight,
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("finite-difference step {0} outside [1e-4, 1e-2]")]
    Step(f64),
    #[error("{0}")]
    Invalid(String),
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Ordered collection of parameters; the position of each parameter is its
/// index on a [`Graph`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.params.push(Parameter {
            name: name.into(),
            tensor,
            frozen: false,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Parameter<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn set_frozen(&mut self, i: usize, frozen: bool) {
        self.params[i].frozen = frozen;
    }

    /// Places every parameter on `graph` and returns the leaf ids in order.
    pub fn register(&self, graph: &mut Graph<T>) -> Vec<NodeId> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| graph.param(i, &p.tensor))
            .collect()
    }

    /// Copies gradients from the last `backward` on `graph` into each
    /// parameter's grad buffer, summing over repeated registrations.
    /// Parameters off the loss path get zeros.
    pub fn collect_grads(&mut self, graph: &Graph<T>) {
        let mut acc: Vec<Vec<T>> = self
            .params
            .iter()
            .map(|p| vec![T::zero(); p.tensor.len()])
            .collect();
        for (i, node) in graph.param_nodes() {
            if let (Some(a), Some(g)) = (acc.get_mut(i), graph.grad(node)) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += *y;
                }
            }
        }
        for (p, a) in self.params.iter_mut().zip(acc) {
            p.tensor.set_grad(a).expect("accumulator mirrors param shape");
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

/// Plain gradient descent: `p ← p − lr·g` for every unfrozen parameter that
/// has a gradient buffer.
pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, lr: f64) -> Result<(), AutodiffError> {
    if !(lr > 0.0) {
        return Err(AutodiffError::LearningRate(lr));
    }
    let lr = T::from_f64(lr);
    for p in params.iter_mut().filter(|p| !p.frozen) {
        let Some(g) = p.tensor.grad().map(<[T]>::to_vec) else {
            continue;
        };
        for (v, gv) in p.tensor.data_mut().iter_mut().zip(g) {
            *v -= lr * gv;
        }
    }
    Ok(())
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − central| / max(1, |central|)` over the sampled entries.
    pub max_rel_error: f64,
    pub samples: usize,
    /// Entries passed over because a ±eps probe changed the graph's
    /// [`Graph::branch_pattern`].
    pub straddled: usize,
}

/// Compares reverse-mode gradients with 64-bit central differences.
///
/// `build` records the loss on a fresh graph given the parameter set; it is
/// called once for the analytic pass and twice per probed entry. Frozen
/// parameters are never sampled. Entries of each parameter are visited in a
/// seeded random order until `per_param` of them have been compared. An
/// entry whose ±eps probes cross a ReLU, pooling or clamping boundary has no
/// meaningful central difference; it is counted in `straddled` and the next
/// entry is tried instead.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    eps: f64,
    per_param: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId, AutodiffError>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(AutodiffError::Step(eps));
    }
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let pattern = g.branch_pattern();
    g.backward(loss)?;
    let mut analytic = params.clone();
    analytic.collect_grads(&g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    let mut samples = 0;
    let mut straddled = 0;
    let eval = |ps: &ParamSet<f64>| -> Result<(f64, bool), AutodiffError> {
        let mut g = Graph::new();
        let l = build(&mut g, ps)?;
        Ok((g.value(l).item()?, g.branch_pattern() == pattern))
    };
    for (pi, p) in params.iter().enumerate() {
        if p.frozen || p.tensor.is_empty() {
            continue;
        }
        let n = p.tensor.len();
        let mut taken = 0;
        for idx in sample(&mut rng, n, n).iter() {
            if taken == per_param {
                break;
            }
            let orig = p.tensor.data()[idx];
            probe.get_mut(pi).tensor.data_mut()[idx] = orig + eps;
            let (up, up_same) = eval(&probe)?;
            probe.get_mut(pi).tensor.data_mut()[idx] = orig - eps;
            let (down, down_same) = eval(&probe)?;
            probe.get_mut(pi).tensor.data_mut()[idx] = orig;
            if !(up_same && down_same) {
                straddled += 1;
                continue;
            }
            let central = (up - down) / (2.0 * eps);
            let exact = analytic.get(pi).tensor.grad().map_or(0.0, |gr| gr[idx]);
            let rel = (exact - central).abs() / central.abs().max(1.0);
            max_rel = max_rel.max(rel);
            samples += 1;
            taken += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        samples,
        straddled,
    })
}
