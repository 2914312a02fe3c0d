//! Training objective: semantic BCE, dense and sparse image distances, the
//! triplet hinge and the scheduled hybrid of the two.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Real, Tensor};
use crate::data::StabilityMap;
use crate::geometry::{symmetric_distance, FundamentalMatrix, GeometryError, Match};
use crate::network::ActivationMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{what}: {left:?} vs {right:?}")]
    Dimensions {
        what: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("descriptor dimension {0} vs {1}")]
    DescriptorDim(usize, usize),
    #[error("{mode} mode needs {what}")]
    MissingPayload {
        mode: &'static str,
        what: &'static str,
    },
    #[error("margin must be finite and >= 0, got {0}")]
    Margin(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Dense descriptor field: `dim` values per pixel, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl DenseGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self, LossError> {
        if data.len() != height * width * dim {
            return Err(LossError::DescriptorDim(data.len(), height * width * dim));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Which image distance drives the matching term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMode {
    Dense,
    Sparse,
}

impl std::str::FromStr for DistanceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense" => Ok(Self::Dense),
            "sparse" => Ok(Self::Sparse),
            other => Err(format!("unknown distance mode {other:?} (dense|sparse)")),
        }
    }
}

impl std::fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Sparse => "sparse",
        })
    }
}

/// Which weight decays by 0.9 per epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SchedulePolicy {
    /// Semantic weight starts at 1 and decays; matching takes over.
    #[default]
    DecaySemantic,
    /// Matching weight starts at 1 and decays.
    DecayMatching,
    /// Matching term disabled.
    SemanticOnly,
}

impl std::str::FromStr for SchedulePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "decay_semantic" => Ok(Self::DecaySemantic),
            "decay_matching" => Ok(Self::DecayMatching),
            "semantic_only" => Ok(Self::SemanticOnly),
            other => Err(format!(
                "unknown schedule {other:?} (decay_semantic|decay_matching|semantic_only)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub epoch: usize,
    pub w_sem: f64,
    pub w_mat: f64,
}

/// `0.9` multiplied in once per elapsed epoch.
pub fn decay_factor(epoch: usize) -> f64 {
    let mut f = 1.0f64;
    for _ in 0..epoch {
        f *= 0.9;
    }
    f
}

/// Default schedule: `w_sem = 0.9^epoch`, `w_mat = 1 − w_sem`.
pub fn alpha_schedule(epoch: usize) -> LossWeights {
    schedule(epoch, SchedulePolicy::DecaySemantic)
}

pub fn schedule(epoch: usize, policy: SchedulePolicy) -> LossWeights {
    let d = decay_factor(epoch);
    let (w_sem, w_mat) = match policy {
        SchedulePolicy::DecaySemantic => (d, 1.0 - d),
        SchedulePolicy::DecayMatching => (1.0 - d, d),
        SchedulePolicy::SemanticOnly => (1.0, 0.0),
    };
    LossWeights {
        epoch,
        w_sem,
        w_mat,
    }
}

pub fn triplet_loss(d_qp: f64, d_qn: f64, m: f64) -> f64 {
    (d_qp - d_qn + m).max(0.0)
}

pub fn hybrid_loss(sem: f64, mat: f64, w: LossWeights) -> f64 {
    w.w_sem * sem + w.w_mat * mat
}

fn map_dims<T: Real>(g: &Graph<T>, a: NodeId) -> (usize, usize) {
    let [_, _, h, w] = g.value(a).shape();
    (h, w)
}

/// Mean BCE between the activation node (`[1, 1, H, W]`) and `s`.
pub fn semantic_term<T: Real>(
    g: &mut Graph<T>,
    a: NodeId,
    s: &StabilityMap,
) -> Result<NodeId, LossError> {
    let dims = map_dims(g, a);
    if dims != (s.height(), s.width()) {
        return Err(LossError::Dimensions {
            what: "activation vs stability map",
            left: dims,
            right: (s.height(), s.width()),
        });
    }
    Ok(g.bce_mean(a, &s.to_tensor())?)
}

pub fn semantic_loss(a: &ActivationMap, s: &StabilityMap) -> Result<f64, LossError> {
    let mut g = Graph::<f64>::new();
    let an = g.input(a.to_tensor());
    let l = semantic_term(&mut g, an, s)?;
    Ok(g.value(l).item()?)
}

fn check_grid<T: Real>(g: &Graph<T>, a: NodeId, d: &DenseGrid) -> Result<(), LossError> {
    let dims = map_dims(g, a);
    if dims != (d.height, d.width) {
        return Err(LossError::Dimensions {
            what: "activation vs descriptor grid",
            left: dims,
            right: (d.height, d.width),
        });
    }
    Ok(())
}

/// `‖Σ A¹d¹ − Σ A²d²‖ / (h·w)` recorded on `g`.
pub fn dense_distance_term<T: Real>(
    g: &mut Graph<T>,
    a1: NodeId,
    d1: &DenseGrid,
    a2: NodeId,
    d2: &DenseGrid,
) -> Result<NodeId, LossError> {
    check_grid(g, a1, d1)?;
    check_grid(g, a2, d2)?;
    if d1.dim != d2.dim {
        return Err(LossError::DescriptorDim(d1.dim, d2.dim));
    }
    let to_t = |d: &DenseGrid| d.data.iter().map(|v| T::from_f64(*v as f64)).collect();
    let s1 = g.weighted_sum(a1, to_t(d1), d1.dim)?;
    let s2 = g.weighted_sum(a2, to_t(d2), d2.dim)?;
    let diff = g.sub(s1, s2)?;
    let norm = g.l2_norm(diff)?;
    let cells = (d1.height * d1.width) as f64;
    Ok(g.scale(norm, T::from_f64(1.0 / cells))?)
}

pub fn dense_distance(
    a1: &ActivationMap,
    d1: &DenseGrid,
    a2: &ActivationMap,
    d2: &DenseGrid,
) -> Result<f64, LossError> {
    let mut g = Graph::<f64>::new();
    let n1 = g.input(a1.to_tensor());
    let n2 = g.input(a2.to_tensor());
    let d = dense_distance_term(&mut g, n1, d1, n2, d2)?;
    Ok(g.value(d).item()?)
}

/// Matches between the query and one other image, with the query-side
/// pixel positions where the activation is sampled and each match's
/// symmetric epipolar distance under a fixed model.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePair {
    pub points: Vec<(f64, f64)>,
    pub residuals: Vec<f64>,
}

impl SparsePair {
    /// Builds the pair from normalized matches (query side = `p1`). A pair
    /// without a model, or whose matches all fail, is unverified.
    pub fn new(
        matches: &[Match],
        model: Option<&FundamentalMatrix>,
        width: usize,
        height: usize,
    ) -> Self {
        let mut points = Vec::new();
        let mut residuals = Vec::new();
        if let Some(f) = model {
            let (wmax, hmax) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
            for m in matches {
                let Ok(re) = symmetric_distance(f, m) else {
                    continue;
                };
                let (x, y) = m.p1.to_pixel(width, height);
                points.push((x.clamp(0.0, wmax), y.clamp(0.0, hmax)));
                residuals.push(re);
            }
        }
        Self { points, residuals }
    }

    pub fn is_verified(&self) -> bool {
        !self.points.is_empty()
    }
}

/// Activation-weighted mean residual; `fallback` when unverified.
pub fn sparse_distance_term<T: Real>(
    g: &mut Graph<T>,
    a_query: NodeId,
    pair: &SparsePair,
    fallback: f64,
) -> Result<NodeId, LossError> {
    if !pair.is_verified() {
        return Ok(g.input(Tensor::scalar(T::from_f64(fallback))));
    }
    let w = g.sample_points(a_query, &pair.points)?;
    let res: Vec<T> = pair.residuals.iter().map(|r| T::from_f64(*r)).collect();
    Ok(g.weighted_mean(w, &res)?)
}

/// `max(d_qp − d_qn + m, 0)` on the graph.
pub fn triplet_term<T: Real>(
    g: &mut Graph<T>,
    d_qp: NodeId,
    d_qn: NodeId,
    m: f64,
) -> Result<NodeId, LossError> {
    if !(m.is_finite() && m >= 0.0) {
        return Err(LossError::Margin(m));
    }
    let diff = g.sub(d_qp, d_qn)?;
    let shifted = g.add_const(diff, T::from_f64(m))?;
    Ok(g.relu(shifted)?)
}

pub fn hybrid_term<T: Real>(
    g: &mut Graph<T>,
    sem: NodeId,
    mat: NodeId,
    w: LossWeights,
) -> Result<NodeId, LossError> {
    let a = g.scale(sem, T::from_f64(w.w_sem))?;
    let b = g.scale(mat, T::from_f64(w.w_mat))?;
    Ok(g.add(a, b)?)
}

/// Per-triplet inputs to the matching term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchingPayload {
    pub dense: Option<[DenseGrid; 3]>,
    pub sparse: Option<[SparsePair; 2]>,
}

/// Activation nodes for the three triplet images; positive and negative are
/// only needed in dense mode.
#[derive(Clone, Copy, Debug)]
pub struct TripletNodes {
    pub query: NodeId,
    pub positive: Option<NodeId>,
    pub negative: Option<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchingConfig {
    pub mode: DistanceMode,
    pub margin: f64,
    /// Sparse distance assigned to a pair without a verified model.
    pub unverified_distance: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            mode: DistanceMode::Sparse,
            margin: 0.5,
            unverified_distance: 0.0,
        }
    }
}

pub fn matching_term<T: Real>(
    g: &mut Graph<T>,
    nodes: TripletNodes,
    payload: &MatchingPayload,
    cfg: &MatchingConfig,
) -> Result<NodeId, LossError> {
    let (d_qp, d_qn) = match cfg.mode {
        DistanceMode::Dense => {
            let grids = payload.dense.as_ref().ok_or(LossError::MissingPayload {
                mode: "dense",
                what: "descriptor grids",
            })?;
            let missing = LossError::MissingPayload {
                mode: "dense",
                what: "positive and negative activations",
            };
            let p = nodes.positive.ok_or(missing.clone())?;
            let n = nodes.negative.ok_or(missing)?;
            (
                dense_distance_term(g, nodes.query, &grids[0], p, &grids[1])?,
                dense_distance_term(g, nodes.query, &grids[0], n, &grids[2])?,
            )
        }
        DistanceMode::Sparse => {
            let pairs = payload.sparse.as_ref().ok_or(LossError::MissingPayload {
                mode: "sparse",
                what: "matched pairs",
            })?;
            (
                sparse_distance_term(g, nodes.query, &pairs[0], cfg.unverified_distance)?,
                sparse_distance_term(g, nodes.query, &pairs[1], cfg.unverified_distance)?,
            )
        }
    };
    triplet_term(g, d_qp, d_qn, cfg.margin)
}

/// Matching loss evaluated on fixed activation maps.
pub fn matching_loss_for_triplet(
    maps: [&ActivationMap; 3],
    payload: &MatchingPayload,
    cfg: &MatchingConfig,
) -> Result<f64, LossError> {
    let mut g = Graph::<f64>::new();
    let q = g.input(maps[0].to_tensor());
    let p = g.input(maps[1].to_tensor());
    let n = g.input(maps[2].to_tensor());
    let nodes = TripletNodes {
        query: q,
        positive: Some(p),
        negative: Some(n),
    };
    let l = matching_term(&mut g, nodes, payload, cfg)?;
    Ok(g.value(l).item()?)
}
