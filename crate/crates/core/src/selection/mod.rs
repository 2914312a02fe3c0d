//! Local features and the three selection strategies: detector response,
//! semantic mask then response, and learned activation.

use thiserror::Error;

use crate::data::StabilityMap;
use crate::geometry::{Match, NormPoint};
use crate::network::{ActivationMap, NetworkError};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("feature set is empty")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{what} is {got_h}x{got_w}, image is {h}x{w}")]
    Coverage {
        what: &'static str,
        got_h: usize,
        got_w: usize,
        h: usize,
        w: usize,
    },
    #[error("keypoint {index} at ({x}, {y}) outside {w}x{h} image")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        w: usize,
        h: usize,
    },
    #[error("{keypoints} keypoints but {descriptors} descriptors")]
    Misaligned { keypoints: usize, descriptors: usize },
    #[error("descriptor data length {len} does not fit {rows} rows")]
    DescriptorLength { len: usize, rows: usize },
    #[error("keypoint {index} has invalid response {response}")]
    Response { index: usize, response: f64 },
    #[error("match {index}: {source}")]
    Sample { index: usize, source: NetworkError },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescriptorKind {
    Float,
    Binary,
}

/// Row-aligned descriptor matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum Descriptors {
    Float { dim: usize, data: Vec<f32> },
    /// `bits` per row, packed most significant bit first into
    /// `bits.div_ceil(8)` bytes.
    Binary { bits: usize, data: Vec<u8> },
}

impl Descriptors {
    pub fn kind(&self) -> DescriptorKind {
        match self {
            Self::Float { .. } => DescriptorKind::Float,
            Self::Binary { .. } => DescriptorKind::Binary,
        }
    }

    /// Float dimension or bit count.
    pub fn dim(&self) -> usize {
        match self {
            Self::Float { dim, .. } => *dim,
            Self::Binary { bits, .. } => *bits,
        }
    }

    fn row_len(&self) -> usize {
        match self {
            Self::Float { dim, .. } => *dim,
            Self::Binary { bits, .. } => bits.div_ceil(8),
        }
    }

    pub fn len(&self) -> usize {
        let stride = self.row_len();
        let total = match self {
            Self::Float { data, .. } => data.len(),
            Self::Binary { data, .. } => data.len(),
        };
        if stride == 0 {
            0
        } else {
            total / stride
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, rows: usize) -> Result<(), SelectionError> {
        let len = match self {
            Self::Float { data, .. } => data.len(),
            Self::Binary { data, .. } => data.len(),
        };
        let stride = self.row_len();
        if stride == 0 || len % stride != 0 {
            return Err(SelectionError::DescriptorLength { len, rows });
        }
        if len / stride != rows {
            return Err(SelectionError::Misaligned {
                keypoints: rows,
                descriptors: len / stride,
            });
        }
        Ok(())
    }

    pub fn float_row(&self, i: usize) -> Option<&[f32]> {
        match self {
            Self::Float { dim, data } => Some(&data[i * dim..(i + 1) * dim]),
            Self::Binary { .. } => None,
        }
    }

    pub fn binary_row(&self, i: usize) -> Option<&[u8]> {
        match self {
            Self::Binary { bits, data } => {
                let s = bits.div_ceil(8);
                Some(&data[i * s..(i + 1) * s])
            }
            Self::Float { .. } => None,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        match self {
            Self::Float { dim, data } => Self::Float {
                dim: *dim,
                data: rows
                    .iter()
                    .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
            },
            Self::Binary { bits, data } => {
                let s = bits.div_ceil(8);
                Self::Binary {
                    bits: *bits,
                    data: rows
                        .iter()
                        .flat_map(|&i| data[i * s..(i + 1) * s].iter().copied())
                        .collect(),
                }
            }
        }
    }

    pub fn empty_like(&self) -> Self {
        self.select(&[])
    }
}

/// Keypoints of one image with their descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    width: usize,
    height: usize,
    keypoints: Vec<Keypoint>,
    descriptors: Descriptors,
}

impl FeatureSet {
    pub fn new(
        width: usize,
        height: usize,
        keypoints: Vec<Keypoint>,
        descriptors: Descriptors,
    ) -> Result<Self, SelectionError> {
        descriptors.check(keypoints.len())?;
        for (index, k) in keypoints.iter().enumerate() {
            if !(k.x >= 0.0 && k.y >= 0.0 && k.x <= (width as f64 - 1.0) && k.y <= (height as f64 - 1.0)) {
                return Err(SelectionError::OutOfBounds {
                    index,
                    x: k.x,
                    y: k.y,
                    w: width,
                    h: height,
                });
            }
            if !(k.response.is_finite() && k.response >= 0.0) {
                return Err(SelectionError::Response {
                    index,
                    response: k.response,
                });
            }
        }
        Ok(Self {
            width,
            height,
            keypoints,
            descriptors,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn descriptors(&self) -> &Descriptors {
        &self.descriptors
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn normalized(&self, i: usize) -> NormPoint {
        let k = self.keypoints[i];
        NormPoint::from_pixel(k.x, k.y, self.width, self.height)
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            keypoints: indices.iter().map(|&i| self.keypoints[i]).collect(),
            descriptors: self.descriptors.select(indices),
        }
    }
}

/// A selected subset with the original row of each kept feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub features: FeatureSet,
    pub source_indices: Vec<usize>,
    /// Activation of each kept feature, for activation-based selection.
    pub weights: Option<Vec<f64>>,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }
}

/// Orders `candidates` by descending score with ties broken by
/// `(y, x, index)` ascending, and keeps the first `k`.
fn rank(fs: &FeatureSet, candidates: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (&fs.keypoints[a], &fs.keypoints[b]);
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| ka.y.total_cmp(&kb.y))
            .then_with(|| ka.x.total_cmp(&kb.x))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn finish(fs: &FeatureSet, order: Vec<usize>, weights: Option<Vec<f64>>) -> Selection {
    Selection {
        features: fs.subset(&order),
        source_indices: order,
        weights,
    }
}

pub fn select_topk_response(fs: &FeatureSet, k: usize) -> Result<Selection, SelectionError> {
    if fs.is_empty() {
        return Err(SelectionError::Empty);
    }
    if k == 0 {
        return Err(SelectionError::ZeroK);
    }
    let scores: Vec<f64> = fs.keypoints.iter().map(|kp| kp.response).collect();
    let all: Vec<usize> = (0..fs.len()).collect();
    Ok(finish(fs, rank(fs, &all, &scores, k), None))
}

fn check_cover(
    fs: &FeatureSet,
    what: &'static str,
    h: usize,
    w: usize,
) -> Result<(), SelectionError> {
    if (h, w) != (fs.height, fs.width) {
        return Err(SelectionError::Coverage {
            what,
            got_h: h,
            got_w: w,
            h: fs.height,
            w: fs.width,
        });
    }
    Ok(())
}

/// Drops features whose nearest mask cell is 0, then ranks by response.
/// An all-dynamic image yields an empty selection.
pub fn semantic_filter_select(
    fs: &FeatureSet,
    s: &StabilityMap,
    k: usize,
) -> Result<Selection, SelectionError> {
    if fs.is_empty() {
        return Err(SelectionError::Empty);
    }
    if k == 0 {
        return Err(SelectionError::ZeroK);
    }
    check_cover(fs, "stability map", s.height(), s.width())?;
    let keep: Vec<usize> = (0..fs.len())
        .filter(|&i| {
            let kp = fs.keypoints[i];
            let x = (kp.x.round() as usize).min(fs.width - 1);
            let y = (kp.y.round() as usize).min(fs.height - 1);
            s.get(y, x) == 1
        })
        .collect();
    let scores: Vec<f64> = fs.keypoints.iter().map(|kp| kp.response).collect();
    Ok(finish(fs, rank(fs, &keep, &scores, k), None))
}

/// Ranks by bilinearly sampled activation; kept features carry it as weight.
pub fn select_topk_activation(
    fs: &FeatureSet,
    a: &ActivationMap,
    k: usize,
) -> Result<Selection, SelectionError> {
    if fs.is_empty() {
        return Err(SelectionError::Empty);
    }
    if k == 0 {
        return Err(SelectionError::ZeroK);
    }
    check_cover(fs, "activation map", a.height(), a.width())?;
    let scores = fs
        .keypoints
        .iter()
        .enumerate()
        .map(|(index, kp)| {
            a.bilinear_sample(kp.x, kp.y)
                .map_err(|source| SelectionError::Sample { index, source })
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let all: Vec<usize> = (0..fs.len()).collect();
    let order = rank(fs, &all, &scores, k);
    let weights = order.iter().map(|&i| scores[i]).collect();
    Ok(finish(fs, order, Some(weights)))
}

/// Sets each match weight to the query activation at its `p1` keypoint.
pub fn attach_weights(matches: &[Match], a_query: &ActivationMap) -> Result<Vec<Match>, SelectionError> {
    matches
        .iter()
        .enumerate()
        .map(|(index, m)| {
            let (x, y) = m.p1.to_pixel(a_query.width(), a_query.height());
            let w = a_query
                .bilinear_sample(snap(x), snap(y))
                .map_err(|source| SelectionError::Sample { index, source })?;
            Ok(Match {
                weight: Some(w),
                ..*m
            })
        })
        .collect()
}

/// Removes round-off from a pixel coordinate recovered from normalized form.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}
