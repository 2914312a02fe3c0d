//! Two-view epipolar geometry: fundamental matrix fitting, point-line
//! distances and weighted RANSAC.

mod ransac;

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

pub use ransac::{ransac_fundamental, RansacConfig, RansacOutcome, RansacResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("need at least {needed} points, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("all points coincide")]
    Coincident,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("point ({x}, {y}) maps to the line at infinity")]
    LineAtInfinity { x: f64, y: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("match {index} has invalid weight {weight:?}")]
    Weight { index: usize, weight: Option<f64> },
    #[error("weights sum to zero")]
    ZeroWeight,
    #[error("threshold must be positive, got {0}")]
    Threshold(f64),
}

/// A point in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormPoint {
    pub x: f64,
    pub y: f64,
}

impl NormPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn homogeneous(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 1.0)
    }

    /// Maps pixel coordinates into `[-1, 1]` along both axes.
    pub fn from_pixel(x: f64, y: f64, width: usize, height: usize) -> Self {
        Self {
            x: 2.0 * x / (width.max(2) - 1) as f64 - 1.0,
            y: 2.0 * y / (height.max(2) - 1) as f64 - 1.0,
        }
    }

    /// Inverse of [`NormPoint::from_pixel`].
    pub fn to_pixel(self, width: usize, height: usize) -> (f64, f64) {
        (
            (self.x + 1.0) * (width.max(2) - 1) as f64 / 2.0,
            (self.y + 1.0) * (height.max(2) - 1) as f64 / 2.0,
        )
    }
}

/// A putative correspondence between two views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub p1: NormPoint,
    pub p2: NormPoint,
    pub weight: Option<f64>,
}

impl Match {
    pub fn new(p1: NormPoint, p2: NormPoint) -> Self {
        Self {
            p1,
            p2,
            weight: None,
        }
    }

    pub fn weighted(p1: NormPoint, p2: NormPoint, weight: f64) -> Self {
        Self {
            p1,
            p2,
            weight: Some(weight),
        }
    }

    /// The same correspondence seen from the second image.
    pub fn swapped(self) -> Self {
        Self {
            p1: self.p2,
            p2: self.p1,
            weight: self.weight,
        }
    }
}

/// A fundamental matrix mapping points of image 1 to epipolar lines in
/// image 2, stored at unit Frobenius norm. The sign makes the first entry in
/// row-major order whose magnitude is within 1e-9 of the largest positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Canonicalizes `m`; rank is not altered.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("fundamental matrix"));
        }
        let norm = m.norm();
        if norm == 0.0 {
            return Err(GeometryError::RankDeficient);
        }
        let mut m = m / norm;
        let top = m.amax();
        let peak = (0..9)
            .map(|i| m[(i / 3, i % 3)])
            .find(|v| v.abs() >= top - 1e-9)
            .unwrap_or(0.0);
        if peak < 0.0 {
            m = -m;
        }
        Ok(Self(m))
    }

    /// Wraps `m` without rescaling.
    pub fn raw(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `p2ᵀ F p1`.
    pub fn residual(&self, p1: NormPoint, p2: NormPoint) -> f64 {
        p2.homogeneous().dot(&(self.0 * p1.homogeneous()))
    }
}

/// Fundamental matrix of a calibrated pair with `x2 = r·x1 + t` in camera
/// coordinates and intrinsics `k1`, `k2` mapping rays to image points.
pub fn fundamental_from_pose(
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Result<FundamentalMatrix, GeometryError> {
    let k1i = k1.try_inverse().ok_or(GeometryError::RankDeficient)?;
    let k2i = k2.try_inverse().ok_or(GeometryError::RankDeficient)?;
    let e = t.cross_matrix() * r;
    FundamentalMatrix::new(k2i.transpose() * e * k1i)
}

/// Translates the centroid to the origin and scales to mean radius √2.
/// Returns the transformed points and the similarity that produced them.
pub fn hartley_normalize(
    points: &[NormPoint],
) -> Result<(Vec<NormPoint>, Matrix3<f64>), GeometryError> {
    if points.len() < 2 {
        return Err(GeometryError::TooFew {
            needed: 2,
            got: points.len(),
        });
    }
    if !points.iter().all(|p| p.x.is_finite() && p.y.is_finite()) {
        return Err(GeometryError::NonFinite("points"));
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_r = points
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / n;
    let extent = points
        .iter()
        .map(|p| p.x.abs().max(p.y.abs()))
        .fold(1.0f64, f64::max);
    if mean_r <= 1e-12 * extent {
        return Err(GeometryError::Coincident);
    }
    let s = std::f64::consts::SQRT_2 / mean_r;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = points
        .iter()
        .map(|p| NormPoint::new(s * (p.x - cx), s * (p.y - cy)))
        .collect();
    Ok((out, t))
}

/// Normalized eight-point estimate with rank-2 enforcement.
pub fn eight_point(matches: &[Match]) -> Result<FundamentalMatrix, GeometryError> {
    if matches.len() < 8 {
        return Err(GeometryError::TooFew {
            needed: 8,
            got: matches.len(),
        });
    }
    let p1: Vec<_> = matches.iter().map(|m| m.p1).collect();
    let p2: Vec<_> = matches.iter().map(|m| m.p2).collect();
    let (q1, t1) = hartley_normalize(&p1)?;
    let (q2, t2) = hartley_normalize(&p2)?;

    // Zero rows keep the SVD square when exactly eight matches are given.
    let rows = matches.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (u, v)) in q1.iter().zip(&q2).enumerate() {
        let row = [
            v.x * u.x,
            v.x * u.y,
            v.x,
            v.y * u.x,
            v.y * u.y,
            v.y,
            u.x,
            u.y,
            1.0,
        ];
        for (j, val) in row.iter().enumerate() {
            a[(i, j)] = *val;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::RankDeficient)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let sv = &svd.singular_values;
    let largest = sv[order[order.len() - 1]];
    if !(largest > 0.0) || sv[order[1]] <= largest * 1e-12 {
        return Err(GeometryError::RankDeficient);
    }
    let f = v_t.row(order[0]);
    let fn_ = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);

    let inner = fn_.svd(true, true);
    let (u, v_t) = match (inner.u, inner.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::RankDeficient),
    };
    let mut s = inner.singular_values;
    let smallest = s.imin();
    s[smallest] = 0.0;
    let rank2 = u * Matrix3::from_diagonal(&s) * v_t;
    FundamentalMatrix::new(t2.transpose() * rank2 * t1)
}

/// Distance from `ub` to the epipolar line `F·ua`.
pub fn epipolar_distance(
    f: &FundamentalMatrix,
    ua: NormPoint,
    ub: NormPoint,
) -> Result<f64, GeometryError> {
    let l = f.matrix() * ua.homogeneous();
    let denom = l[0].hypot(l[1]);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(GeometryError::LineAtInfinity { x: ua.x, y: ua.y });
    }
    Ok(l.dot(&ub.homogeneous()).abs() / denom)
}

/// Mean of the forward (`F`) and backward (`Fᵀ`) distances of one match.
pub fn symmetric_distance(f: &FundamentalMatrix, m: &Match) -> Result<f64, GeometryError> {
    let fwd = epipolar_distance(f, m.p1, m.p2)?;
    let bwd = epipolar_distance(&f.transpose(), m.p2, m.p1)?;
    Ok(0.5 * (fwd + bwd))
}

/// Mean symmetric epipolar distance over `matches`.
pub fn reprojection_error(f: &FundamentalMatrix, matches: &[Match]) -> Result<f64, GeometryError> {
    if matches.is_empty() {
        return Err(GeometryError::TooFew { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for m in matches {
        total += symmetric_distance(f, m)?;
    }
    Ok(total / matches.len() as f64)
}

/// Weight-normalized mean of symmetric distances; every match must carry a
/// finite non-negative weight.
pub fn sparse_distance(matches: &[Match], f: &FundamentalMatrix) -> Result<f64, GeometryError> {
    if matches.is_empty() {
        return Err(GeometryError::TooFew { needed: 1, got: 0 });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (index, m) in matches.iter().enumerate() {
        let w = match m.weight {
            Some(w) if w.is_finite() && w >= 0.0 => w,
            weight => return Err(GeometryError::Weight { index, weight }),
        };
        if w > 0.0 {
            num += w * symmetric_distance(f, m)?;
        }
        den += w;
    }
    if !(den > 0.0) {
        return Err(GeometryError::ZeroWeight);
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests;
