//! Place-recognition and trajectory metrics.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::data::StabilityMap;
use crate::network::ActivationMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no scores given")]
    NoScores,
    #[error("ground truth has no positives")]
    NoPositives,
    #[error("{true_loops} scored true loops exceed the {p_total} ground-truth loops")]
    PositiveCount { true_loops: usize, p_total: usize },
    #[error("score {0} is NaN")]
    NanScore(usize),
    #[error("need at least 2 curve points, got {0}")]
    TooFewPoints(usize),
    #[error("trajectories have {0} and {1} poses")]
    Length(usize, usize),
    #[error("trajectories need at least 2 poses")]
    TooShort,
    #[error("no frame pair spans {0} m of path")]
    StepTooLong(f64),
    #[error("step must be positive, got {0}")]
    Step(f64),
    #[error("ground-truth positions are degenerate")]
    Degenerate,
    #[error("rotation block is not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("maps are {0}x{1} and {2}x{3}")]
    Dimensions(usize, usize, usize, usize),
    #[error("stability truth has a single class")]
    SingleClass,
}

/// One operating point of a precision-recall sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Sweeps a detection threshold over `(score, is_true_loop)` pairs, where
/// lower scores are more confident and infinite scores are never
/// detected. The number of loop events is the count of true labels.
pub fn pr_curve(scores: &[(f64, bool)]) -> Result<Vec<PrPoint>, EvalError> {
    let p_total = scores.iter().filter(|s| s.1).count();
    pr_curve_with_total(scores, p_total)
}

/// As [`pr_curve`], with recall measured against `p_total` loop events
/// (some of which may have produced no scored candidate).
pub fn pr_curve_with_total(scores: &[(f64, bool)], p_total: usize) -> Result<Vec<PrPoint>, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::NoScores);
    }
    if let Some(i) = scores.iter().position(|s| s.0.is_nan()) {
        return Err(EvalError::NanScore(i));
    }
    let true_loops = scores.iter().filter(|s| s.1).count();
    if p_total == 0 {
        return Err(EvalError::NoPositives);
    }
    if true_loops > p_total {
        return Err(EvalError::PositiveCount { true_loops, p_total });
    }
    let mut sorted: Vec<(f64, bool)> = scores.iter().copied().filter(|s| s.0.is_finite()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.is_empty() {
        return Ok(vec![PrPoint {
            threshold: f64::INFINITY,
            precision: 1.0,
            recall: 0.0,
        }]);
    }
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(PrPoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / p_total as f64,
        });
    }
    Ok(out)
}

/// Trapezoidal area under precision over recall, starting from recall 0
/// at the precision of the lowest-recall point.
pub fn auc(points: &[PrPoint]) -> Result<f64, EvalError> {
    if points.len() < 2 {
        return Err(EvalError::TooFewPoints(points.len()));
    }
    Ok(area(points))
}

/// Like [`auc`] but also defined for a single point.
pub fn curve_area(points: &[PrPoint]) -> f64 {
    if points.is_empty() {
        0.0
    } else {
        area(points)
    }
}

fn area(points: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut prev = (0.0, pts[0].1);
    let mut sum = 0.0;
    for p in pts {
        sum += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
        prev = p;
    }
    sum
}

/// Rigid pose: rotation block and translation, camera to world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, EvalError> {
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(dev <= 1e-6) || !translation.iter().all(|v| v.is_finite()) {
            return Err(EvalError::NotOrthonormal(dev));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// `g · self`, applying a global rigid transform.
    pub fn premultiply(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        Self {
            rotation: r * self.rotation,
            translation: r * self.translation + t,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        Self { poses }
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Cumulative path length at each pose.
    pub fn distances(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.poses.len());
        let mut acc = 0.0;
        for (i, p) in self.poses.iter().enumerate() {
            if i > 0 {
                acc += (p.translation - self.poses[i - 1].translation).norm();
            }
            out.push(acc);
        }
        out
    }
}

fn check_pair(est: &Trajectory, gt: &Trajectory) -> Result<(), EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::Length(est.len(), gt.len()));
    }
    if gt.len() < 2 {
        return Err(EvalError::TooShort);
    }
    Ok(())
}

/// Angle of a rotation matrix. Same value as `acos((tr − 1)/2)` but
/// without its loss of precision near zero.
fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    axis.norm().atan2(r.trace() - 1.0)
}

/// Mean relative-rotation error per metre, in degrees, over frame pairs
/// `(i, j)` where `j` is the first frame at least `step_m` of ground-truth
/// path beyond `i`.
pub fn rotation_error(est: &Trajectory, gt: &Trajectory, step_m: f64) -> Result<f64, EvalError> {
    check_pair(est, gt)?;
    if !(step_m > 0.0 && step_m.is_finite()) {
        return Err(EvalError::Step(step_m));
    }
    let dist = gt.distances();
    // Absorbs round-off in the accumulated length.
    let tol = 1e-9 * step_m;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..gt.len() {
        let Some(j) = (i + 1..gt.len()).find(|&j| dist[j] - dist[i] >= step_m - tol) else {
            break;
        };
        let (ge, gg) = (&est.poses[i], &gt.poses[i]);
        let (je, jg) = (&est.poses[j], &gt.poses[j]);
        let rel_est = ge.rotation.transpose() * je.rotation;
        let rel_gt = gg.rotation.transpose() * jg.rotation;
        let angle = rotation_angle(&(rel_gt.transpose() * rel_est));
        sum += angle.to_degrees() / (dist[j] - dist[i]);
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::StepTooLong(step_m));
    }
    Ok(sum / count as f64)
}

/// Rigid `(r, t)` minimizing `Σ‖r·src_i + t − dst_i‖²`.
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    (r, cd - r * cs)
}

/// Standard deviation of the per-frame position offset after rigid
/// alignment, as a percentage of the ground-truth path length.
pub fn offset_deviation(est: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    check_pair(est, gt)?;
    let length = *gt.distances().last().expect("nonempty");
    if !(length > 0.0) {
        return Err(EvalError::Degenerate);
    }
    let src: Vec<Vector3<f64>> = est.poses.iter().map(|p| p.translation).collect();
    let dst: Vec<Vector3<f64>> = gt.poses.iter().map(|p| p.translation).collect();
    let (r, t) = align_rigid(&src, &dst);
    let offsets: Vec<Vector3<f64>> = src.iter().zip(&dst).map(|(s, d)| r * s + t - d).collect();
    let n = offsets.len() as f64;
    let mean = offsets.iter().sum::<Vector3<f64>>() / n;
    let var = offsets.iter().map(|o| (o - mean).norm_squared()).sum::<f64>() / n;
    Ok(var.sqrt() / length * 100.0)
}

/// ROC-AUC of `a` as a score for the static class of `truth`, with tied
/// scores counted as half.
pub fn activation_quality(a: &ActivationMap, truth: &StabilityMap) -> Result<f64, EvalError> {
    if (a.height(), a.width()) != (truth.height(), truth.width()) {
        return Err(EvalError::Dimensions(a.height(), a.width(), truth.height(), truth.width()));
    }
    let mut cells: Vec<(f32, bool)> = a
        .values()
        .iter()
        .zip(truth.values())
        .map(|(v, s)| (*v, *s == 1))
        .collect();
    let n_pos = cells.iter().filter(|c| c.1).count();
    let n_neg = cells.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    cells.sort_by(|x, y| x.0.total_cmp(&y.0));
    // Sum of midranks of the positive cells.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < cells.len() {
        let mut j = i;
        while j < cells.len() && cells[j].0 == cells[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * cells[i..j].iter().filter(|c| c.1).count() as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}
