use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use super::{DataError, StabilityMap};
use crate::geometry::{fundamental_from_pose, symmetric_distance, FundamentalMatrix, Match, NormPoint};
use crate::selection::{DescriptorKind, Descriptors, FeatureSet, Keypoint};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub n_static: usize,
    pub n_dynamic: usize,
    /// Keypoint noise, std-dev in pixels.
    pub noise: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub descriptor_kind: DescriptorKind,
    pub descriptor_dim: usize,
    /// Gaussian std-dev (float) or flip probability (binary).
    pub descriptor_noise: f64,
    /// Camera-2 centre offset, scene units.
    pub baseline: Vector3<f64>,
    /// Camera-2 yaw in radians.
    pub yaw: f64,
    /// Dynamic displacement as a fraction of the scene extent.
    pub displacement: f64,
    /// Minimum symmetric epipolar distance of a dynamic match.
    pub dynamic_margin: f64,
    /// Radius in pixels of the unstable neighborhood around dynamic points.
    pub mask_radius: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_static: 100,
            n_dynamic: 0,
            noise: 0.0,
            seed: 0,
            width: 64,
            height: 48,
            descriptor_kind: DescriptorKind::Float,
            descriptor_dim: 32,
            descriptor_noise: 0.01,
            baseline: Vector3::new(1.0, 0.0, 0.2),
            yaw: 0.05,
            displacement: 0.05,
            dynamic_margin: 1e-2,
            mask_radius: 2,
        }
    }
}

/// Two views of a random rigid scene plus independently moving points.
///
/// Row `i` of both feature sets images the same world point; rows
/// `0..n_static` are static and the rest dynamic.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Intrinsics mapping camera rays to normalized coordinates.
    pub k: Matrix3<f64>,
    /// Camera 2 pose: `x2 = r·x1 + t`.
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub static_points: Vec<Vector3<f64>>,
    /// World position of each dynamic point in each view.
    pub dynamic_points: Vec<[Vector3<f64>; 2]>,
    pub views: [FeatureSet; 2],
    pub matches: Vec<Match>,
    pub inliers: Vec<bool>,
    pub f: FundamentalMatrix,
    pub stability: [StabilityMap; 2],
}

const BOX_MIN: [f64; 3] = [-4.0, -3.0, 6.0];
const BOX_MAX: [f64; 3] = [4.0, 3.0, 14.0];
const MAX_TRIES: usize = 10_000;

struct DescriptorField {
    freqs: Vec<Vector3<f64>>,
    phases: Vec<f64>,
}

impl DescriptorField {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let freqs = (0..dim)
            .map(|_| {
                let d: [f64; 3] = UnitSphere.sample(rng);
                Vector3::from(d) * rng.random_range(0.5..2.0)
            })
            .collect();
        let phases = (0..dim)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Self { freqs, phases }
    }

    fn eval(&self, x: &Vector3<f64>) -> Vec<f64> {
        self.freqs
            .iter()
            .zip(&self.phases)
            .map(|(w, p)| (w.dot(x) + p).sin())
            .collect()
    }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene, DataError> {
    if cfg.n_static < 8 {
        return Err(DataError::Invalid(format!(
            "need at least 8 static points, got {}",
            cfg.n_static
        )));
    }
    if cfg.width < 2 || cfg.height < 2 || cfg.descriptor_dim == 0 {
        return Err(DataError::Invalid("image and descriptor sizes must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.descriptor_noise >= 0.0) {
        return Err(DataError::Invalid("noise levels must be non-negative".into()));
    }
    if cfg.baseline.norm() < 1e-9 {
        return Err(DataError::Invalid("degenerate pose pair: zero baseline".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let focal = 0.9 * w;
    let pix = Matrix3::new(focal, 0.0, (w - 1.0) / 2.0, 0.0, focal, (h - 1.0) / 2.0, 0.0, 0.0, 1.0);
    let norm = Matrix3::new(2.0 / (w - 1.0), 0.0, -1.0, 0.0, 2.0 / (h - 1.0), -1.0, 0.0, 0.0, 1.0);
    let k = norm * pix;

    // Camera 2 sits at `baseline` in the world frame, yawed about y.
    let r = *Rotation3::from_axis_angle(&Vector3::y_axis(), cfg.yaw).matrix();
    let t = -r * cfg.baseline;
    let f = fundamental_from_pose(&k, &k, &r, &t)
        .map_err(|e| DataError::Invalid(format!("degenerate pose pair: {e}")))?;

    let project = |x: &Vector3<f64>| -> Option<(f64, f64)> {
        if x.z <= 1e-6 {
            return None;
        }
        let p = pix * (x / x.z);
        (p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0).then_some((p.x, p.y))
    };
    let in_both = |x: &Vector3<f64>| Some((project(x)?, project(&(r * x + t))?));

    let sample_box = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            rng.random_range(BOX_MIN[0]..BOX_MAX[0]),
            rng.random_range(BOX_MIN[1]..BOX_MAX[1]),
            rng.random_range(BOX_MIN[2]..BOX_MAX[2]),
        )
    };

    let mut static_points = Vec::with_capacity(cfg.n_static);
    let mut pixels = Vec::new();
    let mut tries = 0;
    while static_points.len() < cfg.n_static {
        tries += 1;
        if tries > MAX_TRIES * cfg.n_static.max(1) {
            return Err(DataError::Invalid("cannot place static points in both views".into()));
        }
        let x = sample_box(&mut rng);
        if let Some(px) = in_both(&x) {
            static_points.push(x);
            pixels.push(px);
        }
    }

    let extent = (Vector3::from(BOX_MAX) - Vector3::from(BOX_MIN)).norm();
    let mut dynamic_points = Vec::with_capacity(cfg.n_dynamic);
    tries = 0;
    while dynamic_points.len() < cfg.n_dynamic {
        tries += 1;
        if tries > MAX_TRIES * cfg.n_dynamic {
            return Err(DataError::Invalid(
                "cannot place dynamic points violating the epipolar margin".into(),
            ));
        }
        let base = sample_box(&mut rng);
        let mut moved = [base; 2];
        for m in moved.iter_mut() {
            let d: [f64; 3] = UnitSphere.sample(&mut rng);
            *m += Vector3::from(d) * (cfg.displacement * extent);
        }
        let (Some(a), Some(b)) = (project(&moved[0]), project(&(r * moved[1] + t))) else {
            continue;
        };
        let m = Match::new(
            NormPoint::from_pixel(a.0, a.1, cfg.width, cfg.height),
            NormPoint::from_pixel(b.0, b.1, cfg.width, cfg.height),
        );
        if symmetric_distance(&f, &m).is_ok_and(|d| d >= cfg.dynamic_margin) {
            dynamic_points.push(moved);
            pixels.push((a, b));
        }
    }

    let field = DescriptorField::new(cfg.descriptor_dim, &mut rng);
    let world: Vec<Vector3<f64>> = static_points
        .iter()
        .copied()
        .chain(dynamic_points.iter().map(|d| d[0]))
        .collect();
    let clean: Vec<Vec<f64>> = world.iter().map(|x| field.eval(x)).collect();
    let responses: Vec<f64> = world.iter().map(|_| rng.random_range(0.1..1.0)).collect();
    let kp_noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite std-dev");
    let desc_noise = Normal::new(0.0, cfg.descriptor_noise.max(f64::MIN_POSITIVE)).expect("finite std-dev");

    let mut views = Vec::with_capacity(2);
    let mut norm_pts: [Vec<NormPoint>; 2] = [Vec::new(), Vec::new()];
    for v in 0..2 {
        let mut kps = Vec::with_capacity(world.len());
        for (i, px) in pixels.iter().enumerate() {
            let (x, y) = if v == 0 { px.0 } else { px.1 };
            let (x, y) = if cfg.noise > 0.0 {
                (
                    (x + kp_noise.sample(&mut rng)).clamp(0.0, w - 1.0),
                    (y + kp_noise.sample(&mut rng)).clamp(0.0, h - 1.0),
                )
            } else {
                (x, y)
            };
            norm_pts[v].push(NormPoint::from_pixel(x, y, cfg.width, cfg.height));
            kps.push(Keypoint {
                x,
                y,
                response: responses[i],
            });
        }
        let descriptors = match cfg.descriptor_kind {
            DescriptorKind::Float => Descriptors::Float {
                dim: cfg.descriptor_dim,
                data: clean
                    .iter()
                    .flat_map(|d| d.iter().copied().collect::<Vec<_>>())
                    .map(|x| {
                        let n = if cfg.descriptor_noise > 0.0 {
                            desc_noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        (x + n) as f32
                    })
                    .collect(),
            },
            DescriptorKind::Binary => {
                let stride = cfg.descriptor_dim.div_ceil(8);
                let mut data = vec![0u8; stride * clean.len()];
                for (row, d) in clean.iter().enumerate() {
                    for (b, x) in d.iter().enumerate() {
                        let flip = cfg.descriptor_noise > 0.0 && rng.random_bool(cfg.descriptor_noise.min(1.0));
                        if (*x > 0.0) != flip {
                            data[row * stride + b / 8] |= 0x80 >> (b % 8);
                        }
                    }
                }
                Descriptors::Binary {
                    bits: cfg.descriptor_dim,
                    data,
                }
            }
        };
        views.push(
            FeatureSet::new(cfg.width, cfg.height, kps, descriptors)
                .map_err(|e| DataError::Invalid(e.to_string()))?,
        );
    }

    let matches: Vec<Match> = norm_pts[0]
        .iter()
        .zip(&norm_pts[1])
        .map(|(a, b)| Match::new(*a, *b))
        .collect();
    let inliers = (0..matches.len()).map(|i| i < cfg.n_static).collect();

    let stability = [0, 1].map(|v| {
        let mut s = StabilityMap::filled(cfg.height, cfg.width, true);
        for px in &pixels[cfg.n_static..] {
            let (x, y) = if v == 0 { px.0 } else { px.1 };
            let (cx, cy) = (x.round() as i64, y.round() as i64);
            let rad = cfg.mask_radius as i64;
            for yy in (cy - rad).max(0)..=(cy + rad).min(cfg.height as i64 - 1) {
                for xx in (cx - rad).max(0)..=(cx + rad).min(cfg.width as i64 - 1) {
                    s.set(yy as usize, xx as usize, false);
                }
            }
        }
        s
    });

    let mut views = views.into_iter();
    Ok(SyntheticScene {
        k,
        r,
        t,
        static_points,
        dynamic_points,
        views: [views.next().expect("two views"), views.next().expect("two views")],
        matches,
        inliers,
        f,
        stability,
    })
}
