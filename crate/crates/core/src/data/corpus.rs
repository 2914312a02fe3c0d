//! Seeded street-like image sequence with a revisited stretch, moving
//! objects and an imperfect segmenter.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Categories, DataError, LabelMap, LoopGroundTruth, RgbImage, StabilityMap};
use crate::losses::DenseGrid;
use crate::selection::{Descriptors, FeatureSet, Keypoint};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Frames `0..first_pass` each visit a new place.
    pub first_pass: usize,
    /// Frame `first_pass + i` revisits the place of `revisit_from + i`.
    pub revisit_from: usize,
    pub landmarks_per_place: usize,
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    /// Keypoint noise, std-dev in normalized coordinates.
    pub keypoint_noise: f64,
    pub n_prototypes: usize,
    pub max_objects: usize,
    /// Probability that the segmenter labels a moving object correctly.
    pub label_recall: f64,
    pub dense_dim: usize,
    /// Frames with `id % heldout_every == heldout_every - 1` are held out.
    pub heldout_every: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_frames: 200,
            height: 32,
            width: 48,
            first_pass: 130,
            revisit_from: 30,
            landmarks_per_place: 90,
            descriptor_dim: 32,
            descriptor_noise: 0.03,
            keypoint_noise: 2e-4,
            n_prototypes: 4,
            max_objects: 3,
            label_recall: 0.75,
            dense_dim: 4,
            heldout_every: 5,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(format!("corpus config: {m}")));
        if self.n_frames == 0 || self.first_pass > self.n_frames {
            return bad("first_pass must lie within n_frames");
        }
        if self.revisit_from + (self.n_frames - self.first_pass) > self.first_pass {
            return bad("revisited stretch runs past the first pass");
        }
        if self.height < 16 || self.width < 24 {
            return bad("images must be at least 24x16");
        }
        if self.descriptor_dim == 0 || self.dense_dim == 0 || self.n_prototypes == 0 {
            return bad("dimensions and prototype count must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_recall) {
            return bad("label_recall must be a probability");
        }
        if self.heldout_every == 0 {
            return bad("heldout_every must be positive");
        }
        Ok(())
    }
}

/// One moving object placed in a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectInstance {
    pub prototype: usize,
    pub x0: usize,
    pub y0: usize,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub place: usize,
    pub image: RgbImage,
    /// Segmenter output, with some moving objects missed.
    pub labels: LabelMap,
    /// True motion mask: 0 inside moving objects.
    pub motion: StabilityMap,
    pub features: FeatureSet,
    pub dense: DenseGrid,
    pub objects: Vec<ObjectInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub categories: Categories,
    pub frames: Vec<Frame>,
    pub loops: LoopGroundTruth,
}

impl Corpus {
    pub fn is_heldout(&self, id: usize) -> bool {
        id % self.config.heldout_every == self.config.heldout_every - 1
    }

    pub fn heldout_ids(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.is_heldout(i)).collect()
    }

    pub fn training_ids(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| !self.is_heldout(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Car,
    Person,
}

struct Prototype {
    kind: Kind,
    w: usize,
    h: usize,
    /// Feature offsets inside the box, pixels.
    offsets: Vec<(f64, f64)>,
    descriptors: Vec<Vec<f64>>,
    responses: Vec<f64>,
    dense: Vec<f64>,
}

struct Place {
    landmarks: Vec<Vector3<f64>>,
    descriptors: Vec<Vec<f64>>,
    responses: Vec<f64>,
    dense_freq: Vec<[f64; 3]>,
    shade: (f64, f64),
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

const CAR: u8 = 13;
const PERSON: u8 = 11;
const ROAD: u8 = 0;
const BUILDING: u8 = 2;

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let (wf, hf) = (w as f64, h as f64);
    let categories = Categories::street();

    let prototypes: Vec<Prototype> = (0..cfg.n_prototypes)
        .map(|i| {
            let kind = if i % 2 == 0 { Kind::Car } else { Kind::Person };
            let (bw, bh) = match kind {
                Kind::Car => (w / 4 + rng.random_range(0..3), h / 5 + rng.random_range(0..2)),
                Kind::Person => (w / 10 + rng.random_range(0..2), h / 3 + rng.random_range(0..2)),
            };
            let n = rng.random_range(14..=22);
            Prototype {
                kind,
                w: bw,
                h: bh,
                offsets: (0..n)
                    .map(|_| {
                        (
                            rng.random_range(0.5..(bw as f64 - 0.5)),
                            rng.random_range(0.5..(bh as f64 - 0.5)),
                        )
                    })
                    .collect(),
                descriptors: (0..n).map(|_| unit_vector(cfg.descriptor_dim, &mut rng)).collect(),
                responses: (0..n).map(|_| rng.random_range(0.5..1.0)).collect(),
                dense: (0..cfg.dense_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect();

    let places: Vec<Place> = (0..cfg.first_pass)
        .map(|_| {
            let n = cfg.landmarks_per_place;
            Place {
                landmarks: (0..n)
                    .map(|_| {
                        Vector3::new(
                            rng.random_range(-5.0..5.0),
                            rng.random_range(-3.5..3.5),
                            rng.random_range(6.0..16.0),
                        )
                    })
                    .collect(),
                descriptors: (0..n).map(|_| unit_vector(cfg.descriptor_dim, &mut rng)).collect(),
                responses: (0..n).map(|_| rng.random_range(0.05..0.7)).collect(),
                dense_freq: (0..cfg.dense_dim)
                    .map(|_| {
                        [
                            rng.random_range(0.05..0.3),
                            rng.random_range(0.05..0.3),
                            rng.random_range(0.0..std::f64::consts::TAU),
                        ]
                    })
                    .collect(),
                shade: (rng.random_range(100.0..150.0), rng.random_range(60.0..90.0)),
            }
        })
        .collect();

    let focal = 0.9 * wf;
    let pix = Matrix3::new(focal, 0.0, (wf - 1.0) / 2.0, 0.0, focal, (hf - 1.0) / 2.0, 0.0, 0.0, 1.0);
    let kp_sigma = cfg.keypoint_noise * (wf - 1.0) / 2.0;
    let kp_noise = Normal::new(0.0, kp_sigma.max(f64::MIN_POSITIVE)).expect("finite std-dev");
    let desc_noise = Normal::new(0.0, cfg.descriptor_noise.max(f64::MIN_POSITIVE)).expect("finite std-dev");
    let horizon = (0.45 * hf) as usize;

    let mut frames = Vec::with_capacity(cfg.n_frames);
    for id in 0..cfg.n_frames {
        let (place_id, revisit) = if id < cfg.first_pass {
            (id, false)
        } else {
            (cfg.revisit_from + id - cfg.first_pass, true)
        };
        let place = &places[place_id];

        let (r, t) = if revisit {
            let yaw = rng.random_range(0.02..0.05) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let tx = rng.random_range(0.2..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (
                *Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).matrix(),
                Vector3::new(tx, rng.random_range(-0.1..0.1), rng.random_range(-0.3..0.3)),
            )
        } else {
            (Matrix3::identity(), Vector3::zeros())
        };

        // Moving objects.
        let n_obj = rng.random_range(1..=cfg.max_objects.max(1));
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let p = rng.random_range(0..prototypes.len());
            let proto = &prototypes[p];
            let y_lo = (horizon / 2).min(h - proto.h);
            let x0 = rng.random_range(0..=w - proto.w);
            let y0 = rng.random_range(y_lo..=h - proto.h);
            objects.push(ObjectInstance {
                prototype: p,
                x0,
                y0,
                labeled: rng.random_bool(cfg.label_recall),
            });
        }
        let covered = |x: f64, y: f64| {
            objects.iter().any(|o| {
                let pr = &prototypes[o.prototype];
                x >= o.x0 as f64 - 0.5
                    && x <= (o.x0 + pr.w) as f64 - 0.5
                    && y >= o.y0 as f64 - 0.5
                    && y <= (o.y0 + pr.h) as f64 - 0.5
            })
        };

        // Background, labels and the true motion mask.
        let mut rgb = vec![0u8; h * w * 3];
        let mut ids = vec![0u8; h * w];
        let mut motion = StabilityMap::filled(h, w, true);
        for y in 0..h {
            for x in 0..w {
                let noise: f64 = rng.random_range(-12.0..12.0);
                let (base, cat) = if y < horizon {
                    let window = if (x / 3 + y / 3) % 4 == 0 { 25.0 } else { 0.0 };
                    (place.shade.0 + window, BUILDING)
                } else {
                    (place.shade.1, ROAD)
                };
                let v = (base + noise).clamp(0.0, 255.0) as u8;
                rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&[v, v, v.saturating_add(8)]);
                ids[y * w + x] = cat;
            }
        }
        for o in &objects {
            let pr = &prototypes[o.prototype];
            for y in o.y0..o.y0 + pr.h {
                for x in o.x0..o.x0 + pr.w {
                    let (lx, ly) = (x - o.x0, y - o.y0);
                    let px: [u8; 3] = match pr.kind {
                        Kind::Car if (ly / 2) % 2 == 0 => [220, 30, 30],
                        Kind::Car => [240, 240, 240],
                        Kind::Person if (lx / 2 + ly / 2) % 2 == 0 => [235, 210, 20],
                        Kind::Person => [20, 20, 20],
                    };
                    let jitter: i16 = rng.random_range(-10..=10);
                    for c in 0..3 {
                        rgb[(y * w + x) * 3 + c] = (px[c] as i16 + jitter).clamp(0, 255) as u8;
                    }
                    motion.set(y, x, false);
                    if o.labeled {
                        ids[y * w + x] = match pr.kind {
                            Kind::Car => CAR,
                            Kind::Person => PERSON,
                        };
                    }
                }
            }
        }

        // Features: visible static landmarks then object features.
        let mut kps = Vec::new();
        let mut desc: Vec<f32> = Vec::new();
        let push_desc = |desc: &mut Vec<f32>, d: &[f64], rng: &mut ChaCha8Rng| {
            desc.extend(d.iter().map(|v| (v + desc_noise.sample(rng)) as f32));
        };
        for (li, x) in place.landmarks.iter().enumerate() {
            let xc = r * x + t;
            if xc.z <= 1e-3 {
                continue;
            }
            let p = pix * (xc / xc.z);
            let (px, py) = (p.x + kp_noise.sample(&mut rng), p.y + kp_noise.sample(&mut rng));
            let resp = (place.responses[li] + rng.random_range(-0.02..0.02)).max(0.0);
            if !(px >= 0.0 && py >= 0.0 && px <= wf - 1.0 && py <= hf - 1.0) || covered(px, py) {
                continue;
            }
            kps.push(Keypoint {
                x: px,
                y: py,
                response: resp,
            });
            push_desc(&mut desc, &place.descriptors[li], &mut rng);
        }
        for o in &objects {
            let pr = &prototypes[o.prototype];
            for (fi, (ox, oy)) in pr.offsets.iter().enumerate() {
                let px = (o.x0 as f64 - 0.5 + ox + kp_noise.sample(&mut rng)).clamp(0.0, wf - 1.0);
                let py = (o.y0 as f64 - 0.5 + oy + kp_noise.sample(&mut rng)).clamp(0.0, hf - 1.0);
                kps.push(Keypoint {
                    x: px,
                    y: py,
                    response: (pr.responses[fi] + rng.random_range(-0.02..0.02)).max(0.0),
                });
                push_desc(&mut desc, &pr.descriptors[fi], &mut rng);
            }
        }
        let features = FeatureSet::new(
            w,
            h,
            kps,
            Descriptors::Float {
                dim: cfg.descriptor_dim,
                data: desc,
            },
        )
        .map_err(|e| DataError::Invalid(format!("frame {id}: {e}")))?;

        // Dense descriptors: the place's smooth field, shifted by the
        // camera offset, overwritten by object prototypes.
        let shift = t.x * focal / 10.0;
        let mut dense = Vec::with_capacity(h * w * cfg.dense_dim);
        for y in 0..h {
            for x in 0..w {
                let owner = objects.iter().rev().find(|o| {
                    let pr = &prototypes[o.prototype];
                    (o.x0..o.x0 + pr.w).contains(&x) && (o.y0..o.y0 + pr.h).contains(&y)
                });
                for (c, [fx, fy, ph]) in place.dense_freq.iter().enumerate() {
                    let v = match owner {
                        Some(o) => prototypes[o.prototype].dense[c],
                        None => ((x as f64 + shift) * fx + y as f64 * fy + ph).sin(),
                    };
                    let n: f64 = StandardNormal.sample(&mut rng);
                    dense.push((v + 0.05 * n) as f32);
                }
            }
        }
        let dense = DenseGrid::new(h, w, cfg.dense_dim, dense)
            .map_err(|e| DataError::Invalid(format!("frame {id}: {e}")))?;

        frames.push(Frame {
            id,
            place: place_id,
            image: RgbImage {
                height: h,
                width: w,
                data: rgb,
            },
            labels: LabelMap::new(h, w, ids, categories.clone())?,
            motion,
            features,
            dense,
            objects,
        });
    }

    let loops = LoopGroundTruth::new(
        (cfg.first_pass..cfg.n_frames)
            .map(|id| (cfg.revisit_from + id - cfg.first_pass, id))
            .collect(),
        cfg.n_frames,
    )?;
    Ok(Corpus {
        config: cfg.clone(),
        categories,
        frames,
        loops,
    })
}
