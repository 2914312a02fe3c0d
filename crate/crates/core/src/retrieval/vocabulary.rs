use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RetrievalError;
use crate::binio::{put_f64s, put_u16, put_u32, put_u64, Cursor, DecodeError};
use crate::selection::{DescriptorKind, Descriptors};

const MAGIC: &[u8; 4] = b"DSFV";
const VERSION: u16 = 1;
const MAX_ITERS: usize = 100;
const SHIFT_TOL: f64 = 1e-6;
/// Seed and image count after the idf table.
const TRAILER: usize = 12;
/// Magic, version, kind, word count and dimension.
pub const HEADER_LEN: usize = 15;

/// Word centroids with per-word inverse document frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub(crate) centroids: Descriptors,
    /// Float centroids kept in double precision.
    pub(crate) float_centroids: Vec<f64>,
    pub(crate) idf: Vec<f64>,
    pub(crate) seed: u64,
    pub(crate) n_images: usize,
}

impl Vocabulary {
    pub fn k(&self) -> usize {
        self.idf.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn kind(&self) -> DescriptorKind {
        self.centroids.kind()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn float_centroid(&self, w: usize) -> Option<&[f64]> {
        match self.centroids.kind() {
            DescriptorKind::Float => Some(&self.float_centroids[w * self.dim()..(w + 1) * self.dim()]),
            DescriptorKind::Binary => None,
        }
    }

    pub fn binary_centroid(&self, w: usize) -> Option<&[u8]> {
        self.centroids.binary_row(w)
    }

    /// Nearest word of row `i` of `d` (Euclidean or Hamming), lowest word
    /// id on ties.
    pub fn nearest(&self, d: &Descriptors, i: usize) -> usize {
        match d {
            Descriptors::Float { .. } => {
                let row = d.float_row(i).expect("float row");
                nearest_float(&self.float_centroids, self.dim(), row)
            }
            Descriptors::Binary { .. } => {
                let row = d.binary_row(i).expect("binary row");
                nearest_binary(&self.centroids, row)
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u16(&mut out, VERSION);
        out.push(match self.kind() {
            DescriptorKind::Float => 0,
            DescriptorKind::Binary => 1,
        });
        put_u32(&mut out, self.k() as u32);
        put_u32(&mut out, self.dim() as u32);
        match &self.centroids {
            Descriptors::Float { .. } => put_f64s(&mut out, &self.float_centroids),
            Descriptors::Binary { data, .. } => out.extend_from_slice(data),
        }
        put_f64s(&mut out, &self.idf);
        put_u64(&mut out, self.seed);
        put_u32(&mut out, self.n_images as u32);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut c = Cursor::new(buf);
        c.magic(MAGIC)?;
        let version = c.u16("version")?;
        if version != VERSION {
            return Err(DecodeError {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let kind = c.u8("kind")?;
        let k = c.u32("word count")? as usize;
        let dim = c.u32("dimension")? as usize;
        if k == 0 || dim == 0 {
            return Err(DecodeError {
                offset: 7,
                message: "zero word count or dimension".into(),
            });
        }
        let row = match kind {
            0 => dim.checked_mul(8),
            1 => Some(dim.div_ceil(8)),
            other => {
                return Err(DecodeError {
                    offset: 6,
                    message: format!("unknown descriptor kind {other}"),
                })
            }
        };
        let need = row
            .and_then(|r| r.checked_mul(k))
            .and_then(|n| n.checked_add(k.checked_mul(8)?))
            .and_then(|n| n.checked_add(TRAILER));
        if need != Some(c.remaining()) {
            return c.fail(format!(
                "{k} words of dim {dim} need {need:?} bytes, found {}",
                c.remaining()
            ));
        }
        let (centroids, float_centroids) = if kind == 0 {
            let fc = c.f64s(k * dim, "centroids")?;
            if fc.iter().any(|v| !v.is_finite()) {
                return c.fail("non-finite centroid");
            }
            (
                Descriptors::Float {
                    dim,
                    data: fc.iter().map(|v| *v as f32).collect(),
                },
                fc,
            )
        } else {
            let data = c.take(k * dim.div_ceil(8), "centroids")?.to_vec();
            (Descriptors::Binary { bits: dim, data }, Vec::new())
        };
        let idf_at = c.pos();
        let idf = c.f64s(k, "idf")?;
        if let Some(i) = idf.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DecodeError {
                offset: idf_at + 8 * i,
                message: format!("invalid idf {}", idf[i]),
            });
        }
        let seed = c.u64("seed")?;
        let n_images = c.u32("image count")? as usize;
        c.finish()?;
        Ok(Self {
            centroids,
            float_centroids,
            idf,
            seed,
            n_images,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        std::fs::write(path, self.encode()).map_err(|e| RetrievalError::Io(path.display().to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let bytes =
            std::fs::read(path).map_err(|e| RetrievalError::Io(path.display().to_string(), e.to_string()))?;
        Self::decode(&bytes).map_err(|e| RetrievalError::Format(path.display().to_string(), e))
    }
}

fn sq_dist(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - *y as f64).powi(2)).sum()
}

fn nearest_float(centroids: &[f64], dim: usize, row: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (w, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, row);
        if d < best.0 {
            best = (d, w);
        }
    }
    best.1
}

pub(crate) fn hamming(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn nearest_binary(centroids: &Descriptors, row: &[u8]) -> usize {
    let mut best = (u32::MAX, 0);
    for w in 0..centroids.len() {
        let d = hamming(centroids.binary_row(w).expect("binary"), row);
        if d < best.0 {
            best = (d, w);
        }
    }
    best.1
}

/// k-means++ seeding over `n` points with squared distance `dist(i, j)`.
fn plus_plus(n: usize, k: usize, rng: &mut ChaCha8Rng, dist: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| dist(i, chosen[0])).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(wi) => wi.sample(rng),
            // Every point already coincides with a centre.
            Err(_) => rng.random_range(0..n),
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist(i, next));
        }
    }
    chosen
}

/// Seeded k-means (k-majority for binary descriptors) over the rows of all
/// `images`, with idf computed per word over those images.
pub fn build_vocabulary(images: &[&Descriptors], k: usize, seed: u64) -> Result<Vocabulary, RetrievalError> {
    build_vocabulary_sampled(images, k, seed, usize::MAX)
}

/// As [`build_vocabulary`], clustering a seeded sample of at most
/// `max_rows` rows; idf still counts every row of every image.
pub fn build_vocabulary_sampled(
    images: &[&Descriptors],
    k: usize,
    seed: u64,
    max_rows: usize,
) -> Result<Vocabulary, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let Some(first) = images.first() else {
        return Err(RetrievalError::Insufficient { k, n: 0 });
    };
    let (kind, dim) = (first.kind(), first.dim());
    if let Some(bad) = images.iter().find(|d| d.kind() != kind || d.dim() != dim) {
        return Err(RetrievalError::DescriptorMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let total: usize = images.iter().map(|d| d.len()).sum();
    if total < k || max_rows < k {
        return Err(RetrievalError::Insufficient {
            k,
            n: total.min(max_rows),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(m, d)| (0..d.len()).map(move |i| (m, i)))
        .collect();
    let rows: Vec<(usize, usize)> = if total > max_rows {
        let mut pick = rand::seq::index::sample(&mut rng, total, max_rows).into_vec();
        pick.sort_unstable();
        pick.into_iter().map(|i| all[i]).collect()
    } else {
        all
    };
    let n = rows.len();

    let (centroids, float_centroids) = match kind {
        DescriptorKind::Float => {
            let pts: Vec<&[f32]> = rows
                .iter()
                .map(|&(m, i)| images[m].float_row(i).expect("float"))
                .collect();
            let to64 = |r: &[f32]| r.iter().map(|v| *v as f64).collect::<Vec<f64>>();
            let seeds = plus_plus(n, k, &mut rng, |i, j| {
                pts[i]
                    .iter()
                    .zip(pts[j])
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum()
            });
            let mut c: Vec<f64> = seeds.iter().flat_map(|&i| to64(pts[i])).collect();
            let mut assign = vec![0usize; n];
            for _ in 0..MAX_ITERS {
                for (i, p) in pts.iter().enumerate() {
                    assign[i] = nearest_float(&c, dim, p);
                }
                let mut sums = vec![0.0; k * dim];
                let mut counts = vec![0usize; k];
                for (i, p) in pts.iter().enumerate() {
                    counts[assign[i]] += 1;
                    for (s, v) in sums[assign[i] * dim..].iter_mut().zip(p.iter()) {
                        *s += *v as f64;
                    }
                }
                let mut shift = 0.0;
                let mut norm = 0.0;
                for w in 0..k {
                    if counts[w] == 0 {
                        continue;
                    }
                    for j in 0..dim {
                        let new = sums[w * dim + j] / counts[w] as f64;
                        shift += (new - c[w * dim + j]).powi(2);
                        norm += new * new;
                        c[w * dim + j] = new;
                    }
                }
                if shift.sqrt() <= SHIFT_TOL * norm.sqrt().max(f64::MIN_POSITIVE) {
                    break;
                }
            }
            (
                Descriptors::Float {
                    dim,
                    data: c.iter().map(|v| *v as f32).collect(),
                },
                c,
            )
        }
        DescriptorKind::Binary => {
            let pts: Vec<&[u8]> = rows
                .iter()
                .map(|&(m, i)| images[m].binary_row(i).expect("binary"))
                .collect();
            let stride = dim.div_ceil(8);
            let seeds = plus_plus(n, k, &mut rng, |i, j| (hamming(pts[i], pts[j]) as f64).powi(2));
            let mut c = Descriptors::Binary {
                bits: dim,
                data: seeds.iter().flat_map(|&i| pts[i].iter().copied()).collect(),
            };
            let mut assign = vec![0usize; n];
            for _ in 0..MAX_ITERS {
                for (i, p) in pts.iter().enumerate() {
                    assign[i] = nearest_binary(&c, p);
                }
                let mut ones = vec![0usize; k * dim];
                let mut counts = vec![0usize; k];
                for (i, p) in pts.iter().enumerate() {
                    counts[assign[i]] += 1;
                    for b in 0..dim {
                        if p[b / 8] & (0x80 >> (b % 8)) != 0 {
                            ones[assign[i] * dim + b] += 1;
                        }
                    }
                }
                let Descriptors::Binary { data, .. } = &mut c else {
                    unreachable!()
                };
                let before = data.clone();
                for w in 0..k {
                    if counts[w] == 0 {
                        continue;
                    }
                    let row = &mut data[w * stride..(w + 1) * stride];
                    row.fill(0);
                    for b in 0..dim {
                        if 2 * ones[w * dim + b] > counts[w] {
                            row[b / 8] |= 0x80 >> (b % 8);
                        }
                    }
                }
                if *data == before {
                    break;
                }
            }
            (c, Vec::new())
        }
    };

    let mut vocab = Vocabulary {
        centroids,
        float_centroids,
        idf: vec![0.0; k],
        seed,
        n_images: images.len(),
    };
    let mut doc_freq = vec![0usize; k];
    for d in images {
        let mut seen = vec![false; k];
        for i in 0..d.len() {
            seen[vocab.nearest(d, i)] = true;
        }
        for (f, s) in doc_freq.iter_mut().zip(seen) {
            *f += s as usize;
        }
    }
    let n_images = images.len() as f64;
    vocab.idf = doc_freq
        .iter()
        .map(|&f| (n_images / (1.0 + f as f64)).ln().max(0.0))
        .collect();
    Ok(vocab)
}
