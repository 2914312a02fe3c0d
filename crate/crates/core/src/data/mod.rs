//! Dataset preparation: label and stability maps, triplet mining, file
//! formats and the synthetic scene and corpus generators.

mod formats;
mod synth;
mod corpus;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Real, Tensor};
use crate::binio::DecodeError;

pub use corpus::{generate_corpus, Corpus, CorpusConfig, Frame};
pub use formats::*;
pub use synth::{generate_scene, SceneConfig, SyntheticScene};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Decode { path: PathBuf, source: DecodeError },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("{0}")]
    Invalid(String),
}

/// Category id to name table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Categories(BTreeMap<u8, String>);

pub const DEFAULT_STATIC: [&str; 8] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic_light",
    "traffic_sign",
];

pub const DEFAULT_DYNAMIC: [&str; 11] = [
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
    "sky",
    "vegetation",
    "terrain",
];

impl Categories {
    pub fn new(table: BTreeMap<u8, String>) -> Self {
        Self(table)
    }

    /// Nineteen street-scene classes, static ones first.
    pub fn street() -> Self {
        let names = [
            "road",
            "sidewalk",
            "building",
            "wall",
            "fence",
            "pole",
            "traffic_light",
            "traffic_sign",
            "vegetation",
            "terrain",
            "sky",
            "person",
            "rider",
            "car",
            "truck",
            "bus",
            "train",
            "motorcycle",
            "bicycle",
        ];
        Self(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u8, n.to_string()))
                .collect(),
        )
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.0.get(&id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u8> {
        self.0.iter().find(|(_, n)| n.as_str() == name).map(|(i, _)| *i)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &str)> {
        self.0.iter().map(|(i, n)| (*i, n.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-pixel semantic category ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
    categories: Categories,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        ids: Vec<u8>,
        categories: Categories,
    ) -> Result<Self, DataError> {
        if ids.len() != height * width {
            return Err(DataError::Invalid(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|i| categories.name(**i).is_none()) {
            return Err(DataError::Invalid(format!(
                "label id {bad} missing from the category table"
            )));
        }
        Ok(Self {
            height,
            width,
            ids,
            categories,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn categories(&self) -> &Categories {
        &self.categories
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }
}

/// Binary per-pixel stability, 1 = static.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StabilityMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl StabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self, DataError> {
        if values.len() != height * width {
            return Err(DataError::Invalid(format!(
                "stability map {height}x{width} needs {} cells, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| **v > 1) {
            return Err(DataError::Invalid(format!("stability value {bad} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            values: vec![value as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.values[y * self.width + x] = v as u8;
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_grid(
            self.height,
            self.width,
            self.values.iter().map(|v| T::from_f64(*v as f64)).collect(),
        )
        .expect("map extents")
    }
}

/// Marks cells whose category is in `static_categories` as 1.
pub fn stability_from_labels<S: AsRef<str>>(
    lm: &LabelMap,
    static_categories: &[S],
) -> Result<StabilityMap, DataError> {
    let mut ids = BTreeSet::new();
    for name in static_categories {
        let name = name.as_ref();
        ids.insert(
            lm.categories
                .id(name)
                .ok_or_else(|| DataError::UnknownCategory(name.to_string()))?,
        );
    }
    Ok(StabilityMap {
        height: lm.height,
        width: lm.width,
        values: lm.ids.iter().map(|i| ids.contains(i) as u8).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripletRecord {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
}

/// True loop pairs over a sequence of `len` frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoopGroundTruth {
    pairs: Vec<(usize, usize)>,
    len: usize,
}

impl LoopGroundTruth {
    pub fn new(pairs: Vec<(usize, usize)>, len: usize) -> Result<Self, DataError> {
        for &(a, b) in &pairs {
            if a == b {
                return Err(DataError::Invalid(format!("loop pair ({a}, {b}) is reflexive")));
            }
            if a >= len || b >= len {
                return Err(DataError::Invalid(format!(
                    "loop pair ({a}, {b}) outside sequence of {len}"
                )));
            }
        }
        Ok(Self { pairs, len })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_loop(&self, a: usize, b: usize) -> bool {
        self.pairs
            .iter()
            .any(|&(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    pub fn partners(&self, id: usize) -> BTreeSet<usize> {
        self.pairs
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// The same loops listed in both orientations.
    pub fn symmetric(&self) -> Self {
        let mut pairs = self.pairs.clone();
        pairs.extend(self.pairs.iter().map(|&(a, b)| (b, a)));
        Self {
            pairs,
            len: self.len,
        }
    }

    pub fn restricted(&self, keep: impl Fn(usize) -> bool) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .copied()
                .filter(|&(a, b)| keep(a) && keep(b))
                .collect(),
            len: self.len,
        }
    }
}

/// Triplets and the number of pairs skipped for lack of a negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedTriplets {
    pub triplets: Vec<TripletRecord>,
    pub skipped: usize,
}

/// One triplet per loop pair `(query, positive)` per negative, negatives
/// drawn from the whole sequence.
pub fn mine_triplets(
    gt: &LoopGroundTruth,
    negatives_per_query: usize,
    gap: usize,
    seed: u64,
) -> Result<MinedTriplets, DataError> {
    let all: Vec<usize> = (0..gt.len).collect();
    mine_triplets_from(gt, &all, negatives_per_query, gap, seed)
}

/// As [`mine_triplets`], drawing negatives only from `pool`.
pub fn mine_triplets_from(
    gt: &LoopGroundTruth,
    pool: &[usize],
    negatives_per_query: usize,
    gap: usize,
    seed: u64,
) -> Result<MinedTriplets, DataError> {
    if gt.is_empty() {
        return Err(DataError::Invalid("no loop pairs to mine".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    let mut skipped = 0;
    if negatives_per_query == 0 {
        return Ok(MinedTriplets { triplets, skipped });
    }
    for &(q, p) in &gt.pairs {
        let partners = gt.partners(q);
        let eligible: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&c| {
                c != q
                    && c != p
                    && !partners.contains(&c)
                    && c.abs_diff(q) >= gap
                    && c.abs_diff(p) >= gap
            })
            .collect();
        if eligible.is_empty() {
            skipped += 1;
            continue;
        }
        let k = negatives_per_query.min(eligible.len());
        for i in sample(&mut rng, eligible.len(), k).iter() {
            triplets.push(TripletRecord {
                query: q,
                positive: p,
                negative: eligible[i],
            });
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} loop pairs had no eligible negative");
    }
    Ok(MinedTriplets { triplets, skipped })
}
