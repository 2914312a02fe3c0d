//! Bag-of-words place recognition with epipolar verification.

mod vocabulary;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub use vocabulary::{build_vocabulary, build_vocabulary_sampled, Vocabulary, HEADER_LEN as VOCAB_HEADER_LEN};

use crate::binio::DecodeError;
use crate::data::LoopGroundTruth;
use crate::geometry::{ransac_fundamental, reprojection_error, Match, RansacConfig, RansacOutcome};
use crate::network::ActivationMap;
use crate::selection::{attach_weights, Descriptors, FeatureSet, SelectionError};
use vocabulary::hamming;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("need at least {k} descriptors, got {n}")]
    Insufficient { k: usize, n: usize },
    #[error("descriptor dimension {found} does not match {expected}")]
    DescriptorMismatch { expected: usize, found: usize },
    #[error("descriptor kinds differ")]
    KindMismatch,
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("{0}: {1}")]
    Format(String, DecodeError),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

/// Sparse L1-normalized word histogram.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BowVector(BTreeMap<usize, f64>);

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, word: usize) -> f64 {
        self.0.get(&word).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0.iter().map(|(w, v)| (*w, *v))
    }
}

/// tf·idf histogram of the nearest words, L1-normalized. Words with zero
/// weight are dropped.
pub fn quantize(fs: &FeatureSet, vocab: &Vocabulary) -> Result<BowVector, RetrievalError> {
    let d = fs.descriptors();
    if d.kind() != vocab.kind() {
        return Err(RetrievalError::KindMismatch);
    }
    if d.dim() != vocab.dim() {
        return Err(RetrievalError::DescriptorMismatch {
            expected: vocab.dim(),
            found: d.dim(),
        });
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..fs.len() {
        *counts.entry(vocab.nearest(d, i)).or_default() += 1;
    }
    let n = fs.len() as f64;
    let mut weights: BTreeMap<usize, f64> = counts
        .into_iter()
        .map(|(w, c)| (w, c as f64 / n * vocab.idf()[w]))
        .filter(|(_, v)| *v > 0.0)
        .collect();
    let total: f64 = weights.values().sum();
    for v in weights.values_mut() {
        *v /= total;
    }
    Ok(BowVector(weights))
}

/// `1 − ½·Σ|a_w − b_w|`; 0 when either vector is empty.
pub fn bow_similarity(a: &BowVector, b: &BowVector) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut l1 = 0.0;
    for (w, va) in a.iter() {
        l1 += (va - b.get(w)).abs();
    }
    for (w, vb) in b.iter() {
        if !a.0.contains_key(&w) {
            l1 += vb;
        }
    }
    (1.0 - 0.5 * l1).clamp(0.0, 1.0)
}

/// Database of BoW vectors keyed by sequence position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BowIndex {
    entries: Vec<(usize, BowVector)>,
}

impl BowIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: usize, v: BowVector) {
        self.entries.push((id, v));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `top_n` most similar ids with `|id − query_id| > exclusion_gap`,
    /// by descending similarity then ascending id.
    pub fn query(&self, query_id: usize, qv: &BowVector, top_n: usize, exclusion_gap: usize) -> Vec<(usize, f64)> {
        let mut hits: Vec<(usize, f64)> = self
            .entries
            .iter()
            .filter(|(id, _)| id.abs_diff(query_id) > exclusion_gap)
            .map(|(id, v)| (*id, bow_similarity(qv, v)))
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(top_n);
        hits
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchConfig {
    /// Lowe ratio for float descriptors.
    pub ratio: f64,
    /// Required gap between best and second-best Hamming distance.
    pub hamming_margin: u32,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            hamming_margin: 16,
        }
    }
}

fn best_two<D: PartialOrd + Copy>(dists: impl Iterator<Item = D>) -> Option<(usize, D, Option<D>)> {
    let mut best: Option<(usize, D)> = None;
    let mut second: Option<D> = None;
    for (j, d) in dists.enumerate() {
        match best {
            None => best = Some((j, d)),
            Some((_, bd)) if d < bd => {
                second = Some(bd);
                best = Some((j, d));
            }
            Some(_) => {
                if second.is_none_or(|s| d < s) {
                    second = Some(d);
                }
            }
        }
    }
    best.map(|(j, d)| (j, d, second))
}

/// Index pairs `(i, j)` of mutual nearest neighbours passing the ratio or
/// margin test.
pub fn match_indices(a: &Descriptors, b: &Descriptors, cfg: &MatchConfig) -> Result<Vec<(usize, usize)>, RetrievalError> {
    if a.kind() != b.kind() {
        return Err(RetrievalError::KindMismatch);
    }
    if a.dim() != b.dim() {
        return Err(RetrievalError::DescriptorMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (na, nb) = (a.len(), b.len());
    if na == 0 || nb == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    match (a, b) {
        (Descriptors::Float { .. }, Descriptors::Float { .. }) => {
            let dist = |i: usize, j: usize| -> f64 {
                let (x, y) = (a.float_row(i).expect("row"), b.float_row(j).expect("row"));
                x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>()
            };
            let table: Vec<f64> = (0..na).flat_map(|i| (0..nb).map(move |j| (i, j))).map(|(i, j)| dist(i, j)).collect();
            let back: Vec<usize> = (0..nb)
                .map(|j| best_two((0..na).map(|i| table[i * nb + j])).expect("nonempty").0)
                .collect();
            for i in 0..na {
                let (j, d1, d2) = best_two(table[i * nb..(i + 1) * nb].iter().copied()).expect("nonempty");
                let ratio_ok = d2.is_none_or(|d2| d1.sqrt() < cfg.ratio * d2.sqrt());
                if ratio_ok && back[j] == i {
                    out.push((i, j));
                }
            }
        }
        _ => {
            let table: Vec<u32> = (0..na)
                .flat_map(|i| (0..nb).map(move |j| (i, j)))
                .map(|(i, j)| hamming(a.binary_row(i).expect("row"), b.binary_row(j).expect("row")))
                .collect();
            let back: Vec<usize> = (0..nb)
                .map(|j| best_two((0..na).map(|i| table[i * nb + j])).expect("nonempty").0)
                .collect();
            for i in 0..na {
                let (j, d1, d2) = best_two(table[i * nb..(i + 1) * nb].iter().copied()).expect("nonempty");
                let margin_ok = d2.is_none_or(|d2| d2 >= d1 + cfg.hamming_margin);
                if margin_ok && back[j] == i {
                    out.push((i, j));
                }
            }
        }
    }
    Ok(out)
}

/// Matches in normalized coordinates, `p1` in `a` and `p2` in `b`.
pub fn match_descriptors(a: &FeatureSet, b: &FeatureSet, cfg: &MatchConfig) -> Result<Vec<Match>, RetrievalError> {
    Ok(match_indices(a.descriptors(), b.descriptors(), cfg)?
        .into_iter()
        .map(|(i, j)| Match::new(a.normalized(i), b.normalized(j)))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    /// Fewer inliers than this leaves the candidate unverified.
    pub min_inliers: usize,
    /// Sample RANSAC hypotheses by activation when a map is given.
    pub weighted: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            min_inliers: 8,
            weighted: true,
        }
    }
}

/// Outcome of geometric verification; `score` is infinite when unverified.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub score: f64,
    pub inliers: usize,
    pub matches: usize,
}

impl Verification {
    fn unverified(matches: usize) -> Self {
        Self {
            score: f64::INFINITY,
            inliers: 0,
            matches,
        }
    }

    pub fn is_verified(&self) -> bool {
        self.score.is_finite()
    }
}

/// Matches, fits a fundamental matrix by RANSAC and scores the candidate by
/// the mean symmetric epipolar distance of the inliers.
pub fn verify_loop(
    qfs: &FeatureSet,
    cfs: &FeatureSet,
    a_query: Option<&ActivationMap>,
    cfg: &VerifyConfig,
) -> Result<Verification, RetrievalError> {
    let mut matches = match_descriptors(qfs, cfs, &cfg.matching)?;
    if matches.len() < 8 {
        return Ok(Verification::unverified(matches.len()));
    }
    let mut ransac = cfg.ransac.clone();
    ransac.weighted = false;
    if let (Some(a), true) = (a_query, cfg.weighted) {
        matches = attach_weights(&matches, a)?;
        ransac.weighted = true;
    }
    let outcome = match ransac_fundamental(&matches, &ransac) {
        Ok(o) => o,
        Err(e) => {
            log::debug!("verification failed: {e}");
            return Ok(Verification::unverified(matches.len()));
        }
    };
    let RansacOutcome::Consensus(res) = outcome else {
        return Ok(Verification::unverified(matches.len()));
    };
    let inliers = res.inlier_matches(&matches);
    if inliers.len() < cfg.min_inliers.max(8) {
        return Ok(Verification::unverified(matches.len()));
    }
    match reprojection_error(&res.model, &inliers) {
        Ok(score) => Ok(Verification {
            score,
            inliers: inliers.len(),
            matches: matches.len(),
        }),
        Err(_) => Ok(Verification::unverified(matches.len())),
    }
}

/// One retrieved candidate with its verification.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopScore {
    pub query: usize,
    pub candidate: usize,
    pub similarity: f64,
    pub verif_score: f64,
    pub inliers: usize,
}

pub const SCORE_HEADER: &str = "query_id,candidate_id,similarity,verif_score,inliers";

pub fn render_scores(rows: &[LoopScore]) -> String {
    let mut s = String::from(SCORE_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.query, r.candidate, r.similarity, r.verif_score, r.inliers)
            .expect("string write");
    }
    s
}

pub fn write_scores(path: &Path, rows: &[LoopScore]) -> Result<(), RetrievalError> {
    std::fs::write(path, render_scores(rows)).map_err(|e| RetrievalError::Io(path.display().to_string(), e.to_string()))
}

pub fn read_scores(path: &Path) -> Result<Vec<LoopScore>, RetrievalError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| RetrievalError::Io(path.display().to_string(), e.to_string()))?;
    let err = |line: usize, message: String| RetrievalError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("query_id")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(err(i + 1, format!("expected 5 fields, found {}", f.len())));
        }
        let bad = |what: &str, v: &str| err(i + 1, format!("bad {what} {v:?}"));
        let verif_score: f64 = f[3].parse().map_err(|_| bad("verif_score", f[3]))?;
        if verif_score.is_nan() || verif_score < 0.0 {
            return Err(bad("verif_score", f[3]));
        }
        out.push(LoopScore {
            query: f[0].parse().map_err(|_| bad("query_id", f[0]))?,
            candidate: f[1].parse().map_err(|_| bad("candidate_id", f[1]))?,
            similarity: f[2].parse().map_err(|_| bad("similarity", f[2]))?,
            verif_score,
            inliers: f[4].parse().map_err(|_| bad("inliers", f[4]))?,
        });
    }
    Ok(out)
}

/// Labels each scored candidate against the ground truth and counts the
/// loop events: distinct queries with at least one true partner.
pub fn label_scores(rows: &[LoopScore], gt: &LoopGroundTruth) -> (Vec<(f64, bool)>, usize) {
    let labeled = rows
        .iter()
        .map(|r| (r.verif_score, gt.is_loop(r.query, r.candidate)))
        .collect();
    let mut queries: Vec<usize> = rows.iter().map(|r| r.query).collect();
    queries.sort_unstable();
    queries.dedup();
    let events = queries.iter().filter(|q| !gt.partners(**q).is_empty()).count();
    (labeled, events)
}
