//! End-to-end comparison of feature-selection variants: selection, BoW
//! retrieval, epipolar verification and precision-recall per sequence.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{stability_from_labels, Corpus, DataError, LoopGroundTruth, StabilityMap, DEFAULT_STATIC};
use crate::evaluation::{curve_area, pr_curve_with_total, EvalError, PrPoint};
use crate::network::{ActivationMap, DsFeat, NetworkError};
use crate::retrieval::{
    build_vocabulary_sampled, label_scores, quantize, verify_loop, BowIndex, LoopScore, RetrievalError,
    VerifyConfig, Vocabulary,
};
use crate::selection::{
    select_topk_activation, select_topk_response, semantic_filter_select, FeatureSet, Selection, SelectionError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("sequence {0} has no frames")]
    Empty(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Top-k by detector response.
    Trad,
    /// Semantic mask, then top-k by response.
    Seman,
    /// Top-k by learned activation, with weighted RANSAC.
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Trad, Variant::Seman, Variant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Self::Trad => "trad",
            Self::Seman => "seman",
            Self::Ours => "ours",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "trad" => Ok(Self::Trad),
            "seman" => Ok(Self::Seman),
            "ours" => Ok(Self::Ours),
            other => Err(format!("unknown variant {other:?} (trad|seman|ours)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub variants: Vec<Variant>,
    pub top_k: usize,
    pub vocab_k: usize,
    pub vocab_seed: u64,
    /// Rows clustered when building the vocabulary.
    pub vocab_rows: usize,
    /// Candidates closer than this in sequence position are not retrieved.
    pub exclusion_gap: usize,
    pub verify: VerifyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            top_k: 500,
            vocab_k: 256,
            vocab_seed: 0,
            vocab_rows: 5000,
            exclusion_gap: 10,
            verify: VerifyConfig::default(),
        }
    }
}

/// Per-frame inputs; variants whose input is absent are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub id: usize,
    pub features: FeatureSet,
    pub stability: Option<StabilityMap>,
    pub activation: Option<ActivationMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<FrameInput>,
    pub loops: LoopGroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub scores: Vec<LoopScore>,
    pub curve: Vec<PrPoint>,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VariantOutcome {
    Done(VariantResult),
    Skipped { variant: Variant, reason: String },
}

impl VariantOutcome {
    pub fn variant(&self) -> Variant {
        match self {
            Self::Done(r) => r.variant,
            Self::Skipped { variant, .. } => *variant,
        }
    }

    pub fn auc(&self) -> Option<f64> {
        match self {
            Self::Done(r) => Some(r.auc),
            Self::Skipped { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    pub name: String,
    pub outcomes: Vec<VariantOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub variants: Vec<Variant>,
    pub sequences: Vec<SequenceReport>,
}

impl Report {
    pub fn auc(&self, sequence: &str, variant: Variant) -> Option<f64> {
        self.sequences
            .iter()
            .find(|s| s.name == sequence)?
            .outcomes
            .iter()
            .find(|o| o.variant() == variant)?
            .auc()
    }

    /// Rows are sequences, columns variants; skipped cells read `skipped`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence");
        for v in &self.variants {
            write!(s, ",{v}").expect("string write");
        }
        s.push('\n');
        for seq in &self.sequences {
            s.push_str(&seq.name);
            for v in &self.variants {
                match seq.outcomes.iter().find(|o| o.variant() == *v) {
                    Some(VariantOutcome::Done(r)) => write!(s, ",{:.6}", r.auc).expect("string write"),
                    _ => s.push_str(",skipped"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Vocabulary trained on every feature of the sequence.
pub fn sequence_vocabulary(seq: &Sequence, cfg: &PipelineConfig) -> Result<Vocabulary, PipelineError> {
    let descs: Vec<_> = seq.frames.iter().map(|f| f.features.descriptors()).collect();
    Ok(build_vocabulary_sampled(&descs, cfg.vocab_k, cfg.vocab_seed, cfg.vocab_rows)?)
}

/// Features a variant keeps for one frame, or `None` when the frame lacks
/// the map that variant needs.
pub fn select_features(frame: &FrameInput, variant: Variant, k: usize) -> Result<Option<Selection>, PipelineError> {
    if frame.features.is_empty() {
        return Ok(Some(Selection {
            features: frame.features.clone(),
            source_indices: Vec::new(),
            weights: None,
        }));
    }
    Ok(match variant {
        Variant::Trad => Some(select_topk_response(&frame.features, k)?),
        Variant::Seman => match &frame.stability {
            Some(s) => Some(semantic_filter_select(&frame.features, s, k)?),
            None => None,
        },
        Variant::Ours => match &frame.activation {
            Some(a) => Some(select_topk_activation(&frame.features, a, k)?),
            None => None,
        },
    })
}

/// Scores every frame's best retrieved candidate for one variant.
pub fn run_variant(
    seq: &Sequence,
    vocab: &Vocabulary,
    variant: Variant,
    cfg: &PipelineConfig,
) -> Result<VariantOutcome, PipelineError> {
    let mut selections = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        match select_features(f, variant, cfg.top_k)? {
            Some(s) => selections.push(s),
            None => {
                let what = if variant == Variant::Seman { "stability map" } else { "activation map" };
                return Ok(VariantOutcome::Skipped {
                    variant,
                    reason: format!("frame {} has no {what}", f.id),
                });
            }
        }
    }
    let mut index = BowIndex::new();
    let mut bows = Vec::with_capacity(selections.len());
    for (f, s) in seq.frames.iter().zip(&selections) {
        let b = quantize(&s.features, vocab)?;
        index.insert(f.id, b.clone());
        bows.push(b);
    }
    let mut scores = Vec::new();
    for (qi, f) in seq.frames.iter().enumerate() {
        let Some(&(cand, similarity)) = index.query(f.id, &bows[qi], 1, cfg.exclusion_gap).first() else {
            continue;
        };
        let ci = seq.frames.iter().position(|g| g.id == cand).expect("indexed id");
        let a = match variant {
            Variant::Ours => f.activation.as_ref(),
            _ => None,
        };
        let mut vcfg = cfg.verify.clone();
        vcfg.ransac.seed ^= f.id as u64;
        let v = verify_loop(&selections[qi].features, &selections[ci].features, a, &vcfg)?;
        scores.push(LoopScore {
            query: f.id,
            candidate: cand,
            similarity,
            verif_score: v.score,
            inliers: v.inliers,
        });
    }
    let (labeled, _) = label_scores(&scores, &seq.loops);
    let events = seq
        .frames
        .iter()
        .filter(|f| {
            seq.loops
                .partners(f.id)
                .iter()
                .any(|p| p.abs_diff(f.id) > cfg.exclusion_gap)
        })
        .count();
    let curve = pr_curve_with_total(&labeled, events)?;
    let auc = curve_area(&curve);
    Ok(VariantOutcome::Done(VariantResult {
        variant,
        scores,
        curve,
        auc,
    }))
}

pub fn run_sequence(seq: &Sequence, cfg: &PipelineConfig) -> Result<SequenceReport, PipelineError> {
    if seq.frames.is_empty() {
        return Err(PipelineError::Empty(seq.name.clone()));
    }
    let vocab = sequence_vocabulary(seq, cfg)?;
    let mut outcomes = Vec::new();
    for &v in &cfg.variants {
        let o = run_variant(seq, &vocab, v, cfg)?;
        if let VariantOutcome::Skipped { reason, .. } = &o {
            log::warn!("{}: variant {v} skipped: {reason}", seq.name);
        }
        outcomes.push(o);
    }
    Ok(SequenceReport {
        name: seq.name.clone(),
        outcomes,
    })
}

pub fn run_pipeline(sequences: &[Sequence], cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    Ok(Report {
        variants: cfg.variants.clone(),
        sequences: sequences
            .iter()
            .map(|s| run_sequence(s, cfg))
            .collect::<Result<_, _>>()?,
    })
}

/// Pipeline inputs for a generated corpus: stability maps from the
/// segmenter labels and, given a model, its activation maps.
pub fn corpus_sequence(
    corpus: &Corpus,
    name: &str,
    model: Option<&DsFeat>,
    static_categories: &[&str],
) -> Result<Sequence, PipelineError> {
    let static_categories = if static_categories.is_empty() {
        &DEFAULT_STATIC[..]
    } else {
        static_categories
    };
    let mut frames = Vec::with_capacity(corpus.frames.len());
    for f in &corpus.frames {
        frames.push(FrameInput {
            id: f.id,
            features: f.features.clone(),
            stability: Some(stability_from_labels(&f.labels, static_categories)?),
            activation: match model {
                Some(m) => Some(m.forward(&f.image.to_tensor())?),
                None => None,
            },
        });
    }
    Ok(Sequence {
        name: name.to_string(),
        frames,
        loops: corpus.loops.clone(),
    })
}

#[cfg(test)]
mod tests;
