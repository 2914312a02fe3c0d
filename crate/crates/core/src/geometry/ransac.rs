use rand::seq::index::{sample, sample_weighted};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{eight_point, symmetric_distance, FundamentalMatrix, GeometryError, Match};

const SAMPLE_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RansacConfig {
    /// Inlier bound on the symmetric epipolar distance, normalized units.
    pub threshold: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Draw samples with probability proportional to match weight.
    pub weighted: bool,
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-3,
            max_iters: 2000,
            seed: 0,
            weighted: false,
            confidence: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub model: FundamentalMatrix,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }

    pub fn inlier_matches(&self, matches: &[Match]) -> Vec<Match> {
        matches
            .iter()
            .zip(&self.inliers)
            .filter(|(_, i)| **i)
            .map(|(m, _)| *m)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RansacOutcome {
    Consensus(RansacResult),
    /// No hypothesis gathered eight inliers.
    NoConsensus { iterations: usize },
}

impl RansacOutcome {
    pub fn consensus(&self) -> Option<&RansacResult> {
        match self {
            Self::Consensus(r) => Some(r),
            Self::NoConsensus { .. } => None,
        }
    }
}

fn classify(f: &FundamentalMatrix, matches: &[Match], threshold: f64) -> Vec<bool> {
    matches
        .iter()
        .map(|m| symmetric_distance(f, m).is_ok_and(|d| d < threshold))
        .collect()
}

fn count(flags: &[bool]) -> usize {
    flags.iter().filter(|b| **b).count()
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> usize {
    let good = inlier_ratio.powi(SAMPLE_SIZE as i32);
    if good >= 1.0 {
        return 1;
    }
    if good <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Robust fundamental-matrix fit.
///
/// In weighted mode samples are drawn without replacement with probability
/// proportional to weight. When fewer than eight matches carry positive
/// weight the sampler falls back to uniform draws.
pub fn ransac_fundamental(
    matches: &[Match],
    cfg: &RansacConfig,
) -> Result<RansacOutcome, GeometryError> {
    if matches.len() < SAMPLE_SIZE {
        return Err(GeometryError::TooFew {
            needed: SAMPLE_SIZE,
            got: matches.len(),
        });
    }
    if !(cfg.threshold > 0.0) {
        return Err(GeometryError::Threshold(cfg.threshold));
    }
    let weights: Option<Vec<f64>> = if cfg.weighted {
        let mut ws = Vec::with_capacity(matches.len());
        for (index, m) in matches.iter().enumerate() {
            match m.weight {
                Some(w) if w.is_finite() && w >= 0.0 => ws.push(w),
                weight => return Err(GeometryError::Weight { index, weight }),
            }
        }
        let positive = ws.iter().filter(|w| **w > 0.0).count();
        if positive >= SAMPLE_SIZE {
            Some(ws)
        } else {
            log::debug!("only {positive} positive weights; sampling uniformly");
            None
        }
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = matches.len();
    let mut best: Option<(FundamentalMatrix, Vec<bool>, usize)> = None;
    let mut needed = cfg.max_iters;
    let mut iterations = 0;
    let mut subset = Vec::with_capacity(SAMPLE_SIZE);
    while iterations < needed.min(cfg.max_iters) {
        iterations += 1;
        let picks = match &weights {
            Some(ws) => sample_weighted(&mut rng, n, |i| ws[i], SAMPLE_SIZE)
                .expect("enough positive weights"),
            None => sample(&mut rng, n, SAMPLE_SIZE),
        };
        subset.clear();
        subset.extend(picks.iter().map(|i| matches[i]));
        let Ok(model) = eight_point(&subset) else {
            continue;
        };
        let flags = classify(&model, matches, cfg.threshold);
        let c = count(&flags);
        if best.as_ref().is_none_or(|(_, _, b)| c > *b) {
            best = Some((model, flags, c));
            needed = required_iterations(c as f64 / n as f64, cfg.confidence);
        }
    }

    let Some((model, flags, c)) = best else {
        return Ok(RansacOutcome::NoConsensus { iterations });
    };
    if c < SAMPLE_SIZE {
        return Ok(RansacOutcome::NoConsensus { iterations });
    }
    let support: Vec<Match> = matches
        .iter()
        .zip(&flags)
        .filter(|(_, f)| **f)
        .map(|(m, _)| *m)
        .collect();
    let (model, inliers) = match eight_point(&support) {
        Ok(refit) => {
            let refit_flags = classify(&refit, matches, cfg.threshold);
            if count(&refit_flags) >= c {
                (refit, refit_flags)
            } else {
                (model, flags)
            }
        }
        Err(_) => (model, flags),
    };
    Ok(RansacOutcome::Consensus(RansacResult {
        model,
        inliers,
        iterations,
    }))
}
