//! Epoch loop with step learning-rate decay, the scheduled hybrid loss and
//! checkpointing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{grad_check, sgd_step, AutodiffError, GradCheckReport, Graph, NodeId, ParamSet, Real, Tensor};
use crate::data::{mine_triplets_from, stability_from_labels, Corpus, StabilityMap, TripletRecord};
use crate::geometry::{ransac_fundamental, Match, RansacConfig, RansacOutcome};
use crate::losses::{
    hybrid_term, matching_term, schedule, semantic_term, DenseGrid, DistanceMode, LossError, LossWeights,
    MatchingConfig, MatchingPayload, SchedulePolicy, SparsePair, TripletNodes,
};
use crate::network::{read_weight_file, write_weight_file, ActivationMap, DsFeat, NetworkConfig, NetworkError};
use crate::retrieval::{match_indices, MatchConfig, RetrievalError};
use crate::selection::{attach_weights, select_topk_activation, FeatureSet, SelectionError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no triplets to train on")]
    NoTriplets,
    #[error("image {0} has no stability map")]
    MissingImage(usize),
    #[error("image {id} lacks {what} needed in {mode} mode")]
    MissingPayload {
        id: usize,
        what: &'static str,
        mode: DistanceMode,
    },
    #[error("checkpoint epoch {found} exceeds max_epochs {max}")]
    EpochMismatch { found: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub matching: MatchingConfig,
    pub policy: SchedulePolicy,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Query features kept when refitting each pair's model in sparse mode.
    pub top_k: usize,
    pub ransac: RansacConfig,
    pub match_config: MatchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            lr: 1e-3,
            lr_decay_epochs: vec![20, 30, 40],
            lr_decay_factor: 0.1,
            matching: MatchingConfig::default(),
            policy: SchedulePolicy::default(),
            seed: 0,
            checkpoint_every: 0,
            top_k: 500,
            ransac: RansacConfig::default(),
            match_config: MatchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_epochs must be strictly increasing".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if !(self.matching.margin >= 0.0 && self.matching.margin.is_finite()) {
            return bad(format!("margin must be >= 0, got {}", self.matching.margin));
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &e in &self.lr_decay_epochs {
            if epoch >= e {
                lr *= self.lr_decay_factor;
            }
        }
        lr
    }

    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        schedule(epoch, self.policy)
    }
}

/// One training image with everything either distance mode may need.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainImage {
    /// `[1, C, H, W]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub stability: StabilityMap,
    pub features: Option<FeatureSet>,
    pub dense: Option<DenseGrid>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingData {
    pub images: BTreeMap<usize, TrainImage>,
    pub triplets: Vec<TripletRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub w_sem: f64,
    pub w_mat: f64,
    pub mean_sem: f64,
    pub mean_mat: f64,
    pub mean_hybrid: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,w_sem,w_mat,mean_sem,mean_mat,mean_hybrid";

pub fn render_log(rows: &[EpochLog], header: bool) -> String {
    let mut s = String::new();
    if header {
        s.push_str(LOG_HEADER);
        s.push('\n');
    }
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.w_sem, r.w_mat, r.mean_sem, r.mean_mat, r.mean_hybrid
        )
        .expect("string write");
    }
    s
}

pub fn parse_log(text: &str) -> Result<Vec<EpochLog>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with("epoch") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || TrainError::Checkpoint(format!("loss log line {}: malformed", i + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        let n = |j: usize| f[j].trim().parse::<f64>().map_err(|_| bad());
        out.push(EpochLog {
            epoch: f[0].trim().parse().map_err(|_| bad())?,
            lr: n(1)?,
            w_sem: n(2)?,
            w_mat: n(3)?,
            mean_sem: n(4)?,
            mean_mat: n(5)?,
            mean_hybrid: n(6)?,
        });
    }
    Ok(out)
}

/// Loss nodes of one triplet.
#[derive(Clone, Copy, Debug)]
pub struct TripletLoss {
    pub sem: NodeId,
    pub mat: NodeId,
    pub hybrid: NodeId,
}

/// Records the hybrid loss of one triplet: semantic BCE on the query plus
/// the triplet matching term. Dense mode runs the network on all three
/// images, sparse mode only on the query.
#[allow(clippy::too_many_arguments)]
pub fn record_triplet_loss<T: Real>(
    g: &mut Graph<T>,
    model: &DsFeat,
    params: &ParamSet<T>,
    images: [&Tensor<T>; 3],
    query_stability: &StabilityMap,
    payload: &MatchingPayload,
    cfg: &MatchingConfig,
    w: LossWeights,
    with_matching: bool,
) -> Result<TripletLoss, TrainError> {
    let a_q = model.record(g, params, images[0])?;
    let sem = semantic_term(g, a_q, query_stability)?;
    let mat = if with_matching {
        let (p, n) = match cfg.mode {
            DistanceMode::Dense => (
                Some(model.record(g, params, images[1])?),
                Some(model.record(g, params, images[2])?),
            ),
            DistanceMode::Sparse => (None, None),
        };
        let nodes = TripletNodes {
            query: a_q,
            positive: p,
            negative: n,
        };
        matching_term(g, nodes, payload, cfg)?
    } else {
        g.input(Tensor::scalar(T::zero()))
    };
    let hybrid = hybrid_term(g, sem, mat, w)?;
    Ok(TripletLoss { sem, mat, hybrid })
}

/// Descriptor matches of a query against another image, with the query-side
/// feature index of each.
#[derive(Clone, Debug, PartialEq)]
struct PairMatches {
    query_rows: Vec<usize>,
    matches: Vec<Match>,
}

/// Training state that can run epochs one at a time.
pub struct Trainer<'a> {
    model: DsFeat,
    data: &'a TrainingData,
    cfg: TrainConfig,
    epoch: usize,
    pairs: BTreeMap<(usize, usize), PairMatches>,
}

impl<'a> Trainer<'a> {
    /// Validates inputs and precomputes sparse-mode matches. `epoch` is the
    /// number of epochs already completed.
    pub fn new(model: DsFeat, data: &'a TrainingData, cfg: TrainConfig, epoch: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.triplets.is_empty() {
            return Err(TrainError::NoTriplets);
        }
        if epoch > cfg.max_epochs {
            return Err(TrainError::EpochMismatch {
                found: epoch,
                max: cfg.max_epochs,
            });
        }
        let mut ids = BTreeSet::new();
        for t in &data.triplets {
            for id in [t.query, t.positive, t.negative] {
                let img = data.images.get(&id).ok_or(TrainError::MissingImage(id))?;
                model.check_input(img.image.shape())?;
                ids.insert(id);
            }
        }
        let mut pairs = BTreeMap::new();
        if cfg.matching.mode == DistanceMode::Sparse && cfg.policy != SchedulePolicy::SemanticOnly {
            for t in &data.triplets {
                for other in [t.positive, t.negative] {
                    if pairs.contains_key(&(t.query, other)) {
                        continue;
                    }
                    let fq = features(data, t.query)?;
                    let fo = features(data, other)?;
                    let idx = match_indices(fq.descriptors(), fo.descriptors(), &cfg.match_config)?;
                    pairs.insert(
                        (t.query, other),
                        PairMatches {
                            query_rows: idx.iter().map(|p| p.0).collect(),
                            matches: idx
                                .iter()
                                .map(|&(i, j)| Match::new(fq.normalized(i), fo.normalized(j)))
                                .collect(),
                        },
                    );
                }
            }
        } else if cfg.matching.mode == DistanceMode::Dense {
            for id in &ids {
                if data.images[id].dense.is_none() {
                    return Err(TrainError::MissingPayload {
                        id: *id,
                        what: "a dense descriptor grid",
                        mode: DistanceMode::Dense,
                    });
                }
            }
        }
        Ok(Self {
            model,
            data,
            cfg,
            epoch,
            pairs,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn model(&self) -> &DsFeat {
        &self.model
    }

    pub fn into_model(self) -> DsFeat {
        self.model
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.max_epochs
    }

    /// Per-pair sparse payloads for this epoch: each pair's model is refit
    /// by activation-weighted RANSAC on matches among the query's top-k
    /// features, then every match is scored against it.
    fn sparse_pairs(&mut self) -> Result<BTreeMap<(usize, usize), SparsePair>, TrainError> {
        let mut maps: BTreeMap<usize, ActivationMap> = BTreeMap::new();
        let mut out = BTreeMap::new();
        for (&(q, o), pm) in &self.pairs {
            if !maps.contains_key(&q) {
                maps.insert(q, self.model.forward(&self.data.images[&q].image)?);
            }
            let a = &maps[&q];
            let fq = features(self.data, q)?;
            let kept: BTreeSet<usize> = select_topk_activation(fq, a, self.cfg.top_k)?
                .source_indices
                .into_iter()
                .collect();
            let mut subset: Vec<Match> = pm
                .query_rows
                .iter()
                .zip(&pm.matches)
                .filter(|(r, _)| kept.contains(r))
                .map(|(_, m)| *m)
                .collect();
            if subset.len() < 8 {
                subset = pm.matches.clone();
            }
            let model = if subset.len() >= 8 {
                let weighted = attach_weights(&subset, a)?;
                let mut rc = self.cfg.ransac.clone();
                rc.weighted = true;
                rc.seed = rc.seed ^ (q as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (o as u64);
                match ransac_fundamental(&weighted, &rc) {
                    Ok(RansacOutcome::Consensus(r)) => Some(r.model),
                    _ => None,
                }
            } else {
                None
            };
            let (w, h) = (fq.width(), fq.height());
            out.insert((q, o), SparsePair::new(&pm.matches, model.as_ref(), w, h));
        }
        Ok(out)
    }

    /// Runs one epoch and returns its log row.
    pub fn run_epoch(&mut self) -> Result<EpochLog, TrainError> {
        let e = self.epoch;
        let lr = self.cfg.lr_at(e);
        let w = self.cfg.weights_at(e);
        let with_matching = self.cfg.policy != SchedulePolicy::SemanticOnly;
        let sparse = if with_matching && self.cfg.matching.mode == DistanceMode::Sparse {
            self.sparse_pairs()?
        } else {
            BTreeMap::new()
        };
        let mut order: Vec<usize> = (0..self.data.triplets.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (e as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);

        let (mut s_sem, mut s_mat, mut s_hyb) = (0.0, 0.0, 0.0);
        for &ti in &order {
            let t = self.data.triplets[ti];
            let payload = match self.cfg.matching.mode {
                DistanceMode::Sparse => MatchingPayload {
                    dense: None,
                    sparse: with_matching.then(|| {
                        [
                            sparse[&(t.query, t.positive)].clone(),
                            sparse[&(t.query, t.negative)].clone(),
                        ]
                    }),
                },
                DistanceMode::Dense => MatchingPayload {
                    dense: with_matching.then(|| {
                        [t.query, t.positive, t.negative]
                            .map(|id| self.data.images[&id].dense.clone().expect("checked in new"))
                    }),
                    sparse: None,
                },
            };
            let imgs = [t.query, t.positive, t.negative].map(|id| &self.data.images[&id].image);
            let mut g = Graph::<f32>::new();
            let loss = record_triplet_loss(
                &mut g,
                &self.model,
                self.model.params(),
                imgs,
                &self.data.images[&t.query].stability,
                &payload,
                &self.cfg.matching,
                w,
                with_matching,
            )?;
            g.backward(loss.hybrid)?;
            s_sem += g.value(loss.sem).item()? as f64;
            s_mat += g.value(loss.mat).item()? as f64;
            s_hyb += g.value(loss.hybrid).item()? as f64;
            let params = self.model.params_mut();
            params.collect_grads(&g);
            sgd_step(params, lr)?;
        }
        let n = order.len() as f64;
        self.epoch += 1;
        let row = EpochLog {
            epoch: e,
            lr,
            w_sem: w.w_sem,
            w_mat: w.w_mat,
            mean_sem: s_sem / n,
            mean_mat: s_mat / n,
            mean_hybrid: s_hyb / n,
        };
        log::info!(
            "epoch {e}: lr {lr} sem {:.5} mat {:.5} hybrid {:.5}",
            row.mean_sem,
            row.mean_mat,
            row.mean_hybrid
        );
        Ok(row)
    }

    /// Runs to `max_epochs`, checkpointing into `checkpoint_dir` every
    /// `checkpoint_every` epochs when a directory is given.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<Vec<EpochLog>, TrainError> {
        let mut rows = Vec::new();
        while !self.is_done() {
            rows.push(self.run_epoch()?);
            if let (Some(dir), k) = (checkpoint_dir, self.cfg.checkpoint_every) {
                if k > 0 && self.epoch % k == 0 {
                    checkpoint(&self.model, self.epoch, &dir.join(format!("epoch{:03}.dsfw", self.epoch)))?;
                }
            }
        }
        Ok(rows)
    }
}

fn features(data: &TrainingData, id: usize) -> Result<&FeatureSet, TrainError> {
    data.images[&id].features.as_ref().ok_or(TrainError::MissingPayload {
        id,
        what: "a feature set",
        mode: DistanceMode::Sparse,
    })
}

/// Trains from the model's current weights for `cfg.max_epochs` epochs.
pub fn train(model: DsFeat, data: &TrainingData, cfg: TrainConfig) -> Result<(DsFeat, Vec<EpochLog>), TrainError> {
    let mut t = Trainer::new(model, data, cfg, 0)?;
    let log = t.run(None)?;
    Ok((t.into_model(), log))
}

/// Writes the weights with the completed epoch count in the config block.
pub fn checkpoint(model: &DsFeat, epoch: usize, path: &Path) -> Result<(), TrainError> {
    let extra = BTreeMap::from([("epoch".to_string(), epoch.to_string())]);
    write_weight_file(path, &model.to_weight_file(&extra))?;
    Ok(())
}

/// Loads a checkpoint and its completed epoch count, which must not exceed
/// `max_epochs`.
pub fn resume(path: &Path, max_epochs: usize) -> Result<(DsFeat, usize), TrainError> {
    let file = read_weight_file(path)?;
    let epoch: usize = file
        .meta
        .get("epoch")
        .ok_or_else(|| TrainError::Checkpoint(format!("{}: no epoch recorded", path.display())))?
        .parse()
        .map_err(|_| TrainError::Checkpoint(format!("{}: malformed epoch", path.display())))?;
    if epoch > max_epochs {
        return Err(TrainError::EpochMismatch {
            found: epoch,
            max: max_epochs,
        });
    }
    Ok((DsFeat::from_weight_file(&file)?, epoch))
}

/// Settings for a finite-difference check of the full model and loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub network: NetworkConfig,
    pub height: usize,
    pub width: usize,
    pub mode: DistanceMode,
    pub epoch: usize,
    pub eps: f64,
    pub per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig {
                base_channels: 4,
                ..NetworkConfig::default()
            },
            height: 8,
            width: 8,
            mode: DistanceMode::Sparse,
            epoch: 5,
            eps: 1e-4,
            per_param: 4,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of the hybrid loss with respect to every
/// network parameter against 64-bit central differences, on a random
/// triplet drawn from `cfg.seed`.
pub fn grad_check_model(cfg: &GradCheckConfig) -> Result<GradCheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = NetworkConfig {
        seed: cfg.seed,
        ..cfg.network.clone()
    };
    let model = DsFeat::new(net.clone())?;
    let params = model.params().cast::<f64>();
    let (h, w) = (cfg.height, cfg.width);
    let mut image = || {
        Tensor::<f64>::new(
            [1, net.input_channels, h, w],
            (0..net.input_channels * h * w).map(|_| rng.random::<f64>()).collect(),
        )
        .expect("image extents")
    };
    let images = [image(), image(), image()];
    let stability = StabilityMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..2u8)).collect())
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let payload = match cfg.mode {
        DistanceMode::Dense => {
            let dim = 3;
            let mut grid = || {
                DenseGrid::new(h, w, dim, (0..h * w * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .expect("grid extents")
            };
            MatchingPayload {
                dense: Some([grid(), grid(), grid()]),
                sparse: None,
            }
        }
        DistanceMode::Sparse => {
            let mut pair = |scale: f64| SparsePair {
                points: (0..12)
                    .map(|_| (rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64)))
                    .collect(),
                residuals: (0..12).map(|_| scale * rng.random_range(0.0..1.0)).collect(),
            };
            MatchingPayload {
                dense: None,
                sparse: Some([pair(1.0), pair(0.2)]),
            }
        }
    };
    // A large margin keeps the hinge active so its kink is never straddled.
    let matching = MatchingConfig {
        mode: cfg.mode,
        margin: 10.0,
        unverified_distance: 0.0,
    };
    let weights = schedule(cfg.epoch, SchedulePolicy::DecaySemantic);
    Ok(grad_check(&params, cfg.eps, cfg.per_param, cfg.seed, |g, ps| {
        let l = record_triplet_loss(
            g,
            &model,
            ps,
            [&images[0], &images[1], &images[2]],
            &stability,
            &payload,
            &matching,
            weights,
            true,
        )
        .map_err(|e| match e {
            TrainError::Autodiff(a) => a,
            other => AutodiffError::Invalid(other.to_string()),
        })?;
        Ok(l.hybrid)
    })?)
}

/// Triplets mined from the corpus loops among non-held-out frames, with
/// stability maps from the segmenter labels.
pub fn corpus_training_data(
    corpus: &Corpus,
    static_categories: &[&str],
    negatives_per_query: usize,
    gap: usize,
    seed: u64,
) -> Result<TrainingData, TrainError> {
    let train_ids = corpus.training_ids();
    let gt = corpus.loops.restricted(|i| !corpus.is_heldout(i));
    let mined = mine_triplets_from(&gt, &train_ids, negatives_per_query, gap, seed)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mut images = BTreeMap::new();
    for &id in &train_ids {
        let f = &corpus.frames[id];
        images.insert(
            id,
            TrainImage {
                image: f.image.to_tensor(),
                stability: stability_from_labels(&f.labels, static_categories)
                    .map_err(|e| TrainError::Config(e.to_string()))?,
                features: Some(f.features.clone()),
                dense: Some(f.dense.clone()),
            },
        );
    }
    Ok(TrainingData {
        images,
        triplets: mined.triplets,
    })
}

#[cfg(test)]
mod tests;
