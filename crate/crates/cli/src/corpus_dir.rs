//! On-disk corpus layout:
//!
//! ```text
//! corpus.cfg       frames, height, width, heldout_every, seed
//! categories.tsv   label category table
//! loops.csv        ground-truth loop pairs
//! frames/NNNNNN.ppm         RGB image
//! frames/NNNNNN.labels.pgm  segmenter labels
//! frames/NNNNNN.motion.pgm  true motion mask (1 = static)
//! frames/NNNNNN.kp.tsv      keypoints
//! frames/NNNNNN.desc        descriptors
//! frames/NNNNNN.dense       dense descriptor grid, stored as H·W float rows
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dsfeat::data::{
    mine_triplets_from, read_activation, read_descriptors, read_keypoints, read_label_map,
    read_loops, read_rgb, stability_from_labels, write_category_table, write_descriptors, write_keypoints,
    write_label_map, write_loops, write_rgb, write_stability_map, Config, Corpus, LabelMap, LoopGroundTruth,
    RgbImage, StabilityMap,
};
use dsfeat::losses::DenseGrid;
use dsfeat::network::{ActivationMap, DsFeat};
use dsfeat::pipeline::{FrameInput, Sequence};
use dsfeat::selection::{Descriptors, FeatureSet};
use dsfeat::trainer::{TrainImage, TrainingData};

use crate::CliError;

const META: &str = "corpus.cfg";
const CATEGORIES: &str = "categories.tsv";
const LOOPS: &str = "loops.csv";

pub fn frame_file(dir: &Path, id: usize, ext: &str) -> PathBuf {
    dir.join(format!("{id:06}.{ext}"))
}

pub fn write_corpus(root: &Path, corpus: &Corpus) -> Result<(), CliError> {
    let frames = root.join("frames");
    fs::create_dir_all(&frames).map_err(|e| CliError::Data(format!("{}: {e}", frames.display())))?;
    let c = &corpus.config;
    let mut meta = Config::default();
    meta.set("frames", corpus.frames.len());
    meta.set("height", c.height);
    meta.set("width", c.width);
    meta.set("heldout_every", c.heldout_every);
    meta.set("seed", c.seed);
    meta.write(&root.join(META))?;
    write_category_table(&root.join(CATEGORIES), &corpus.categories)?;
    write_loops(&root.join(LOOPS), corpus.loops.pairs())?;
    for f in &corpus.frames {
        write_rgb(&frame_file(&frames, f.id, "ppm"), &f.image)?;
        write_label_map(&frame_file(&frames, f.id, "labels.pgm"), &root.join(CATEGORIES), &f.labels)?;
        write_stability_map(&frame_file(&frames, f.id, "motion.pgm"), &f.motion)?;
        write_keypoints(&frame_file(&frames, f.id, "kp.tsv"), f.features.keypoints())?;
        write_descriptors(&frame_file(&frames, f.id, "desc"), f.features.descriptors())?;
        let dense = Descriptors::Float {
            dim: f.dense.dim,
            data: f.dense.data.clone(),
        };
        write_descriptors(&frame_file(&frames, f.id, "dense"), &dense)?;
    }
    Ok(())
}

/// A corpus directory opened for reading; frames are loaded on demand.
pub struct CorpusDir {
    root: PathBuf,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub heldout_every: usize,
    pub loops: LoopGroundTruth,
}

fn required(meta: &Config, path: &Path, key: &str) -> Result<usize, CliError> {
    meta.get(key)?
        .ok_or_else(|| CliError::Data(format!("{}: missing key {key}", path.display())))
}

impl CorpusDir {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        let meta_path = root.join(META);
        let meta = Config::read(&meta_path)?;
        let frames = required(&meta, &meta_path, "frames")?;
        let loops = LoopGroundTruth::new(read_loops(&root.join(LOOPS))?, frames)?;
        Ok(Self {
            root: root.to_path_buf(),
            frames,
            height: required(&meta, &meta_path, "height")?,
            width: required(&meta, &meta_path, "width")?,
            heldout_every: required(&meta, &meta_path, "heldout_every")?.max(1),
            loops,
        })
    }

    /// Directory name, used as the sequence name in reports.
    pub fn name(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into())
    }

    fn file(&self, id: usize, ext: &str) -> PathBuf {
        frame_file(&self.root.join("frames"), id, ext)
    }

    pub fn is_heldout(&self, id: usize) -> bool {
        id % self.heldout_every == self.heldout_every - 1
    }

    pub fn image(&self, id: usize) -> Result<RgbImage, CliError> {
        Ok(read_rgb(&self.file(id, "ppm"))?)
    }

    pub fn labels(&self, id: usize) -> Result<LabelMap, CliError> {
        Ok(read_label_map(&self.file(id, "labels.pgm"), &self.root.join(CATEGORIES))?)
    }

    pub fn stability(&self, id: usize, static_categories: &[&str]) -> Result<StabilityMap, CliError> {
        Ok(stability_from_labels(&self.labels(id)?, static_categories)?)
    }

    pub fn features(&self, id: usize) -> Result<FeatureSet, CliError> {
        let kps = read_keypoints(&self.file(id, "kp.tsv"))?;
        let desc = read_descriptors(&self.file(id, "desc"))?;
        FeatureSet::new(self.width, self.height, kps, desc)
            .map_err(|e| CliError::Data(format!("{}: {e}", self.file(id, "kp.tsv").display())))
    }

    pub fn dense(&self, id: usize) -> Result<DenseGrid, CliError> {
        let path = self.file(id, "dense");
        match read_descriptors(&path)? {
            Descriptors::Float { dim, data } => DenseGrid::new(self.height, self.width, dim, data)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display()))),
            Descriptors::Binary { .. } => Err(CliError::Data(format!("{}: dense grid must be float", path.display()))),
        }
    }

    /// Pipeline inputs. Activations come from `model` when given, otherwise
    /// from `activations/NNNNNN.dsfa` where present.
    pub fn sequence(
        &self,
        static_categories: &[&str],
        model: Option<&DsFeat>,
        activations: Option<&Path>,
    ) -> Result<Sequence, CliError> {
        let mut frames = Vec::with_capacity(self.frames);
        for id in 0..self.frames {
            let activation = match (model, activations) {
                (Some(m), _) => Some(m.forward(&self.image(id)?.to_tensor())?),
                (None, Some(dir)) => read_optional_activation(&frame_file(dir, id, "dsfa"))?,
                (None, None) => None,
            };
            frames.push(FrameInput {
                id,
                features: self.features(id)?,
                stability: Some(self.stability(id, static_categories)?),
                activation,
            });
        }
        Ok(Sequence {
            name: self.name(),
            frames,
            loops: self.loops.clone(),
        })
    }

    /// Triplets mined among non-held-out frames, with everything either
    /// distance mode needs.
    pub fn training_data(
        &self,
        static_categories: &[&str],
        negatives: usize,
        gap: usize,
        seed: u64,
    ) -> Result<TrainingData, CliError> {
        let train_ids: Vec<usize> = (0..self.frames).filter(|&i| !self.is_heldout(i)).collect();
        let gt = self.loops.restricted(|i| !self.is_heldout(i));
        let mined = mine_triplets_from(&gt, &train_ids, negatives, gap, seed)?;
        let mut images = BTreeMap::new();
        for &id in &train_ids {
            images.insert(
                id,
                TrainImage {
                    image: self.image(id)?.to_tensor(),
                    stability: self.stability(id, static_categories)?,
                    features: Some(self.features(id)?),
                    dense: Some(self.dense(id)?),
                },
            );
        }
        Ok(TrainingData {
            images,
            triplets: mined.triplets,
        })
    }
}

fn read_optional_activation(path: &Path) -> Result<Option<ActivationMap>, CliError> {
    if path.exists() {
        Ok(Some(read_activation(path)?))
    } else {
        Ok(None)
    }
}
