use approx::assert_relative_eq;

use super::*;
use crate::data::{generate_corpus, CorpusConfig, DEFAULT_STATIC};
use crate::losses::alpha_schedule;
use crate::network::decode_weight_file;

fn tiny_corpus() -> Corpus {
    generate_corpus(&CorpusConfig {
        n_frames: 40,
        first_pass: 30,
        revisit_from: 5,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn tiny_model() -> DsFeat {
    DsFeat::new(NetworkConfig {
        base_channels: 2,
        seed: 3,
        ..NetworkConfig::default()
    })
    .unwrap()
}

fn tiny_data(corpus: &Corpus) -> TrainingData {
    let mut d = corpus_training_data(corpus, &DEFAULT_STATIC, 1, 5, 1).unwrap();
    d.triplets.truncate(3);
    d
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        lr: 0.05,
        top_k: 40,
        matching: MatchingConfig {
            margin: 0.01,
            unverified_distance: 0.0,
            ..MatchingConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn step_schedule() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_at(0), 1e-3);
    assert_eq!(c.lr_at(19), 1e-3);
    assert_eq!(c.lr_at(20), 1e-3 * 0.1);
    assert_relative_eq!(c.lr_at(25), 1e-4, max_relative = 1e-12);
    assert_relative_eq!(c.lr_at(35), 1e-5, max_relative = 1e-12);
    assert_relative_eq!(c.lr_at(45), 1e-6, max_relative = 1e-12);
    assert_eq!(c.weights_at(0).w_sem, 1.0);
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { max_epochs: 0, ..ok.clone() },
        TrainConfig { lr: -1.0, ..ok.clone() },
        TrainConfig { lr_decay_epochs: vec![30, 20], ..ok.clone() },
        TrainConfig { top_k: 0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
}

#[test]
fn log_round_trip() {
    let rows = vec![
        EpochLog {
            epoch: 0,
            lr: 1e-3,
            w_sem: 1.0,
            w_mat: 0.0,
            mean_sem: 0.6931,
            mean_mat: 0.25,
            mean_hybrid: 0.6931,
        },
        EpochLog {
            epoch: 1,
            lr: 1e-3,
            w_sem: 0.9,
            w_mat: 0.09999999999999998,
            mean_sem: 0.5,
            mean_mat: 1.0 / 3.0,
            mean_hybrid: 0.48333,
        },
    ];
    let text = render_log(&rows, true);
    assert!(text.starts_with(LOG_HEADER));
    assert_eq!(parse_log(&text).unwrap(), rows);
    assert!(parse_log("0,1,2\n").is_err());
}

#[test]
fn empty_triplets_rejected() {
    let corpus = tiny_corpus();
    let mut data = tiny_data(&corpus);
    data.triplets.clear();
    assert!(matches!(Trainer::new(tiny_model(), &data, tiny_cfg(1), 0), Err(TrainError::NoTriplets)));
}

#[test]
fn training_logs_follow_schedule() {
    let corpus = tiny_corpus();
    let data = tiny_data(&corpus);
    let cfg = TrainConfig {
        lr_decay_epochs: vec![1, 2],
        ..tiny_cfg(3)
    };
    let (_, log) = train(tiny_model(), &data, cfg.clone()).unwrap();
    assert_eq!(log.len(), 3);
    for row in &log {
        assert_eq!(row.lr, cfg.lr_at(row.epoch));
        assert_eq!(row.w_sem, alpha_schedule(row.epoch).w_sem);
        assert_eq!(row.w_mat, alpha_schedule(row.epoch).w_mat);
        assert!(row.mean_sem.is_finite() && row.mean_mat >= 0.0);
    }
    assert_eq!(log[0].mean_hybrid, log[0].mean_sem);
}

#[test]
fn training_is_deterministic() {
    let corpus = tiny_corpus();
    let data = tiny_data(&corpus);
    let a = train(tiny_model(), &data, tiny_cfg(2)).unwrap();
    let b = train(tiny_model(), &data, tiny_cfg(2)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(render_log(&a.1, false), render_log(&b.1, false));
}

#[test]
fn resume_continues_identically() {
    let corpus = tiny_corpus();
    let data = tiny_data(&corpus);
    let (straight, full_log) = train(tiny_model(), &data, tiny_cfg(10)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.dsfw");
    let (half, _) = train(tiny_model(), &data, tiny_cfg(5)).unwrap();
    checkpoint(&half, 5, &path).unwrap();
    let (model, epoch) = resume(&path, 10).unwrap();
    assert_eq!(epoch, 5);
    let mut t = Trainer::new(model, &data, tiny_cfg(10), epoch).unwrap();
    let rest = t.run(None).unwrap();
    assert_eq!(rest, full_log[5..]);
    assert_eq!(t.into_model(), straight);
}

#[test]
fn resume_at_final_epoch_is_noop() {
    let corpus = tiny_corpus();
    let data = tiny_data(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.dsfw");
    checkpoint(&tiny_model(), 2, &path).unwrap();
    let (model, epoch) = resume(&path, 2).unwrap();
    let mut t = Trainer::new(model.clone(), &data, tiny_cfg(2), epoch).unwrap();
    assert!(t.is_done());
    assert!(t.run(None).unwrap().is_empty());
    assert_eq!(t.into_model(), model);
    assert!(matches!(resume(&path, 1), Err(TrainError::EpochMismatch { found: 2, max: 1 })));
}

#[test]
fn corrupt_checkpoint_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.dsfw");
    checkpoint(&tiny_model(), 1, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(decode_weight_file(&bytes).unwrap().meta.contains_key("epoch"));
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(resume(&path, 5).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(resume(&path, 5).is_err());
    assert!(resume(&dir.path().join("missing"), 5).is_err());
}

#[test]
fn checkpoints_written_periodically() {
    let corpus = tiny_corpus();
    let data = tiny_data(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 1,
        ..tiny_cfg(2)
    };
    let mut t = Trainer::new(tiny_model(), &data, cfg, 0).unwrap();
    t.run(Some(dir.path())).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(names.len() >= 2, "{names:?}");
}

#[test]
fn model_gradients_check_in_both_modes() {
    for mode in [DistanceMode::Sparse, DistanceMode::Dense] {
        let cfg = GradCheckConfig {
            mode,
            per_param: 2,
            ..GradCheckConfig::default()
        };
        let r = grad_check_model(&cfg).unwrap();
        assert!(r.max_rel_error < 1e-3, "{mode}: {}", r.max_rel_error);
        assert!(r.samples > 0);
    }
}

#[test]
fn training_data_excludes_heldout_frames() {
    let corpus = tiny_corpus();
    let data = corpus_training_data(&corpus, &DEFAULT_STATIC, 2, 5, 0).unwrap();
    assert!(data.images.keys().all(|i| !corpus.is_heldout(*i)));
    for t in &data.triplets {
        for id in [t.query, t.positive, t.negative] {
            assert!(data.images.contains_key(&id));
        }
        assert!(corpus.loops.is_loop(t.query, t.positive));
    }
}

#[test]
fn semantic_loss_falls_over_ten_epochs() {
    let corpus = tiny_corpus();
    let data = tiny_data(&corpus);
    let (_, log) = train(tiny_model(), &data, tiny_cfg(10)).unwrap();
    assert!(log[9].mean_sem < log[0].mean_sem, "{} vs {}", log[9].mean_sem, log[0].mean_sem);
}

#[test]
fn missing_image_is_named() {
    let corpus = tiny_corpus();
    let mut data = tiny_data(&corpus);
    let gone = data.triplets[0].negative;
    data.images.remove(&gone);
    match Trainer::new(tiny_model(), &data, tiny_cfg(1), 0) {
        Err(e @ TrainError::MissingImage(id)) => {
            assert_eq!(id, gone);
            assert!(e.to_string().contains(&gone.to_string()));
        }
        other => panic!("expected a missing image, got {:?}", other.err()),
    }
}
