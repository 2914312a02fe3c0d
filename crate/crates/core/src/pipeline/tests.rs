use super::*;
use crate::data::{generate_corpus, CorpusConfig};
use crate::network::NetworkConfig;

fn corpus() -> Corpus {
    generate_corpus(&CorpusConfig {
        n_frames: 40,
        first_pass: 30,
        revisit_from: 5,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn small_cfg(variants: Vec<Variant>) -> PipelineConfig {
    PipelineConfig {
        variants,
        top_k: 60,
        vocab_k: 32,
        exclusion_gap: 5,
        ..PipelineConfig::default()
    }
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("best".parse::<Variant>().is_err());
}

#[test]
fn trad_only_report_has_one_column() {
    let c = corpus();
    let seq = corpus_sequence(&c, "synth", None, &[]).unwrap();
    let report = run_pipeline(&[seq], &small_cfg(vec![Variant::Trad])).unwrap();
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sequence,trad");
    assert!(lines[1].starts_with("synth,"));
    let auc = report.auc("synth", Variant::Trad).unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn missing_activation_skips_variant() {
    let c = corpus();
    let seq = corpus_sequence(&c, "synth", None, &[]).unwrap();
    let report = run_pipeline(&[seq], &small_cfg(Variant::ALL.to_vec())).unwrap();
    assert_eq!(report.auc("synth", Variant::Ours), None);
    assert!(report.auc("synth", Variant::Seman).is_some());
    assert!(report.to_csv().lines().nth(1).unwrap().ends_with(",skipped"));
}

#[test]
fn pipeline_is_deterministic() {
    let c = corpus();
    let model = DsFeat::new(NetworkConfig {
        base_channels: 2,
        ..NetworkConfig::default()
    })
    .unwrap();
    let run = || {
        let seq = corpus_sequence(&c, "synth", Some(&model), &[]).unwrap();
        run_pipeline(&[seq], &small_cfg(Variant::ALL.to_vec())).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a, b);
}

#[test]
fn scores_only_outside_gap() {
    let c = corpus();
    let seq = corpus_sequence(&c, "synth", None, &[]).unwrap();
    let cfg = small_cfg(vec![Variant::Trad]);
    let vocab = sequence_vocabulary(&seq, &cfg).unwrap();
    let VariantOutcome::Done(r) = run_variant(&seq, &vocab, Variant::Trad, &cfg).unwrap() else {
        panic!("trad skipped");
    };
    assert_eq!(r.scores.len(), seq.frames.len());
    assert!(r.scores.iter().all(|s| s.query.abs_diff(s.candidate) > cfg.exclusion_gap));
    // Revisits of places well apart should retrieve their first visit.
    let hits = r
        .scores
        .iter()
        .filter(|s| s.verif_score.is_finite() && seq.loops.is_loop(s.query, s.candidate))
        .count();
    assert!(hits > 0);
}

#[test]
fn empty_sequence_rejected() {
    let c = corpus();
    let seq = Sequence {
        name: "none".into(),
        frames: vec![],
        loops: c.loops.clone(),
    };
    assert!(run_sequence(&seq, &small_cfg(vec![Variant::Trad])).is_err());
}
