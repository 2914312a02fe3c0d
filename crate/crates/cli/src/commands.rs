use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dsfeat::data::{
    generate_corpus, read_activation, read_descriptors, read_keypoints, read_loops, read_rgb,
    read_stability_map, read_trajectory, stability_from_labels, write_activation, write_descriptors,
    write_keypoints, CorpusConfig, LoopGroundTruth, DEFAULT_STATIC,
};
use dsfeat::evaluation::{auc, offset_deviation, pr_curve_with_total, rotation_error};
use dsfeat::losses::{DistanceMode, MatchingConfig};
use dsfeat::network::{DsFeat, NetworkConfig};
use dsfeat::pipeline::{run_pipeline, select_features, FrameInput, PipelineConfig, Sequence, Variant, VariantOutcome};
use dsfeat::retrieval::{
    build_vocabulary_sampled, label_scores, quantize, read_scores, verify_loop, write_scores, BowIndex, LoopScore,
    VerifyConfig, Vocabulary,
};
use dsfeat::selection::{FeatureSet, Selection};
use dsfeat::trainer::{checkpoint, grad_check_model, render_log, resume, GradCheckConfig, TrainConfig, Trainer};

use crate::args::*;
use crate::corpus_dir::{frame_file, write_corpus, CorpusDir};
use crate::CliError;

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Select(a) => select(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Verify(a) => verify(a),
        Command::Pr(a) => pr(a),
        Command::TrajEval(a) => traj_eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

impl StaticArg {
    fn names(&self) -> Vec<String> {
        match &self.static_categories {
            Some(list) => list
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            None => DEFAULT_STATIC.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn gen_synth(a: GenSynthArgs) -> Result<(), CliError> {
    let corpus = generate_corpus(&CorpusConfig {
        seed: a.seed,
        n_frames: a.frames,
        height: a.height,
        width: a.width,
        first_pass: a.first_pass,
        revisit_from: a.revisit_from,
        heldout_every: a.heldout_every,
        label_recall: a.label_recall,
        ..CorpusConfig::default()
    })?;
    write_corpus(&a.out, &corpus)?;
    log::info!("wrote {} frames to {}", corpus.frames.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let corpus = CorpusDir::open(&a.corpus)?;
    let names = a.stat.names();
    let data = corpus.training_data(&as_strs(&names), a.negatives, a.gap, a.seed)?;
    log::info!("{} triplets over {} images", data.triplets.len(), data.images.len());
    let (model, start) = match &a.resume {
        Some(path) => resume(path, a.epochs)?,
        None => (
            DsFeat::new(NetworkConfig {
                base_channels: a.base_channels,
                seed: a.net_seed,
                ..NetworkConfig::default()
            })?,
            0,
        ),
    };
    let cfg = TrainConfig {
        max_epochs: a.epochs,
        lr: a.lr,
        matching: MatchingConfig {
            mode: a.mode,
            margin: a.margin,
            unverified_distance: a.unverified_distance,
        },
        policy: a.policy,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        top_k: a.top_k,
        ..TrainConfig::default()
    };
    if let Some(dir) = &a.checkpoint_dir {
        create_dir(dir)?;
    }
    let mut trainer = Trainer::new(model, &data, cfg, start)?;
    let rows = trainer.run(a.checkpoint_dir.as_deref())?;
    for r in &rows {
        log::info!("epoch {} hybrid {:.6}", r.epoch, r.mean_hybrid);
    }
    if let Some(path) = &a.log {
        write_file(path, render_log(&rows, true).as_bytes())?;
    }
    checkpoint(trainer.model(), trainer.epoch(), &a.out)?;
    Ok(())
}

fn infer(a: InferArgs) -> Result<(), CliError> {
    let model = DsFeat::load_weights(&a.weights)?;
    match (&a.image, &a.out, &a.corpus, &a.out_dir) {
        (Some(image), Some(out), None, None) => {
            let act = model.forward(&read_rgb(image)?.to_tensor())?;
            write_activation(out, &act)?;
        }
        (None, None, Some(corpus), Some(out_dir)) => {
            let corpus = CorpusDir::open(corpus)?;
            create_dir(out_dir)?;
            for id in 0..corpus.frames {
                let act = model.forward(&corpus.image(id)?.to_tensor())?;
                write_activation(&frame_file(out_dir, id, "dsfa"), &act)?;
            }
        }
        _ => return Err(CliError::Usage("infer needs --image with --out, or --corpus with --out-dir".into())),
    }
    Ok(())
}

fn select(a: SelectArgs) -> Result<(), CliError> {
    let kps = read_keypoints(&a.keypoints)?;
    let desc = read_descriptors(&a.descriptors)?;
    let names = a.stat.names();
    let stability = match (&a.stability, &a.labels, &a.categories) {
        (Some(path), _, _) => Some(read_stability_map(path)?),
        (None, Some(labels), Some(table)) => {
            let lm = dsfeat::data::read_label_map(labels, table)?;
            Some(stability_from_labels(&lm, &as_strs(&names))?)
        }
        _ => None,
    };
    let activation = a.activation.as_deref().map(read_activation).transpose()?;
    let extent = stability
        .as_ref()
        .map(|s| (s.width(), s.height()))
        .or(activation.as_ref().map(|m| (m.width(), m.height())))
        .or(a.width.zip(a.height));
    let Some((width, height)) = extent else {
        return Err(CliError::Usage("image size unknown: give --width and --height or a map".into()));
    };
    let frame = FrameInput {
        id: 0,
        features: FeatureSet::new(width, height, kps, desc)?,
        stability,
        activation,
    };
    let Some(sel) = select_features(&frame, a.method, a.k)? else {
        let need = if a.method == Variant::Seman { "--stability or --labels" } else { "--activation" };
        return Err(CliError::Usage(format!("method {} needs {need}", a.method)));
    };
    write_keypoints(&a.out_keypoints, sel.features.keypoints())?;
    write_descriptors(&a.out_descriptors, sel.features.descriptors())?;
    Ok(())
}

fn build_vocab(a: BuildVocabArgs) -> Result<(), CliError> {
    let corpus = CorpusDir::open(&a.corpus)?;
    let feats = (0..corpus.frames)
        .map(|id| corpus.features(id))
        .collect::<Result<Vec<_>, _>>()?;
    let descs: Vec<_> = feats.iter().map(|f| f.descriptors()).collect();
    build_vocabulary_sampled(&descs, a.k, a.seed, a.rows)?.save(&a.out)?;
    Ok(())
}

/// The corpus as pipeline input plus every frame's selection for `m`.
fn selections(corpus: &CorpusDir, m: &MethodArgs) -> Result<(Sequence, Vec<Selection>), CliError> {
    let names = m.stat.names();
    let seq = corpus.sequence(&as_strs(&names), None, m.activations.as_deref())?;
    let mut out = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        match select_features(f, m.method, m.top_k)? {
            Some(s) => out.push(s),
            None => {
                return Err(CliError::Data(format!(
                    "frame {} has no activation map; pass --activations",
                    f.id
                )))
            }
        }
    }
    Ok((seq, out))
}

const CANDIDATE_HEADER: &str = "query_id,candidate_id,similarity";

fn retrieve(a: RetrieveArgs) -> Result<(), CliError> {
    let corpus = CorpusDir::open(&a.corpus)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let (seq, sels) = selections(&corpus, &a.method)?;
    let mut index = BowIndex::new();
    let mut bows = Vec::with_capacity(sels.len());
    for (f, s) in seq.frames.iter().zip(&sels) {
        let b = quantize(&s.features, &vocab)?;
        index.insert(f.id, b.clone());
        bows.push(b);
    }
    let mut out = format!("{CANDIDATE_HEADER}\n");
    for (f, b) in seq.frames.iter().zip(&bows) {
        for (cand, sim) in index.query(f.id, b, a.top_n, a.gap) {
            writeln!(out, "{},{cand},{sim}", f.id).expect("string write");
        }
    }
    write_file(&a.out, out.as_bytes())
}

fn read_candidates(path: &Path) -> Result<Vec<(usize, usize, f64)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == CANDIDATE_HEADER) {
            continue;
        }
        let bad = || CliError::Data(format!("{}:{}: expected query_id,candidate_id,similarity", path.display(), n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        out.push((
            f[0].trim().parse().map_err(|_| bad())?,
            f[1].trim().parse().map_err(|_| bad())?,
            f[2].trim().parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

fn verify(a: VerifyArgs) -> Result<(), CliError> {
    let corpus = CorpusDir::open(&a.corpus)?;
    let (seq, sels) = selections(&corpus, &a.method)?;
    let mut rows = Vec::new();
    for (q, c, similarity) in read_candidates(&a.candidates)? {
        if q >= sels.len() || c >= sels.len() {
            return Err(CliError::Data(format!(
                "{}: frame id out of range ({q}, {c})",
                a.candidates.display()
            )));
        }
        let mut cfg = VerifyConfig {
            min_inliers: a.min_inliers,
            ..VerifyConfig::default()
        };
        cfg.ransac.seed = a.seed ^ q as u64;
        let act = match a.method.method {
            Variant::Ours => seq.frames[q].activation.as_ref(),
            _ => None,
        };
        let v = verify_loop(&sels[q].features, &sels[c].features, act, &cfg)?;
        rows.push(LoopScore {
            query: q,
            candidate: c,
            similarity,
            verif_score: v.score,
            inliers: v.inliers,
        });
    }
    write_scores(&a.out, &rows)?;
    Ok(())
}

fn pr(a: PrArgs) -> Result<(), CliError> {
    let rows = read_scores(&a.scores)?;
    let pairs = read_loops(&a.gt)?;
    let len = pairs
        .iter()
        .flat_map(|&(x, y)| [x, y])
        .chain(rows.iter().flat_map(|r| [r.query, r.candidate]))
        .max()
        .map_or(0, |m| m + 1);
    let gt = LoopGroundTruth::new(pairs, len)?;
    let (labeled, events) = label_scores(&rows, &gt);
    let curve = pr_curve_with_total(&labeled, events)?;
    let area = if curve.len() == 1 {
        dsfeat::evaluation::curve_area(&curve)
    } else {
        auc(&curve)?
    };
    let mut out = String::from("threshold,precision,recall\n");
    for p in &curve {
        writeln!(out, "{},{:.6},{:.6}", p.threshold, p.precision, p.recall).expect("string write");
    }
    writeln!(out, "auc={area:.6}").expect("string write");
    write_file(&a.out, out.as_bytes())?;
    println!("auc={area:.6}");
    Ok(())
}

fn traj_eval(a: TrajEvalArgs) -> Result<(), CliError> {
    let est = read_trajectory(&a.est)?;
    let gt = read_trajectory(&a.gt)?;
    let rot = rotation_error(&est, &gt, a.step)?;
    let off = offset_deviation(&est, &gt)?;
    let text = format!(
        "frames={}\nstep_m={}\nrotation_error_deg_per_m={rot:.9}\noffset_deviation_percent={off:.9}\n",
        est.len(),
        a.step
    );
    match &a.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn grad_check(a: GradCheckArgs) -> Result<(), CliError> {
    let modes = match a.mode.as_str() {
        "both" => vec![DistanceMode::Sparse, DistanceMode::Dense],
        other => vec![other.parse::<DistanceMode>().map_err(CliError::Usage)?],
    };
    let mut worst = 0.0f64;
    for mode in modes {
        for seed in a.seed..a.seed + a.seeds {
            let r = grad_check_model(&GradCheckConfig {
                network: NetworkConfig {
                    base_channels: a.base_channels,
                    ..NetworkConfig::default()
                },
                height: a.size,
                width: a.size,
                mode,
                eps: a.eps,
                per_param: a.per_param,
                seed,
                ..GradCheckConfig::default()
            })?;
            println!(
                "mode={mode} seed={seed} max_rel_error={:.3e} samples={} straddled={}",
                r.max_rel_error, r.samples, r.straddled
            );
            worst = worst.max(r.max_rel_error);
        }
    }
    if worst >= a.tolerance {
        return Err(CliError::Data(format!(
            "gradient check failed: max relative error {worst:.3e} >= {:e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> Result<(), CliError> {
    let act = read_activation(&a.activation)?;
    write_file(&a.out, &dsfeat::data::encode_heatmap(&act))
}

fn pipeline(a: PipelineArgs) -> Result<(), CliError> {
    let variants = a
        .variants
        .split(',')
        .map(|v| v.parse::<Variant>().map_err(CliError::Usage))
        .collect::<Result<Vec<_>, _>>()?;
    if a.activations.is_some() && a.corpus.len() > 1 {
        return Err(CliError::Usage("--activations applies to a single corpus".into()));
    }
    let mut cfg = PipelineConfig {
        variants,
        top_k: a.top_k,
        vocab_k: a.vocab_k,
        vocab_seed: a.vocab_seed,
        vocab_rows: a.vocab_rows,
        exclusion_gap: a.gap,
        ..PipelineConfig::default()
    };
    cfg.verify.min_inliers = a.min_inliers;
    let model = a.weights.as_deref().map(DsFeat::load_weights).transpose()?;
    let names = a.stat.names();
    let mut seqs = Vec::with_capacity(a.corpus.len());
    for dir in &a.corpus {
        let corpus = CorpusDir::open(dir)?;
        seqs.push(corpus.sequence(&as_strs(&names), model.as_ref(), a.activations.as_deref())?);
    }
    let report = run_pipeline(&seqs, &cfg)?;
    let csv = report.to_csv();
    write_file(&a.out, csv.as_bytes())?;
    if let Some(dir) = &a.scores_dir {
        create_dir(dir)?;
        for seq in &report.sequences {
            for o in &seq.outcomes {
                if let VariantOutcome::Done(r) = o {
                    write_scores(&dir.join(format!("{}.{}.csv", seq.name, r.variant)), &r.scores)?;
                }
            }
        }
    }
    print!("{csv}");
    Ok(())
}
