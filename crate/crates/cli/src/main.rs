//! `msgbart`: one binary covering the whole experiment loop — corpus
//! generation, training, evaluation, finite-difference gradient
//! verification, and scene-graph inspection.
//!
//! Machine-readable JSON goes to stdout, human progress notes to stderr.
//! Exit codes: 0 success, 1 usage/config error, 2 broken runtime
//! contract (including panics).

use std::collections::BTreeMap;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use msgbart::config::{Precision, RunConfig, WorldConfig};
use msgbart::data::{
    generate_world, load_corpus, object_words, relation_words, save_corpus, split, Corpus,
    Instance, QuestionKind,
};
use msgbart::error::{Error, Result};
use msgbart::metrics::{answer_accuracy, corpus_bleu, normalize, rouge_l, EvalReport};
use msgbart::model::Model;
use msgbart::scenegraph::{build_triplets, node_similarity, rn_transform, embed_rn_nodes};
use msgbart::tensor::{grad_check_sampled, set_precision, GradReport};
use msgbart::train::train;

#[derive(Parser)]
#[command(name = "msgbart", version, about = "Video-grounded dialogue at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides applied on top of the config file,
    /// e.g. --set model.d_model=32 --set train.steps=100.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus: splits, vocabulary, and per-video assets.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated corpus, logging JSON lines per logging step.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory (as written by gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Where the best-dev checkpoint is written.
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
    },
    /// Decode a split with a trained checkpoint and print an EvalReport.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long, value_enum, default_value_t = DecodeMode::Greedy)]
        decode: DecodeMode,
        /// Beam width; the checkpoint's configured width when omitted.
        #[arg(long)]
        beam: Option<usize>,
        /// Length-normalization exponent; the checkpoint's value when omitted.
        #[arg(long)]
        penalty: Option<f64>,
    },
    /// Finite-difference verification of every parameter's gradient.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Step size for the gating run (the sweep always covers
        /// 1e-3, 1e-4, 1e-5).
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
    /// Inspect one video's scene graphs.
    Graph {
        /// Corpus directory holding meta.json and assets/.
        #[arg(long)]
        assets: PathBuf,
        #[arg(long)]
        video_id: String,
        /// Print the relation-node transform of every frame.
        #[arg(long, conflicts_with_all = ["rank", "triplets"])]
        rn: bool,
        /// Rank nodes per frame by propagated question similarity.
        #[arg(long, requires = "question", conflicts_with = "triplets")]
        rank: bool,
        /// Print per-frame triplets (scored when --question is given).
        #[arg(long)]
        triplets: bool,
        #[arg(long)]
        question: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeMode {
    Greedy,
    Beam,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = panic::catch_unwind(move || run(cli.command));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(cause) => {
            let msg = cause
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| cause.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            eprintln!("contract violation: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&load_config(&config)?, &out),
        Command::Train { config, data, out_checkpoint } => {
            cmd_train(&load_config(&config)?, &data, out_checkpoint.as_deref())
        }
        Command::Eval { checkpoint, data, split, decode, beam, penalty } => {
            cmd_eval(&checkpoint, &data, split, decode, beam, penalty)
        }
        Command::Gradcheck { config, eps } => cmd_gradcheck(&load_config(&config)?, eps),
        Command::Graph { assets, video_id, rn, rank, triplets, question } => {
            let mode = match (rn, rank, triplets) {
                (true, false, false) => GraphMode::Rn,
                (false, true, false) => GraphMode::Rank,
                (false, false, true) => GraphMode::Triplets,
                _ => {
                    return Err(Error::Config(
                        "pass exactly one of --rn, --rank, --triplets".into(),
                    ))
                }
            };
            cmd_graph(&assets, &video_id, mode, question.as_deref())
        }
    }
}

/// Loads the config file (or defaults), applies `--set` overrides, lets
/// `MSGBART_MODE` override the configured precision, and installs the
/// arithmetic mode before any tensor work.
fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut value: Value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
    };
    for spec in &args.sets {
        apply_set(&mut value, spec)?;
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
    config.validate()?;

    let mode = match std::env::var("MSGBART_MODE") {
        Ok(v) => Precision::from_env_value(&v)?,
        Err(_) => config.precision,
    };
    set_precision(mode);
    Ok(config)
}

fn apply_set(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key.path=value, got '{spec}'")))?;
    let leaf: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set path '{path}' crosses a non-object")))?
            .entry(part.to_string())
            .or_insert_with(|| json!({}));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("--set path '{path}' crosses a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), leaf);
    Ok(())
}

fn emit(value: &Value) {
    println!("{}", serde_json::to_string(value).expect("report serializes"));
}

// ===================== gen-data =====================

fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let world = generate_world(&config.world)?;
    let corpus = split(world, config.train.split_ratios, config.seed)?;
    save_corpus(&corpus, out)?;

    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in corpus.instances() {
        *kinds.entry(inst.kind.name()).or_insert(0) += 1;
    }
    emit(&json!({
        "out": out.display().to_string(),
        "videos": corpus.assets.len(),
        "vocab_size": corpus.vocab.len(),
        "instances": {
            "train": corpus.train.len(),
            "dev": corpus.dev.len(),
            "test": corpus.test.len(),
        },
        "question_kinds": kinds,
    }));
    Ok(())
}

// ===================== train =====================

/// The corpus must have been generated from the same world block the
/// model is configured with; otherwise vocabulary and features diverge
/// silently. Reports the differing keys.
fn check_world_match(expected: &WorldConfig, found: &WorldConfig, what: &str) -> Result<()> {
    if expected == found {
        return Ok(());
    }
    let a = serde_json::to_value(expected).expect("world serializes");
    let b = serde_json::to_value(found).expect("world serializes");
    let diff: Vec<String> = a
        .as_object()
        .unwrap()
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("world.{k} ({} vs {})", v, b.get(k).unwrap_or(&Value::Null)))
        .collect();
    Err(Error::Config(format!("{what}: differing keys: {}", diff.join(", "))))
}

fn cmd_train(config: &RunConfig, data: &Path, out_checkpoint: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(data)?;
    check_world_match(&config.world, &corpus.world, "config does not match corpus")?;
    let model = Model::init(config)?;
    eprintln!(
        "training: {} parameters, {} train instances, {} steps",
        model.ps.total_params(),
        corpus.train.len(),
        config.train.steps
    );
    let outcome = train(&model, &corpus, out_checkpoint, |line| {
        println!("{}", serde_json::to_string(line).expect("log line serializes"));
    })?;
    emit(&serde_json::to_value(&outcome)?);
    Ok(())
}

// ===================== eval =====================

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: SplitName,
    decode: DecodeMode,
    beam: Option<usize>,
    penalty: Option<f64>,
) -> Result<()> {
    let model = Model::load_checkpoint(checkpoint)?;
    let corpus = load_corpus(data)?;
    check_world_match(
        &model.config.world,
        &corpus.world,
        "checkpoint does not match corpus",
    )?;

    let instances: &[Instance] = match split {
        SplitName::Train => &corpus.train,
        SplitName::Dev => &corpus.dev,
        SplitName::Test => &corpus.test,
    };
    if instances.is_empty() {
        return Err(Error::Validation(format!("split '{}' is empty", split.as_str())));
    }

    let m = &model.config.model;
    let beam = beam.unwrap_or(m.beam_width);
    let penalty = penalty.unwrap_or(m.length_penalty);
    if matches!(decode, DecodeMode::Beam) && beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }

    let mut predictions = Vec::with_capacity(instances.len());
    let mut references = Vec::with_capacity(instances.len());
    let mut kinds: Vec<QuestionKind> = Vec::with_capacity(instances.len());
    for inst in instances {
        let assets = &corpus.assets[&inst.video_id];
        let ids = match decode {
            DecodeMode::Greedy => model.greedy_decode(inst, assets, m.max_decode_len)?,
            DecodeMode::Beam => model.beam_decode(
                inst,
                assets,
                beam,
                m.max_decode_len,
                penalty,
                m.length_norm,
            )?,
        };
        predictions.push(normalize(&model.vocab.detokenize(&ids)));
        references.push(normalize(&inst.answer));
        kinds.push(inst.kind);
    }

    let bleu = corpus_bleu(&predictions, &references, 4)?;
    let report = EvalReport {
        split: split.as_str().to_string(),
        instances: instances.len(),
        accuracy: answer_accuracy(&predictions, &references, &kinds)?,
        bleu: bleu.scores,
        bleu_smoothed: bleu.smoothed,
        rouge_l: rouge_l(&predictions, &references)?,
    };
    emit(&serde_json::to_value(&report)?);
    Ok(())
}

// ===================== gradcheck =====================

/// Module key of a parameter: the first two dotted components
/// (`lm.encoder`, `gvp.gat`, ...).
fn module_of(name: &str) -> String {
    name.split('.').take(2).collect::<Vec<_>>().join(".")
}

fn module_maxima(report: &GradReport) -> BTreeMap<String, f64> {
    let mut modules: BTreeMap<String, f64> = BTreeMap::new();
    for (name, err) in &report.per_param {
        let m = modules.entry(module_of(name)).or_insert(0.0);
        if *err > *m {
            *m = *err;
        }
    }
    modules
}

/// Verifies analytic gradients against central finite differences on a
/// deliberately tiny world (2 frames per video) so the full sweep stays
/// under the time budget. Every parameter is numerically live in the
/// verification loss; the check samples coordinates of each.
fn cmd_gradcheck(config: &RunConfig, eps: f64) -> Result<()> {
    if let Ok(v) = std::env::var("MSGBART_MODE") {
        if Precision::from_env_value(&v)? == Precision::F32 {
            return Err(Error::Config(
                "gradcheck requires 64-bit arithmetic; unset MSGBART_MODE=f32".into(),
            ));
        }
    }
    if config.precision == Precision::F32 {
        eprintln!("gradcheck forces 64-bit mode (config requests f32)");
    }
    set_precision(Precision::F64);

    let mut cfg = config.clone();
    cfg.world.videos = 2;
    cfg.world.frames_per_video = 2;
    cfg.world.window_ratio = 2;
    cfg.world.dialogue_turns = 2;
    let world = generate_world(&cfg.world)?;
    let instance = world.instances[0].clone();
    let assets = world.assets[&instance.video_id].clone();
    // Generated frames always carry relations, which leaves the two
    // empty-graph embeddings out of the loss; a hand-built relation-free
    // probe video brings them in.
    let (bare_instance, bare_assets) = relation_free_probe(&cfg.world);
    let model = Model::init(&cfg)?;

    let check = |eps: f64| {
        grad_check_sampled(
            |_| {
                let a = model.verification_loss(&instance, &assets).expect("loss evaluates");
                let b = model
                    .verification_loss(&bare_instance, &bare_assets)
                    .expect("probe loss evaluates");
                a.add(&b)
            },
            &model.ps,
            eps,
            2,
            cfg.seed,
        )
    };

    eprintln!("gradcheck: {} parameters, eps {eps}", model.ps.total_params());
    let gate = check(eps);
    let sweep: Vec<Value> = [1e-3, 1e-4, 1e-5]
        .iter()
        .map(|e| {
            let r = check(*e);
            json!({"eps": e, "max_rel_error": r.max_rel_error, "worst_param": r.worst_param})
        })
        .collect();

    let threshold = 1e-3;
    emit(&json!({
        "eps": eps,
        "threshold": threshold,
        "max_rel_error": gate.max_rel_error,
        "worst_param": gate.worst_param,
        "modules": module_maxima(&gate),
        "eps_sweep": sweep,
        "pass": gate.passes(threshold),
    }));
    if !gate.passes(threshold) {
        return Err(Error::Contract(format!(
            "gradient check failed: {} has relative error {:.3e} (threshold {threshold:.0e})",
            gate.worst_param, gate.max_rel_error
        )));
    }
    Ok(())
}

/// A video of completely empty frames plus a question about it: the only
/// route through the empty-graph embeddings (a frame with no nodes takes
/// the node-side stand-in, one with no relations the triplet-side one).
fn relation_free_probe(world: &WorldConfig) -> (Instance, msgbart::data::VideoAssets) {
    use msgbart::data::FeatureTrack;
    use msgbart::scenegraph::{FrameGraph, SceneGraph};

    let t_f = world.frames_per_video;
    let t_c = world.coarse_windows();
    let d_v = world.feature_width;
    let frames = (0..t_f).map(|_| FrameGraph::default()).collect();
    let features = FeatureTrack {
        t_c,
        t_f,
        d_v,
        coarse: vec![0.25; t_c * d_v],
        fine: vec![0.5; t_f * d_v],
    };
    let word = object_words(world)[0];
    let instance = Instance {
        video_id: "probe_bare".into(),
        history: Vec::new(),
        question: format!("is {word} in the video ?"),
        answer: "yes".into(),
        kind: QuestionKind::FeatureDependent,
    };
    (instance, msgbart::data::VideoAssets { graph: SceneGraph { frames }, features })
}

// ===================== graph =====================

enum GraphMode {
    Rn,
    Rank,
    Triplets,
}

/// Inspection model: untrained weights seeded from the corpus world, so
/// rankings are reproducible from the assets directory alone.
fn inspection_model(corpus: &Corpus) -> Result<Model> {
    let mut cfg = RunConfig::default();
    cfg.seed = corpus.world.seed;
    cfg.world = corpus.world.clone();
    Model::init(&cfg)
}

fn cmd_graph(assets_dir: &Path, video_id: &str, mode: GraphMode, question: Option<&str>) -> Result<()> {
    let corpus = load_corpus(assets_dir)?;
    let assets = corpus.assets.get(video_id).ok_or_else(|| {
        Error::Validation(format!(
            "unknown video id '{video_id}' ({} videos in {})",
            corpus.assets.len(),
            assets_dir.display()
        ))
    })?;
    let obj_words = object_words(&corpus.world);
    let rel_words = relation_words(&corpus.world);

    let q_vec = |question: &str| -> Result<_> {
        let model = inspection_model(&corpus)?;
        let probe = Instance {
            video_id: video_id.to_string(),
            history: Vec::new(),
            question: question.to_string(),
            answer: String::new(),
            kind: QuestionKind::GraphDependent,
        };
        let q = model.question_vector(&probe)?;
        Ok((model, q))
    };

    let frames: Vec<Value> = match mode {
        GraphMode::Rn => assets
            .graph
            .frames
            .iter()
            .map(|frame| {
                let rn = rn_transform(frame)?;
                let labels: Vec<&str> = rn
                    .object_labels
                    .iter()
                    .map(|l| obj_words[*l])
                    .chain(rn.relation_labels.iter().map(|l| rel_words[*l]))
                    .collect();
                Ok(json!({
                    "objects": rn.n_objects(),
                    "relations": rn.n_relations(),
                    "nodes": rn.node_count(),
                    "node_labels": labels,
                    "edges": rn.edges,
                }))
            })
            .collect::<Result<_>>()?,
        GraphMode::Rank => {
            let (model, q) = q_vec(question.expect("clap enforces --question"))?;
            let (obj_table, rel_table) = model.label_tables();
            assets
                .graph
                .frames
                .iter()
                .map(|frame| {
                    let rn = rn_transform(frame)?;
                    if rn.node_count() == 0 {
                        return Ok(json!({"ranking": []}));
                    }
                    let feats = embed_rn_nodes(&rn, &obj_table, &rel_table);
                    let scores = node_similarity(&feats, &q, &rn).to_vec();
                    let mut order: Vec<usize> = (0..scores.len()).collect();
                    order.sort_by(|a, b| {
                        scores[*b].partial_cmp(&scores[*a]).unwrap().then(a.cmp(b))
                    });
                    let ranking: Vec<Value> = order
                        .iter()
                        .map(|i| {
                            let label = if *i < rn.n_objects() {
                                obj_words[rn.object_labels[*i]]
                            } else {
                                rel_words[rn.relation_labels[*i - rn.n_objects()]]
                            };
                            json!({"node": i, "label": label, "score": scores[*i]})
                        })
                        .collect();
                    Ok(json!({"ranking": ranking}))
                })
                .collect::<Result<_>>()?
        }
        GraphMode::Triplets => {
            let scored = match question {
                Some(q) => {
                    let (model, qv) = q_vec(q)?;
                    Some((model, qv))
                }
                None => None,
            };
            assets
                .graph
                .frames
                .iter()
                .map(|frame| {
                    let rn = rn_transform(frame)?;
                    let rels = rn.recover_relations();
                    let scores: Option<Vec<f64>> = scored.as_ref().and_then(|(model, qv)| {
                        let (obj_table, rel_table) = model.label_tables();
                        let (w, b) = model.triplet_projection();
                        build_triplets(&rn, &obj_table, &rel_table, &w, &b)
                            .map(|t| msgbart::scenegraph::triplet_similarity(&t, qv).to_vec())
                    });
                    let triplets: Vec<Value> = rels
                        .iter()
                        .enumerate()
                        .map(|(i, (s, r, d))| {
                            let mut t = json!({
                                "src": obj_words[rn.object_labels[*s]],
                                "rel": rel_words[*r],
                                "dst": obj_words[rn.object_labels[*d]],
                            });
                            if let Some(sc) = &scores {
                                t["s_t"] = json!(sc[i]);
                            }
                            t
                        })
                        .collect();
                    Ok(json!({"count": rels.len(), "triplets": triplets}))
                })
                .collect::<Result<_>>()?
        }
    };
    emit(&json!({"video_id": video_id, "frames": frames}));
    Ok(())
}
