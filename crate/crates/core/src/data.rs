//! Synthetic video-world generator and corpus I/O.
//!
//! Each video is a short scene-graph sequence plus a two-granularity
//! feature track; dialogues are templated questions whose answers are
//! derivable from the graph, the features, or the dialogue history. The
//! load-bearing property is that features are relation-blind: the frame
//! feature function sees the frame's object-label set and nothing else
//! ([`frame_feature_base`] takes no relation argument), so relation
//! questions are answerable only through the graph pathway.
//!
//! Feature vectors are split by convention into a visual half and an
//! audio half (`d_v/2` each); both halves use the same summed-label
//! construction, so the split is layout only.
//!
//! All randomness is ChaCha8: one stream per video derived from the
//! world seed, so generation is a pure function of [`WorldConfig`] and
//! parallelizable across videos.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::lm::Vocab;
use crate::scenegraph::{FrameGraph, Relation, RelationClass, SceneGraph, SceneObject};
use crate::tensor::{normal_vec, Tensor};

pub const OBJECT_WORDS: [&str; 24] = [
    "cat", "dog", "ball", "cup", "book", "chair", "table", "lamp", "phone", "plant", "shoe",
    "box", "bird", "fish", "tree", "door", "clock", "bag", "hat", "key", "pen", "fork", "spoon",
    "plate",
];

pub const SPATIAL_WORDS: [&str; 8] =
    ["above", "below", "beside", "behind", "near", "inside", "under", "over"];
pub const CONTACT_WORDS: [&str; 8] =
    ["holding", "touching", "carrying", "wearing", "pushing", "lifting", "dropping", "hitting"];
pub const ATTENTION_WORDS: [&str; 8] = [
    "watching", "facing", "reading", "chasing", "guarding", "following", "avoiding", "observing",
];

const TEMPLATE_WORDS: [&str; 11] =
    ["what", "is", "was", "in", "the", "video", "previous", "answer", "yes", "no", "?"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    GraphDependent,
    FeatureDependent,
    HistoryDependent,
}

impl QuestionKind {
    /// The serialized name, for report keys and log lines.
    pub fn name(self) -> &'static str {
        match self {
            QuestionKind::GraphDependent => "graph_dependent",
            QuestionKind::FeatureDependent => "feature_dependent",
            QuestionKind::HistoryDependent => "history_dependent",
        }
    }
}

/// One dialogue turn: the question, its gold answer, and the turns that
/// came before it within the same video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub video_id: String,
    pub history: Vec<(String, String)>,
    pub question: String,
    pub answer: String,
    pub kind: QuestionKind,
}

/// Coarse and fine feature rows for one video, stored at 32-bit
/// precision (their on-disk format). Row-major: `coarse` is
/// `[t_c x d_v]`, `fine` is `[t_f x d_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub t_c: usize,
    pub t_f: usize,
    pub d_v: usize,
    pub coarse: Vec<f32>,
    pub fine: Vec<f32>,
}

impl FeatureTrack {
    pub fn coarse_tensor(&self) -> Tensor {
        Tensor::constant(self.coarse.iter().map(|v| *v as f64).collect(), &[self.t_c, self.d_v])
    }

    pub fn fine_tensor(&self) -> Tensor {
        Tensor::constant(self.fine.iter().map(|v| *v as f64).collect(), &[self.t_f, self.d_v])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAssets {
    pub graph: SceneGraph,
    pub features: FeatureTrack,
}

/// Generation output: every video's assets plus the full instance list,
/// before any split.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub assets: BTreeMap<String, VideoAssets>,
    pub instances: Vec<Instance>,
}

/// A split corpus as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub world: WorldConfig,
    pub vocab: Vocab,
    pub assets: BTreeMap<String, VideoAssets>,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Corpus {
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(self.dev.iter()).chain(self.test.iter())
    }
}

/// The first `object_vocab` object words.
pub fn object_words(cfg: &WorldConfig) -> Vec<&'static str> {
    OBJECT_WORDS[..cfg.object_vocab].to_vec()
}

/// Relation words in global index order: `relations_per_class` spatial
/// words, then contact, then attention. `rel / relations_per_class`
/// recovers the class index.
pub fn relation_words(cfg: &WorldConfig) -> Vec<&'static str> {
    let k = cfg.relations_per_class;
    let mut out = Vec::with_capacity(3 * k);
    out.extend_from_slice(&SPATIAL_WORDS[..k]);
    out.extend_from_slice(&CONTACT_WORDS[..k]);
    out.extend_from_slice(&ATTENTION_WORDS[..k]);
    out
}

pub fn relation_class_of(rel: usize, relations_per_class: usize) -> RelationClass {
    RelationClass::ALL[rel / relations_per_class]
}

/// Every word the generator can emit: object labels, relation labels,
/// then question-template words.
pub fn build_vocab(cfg: &WorldConfig) -> Vocab {
    let mut words: Vec<String> = object_words(cfg).iter().map(|w| w.to_string()).collect();
    words.extend(relation_words(cfg).iter().map(|w| w.to_string()));
    words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
    Vocab::new(words)
}

fn check_lexicon(cfg: &WorldConfig) -> Result<()> {
    if cfg.object_vocab > OBJECT_WORDS.len() {
        return Err(Error::Config(format!(
            "world.object_vocab {} exceeds the {} available object words",
            cfg.object_vocab,
            OBJECT_WORDS.len()
        )));
    }
    if cfg.relations_per_class > SPATIAL_WORDS.len() {
        return Err(Error::Config(format!(
            "world.relations_per_class {} exceeds the {} available words per class",
            cfg.relations_per_class,
            SPATIAL_WORDS.len()
        )));
    }
    Ok(())
}

/// Fixed per-label feature rows, `object_vocab x d_v`, drawn once per
/// world from stream 0 of the world seed.
pub fn label_feature_table(cfg: &WorldConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    (0..cfg.object_vocab).map(|_| normal_vec(&mut rng, cfg.feature_width, 1.0)).collect()
}

/// Noise-free frame feature: the sum of the table rows of the labels
/// present. The signature is the relation-blindness guarantee — there is
/// no relation input to be sensitive to.
pub fn frame_feature_base(table: &[Vec<f64>], labels: &BTreeSet<usize>) -> Vec<f64> {
    let d = table[0].len();
    let mut out = vec![0.0; d];
    for l in labels {
        for (o, v) in out.iter_mut().zip(&table[*l]) {
            *o += v;
        }
    }
    out
}

pub fn video_id(index: usize) -> String {
    format!("vid_{index:04}")
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, from: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..from).collect();
    for k in 0..n {
        let j = rng.random_range(k..from);
        pool.swap(k, j);
    }
    let mut picked = pool[..n].to_vec();
    picked.sort_unstable();
    picked
}

fn generate_frame(rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> FrameGraph {
    let n_obj = rng.random_range(2..=4.min(cfg.object_vocab));
    let labels = sample_distinct(rng, n_obj, cfg.object_vocab);
    let objects: Vec<SceneObject> =
        labels.iter().enumerate().map(|(id, label)| SceneObject { id, label: *label }).collect();

    let n_rel = rng.random_range(1..=3);
    let mut seen = BTreeSet::new();
    let mut relations = Vec::new();
    for _ in 0..n_rel {
        for _attempt in 0..8 {
            let src = rng.random_range(0..n_obj);
            let dst = (src + 1 + rng.random_range(0..n_obj - 1)) % n_obj;
            let class_idx = rng.random_range(0..RelationClass::ALL.len());
            let rel = class_idx * cfg.relations_per_class
                + rng.random_range(0..cfg.relations_per_class);
            if seen.insert((src, rel, dst)) {
                relations.push(Relation { src, rel, dst, class: RelationClass::ALL[class_idx] });
                break;
            }
        }
    }
    FrameGraph { objects, relations }
}

fn features_for(
    rng: &mut ChaCha8Rng,
    cfg: &WorldConfig,
    table: &[Vec<f64>],
    graph: &SceneGraph,
) -> FeatureTrack {
    let d = cfg.feature_width;
    let mut fine = Vec::with_capacity(cfg.frames_per_video * d);
    for frame in &graph.frames {
        let labels: BTreeSet<usize> = frame.objects.iter().map(|o| o.label).collect();
        let base = frame_feature_base(table, &labels);
        let noise = normal_vec(rng, d, cfg.feature_noise);
        fine.extend(base.iter().zip(&noise).map(|(b, n)| (b + n) as f32));
    }
    let w = cfg.window_ratio;
    let t_c = cfg.coarse_windows();
    let mut coarse = Vec::with_capacity(t_c * d);
    for k in 0..t_c {
        for j in 0..d {
            let sum: f64 = (0..w).map(|f| fine[(k * w + f) * d + j] as f64).sum();
            coarse.push((sum / w as f64) as f32);
        }
    }
    FeatureTrack { t_c, t_f: cfg.frames_per_video, d_v: d, coarse, fine }
}

/// Relation-question candidates: (src label, rel) pairs whose target is
/// the same in every frame where the pair occurs, so the answer is
/// well-defined at the video level.
fn unambiguous_pairs(graph: &SceneGraph) -> Vec<(usize, usize, usize)> {
    let mut targets: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for frame in &graph.frames {
        for r in &frame.relations {
            let src_label = frame.objects[r.src].label;
            let dst_label = frame.objects[r.dst].label;
            targets.entry((src_label, r.rel)).or_default().insert(dst_label);
        }
    }
    targets
        .into_iter()
        .filter(|(_, dsts)| dsts.len() == 1)
        .map(|((src, rel), dsts)| (src, rel, *dsts.iter().next().unwrap()))
        .collect()
}

fn generate_dialogue(
    rng: &mut ChaCha8Rng,
    cfg: &WorldConfig,
    id: &str,
    graph: &SceneGraph,
) -> Vec<Instance> {
    let objects = object_words(cfg);
    let relations = relation_words(cfg);
    let pairs = unambiguous_pairs(graph);
    let present: Vec<usize> = {
        let set: BTreeSet<usize> =
            graph.frames.iter().flat_map(|f| f.objects.iter().map(|o| o.label)).collect();
        set.into_iter().collect()
    };
    let absent: Vec<usize> = (0..cfg.object_vocab).filter(|l| !present.contains(l)).collect();

    let mut turns: Vec<(String, String)> = Vec::new();
    let mut out = Vec::new();
    for t in 0..cfg.dialogue_turns {
        let n_kinds = if t == 0 { 2 } else { 3 };
        let mut kind = match rng.random_range(0..n_kinds) {
            0 => QuestionKind::GraphDependent,
            1 => QuestionKind::FeatureDependent,
            _ => QuestionKind::HistoryDependent,
        };
        if kind == QuestionKind::GraphDependent && pairs.is_empty() {
            kind = QuestionKind::FeatureDependent;
        }
        let (question, answer) = match kind {
            QuestionKind::GraphDependent => {
                let (src, rel, dst) = pairs[rng.random_range(0..pairs.len())];
                (
                    format!("what is {} {} ?", objects[src], relations[rel]),
                    objects[dst].to_string(),
                )
            }
            QuestionKind::FeatureDependent => {
                let ask_present = absent.is_empty() || rng.random_bool(0.5);
                let (pool, answer) =
                    if ask_present { (&present, "yes") } else { (&absent, "no") };
                let label = pool[rng.random_range(0..pool.len())];
                (format!("is {} in the video ?", objects[label]), answer.to_string())
            }
            QuestionKind::HistoryDependent => {
                ("what was the previous answer ?".to_string(), turns[t - 1].1.clone())
            }
        };
        out.push(Instance {
            video_id: id.to_string(),
            history: turns.clone(),
            question: question.clone(),
            answer: answer.clone(),
            kind,
        });
        turns.push((question, answer));
    }
    out
}

/// One video's assets and dialogue, from stream `index + 1` of the world
/// seed (stream 0 feeds the label table).
pub fn generate_video(
    cfg: &WorldConfig,
    table: &[Vec<f64>],
    index: usize,
) -> (SceneGraph, FeatureTrack, Vec<Instance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let graph = SceneGraph {
        frames: (0..cfg.frames_per_video).map(|_| generate_frame(&mut rng, cfg)).collect(),
    };
    let features = features_for(&mut rng, cfg, table, &graph);
    let id = video_id(index);
    let instances = generate_dialogue(&mut rng, cfg, &id, &graph);
    (graph, features, instances)
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    check_lexicon(cfg)?;
    let table = label_feature_table(cfg);
    let mut assets = BTreeMap::new();
    let mut instances = Vec::new();
    for i in 0..cfg.videos {
        let (graph, features, mut dialogue) = generate_video(cfg, &table, i);
        for frame in &graph.frames {
            frame.validate().expect("generated frame must be well-formed");
        }
        assets.insert(video_id(i), VideoAssets { graph, features });
        instances.append(&mut dialogue);
    }
    Ok(World { config: cfg.clone(), vocab: build_vocab(cfg), assets, instances })
}

/// Partitions by video id — whole videos, never single turns, move
/// between splits. Train and dev sizes are floors of the ratios; test
/// takes the remainder.
pub fn split(world: World, ratios: [f64; 3], seed: u64) -> Result<Corpus> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let mut ids: Vec<String> = world.assets.keys().cloned().collect();
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n_train = (n as f64 * ratios[0]).floor() as usize;
    let n_dev = (n as f64 * ratios[1]).floor() as usize;
    let train_ids: BTreeSet<&String> = ids[..n_train].iter().collect();
    let dev_ids: BTreeSet<&String> = ids[n_train..n_train + n_dev].iter().collect();

    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for inst in world.instances {
        if train_ids.contains(&inst.video_id) {
            train.push(inst);
        } else if dev_ids.contains(&inst.video_id) {
            dev.push(inst);
        } else {
            test.push(inst);
        }
    }
    Ok(Corpus { world: world.config, vocab: world.vocab, assets: world.assets, train, dev, test })
}

#[derive(Serialize, Deserialize)]
struct Meta {
    world: WorldConfig,
    videos: usize,
    vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    frames: Vec<FrameFile>,
}

#[derive(Serialize, Deserialize)]
struct FrameFile {
    objects: Vec<(usize, String)>,
    relations: Vec<(usize, String, usize, String)>,
}

#[derive(Serialize, Deserialize)]
struct FeatureSidecar {
    t_c: usize,
    t_f: usize,
    d_v: usize,
}

fn graph_to_file(graph: &SceneGraph, cfg: &WorldConfig) -> GraphFile {
    let objects = object_words(cfg);
    let relations = relation_words(cfg);
    GraphFile {
        frames: graph
            .frames
            .iter()
            .map(|f| FrameFile {
                objects: f
                    .objects
                    .iter()
                    .map(|o| (o.id, objects[o.label].to_string()))
                    .collect(),
                relations: f
                    .relations
                    .iter()
                    .map(|r| {
                        (r.src, relations[r.rel].to_string(), r.dst, r.class.name().to_string())
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn graph_from_file(file: GraphFile, cfg: &WorldConfig, origin: &Path) -> Result<SceneGraph> {
    let bad = |msg: String| Error::Validation(format!("{}: {msg}", origin.display()));
    let object_ids: BTreeMap<&str, usize> =
        object_words(cfg).into_iter().enumerate().map(|(i, w)| (w, i)).collect();
    let relation_ids: BTreeMap<&str, usize> =
        relation_words(cfg).into_iter().enumerate().map(|(i, w)| (w, i)).collect();

    let mut frames = Vec::with_capacity(file.frames.len());
    for frame in file.frames {
        let objects = frame
            .objects
            .into_iter()
            .map(|(id, word)| {
                let label = *object_ids
                    .get(word.as_str())
                    .ok_or_else(|| bad(format!("unknown object word {word:?}")))?;
                Ok(SceneObject { id, label })
            })
            .collect::<Result<Vec<_>>>()?;
        let relations = frame
            .relations
            .into_iter()
            .map(|(src, word, dst, class_name)| {
                let rel = *relation_ids
                    .get(word.as_str())
                    .ok_or_else(|| bad(format!("unknown relation word {word:?}")))?;
                let class = RelationClass::from_name(&class_name)
                    .map_err(|e| bad(e.to_string()))?;
                if relation_class_of(rel, cfg.relations_per_class) != class {
                    return Err(bad(format!(
                        "relation word {word:?} is not in class {class_name:?}"
                    )));
                }
                Ok(Relation { src, rel, dst, class })
            })
            .collect::<Result<Vec<_>>>()?;
        let graph = FrameGraph { objects, relations };
        graph.validate().map_err(|e| bad(e.to_string()))?;
        frames.push(graph);
    }
    Ok(SceneGraph { frames })
}

fn write_jsonl(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut body = String::new();
    for inst in instances {
        body.push_str(&serde_json::to_string(inst)?);
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<Instance>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                Error::Validation(format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

fn features_to_bytes(track: &FeatureTrack) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(4 * (track.coarse.len() + track.fine.len()));
    for v in track.coarse.iter().chain(track.fine.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn features_from_bytes(bytes: &[u8], sidecar: &FeatureSidecar, origin: &Path) -> Result<FeatureTrack> {
    let want = (sidecar.t_c + sidecar.t_f) * sidecar.d_v;
    if bytes.len() != 4 * want {
        return Err(Error::Validation(format!(
            "{}: length mismatch: sidecar promises {want} floats ({} bytes), file has {} bytes",
            origin.display(),
            4 * want,
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let split = sidecar.t_c * sidecar.d_v;
    Ok(FeatureTrack {
        t_c: sidecar.t_c,
        t_f: sidecar.t_f,
        d_v: sidecar.d_v,
        coarse: floats[..split].to_vec(),
        fine: floats[split..].to_vec(),
    })
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let assets_dir = dir.join("assets");
    std::fs::create_dir_all(&assets_dir)?;

    let meta = Meta {
        world: corpus.world.clone(),
        videos: corpus.assets.len(),
        vocab_size: corpus.vocab.len(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    corpus.vocab.save(&dir.join("vocab.txt"))?;
    write_jsonl(&dir.join("train.jsonl"), &corpus.train)?;
    write_jsonl(&dir.join("dev.jsonl"), &corpus.dev)?;
    write_jsonl(&dir.join("test.jsonl"), &corpus.test)?;

    for (id, assets) in &corpus.assets {
        let graph = graph_to_file(&assets.graph, &corpus.world);
        std::fs::write(
            assets_dir.join(format!("{id}.graph.json")),
            serde_json::to_string_pretty(&graph)?,
        )?;
        let sidecar = FeatureSidecar {
            t_c: assets.features.t_c,
            t_f: assets.features.t_f,
            d_v: assets.features.d_v,
        };
        std::fs::write(
            assets_dir.join(format!("{id}.features.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        std::fs::write(
            assets_dir.join(format!("{id}.features.bin")),
            features_to_bytes(&assets.features),
        )?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::Validation(format!("{}: {e}", meta_path.display())))?;
    meta.world.validate()?;
    check_lexicon(&meta.world)?;
    let vocab = Vocab::load(&dir.join("vocab.txt"))?;

    let train = read_jsonl(&dir.join("train.jsonl"))?;
    let dev = read_jsonl(&dir.join("dev.jsonl"))?;
    let test = read_jsonl(&dir.join("test.jsonl"))?;

    let ids: BTreeSet<&String> = train
        .iter()
        .chain(dev.iter())
        .chain(test.iter())
        .map(|inst| &inst.video_id)
        .collect();
    let mut assets = BTreeMap::new();
    for id in ids {
        let graph_path = dir.join("assets").join(format!("{id}.graph.json"));
        let file: GraphFile = serde_json::from_str(&std::fs::read_to_string(&graph_path)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", graph_path.display())))?;
        let graph = graph_from_file(file, &meta.world, &graph_path)?;

        let sidecar_path = dir.join("assets").join(format!("{id}.features.json"));
        let sidecar: FeatureSidecar =
            serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
                .map_err(|e| Error::Validation(format!("{}: {e}", sidecar_path.display())))?;
        if sidecar.d_v != meta.world.feature_width
            || sidecar.t_f != meta.world.frames_per_video
            || sidecar.t_c != meta.world.coarse_windows()
        {
            return Err(Error::Validation(format!(
                "{}: sidecar shape ({}, {}, {}) disagrees with the world config ({}, {}, {})",
                sidecar_path.display(),
                sidecar.t_c,
                sidecar.t_f,
                sidecar.d_v,
                meta.world.coarse_windows(),
                meta.world.frames_per_video,
                meta.world.feature_width,
            )));
        }
        let bin_path = dir.join("assets").join(format!("{id}.features.bin"));
        let features = features_from_bytes(&std::fs::read(&bin_path)?, &sidecar, &bin_path)?;
        assets.insert(id.clone(), VideoAssets { graph, features });
    }
    Ok(Corpus { world: meta.world, vocab, assets, train, dev, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::UNK;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            seed: 7,
            videos: 6,
            object_vocab: 6,
            relations_per_class: 2,
            frames_per_video: 4,
            window_ratio: 2,
            dialogue_turns: 3,
            feature_width: 8,
            feature_noise: 0.1,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        assert_eq!(generate_world(&cfg).unwrap(), generate_world(&cfg).unwrap());
    }

    #[test]
    fn frames_respect_size_bounds() {
        let world = generate_world(&small_cfg()).unwrap();
        for assets in world.assets.values() {
            for frame in &assets.graph.frames {
                assert!((2..=4).contains(&frame.objects.len()));
                assert!((1..=3).contains(&frame.relations.len()));
                frame.validate().unwrap();
            }
        }
    }

    #[test]
    fn instance_count_and_turn_structure() {
        let cfg = small_cfg();
        let world = generate_world(&cfg).unwrap();
        assert_eq!(world.instances.len(), cfg.videos * cfg.dialogue_turns);
        for chunk in world.instances.chunks(cfg.dialogue_turns) {
            for (t, inst) in chunk.iter().enumerate() {
                assert_eq!(inst.history.len(), t, "history holds exactly the prior turns");
                assert!(!inst.answer.is_empty());
                if t == 0 {
                    assert_ne!(inst.kind, QuestionKind::HistoryDependent);
                }
            }
        }
    }

    #[test]
    fn graph_answers_match_the_queried_relation() {
        let cfg = small_cfg();
        let world = generate_world(&cfg).unwrap();
        let objects = object_words(&cfg);
        let relations = relation_words(&cfg);
        let mut checked = 0;
        for inst in &world.instances {
            if inst.kind != QuestionKind::GraphDependent {
                continue;
            }
            let words: Vec<&str> = inst.question.split_whitespace().collect();
            assert_eq!(words[0], "what");
            let src = objects.iter().position(|w| *w == words[2]).unwrap();
            let rel = relations.iter().position(|w| *w == words[3]).unwrap();
            let graph = &world.assets[&inst.video_id].graph;
            let mut dsts = BTreeSet::new();
            for frame in &graph.frames {
                for r in &frame.relations {
                    if frame.objects[r.src].label == src && r.rel == rel {
                        dsts.insert(objects[frame.objects[r.dst].label]);
                    }
                }
            }
            assert_eq!(dsts.len(), 1, "queried pair must have a unique target");
            assert_eq!(dsts.iter().next().unwrap(), &inst.answer.as_str());
            checked += 1;
        }
        assert!(checked > 0, "corpus must contain graph questions");
    }

    #[test]
    fn presence_answers_match_the_object_sets() {
        let cfg = small_cfg();
        let world = generate_world(&cfg).unwrap();
        let objects = object_words(&cfg);
        let mut saw = [false; 2];
        for inst in &world.instances {
            if inst.kind != QuestionKind::FeatureDependent {
                continue;
            }
            let words: Vec<&str> = inst.question.split_whitespace().collect();
            assert_eq!(words[0], "is");
            let label = objects.iter().position(|w| *w == words[1]).unwrap();
            let graph = &world.assets[&inst.video_id].graph;
            let present = graph
                .frames
                .iter()
                .any(|f| f.objects.iter().any(|o| o.label == label));
            assert_eq!(inst.answer, if present { "yes" } else { "no" });
            saw[present as usize] = true;
        }
        assert!(saw[0] && saw[1], "both yes and no presence answers must occur");
    }

    #[test]
    fn history_answers_repeat_the_previous_turn() {
        let world = generate_world(&small_cfg()).unwrap();
        let mut checked = 0;
        for inst in &world.instances {
            if inst.kind != QuestionKind::HistoryDependent {
                continue;
            }
            assert_eq!(inst.answer, inst.history.last().unwrap().1);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn zero_noise_features_depend_only_on_object_sets() {
        let mut cfg = small_cfg();
        cfg.feature_noise = 0.0;
        let world = generate_world(&cfg).unwrap();
        let table = label_feature_table(&cfg);
        for assets in world.assets.values() {
            for (f, frame) in assets.graph.frames.iter().enumerate() {
                let labels: BTreeSet<usize> = frame.objects.iter().map(|o| o.label).collect();
                let base = frame_feature_base(&table, &labels);
                let row = &assets.features.fine[f * cfg.feature_width..(f + 1) * cfg.feature_width];
                for (got, want) in row.iter().zip(&base) {
                    assert_eq!(*got, *want as f32, "fine row must be exactly the label sum");
                }
            }
        }
    }

    #[test]
    fn coarse_rows_are_window_means_of_fine_rows() {
        let cfg = small_cfg();
        let world = generate_world(&cfg).unwrap();
        let (w, d) = (cfg.window_ratio, cfg.feature_width);
        for assets in world.assets.values() {
            let track = &assets.features;
            for k in 0..track.t_c {
                for j in 0..d {
                    let mean: f64 =
                        (0..w).map(|f| track.fine[(k * w + f) * d + j] as f64).sum::<f64>()
                            / w as f64;
                    assert_eq!(track.coarse[k * d + j], mean as f32);
                }
            }
        }
    }

    #[test]
    fn corpus_text_is_fully_in_vocabulary() {
        let world = generate_world(&small_cfg()).unwrap();
        for inst in &world.instances {
            for text in [&inst.question, &inst.answer] {
                assert!(
                    !world.vocab.tokenize(text).contains(&UNK),
                    "out-of-vocabulary word in {text:?}"
                );
            }
        }
    }

    #[test]
    fn split_is_disjoint_sized_and_seeded() {
        let mut cfg = small_cfg();
        cfg.videos = 100;
        let world = generate_world(&cfg).unwrap();
        let corpus = split(world.clone(), [0.8, 0.1, 0.1], 5).unwrap();
        let vids = |xs: &[Instance]| -> BTreeSet<String> {
            xs.iter().map(|i| i.video_id.clone()).collect()
        };
        let (tr, dv, te) = (vids(&corpus.train), vids(&corpus.dev), vids(&corpus.test));
        assert_eq!((tr.len(), dv.len(), te.len()), (80, 10, 10));
        assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));
        assert_eq!(
            corpus.train.len() + corpus.dev.len() + corpus.test.len(),
            cfg.videos * cfg.dialogue_turns
        );
        let again = split(world, [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(corpus, again);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let world = generate_world(&small_cfg()).unwrap();
        assert!(split(world.clone(), [0.5, 0.2, 0.2], 1).is_err());
        assert!(split(world, [1.2, -0.1, -0.1], 1).is_err());
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let cfg = WorldConfig { videos: 10, ..small_cfg() };
        let corpus = split(generate_world(&cfg).unwrap(), [0.8, 0.1, 0.1], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn truncated_feature_file_reports_length_mismatch() {
        let corpus = split(generate_world(&small_cfg()).unwrap(), [0.8, 0.1, 0.1], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let bin = dir.path().join("assets").join("vid_0000.features.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("length mismatch"), "{err}");
    }

    #[test]
    fn malformed_instance_line_reports_its_number() {
        let corpus = split(generate_world(&small_cfg()).unwrap(), [0.8, 0.1, 0.1], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let path = dir.path().join("train.jsonl");
        let mut text = std::fs::read_to_string(&path).unwrap();
        let insert = text.lines().next().unwrap().len() + 1;
        text.insert_str(insert, "{not json}\n");
        std::fs::write(&path, text).unwrap();
        let err = load_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("train.jsonl:2"), "{err}");
    }

    #[test]
    fn instance_lines_use_the_documented_schema() {
        let inst = Instance {
            video_id: "vid_0001".into(),
            history: vec![("is cat in the video ?".into(), "yes".into())],
            question: "what is cat near ?".into(),
            answer: "dog".into(),
            kind: QuestionKind::GraphDependent,
        };
        let line = serde_json::to_string(&inst).unwrap();
        assert_eq!(
            line,
            r#"{"video_id":"vid_0001","history":[["is cat in the video ?","yes"]],"question":"what is cat near ?","answer":"dog","kind":"graph_dependent"}"#
        );
    }

    #[test]
    fn external_assets_in_schema_load_without_generator_help() {
        let dir = tempfile::tempdir().unwrap();
        let assets = dir.path().join("assets");
        std::fs::create_dir_all(&assets).unwrap();
        let cfg = WorldConfig {
            videos: 1,
            object_vocab: 3,
            relations_per_class: 1,
            frames_per_video: 2,
            window_ratio: 2,
            dialogue_turns: 1,
            feature_width: 2,
            ..small_cfg()
        };
        std::fs::write(
            dir.path().join("meta.json"),
            serde_json::json!({"world": cfg, "videos": 1, "vocab_size": 0}).to_string(),
        )
        .unwrap();
        Vocab::new(["cat", "dog", "ball", "above", "holding", "watching"])
            .save(&dir.path().join("vocab.txt"))
            .unwrap();
        std::fs::write(
            dir.path().join("train.jsonl"),
            r#"{"video_id":"ext_0","history":[],"question":"what is cat above ?","answer":"dog","kind":"graph_dependent"}
"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("dev.jsonl"), "").unwrap();
        std::fs::write(dir.path().join("test.jsonl"), "").unwrap();
        std::fs::write(
            assets.join("ext_0.graph.json"),
            r#"{"frames":[
                {"objects":[[0,"cat"],[1,"dog"]],"relations":[[0,"above",1,"spatial"]]},
                {"objects":[[0,"ball"]],"relations":[]}
            ]}"#,
        )
        .unwrap();
        std::fs::write(assets.join("ext_0.features.json"), r#"{"t_c":1,"t_f":2,"d_v":2}"#)
            .unwrap();
        let floats: Vec<f32> = vec![0.5, -0.5, 1.0, 2.0, 3.0, 4.0];
        let mut bytes = Vec::new();
        for v in &floats {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(assets.join("ext_0.features.bin"), bytes).unwrap();

        let corpus = load_corpus(dir.path()).unwrap();
        let video = &corpus.assets["ext_0"];
        assert_eq!(video.graph.frames[0].relations[0].rel, 0);
        assert_eq!(video.graph.frames[0].relations[0].class, RelationClass::Spatial);
        assert_eq!(video.features.coarse, vec![0.5, -0.5]);
        assert_eq!(video.features.fine, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(corpus.train[0].answer, "dog");
    }
}
