//! Full model assembly: a text encoder-decoder backbone, coarse-window
//! video and per-frame graph representations fused into the encoder
//! memory, fine-window video and per-frame triplet representations fused
//! into the decoder output, and a two-gate mixer over the two vocabulary
//! distributions. Also: the loss, greedy and beam decoding, and the
//! checkpoint format.
//!
//! Parameter names are the persistence contract. Every parameter lives
//! under exactly one of the prefixes `lm.` (backbone) or `gvp.`
//! (everything graph/video/pointer); the optimizer keys its two learning
//! rates off that prefix, and checkpoints address values by full name.
//! The registration sequence in [`Model::init`] is fixed — reordering it
//! changes which random draws each parameter receives.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{LengthNorm, PointerMode, RunConfig};
use crate::data::{build_vocab, object_words, relation_words, Instance, VideoAssets};
use crate::error::{Error, Result};
use crate::gvp::{assemble_memory, FusedMemory, FusionBlock};
use crate::lm::{
    sinusoidal_positions, Decoder, Encoder, Linear, Vocab, BOS, EOS, SEP,
};
use crate::pointer::{mix, pointer_logits, pointer_values, PointerInputs, PointerParams};
use crate::scenegraph::{
    argmax_first, build_triplets, embed_rn_nodes, graph_attention, graph_aggregate,
    node_similarity, rn_transform, triplet_aggregate, triplet_similarity, uniform_scores,
    GatParams,
};
use crate::tensor::{normal_vec, seeded_rng, ParamStore, Tensor};

pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub ps: ParamStore,
    token_embedding: Tensor,
    output_bias: Tensor,
    encoder: Encoder,
    decoder: Decoder,
    feature_projection: Linear,
    video_encoder: FusionBlock,
    graph_encoder: FusionBlock,
    video_decoder: FusionBlock,
    graph_decoder: FusionBlock,
    decoder_fuse: FusionBlock,
    gat: GatParams,
    triplet_w: Tensor,
    triplet_b: Tensor,
    empty_graph_node: Tensor,
    empty_graph_triplet: Tensor,
    pointer: PointerParams,
    /// Object label index -> vocabulary id of the label word.
    obj_tokens: Vec<usize>,
    /// Relation label index -> vocabulary id of the label word.
    rel_tokens: Vec<usize>,
}

/// Tokenized encoder input plus the question's row range, which feeds
/// the question vector.
pub struct EncodedInput {
    pub ids: Vec<usize>,
    pub question_span: (usize, usize),
}

/// `[BOS, history turns flattened, SEP, question, EOS]`. The single SEP
/// keeps the question span contiguous regardless of history length.
pub fn compose_input(vocab: &Vocab, instance: &Instance, max_len: usize) -> Result<EncodedInput> {
    let mut ids = vec![BOS];
    for (q, a) in &instance.history {
        ids.extend(vocab.tokenize(q));
        ids.extend(vocab.tokenize(a));
    }
    ids.push(SEP);
    let question = vocab.tokenize(&instance.question);
    if question.is_empty() {
        return Err(Error::Validation(format!(
            "instance for {} has an empty question",
            instance.video_id
        )));
    }
    let span = (ids.len(), ids.len() + question.len());
    ids.extend(question);
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(Error::Validation(format!(
            "input length {} exceeds model.max_seq_len {max_len}",
            ids.len()
        )));
    }
    Ok(EncodedInput { ids, question_span: span })
}

/// Everything the decoder needs that does not depend on the decoded
/// prefix; computed once per instance and reused across decode steps.
pub struct EncodedState {
    pub memory: FusedMemory,
    pub q_vec: Tensor,
    pub pooled_memory: Tensor,
    /// `concat(fused video rows, fused graph rows)` — the cross-attention
    /// context of the output-side fusion block.
    pub fused_context: Tensor,
}

impl Model {
    pub fn init(config: &RunConfig) -> Result<Model> {
        config.validate()?;
        let vocab = build_vocab(&config.world);
        let m = &config.model;
        let (d, h, f) = (m.d_model, m.heads, m.ffn());
        let v = vocab.len();
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(config.seed);
        // The embedding is the output projection too (tied): its scale
        // sets the initial logit spread. 1/d keeps the untrained output
        // near uniform at any width — even with the sqrt(d) input scaling,
        // the previous token's row leaks into the decoder state with
        // magnitude ~1/sqrt(d), small enough for a near-flat start. The
        // residual stream would otherwise carry enough of it to push the
        // start-of-training loss well above ln|V|.
        let std = 1.0 / d as f64;

        ps.register("lm.token_embedding", normal_vec(&mut rng, v * d, std), &[v, d]);
        ps.register("lm.output_bias", vec![0.0; v], &[v]);
        Encoder::init(&mut ps, "lm.encoder", m.encoder_layers, d, h, f, &mut rng);
        Decoder::init(&mut ps, "lm.decoder", m.decoder_layers, d, h, f, &mut rng);

        Linear::init(&mut ps, "gvp.feature_projection", config.world.feature_width, d, &mut rng);
        FusionBlock::init(&mut ps, "gvp.video_encoder", d, h, f, &mut rng);
        FusionBlock::init(&mut ps, "gvp.graph_encoder", d, h, f, &mut rng);
        FusionBlock::init(&mut ps, "gvp.video_decoder", d, h, f, &mut rng);
        FusionBlock::init(&mut ps, "gvp.graph_decoder", d, h, f, &mut rng);
        FusionBlock::init(&mut ps, "gvp.decoder_fuse", d, h, f, &mut rng);
        GatParams::init(&mut ps, "gvp.gat", d, h, f, &mut rng);

        // The triplet projection starts as a weighted mean of the three
        // stacked embeddings (weights sum to one, most mass on the object
        // slot), so an untrained model already produces sensible triplet
        // rows instead of noise.
        let mut tw = vec![0.0; 3 * d * d];
        for (block, weight) in [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0].into_iter().enumerate() {
            for j in 0..d {
                tw[(block * d + j) * d + j] = weight;
            }
        }
        ps.register("gvp.triplet_projection.w", tw, &[3 * d, d]);
        ps.register("gvp.triplet_projection.b", vec![0.0; d], &[d]);
        // Stand-ins for aggregated embedding rows; same scale as the tables.
        ps.register("gvp.empty_graph_node", normal_vec(&mut rng, d, std), &[1, d]);
        ps.register("gvp.empty_graph_triplet", normal_vec(&mut rng, d, std), &[1, d]);
        PointerParams::init(&mut ps, "gvp.pointer", d, &mut rng);

        Ok(Model::bind(ps, config.clone(), vocab))
    }

    pub fn bind(ps: ParamStore, config: RunConfig, vocab: Vocab) -> Model {
        let h = config.model.heads;
        let obj_tokens = object_words(&config.world).iter().map(|w| vocab.id(w)).collect();
        let rel_tokens = relation_words(&config.world).iter().map(|w| vocab.id(w)).collect();
        Model {
            token_embedding: ps.get("lm.token_embedding"),
            output_bias: ps.get("lm.output_bias"),
            encoder: Encoder::bind(&ps, "lm.encoder", config.model.encoder_layers, h),
            decoder: Decoder::bind(&ps, "lm.decoder", config.model.decoder_layers, h),
            feature_projection: Linear::bind(&ps, "gvp.feature_projection"),
            video_encoder: FusionBlock::bind(&ps, "gvp.video_encoder", h),
            graph_encoder: FusionBlock::bind(&ps, "gvp.graph_encoder", h),
            video_decoder: FusionBlock::bind(&ps, "gvp.video_decoder", h),
            graph_decoder: FusionBlock::bind(&ps, "gvp.graph_decoder", h),
            decoder_fuse: FusionBlock::bind(&ps, "gvp.decoder_fuse", h),
            gat: GatParams::bind(&ps, "gvp.gat"),
            triplet_w: ps.get("gvp.triplet_projection.w"),
            triplet_b: ps.get("gvp.triplet_projection.b"),
            empty_graph_node: ps.get("gvp.empty_graph_node"),
            empty_graph_triplet: ps.get("gvp.empty_graph_triplet"),
            pointer: PointerParams::bind(&ps, "gvp.pointer"),
            obj_tokens,
            rel_tokens,
            config,
            vocab,
            ps,
        }
    }

    fn encode_text(&self, instance: &Instance) -> Result<(Tensor, (usize, usize))> {
        let m = &self.config.model;
        let input = compose_input(&self.vocab, instance, m.max_seq_len)?;
        let emb = self.token_embedding.embedding_lookup(&input.ids);
        let x = emb
            .scale((m.d_model as f64).sqrt())
            .add(&sinusoidal_positions(input.ids.len(), m.d_model));
        Ok((self.encoder.forward(&x, m.pre_norm), input.question_span))
    }

    /// Mean-pooled encoder state over the question span — the raw
    /// question vector, without the rest of the encoder-side pass.
    pub fn question_vector(&self, instance: &Instance) -> Result<Tensor> {
        let (y_en, (q0, q1)) = self.encode_text(instance)?;
        Ok(y_en.slice_rows(q0, q1).mean_pool(0))
    }

    /// Object- and relation-label embedding tables (rows of the token
    /// embedding, gathered in label order).
    pub fn label_tables(&self) -> (Tensor, Tensor) {
        (
            self.token_embedding.embedding_lookup(&self.obj_tokens),
            self.token_embedding.embedding_lookup(&self.rel_tokens),
        )
    }

    /// Triplet projection weights, for building triplet rows outside the
    /// encoder pass.
    pub fn triplet_projection(&self) -> (Tensor, Tensor) {
        (self.triplet_w.clone(), self.triplet_b.clone())
    }

    /// Encoder-side pass: text encoding, question vector, per-frame graph
    /// and triplet rows, both fusion tracks, and the assembled memory.
    pub fn encode_instance(
        &self,
        instance: &Instance,
        assets: &VideoAssets,
    ) -> Result<EncodedState> {
        let m = &self.config.model;
        let abl = &self.config.ablation;
        let (d, pre) = (m.d_model, m.pre_norm);

        let (y_en, (q0, q1)) = self.encode_text(instance)?;
        let q_vec = y_en.slice_rows(q0, q1).mean_pool(0);

        let (obj_table, rel_table) = self.label_tables();

        let mut node_rows = Vec::with_capacity(assets.graph.frames.len());
        let mut triplet_rows = Vec::with_capacity(assets.graph.frames.len());
        for frame in &assets.graph.frames {
            let rn = rn_transform(frame)?;
            if rn.node_count() == 0 {
                node_rows.push(self.empty_graph_node.clone());
            } else {
                let feats = embed_rn_nodes(&rn, &obj_table, &rel_table);
                let scores = if abl.node_similarity {
                    node_similarity(&feats, &q_vec, &rn)
                } else {
                    uniform_scores(rn.node_count())
                };
                let feats = if abl.gat {
                    graph_attention(&feats, &q_vec, &rn, &self.gat, m.heads, m.self_loop).output
                } else {
                    feats
                };
                node_rows.push(graph_aggregate(&feats, &scores).reshape(&[1, d]));
            }
            match build_triplets(&rn, &obj_table, &rel_table, &self.triplet_w, &self.triplet_b) {
                None => triplet_rows.push(self.empty_graph_triplet.clone()),
                Some(trip) => {
                    let scores = if abl.triplet_similarity {
                        triplet_similarity(&trip, &q_vec)
                    } else {
                        uniform_scores(trip.shape()[0])
                    };
                    triplet_rows.push(triplet_aggregate(&trip, &scores).reshape(&[1, d]));
                }
            }
        }

        let v_coarse = self.feature_projection.forward(&assets.features.coarse_tensor());
        let v_fine = self.feature_projection.forward(&assets.features.fine_tensor());

        let y_v_en = self.video_encoder.forward(&v_coarse, &y_en, pre);
        let y_g_en = if abl.graph_encoder {
            Some(self.graph_encoder.forward(&Tensor::concat(&node_rows, 0), &y_en, pre))
        } else {
            None
        };
        let memory = assemble_memory(&y_en, Some(&y_v_en), y_g_en.as_ref());
        let pooled_memory = memory.memory.mean_pool(0);

        let y_v_de = self.video_decoder.forward(&v_fine, &y_en, pre);
        let fused_context = if abl.graph_decoder {
            let y_g_de = self.graph_decoder.forward(&Tensor::concat(&triplet_rows, 0), &y_en, pre);
            Tensor::concat(&[y_v_de, y_g_de], 0)
        } else {
            y_v_de
        };

        Ok(EncodedState { memory, q_vec, pooled_memory, fused_context })
    }

    /// Per-position mixed vocabulary distributions for a decoder prefix
    /// (`dec_ids[0]` must be BOS). Row `t` conditions on `dec_ids[..=t]`.
    pub fn decode_distributions(&self, enc: &EncodedState, dec_ids: &[usize]) -> Vec<Tensor> {
        self.mixed_distributions(enc, dec_ids, self.config.model.pointer_mode)
    }

    fn mixed_distributions(
        &self,
        enc: &EncodedState,
        dec_ids: &[usize],
        mode: PointerMode,
    ) -> Vec<Tensor> {
        let m = &self.config.model;
        let emb = self.token_embedding.embedding_lookup(dec_ids);
        let x = emb
            .scale((m.d_model as f64).sqrt())
            .add(&sinusoidal_positions(dec_ids.len(), m.d_model));
        let y_b = self.decoder.forward(&x, &enc.memory.memory, m.pre_norm);
        let y_g = self.decoder_fuse.forward(&y_b, &enc.fused_context, m.pre_norm);

        let emb_t = self.token_embedding.transpose();
        let dist_b = y_b.matmul(&emb_t).add(&self.output_bias).softmax(1);
        let dist_g = y_g.matmul(&emb_t).add(&self.output_bias).softmax(1);

        (0..dec_ids.len())
            .map(|t| {
                let inputs = PointerInputs {
                    text_state: y_b.row(t),
                    graph_state: y_g.row(t),
                    prev_token: emb.row(t),
                    pooled_memory: enc.pooled_memory.clone(),
                    question: enc.q_vec.clone(),
                };
                let (l1, l2) = pointer_logits(&inputs, &self.pointer);
                let (p1, p2) = pointer_values(&l1, &l2, mode);
                mix(&p1, &p2, &dist_g.row(t), &dist_b.row(t), m.pointer_pairing)
            })
            .collect()
    }

    /// Teacher-forced per-position output distributions for the
    /// instance's gold answer; pair with [`Model::target_ids`].
    pub fn forward(&self, instance: &Instance, assets: &VideoAssets) -> Result<Vec<Tensor>> {
        let enc = self.encode_instance(instance, assets)?;
        let mut dec = vec![BOS];
        dec.extend(self.vocab.tokenize(&instance.answer));
        Ok(self.decode_distributions(&enc, &dec))
    }

    /// Gold answer tokens plus EOS — the targets aligned with
    /// [`Model::forward`]'s rows.
    pub fn target_ids(&self, instance: &Instance) -> Vec<usize> {
        let mut ids = self.vocab.tokenize(&instance.answer);
        ids.push(EOS);
        ids
    }

    /// Summed (not averaged) cross-entropy over the instance's positions,
    /// plus the position count, so a batch can take one flat mean over
    /// every position it contains.
    pub fn instance_loss(&self, instance: &Instance, assets: &VideoAssets) -> Result<(Tensor, usize)> {
        let dists = self.forward(instance, assets)?;
        let targets = self.target_ids(instance);
        Ok((sum_cross_entropy(&dists, &targets)?, targets.len()))
    }

    /// Loss used by gradient verification: the instance loss summed over
    /// the `multi` and `single` pointer modes. Each mode leaves some gate
    /// projections outside the graph (softmax cancellation in `multi`,
    /// the absent second logit in `single`); the sum exercises every
    /// parameter, which finite differences require.
    pub fn verification_loss(&self, instance: &Instance, assets: &VideoAssets) -> Result<Tensor> {
        let enc = self.encode_instance(instance, assets)?;
        let mut dec = vec![BOS];
        dec.extend(self.vocab.tokenize(&instance.answer));
        let targets = self.target_ids(instance);
        let mut total: Option<Tensor> = None;
        for mode in [PointerMode::Multi, PointerMode::Single] {
            let dists = self.mixed_distributions(&enc, &dec, mode);
            let loss = sum_cross_entropy(&dists, &targets)?;
            total = Some(match total {
                None => loss,
                Some(t) => t.add(&loss),
            });
        }
        Ok(total.unwrap())
    }

    /// Argmax decoding: lowest token id wins ties, stops at EOS or after
    /// `max_len` emitted tokens. Returned ids exclude BOS/EOS.
    pub fn greedy_decode(
        &self,
        instance: &Instance,
        assets: &VideoAssets,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let enc = self.encode_instance(instance, assets)?;
        let mut dec = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let dists = self.decode_distributions(&enc, &dec);
            let tok = argmax_first(&dists.last().unwrap().to_vec());
            if tok == EOS {
                break;
            }
            out.push(tok);
            dec.push(tok);
        }
        Ok(out)
    }

    pub fn beam_decode(
        &self,
        instance: &Instance,
        assets: &VideoAssets,
        beam: usize,
        max_len: usize,
        penalty: f64,
        norm: LengthNorm,
    ) -> Result<Vec<usize>> {
        let enc = self.encode_instance(instance, assets)?;
        Ok(beam_search_with(
            |prefix| {
                let mut dec = vec![BOS];
                dec.extend_from_slice(prefix);
                self.decode_distributions(&enc, &dec).last().unwrap().to_vec()
            },
            beam,
            max_len,
            penalty,
            norm,
        ))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.ps.len());
        let mut body = Vec::new();
        let mut offset = 0usize;
        for (name, t) in self.ps.iter() {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.data().iter() {
                body.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            offset += t.numel();
        }
        let header = CheckpointHeader { config: self.config.clone(), manifest };
        let mut bytes = serde_json::to_string(&header)?.into_bytes();
        bytes.push(b'\n');
        bytes.extend(body);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path)?;
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Validation(format!("{}: missing header line", path.display())))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let model = Model::init(&header.config)?;
        let body = &bytes[nl + 1..];

        if header.manifest.len() != model.ps.len() {
            return Err(Error::Contract(format!(
                "{}: manifest lists {} parameters, model has {}",
                path.display(),
                header.manifest.len(),
                model.ps.len()
            )));
        }
        let total: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if body.len() != 4 * total {
            return Err(Error::Contract(format!(
                "{}: body holds {} bytes, manifest promises {}",
                path.display(),
                body.len(),
                4 * total
            )));
        }
        for entry in &header.manifest {
            if !model.ps.contains(&entry.name) {
                return Err(Error::Contract(format!(
                    "{}: unknown parameter {:?}",
                    path.display(),
                    entry.name
                )));
            }
            let t = model.ps.get(&entry.name);
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "{}: parameter {:?} has shape {:?}, checkpoint has {:?}",
                    path.display(),
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            let n = t.numel();
            let start = 4 * entry.offset;
            let vals: Vec<f64> = body[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            t.set_data(&vals);
        }
        Ok(model)
    }
}

/// Mean cross-entropy over aligned (distribution, target) pairs.
pub fn sequence_loss(dists: &[Tensor], targets: &[usize]) -> Result<Tensor> {
    let sum = sum_cross_entropy(dists, targets)?;
    Ok(sum.scale(1.0 / targets.len() as f64))
}

fn sum_cross_entropy(dists: &[Tensor], targets: &[usize]) -> Result<Tensor> {
    if dists.len() != targets.len() || dists.is_empty() {
        return Err(Error::Validation(format!(
            "{} distributions vs {} targets",
            dists.len(),
            targets.len()
        )));
    }
    let mut total = dists[0].cross_entropy(targets[0]);
    for (d, t) in dists.iter().zip(targets).skip(1) {
        total = total.add(&d.cross_entropy(*t));
    }
    Ok(total)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Position of the first value in the body, counted in floats.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: RunConfig,
    manifest: Vec<ManifestEntry>,
}

/// One beam-search candidate. `logp` is the raw sum of chosen-step log
/// probabilities (EOS step included when finished by EOS); `ids` never
/// contain control tokens.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub logp: f64,
    pub finished: bool,
}

fn length_normalizer(len: usize, penalty: f64, norm: LengthNorm) -> f64 {
    let n = len.max(1) as f64;
    match norm {
        LengthNorm::Plain => n.powf(penalty),
        LengthNorm::Gnmt => ((5.0 + n) / 6.0).powf(penalty),
    }
}

/// Beam search over a step function mapping an emitted-token prefix to
/// the next-token distribution. Per round, every live hypothesis expands
/// over the whole vocabulary; the top `beam` candidates by raw cumulative
/// log probability survive (ties: lower token id, then lower parent
/// index). EOS moves a candidate into the finished pool without emitting
/// a token; hypotheses still live after `max_len` rounds finish as they
/// stand. The pool winner maximizes `logp / length_normalizer`, earlier
/// finishers keeping precedence on exact ties.
pub fn beam_search_with<F: FnMut(&[usize]) -> Vec<f64>>(
    mut step: F,
    beam: usize,
    max_len: usize,
    penalty: f64,
    norm: LengthNorm,
) -> Vec<usize> {
    assert!(beam >= 1, "beam width must be at least 1");
    let mut live = vec![Hypothesis { ids: Vec::new(), logp: 0.0, finished: false }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let dist = step(&hyp.ids);
            for (tok, p) in dist.iter().enumerate() {
                cands.push((hyp.logp + p.max(1e-12).ln(), tok, parent));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        cands.truncate(beam);

        let mut next = Vec::with_capacity(beam);
        for (logp, tok, parent) in cands {
            let mut ids = live[parent].ids.clone();
            if tok == EOS {
                pool.push(Hypothesis { ids, logp, finished: true });
            } else {
                ids.push(tok);
                next.push(Hypothesis { ids, logp, finished: false });
            }
        }
        live = next;
    }
    pool.extend(live.into_iter().map(|mut h| {
        h.finished = true;
        h
    }));
    pool.sort_by(|a, b| {
        let sa = a.logp / length_normalizer(a.ids.len(), penalty, norm);
        let sb = b.logp / length_normalizer(b.ids.len(), penalty, norm);
        sb.partial_cmp(&sa).unwrap()
    });
    pool.swap_remove(0).ids
}
