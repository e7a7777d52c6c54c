//! Scene-graph structure and the graph side of the model.
//!
//! A frame's objects and typed relations are rewired into an "RN" graph:
//! every relation `(i, r, j)` becomes a relational node `r̂` with directed
//! edges `i -> r̂ -> j`, so relations participate in attention as
//! first-class nodes. On top of that live question-conditioned node
//! scoring (cosine similarity propagated one hop), multi-head graph
//! attention, and hard argmax aggregation in node and triplet form.

use crate::error::{Error, Result};
use crate::lm::Ffn;
use crate::tensor::{normal_vec, ParamStore, Tensor};
use rand::Rng;

/// Relation class; the class partitions the relation-label vocabulary but
/// plays no role in the math.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationClass {
    Spatial,
    Contact,
    Attention,
}

impl RelationClass {
    pub const ALL: [RelationClass; 3] =
        [RelationClass::Spatial, RelationClass::Contact, RelationClass::Attention];

    pub fn index(self) -> usize {
        match self {
            RelationClass::Spatial => 0,
            RelationClass::Contact => 1,
            RelationClass::Attention => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationClass::Spatial => "spatial",
            RelationClass::Contact => "contact",
            RelationClass::Attention => "attention",
        }
    }

    pub fn from_name(s: &str) -> Result<RelationClass> {
        match s {
            "spatial" => Ok(RelationClass::Spatial),
            "contact" => Ok(RelationClass::Contact),
            "attention" => Ok(RelationClass::Attention),
            other => Err(Error::Validation(format!("unknown relation class '{other}'"))),
        }
    }
}

/// An object occurrence in one frame. `id` is frame-local and arbitrary;
/// `label` indexes the object-label vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneObject {
    pub id: usize,
    pub label: usize,
}

/// A directed, labelled relation between two object ids of the same
/// frame. `rel` indexes the global relation-label vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
    pub class: RelationClass,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameGraph {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneGraph {
    pub frames: Vec<FrameGraph>,
}

impl FrameGraph {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            if !seen.insert(o.id) {
                return Err(Error::Validation(format!("duplicate object id {}", o.id)));
            }
        }
        for r in &self.relations {
            if !seen.contains(&r.src) || !seen.contains(&r.dst) {
                return Err(Error::Validation(format!(
                    "relation ({}, {}, {}) references a missing object id",
                    r.src, r.rel, r.dst
                )));
            }
        }
        Ok(())
    }
}

// ===================== RN transform =====================

/// Relation-node form of a frame graph. Nodes `0..n_objects` are the
/// frame's objects in input order; nodes `n_objects..` are one relational
/// node per relation, in input order. Every relational node has in-degree
/// and out-degree exactly 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RnGraph {
    pub object_labels: Vec<usize>,
    pub relation_labels: Vec<usize>,
    /// Directed edges as (from, to) node indices; 2 per relation.
    pub edges: Vec<(usize, usize)>,
}

impl RnGraph {
    pub fn node_count(&self) -> usize {
        self.object_labels.len() + self.relation_labels.len()
    }

    pub fn n_objects(&self) -> usize {
        self.object_labels.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_labels.len()
    }

    /// Dense adjacency, stored row-per-target: `adj[t * n + s] = 1` when
    /// node `s` links to node `t`. Row sums are in-degrees.
    pub fn adjacency(&self) -> Vec<f64> {
        let n = self.node_count();
        let mut adj = vec![0.0; n * n];
        for &(from, to) in &self.edges {
            adj[to * n + from] = 1.0;
        }
        adj
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|(_, t)| *t == node).count()
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|(f, _)| *f == node).count()
    }

    /// In-neighbours of `node`, ascending.
    pub fn sources_of(&self, node: usize) -> Vec<usize> {
        let mut s: Vec<usize> =
            self.edges.iter().filter(|(_, t)| *t == node).map(|(f, _)| *f).collect();
        s.sort_unstable();
        s
    }

    /// Inverts the transform: one `(src node, relation label, dst node)`
    /// per relational node, in relational-node order.
    pub fn recover_relations(&self) -> Vec<(usize, usize, usize)> {
        let n_obj = self.n_objects();
        (0..self.n_relations())
            .map(|m| {
                let rnode = n_obj + m;
                let src = self
                    .edges
                    .iter()
                    .find(|(_, t)| *t == rnode)
                    .map(|(f, _)| *f)
                    .expect("relational node missing its in-edge");
                let dst = self
                    .edges
                    .iter()
                    .find(|(f, _)| *f == rnode)
                    .map(|(_, t)| *t)
                    .expect("relational node missing its out-edge");
                (src, self.relation_labels[m], dst)
            })
            .collect()
    }
}

/// Rewires a frame graph into RN form. The result has `N + M` nodes and
/// exactly `2M` edges for `N` objects and `M` relations.
pub fn rn_transform(frame: &FrameGraph) -> Result<RnGraph> {
    frame.validate()?;
    let id_to_idx: std::collections::HashMap<usize, usize> =
        frame.objects.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
    let n_obj = frame.objects.len();
    let mut edges = Vec::with_capacity(2 * frame.relations.len());
    for (m, r) in frame.relations.iter().enumerate() {
        let rnode = n_obj + m;
        edges.push((id_to_idx[&r.src], rnode));
        edges.push((rnode, id_to_idx[&r.dst]));
    }
    Ok(RnGraph {
        object_labels: frame.objects.iter().map(|o| o.label).collect(),
        relation_labels: frame.relations.iter().map(|r| r.rel).collect(),
        edges,
    })
}

// ===================== Node features and similarity =====================

/// Looks up one feature row per RN node: object nodes from `obj_table`
/// (`[O x d]`, indexed by object label), relational nodes from
/// `rel_table` (`[R x d]`, indexed by relation label). Gradients flow
/// back into both tables.
pub fn embed_rn_nodes(rn: &RnGraph, obj_table: &Tensor, rel_table: &Tensor) -> Tensor {
    assert!(rn.node_count() > 0, "embed_rn_nodes on an empty graph");
    let obj = if rn.object_labels.is_empty() {
        None
    } else {
        Some(obj_table.embedding_lookup(&rn.object_labels))
    };
    let rel = if rn.relation_labels.is_empty() {
        None
    } else {
        Some(rel_table.embedding_lookup(&rn.relation_labels))
    };
    match (obj, rel) {
        (Some(o), Some(r)) => Tensor::concat(&[o, r], 0),
        (Some(o), None) => o,
        (None, Some(r)) => r,
        (None, None) => unreachable!(),
    }
}

/// Question-conditioned node scores, propagated one hop: each node's raw
/// score is the cosine similarity of its feature row with `q_vec`, and
/// the output score of node `t` averages the raw scores of `t` and its
/// in-neighbours (degree-normalized by `in_degree + 1`, which is always
/// invertible). Returns a `[n]` vector.
pub fn node_similarity(x: &Tensor, q_vec: &Tensor, rn: &RnGraph) -> Tensor {
    let n = rn.node_count();
    assert_eq!(x.shape()[0], n, "feature rows {} != node count {n}", x.shape()[0]);
    let raw: Vec<Tensor> = (0..n).map(|i| x.row(i).cosine_similarity(q_vec)).collect();
    let s_c = Tensor::stack(&raw); // [n x 1]
    let adj = rn.adjacency();
    let mut prop = vec![0.0; n * n];
    for t in 0..n {
        let deg = 1.0 + adj[t * n..(t + 1) * n].iter().sum::<f64>();
        for s in 0..n {
            let a = adj[t * n + s] + if s == t { 1.0 } else { 0.0 };
            prop[t * n + s] = a / deg;
        }
    }
    let prop = Tensor::constant(prop, &[n, n]);
    prop.matmul(&s_c).reshape(&[n])
}

/// Uniform fallback used when similarity scoring is ablated: every node
/// scores `1/n`, so downstream argmax picks the lowest index.
pub fn uniform_scores(n: usize) -> Tensor {
    Tensor::constant(vec![1.0 / n as f64; n], &[n])
}

// ===================== Graph attention =====================

/// Per-head score vectors plus shared value/output transforms of the
/// question-conditioned graph attention.
pub struct GatParams {
    /// `[H x d]`: per-head weight dotted with the question vector.
    pub w1: Tensor,
    /// `[H x d]`: per-head weight dotted with the source node.
    pub w2: Tensor,
    /// `[H x d]`: per-head weight dotted with the target node.
    pub w3: Tensor,
    /// `[d x d]`: value projection; head `h` owns columns `h*dh..(h+1)*dh`.
    pub value: Tensor,
    pub ffn: Ffn,
}

impl GatParams {
    pub fn init(
        ps: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> GatParams {
        let std = (1.0 / d as f64).sqrt();
        GatParams {
            w1: ps.register(&format!("{prefix}.w1"), normal_vec(rng, heads * d, std), &[heads, d]),
            w2: ps.register(&format!("{prefix}.w2"), normal_vec(rng, heads * d, std), &[heads, d]),
            w3: ps.register(&format!("{prefix}.w3"), normal_vec(rng, heads * d, std), &[heads, d]),
            value: ps.register(&format!("{prefix}.value"), normal_vec(rng, d * d, std), &[d, d]),
            ffn: Ffn::init(ps, &format!("{prefix}.ffn"), d, hidden, rng),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str) -> GatParams {
        GatParams {
            w1: ps.get(&format!("{prefix}.w1")),
            w2: ps.get(&format!("{prefix}.w2")),
            w3: ps.get(&format!("{prefix}.w3")),
            value: ps.get(&format!("{prefix}.value")),
            ffn: Ffn::bind(ps, &format!("{prefix}.ffn")),
        }
    }
}

pub struct GatOutput {
    /// `[n x d]` updated node features (residual included).
    pub output: Tensor,
    /// One `[n x n]` attention matrix per head; entry `(s, t)` is the
    /// weight of source `s` in the update of target `t`. Columns over a
    /// non-empty source set sum to 1; empty-set columns are all zero.
    pub alphas: Vec<Tensor>,
}

/// Question-conditioned multi-head attention over the RN graph. The
/// source set of node `t` is its in-neighbour set, plus `t` itself when
/// `self_loop` is set. Head messages concatenate to `d` columns, pass
/// through the output feed-forward, and are residual-added to the input.
pub fn graph_attention(
    x: &Tensor,
    q_vec: &Tensor,
    rn: &RnGraph,
    params: &GatParams,
    heads: usize,
    self_loop: bool,
) -> GatOutput {
    let n = rn.node_count();
    let d = x.shape()[1];
    assert_eq!(d % heads, 0, "d ({d}) not divisible by heads ({heads})");
    let dh = d / heads;

    // Additive mask keeping only source-set entries, and a 0/1 column
    // mask zeroing targets whose source set is empty.
    let adj = rn.adjacency();
    let mut mask = vec![-1e9; n * n];
    let mut alive = vec![0.0; n * n];
    for t in 0..n {
        let mut any = false;
        for s in 0..n {
            let in_set = adj[t * n + s] > 0.0 || (self_loop && s == t);
            if in_set {
                mask[s * n + t] = 0.0;
                any = true;
            }
        }
        if any {
            for s in 0..n {
                alive[s * n + t] = 1.0;
            }
        }
    }
    let mask = Tensor::constant(mask, &[n, n]);
    let alive = Tensor::constant(alive, &[n, n]);

    let mut head_msgs = Vec::with_capacity(heads);
    let mut alphas = Vec::with_capacity(heads);
    for h in 0..heads {
        let w1h = params.w1.row(h);
        let w2h = params.w2.row(h);
        let w3h = params.w3.row(h);
        let u = x.matmul(&w2h.reshape(&[d, 1])).reshape(&[n]); // per-source term
        let v = x.matmul(&w3h.reshape(&[d, 1])).reshape(&[n]); // per-target term
        let c = w1h.dot(q_vec);
        let scores = Tensor::outer_add(&u, &v, &c).sigmoid(); // [src x tgt]
        let alpha = scores.add(&mask).softmax(0).mul(&alive);
        let vh = x.matmul(&params.value.slice_cols(h * dh, (h + 1) * dh)); // [n x dh]
        head_msgs.push(alpha.transpose().matmul(&vh)); // [n x dh], row = target
        alphas.push(alpha);
    }
    let concat = Tensor::concat(&head_msgs, 1);
    let output = params.ffn.forward(&concat).add(x);
    GatOutput { output, alphas }
}

// ===================== Aggregation =====================

/// Index of the maximum, lowest index on ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Selects the feature row of the highest-scoring node. The caller
/// handles empty graphs (there is no row to select).
pub fn graph_aggregate(x: &Tensor, scores: &Tensor) -> Tensor {
    let n = x.shape()[0];
    assert!(n > 0, "graph_aggregate on an empty graph");
    assert_eq!(scores.numel(), n, "score count {} != node count {n}", scores.numel());
    let idx = argmax_first(&scores.data());
    x.row(idx)
}

// ===================== Triplets =====================

/// One feature row per relation: the projection of
/// `[emb(src label) | emb(rel label) | emb(dst label)]` from `3d` to `d`
/// columns. Returns `None` for a relation-free frame.
pub fn build_triplets(
    rn: &RnGraph,
    obj_table: &Tensor,
    rel_table: &Tensor,
    proj_w: &Tensor,
    proj_b: &Tensor,
) -> Option<Tensor> {
    if rn.n_relations() == 0 {
        return None;
    }
    let rels = rn.recover_relations();
    let src_labels: Vec<usize> = rels.iter().map(|(s, _, _)| rn.object_labels[*s]).collect();
    let dst_labels: Vec<usize> = rels.iter().map(|(_, _, d)| rn.object_labels[*d]).collect();
    let rel_labels: Vec<usize> = rels.iter().map(|(_, r, _)| *r).collect();
    let e_src = obj_table.embedding_lookup(&src_labels);
    let e_rel = rel_table.embedding_lookup(&rel_labels);
    let e_dst = obj_table.embedding_lookup(&dst_labels);
    let cat = Tensor::concat(&[e_src, e_rel, e_dst], 1); // [M x 3d]
    Some(cat.matmul(proj_w).add(proj_b))
}

/// Cosine similarity of each triplet row with the question vector, `[M]`.
pub fn triplet_similarity(triplets: &Tensor, q_vec: &Tensor) -> Tensor {
    let m = triplets.shape()[0];
    let raw: Vec<Tensor> = (0..m).map(|i| triplets.row(i).cosine_similarity(q_vec)).collect();
    Tensor::stack(&raw).reshape(&[m])
}

/// Selects the highest-scoring triplet row (lowest index on ties).
pub fn triplet_aggregate(triplets: &Tensor, scores: &Tensor) -> Tensor {
    graph_aggregate(triplets, scores)
}

// ===================== Tests =====================
