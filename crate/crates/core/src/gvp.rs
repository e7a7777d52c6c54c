//! Multimodal fusion blocks. One block shape serves every fusion site:
//! cross-attention from a query track into a memory track, then a
//! feed-forward, both residual, with norm placement following the global
//! convention. The encoder side fuses coarse video windows and per-frame
//! graph summaries into a lengthened cross-attention memory; the decoder
//! side fuses fine video windows and per-frame triplet summaries into the
//! decoder output.

use crate::lm::{Ffn, Mha, Norm};
use crate::tensor::{ParamStore, Tensor};
use rand::Rng;

/// `FFN(q + MHA(query=q, key/value=memory))` with residuals and layer
/// norms; preserves the query's sequence length.
pub struct FusionBlock {
    pub attn: Mha,
    pub ffn: Ffn,
    pub norm1: Norm,
    pub norm2: Norm,
}

impl FusionBlock {
    pub fn init(ps: &mut ParamStore, prefix: &str, d: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> FusionBlock {
        FusionBlock {
            attn: Mha::init(ps, &format!("{prefix}.attn"), d, heads, rng),
            ffn: Ffn::init(ps, &format!("{prefix}.ffn"), d, hidden, rng),
            norm1: Norm::init(ps, &format!("{prefix}.norm1"), d),
            norm2: Norm::init(ps, &format!("{prefix}.norm2"), d),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str, heads: usize) -> FusionBlock {
        FusionBlock {
            attn: Mha::bind(ps, &format!("{prefix}.attn"), heads),
            ffn: Ffn::bind(ps, &format!("{prefix}.ffn")),
            norm1: Norm::bind(ps, &format!("{prefix}.norm1")),
            norm2: Norm::bind(ps, &format!("{prefix}.norm2")),
        }
    }

    pub fn forward(&self, query: &Tensor, memory: &Tensor, pre_norm: bool) -> Tensor {
        if pre_norm {
            let h = self.norm1.forward(query);
            let x = query.add(&self.attn.forward(&h, memory, None));
            let h = self.norm2.forward(&x);
            x.add(&self.ffn.forward(&h))
        } else {
            let x = self.norm1.forward(&query.add(&self.attn.forward(query, memory, None)));
            self.norm2.forward(&x.add(&self.ffn.forward(&x)))
        }
    }
}

/// Cross-attention memory assembled from up to three tracks, in the fixed
/// order text, video, graph. Block boundaries are retained so reports and
/// probes can attribute attention mass; the order itself is part of the
/// contract (no positional re-encoding happens here).
pub struct FusedMemory {
    pub memory: Tensor,
    pub text_len: usize,
    pub video_len: usize,
    pub graph_len: usize,
}

impl FusedMemory {
    pub fn len(&self) -> usize {
        self.text_len + self.video_len + self.graph_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concatenates the available tracks along the sequence axis. A `None`
/// track (an ablated branch) is removed entirely rather than zeroed, so
/// cross-attention cannot spend mass on it.
pub fn assemble_memory(y_text: &Tensor, y_video: Option<&Tensor>, y_graph: Option<&Tensor>) -> FusedMemory {
    let mut parts = vec![y_text.clone()];
    let video_len = y_video.map_or(0, |t| t.shape()[0]);
    let graph_len = y_graph.map_or(0, |t| t.shape()[0]);
    if let Some(v) = y_video {
        parts.push(v.clone());
    }
    if let Some(g) = y_graph {
        parts.push(g.clone());
    }
    let memory = if parts.len() == 1 { parts[0].clone() } else { Tensor::concat(&parts, 0) };
    FusedMemory { memory, text_len: y_text.shape()[0], video_len, graph_len }
}
