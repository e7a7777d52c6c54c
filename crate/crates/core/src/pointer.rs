//! Output mixer: two scalar gates, computed from decoder/context states
//! by learned d->1 projections, convexly combine the fused-decoder and
//! text-decoder vocabulary distributions at every step.
//!
//! Gate algebra worth knowing: in `multi` mode the two logits run through
//! a 2-way softmax, so the three projections shared between them
//! (previous token, pooled memory, question) shift both logits equally
//! and cancel — their gradients under this mode are analytically zero
//! (floating-point noise near machine epsilon in practice). They become
//! live in `single` mode, where only the first logit exists. The
//! liveness audit in the tests works per mode.

use crate::config::{PointerMode, PointerPairing};
use crate::tensor::{normal_vec, ParamStore, Tensor};
use rand::Rng;

/// Per-step context feeding the gates; every field is a `[d]` vector.
pub struct PointerInputs {
    /// Text-decoder state at this position.
    pub text_state: Tensor,
    /// Fused-decoder state at this position.
    pub graph_state: Tensor,
    /// Embedding of the previously emitted token (BOS embedding at the
    /// first step).
    pub prev_token: Tensor,
    /// Mean-pooled fused encoder memory.
    pub pooled_memory: Tensor,
    /// Question vector.
    pub question: Tensor,
}

/// The five d->1 gate projections. `gate_text`/`gate_graph` are exclusive
/// to one logit each; the other three are shared by both logits.
pub struct PointerParams {
    pub gate_text: Tensor,
    pub gate_graph: Tensor,
    pub gate_prev: Tensor,
    pub gate_memory: Tensor,
    pub gate_question: Tensor,
}

impl PointerParams {
    pub fn init(ps: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> PointerParams {
        let std = (1.0 / d as f64).sqrt();
        let mut reg = |name: &str| {
            ps.register(&format!("{prefix}.{name}"), normal_vec(rng, d, std), &[d])
        };
        PointerParams {
            gate_text: reg("gate_text"),
            gate_graph: reg("gate_graph"),
            gate_prev: reg("gate_prev"),
            gate_memory: reg("gate_memory"),
            gate_question: reg("gate_question"),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str) -> PointerParams {
        PointerParams {
            gate_text: ps.get(&format!("{prefix}.gate_text")),
            gate_graph: ps.get(&format!("{prefix}.gate_graph")),
            gate_prev: ps.get(&format!("{prefix}.gate_prev")),
            gate_memory: ps.get(&format!("{prefix}.gate_memory")),
            gate_question: ps.get(&format!("{prefix}.gate_question")),
        }
    }
}

/// Raw gate logits, each `[1]`: the first from the text-decoder state,
/// the second from the fused-decoder state, both plus the three shared
/// context terms.
pub fn pointer_logits(inputs: &PointerInputs, params: &PointerParams) -> (Tensor, Tensor) {
    let shared = params
        .gate_prev
        .dot(&inputs.prev_token)
        .add(&params.gate_memory.dot(&inputs.pooled_memory))
        .add(&params.gate_question.dot(&inputs.question));
    let p1 = params.gate_text.dot(&inputs.text_state).add(&shared);
    let p2 = params.gate_graph.dot(&inputs.graph_state).add(&shared);
    (p1, p2)
}

fn elem(v: &Tensor, i: usize) -> Tensor {
    let n = v.numel();
    v.reshape(&[n, 1]).slice_rows(i, i + 1).reshape(&[1])
}

/// Turns the raw logits into a convex pair `(p1, p2)`, `p1 + p2 = 1`:
/// `multi` couples both logits through a softmax, `single` gates on the
/// first logit alone (`p2 = 1 - p1`), `none` fixes both at exactly 0.5.
pub fn pointer_values(p1_logit: &Tensor, p2_logit: &Tensor, mode: PointerMode) -> (Tensor, Tensor) {
    match mode {
        PointerMode::Multi => {
            let sm = Tensor::concat(&[p1_logit.clone(), p2_logit.clone()], 0).softmax(0);
            (elem(&sm, 0), elem(&sm, 1))
        }
        PointerMode::Single => {
            let p1 = p1_logit.sigmoid();
            let p2 = Tensor::constant(vec![1.0], &[1]).add(&p1.scale(-1.0));
            (p1, p2)
        }
        PointerMode::None => (
            Tensor::constant(vec![0.5], &[1]),
            Tensor::constant(vec![0.5], &[1]),
        ),
    }
}

/// Convex mixture of the two per-step vocabulary distributions. With
/// `AsPrinted` pairing, `p1` (the text-state gate) scales the fused-side
/// distribution; `Aligned` pairs each gate with its own decoder's
/// distribution. Both inputs must already be probability distributions.
pub fn mix(
    p1: &Tensor,
    p2: &Tensor,
    dist_fused: &Tensor,
    dist_text: &Tensor,
    pairing: PointerPairing,
) -> Tensor {
    for (name, dist) in [("fused", dist_fused), ("text", dist_text)] {
        let s: f64 = dist.data().iter().sum();
        assert!(
            (s - 1.0).abs() < 1e-6,
            "mix requires probability distributions; {name} side sums to {s}"
        );
    }
    match pairing {
        PointerPairing::AsPrinted => dist_fused.mul(p1).add(&dist_text.mul(p2)),
        PointerPairing::Aligned => dist_text.mul(p1).add(&dist_fused.mul(p2)),
    }
}
