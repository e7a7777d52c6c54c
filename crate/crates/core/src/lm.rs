//! Sequence-model building blocks: linear/feed-forward/layer-norm
//! wrappers, scaled dot-product multi-head attention, encoder and decoder
//! layers with selectable norm placement, and sinusoidal positions.
//!
//! Every block exists in two forms: `init` registers fresh parameters
//! into a [`ParamStore`] under a dotted prefix, `bind` picks up the same
//! names from an already-populated store (checkpoint restore). Names are
//! the contract: `bind` after `init` with the same prefix is the
//! identity.

use crate::tensor::{normal_vec, ParamStore, Tensor};
use rand::Rng;

/// Row-wise affine map `x @ w + b` with `w: [in x out]`, `b: [out]`.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(ps: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        let std = (1.0 / fan_in as f64).sqrt();
        Linear {
            w: ps.register(&format!("{prefix}.w"), normal_vec(rng, fan_in * fan_out, std), &[fan_in, fan_out]),
            b: ps.register(&format!("{prefix}.b"), vec![0.0; fan_out], &[fan_out]),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str) -> Linear {
        Linear { w: ps.get(&format!("{prefix}.w")), b: ps.get(&format!("{prefix}.b")) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add(&self.b)
    }
}

/// Two-layer feed-forward block `gelu(x @ w1 + b1) @ w2 + b2`.
pub struct Ffn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Ffn {
    pub fn init(ps: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Ffn {
        let s1 = (1.0 / d as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Ffn {
            w1: ps.register(&format!("{prefix}.w1"), normal_vec(rng, d * hidden, s1), &[d, hidden]),
            b1: ps.register(&format!("{prefix}.b1"), vec![0.0; hidden], &[hidden]),
            w2: ps.register(&format!("{prefix}.w2"), normal_vec(rng, hidden * d, s2), &[hidden, d]),
            b2: ps.register(&format!("{prefix}.b2"), vec![0.0; d], &[d]),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str) -> Ffn {
        Ffn {
            w1: ps.get(&format!("{prefix}.w1")),
            b1: ps.get(&format!("{prefix}.b1")),
            w2: ps.get(&format!("{prefix}.w2")),
            b2: ps.get(&format!("{prefix}.b2")),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w1).add(&self.b1).gelu().matmul(&self.w2).add(&self.b2)
    }
}

/// Learned gain/bias pair for per-row layer normalization.
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    pub fn init(ps: &mut ParamStore, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: ps.register(&format!("{prefix}.gain"), vec![1.0; d], &[d]),
            bias: ps.register(&format!("{prefix}.bias"), vec![0.0; d], &[d]),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str) -> Norm {
        Norm { gain: ps.get(&format!("{prefix}.gain")), bias: ps.get(&format!("{prefix}.bias")) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gain, &self.bias)
    }
}

/// Multi-head scaled dot-product attention. Head `h` owns column block
/// `h*dh..(h+1)*dh` of each projection. The key projection carries no
/// bias: a shared key offset shifts every logit of a query by the same
/// amount and cancels in the row softmax, so such a parameter would be
/// unidentifiable.
pub struct Mha {
    pub q: Linear,
    pub k_w: Tensor,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn init(ps: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Mha {
        assert_eq!(d % heads, 0, "d ({d}) not divisible by heads ({heads})");
        let std = (1.0 / d as f64).sqrt();
        Mha {
            q: Linear::init(ps, &format!("{prefix}.q"), d, d, rng),
            k_w: ps.register(&format!("{prefix}.k.w"), normal_vec(rng, d * d, std), &[d, d]),
            v: Linear::init(ps, &format!("{prefix}.v"), d, d, rng),
            o: Linear::init(ps, &format!("{prefix}.o"), d, d, rng),
            heads,
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str, heads: usize) -> Mha {
        Mha {
            q: Linear::bind(ps, &format!("{prefix}.q")),
            k_w: ps.get(&format!("{prefix}.k.w")),
            v: Linear::bind(ps, &format!("{prefix}.v")),
            o: Linear::bind(ps, &format!("{prefix}.o")),
            heads,
        }
    }

    /// `queries: [Lq x d]`, `keys: [Lk x d]`; `mask` is additive
    /// (`[Lq x Lk]`, 0 = visible) and applied before the row softmax.
    pub fn forward(&self, queries: &Tensor, keys: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let d = queries.shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qp = self.q.forward(queries);
        let kp = keys.matmul(&self.k_w);
        let vp = self.v.forward(keys);
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = qp.slice_cols(h * dh, (h + 1) * dh);
            let kh = kp.slice_cols(h * dh, (h + 1) * dh);
            let vh = vp.slice_cols(h * dh, (h + 1) * dh);
            let mut scores = qh.matmul(&kh.transpose()).scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m);
            }
            ctx.push(scores.softmax(1).matmul(&vh));
        }
        self.o.forward(&Tensor::concat(&ctx, 1))
    }
}

/// Additive causal mask: position `i` sees `j <= i`.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            m[i * len + j] = -1e9;
        }
    }
    Tensor::constant(m, &[len, len])
}

/// Fixed sinusoidal position table `[len x d]`:
/// `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    assert_eq!(d % 2, 0, "position table needs an even width");
    let mut pe = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d / 2 {
            let div = 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[p * d + 2 * i] = (p as f64 / div).sin();
            pe[p * d + 2 * i + 1] = (p as f64 / div).cos();
        }
    }
    Tensor::constant(pe, &[len, d])
}

/// Self-attention + feed-forward with residuals. `pre_norm` selects
/// whether normalization wraps the sublayer input (pre) or the residual
/// sum (post).
pub struct EncoderLayer {
    pub attn: Mha,
    pub ffn: Ffn,
    pub norm1: Norm,
    pub norm2: Norm,
}

impl EncoderLayer {
    pub fn init(ps: &mut ParamStore, prefix: &str, d: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> EncoderLayer {
        EncoderLayer {
            attn: Mha::init(ps, &format!("{prefix}.attn"), d, heads, rng),
            ffn: Ffn::init(ps, &format!("{prefix}.ffn"), d, hidden, rng),
            norm1: Norm::init(ps, &format!("{prefix}.norm1"), d),
            norm2: Norm::init(ps, &format!("{prefix}.norm2"), d),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str, heads: usize) -> EncoderLayer {
        EncoderLayer {
            attn: Mha::bind(ps, &format!("{prefix}.attn"), heads),
            ffn: Ffn::bind(ps, &format!("{prefix}.ffn")),
            norm1: Norm::bind(ps, &format!("{prefix}.norm1")),
            norm2: Norm::bind(ps, &format!("{prefix}.norm2")),
        }
    }

    pub fn forward(&self, x: &Tensor, pre_norm: bool) -> Tensor {
        if pre_norm {
            let h = self.norm1.forward(x);
            let x = x.add(&self.attn.forward(&h, &h, None));
            let h = self.norm2.forward(&x);
            x.add(&self.ffn.forward(&h))
        } else {
            let x = self.norm1.forward(&x.add(&self.attn.forward(x, x, None)));
            self.norm2.forward(&x.add(&self.ffn.forward(&x)))
        }
    }
}

/// Causal self-attention, cross-attention over an external memory, and
/// feed-forward, each residual.
pub struct DecoderLayer {
    pub self_attn: Mha,
    pub cross_attn: Mha,
    pub ffn: Ffn,
    pub norm1: Norm,
    pub norm2: Norm,
    pub norm3: Norm,
}

impl DecoderLayer {
    pub fn init(ps: &mut ParamStore, prefix: &str, d: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> DecoderLayer {
        DecoderLayer {
            self_attn: Mha::init(ps, &format!("{prefix}.self_attn"), d, heads, rng),
            cross_attn: Mha::init(ps, &format!("{prefix}.cross_attn"), d, heads, rng),
            ffn: Ffn::init(ps, &format!("{prefix}.ffn"), d, hidden, rng),
            norm1: Norm::init(ps, &format!("{prefix}.norm1"), d),
            norm2: Norm::init(ps, &format!("{prefix}.norm2"), d),
            norm3: Norm::init(ps, &format!("{prefix}.norm3"), d),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str, heads: usize) -> DecoderLayer {
        DecoderLayer {
            self_attn: Mha::bind(ps, &format!("{prefix}.self_attn"), heads),
            cross_attn: Mha::bind(ps, &format!("{prefix}.cross_attn"), heads),
            ffn: Ffn::bind(ps, &format!("{prefix}.ffn")),
            norm1: Norm::bind(ps, &format!("{prefix}.norm1")),
            norm2: Norm::bind(ps, &format!("{prefix}.norm2")),
            norm3: Norm::bind(ps, &format!("{prefix}.norm3")),
        }
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor, causal: &Tensor, pre_norm: bool) -> Tensor {
        if pre_norm {
            let h = self.norm1.forward(x);
            let x = x.add(&self.self_attn.forward(&h, &h, Some(causal)));
            let h = self.norm2.forward(&x);
            let x = x.add(&self.cross_attn.forward(&h, memory, None));
            let h = self.norm3.forward(&x);
            x.add(&self.ffn.forward(&h))
        } else {
            let x = self.norm1.forward(&x.add(&self.self_attn.forward(x, x, Some(causal))));
            let x = self.norm2.forward(&x.add(&self.cross_attn.forward(&x, memory, None)));
            self.norm3.forward(&x.add(&self.ffn.forward(&x)))
        }
    }
}

/// Layer stack with a final normalization applied in both norm
/// placements, so the output scale is stable either way.
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Norm,
}

impl Encoder {
    pub fn init(ps: &mut ParamStore, prefix: &str, n_layers: usize, d: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Encoder {
        Encoder {
            layers: (0..n_layers)
                .map(|i| EncoderLayer::init(ps, &format!("{prefix}.layer{i}"), d, heads, hidden, rng))
                .collect(),
            final_norm: Norm::init(ps, &format!("{prefix}.final_norm"), d),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str, n_layers: usize, heads: usize) -> Encoder {
        Encoder {
            layers: (0..n_layers)
                .map(|i| EncoderLayer::bind(ps, &format!("{prefix}.layer{i}"), heads))
                .collect(),
            final_norm: Norm::bind(ps, &format!("{prefix}.final_norm")),
        }
    }

    pub fn forward(&self, x: &Tensor, pre_norm: bool) -> Tensor {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, pre_norm);
        }
        self.final_norm.forward(&h)
    }
}

pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Norm,
}

impl Decoder {
    pub fn init(ps: &mut ParamStore, prefix: &str, n_layers: usize, d: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Decoder {
        Decoder {
            layers: (0..n_layers)
                .map(|i| DecoderLayer::init(ps, &format!("{prefix}.layer{i}"), d, heads, hidden, rng))
                .collect(),
            final_norm: Norm::init(ps, &format!("{prefix}.final_norm"), d),
        }
    }

    pub fn bind(ps: &ParamStore, prefix: &str, n_layers: usize, heads: usize) -> Decoder {
        Decoder {
            layers: (0..n_layers)
                .map(|i| DecoderLayer::bind(ps, &format!("{prefix}.layer{i}"), heads))
                .collect(),
            final_norm: Norm::bind(ps, &format!("{prefix}.final_norm")),
        }
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor, pre_norm: bool) -> Tensor {
        let causal = causal_mask(x.shape()[0]);
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, memory, &causal, pre_norm);
        }
        self.final_norm.forward(&h)
    }
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
/// Number of reserved ids at the bottom of every vocabulary.
pub const RESERVED: usize = 5;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Whitespace-token vocabulary with dense ids. Ids `0..RESERVED` are
/// fixed control tokens; word ids follow in insertion order, so the
/// saved file (one word per line) maps line number `k` to id
/// `RESERVED + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    token_to_id: std::collections::BTreeMap<String, usize>,
    words: Vec<String>,
}

impl Vocab {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Vocab {
        let mut v = Vocab { token_to_id: std::collections::BTreeMap::new(), words: Vec::new() };
        for w in words {
            let w: String = w.into();
            assert!(!w.is_empty() && !w.contains(char::is_whitespace), "invalid vocab word {w:?}");
            if !v.token_to_id.contains_key(&w) && !RESERVED_TOKENS.contains(&w.as_str()) {
                v.token_to_id.insert(w.clone(), RESERVED + v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        RESERVED + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        if let Some(pos) = RESERVED_TOKENS.iter().position(|t| *t == token) {
            return pos;
        }
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        if id < RESERVED {
            RESERVED_TOKENS[id]
        } else {
            &self.words[id - RESERVED]
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins word tokens with single spaces; control ids are dropped, so
    /// decoded sequences read cleanly without BOS/EOS bookkeeping.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> =
            ids.iter().filter(|id| **id >= RESERVED).map(|id| self.token(*id)).collect();
        words.join(" ")
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut body = self.words.join("\n");
        if !self.words.is_empty() {
            body.push('\n');
        }
        std::fs::write(path, body)
    }

    pub fn load(path: &std::path::Path) -> crate::error::Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let mut words = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let w = line.trim();
            if w.is_empty() {
                return Err(crate::error::Error::Validation(format!(
                    "{}:{}: blank vocabulary line",
                    path.display(),
                    lineno + 1
                )));
            }
            words.push(w.to_string());
        }
        let v = Vocab::new(words.iter().cloned());
        if v.words.len() != words.len() {
            return Err(crate::error::Error::Validation(format!(
                "{}: duplicate or reserved word in vocabulary file",
                path.display()
            )));
        }
        Ok(v)
    }
}
