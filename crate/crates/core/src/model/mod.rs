//! The navigation model: embeddings, text encoder, feature encoders,
//! cross-modal blocks, per-module scoring and the fused action head.
//!
//! Everything here is a pure function of parameters and inputs; episode
//! control flow (stepping through a house, teacher forcing, sampling) lives
//! in [`crate::agent`]. All forwards build onto a caller-supplied [`Graph`],
//! so one backward pass covers whatever mixture of losses the caller wired.
//!
//! Text is padded to a fixed length at the tokenizer level, but the encoder
//! runs on the real-length prefix only. Attention therefore never sees a
//! padded key position; the masked-softmax path still exists (and is tested)
//! for callers that batch unequal lengths.

mod attention;

use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::Result;
use crate::rng::stream;
use crate::tensor::{Graph, Param, ParamSet, Tensor};
use crate::world::vocab::{self, Vocabulary};
use crate::world::ORIENTATION_DIM;

/// Token budget per instruction: `[CLS]`, up to 62 words, `[SEP]`.
pub const MAX_TOKENS: usize = 64;

/// Standard deviation for Gaussian weight init.
pub const INIT_SIGMA: f64 = 0.02;

/// Width multiplier for the feed-forward sublayers.
pub const FFN_MULT: usize = 4;

/// The three scoring modules. History is always present; orientation and
/// vision can be ablated away.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    History,
    Orientation,
    Vision,
}

impl Module {
    /// Short tag used in parameter names.
    pub fn tag(self) -> &'static str {
        match self {
            Module::History => "h",
            Module::Orientation => "o",
            Module::Vision => "v",
        }
    }
}

/// Model dimensions, copied out of the run config.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub d_model: usize,
    pub heads: usize,
    pub n_text: usize,
    pub n_cross: usize,
    pub d_v: usize,
    pub vocab: usize,
}

impl Dims {
    pub fn from_config(cfg: &Config) -> Self {
        Dims {
            d_model: cfg.d_model,
            heads: cfg.heads,
            n_text: cfg.n_text,
            n_cross: cfg.n_cross,
            d_v: cfg.d_v,
            vocab: Vocabulary::new().len(),
        }
    }
}

/// A tokenized instruction, padded to [`MAX_TOKENS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    /// Exactly [`MAX_TOKENS`] ids: `[CLS] words... [SEP] [PAD]*`.
    pub ids: Vec<usize>,
    /// True at real (non-pad) positions.
    pub mask: Vec<bool>,
    pub real_len: usize,
}

impl Tokenized {
    /// The non-pad prefix.
    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.real_len]
    }
}

/// Wrap an instruction in `[CLS]`/`[SEP]`, pad to the fixed length, and
/// truncate over-long inputs so the final real token is always `[SEP]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Tokenized> {
    let mut ids = Vec::with_capacity(MAX_TOKENS);
    ids.push(vocab::CLS);
    for word in text.split_whitespace() {
        ids.push(vocab.id(word)?);
    }
    ids.push(vocab::SEP);
    if ids.len() > MAX_TOKENS {
        ids.truncate(MAX_TOKENS);
        ids[MAX_TOKENS - 1] = vocab::SEP;
    }
    let real_len = ids.len();
    ids.resize(MAX_TOKENS, vocab::PAD);
    let mask = (0..MAX_TOKENS).map(|i| i < real_len).collect();
    Ok(Tokenized {
        ids,
        mask,
        real_len,
    })
}

/// Encoded instruction: `x` holds one row per real token, row 0 is `[CLS]`.
pub struct TextEncoding {
    pub x: Tensor,
    pub ids: Vec<usize>,
}

pub struct Model {
    dims: Dims,
    params: ParamSet,
}

impl Model {
    /// Build all parameters. Weights are Gaussian, biases zero, layer-norm
    /// gains one; the fusion selector starts at all-ones so every module
    /// contributes equally until trained.
    pub fn new(cfg: &Config, seed: u64) -> Model {
        let dims = Dims::from_config(cfg);
        let mut rng = stream(seed, "model-init", 0);
        let mut b = Builder {
            set: ParamSet::new(),
            rng: &mut rng,
        };
        let d = dims.d_model;

        b.weights("embed.token", &[dims.vocab, d]);
        b.weights("embed.pos", &[MAX_TOKENS, d]);
        b.weights("embed.type", &[2, d]);
        b.layer_norm("embed.ln", d);

        for i in 0..dims.n_text {
            b.block(&format!("text{i}"), d);
        }

        b.linear("enc_vo", dims.d_v + ORIENTATION_DIM, d);
        b.layer_norm("enc_vo.ln", d);
        b.linear("enc_o", ORIENTATION_DIM, d);
        b.layer_norm("enc_o.ln", d);
        b.linear("enc_v", dims.d_v, d);
        b.layer_norm("enc_v.ln", d);

        for m in [Module::History, Module::Orientation, Module::Vision] {
            for j in 0..dims.n_cross {
                let p = format!("cross_{}{j}", m.tag());
                b.block(&format!("{p}.q"), d);
                b.block(&format!("{p}.kv"), d);
            }
        }

        b.block("self_h", d);

        for m in [Module::History, Module::Orientation, Module::Vision] {
            let p = format!("score_{}", m.tag());
            b.attn_pair(&format!("{p}.wq"), &format!("{p}.bq"), d);
            b.attn_pair(&format!("{p}.wk"), &format!("{p}.bk"), d);
        }

        b.set.register(Param::full("fusion.w", &[3], 1.0));

        b.linear("head_mlm", d, dims.vocab);
        b.linear("head_vm", d, 1);
        b.linear("head_om", d, 4);
        b.linear("head_baseline", d, 1);

        Model {
            dims,
            params: b.set,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Fetch a named parameter as a graph leaf.
    pub(crate) fn pt(&self, g: &Graph, name: &str) -> Tensor {
        let p = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("model has no parameter named {name:?}"));
        g.param(p)
    }

    /// Token + position + type(0) embeddings, layer-normed. `ids` must be
    /// the real-length prefix (no pads).
    pub fn embed_text(&self, g: &Graph, ids: &[usize]) -> Tensor {
        let l = ids.len();
        assert!(
            (1..=MAX_TOKENS).contains(&l),
            "embed_text: {l} tokens exceeds the {MAX_TOKENS}-token budget"
        );
        let tok = g.gather_rows(&self.pt(g, "embed.token"), ids);
        let pos = self.pt(g, "embed.pos").rows(0, l);
        let typ = g.gather_rows(&self.pt(g, "embed.type"), &vec![0; l]);
        tok.add(&pos).add(&typ).layer_norm(
            &self.pt(g, "embed.ln.g"),
            &self.pt(g, "embed.ln.b"),
        )
    }

    /// Run the self-attention text encoder over the real tokens.
    pub fn encode_text(&self, g: &Graph, tok: &Tokenized) -> TextEncoding {
        let ids = tok.real_ids();
        let mut x = self.embed_text(g, ids);
        for i in 0..self.dims.n_text {
            x = self.encoder_block(g, &format!("text{i}"), &x, None);
        }
        TextEncoding {
            x,
            ids: ids.to_vec(),
        }
    }

    /// Joint vision + orientation candidate features: linear projection of
    /// the concatenation, plus the visual type embedding, layer-normed.
    pub fn encode_vision_orientation(&self, g: &Graph, v: &Tensor, o: &Tensor) -> Tensor {
        assert_eq!(v.dim(0), o.dim(0), "candidate count mismatch");
        assert_eq!(v.dim(1), self.dims.d_v, "vision feature width");
        assert_eq!(o.dim(1), ORIENTATION_DIM, "orientation feature width");
        let x = g.concat_cols(&[v.clone(), o.clone()]);
        self.feature_encode(g, "enc_vo", &x)
    }

    /// Orientation-only candidate features.
    pub fn encode_orientation(&self, g: &Graph, o: &Tensor) -> Tensor {
        assert_eq!(o.dim(1), ORIENTATION_DIM, "orientation feature width");
        self.feature_encode(g, "enc_o", o)
    }

    /// Vision-only candidate features.
    pub fn encode_vision(&self, g: &Graph, v: &Tensor) -> Tensor {
        assert_eq!(v.dim(1), self.dims.d_v, "vision feature width");
        self.feature_encode(g, "enc_v", v)
    }

    fn feature_encode(&self, g: &Graph, prefix: &str, x: &Tensor) -> Tensor {
        let proj = x
            .matmul(&self.pt(g, &format!("{prefix}.w")))
            .add_row(&self.pt(g, &format!("{prefix}.b")));
        let typ = g.gather_rows(&self.pt(g, "embed.type"), &vec![1; x.dim(0)]);
        proj.add(&typ).layer_norm(
            &self.pt(g, &format!("{prefix}.ln.g")),
            &self.pt(g, &format!("{prefix}.ln.b")),
        )
    }

    /// Single-head scoring attention for one module: the state row (row 0)
    /// queries the candidate rows (rows 1..). Returns pre-softmax logits,
    /// one per candidate.
    pub fn score(&self, g: &Graph, module: Module, seq: &Tensor) -> Tensor {
        let d = self.dims.d_model;
        let n = seq.dim(0) - 1;
        assert!(n >= 1, "score: sequence needs at least one candidate row");
        let p = format!("score_{}", module.tag());
        let q = seq
            .rows(0, 1)
            .matmul(&self.pt(g, &format!("{p}.wq")))
            .add_row(&self.pt(g, &format!("{p}.bq")));
        let k = seq
            .rows(1, n)
            .matmul(&self.pt(g, &format!("{p}.wk")))
            .add_row(&self.pt(g, &format!("{p}.bk")));
        q.matmul(&k.t())
            .scale(1.0 / (d as f64).sqrt())
            .reshape(&[n])
    }

    /// Combine per-module candidate scores with the learned selector into
    /// fused pre-softmax action logits. Disabled modules pass `None` and
    /// leave their selector entry untouched by gradients.
    pub fn fuse_logits(
        &self,
        g: &Graph,
        p_h: &Tensor,
        p_o: Option<&Tensor>,
        p_v: Option<&Tensor>,
    ) -> Tensor {
        let w = self.pt(g, "fusion.w").reshape(&[3, 1]);
        let mut logits = p_h.scale_by(&w.rows(0, 1));
        if let Some(p) = p_o {
            logits = logits.add(&p.scale_by(&w.rows(1, 1)));
        }
        if let Some(p) = p_v {
            logits = logits.add(&p.scale_by(&w.rows(2, 1)));
        }
        logits
    }

    /// Apply a named affine head (`head_mlm`, `head_vm`, `head_om`,
    /// `head_baseline`) to each row of `x`.
    pub fn head(&self, g: &Graph, name: &str, x: &Tensor) -> Tensor {
        x.matmul(&self.pt(g, &format!("{name}.w")))
            .add_row(&self.pt(g, &format!("{name}.b")))
    }
}

struct Builder<'a> {
    set: ParamSet,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn weights(&mut self, name: &str, shape: &[usize]) {
        self.set
            .register(Param::randn(name, shape, INIT_SIGMA, self.rng));
    }

    fn attn_pair(&mut self, w_name: &str, b_name: &str, d: usize) {
        self.weights(w_name, &[d, d]);
        self.set.register(Param::zeros(b_name, &[d]));
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.weights(&format!("{prefix}.w"), &[d_in, d_out]);
        self.set
            .register(Param::zeros(&format!("{prefix}.b"), &[d_out]));
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.set
            .register(Param::full(&format!("{prefix}.g"), &[d], 1.0));
        self.set
            .register(Param::zeros(&format!("{prefix}.b"), &[d]));
    }

    /// One transformer block: multi-head attention, then a feed-forward
    /// sublayer, each with residual + post-layer-norm.
    fn block(&mut self, prefix: &str, d: usize) {
        for side in ["wq", "wk", "wv", "wo"] {
            self.weights(&format!("{prefix}.attn.{side}"), &[d, d]);
        }
        for side in ["bq", "bk", "bv", "bo"] {
            self.set
                .register(Param::zeros(&format!("{prefix}.attn.{side}"), &[d]));
        }
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.weights(&format!("{prefix}.ffn.w1"), &[d, FFN_MULT * d]);
        self.set
            .register(Param::zeros(&format!("{prefix}.ffn.b1"), &[FFN_MULT * d]));
        self.weights(&format!("{prefix}.ffn.w2"), &[FFN_MULT * d, d]);
        self.set
            .register(Param::zeros(&format!("{prefix}.ffn.b2"), &[d]));
        self.layer_norm(&format!("{prefix}.ln2"), d);
    }
}
