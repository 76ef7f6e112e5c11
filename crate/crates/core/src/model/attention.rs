//! Attention primitives: multi-head attention, the standard transformer
//! block, and the bidirectional cross-modal block.

use crate::tensor::{Graph, Tensor};

use super::Model;

impl Model {
    /// Multi-head attention. `q_in` supplies queries, `kv_in` keys and
    /// values; `key_mask` (if given) zeroes attention onto masked key
    /// positions. Returns the projected output and the head-averaged
    /// attention matrix (queries by keys, rows summing to one).
    pub(crate) fn mha(
        &self,
        g: &Graph,
        prefix: &str,
        q_in: &Tensor,
        kv_in: &Tensor,
        key_mask: Option<&[bool]>,
    ) -> (Tensor, Tensor) {
        let d = self.dims.d_model;
        let heads = self.dims.heads;
        let dh = d / heads;
        let q = q_in
            .matmul(&self.pt(g, &format!("{prefix}.wq")))
            .add_row(&self.pt(g, &format!("{prefix}.bq")));
        let k = kv_in
            .matmul(&self.pt(g, &format!("{prefix}.wk")))
            .add_row(&self.pt(g, &format!("{prefix}.bk")));
        let v = kv_in
            .matmul(&self.pt(g, &format!("{prefix}.wv")))
            .add_row(&self.pt(g, &format!("{prefix}.bv")));
        let scale = 1.0 / (dh as f64).sqrt();

        let mut contexts = Vec::with_capacity(heads);
        let mut attn_sum: Option<Tensor> = None;
        for h in 0..heads {
            let qh = q.cols(h * dh, dh);
            let kh = k.cols(h * dh, dh);
            let vh = v.cols(h * dh, dh);
            let probs = qh
                .matmul(&kh.t())
                .scale(scale)
                .masked_softmax_rows(key_mask);
            contexts.push(probs.matmul(&vh));
            attn_sum = Some(match attn_sum {
                Some(s) => s.add(&probs),
                None => probs,
            });
        }
        let out = g
            .concat_cols(&contexts)
            .matmul(&self.pt(g, &format!("{prefix}.wo")))
            .add_row(&self.pt(g, &format!("{prefix}.bo")));
        let attn = attn_sum
            .expect("at least one head")
            .scale(1.0 / heads as f64);
        (out, attn)
    }

    fn ffn(&self, g: &Graph, prefix: &str, x: &Tensor) -> Tensor {
        x.matmul(&self.pt(g, &format!("{prefix}.ffn.w1")))
            .add_row(&self.pt(g, &format!("{prefix}.ffn.b1")))
            .gelu()
            .matmul(&self.pt(g, &format!("{prefix}.ffn.w2")))
            .add_row(&self.pt(g, &format!("{prefix}.ffn.b2")))
    }

    fn ln(&self, g: &Graph, prefix: &str, x: &Tensor) -> Tensor {
        x.layer_norm(
            &self.pt(g, &format!("{prefix}.g")),
            &self.pt(g, &format!("{prefix}.b")),
        )
    }

    /// Standard transformer block with residuals and post-layer-norm.
    pub(crate) fn encoder_block(
        &self,
        g: &Graph,
        prefix: &str,
        x: &Tensor,
        key_mask: Option<&[bool]>,
    ) -> Tensor {
        let (attn_out, _) = self.mha(g, &format!("{prefix}.attn"), x, x, key_mask);
        let h = self.ln(g, &format!("{prefix}.ln1"), &x.add(&attn_out));
        let f = self.ffn(g, prefix, &h);
        self.ln(g, &format!("{prefix}.ln2"), &h.add(&f))
    }

    /// Bidirectional cross-attention block. Both sides are updated from the
    /// original inputs in parallel: the query side attends over the
    /// key-value side and vice versa, each followed by its own feed-forward
    /// sublayer. Returns the updated query sequence, the updated key-value
    /// sequence, and the head-averaged query-to-key attention matrix.
    pub fn cross_block(
        &self,
        g: &Graph,
        prefix: &str,
        q_seq: &Tensor,
        kv_seq: &Tensor,
        q_mask: Option<&[bool]>,
        kv_mask: Option<&[bool]>,
    ) -> (Tensor, Tensor, Tensor) {
        let (q_attn, attn) = self.mha(g, &format!("{prefix}.q.attn"), q_seq, kv_seq, kv_mask);
        let (kv_attn, _) = self.mha(g, &format!("{prefix}.kv.attn"), kv_seq, q_seq, q_mask);

        let q1 = self.ln(g, &format!("{prefix}.q.ln1"), &q_seq.add(&q_attn));
        let q2 = self.ln(
            g,
            &format!("{prefix}.q.ln2"),
            &q1.add(&self.ffn(g, &format!("{prefix}.q"), &q1)),
        );
        let kv1 = self.ln(g, &format!("{prefix}.kv.ln1"), &kv_seq.add(&kv_attn));
        let kv2 = self.ln(
            g,
            &format!("{prefix}.kv.ln2"),
            &kv1.add(&self.ffn(g, &format!("{prefix}.kv"), &kv1)),
        );
        (q2, kv2, attn)
    }

    /// Run one module's cross-modal stack: text as the query side, the
    /// feature sequence as the key-value side. Returns both final sequences
    /// and the last block's text-to-feature attention.
    pub fn cross_stack(
        &self,
        g: &Graph,
        module: super::Module,
        text: &Tensor,
        features: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let mut t = text.clone();
        let mut f = features.clone();
        let mut attn = None;
        for j in 0..self.dims.n_cross {
            let prefix = format!("cross_{}{j}", module.tag());
            let (t2, f2, a) = self.cross_block(g, &prefix, &t, &f, None, None);
            t = t2;
            f = f2;
            attn = Some(a);
        }
        (t, f, attn.expect("n_cross >= 1"))
    }
}
