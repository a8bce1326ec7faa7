//! Toy text encoder: token + position embeddings, one self-attention block
//! with a residual feed-forward layer, and mean pooling over tokens.
//! Pluggable behind the pooled-feature contract for pretrained transformers.

use super::{ForwardPass, ParamRef, ParamSet};
use crate::tensor::{NodeId, TensorError};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct TextEncoder {
    token_emb: ParamRef,
    pos_emb: ParamRef,
    wq: ParamRef,
    wk: ParamRef,
    wv: ParamRef,
    wo: ParamRef,
    ffn_w1: ParamRef,
    ffn_b1: ParamRef,
    ffn_w2: ParamRef,
    ffn_b2: ParamRef,
    pub dim: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        vocab_size: usize,
        dim: usize,
        ffn_dim: usize,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let emb_std = 0.1;
        let emb = Normal::new(0.0, emb_std).expect("normal");
        let attn = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("normal");
        let ffn1 = Normal::new(0.0, (2.0 / (dim + ffn_dim) as f64).sqrt()).expect("normal");

        let mut mat = |name: &str, shape: &[usize], dist: &Normal<f64>| {
            params.register(
                format!("{prefix}.{name}"),
                ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng)),
            )
        };
        let token_emb = mat("token_emb", &[vocab_size, dim], &emb);
        let pos_emb = mat("pos_emb", &[max_len, dim], &emb);
        let wq = mat("attn.wq", &[dim, dim], &attn);
        let wk = mat("attn.wk", &[dim, dim], &attn);
        let wv = mat("attn.wv", &[dim, dim], &attn);
        let wo = mat("attn.wo", &[dim, dim], &attn);
        let ffn_w1 = mat("ffn.w1", &[dim, ffn_dim], &ffn1);
        let ffn_b1 = params.register(format!("{prefix}.ffn.b1"), ArrayD::zeros(IxDyn(&[ffn_dim])));
        let ffn_w2 = mat("ffn.w2", &[ffn_dim, dim], &ffn1);
        let ffn_b2 = params.register(format!("{prefix}.ffn.b2"), ArrayD::zeros(IxDyn(&[dim])));
        Self {
            token_emb,
            pos_emb,
            wq,
            wk,
            wv,
            wo,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            dim,
            max_len,
        }
    }

    /// Encode one token-id sequence to a pooled `[dim]` feature.
    pub fn forward_sentence(
        &self,
        pass: &mut ForwardPass,
        params: &ParamSet,
        ids: &[usize],
    ) -> Result<NodeId, TensorError> {
        debug_assert!(!ids.is_empty());
        let len = ids.len().min(self.max_len);
        let ids = &ids[..len];
        let positions: Vec<usize> = (0..len).collect();

        let token_table = pass.param(params, self.token_emb);
        let pos_table = pass.param(params, self.pos_emb);
        let tok = pass.tape.embedding(token_table, ids)?;
        let pos = pass.tape.embedding(pos_table, &positions)?;
        let x = pass.tape.add(tok, pos)?;

        let wq = pass.param(params, self.wq);
        let wk = pass.param(params, self.wk);
        let wv = pass.param(params, self.wv);
        let wo = pass.param(params, self.wo);
        let q = pass.tape.matmul(x, wq)?;
        let k = pass.tape.matmul(x, wk)?;
        let v = pass.tape.matmul(x, wv)?;
        let kt = pass.tape.transpose(k)?;
        let scores = pass.tape.matmul(q, kt)?;
        let scaled = pass.tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = pass.tape.softmax_rows(scaled)?;
        let mixed = pass.tape.matmul(attn, v)?;
        let proj = pass.tape.matmul(mixed, wo)?;
        let h1 = pass.tape.add(x, proj)?;

        let w1 = pass.param(params, self.ffn_w1);
        let b1 = pass.param(params, self.ffn_b1);
        let w2 = pass.param(params, self.ffn_w2);
        let b2 = pass.param(params, self.ffn_b2);
        let f = pass.tape.matmul(h1, w1)?;
        let f = pass.tape.add_bias_rows(f, b1)?;
        let f = pass.tape.relu(f);
        let f = pass.tape.matmul(f, w2)?;
        let f = pass.tape.add_bias_rows(f, b2)?;
        let h2 = pass.tape.add(h1, f)?;

        pass.tape.mean_rows(h2)
    }
}
