//! Transformer encoder, projection heads and the entity table.

mod checkpoint;
mod params;

use crate::autograd::{Graph, NodeId};
use crate::corpus::{EntityId, PreprocessedExample, TokenId};
use crate::error::{Result, VkbError};
use crate::tensor::{vec_matmul, Tensor};

pub use checkpoint::{
    from_bytes as params_from_bytes, load_params, save_params, to_bytes as params_to_bytes,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use params::{init_params, EncoderConfig, LayerIds, ModelParams, ParamLayout, ENCODER_GROUP};

/// Per-token contextual vectors, one row per input token.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualEmbeddings(pub Tensor);

impl ContextualEmbeddings {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        if i >= self.len() {
            return Err(VkbError::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        Ok(self.0.row(i))
    }
}

fn check_len(params: &ModelParams, tokens: &[TokenId]) -> Result<()> {
    let max = params.config.max_seq_len;
    if tokens.len() > max {
        return Err(VkbError::SequenceTooLong {
            len: tokens.len(),
            max,
        });
    }
    if tokens.is_empty() {
        return Err(VkbError::InvalidConfig("cannot encode an empty sequence".into()));
    }
    let vocab = params.config.token_vocab_size;
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(VkbError::IndexOutOfRange {
            index: t as usize,
            len: vocab,
        });
    }
    Ok(())
}

/// Records the encoder forward pass on `g`, returning the `n x d` output node.
pub fn encode_graph(g: &mut Graph<'_>, params: &ModelParams, tokens: &[TokenId]) -> Result<NodeId> {
    check_len(params, tokens)?;
    let l = &params.layout;
    let cfg = &params.config;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = g.param(l.token_emb);
    let pos = g.param(l.pos_emb);
    let te = g.rows(tok, &ids);
    let pe = g.rows(pos, &positions);
    let mut x = g.add(te, pe);
    let dh = cfg.model_dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for layer in &l.layers {
        let proj = |g: &mut Graph<'_>, x: NodeId, w, b| {
            let w = g.param(w);
            let b = g.param(b);
            let y = g.matmul(x, w);
            g.add_row(y, b)
        };
        let q = proj(g, x, layer.wq, layer.bq);
        let k = proj(g, x, layer.wk, layer.bk);
        let v = proj(g, x, layer.wv, layer.bv);
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = g.cols(q, h * dh, dh);
            let kh = g.cols(k, h * dh, dh);
            let vh = g.cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax(s);
            heads.push(g.matmul(p, vh));
        }
        let a = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let o = proj(g, a, layer.wo, layer.bo);
        let r = g.add(x, o);
        let (g1, b1) = (g.param(layer.ln1_g), g.param(layer.ln1_b));
        x = g.layer_norm(r, g1, b1);
        let f = proj(g, x, layer.w1, layer.b1);
        let f = g.gelu(f);
        let f = proj(g, f, layer.w2, layer.b2);
        let r = g.add(x, f);
        let (g2, b2) = (g.param(layer.ln2_g), g.param(layer.ln2_b));
        x = g.layer_norm(r, g2, b2);
    }
    Ok(x)
}

fn check_index(h: NodeId, g: &Graph<'_>, i: usize) -> Result<()> {
    let n = g.value(h).rows();
    if i >= n {
        return Err(VkbError::IndexOutOfRange { index: i, len: n });
    }
    Ok(())
}

/// `W_rᵀ [h_s; h_t]` as a `1 x d_r` node.
pub fn relation_embedding_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    h: NodeId,
    s: usize,
    t: usize,
) -> Result<NodeId> {
    check_index(h, g, s)?;
    check_index(h, g, t)?;
    let hs = g.row(h, s);
    let ht = g.row(h, t);
    let cat = g.concat_cols(&[hs, ht]);
    let w = g.param(params.layout.w_r);
    Ok(g.matmul(cat, w))
}

/// `W_eᵀ h_i` as a `1 x d_e` node.
pub fn mention_embedding_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    h: NodeId,
    i: usize,
) -> Result<NodeId> {
    check_index(h, g, i)?;
    let hi = g.row(h, i);
    let w = g.param(params.layout.w_e);
    Ok(g.matmul(hi, w))
}

/// Inference-mode encoding.
pub fn encode_tokens(params: &ModelParams, tokens: &[TokenId]) -> Result<ContextualEmbeddings> {
    let mut g = Graph::inference(&params.tensors);
    let h = encode_graph(&mut g, params, tokens)?;
    Ok(ContextualEmbeddings(g.value(h).clone()))
}

pub fn encode_example(params: &ModelParams, ex: &PreprocessedExample) -> Result<ContextualEmbeddings> {
    encode_tokens(params, &ex.tokens)
}

pub fn relation_embedding(
    params: &ModelParams,
    ctx: &ContextualEmbeddings,
    s: usize,
    t: usize,
) -> Result<Vec<f64>> {
    let mut cat = ctx.row(s)?.to_vec();
    cat.extend_from_slice(ctx.row(t)?);
    Ok(vec_matmul(&cat, params.get(params.layout.w_r)))
}

pub fn mention_embedding(params: &ModelParams, ctx: &ContextualEmbeddings, i: usize) -> Result<Vec<f64>> {
    Ok(vec_matmul(ctx.row(i)?, params.get(params.layout.w_e)))
}

pub fn entity_lookup(params: &ModelParams, e: EntityId) -> Result<&[f64]> {
    let table = params.get(params.layout.entity_table);
    if e as usize >= table.rows() {
        return Err(VkbError::UnknownEntity(e.to_string()));
    }
    Ok(table.row(e as usize))
}

/// Relation embedding of an example at its first `[R1]` and its `[R2]`.
pub fn example_relation_embedding(params: &ModelParams, ex: &PreprocessedExample) -> Result<Vec<f64>> {
    let ctx = encode_example(params, ex)?;
    relation_embedding(params, &ctx, ex.r1_pos, ex.r2_pos)
}

#[cfg(test)]
mod tests;
