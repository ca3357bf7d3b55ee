//! Forward evaluation: positional encoding, embedding lookup, pre-norm
//! encoder blocks with low-rank attention, and the two heads. Every pass
//! returns (or can return) a cache holding the intermediates the backward
//! pass needs.

use ndarray::{s, Array1, Array2};

use super::{LayerParams, ModelConfig, ModelError, ModelParameters};
use crate::tokenizer::CLS_ID;

/// Token embeddings interpolate along the attribution path, so the
/// positional term is added downstream of this matrix (inside the encoder).
pub type EmbeddedSequence = Array2<f64>;

const LN_EPS: f64 = 1e-5;

/// The canonical sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`
/// and `PE[pos, 2i+1] = cos` of the same angle. `d` must be even.
pub fn positional_encoding(length: usize, d: usize) -> Array2<f64> {
    assert!(d % 2 == 0, "embedding dimension must be even");
    let mut pe = Array2::zeros((length, d));
    for pos in 0..length {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    pe
}

/// Looks up pure token embeddings (no positional term), one row per token.
pub fn embed(tokens: &[u8], params: &ModelParameters) -> Result<EmbeddedSequence, ModelError> {
    let d = params.config.embed_dim;
    let mut out = Array2::zeros((tokens.len(), d));
    for (position, &id) in tokens.iter().enumerate() {
        if usize::from(id) >= params.config.vocab_size {
            return Err(ModelError::TokenOutOfRange { position, id });
        }
        out.row_mut(position)
            .assign(&params.embedding.row(usize::from(id)));
    }
    Ok(out)
}

pub(super) struct LnCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer norm: `(x - mean) / sqrt(var + eps) * scale + offset`.
pub(super) fn layer_norm(
    x: &Array2<f64>,
    scale: &Array2<f64>,
    offset: &Array2<f64>,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut x_hat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (r, mut row) in x_hat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv_std[r] = is;
    }
    let mut out = x_hat.clone();
    out *= &scale.row(0);
    out += &offset.row(0);
    (out, LnCache { x_hat, inv_std })
}

pub(super) fn softmax_rows(mut scores: Array2<f64>) -> Array2<f64> {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    scores
}

pub(super) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub(super) fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

pub(super) struct LayerCache {
    pub x: Array2<f64>,
    pub ln1: LnCache,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub k_proj: Array2<f64>,
    pub v_proj: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    pub ln2: LnCache,
    pub ffn_pre: Array2<f64>,
    pub ffn_act: Array2<f64>,
}

/// Attention sub-block with pre-norm and residual:
/// `x + softmax(Q K'^T / sqrt(d_head)) V' W_O` over `LN1(x)`.
fn attention_block(x: &Array2<f64>, layer: &LayerParams, cfg: &ModelConfig) -> (Array2<f64>, LayerCacheAttn) {
    let (a, ln1) = layer_norm(x, &layer.ln1_scale, &layer.ln1_offset);
    let q = a.dot(&layer.w_q);
    let k = a.dot(&layer.w_k);
    let v = a.dot(&layer.w_v);
    let k_proj = layer.e_proj.dot(&k);
    let v_proj = layer.f_proj.dot(&v);

    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut probs = Vec::with_capacity(cfg.n_heads);
    let mut ctx = Array2::zeros((x.nrows(), cfg.embed_dim));
    for h in 0..cfg.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let q_h = q.slice(cols);
        let k_h = k_proj.slice(cols);
        let v_h = v_proj.slice(cols);
        let scores = q_h.dot(&k_h.t()) * inv_sqrt;
        let p = softmax_rows(scores);
        ctx.slice_mut(cols).assign(&p.dot(&v_h));
        probs.push(p);
    }
    let out = x + &ctx.dot(&layer.w_o);
    (
        out,
        LayerCacheAttn {
            ln1,
            q,
            k,
            v,
            k_proj,
            v_proj,
            probs,
            ctx,
        },
    )
}

struct LayerCacheAttn {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    k_proj: Array2<f64>,
    v_proj: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

fn layer_forward(x: Array2<f64>, layer: &LayerParams, cfg: &ModelConfig) -> (Array2<f64>, LayerCache) {
    let (h, attn) = attention_block(&x, layer, cfg);
    let (b, ln2) = layer_norm(&h, &layer.ln2_scale, &layer.ln2_offset);
    let ffn_pre = b.dot(&layer.ffn_w1) + &layer.ffn_b1.row(0);
    let ffn_act = ffn_pre.mapv(gelu);
    let out = &h + &(ffn_act.dot(&layer.ffn_w2) + &layer.ffn_b2.row(0));
    (
        out,
        LayerCache {
            x,
            ln1: attn.ln1,
            q: attn.q,
            k: attn.k,
            v: attn.v,
            k_proj: attn.k_proj,
            v_proj: attn.v_proj,
            probs: attn.probs,
            ctx: attn.ctx,
            ln2,
            ffn_pre,
            ffn_act,
        },
    )
}

/// Intermediates of one full encoder evaluation, consumed by the backward
/// pass. `h[i]` holds the input to layer i (position-encoded for i = 0).
pub struct EncoderCache {
    pub(super) layers: Vec<LayerCache>,
    pub(super) final_ln: LnCache,
    /// Encoder output after the final layer norm.
    pub z: Array2<f64>,
}

fn check_shape(e: &Array2<f64>, cfg: &ModelConfig) -> Result<(), ModelError> {
    if e.dim() != (cfg.seq_len, cfg.embed_dim) {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{} x {}", cfg.seq_len, cfg.embed_dim),
            found: format!("{} x {}", e.nrows(), e.ncols()),
        });
    }
    Ok(())
}

/// Runs the encoder over an embedded sequence: adds the positional table,
/// applies every block, then the final layer norm.
pub(super) fn encode(
    embedded: &EmbeddedSequence,
    params: &ModelParameters,
) -> Result<EncoderCache, ModelError> {
    check_shape(embedded, &params.config)?;
    let mut x = embedded + &params.positional;
    let mut layers = Vec::with_capacity(params.config.n_layers);
    for layer in &params.layers {
        let (next, cache) = layer_forward(x, layer, &params.config);
        layers.push(cache);
        x = next;
    }
    let (z, final_ln) = layer_norm(&x, &params.final_ln_scale, &params.final_ln_offset);
    Ok(EncoderCache {
        layers,
        final_ln,
        z,
    })
}

pub(super) fn cls_logits(cache: &EncoderCache, params: &ModelParameters) -> Array1<f64> {
    let z0 = cache.z.row(0);
    let mut logits = z0.dot(&params.cls_w);
    logits += &params.cls_b.row(0);
    logits
}

pub(super) fn mlm_logits(cache: &EncoderCache, params: &ModelParameters) -> Array2<f64> {
    cache.z.dot(&params.mlm_w) + &params.mlm_b.row(0)
}

/// One attention block in isolation, as used at `layer_index` inside the
/// encoder: pre-norm, low-rank attention, output projection, residual.
pub fn linformer_attention(
    x: &Array2<f64>,
    params: &ModelParameters,
    layer_index: usize,
) -> Result<Array2<f64>, ModelError> {
    check_shape(x, &params.config)?;
    let layer = params
        .layers
        .get(layer_index)
        .ok_or_else(|| ModelError::ConfigInvalid(format!("no layer {layer_index}")))?;
    Ok(attention_block(x, layer, &params.config).0)
}

/// Class logits (pre-softmax) for a token sequence starting with `cls`.
pub fn forward_classify(tokens: &[u8], params: &ModelParameters) -> Result<Array1<f64>, ModelError> {
    if tokens.first() != Some(&CLS_ID) {
        return Err(ModelError::MissingClsToken);
    }
    let embedded = embed(tokens, params)?;
    forward_from_embeddings(&embedded, params)
}

/// Class logits from an arbitrary (possibly interpolated) embedded input.
/// Agrees with [`forward_classify`] exactly when fed `embed(tokens)`.
pub fn forward_from_embeddings(
    embedded: &EmbeddedSequence,
    params: &ModelParameters,
) -> Result<Array1<f64>, ModelError> {
    let cache = encode(embedded, params)?;
    Ok(cls_logits(&cache, params))
}

/// Per-position vocabulary logits for the masked-token objective.
pub fn forward_mlm(tokens: &[u8], params: &ModelParameters) -> Result<Array2<f64>, ModelError> {
    let embedded = embed(tokens, params)?;
    let cache = encode(&embedded, params)?;
    Ok(mlm_logits(&cache, params))
}
