//! The classifier network: learnable token embeddings, additive sinusoidal
//! positional encoding, a stack of low-rank (Linformer-style) attention
//! encoder blocks, and MLM/classification heads.
//!
//! Everything runs in f64 with hand-written reverse-mode gradients; the
//! same backward pass serves training (parameter gradients) and attribution
//! (gradients with respect to the embedded input).

mod backward;
mod checkpoint;
mod forward;

pub use backward::{
    grad_wrt_embeddings, grad_wrt_params, loss_and_grads, LossKind, SampleGrad, SampleTarget,
    TrainingBatch,
};
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use forward::{
    embed, forward_classify, forward_from_embeddings, forward_mlm, linformer_attention,
    positional_encoding, EmbeddedSequence, EncoderCache,
};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::VOCAB_SIZE;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("token id {id} at position {position} outside vocabulary")]
    TokenOutOfRange { position: usize, id: u8 },
    #[error("sequence does not start with the cls token")]
    MissingClsToken,
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}
fn default_embed_dim() -> usize {
    36
}
fn default_layers() -> usize {
    1
}
fn default_heads() -> usize {
    1
}
fn default_linformer_k() -> usize {
    36
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_linformer_k")]
    pub linformer_k: usize,
    /// Input rows per sample: variant count plus the cls position.
    pub seq_len: usize,
    /// Hidden width of the position-wise feed-forward block; 0 means the
    /// default of four times the embedding dimension.
    #[serde(default)]
    pub ffn_dim: usize,
}

impl ModelConfig {
    pub fn with_seq_len(seq_len: usize) -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            embed_dim: 36,
            n_layers: 1,
            n_heads: 1,
            linformer_k: 36,
            seq_len,
            ffn_dim: 0,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.embed_dim
        } else {
            self.ffn_dim
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::ConfigInvalid(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.embed_dim % 2 != 0 {
            return fail(format!(
                "embed_dim {} must be even for sinusoidal positions",
                self.embed_dim
            ));
        }
        if self.n_layers == 0 || self.n_layers > 6 {
            return fail(format!("n_layers {} outside 1..=6", self.n_layers));
        }
        if self.n_heads == 0 {
            return fail("n_heads must be positive".into());
        }
        if self.embed_dim % self.n_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.seq_len < 1 {
            return fail("seq_len must be at least 1".into());
        }
        if self.linformer_k == 0 || self.linformer_k > self.seq_len {
            return fail(format!(
                "linformer_k {} outside 1..=seq_len ({})",
                self.linformer_k, self.seq_len
            ));
        }
        Ok(())
    }
}

/// One encoder block's weights. Attention projections are bias-free; the
/// low-rank key/value projections are shared across heads and untied from
/// each other.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub e_proj: Array2<f64>,
    pub f_proj: Array2<f64>,
    pub ln1_scale: Array2<f64>,
    pub ln1_offset: Array2<f64>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array2<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array2<f64>,
    pub ln2_scale: Array2<f64>,
    pub ln2_offset: Array2<f64>,
}

/// All learnable tensors plus the fixed positional encoding table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_ln_scale: Array2<f64>,
    pub final_ln_offset: Array2<f64>,
    pub mlm_w: Array2<f64>,
    pub mlm_b: Array2<f64>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array2<f64>,
    /// Sinusoidal table, derived from the config rather than learned.
    pub positional: Array2<f64>,
}

impl ModelParameters {
    /// All-zero tensors of the configured shapes; the holder for gradients
    /// and optimizer moments.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let s = config.seq_len;
        let k = config.linformer_k;
        let f = config.ffn_dim();
        let layer = || LayerParams {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            e_proj: Array2::zeros((k, s)),
            f_proj: Array2::zeros((k, s)),
            ln1_scale: Array2::zeros((1, d)),
            ln1_offset: Array2::zeros((1, d)),
            ffn_w1: Array2::zeros((d, f)),
            ffn_b1: Array2::zeros((1, f)),
            ffn_w2: Array2::zeros((f, d)),
            ffn_b2: Array2::zeros((1, d)),
            ln2_scale: Array2::zeros((1, d)),
            ln2_offset: Array2::zeros((1, d)),
        };
        Ok(ModelParameters {
            config: config.clone(),
            embedding: Array2::zeros((config.vocab_size, d)),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_ln_scale: Array2::zeros((1, d)),
            final_ln_offset: Array2::zeros((1, d)),
            mlm_w: Array2::zeros((d, config.vocab_size)),
            mlm_b: Array2::zeros((1, config.vocab_size)),
            cls_w: Array2::zeros((d, 2)),
            cls_b: Array2::zeros((1, 2)),
            positional: forward::positional_encoding(s, d),
        })
    }

    /// Learnable tensors in their declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> =
            vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("w_q", &l.w_q),
                ("w_k", &l.w_k),
                ("w_v", &l.w_v),
                ("w_o", &l.w_o),
                ("e_proj", &l.e_proj),
                ("f_proj", &l.f_proj),
                ("ln1_scale", &l.ln1_scale),
                ("ln1_offset", &l.ln1_offset),
                ("ffn_w1", &l.ffn_w1),
                ("ffn_b1", &l.ffn_b1),
                ("ffn_w2", &l.ffn_w2),
                ("ffn_b2", &l.ffn_b2),
                ("ln2_scale", &l.ln2_scale),
                ("ln2_offset", &l.ln2_offset),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_ln_scale".to_string(), &self.final_ln_scale));
        out.push(("final_ln_offset".to_string(), &self.final_ln_offset));
        out.push(("mlm_w".to_string(), &self.mlm_w));
        out.push(("mlm_b".to_string(), &self.mlm_b));
        out.push(("cls_w".to_string(), &self.cls_w));
        out.push(("cls_b".to_string(), &self.cls_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.embedding];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.e_proj,
                &mut l.f_proj,
                &mut l.ln1_scale,
                &mut l.ln1_offset,
                &mut l.ffn_w1,
                &mut l.ffn_b1,
                &mut l.ffn_w2,
                &mut l.ffn_b2,
                &mut l.ln2_scale,
                &mut l.ln2_offset,
            ]);
        }
        out.push(&mut self.final_ln_scale);
        out.push(&mut self.final_ln_offset);
        out.push(&mut self.mlm_w);
        out.push(&mut self.mlm_b);
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out
    }

    /// Elementwise `self += rhs`, used to reduce per-sample gradients.
    pub fn add_assign(&mut self, rhs: &ModelParameters) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(rhs.tensors()) {
            *a += b;
        }
    }

    /// Elementwise scaling, used to turn summed gradients into means.
    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            *t *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Draws fresh weights uniformly from (-1/sqrt(D), 1/sqrt(D)); biases start
/// at zero and layer-norm gains at one. Deterministic per seed.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParameters, ModelError> {
    init_model_scaled(config, seed, 1.0)
}

/// `init_model` with the weight range multiplied by `scale`; tests use tiny
/// scales to probe near-zero-logit behavior.
pub fn init_model_scaled(
    config: &ModelConfig,
    seed: u64,
    scale: f64,
) -> Result<ModelParameters, ModelError> {
    let mut params = ModelParameters::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = scale / (config.embed_dim as f64).sqrt();
    let mut fill = |t: &mut Array2<f64>| {
        for v in t.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    };
    fill(&mut params.embedding);
    for l in params.layers.iter_mut() {
        fill(&mut l.w_q);
        fill(&mut l.w_k);
        fill(&mut l.w_v);
        fill(&mut l.w_o);
        fill(&mut l.e_proj);
        fill(&mut l.f_proj);
        l.ln1_scale.fill(1.0);
        l.ln2_scale.fill(1.0);
        fill(&mut l.ffn_w1);
        fill(&mut l.ffn_w2);
    }
    params.final_ln_scale.fill(1.0);
    fill(&mut params.mlm_w);
    fill(&mut params.cls_w);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::with_seq_len(9);
        let a = init_model(&cfg, 42).unwrap();
        let b = init_model(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = init_model(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_embedding_shape() {
        let mut cfg = ModelConfig::with_seq_len(40);
        cfg.linformer_k = 36;
        let p = init_model(&cfg, 0).unwrap();
        assert_eq!(p.embedding.dim(), (33, 36));
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.layers[0].e_proj.dim(), (36, 40));
        assert_eq!(p.layers[0].ffn_w1.dim(), (36, 144));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut cfg = ModelConfig::with_seq_len(40);
        cfg.n_heads = 5;
        assert!(matches!(
            init_model(&cfg, 0),
            Err(ModelError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn linformer_k_cannot_exceed_seq_len() {
        let mut cfg = ModelConfig::with_seq_len(10);
        cfg.linformer_k = 11;
        assert!(cfg.validate().is_err());
        cfg.linformer_k = 10;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn tensor_lists_align() {
        let cfg = ModelConfig::with_seq_len(12);
        let mut p = init_model(&cfg, 1).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), p.tensors_mut().len());
        assert_eq!(names[0], "embedding");
        assert!(names.contains(&"layer0.e_proj".to_string()));
        assert_eq!(names.last().unwrap(), "cls_b");
    }

    #[test]
    fn grad_reduction_helpers() {
        let cfg = ModelConfig::with_seq_len(6);
        let a = init_model(&cfg, 3).unwrap();
        let mut sum = ModelParameters::zeros(&cfg).unwrap();
        sum.add_assign(&a);
        sum.add_assign(&a);
        sum.scale(0.5);
        for ((_, x), (_, y)) in sum.tensors().iter().zip(a.tensors()) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }
}
