//! Hand-written reverse-mode differentiation through the encoder.
//!
//! One backward walk serves both consumers: training wants gradients for
//! every parameter tensor, attribution wants the gradient with respect to
//! the embedded input. Both are exact (up to f64 rounding) and are checked
//! against central finite differences in the test suite.

use ndarray::{s, Array1, Array2, Axis};

use super::forward::{
    cls_logits, embed, encode, gelu_prime, mlm_logits, EmbeddedSequence, EncoderCache, LnCache,
};
use super::{LayerParams, ModelConfig, ModelError, ModelParameters};
use crate::tokenizer::CLS_ID;

/// Which objective the gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean cross-entropy of class logits against 0/1 labels.
    Classify,
    /// Mean cross-entropy over masked positions only.
    Mlm,
}

/// One training example: the (possibly masked) token sequence plus its
/// target. For classification the target is the 0/1 label; for MLM,
/// `mlm_targets[p]` holds the original token at masked position `p` and
/// `None` elsewhere.
#[derive(Debug, Clone)]
pub struct TrainingBatch<'a> {
    pub sequences: Vec<&'a [u8]>,
    pub class_labels: Vec<u8>,
    pub mlm_targets: Vec<Vec<Option<u8>>>,
}

impl<'a> TrainingBatch<'a> {
    pub fn classify(sequences: Vec<&'a [u8]>, class_labels: Vec<u8>) -> Self {
        TrainingBatch {
            sequences,
            class_labels,
            mlm_targets: Vec::new(),
        }
    }

    pub fn mlm(sequences: Vec<&'a [u8]>, mlm_targets: Vec<Vec<Option<u8>>>) -> Self {
        TrainingBatch {
            sequences,
            class_labels: Vec::new(),
            mlm_targets,
        }
    }
}

fn layer_norm_backward(
    d_out: &Array2<f64>,
    cache: &LnCache,
    scale: &Array2<f64>,
    d_scale: Option<&mut Array2<f64>>,
    d_offset: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    if let Some(ds) = d_scale {
        *ds += &(d_out * &cache.x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if let Some(db) = d_offset {
        *db += &d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    let d = d_out.ncols() as f64;
    let mut d_xhat = d_out * &scale.row(0);
    for (r, mut row) in d_xhat.rows_mut().into_iter().enumerate() {
        let x_hat = cache.x_hat.row(r);
        let mean_d = row.sum() / d;
        let mean_dx = row
            .iter()
            .zip(x_hat.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / d;
        for (v, &xh) in row.iter_mut().zip(x_hat.iter()) {
            *v = cache.inv_std[r] * (*v - mean_d - xh * mean_dx);
        }
    }
    d_xhat
}

/// `d_scores` for `probs = softmax(scores)` row-wise.
fn softmax_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = d_probs.clone();
    for (mut row, p) in out.rows_mut().into_iter().zip(probs.rows()) {
        let dot = row.iter().zip(p.iter()).map(|(a, b)| a * b).sum::<f64>();
        for (v, &pi) in row.iter_mut().zip(p.iter()) {
            *v = pi * (*v - dot);
        }
    }
    out
}

fn ln_output(cache: &LnCache, scale: &Array2<f64>, offset: &Array2<f64>) -> Array2<f64> {
    let mut out = cache.x_hat.clone();
    out *= &scale.row(0);
    out += &offset.row(0);
    out
}

/// Walks the encoder backward from `d_z` (gradient at the final-norm
/// output). Returns the gradient with respect to the embedded input and, if
/// `grads` is given, accumulates every parameter gradient into it.
fn encoder_backward(
    params: &ModelParameters,
    cache: &EncoderCache,
    d_z: Array2<f64>,
    mut grads: Option<&mut ModelParameters>,
) -> Array2<f64> {
    let cfg = &params.config;
    let mut d_x = match grads.as_deref_mut() {
        Some(g) => layer_norm_backward(
            &d_z,
            &cache.final_ln,
            &params.final_ln_scale,
            Some(&mut g.final_ln_scale),
            Some(&mut g.final_ln_offset),
        ),
        None => layer_norm_backward(&d_z, &cache.final_ln, &params.final_ln_scale, None, None),
    };

    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[idx];
        let g_layer = grads.as_deref_mut().map(|g| &mut g.layers[idx]);
        d_x = layer_backward(d_x, layer, lc, cfg, g_layer);
    }
    d_x
}

fn layer_backward(
    d_y: Array2<f64>,
    layer: &LayerParams,
    lc: &super::forward::LayerCache,
    cfg: &ModelConfig,
    mut g_layer: Option<&mut LayerParams>,
) -> Array2<f64> {
    // FFN half: y = h + gelu(LN2(h) W1 + b1) W2 + b2
    let d_ffn_out = &d_y; // gradient at the FFN output
    let mut d_h = d_y.clone();

    let d_act = d_ffn_out.dot(&layer.ffn_w2.t());
    let mut d_pre = d_act;
    d_pre.zip_mut_with(&lc.ffn_pre, |dv, &u| *dv *= gelu_prime(u));

    let d_b = d_pre.dot(&layer.ffn_w1.t());
    if let Some(g) = g_layer.as_deref_mut() {
        let b = ln_output(&lc.ln2, &layer.ln2_scale, &layer.ln2_offset);
        g.ffn_w2 += &lc.ffn_act.t().dot(d_ffn_out);
        g.ffn_b2 += &d_ffn_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        g.ffn_w1 += &b.t().dot(&d_pre);
        g.ffn_b1 += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        d_h += &layer_norm_backward(
            &d_b,
            &lc.ln2,
            &layer.ln2_scale,
            Some(&mut g.ln2_scale),
            Some(&mut g.ln2_offset),
        );
    } else {
        d_h += &layer_norm_backward(&d_b, &lc.ln2, &layer.ln2_scale, None, None);
    }

    // Attention half: h = x + ctx(LN1(x)) W_O
    let d_attn_out = &d_h;
    let mut d_x = d_h.clone();

    let d_ctx = d_attn_out.dot(&layer.w_o.t());
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let s_len = d_ctx.nrows();
    let mut d_q = Array2::zeros((s_len, cfg.embed_dim));
    let mut d_k_proj = Array2::zeros((cfg.linformer_k, cfg.embed_dim));
    let mut d_v_proj = Array2::zeros((cfg.linformer_k, cfg.embed_dim));
    for h in 0..cfg.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &lc.probs[h];
        let d_ctx_h = d_ctx.slice(cols);
        let d_p = d_ctx_h.dot(&lc.v_proj.slice(cols).t());
        d_v_proj
            .slice_mut(cols)
            .assign(&p.t().dot(&d_ctx_h));
        let d_scores = softmax_backward(p, &d_p) * inv_sqrt;
        d_q.slice_mut(cols)
            .assign(&d_scores.dot(&lc.k_proj.slice(cols)));
        d_k_proj
            .slice_mut(cols)
            .assign(&d_scores.t().dot(&lc.q.slice(cols)));
    }

    let d_k = layer.e_proj.t().dot(&d_k_proj);
    let d_v = layer.f_proj.t().dot(&d_v_proj);
    let mut d_a = d_q.dot(&layer.w_q.t());
    d_a += &d_k.dot(&layer.w_k.t());
    d_a += &d_v.dot(&layer.w_v.t());

    if let Some(g) = g_layer {
        g.w_o += &lc.ctx.t().dot(d_attn_out);
        g.e_proj += &d_k_proj.dot(&lc.k.t());
        g.f_proj += &d_v_proj.dot(&lc.v.t());
        let a = ln_output(&lc.ln1, &layer.ln1_scale, &layer.ln1_offset);
        g.w_q += &a.t().dot(&d_q);
        g.w_k += &a.t().dot(&d_k);
        g.w_v += &a.t().dot(&d_v);
        d_x += &layer_norm_backward(
            &d_a,
            &lc.ln1,
            &layer.ln1_scale,
            Some(&mut g.ln1_scale),
            Some(&mut g.ln1_offset),
        );
    } else {
        d_x += &layer_norm_backward(&d_a, &lc.ln1, &layer.ln1_scale, None, None);
    }
    d_x
}

/// Exact gradient of the pre-softmax logit for `target` with respect to the
/// embedded input rows.
pub fn grad_wrt_embeddings(
    embedded: &EmbeddedSequence,
    params: &ModelParameters,
    target: usize,
) -> Result<Array2<f64>, ModelError> {
    if target > 1 {
        return Err(ModelError::ConfigInvalid(format!(
            "class target {target} outside {{0, 1}}"
        )));
    }
    let cache = encode(embedded, params)?;
    // d logit_target / d z: only the cls row sees the head.
    let mut d_z = Array2::zeros(cache.z.dim());
    d_z.row_mut(0).assign(&params.cls_w.column(target));
    Ok(encoder_backward(params, &cache, d_z, None))
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = logits.mapv(|v| (v - m).exp());
    let sum = e.sum();
    e.mapv_inplace(|v| v / sum);
    e
}

fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-sample loss plus gradients. For classification the loss is the
/// cross-entropy of the class logits; for MLM it is the *sum* of masked
/// cross-entropies together with the masked-position count, so callers can
/// form an exact batch mean.
pub struct SampleGrad {
    pub loss_sum: f64,
    pub denom: usize,
    pub grads: ModelParameters,
}

fn classify_sample_grad(
    tokens: &[u8],
    label: u8,
    params: &ModelParameters,
) -> Result<SampleGrad, ModelError> {
    if tokens.first() != Some(&CLS_ID) {
        return Err(ModelError::MissingClsToken);
    }
    let embedded = embed(tokens, params)?;
    let cache = encode(&embedded, params)?;
    let logits = cls_logits(&cache, params);
    let loss = log_sum_exp(logits.view()) - logits[usize::from(label)];

    let mut d_logits = softmax(&logits);
    d_logits[usize::from(label)] -= 1.0;

    let mut grads = ModelParameters::zeros(&params.config)?;
    // Head: logits = z[0] cls_w + cls_b
    let z0 = cache.z.row(0);
    for c in 0..2 {
        let dl = d_logits[c];
        grads.cls_b[[0, c]] += dl;
        for r in 0..params.config.embed_dim {
            grads.cls_w[[r, c]] += z0[r] * dl;
        }
    }
    let mut d_z = Array2::zeros(cache.z.dim());
    d_z.row_mut(0).assign(&d_logits.dot(&params.cls_w.t()));
    let d_embedded = encoder_backward(params, &cache, d_z, Some(&mut grads));
    scatter_embedding_grad(&mut grads.embedding, tokens, &d_embedded);
    Ok(SampleGrad {
        loss_sum: loss,
        denom: 1,
        grads,
    })
}

fn mlm_sample_grad(
    tokens: &[u8],
    targets: &[Option<u8>],
    params: &ModelParameters,
) -> Result<SampleGrad, ModelError> {
    let embedded = embed(tokens, params)?;
    let cache = encode(&embedded, params)?;
    let logits = mlm_logits(&cache, params);

    let mut loss_sum = 0.0;
    let mut denom = 0usize;
    let mut d_logits = Array2::zeros(logits.dim());
    for (p, target) in targets.iter().enumerate() {
        let Some(t) = target else { continue };
        let row = logits.row(p);
        loss_sum += log_sum_exp(row) - row[usize::from(*t)];
        denom += 1;
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut exp_row: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exp_row.iter().sum();
        for v in exp_row.iter_mut() {
            *v /= sum;
        }
        exp_row[usize::from(*t)] -= 1.0;
        for (c, v) in exp_row.into_iter().enumerate() {
            d_logits[[p, c]] = v;
        }
    }

    let mut grads = ModelParameters::zeros(&params.config)?;
    grads.mlm_w += &cache.z.t().dot(&d_logits);
    grads.mlm_b += &d_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_z = d_logits.dot(&params.mlm_w.t());
    let d_embedded = encoder_backward(params, &cache, d_z, Some(&mut grads));
    scatter_embedding_grad(&mut grads.embedding, tokens, &d_embedded);
    Ok(SampleGrad {
        loss_sum,
        denom,
        grads,
    })
}

fn scatter_embedding_grad(d_embedding: &mut Array2<f64>, tokens: &[u8], d_rows: &Array2<f64>) {
    for (p, &t) in tokens.iter().enumerate() {
        let mut row = d_embedding.row_mut(usize::from(t));
        row += &d_rows.row(p);
    }
}

/// Loss and exact parameter gradients of one sample under either objective.
pub fn loss_and_grads(
    tokens: &[u8],
    target: SampleTarget<'_>,
    params: &ModelParameters,
) -> Result<SampleGrad, ModelError> {
    match target {
        SampleTarget::Class(label) => classify_sample_grad(tokens, label, params),
        SampleTarget::Masked(targets) => mlm_sample_grad(tokens, targets, params),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SampleTarget<'a> {
    Class(u8),
    Masked(&'a [Option<u8>]),
}

/// Exact gradients of the mean batch loss with respect to every parameter.
/// Per-sample work runs in parallel; the reduction is a fixed-order fold,
/// so results are bit-reproducible regardless of thread count.
pub fn grad_wrt_params(
    batch: &TrainingBatch<'_>,
    params: &ModelParameters,
    loss_kind: LossKind,
) -> Result<(f64, ModelParameters), ModelError> {
    use rayon::prelude::*;

    if batch.sequences.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let per_sample: Vec<Result<SampleGrad, ModelError>> = match loss_kind {
        LossKind::Classify => batch
            .sequences
            .par_iter()
            .zip(batch.class_labels.par_iter())
            .map(|(seq, &label)| classify_sample_grad(seq, label, params))
            .collect(),
        LossKind::Mlm => batch
            .sequences
            .par_iter()
            .zip(batch.mlm_targets.par_iter())
            .map(|(seq, targets)| mlm_sample_grad(seq, targets, params))
            .collect(),
    };

    let mut total = ModelParameters::zeros(&params.config)?;
    let mut loss_sum = 0.0;
    let mut denom = 0usize;
    for sg in per_sample {
        let sg = sg?;
        total.add_assign(&sg.grads);
        loss_sum += sg.loss_sum;
        denom += sg.denom;
    }
    if denom == 0 {
        // An MLM batch where nothing was masked carries no signal.
        return Ok((0.0, total));
    }
    total.scale(1.0 / denom as f64);
    Ok((loss_sum / denom as f64, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_from_embeddings, init_model, ModelConfig};

    fn tiny_params() -> ModelParameters {
        // L = 8 variants -> 9 rows; D = 6; two heads to cover head slicing.
        let mut cfg = ModelConfig::with_seq_len(9);
        cfg.embed_dim = 6;
        cfg.n_heads = 2;
        cfg.n_layers = 2;
        cfg.linformer_k = 4;
        init_model(&cfg, 97).unwrap()
    }

    fn tiny_tokens() -> Vec<u8> {
        vec![3, 5, 0, 13, 32, 4, 18, 7, 21]
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let params = tiny_params();
        let embedded = embed(&tiny_tokens(), &params).unwrap();
        for target in [0usize, 1] {
            let analytic = grad_wrt_embeddings(&embedded, &params, target).unwrap();
            let h = 1e-5;
            let mut max_rel = 0f64;
            for r in 0..embedded.nrows() {
                for c in 0..embedded.ncols() {
                    let mut plus = embedded.clone();
                    plus[[r, c]] += h;
                    let mut minus = embedded.clone();
                    minus[[r, c]] -= h;
                    let fp = forward_from_embeddings(&plus, &params).unwrap()[target];
                    let fm = forward_from_embeddings(&minus, &params).unwrap()[target];
                    let numeric = (fp - fm) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(max_rel < 1e-5, "target {target}: max rel err {max_rel}");
        }
    }

    #[test]
    fn embedding_gradient_is_linear_in_targets() {
        // grad(logit0) + grad(logit1) equals the gradient of the summed
        // logit, which we obtain by summing the head columns.
        let params = tiny_params();
        let embedded = embed(&tiny_tokens(), &params).unwrap();
        let g0 = grad_wrt_embeddings(&embedded, &params, 0).unwrap();
        let g1 = grad_wrt_embeddings(&embedded, &params, 1).unwrap();

        let mut summed_head = params.clone();
        let col = &params.cls_w.column(0) + &params.cls_w.column(1);
        summed_head.cls_w.column_mut(0).assign(&col);
        let g_sum = grad_wrt_embeddings(&embedded, &summed_head, 0).unwrap();
        let max = (&g0 + &g1 - &g_sum).iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "linearity violated by {max}");
    }

    #[test]
    fn zero_head_column_means_zero_gradient() {
        let mut params = tiny_params();
        params.cls_w.column_mut(1).fill(0.0);
        let embedded = embed(&tiny_tokens(), &params).unwrap();
        let g = grad_wrt_embeddings(&embedded, &params, 1).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    fn perturbed_loss(
        params: &ModelParameters,
        batch: &TrainingBatch<'_>,
        kind: LossKind,
        tensor_idx: usize,
        elem: usize,
        delta: f64,
    ) -> f64 {
        let mut p = params.clone();
        {
            let mut tensors = p.tensors_mut();
            let t = &mut tensors[tensor_idx];
            let flat = t.as_slice_mut().unwrap();
            flat[elem] += delta;
        }
        grad_wrt_params(batch, &p, kind).unwrap().0
    }

    fn check_param_grads(kind: LossKind) {
        let params = tiny_params();
        let seq_a = tiny_tokens();
        let mut seq_b = tiny_tokens();
        seq_b[3] = 9;
        let batch = match kind {
            LossKind::Classify => {
                TrainingBatch::classify(vec![&seq_a, &seq_b], vec![1, 0])
            }
            LossKind::Mlm => {
                let mut ta = vec![None; 9];
                ta[1] = Some(5u8);
                ta[5] = Some(2);
                let mut tb = vec![None; 9];
                tb[3] = Some(13);
                TrainingBatch::mlm(vec![&seq_a, &seq_b], vec![ta, tb])
            }
        };
        let (_, grads) = grad_wrt_params(&batch, &params, kind).unwrap();

        let h = 1e-5;
        let grad_tensors = grads.tensors();
        let mut worst = (0f64, String::new());
        for (idx, (name, g)) in grad_tensors.iter().enumerate() {
            let flat = g.as_slice().unwrap();
            // Probe a spread of elements from every tensor.
            let stride = (flat.len() / 7).max(1);
            for e in (0..flat.len()).step_by(stride) {
                let fp = perturbed_loss(&params, &batch, kind, idx, e, h);
                let fm = perturbed_loss(&params, &batch, kind, idx, e, -h);
                let numeric = (fp - fm) / (2.0 * h);
                let a = flat[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                if rel > worst.0 {
                    worst = (rel, format!("{name}[{e}]"));
                }
            }
        }
        assert!(
            worst.0 < 1e-5,
            "{kind:?}: worst rel err {} at {}",
            worst.0,
            worst.1
        );
    }

    #[test]
    fn classify_param_grads_match_finite_differences() {
        check_param_grads(LossKind::Classify);
    }

    #[test]
    fn mlm_param_grads_match_finite_differences() {
        check_param_grads(LossKind::Mlm);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradients() {
        let params = tiny_params();
        let seq = tiny_tokens();
        let single = TrainingBatch::classify(vec![&seq], vec![1]);
        let doubled = TrainingBatch::classify(vec![&seq, &seq], vec![1, 1]);
        let (l1, g1) = grad_wrt_params(&single, &params, LossKind::Classify).unwrap();
        let (l2, g2) = grad_wrt_params(&doubled, &params, LossKind::Classify).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for ((_, a), (_, b)) in g1.tensors().iter().zip(g2.tensors()) {
            let max = a
                .iter()
                .zip(b.iter())
                .fold(0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(max < 1e-15);
        }
    }

    #[test]
    fn gradients_stay_finite_on_random_batches() {
        let params = tiny_params();
        let seqs: Vec<Vec<u8>> = (0..6)
            .map(|i| {
                let mut s = tiny_tokens();
                for (j, v) in s.iter_mut().enumerate().skip(1) {
                    *v = ((i * 7 + j * 11) % 33) as u8;
                }
                s
            })
            .collect();
        let refs: Vec<&[u8]> = seqs.iter().map(|s| s.as_slice()).collect();
        let labels = vec![0, 1, 1, 0, 1, 0];
        let (loss, grads) =
            grad_wrt_params(&TrainingBatch::classify(refs, labels), &params, LossKind::Classify)
                .unwrap();
        assert!(loss.is_finite());
        assert!(grads.is_finite());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let params = tiny_params();
        let batch = TrainingBatch::classify(vec![], vec![]);
        assert!(matches!(
            grad_wrt_params(&batch, &params, LossKind::Classify),
            Err(ModelError::EmptyBatch)
        ));
    }
}
