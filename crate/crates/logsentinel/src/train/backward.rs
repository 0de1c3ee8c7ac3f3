//! Hand-derived gradients for the full encoder. Each function consumes the
//! forward cache and accumulates into a gradient accumulator shaped like
//! the parameters, so one accumulator can sum a whole batch.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{s as lit, softmax_rows, ForwardCache, LnCache, Model, ModelParams, Scalar};

/// Backward through per-row normalization. `d_out` is the gradient at the
/// output; gain and bias gradients accumulate in place and the gradient at
/// the input comes back. Uses the cached normalized rows, so the guard
/// epsilon is accounted for exactly.
pub fn layer_norm_backward<F: Scalar>(
    d_out: &Array2<F>,
    cache: &LnCache<F>,
    gain: &Array1<F>,
    d_gain: &mut Array1<F>,
    d_bias: &mut Array1<F>,
) -> Array2<F> {
    *d_gain += &(d_out * &cache.xhat).sum_axis(Axis(0));
    *d_bias += &d_out.sum_axis(Axis(0));

    let d = lit::<F>(d_out.ncols() as f64);
    let d_xhat = d_out * gain;
    let mut d_in = Array2::zeros(d_out.raw_dim());
    for ((dx_row, (dxhat_row, xhat_row)), &inv_std) in d_in
        .rows_mut()
        .into_iter()
        .zip(d_xhat.rows().into_iter().zip(cache.xhat.rows()))
        .zip(cache.inv_std.iter())
    {
        let mean_dxhat = dxhat_row.sum() / d;
        let mean_dxhat_xhat = dxhat_row
            .iter()
            .zip(xhat_row.iter())
            .map(|(&a, &b)| a * b)
            .sum::<F>()
            / d;
        for ((dx, &dxh), &xh) in dx_row.into_iter().zip(dxhat_row.iter()).zip(xhat_row.iter()) {
            *dx = inv_std * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
        }
    }
    d_in
}

/// Backward through a row-wise softmax: given the probabilities and the
/// gradient at them, the gradient at the scores is
/// p * (d_p - sum(p * d_p)) per row.
pub fn softmax_backward_rows<F: Scalar>(probs: &Array2<F>, d_probs: &Array2<F>) -> Array2<F> {
    let inner = (probs * d_probs).sum_axis(Axis(1));
    let mut out = d_probs.clone();
    for (mut row, &dot) in out.rows_mut().into_iter().zip(inner.iter()) {
        row.mapv_inplace(|v| v - dot);
    }
    out * probs
}

/// Accumulate the gradient of one sequence's loss
///
///   mlkp_scale * sum over masked positions of the prediction loss
/// + vhm_scale  * squared distance of the aggregate embedding from `center`
///
/// into `grads`. Either term switches off when its scale is zero.
pub fn backward_sequence<F: Scalar>(
    model: &Model<F>,
    cache: &ForwardCache<F>,
    targets: &[(usize, usize)],
    mlkp_scale: F,
    vhm_scale: F,
    center: Option<&Array1<F>>,
    grads: &mut ModelParams<F>,
) -> Result<()> {
    let t_len = cache.hidden.nrows();
    let vocab = model.config().vocab_size;
    let heads = model.config().n_heads;
    let dh = model.config().d_head();
    let scale = lit::<F>(1.0 / (dh as f64).sqrt());

    // head and prediction loss
    let mut d_hidden;
    if mlkp_scale != F::zero() && !targets.is_empty() {
        let mut d_logits = Array2::<F>::zeros((t_len, vocab));
        for &(pos, orig) in targets {
            if pos >= t_len || orig >= vocab {
                return Err(Error::Shape(format!(
                    "mask target ({pos}, {orig}) outside sequence {t_len} x vocab {vocab}"
                )));
            }
            let row = cache.logits.row(pos).insert_axis(Axis(0)).to_owned();
            let probs = softmax_rows(&row);
            let mut d_row = d_logits.row_mut(pos);
            d_row += &(&probs.row(0) * mlkp_scale);
            d_row[orig] -= mlkp_scale;
        }
        grads.head_weight += &cache.hidden.t().dot(&d_logits);
        grads.head_bias += &d_logits.sum_axis(Axis(0));
        d_hidden = d_logits.dot(&model.params.head_weight.t());
    } else {
        d_hidden = Array2::zeros((t_len, model.config().d_model));
    }

    // compactness term touches only the aggregate row
    if vhm_scale != F::zero() {
        let center = center.ok_or_else(|| {
            Error::Shape("compactness gradient requested without a center".into())
        })?;
        let two = lit::<F>(2.0);
        let mut row0 = d_hidden.row_mut(0);
        for (d, (&h, &c)) in row0
            .iter_mut()
            .zip(cache.hidden.row(0).iter().zip(center.iter()))
        {
            *d += two * vhm_scale * (h - c);
        }
    }

    // walk the stack backward
    let mut d_out = d_hidden;
    for (layer_cache, (lp, lg)) in cache
        .layers
        .iter()
        .zip(model.params.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        let d_s2 = layer_norm_backward(
            &d_out,
            &layer_cache.ln2,
            &lp.ln2_gain,
            &mut lg.ln2_gain,
            &mut lg.ln2_bias,
        );

        // feed-forward with residual from n1
        let mut d_n1 = d_s2.clone();
        lg.w_ff2 += &layer_cache.ffn_act.t().dot(&d_s2);
        let d_ffn_act = d_s2.dot(&lp.w_ff2.t());
        let relu_mask = layer_cache
            .ffn_pre
            .mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
        let d_ffn_pre = d_ffn_act * relu_mask;
        lg.w_ff1 += &layer_cache.n1.t().dot(&d_ffn_pre);
        d_n1 += &d_ffn_pre.dot(&lp.w_ff1.t());

        let d_s1 = layer_norm_backward(
            &d_n1,
            &layer_cache.ln1,
            &lp.ln1_gain,
            &mut lg.ln1_gain,
            &mut lg.ln1_bias,
        );

        // attention with residual from x_in
        let mut d_x = d_s1.clone();
        lg.w_o += &layer_cache.concat.t().dot(&d_s1);
        let d_concat = d_s1.dot(&lp.w_o.t());

        let mut d_q = Array2::<F>::zeros(layer_cache.q.raw_dim());
        let mut d_k = Array2::<F>::zeros(layer_cache.k.raw_dim());
        let mut d_v = Array2::<F>::zeros(layer_cache.v.raw_dim());
        for head in 0..heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let probs = &layer_cache.probs[head];
            let d_out_h = d_concat.slice(cols).to_owned();
            let v_h = layer_cache.v.slice(cols).to_owned();
            let q_h = layer_cache.q.slice(cols).to_owned();
            let k_h = layer_cache.k.slice(cols).to_owned();

            d_v.slice_mut(cols).assign(&probs.t().dot(&d_out_h));
            let d_probs = d_out_h.dot(&v_h.t());
            let d_scores = softmax_backward_rows(probs, &d_probs) * scale;
            d_q.slice_mut(cols).assign(&d_scores.dot(&k_h));
            d_k.slice_mut(cols).assign(&d_scores.t().dot(&q_h));
        }

        lg.w_q += &layer_cache.x_in.t().dot(&d_q);
        lg.w_k += &layer_cache.x_in.t().dot(&d_k);
        lg.w_v += &layer_cache.x_in.t().dot(&d_v);
        d_x += &d_q.dot(&lp.w_q.t());
        d_x += &d_k.dot(&lp.w_k.t());
        d_x += &d_v.dot(&lp.w_v.t());

        d_out = d_x;
    }

    // input projection and embedding scatter
    let d_x_embed = match (&model.params.input_proj, grads.input_proj.as_mut()) {
        (Some(p), Some(gp)) => {
            *gp += &cache.x_embed.t().dot(&d_out);
            d_out.dot(&p.t())
        }
        (None, None) => d_out,
        _ => {
            return Err(Error::Shape(
                "gradient accumulator shape does not match the parameters".into(),
            ))
        }
    };
    for (i, &tok) in cache.tokens.iter().enumerate() {
        let mut row = grads.embedding.row_mut(tok);
        row += &d_x_embed.row(i);
    }
    Ok(())
}
