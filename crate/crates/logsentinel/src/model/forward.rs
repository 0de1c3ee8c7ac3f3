//! Forward computation: positional encoding, scaled dot-product attention,
//! layer normalization, and the full encoder stack. The cached variant
//! records every intermediate the backward pass needs.

use ndarray::{s, Array1, Array2, Axis};

use super::{s as lit, ModelConfig, ModelParams, Scalar};
use crate::error::{Error, Result};

/// Variance guard inside the normalization square root.
pub const LN_EPS: f64 = 1e-12;

/// Sinusoidal position table: row `pos`, column `2i` holds
/// sin(pos / 10000^(2i/d)) and column `2i+1` the matching cosine. The
/// width must be even so sine and cosine columns pair up.
pub fn positional_encoding<F: Scalar>(max_len: usize, d: usize) -> Result<Array2<F>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width must be even, got {d}"
        )));
    }
    Ok(Array2::from_shape_fn((max_len, d), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Scaled dot-product attention: softmax(q k^T / sqrt(width)) v.
pub fn attention<F: Scalar>(q: &Array2<F>, k: &Array2<F>, v: &Array2<F>) -> Array2<F> {
    attention_with_probs(q, k, v).0
}

/// Attention that also returns the probability matrix, one row per query.
pub fn attention_with_probs<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let scale = lit::<F>(1.0 / (k.ncols() as f64).sqrt());
    let scores = q.dot(&k.t()) * scale;
    let probs = softmax_rows(&scores);
    let out = probs.dot(v);
    (out, probs)
}

/// Attention over a partially padded key set: key positions where
/// `key_mask` is false receive minus-infinity scores and thus zero weight.
/// The encoder itself runs on trimmed sequences; this variant exists so
/// the equivalence of trimming and masking is testable, and for callers
/// that keep padded buffers.
pub fn attention_masked<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    key_mask: &[bool],
) -> Result<(Array2<F>, Array2<F>)> {
    if key_mask.len() != k.nrows() {
        return Err(Error::Shape(format!(
            "key mask of {} entries against {} keys",
            key_mask.len(),
            k.nrows()
        )));
    }
    if !key_mask.iter().any(|&b| b) {
        return Err(Error::Shape(
            "every key position is masked; no query can attend anywhere".into(),
        ));
    }
    let scale = lit::<F>(1.0 / (k.ncols() as f64).sqrt());
    let mut scores = q.dot(&k.t()) * scale;
    for (j, &keep) in key_mask.iter().enumerate() {
        if !keep {
            scores.column_mut(j).fill(F::neg_infinity());
        }
    }
    let probs = softmax_rows(&scores);
    let out = probs.dot(v);
    Ok((out, probs))
}

#[derive(Debug, Clone)]
pub struct LnCache<F> {
    /// Normalized rows before gain and bias.
    pub xhat: Array2<F>,
    /// 1 / sqrt(variance + eps) per row.
    pub inv_std: Array1<F>,
}

/// Per-row normalization with learned gain and bias. Variance is the
/// biased (population) estimate.
pub fn layer_norm<F: Scalar>(x: &Array2<F>, gain: &Array1<F>, bias: &Array1<F>) -> Array2<F> {
    layer_norm_cached(x, gain, bias).0
}

pub fn layer_norm_cached<F: Scalar>(
    x: &Array2<F>,
    gain: &Array1<F>,
    bias: &Array1<F>,
) -> (Array2<F>, LnCache<F>) {
    let d = lit::<F>(x.ncols() as f64);
    let eps = lit::<F>(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        let inv = (var + eps).sqrt().recip();
        row.mapv_inplace(|v| v * inv);
        *is = inv;
    }
    let out = &xhat * gain + bias;
    (out, LnCache { xhat, inv_std })
}

#[derive(Debug, Clone)]
pub struct LayerCache<F> {
    pub x_in: Array2<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Attention probabilities per head, each (T, T).
    pub probs: Vec<Array2<F>>,
    /// Head outputs side by side, before the output projection.
    pub concat: Array2<F>,
    pub s1: Array2<F>,
    pub ln1: LnCache<F>,
    pub n1: Array2<F>,
    /// Feed-forward pre-activation.
    pub ffn_pre: Array2<F>,
    pub ffn_act: Array2<F>,
    pub s2: Array2<F>,
    pub ln2: LnCache<F>,
    pub n2: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub tokens: Vec<usize>,
    /// Embedding plus position, before any projection.
    pub x_embed: Array2<F>,
    /// Input to the first layer, at stack width.
    pub x0: Array2<F>,
    pub layers: Vec<LayerCache<F>>,
    /// Contextual output of the last layer, one row per token.
    pub hidden: Array2<F>,
    pub logits: Array2<F>,
}

impl<F: Scalar> ForwardCache<F> {
    /// Contextual embedding of the aggregate token.
    pub fn dist_row(&self) -> ndarray::ArrayView1<'_, F> {
        self.hidden.row(0)
    }
}

pub struct Model<F: Scalar> {
    config: ModelConfig,
    pub params: ModelParams<F>,
    pos: Array2<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Model {
            pos: positional_encoding(config.max_len, config.d_embed)?,
            config,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<F>) -> Result<Self> {
        config.validate()?;
        if params.embedding.nrows() != config.vocab_size
            || params.embedding.ncols() != config.d_embed
            || params.layers.len() != config.n_layers
            || params.input_proj.is_some() != config.has_input_proj()
            || params.head_weight.ncols() != config.vocab_size
        {
            return Err(Error::Shape(
                "parameter tensors do not match the model shape".into(),
            ));
        }
        Ok(Model {
            pos: positional_encoding(config.max_len, config.d_embed)?,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Shape("cannot encode an empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embedding plus positional encoding, one row per token.
    pub fn input_representation(&self, tokens: &[usize]) -> Result<Array2<F>> {
        self.check_tokens(tokens)?;
        let mut x = Array2::zeros((tokens.len(), self.config.d_embed));
        for (i, &t) in tokens.iter().enumerate() {
            let row = &self.params.embedding.row(t) + &self.pos.row(i);
            x.row_mut(i).assign(&row);
        }
        Ok(x)
    }

    /// Full forward pass with every intermediate recorded.
    pub fn forward_cached(&self, tokens: &[usize]) -> Result<ForwardCache<F>> {
        let x_embed = self.input_representation(tokens)?;
        let x0 = match &self.params.input_proj {
            Some(p) => x_embed.dot(p),
            None => x_embed.clone(),
        };

        let h = self.config.n_heads;
        let dh = self.config.d_head();
        let mut layers = Vec::with_capacity(self.config.n_layers);
        let mut x_in = x0.clone();
        for lp in &self.params.layers {
            let q = x_in.dot(&lp.w_q);
            let k = x_in.dot(&lp.w_k);
            let v = x_in.dot(&lp.w_v);
            let mut concat = Array2::zeros((x_in.nrows(), h * dh));
            let mut probs = Vec::with_capacity(h);
            for head in 0..h {
                let cols = s![.., head * dh..(head + 1) * dh];
                let (out, p) = attention_with_probs(
                    &q.slice(cols).to_owned(),
                    &k.slice(cols).to_owned(),
                    &v.slice(cols).to_owned(),
                );
                concat.slice_mut(cols).assign(&out);
                probs.push(p);
            }
            let a = concat.dot(&lp.w_o);
            let s1 = &x_in + &a;
            let (n1, ln1) = layer_norm_cached(&s1, &lp.ln1_gain, &lp.ln1_bias);
            let ffn_pre = n1.dot(&lp.w_ff1);
            let ffn_act = ffn_pre.mapv(|v| v.max(F::zero()));
            let s2 = &n1 + &ffn_act.dot(&lp.w_ff2);
            let (n2, ln2) = layer_norm_cached(&s2, &lp.ln2_gain, &lp.ln2_bias);
            let next = n2.clone();
            layers.push(LayerCache {
                x_in,
                q,
                k,
                v,
                probs,
                concat,
                s1,
                ln1,
                n1,
                ffn_pre,
                ffn_act,
                s2,
                ln2,
                n2,
            });
            x_in = next;
        }

        let hidden = x_in;
        let logits = hidden.dot(&self.params.head_weight) + &self.params.head_bias;
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            x_embed,
            x0,
            layers,
            hidden,
            logits,
        })
    }

    /// Contextual states and per-position logits.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Array2<F>, Array2<F>)> {
        let cache = self.forward_cached(tokens)?;
        Ok((cache.hidden, cache.logits))
    }

    /// Contextual embedding of the aggregate token at position 0.
    pub fn dist_embedding(&self, tokens: &[usize]) -> Result<Array1<F>> {
        Ok(self.forward(tokens)?.0.index_axis_move(Axis(0), 0))
    }

    /// Probability distribution over token ids at one position.
    pub fn predict_probs(&self, tokens: &[usize], position: usize) -> Result<Array1<F>> {
        let (_, logits) = self.forward(tokens)?;
        if position >= logits.nrows() {
            return Err(Error::Shape(format!(
                "position {position} outside sequence of {}",
                logits.nrows()
            )));
        }
        let row = logits.row(position).insert_axis(Axis(0)).to_owned();
        Ok(softmax_rows(&row).index_axis_move(Axis(0), 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_model() -> Model<f64> {
        Model::new(
            ModelConfig {
                vocab_size: 10,
                d_embed: 8,
                d_model: 16,
                d_ff: 32,
                n_heads: 2,
                n_layers: 2,
                max_len: 16,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn positional_encoding_matches_formula() {
        let pe: Array2<f64> = positional_encoding(20, 6).unwrap();
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        for pos in 0..20 {
            for j in 0..6 {
                let i = (j / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * i / 6.0);
                let want = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                assert!((pe[[pos, j]] - want).abs() < 1e-15);
                assert!(pe[[pos, j]].abs() <= 1.0);
            }
        }
        // first off-origin sine entry
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn positional_encoding_rejects_odd_width() {
        assert!(positional_encoding::<f64>(4, 5).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = array![[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&(&x + 100.0));
        for (a, b) in p.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_against_hand_computed_example() {
        // single query attending over two keys
        let q = array![[1.0f64, 0.0]];
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        let v = array![[10.0, 0.0], [0.0, 10.0]];
        let (out, probs) = attention_with_probs(&q, &k, &v);
        let scale = 1.0 / 2f64.sqrt();
        let e0 = (1.0 * scale).exp();
        let e1 = (0.0f64).exp();
        let p0 = e0 / (e0 + e1);
        assert!((probs[[0, 0]] - p0).abs() < 1e-12);
        assert!((out[[0, 0]] - 10.0 * p0).abs() < 1e-12);
        assert!((out[[0, 1]] - 10.0 * (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn zero_query_averages_values() {
        let q = Array2::zeros((1, 3));
        let k = array![[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0], [-1.0, 0.0, 1.0]];
        let v = array![[3.0f64, 0.0, 0.0], [0.0, 6.0, 0.0], [0.0, 0.0, 9.0]];
        let out = attention(&q, &k, &v);
        for (x, want) in out.row(0).iter().zip([1.0, 2.0, 3.0]) {
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_admitting_one_position_returns_that_value_row() {
        let mut rng = crate::rng::substream(1, "attn-mask-test");
        use rand::Rng;
        let q = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0f64..1.0));
        let k = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0f64..1.0));
        let v = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0f64..1.0));
        let (out, probs) = attention_masked(&q, &k, &v, &[false, false, true, false, false]).unwrap();
        for row in 0..3 {
            assert!((probs[[row, 2]] - 1.0).abs() < 1e-12);
            for (a, b) in out.row(row).iter().zip(v.row(2).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masking_padded_keys_equals_trimming_them() {
        let mut rng = crate::rng::substream(2, "attn-pad-test");
        use rand::Rng;
        let q = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0f64..1.0));
        let k_real = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0f64..1.0));
        let v_real = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0f64..1.0));
        // stack junk rows behind the real keys and mask them off
        let mut k_pad = Array2::from_elem((5, 4), 7.5);
        let mut v_pad = Array2::from_elem((5, 4), -3.25);
        k_pad.slice_mut(s![..3, ..]).assign(&k_real);
        v_pad.slice_mut(s![..3, ..]).assign(&v_real);
        let (masked, _) = attention_masked(&q, &k_pad, &v_pad, &[true, true, true, false, false]).unwrap();
        let plain = attention(&q, &k_real, &v_real);
        for (a, b) in masked.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_keys_are_an_error() {
        let q = Array2::<f64>::zeros((2, 3));
        let k = Array2::<f64>::zeros((2, 3));
        let v = Array2::<f64>::zeros((2, 3));
        assert!(attention_masked(&q, &k, &v, &[false, false]).is_err());
        assert!(attention_masked(&q, &k, &v, &[true]).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [10.0, 10.0, 30.0, 30.0]];
        let gain = Array1::ones(4);
        let bias = Array1::zeros(4);
        let (y, cache) = layer_norm_cached(&x, &gain, &bias);
        for row in y.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert_eq!(cache.xhat, y);
    }

    #[test]
    fn layer_norm_applies_gain_and_bias() {
        let x = array![[2.0f64, 4.0]];
        let gain = array![3.0, 3.0];
        let bias = array![1.0, -1.0];
        let y = layer_norm(&x, &gain, &bias);
        // xhat = [-1, 1] for a two-element row
        assert!((y[[0, 0]] - (3.0 * -1.0 + 1.0)).abs() < 1e-6);
        assert!((y[[0, 1]] - (3.0 * 1.0 - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = small_model();
        let tokens = [1usize, 4, 5, 6, 2, 7];
        let (h1, l1) = m.forward(&tokens).unwrap();
        let (h2, l2) = m.forward(&tokens).unwrap();
        assert_eq!(h1.shape(), &[6, 16]);
        assert_eq!(l1.shape(), &[6, 10]);
        assert_eq!(h1, h2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn cache_chains_layers() {
        let m = small_model();
        let cache = m.forward_cached(&[1, 4, 5]).unwrap();
        assert_eq!(cache.layers.len(), 2);
        assert_eq!(cache.layers[0].n2, cache.layers[1].x_in);
        assert_eq!(cache.layers[1].n2, cache.hidden);
        assert_eq!(cache.x0, cache.layers[0].x_in);
        assert_eq!(cache.dist_row(), cache.hidden.row(0));
    }

    #[test]
    fn attention_probs_rows_sum_to_one() {
        let m = small_model();
        let cache = m.forward_cached(&[1, 4, 5, 6, 7]).unwrap();
        for layer in &cache.layers {
            assert_eq!(layer.probs.len(), 2);
            for p in &layer.probs {
                assert_eq!(p.shape(), &[5, 5]);
                for row in p.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_layers_pass_projected_input_through() {
        let m: Model<f64> = Model::new(
            ModelConfig {
                vocab_size: 8,
                d_embed: 6,
                d_model: 12,
                d_ff: 8,
                n_heads: 2,
                n_layers: 0,
                max_len: 8,
            },
            4,
        )
        .unwrap();
        let tokens = [1usize, 4, 5];
        let (h, _) = m.forward(&tokens).unwrap();
        let want = m
            .input_representation(&tokens)
            .unwrap()
            .dot(m.params.input_proj.as_ref().unwrap());
        assert_eq!(h, want);
    }

    #[test]
    fn forward_without_projection() {
        let m: Model<f64> = Model::new(
            ModelConfig {
                vocab_size: 8,
                d_embed: 12,
                d_model: 12,
                d_ff: 8,
                n_heads: 3,
                n_layers: 1,
                max_len: 8,
            },
            0,
        )
        .unwrap();
        assert!(m.params.input_proj.is_none());
        let (h, _) = m.forward(&[1, 4, 5]).unwrap();
        assert_eq!(h.shape(), &[3, 12]);
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let m = small_model();
        assert!(m.forward(&[]).is_err());
        assert!(m.forward(&[1, 10]).is_err());
        assert!(m.forward(&vec![1; 17]).is_err());
    }

    #[test]
    fn predict_probs_is_a_distribution() {
        let m = small_model();
        let p = m.predict_probs(&[1, 2, 5], 1).unwrap();
        assert_eq!(p.len(), 10);
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&x| x > 0.0));
        assert!(m.predict_probs(&[1, 2, 5], 3).is_err());
    }

    #[test]
    fn input_representation_adds_position() {
        let m = small_model();
        let x = m.input_representation(&[4, 4]).unwrap();
        // same token at two positions differs exactly by the position rows
        let pe: Array2<f64> = positional_encoding(16, 8).unwrap();
        let diff = &x.row(1) - &x.row(0);
        let want = &pe.row(1) - &pe.row(0);
        for (a, b) in diff.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
