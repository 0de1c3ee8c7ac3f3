//! Parameter tensors, their canonical naming, and initialization.
//!
//! The named-tensor order is a stable contract shared by checkpointing and
//! the optimizer's moment buffers: embedding, optional input projection,
//! then per layer the attention projections, first norm, feed-forward
//! pair, second norm, and finally the output head.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::{s, ModelConfig, Scalar};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub w_o: Array2<F>,
    pub ln1_gain: Array1<F>,
    pub ln1_bias: Array1<F>,
    pub w_ff1: Array2<F>,
    pub w_ff2: Array2<F>,
    pub ln2_gain: Array1<F>,
    pub ln2_bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub embedding: Array2<F>,
    pub input_proj: Option<Array2<F>>,
    pub layers: Vec<LayerParams<F>>,
    pub head_weight: Array2<F>,
    pub head_bias: Array1<F>,
}

#[derive(Debug, Clone, Copy)]
pub enum TensorRef<'a, F> {
    Mat(&'a Array2<F>),
    Vec1(&'a Array1<F>),
}

pub enum TensorMut<'a, F> {
    Mat(&'a mut Array2<F>),
    Vec1(&'a mut Array1<F>),
}

impl<'a, F> TensorRef<'a, F> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Mat(m) => m.shape().to_vec(),
            TensorRef::Vec1(v) => v.shape().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorRef::Mat(m) => m.len(),
            TensorRef::Vec1(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in row-major order. All parameter tensors are built in
    /// standard layout, so the slice view always exists.
    pub fn as_slice(&self) -> &'a [F] {
        match self {
            TensorRef::Mat(m) => m.as_slice().expect("parameter tensor in standard layout"),
            TensorRef::Vec1(v) => v.as_slice().expect("parameter tensor in standard layout"),
        }
    }
}

impl<'a, F> TensorMut<'a, F> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorMut::Mat(m) => m.shape().to_vec(),
            TensorMut::Vec1(v) => v.shape().to_vec(),
        }
    }

    pub fn as_slice_mut(&mut self) -> &mut [F] {
        match self {
            TensorMut::Mat(m) => m.as_slice_mut().expect("parameter tensor in standard layout"),
            TensorMut::Vec1(v) => v.as_slice_mut().expect("parameter tensor in standard layout"),
        }
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Draw fresh parameters. Weight matrices are uniform in
    /// (-1/sqrt(fan_in), 1/sqrt(fan_in)); norm gains start at one and all
    /// biases at zero. The draw order matches the named-tensor order, so a
    /// given seed always produces the same parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng::substream(seed, "model-init");
        let d = config.d_embed;
        let dm = config.d_model;
        let proj_width = config.n_heads * config.d_head();

        let embedding = draw(&mut rng, config.vocab_size, d, d);
        let input_proj = config
            .has_input_proj()
            .then(|| draw(&mut rng, d, dm, d));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                w_q: draw(&mut rng, dm, proj_width, dm),
                w_k: draw(&mut rng, dm, proj_width, dm),
                w_v: draw(&mut rng, dm, proj_width, dm),
                w_o: draw(&mut rng, proj_width, dm, proj_width),
                ln1_gain: Array1::ones(dm),
                ln1_bias: Array1::zeros(dm),
                w_ff1: draw(&mut rng, dm, config.d_ff, dm),
                w_ff2: draw(&mut rng, config.d_ff, dm, config.d_ff),
                ln2_gain: Array1::ones(dm),
                ln2_bias: Array1::zeros(dm),
            })
            .collect();
        let head_weight = draw(&mut rng, dm, config.vocab_size, dm);
        let head_bias = Array1::zeros(config.vocab_size);

        ModelParams {
            embedding,
            input_proj,
            layers,
            head_weight,
            head_bias,
        }
    }

    /// Same shapes, all elements zero. Used for gradient accumulators and
    /// optimizer state.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embedding: Array2::zeros(self.embedding.raw_dim()),
            input_proj: self.input_proj.as_ref().map(|p| Array2::zeros(p.raw_dim())),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_q: Array2::zeros(l.w_q.raw_dim()),
                    w_k: Array2::zeros(l.w_k.raw_dim()),
                    w_v: Array2::zeros(l.w_v.raw_dim()),
                    w_o: Array2::zeros(l.w_o.raw_dim()),
                    ln1_gain: Array1::zeros(l.ln1_gain.raw_dim()),
                    ln1_bias: Array1::zeros(l.ln1_bias.raw_dim()),
                    w_ff1: Array2::zeros(l.w_ff1.raw_dim()),
                    w_ff2: Array2::zeros(l.w_ff2.raw_dim()),
                    ln2_gain: Array1::zeros(l.ln2_gain.raw_dim()),
                    ln2_bias: Array1::zeros(l.ln2_bias.raw_dim()),
                })
                .collect(),
            head_weight: Array2::zeros(self.head_weight.raw_dim()),
            head_bias: Array1::zeros(self.head_bias.raw_dim()),
        }
    }

    /// Convert element type, preserving shapes exactly.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let m = |a: &Array2<F>| a.mapv(|x| G::from_f64(x.to_f64()));
        let v = |a: &Array1<F>| a.mapv(|x| G::from_f64(x.to_f64()));
        ModelParams {
            embedding: m(&self.embedding),
            input_proj: self.input_proj.as_ref().map(&m),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_q: m(&l.w_q),
                    w_k: m(&l.w_k),
                    w_v: m(&l.w_v),
                    w_o: m(&l.w_o),
                    ln1_gain: v(&l.ln1_gain),
                    ln1_bias: v(&l.ln1_bias),
                    w_ff1: m(&l.w_ff1),
                    w_ff2: m(&l.w_ff2),
                    ln2_gain: v(&l.ln2_gain),
                    ln2_bias: v(&l.ln2_bias),
                })
                .collect(),
            head_weight: m(&self.head_weight),
            head_bias: v(&self.head_bias),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, TensorRef<'_, F>)> {
        let mut out: Vec<(String, TensorRef<'_, F>)> = Vec::new();
        out.push(("embedding".into(), TensorRef::Mat(&self.embedding)));
        if let Some(p) = &self.input_proj {
            out.push(("input_proj".into(), TensorRef::Mat(p)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w_q"), TensorRef::Mat(&l.w_q)));
            out.push((format!("layer{i}.w_k"), TensorRef::Mat(&l.w_k)));
            out.push((format!("layer{i}.w_v"), TensorRef::Mat(&l.w_v)));
            out.push((format!("layer{i}.w_o"), TensorRef::Mat(&l.w_o)));
            out.push((format!("layer{i}.ln1_gain"), TensorRef::Vec1(&l.ln1_gain)));
            out.push((format!("layer{i}.ln1_bias"), TensorRef::Vec1(&l.ln1_bias)));
            out.push((format!("layer{i}.w_ff1"), TensorRef::Mat(&l.w_ff1)));
            out.push((format!("layer{i}.w_ff2"), TensorRef::Mat(&l.w_ff2)));
            out.push((format!("layer{i}.ln2_gain"), TensorRef::Vec1(&l.ln2_gain)));
            out.push((format!("layer{i}.ln2_bias"), TensorRef::Vec1(&l.ln2_bias)));
        }
        out.push(("head_weight".into(), TensorRef::Mat(&self.head_weight)));
        out.push(("head_bias".into(), TensorRef::Vec1(&self.head_bias)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorMut<'_, F>)> {
        let mut out: Vec<(String, TensorMut<'_, F>)> = Vec::new();
        out.push(("embedding".into(), TensorMut::Mat(&mut self.embedding)));
        if let Some(p) = &mut self.input_proj {
            out.push(("input_proj".into(), TensorMut::Mat(p)));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w_q"), TensorMut::Mat(&mut l.w_q)));
            out.push((format!("layer{i}.w_k"), TensorMut::Mat(&mut l.w_k)));
            out.push((format!("layer{i}.w_v"), TensorMut::Mat(&mut l.w_v)));
            out.push((format!("layer{i}.w_o"), TensorMut::Mat(&mut l.w_o)));
            out.push((format!("layer{i}.ln1_gain"), TensorMut::Vec1(&mut l.ln1_gain)));
            out.push((format!("layer{i}.ln1_bias"), TensorMut::Vec1(&mut l.ln1_bias)));
            out.push((format!("layer{i}.w_ff1"), TensorMut::Mat(&mut l.w_ff1)));
            out.push((format!("layer{i}.w_ff2"), TensorMut::Mat(&mut l.w_ff2)));
            out.push((format!("layer{i}.ln2_gain"), TensorMut::Vec1(&mut l.ln2_gain)));
            out.push((format!("layer{i}.ln2_bias"), TensorMut::Vec1(&mut l.ln2_bias)));
        }
        out.push(("head_weight".into(), TensorMut::Mat(&mut self.head_weight)));
        out.push(("head_bias".into(), TensorMut::Vec1(&mut self.head_bias)));
        out
    }

    pub fn n_elements(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn draw<F: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| s(rng.random_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_embed: 8,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            n_layers: 2,
            max_len: 16,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let c = small_config();
        let a = ModelParams::<f32>::init(&c, 7);
        let b = ModelParams::<f32>::init(&c, 7);
        let other = ModelParams::<f32>::init(&c, 8);
        assert_eq!(a, b);
        assert_ne!(a, other);
    }

    #[test]
    fn named_order_is_stable_and_complete() {
        let c = small_config();
        let p = ModelParams::<f32>::init(&c, 0);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embedding");
        assert_eq!(names[1], "input_proj");
        assert_eq!(names[2], "layer0.w_q");
        assert_eq!(names[names.len() - 2], "head_weight");
        assert_eq!(names[names.len() - 1], "head_bias");
        assert_eq!(names.len(), 2 + 2 * 10 + 2);
        let mut_names: Vec<String> = {
            let mut q = p.clone();
            q.named_tensors_mut().into_iter().map(|(n, _)| n).collect()
        };
        assert_eq!(names, mut_names);
    }

    #[test]
    fn no_projection_when_widths_match() {
        let c = ModelConfig {
            d_embed: 16,
            ..small_config()
        };
        let p = ModelParams::<f32>::init(&c, 0);
        assert!(p.input_proj.is_none());
        assert!(p.named_tensors().iter().all(|(n, _)| n != "input_proj"));
    }

    #[test]
    fn norm_params_start_at_identity() {
        let p = ModelParams::<f32>::init(&small_config(), 3);
        assert!(p.layers[0].ln1_gain.iter().all(|&g| g == 1.0));
        assert!(p.layers[0].ln1_bias.iter().all(|&b| b == 0.0));
        assert!(p.head_bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let p = ModelParams::<f64>::init(&small_config(), 11);
        let bound = 1.0 / (16f64).sqrt();
        assert!(p.layers[0].w_q.iter().all(|&x| x.abs() < bound));
        assert!(p.layers[0].w_q.iter().any(|&x| x.abs() > bound * 0.5));
    }

    #[test]
    fn cast_round_trip_preserves_shapes() {
        let p = ModelParams::<f32>::init(&small_config(), 5);
        let q: ModelParams<f64> = p.cast();
        let r: ModelParams<f32> = q.cast();
        assert_eq!(p, r);
        assert_eq!(p.n_elements(), q.n_elements());
    }

    #[test]
    fn zeros_like_matches_shapes() {
        let p = ModelParams::<f32>::init(&small_config(), 5);
        let z = p.zeros_like();
        assert_eq!(p.n_elements(), z.n_elements());
        for (name, t) in z.named_tensors() {
            assert!(t.as_slice().iter().all(|&x| x == 0.0), "{name} not zeroed");
        }
    }
}
