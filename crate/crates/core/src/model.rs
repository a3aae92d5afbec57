//! The two-branch speech network (shared conv trunk, visual and bag-of-words
//! heads) and the projection that maps tagger features into the speech
//! embedding space.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::corpus::{derive_seed, UtteranceFeatures};
use crate::error::{Error, Result};
use crate::numerics::{
    conv1d, conv1d_backward, linear, linear_backward, max_pool_over_time, max_pool_over_time_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, Conv1dSpec, Padding, Real, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeechModelConfig {
    pub d_feat: usize,
    pub t_max: usize,
    /// The embedding dimension is the channel count of the last layer.
    pub conv: Vec<ConvLayerConfig>,
    pub padding: Padding,
    /// Hidden widths of each head; `None` means one layer of embedding width.
    pub head_hidden: Option<Vec<usize>>,
    pub n_vis: usize,
    pub n_bow: usize,
    /// Width of the tagger feature fed to the vision projection.
    pub d_vis_hidden: usize,
    /// Hidden width of the vision projection; `None` means embedding width.
    pub projection_hidden: Option<usize>,
    /// Pool only over output frames derived from unpadded input.
    pub mask_padding: bool,
}

impl Default for SpeechModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 13,
            t_max: 200,
            conv: vec![
                ConvLayerConfig { channels: 32, kernel: 9, stride: 1 },
                ConvLayerConfig { channels: 64, kernel: 7, stride: 2 },
                ConvLayerConfig { channels: 128, kernel: 7, stride: 2 },
            ],
            padding: Padding::Same,
            head_hidden: None,
            n_vis: 40,
            n_bow: 40,
            d_vis_hidden: 64,
            projection_hidden: None,
            mask_padding: false,
        }
    }
}

impl SpeechModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.conv.last().map_or(0, |c| c.channels)
    }

    pub fn head_widths(&self) -> Vec<usize> {
        self.head_hidden.clone().unwrap_or_else(|| vec![self.embed_dim()])
    }

    pub fn projection_width(&self) -> usize {
        self.projection_hidden.unwrap_or_else(|| self.embed_dim())
    }

    fn spec(&self, layer: usize) -> Conv1dSpec {
        Conv1dSpec::new(self.conv[layer].stride, self.padding)
    }

    /// Output frames of the trunk for an input of `len` frames.
    pub fn trunk_frames(&self, len: usize) -> Option<usize> {
        let mut t = len;
        for (i, c) in self.conv.iter().enumerate() {
            t = self.spec(i).geometry(t, c.kernel)?.0;
        }
        Some(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.conv.is_empty() {
            return bad("at least one conv layer is required".into());
        }
        if let Some(c) = self.conv.iter().find(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return bad(format!("conv layer {c:?} has a zero size"));
        }
        if self.d_feat == 0 || self.t_max == 0 {
            return bad("d_feat and t_max must be ≥ 1".into());
        }
        if self.n_vis == 0 || self.n_bow == 0 {
            return bad("n_vis and n_bow must be ≥ 1".into());
        }
        if self.d_vis_hidden == 0 || self.projection_width() == 0 {
            return bad("projection widths must be ≥ 1".into());
        }
        if self.head_widths().contains(&0) {
            return bad("head hidden widths must be ≥ 1".into());
        }
        if self.trunk_frames(self.t_max).is_none() {
            return bad(format!("conv stack does not fit {} frames", self.t_max));
        }
        Ok(())
    }
}

/// Which part of the network a parameter block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Trunk,
    VisHead,
    BowHead,
    Projection,
    Tagger,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Trunk => "trunk",
            ParamGroup::VisHead => "vis",
            ParamGroup::BowHead => "bow",
            ParamGroup::Projection => "proj",
            ParamGroup::Tagger => "tagger",
        })
    }
}

/// Uniform iteration over named parameter tensors, in a fixed order.
pub trait Parameters<F: Real> {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &str, &Tensor<F>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Tensor<F>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, t| out.extend(t.data().iter().map(|x| x.as_f64())));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(&mut |_, _, t| {
            for x in t.data_mut() {
                *x = F::of(flat[pos]);
                pos += 1;
            }
        });
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, _, t| t.fill(F::zero()));
    }

    fn group_flat(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |g, _, t| {
            if g == group {
                out.extend(t.data().iter().map(|x| x.as_f64()));
            }
        });
        out
    }

    /// Hex SHA-256 over names and values at `f64` precision.
    fn checksum(&self) -> String {
        let mut w = binfmt::Writer::new();
        self.visit(&mut |_, name, t| {
            w.str(name);
            w.f64s(&t.data().iter().map(|x| x.as_f64()).collect::<Vec<_>>());
        });
        binfmt::hex_digest(&w.seal(b"VGKWPARM", 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `[out, in]`
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> Dense<F> {
    pub(crate) fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: uniform(&[fan_out, fan_in], fan_in, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    /// `[C_out, K, C_in]`
    pub kernels: Tensor<F>,
    pub bias: Tensor<F>,
    pub spec: Conv1dSpec,
}

/// He-style fan-in bound: weights uniform in `±sqrt(6 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let b = init_bound(fan_in);
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.random_range(-b..b))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn dense_stack<F: Real>(dims: &[usize], rng: &mut ChaCha8Rng) -> Vec<Dense<F>> {
    dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect()
}

pub(crate) fn visit_dense<F: Real>(
    layers: &[Dense<F>],
    group: ParamGroup,
    f: &mut dyn FnMut(ParamGroup, &str, &Tensor<F>),
) {
    for (i, l) in layers.iter().enumerate() {
        f(group, &format!("{group}.{i}.weight"), &l.weight);
        f(group, &format!("{group}.{i}.bias"), &l.bias);
    }
}

pub(crate) fn visit_dense_mut<F: Real>(
    layers: &mut [Dense<F>],
    group: ParamGroup,
    f: &mut dyn FnMut(ParamGroup, &str, &mut Tensor<F>),
) {
    for (i, l) in layers.iter_mut().enumerate() {
        f(group, &format!("{group}.{i}.weight"), &mut l.weight);
        f(group, &format!("{group}.{i}.bias"), &mut l.bias);
    }
}

/// Activations of a ReLU stack ending in a sigmoid: `acts[0]` is the input,
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
struct HeadCache<F> {
    acts: Vec<Tensor<F>>,
}

fn head_forward<F: Real>(layers: &[Dense<F>], input: Tensor<F>) -> Result<HeadCache<F>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input);
    for (i, l) in layers.iter().enumerate() {
        let z = linear(acts.last().unwrap(), &l.weight, &l.bias)?;
        let a = if i + 1 == layers.len() { sigmoid(&z)? } else { relu(&z)? };
        acts.push(a);
    }
    Ok(HeadCache { acts })
}

/// Backpropagates `grad` (w.r.t. the sigmoid output) and returns the gradient w.r.t. the head input.
fn head_backward<F: Real>(layers: &[Dense<F>], cache: &HeadCache<F>, grad: &[F], grads: &mut [Dense<F>]) -> Vec<F> {
    let mut g = grad.to_vec();
    let n = layers.len();
    sigmoid_backward(cache.acts[n].data(), &mut g);
    for i in (0..n).rev() {
        let gl = &mut grads[i];
        let gi = linear_backward(&cache.acts[i], &layers[i].weight, &g, gl.weight.data_mut(), gl.bias.data_mut());
        g = gi.into_data();
        if i > 0 {
            relu_backward(cache.acts[i].data(), &mut g);
        }
    }
    g
}

#[derive(Debug, Clone)]
struct TrunkCache<F> {
    /// Input to each conv layer.
    inputs: Vec<Tensor<F>>,
    /// Post-ReLU output of the last layer.
    output: Tensor<F>,
    argmax: Vec<usize>,
}

/// Result of one forward pass, holding what the backward pass needs.
#[derive(Debug, Clone)]
pub struct SpeechForward<F> {
    pub y_vis: Vec<F>,
    pub y_bow: Vec<F>,
    /// Max-pooled trunk output `s`.
    pub embedding: Vec<F>,
    trunk: TrunkCache<F>,
    vis: HeadCache<F>,
    bow: HeadCache<F>,
}

impl<F: Real> SpeechForward<F> {
    /// Which units are active and which frames won each pool; constant
    /// wherever the network is differentiable.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = positive_mask(self.trunk.inputs.iter().skip(1).chain([&self.trunk.output]));
        out.extend(&self.trunk.argmax);
        for head in [&self.vis, &self.bow] {
            out.extend(positive_mask(head.acts[1..head.acts.len() - 1].iter()));
        }
        out
    }
}

fn positive_mask<'a, F: Real + 'a>(ts: impl Iterator<Item = &'a Tensor<F>>) -> Vec<usize> {
    ts.flat_map(|t| t.data().iter().map(|&x| usize::from(x > F::zero())))
        .collect()
}

/// Gradients flowing into a forward pass; absent entries contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<'a, F> {
    pub y_vis: Option<&'a [F]>,
    pub y_bow: Option<&'a [F]>,
    pub embedding: Option<&'a [F]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechModel<F> {
    pub config: SpeechModelConfig,
    pub trunk: Vec<ConvLayer<F>>,
    pub vis_head: Vec<Dense<F>>,
    pub bow_head: Vec<Dense<F>>,
}

impl<F: Real> SpeechModel<F> {
    /// Fan-in uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(config: &SpeechModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10));
        let mut c_in = config.d_feat;
        let mut trunk = Vec::with_capacity(config.conv.len());
        for (i, c) in config.conv.iter().enumerate() {
            let fan_in = c.kernel * c_in;
            trunk.push(ConvLayer {
                kernels: uniform(&[c.channels, c.kernel, c_in], fan_in, &mut rng),
                bias: Tensor::zeros(&[c.channels]),
                spec: config.spec(i),
            });
            c_in = c.channels;
        }
        let head_dims = |n_out: usize| {
            let mut d = vec![config.embed_dim()];
            d.extend(config.head_widths());
            d.push(n_out);
            d
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11));
        let vis_head = dense_stack(&head_dims(config.n_vis), &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 12));
        let bow_head = dense_stack(&head_dims(config.n_bow), &mut rng);
        Ok(Self {
            config: config.clone(),
            trunk,
            vis_head,
            bow_head,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    /// Converts stored single-precision frames to a `[t_max, d_feat]` tensor.
    pub fn input_tensor(&self, utt: &UtteranceFeatures) -> Result<Tensor<F>> {
        if utt.d_feat != self.config.d_feat || utt.t_max != self.config.t_max {
            return Err(Error::dim(
                "forward",
                "utterance",
                [self.config.t_max, self.config.d_feat],
                [utt.t_max, utt.d_feat],
            ));
        }
        let data = utt.frames.iter().map(|&x| F::of(x as f64)).collect();
        Tensor::matrix(utt.t_max, utt.d_feat, data)
    }

    pub fn forward(&self, utt: &UtteranceFeatures) -> Result<SpeechForward<F>> {
        self.forward_frames(self.input_tensor(utt)?, utt.length)
    }

    /// Forward on a `[t_max, d_feat]` tensor whose first `length` rows are unpadded.
    pub fn forward_frames(&self, input: Tensor<F>, length: usize) -> Result<SpeechForward<F>> {
        if input.shape() != [self.config.t_max, self.config.d_feat] {
            return Err(Error::dim(
                "forward",
                "frames",
                [self.config.t_max, self.config.d_feat],
                input.shape(),
            ));
        }
        let mut inputs = Vec::with_capacity(self.trunk.len());
        let mut x = input;
        for layer in &self.trunk {
            let y = relu(&conv1d(&x, &layer.kernels, &layer.bias, layer.spec)?)?;
            inputs.push(x);
            x = y;
        }
        let pooled_frames = if self.config.mask_padding {
            self.config
                .trunk_frames(length.max(1))
                .unwrap_or(1)
                .clamp(1, x.dim(0))
        } else {
            x.dim(0)
        };
        let (embedding, argmax) = if pooled_frames == x.dim(0) {
            max_pool_over_time(&x)?
        } else {
            let c = x.dim(1);
            let head = Tensor::matrix(pooled_frames, c, x.data()[..pooled_frames * c].to_vec())?;
            max_pool_over_time(&head)?
        };
        let vis = head_forward(&self.vis_head, embedding.clone())?;
        let bow = head_forward(&self.bow_head, embedding.clone())?;
        Ok(SpeechForward {
            y_vis: vis.acts.last().unwrap().data().to_vec(),
            y_bow: bow.acts.last().unwrap().data().to_vec(),
            embedding: embedding.into_data(),
            trunk: TrunkCache {
                inputs,
                output: x,
                argmax,
            },
            vis,
            bow,
        })
    }

    /// Accumulates parameter gradients into `grads` (same shapes as `self`).
    /// Only heads with an incoming gradient are touched. Returns the gradient
    /// w.r.t. the input frames when `want_input_grad` is set.
    pub fn backward(
        &self,
        fwd: &SpeechForward<F>,
        out: &OutputGrads<'_, F>,
        grads: &mut SpeechModel<F>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor<F>>> {
        let d = self.embed_dim();
        let mut g_s = vec![F::zero(); d];
        let mut any = false;
        if let Some(g) = out.embedding {
            check_len("backward", "embedding grad", d, g.len())?;
            for (a, &b) in g_s.iter_mut().zip(g) {
                *a += b;
            }
            any = true;
        }
        if let Some(g) = out.y_vis {
            check_len("backward", "y_vis grad", self.config.n_vis, g.len())?;
            let gi = head_backward(&self.vis_head, &fwd.vis, g, &mut grads.vis_head);
            for (a, b) in g_s.iter_mut().zip(gi) {
                *a += b;
            }
            any = true;
        }
        if let Some(g) = out.y_bow {
            check_len("backward", "y_bow grad", self.config.n_bow, g.len())?;
            let gi = head_backward(&self.bow_head, &fwd.bow, g, &mut grads.bow_head);
            for (a, b) in g_s.iter_mut().zip(gi) {
                *a += b;
            }
            any = true;
        }
        if !any {
            return Ok(None);
        }
        let out_frames = fwd.trunk.output.dim(0);
        let mut g = max_pool_over_time_backward(&fwd.trunk.argmax, out_frames, &g_s).into_data();
        let mut output = &fwd.trunk.output;
        for i in (0..self.trunk.len()).rev() {
            relu_backward(output.data(), &mut g);
            let layer = &self.trunk[i];
            let gl = &mut grads.trunk[i];
            let need = i > 0 || want_input_grad;
            let gi = conv1d_backward(
                &fwd.trunk.inputs[i],
                &layer.kernels,
                layer.spec,
                &g,
                gl.kernels.data_mut(),
                gl.bias.data_mut(),
                need,
            )?;
            match gi {
                Some(t) if i > 0 => {
                    g = t.into_data();
                    output = &fwd.trunk.inputs[i];
                }
                other => return Ok(other),
            }
        }
        Ok(None)
    }

    /// A zero-valued copy for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn cast<G: Real>(&self) -> SpeechModel<G> {
        SpeechModel {
            config: self.config.clone(),
            trunk: self
                .trunk
                .iter()
                .map(|l| ConvLayer {
                    kernels: l.kernels.cast(),
                    bias: l.bias.cast(),
                    spec: l.spec,
                })
                .collect(),
            vis_head: cast_dense(&self.vis_head),
            bow_head: cast_dense(&self.bow_head),
        }
    }
}

fn cast_dense<F: Real, G: Real>(layers: &[Dense<F>]) -> Vec<Dense<G>> {
    layers
        .iter()
        .map(|l| Dense {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        })
        .collect()
}

fn check_len(op: &'static str, operand: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dim(op, operand, expected, got))
    }
}

impl<F: Real> Parameters<F> for SpeechModel<F> {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &str, &Tensor<F>)) {
        for (i, l) in self.trunk.iter().enumerate() {
            f(ParamGroup::Trunk, &format!("trunk.{i}.kernels"), &l.kernels);
            f(ParamGroup::Trunk, &format!("trunk.{i}.bias"), &l.bias);
        }
        visit_dense(&self.vis_head, ParamGroup::VisHead, f);
        visit_dense(&self.bow_head, ParamGroup::BowHead, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Tensor<F>)) {
        for (i, l) in self.trunk.iter_mut().enumerate() {
            f(ParamGroup::Trunk, &format!("trunk.{i}.kernels"), &mut l.kernels);
            f(ParamGroup::Trunk, &format!("trunk.{i}.bias"), &mut l.bias);
        }
        visit_dense_mut(&mut self.vis_head, ParamGroup::VisHead, f);
        visit_dense_mut(&mut self.bow_head, ParamGroup::BowHead, f);
    }
}

/// Two ReLU layers mapping a tagger feature to a vector `v` in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionProjection<F> {
    pub layers: Vec<Dense<F>>,
}

#[derive(Debug, Clone)]
pub struct ProjectionForward<F> {
    pub v: Vec<F>,
    acts: Vec<Tensor<F>>,
}

impl<F: Real> ProjectionForward<F> {
    pub fn activation_pattern(&self) -> Vec<usize> {
        positive_mask(self.acts.iter().skip(1))
    }
}

impl<F: Real> VisionProjection<F> {
    pub fn init(config: &SpeechModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 13));
        let dims = [config.d_vis_hidden, config.projection_width(), config.embed_dim()];
        Ok(Self {
            layers: dense_stack(&dims, &mut rng),
        })
    }

    pub fn forward(&self, feature: &[F]) -> Result<ProjectionForward<F>> {
        let mut acts = vec![Tensor::vector(feature.to_vec())];
        for l in &self.layers {
            let a = relu(&linear(acts.last().unwrap(), &l.weight, &l.bias)?)?;
            acts.push(a);
        }
        Ok(ProjectionForward {
            v: acts.last().unwrap().data().to_vec(),
            acts,
        })
    }

    /// Accumulates parameter gradients for `grad` w.r.t. `v`. The input is a
    /// frozen tagger feature, so no input gradient is formed.
    pub fn backward(&self, fwd: &ProjectionForward<F>, grad: &[F], grads: &mut VisionProjection<F>) -> Result<()> {
        let n = self.layers.len();
        check_len("projection_backward", "grad", fwd.v.len(), grad.len())?;
        let mut g = grad.to_vec();
        for i in (0..n).rev() {
            relu_backward(fwd.acts[i + 1].data(), &mut g);
            let gl = &mut grads.layers[i];
            let gi = linear_backward(&fwd.acts[i], &self.layers[i].weight, &g, gl.weight.data_mut(), gl.bias.data_mut());
            if i > 0 {
                g = gi.into_data();
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn cast<G: Real>(&self) -> VisionProjection<G> {
        VisionProjection {
            layers: cast_dense(&self.layers),
        }
    }
}

impl<F: Real> Parameters<F> for VisionProjection<F> {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &str, &Tensor<F>)) {
        visit_dense(&self.layers, ParamGroup::Projection, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Tensor<F>)) {
        visit_dense_mut(&mut self.layers, ParamGroup::Projection, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SpeechModelConfig {
        SpeechModelConfig {
            d_feat: 3,
            t_max: 12,
            conv: vec![
                ConvLayerConfig { channels: 4, kernel: 3, stride: 1 },
                ConvLayerConfig { channels: 5, kernel: 3, stride: 2 },
            ],
            head_hidden: Some(vec![6]),
            n_vis: 4,
            n_bow: 3,
            d_vis_hidden: 7,
            ..SpeechModelConfig::default()
        }
    }

    fn utterance(seed: u64, cfg: &SpeechModelConfig, length: usize) -> UtteranceFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..length * cfg.d_feat).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        UtteranceFeatures::from_frames(frames, cfg.d_feat, cfg.t_max, 0.01).0
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = small_config();
        let a = SpeechModel::<f64>::init(&cfg, 3).unwrap();
        assert_eq!(a, SpeechModel::<f64>::init(&cfg, 3).unwrap());
        assert_ne!(a.checksum(), SpeechModel::<f64>::init(&cfg, 4).unwrap().checksum());
        for seed in 0..100 {
            let m = SpeechModel::<f64>::init(&cfg, seed).unwrap();
            let mut c_in = cfg.d_feat;
            for (l, c) in m.trunk.iter().zip(&cfg.conv) {
                let b = init_bound(c.kernel * c_in);
                assert!(l.kernels.data().iter().all(|w| w.abs() <= b));
                assert!(l.bias.data().iter().all(|&x| x == 0.0));
                c_in = c.channels;
            }
            for l in m.vis_head.iter().chain(&m.bow_head) {
                let b = init_bound(l.in_dim());
                assert!(l.weight.data().iter().all(|w| w.abs() <= b));
            }
        }
    }

    #[test]
    fn outputs_are_open_unit_interval_and_pure() {
        let cfg = small_config();
        let m = SpeechModel::<f64>::init(&cfg, 1).unwrap();
        let u = utterance(2, &cfg, 9);
        let a = m.forward(&u).unwrap();
        let b = m.forward(&u).unwrap();
        assert_eq!(a.y_vis, b.y_vis);
        assert_eq!(a.y_bow, b.y_bow);
        assert_eq!(a.y_vis.len(), 4);
        assert_eq!(a.y_bow.len(), 3);
        assert_eq!(a.embedding.len(), 5);
        assert!(a.y_vis.iter().chain(&a.y_bow).all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn equal_padded_content_gives_equal_outputs() {
        let cfg = small_config();
        let m = SpeechModel::<f64>::init(&cfg, 1).unwrap();
        let u = utterance(5, &cfg, 6);
        let mut v = u.clone();
        v.length = 6;
        let (a, b) = (m.forward(&u).unwrap(), m.forward(&v).unwrap());
        assert_eq!(a.y_vis, b.y_vis);
        assert_eq!(a.embedding, b.embedding);
    }

    #[test]
    fn wrong_shape_is_a_dimension_error() {
        let cfg = small_config();
        let m = SpeechModel::<f64>::init(&cfg, 1).unwrap();
        let mut u = utterance(5, &cfg, 6);
        u.d_feat = 4;
        assert!(matches!(m.forward(&u), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hand_built_single_conv_toy() {
        // one conv layer (K=2, valid, 1 input channel, 2 output channels),
        // heads of one hidden unit each
        let cfg = SpeechModelConfig {
            d_feat: 1,
            t_max: 3,
            conv: vec![ConvLayerConfig { channels: 2, kernel: 2, stride: 1 }],
            padding: Padding::Valid,
            head_hidden: Some(vec![1]),
            n_vis: 1,
            n_bow: 1,
            d_vis_hidden: 1,
            ..SpeechModelConfig::default()
        };
        let mut m = SpeechModel::<f64>::init(&cfg, 0).unwrap();
        m.trunk[0].kernels = Tensor::new(vec![2, 2, 1], vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        m.trunk[0].bias = Tensor::vector(vec![0.0, -0.25]);
        m.vis_head[0].weight = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        m.vis_head[0].bias = Tensor::vector(vec![0.1]);
        m.vis_head[1].weight = Tensor::matrix(1, 1, vec![-3.0]).unwrap();
        m.vis_head[1].bias = Tensor::vector(vec![1.0]);
        m.bow_head[0].weight = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        m.bow_head[0].bias = Tensor::vector(vec![0.0]);
        m.bow_head[1].weight = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        m.bow_head[1].bias = Tensor::vector(vec![0.0]);

        let x = Tensor::matrix(3, 1, vec![1.0, 3.0, 2.0]).unwrap();
        let f = m.forward_frames(x, 3).unwrap();
        // channel 0: 1-3=-2, 3-2=1 -> relu 0, 1 -> max 1
        // channel 1: 0.5*(1+3)-0.25=1.75, 0.5*(3+2)-0.25=2.25 -> max 2.25
        assert_eq!(f.embedding, vec![1.0, 2.25]);
        let h_vis: f64 = 1.0 + 2.0 * 2.25 + 0.1;
        let y_vis = 1.0 / (1.0 + (-(-3.0 * h_vis + 1.0)).exp());
        let y_bow = 1.0 / (1.0 + (-(2.0 * 2.25f64)).exp());
        assert!((f.y_vis[0] - y_vis).abs() < 1e-10);
        assert!((f.y_bow[0] - y_bow).abs() < 1e-10);
    }

    #[test]
    fn projection_zero_and_toy() {
        let cfg = SpeechModelConfig {
            conv: vec![ConvLayerConfig { channels: 2, kernel: 1, stride: 1 }],
            d_vis_hidden: 3,
            projection_hidden: Some(2),
            ..SpeechModelConfig::default()
        };
        let mut p = VisionProjection::<f64>::init(&cfg, 1).unwrap();
        for l in &p.layers {
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
        assert_eq!(p.forward(&[0.0; 3]).unwrap().v, vec![0.0, 0.0]);
        assert_eq!(p.forward(&[0.3, -1.0, 2.0]).unwrap().v.len(), cfg.embed_dim());

        p.layers[0].weight = Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        p.layers[0].bias = Tensor::vector(vec![0.0, 1.0]);
        p.layers[1].weight = Tensor::matrix(2, 2, vec![1.0, 1.0, -1.0, 2.0]).unwrap();
        p.layers[1].bias = Tensor::vector(vec![-0.5, 0.0]);
        // h = relu([1 - 3, 0.5*(1+2+3)+1]) = [0, 4]; v = relu([4 - 0.5, 8]) = [3.5, 8]
        assert_eq!(p.forward(&[1.0, 2.0, 3.0]).unwrap().v, vec![3.5, 8.0]);
    }

    #[test]
    fn masked_pooling_ignores_padding_frames() {
        let mut cfg = small_config();
        cfg.mask_padding = true;
        let m = SpeechModel::<f64>::init(&cfg, 7).unwrap();
        let mut u = utterance(3, &cfg, 4);
        let masked = m.forward(&u).unwrap();
        // nonzero padding cannot reach the pooled frames beyond the receptive field edge
        let valid = cfg.trunk_frames(4).unwrap();
        assert!(valid < cfg.trunk_frames(cfg.t_max).unwrap());
        u.frames[11 * cfg.d_feat] = 50.0;
        assert_eq!(m.forward(&u).unwrap().embedding, masked.embedding);
    }

    #[test]
    fn visitor_round_trips_flat_parameters() {
        let cfg = small_config();
        let m = SpeechModel::<f64>::init(&cfg, 2).unwrap();
        let flat = m.to_flat();
        assert_eq!(flat.len(), m.num_params());
        let mut z = m.zeros_like();
        assert!(z.to_flat().iter().all(|&x| x == 0.0));
        z.load_flat(&flat);
        assert_eq!(z, m);
        let f32m: SpeechModel<f32> = m.cast();
        assert_eq!(f32m.num_params(), m.num_params());
    }
}
