//! Feedforward image tagger standing in for the vision model. Its softmax
//! posteriors are the soft visual targets and its last hidden layer is the
//! image-side input to the representation loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt::{Reader, Writer};
use crate::corpus::{derive_seed, CorpusItem};
use crate::error::{Error, Result};
use crate::model::{visit_dense, visit_dense_mut, Dense, ParamGroup, Parameters};
use crate::numerics::{linear, linear_backward, relu, relu_backward, softmax, Tensor};
use crate::optim::{Adam, AdamConfig};

pub const TAGGER_MAGIC: &[u8; 8] = b"VGKWTAGR";
pub const TAGGER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggerConfig {
    pub hidden: Vec<usize>,
    /// Tag vocabulary size: the most frequent content words of the tagger split.
    pub n_vis: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64; 4],
            n_vis: 40,
            steps: 3000,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 7,
        }
    }
}

impl TaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vis == 0 {
            return Err(Error::Config("tagger: n_vis must be ≥ 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("tagger: hidden widths must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("tagger: batch_size must be ≥ 1".into()));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualTargets {
    /// Softmax posteriors over the tag vocabulary.
    pub y_vis: Vec<f64>,
    /// Last hidden layer activation.
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub config: TaggerConfig,
    /// Word ids, one per output unit.
    pub tags: Vec<usize>,
    pub layers: Vec<Dense<f64>>,
}

impl Parameters<f64> for Tagger {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &str, &Tensor<f64>)) {
        visit_dense(&self.layers, ParamGroup::Tagger, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Tensor<f64>)) {
        visit_dense_mut(&mut self.layers, ParamGroup::Tagger, f);
    }
}

struct TaggerForward {
    acts: Vec<Tensor<f64>>,
    probs: Vec<f64>,
}

impl Tagger {
    pub fn init(config: &TaggerConfig, d_img: usize, tags: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if tags.is_empty() {
            return Err(Error::Config("tagger: empty tag vocabulary".into()));
        }
        if d_img == 0 {
            return Err(Error::Config("tagger: image dimension must be ≥ 1".into()));
        }
        let mut dims = vec![d_img];
        dims.extend(&config.hidden);
        dims.push(tags.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 20));
        let layers = dims.windows(2).map(|w| Dense::init(w[0], w[1], &mut rng)).collect();
        Ok(Self {
            config: TaggerConfig {
                n_vis: tags.len(),
                ..config.clone()
            },
            tags,
            layers,
        })
    }

    pub fn d_img(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Width of the feature returned in [`VisualTargets::hidden`].
    pub fn hidden_dim(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[self.layers.len() - 2].out_dim()
        } else {
            self.d_img()
        }
    }

    pub fn n_vis(&self) -> usize {
        self.tags.len()
    }

    fn run(&self, image: &[f64]) -> Result<TaggerForward> {
        if image.len() != self.d_img() {
            return Err(Error::dim("tag", "image", self.d_img(), image.len()));
        }
        let mut acts = vec![Tensor::vector(image.to_vec())];
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let z = linear(acts.last().unwrap(), &l.weight, &l.bias)?;
            acts.push(if i + 1 == n { z } else { relu(&z)? });
        }
        let probs = softmax(acts.last().unwrap())?.into_data();
        Ok(TaggerForward { acts, probs })
    }

    /// ReLU on/off pattern of the hidden layers for `image`.
    pub(crate) fn activation_pattern(&self, image: &[f64]) -> Result<Vec<bool>> {
        let f = self.run(image)?;
        let n = f.acts.len();
        Ok(f.acts[1..n - 1].iter().flat_map(|t| t.data().iter().map(|&x| x > 0.0)).collect())
    }

    pub fn tag(&self, image: &[f32]) -> Result<VisualTargets> {
        let x: Vec<f64> = image.iter().map(|&v| v as f64).collect();
        let f = self.run(&x)?;
        let n = self.layers.len();
        Ok(VisualTargets {
            y_vis: f.probs,
            hidden: f.acts[n - 1].data().to_vec(),
        })
    }

    /// Caption bag over the tag vocabulary, normalized to sum to one; `None`
    /// when the caption contains no tag word.
    pub fn target_bag(&self, transcript: &[usize]) -> Option<Vec<f64>> {
        let mut bag: Vec<f64> = self
            .tags
            .iter()
            .map(|t| if transcript.contains(t) { 1.0 } else { 0.0 })
            .collect();
        let total: f64 = bag.iter().sum();
        if total == 0.0 {
            return None;
        }
        bag.iter_mut().for_each(|x| *x /= total);
        Some(bag)
    }

    /// Mean cross entropy and its parameter gradient over `(image, target)` pairs.
    pub(crate) fn loss_and_grad(&self, batch: &[(&[f64], &[f64])]) -> Result<(f64, Tagger)> {
        let mut grads = self.clone();
        grads.zero();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let n = self.layers.len();
        for &(x, t) in batch {
            let f = self.run(x)?;
            loss -= t
                .iter()
                .zip(&f.probs)
                .filter(|(&ti, _)| ti > 0.0)
                .map(|(&ti, &p)| ti * p.max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
                * scale;
            // softmax + cross entropy: dL/dz = p - t
            let mut g: Vec<f64> = f.probs.iter().zip(t).map(|(&p, &ti)| (p - ti) * scale).collect();
            for i in (0..n).rev() {
                let gl = &mut grads.layers[i];
                let gi = linear_backward(&f.acts[i], &self.layers[i].weight, &g, gl.weight.data_mut(), gl.bias.data_mut());
                g = gi.into_data();
                if i > 0 {
                    relu_backward(f.acts[i].data(), &mut g);
                }
            }
        }
        Ok((loss, grads))
    }
}

/// Per-step training losses, returned for monitoring.
pub type TaggerTrace = Vec<f64>;

/// Trains a tagger on image/caption pairs with Adam on softmax cross entropy
/// against normalized caption bags. Items whose caption holds no tag word are
/// skipped. Deterministic in `config.seed`.
pub fn train_tagger(items: &[&CorpusItem], tags: Vec<usize>, config: &TaggerConfig) -> Result<(Tagger, TaggerTrace)> {
    if items.is_empty() {
        return Err(Error::Config("tagger: training set is empty".into()));
    }
    let d_img = items[0].image.len();
    let mut tagger = Tagger::init(config, d_img, tags)?;
    let data: Vec<(Vec<f64>, Vec<f64>)> = items
        .iter()
        .filter_map(|item| {
            let bag = tagger.target_bag(item.transcript.as_deref().unwrap_or(&[]))?;
            Some((item.image.iter().map(|&v| v as f64).collect(), bag))
        })
        .collect();
    if data.is_empty() {
        return Err(Error::Config("tagger: no training caption contains a tag word".into()));
    }
    if let Some((x, _)) = data.iter().find(|(x, _)| x.len() != d_img) {
        return Err(Error::dim("train_tagger", "image", d_img, x.len()));
    }
    let mut adam = Adam::new(config.adam, &tagger);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 21));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let bs = config.batch_size.min(data.len());
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(bs);
        if bs == data.len() {
            batch.extend(data.iter().map(|(x, t)| (x.as_slice(), t.as_slice())));
        } else {
            while batch.len() < bs {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let (x, t) = &data[order[cursor]];
                batch.push((x.as_slice(), t.as_slice()));
                cursor += 1;
            }
        }
        let (loss, grads) = tagger.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("tagger training loss".into()));
        }
        trace.push(loss);
        adam.step(&mut tagger, &grads, &|_| true)?;
    }
    Ok((tagger, trace))
}

fn encode(tagger: &Tagger) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.str(&serde_json::to_string(&tagger.config)?);
    w.u64(tagger.tags.len() as u64);
    for &t in &tagger.tags {
        w.u64(t as u64);
    }
    w.u64(tagger.layers.len() as u64);
    for l in &tagger.layers {
        w.u64(l.out_dim() as u64);
        w.u64(l.in_dim() as u64);
        w.f64s(l.weight.data());
        w.f64s(l.bias.data());
    }
    Ok(w.seal(TAGGER_MAGIC, TAGGER_VERSION))
}

pub fn decode_tagger(bytes: &[u8]) -> Result<Tagger> {
    let mut r = Reader::open(bytes, TAGGER_MAGIC, TAGGER_VERSION, "tagger checkpoint")?;
    let config: TaggerConfig = serde_json::from_str(&r.str()?)?;
    let n_tags = r.u64()? as usize;
    let tags = (0..n_tags).map(|_| r.u64().map(|t| t as usize)).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u64()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (out, inp) = (r.u64()? as usize, r.u64()? as usize);
        let weight = Tensor::matrix(out, inp, r.f64s(out * inp)?)?;
        let bias = Tensor::vector(r.f64s(out)?);
        layers.push(Dense { weight, bias });
    }
    if !r.at_end() {
        return Err(Error::Format("tagger checkpoint: trailing bytes".into()));
    }
    if layers.is_empty() || layers.last().unwrap().out_dim() != tags.len() {
        return Err(Error::Format("tagger checkpoint: output layer does not match tags".into()));
    }
    Ok(Tagger { config, tags, layers })
}

pub fn save_tagger(tagger: &Tagger, path: &Path) -> Result<()> {
    std::fs::write(path, encode(tagger)?).map_err(|e| Error::io(path, e))
}

pub fn load_tagger(path: &Path) -> Result<Tagger> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tagger(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, UtteranceFeatures};

    fn item(image: Vec<f32>, transcript: Vec<usize>) -> CorpusItem {
        CorpusItem {
            id: 0,
            image_id: 0,
            image,
            utterance: UtteranceFeatures::from_frames(vec![], 1, 1, 0.01).0,
            transcript: Some(transcript),
            split: Split::TaggerTrain,
            truncated: false,
        }
    }

    #[test]
    fn zero_weights_give_uniform_posteriors() {
        let mut t = Tagger::init(&TaggerConfig::default(), 5, vec![1, 2, 3, 4]).unwrap();
        t.zero();
        let out = t.tag(&[0.3, -1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(out.y_vis.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert_eq!(out.hidden.len(), 64);
    }

    #[test]
    fn posteriors_normalized_and_pure() {
        let t = Tagger::init(&TaggerConfig::default(), 3, (0..7).collect()).unwrap();
        let before = t.clone();
        let a = t.tag(&[0.1, 0.5, -0.4]).unwrap();
        let b = t.tag(&[0.1, 0.5, -0.4]).unwrap();
        assert_eq!(a, b);
        assert!((a.y_vis.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(t, before);
        assert!(matches!(t.tag(&[0.0; 2]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hand_computed_toy() {
        // 2 inputs -> 2 hidden (ReLU) -> 3 tags
        let cfg = TaggerConfig {
            hidden: vec![2],
            ..TaggerConfig::default()
        };
        let mut t = Tagger::init(&cfg, 2, vec![0, 1, 2]).unwrap();
        t.layers[0].weight = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        t.layers[0].bias = Tensor::vector(vec![0.0, -1.0]);
        t.layers[1].weight = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 1.0]).unwrap();
        t.layers[1].bias = Tensor::vector(vec![0.0, 0.0, 0.5]);
        let out = t.tag(&[1.0, 2.0]).unwrap();
        // h = relu([-1, 0.5 + 4 - 1]) = [0, 3.5]; z = [0, 3.5, 4.0]
        let z = [0.0f64, 3.5, 4.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for (p, zi) in out.y_vis.iter().zip(z) {
            assert!((p - zi.exp() / denom).abs() < 1e-10);
        }
        assert_eq!(out.hidden, vec![0.0, 3.5]);
    }

    #[test]
    fn memorizes_a_single_item() {
        let cfg = TaggerConfig {
            hidden: vec![8],
            steps: 300,
            adam: AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            ..TaggerConfig::default()
        };
        let it = item(vec![0.5, -0.2, 1.0], vec![3]);
        let (t, _) = train_tagger(&[&it], vec![3, 4, 5], &cfg).unwrap();
        let out = t.tag(&it.image).unwrap();
        assert!(out.y_vis[0] > 0.99, "{:?}", out.y_vis);
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let items: Vec<CorpusItem> = (0..6)
            .map(|i| {
                let c = i % 3;
                let mut x = vec![0.0f32; 3];
                x[c] = 1.0 + 0.1 * i as f32;
                item(x, vec![c])
            })
            .collect();
        let refs: Vec<&CorpusItem> = items.iter().collect();
        let cfg = TaggerConfig {
            hidden: vec![8, 8],
            steps: 10,
            batch_size: 6,
            adam: AdamConfig {
                learning_rate: 0.01,
                ..AdamConfig::default()
            },
            ..TaggerConfig::default()
        };
        let (_, trace) = train_tagger(&refs, vec![0, 1, 2], &cfg).unwrap();
        assert!(trace.windows(2).all(|w| w[1] < w[0]), "{trace:?}");
    }

    #[test]
    fn empty_tags_and_round_trip() {
        assert!(matches!(
            Tagger::init(&TaggerConfig::default(), 3, vec![]),
            Err(Error::Config(_))
        ));
        let t = Tagger::init(&TaggerConfig::default(), 3, vec![4, 9]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tagger.bin");
        save_tagger(&t, &path).unwrap();
        assert_eq!(load_tagger(&path).unwrap(), t);
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        assert!(matches!(decode_tagger(&bytes), Err(Error::Checksum(_))));
    }
}
