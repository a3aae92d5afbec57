use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derive_seed, CorpusItem, Ontology, Split, UtteranceFeatures};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItemConfig {
    /// Inclusive range of concepts per scene.
    pub scene_size: [usize; 2],
    /// Inclusive range of content words per caption.
    pub caption_len: [usize; 2],
    pub t_max: usize,
    pub image_noise: f64,
    pub frame_noise: f64,
    /// Each rendered word is resampled to `L * u`, `u` uniform in `[1 - w, 1 + w]`.
    pub time_warp: f64,
    /// Probability of a function word before each content word.
    pub function_word_rate: f64,
    /// Sampling weight added to every content word regardless of the scene.
    pub distractor_floor: f64,
    pub frame_period: f32,
}

impl Default for ItemConfig {
    fn default() -> Self {
        Self {
            scene_size: [1, 2],
            caption_len: [1, 3],
            t_max: 200,
            image_noise: 0.05,
            frame_noise: 0.15,
            time_warp: 0.2,
            function_word_rate: 0.5,
            distractor_floor: 0.005,
            frame_period: 0.01,
        }
    }
}

impl ItemConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("item: {m}")));
        if self.scene_size[0] == 0 || self.scene_size[0] > self.scene_size[1] {
            return bad("scene_size must be [min ≥ 1, max ≥ min]");
        }
        if self.caption_len[0] == 0 || self.caption_len[0] > self.caption_len[1] {
            return bad("caption_len must be [min ≥ 1, max ≥ min]");
        }
        if self.t_max == 0 {
            return bad("t_max must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.time_warp) {
            return bad("time_warp must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.function_word_rate) {
            return bad("function_word_rate must be in [0, 1]");
        }
        if self.image_noise < 0.0 || self.frame_noise < 0.0 || self.distractor_floor < 0.0 {
            return bad("noise levels and floor must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Scene {
    pub concepts: Vec<usize>,
    pub image: Vec<f32>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub(crate) fn sample_scene(ontology: &Ontology, seed: u64, cfg: &ItemConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_concepts = ontology.num_concepts();
    let size = rng
        .random_range(cfg.scene_size[0]..=cfg.scene_size[1])
        .min(n_concepts);
    let mut concepts = sample(&mut rng, n_concepts, size).into_vec();
    concepts.sort_unstable();
    let d = ontology.concept_centers[0].len();
    let image = (0..d)
        .map(|k| {
            let mean = concepts
                .iter()
                .map(|&c| ontology.concept_centers[c][k])
                .sum::<f64>()
                / concepts.len() as f64;
            (mean + cfg.image_noise * gauss(&mut rng)) as f32
        })
        .collect();
    Scene { concepts, image }
}

/// Content words drawn without replacement with weight
/// `frequency * max_scene affinity + floor`; planted synonyms never co-occur.
fn sample_caption(ontology: &Ontology, scene: &Scene, rng: &mut ChaCha8Rng, cfg: &ItemConfig) -> Vec<usize> {
    let content: Vec<usize> = ontology.content_words().collect();
    let mut weights: Vec<f64> = content
        .iter()
        .map(|&w| {
            let affinity = scene
                .concepts
                .iter()
                .map(|&c| ontology.affinity(w, c))
                .fold(0.0, f64::max);
            ontology.frequency[w] * affinity + cfg.distractor_floor
        })
        .collect();
    let n = rng
        .random_range(cfg.caption_len[0]..=cfg.caption_len[1])
        .min(content.len());
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (i, &wt) in weights.iter().enumerate() {
            if wt > 0.0 && u < wt {
                pick = i;
                break;
            }
            u -= wt;
        }
        while weights[pick] <= 0.0 {
            pick -= 1;
        }
        let word = content[pick];
        words.push(word);
        weights[pick] = 0.0;
        if let Some(partner) = ontology.exclusive_partner(word) {
            if let Some(pos) = content.iter().position(|&c| c == partner) {
                weights[pos] = 0.0;
            }
        }
    }

    let function: Vec<usize> = ontology.function_words().collect();
    let mut caption = Vec::with_capacity(2 * words.len());
    for w in words {
        if !function.is_empty() && rng.random::<f64>() < cfg.function_word_rate {
            caption.push(function[rng.random_range(0..function.len())]);
        }
        caption.push(w);
    }
    caption
}

/// Renders one word: time-warps the prototype by linear interpolation and adds frame noise.
fn render_word(ontology: &Ontology, word: usize, rng: &mut ChaCha8Rng, cfg: &ItemConfig, out: &mut Vec<f32>) {
    let d = ontology.d_feat;
    let proto = &ontology.prototypes[word];
    let len = proto.len() / d;
    let factor = 1.0 + cfg.time_warp * (2.0 * rng.random::<f64>() - 1.0);
    let warped = ((len as f64 * factor).round() as usize).max(1);
    for j in 0..warped {
        let src = if warped == 1 || len == 1 {
            0.0
        } else {
            (j * (len - 1)) as f64 / (warped - 1) as f64
        };
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        let frac = src - lo as f64;
        for k in 0..d {
            let a = proto[lo * d + k];
            let b = proto[hi * d + k];
            let x = a + (b - a) * frac + cfg.frame_noise * gauss(rng);
            out.push(x as f32);
        }
    }
}

pub(crate) fn render_item(ontology: &Ontology, scene: &Scene, seed: u64, cfg: &ItemConfig) -> Result<CorpusItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let caption = sample_caption(ontology, scene, &mut rng, cfg);
    let mut frames = Vec::new();
    for &w in &caption {
        render_word(ontology, w, &mut rng, cfg, &mut frames);
    }
    let (utterance, truncated) =
        UtteranceFeatures::from_frames(frames, ontology.d_feat, cfg.t_max, cfg.frame_period);
    Ok(CorpusItem {
        id: 0,
        image_id: 0,
        image: scene.image.clone(),
        utterance,
        transcript: Some(caption),
        split: Split::ImageSpeech,
        truncated,
    })
}

/// One image with one spoken caption. Deterministic in `seed`.
pub fn synthesize_item(ontology: &Ontology, seed: u64, cfg: &ItemConfig) -> Result<CorpusItem> {
    cfg.validate()?;
    let scene = sample_scene(ontology, derive_seed(seed, 0), cfg);
    render_item(ontology, &scene, derive_seed(seed, 1), cfg)
}

#[cfg(test)]
pub(crate) fn render_caption(ontology: &Ontology, caption: &[usize], seed: u64, cfg: &ItemConfig) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::new();
    for &w in caption {
        render_word(ontology, w, &mut rng, cfg, &mut frames);
    }
    frames
}
