use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OntologyConfig {
    pub seed: u64,
    /// Total vocabulary size, function words included.
    pub num_words: usize,
    pub num_concepts: usize,
    pub num_function_words: usize,
    pub d_concept: usize,
    pub d_feat: usize,
    /// Inclusive range of prototype lengths in frames.
    pub prototype_len: [usize; 2],
    /// Relatedness kernel width: `R = exp(-gamma |c1 - c2|^2)`.
    pub gamma: f64,
    /// Standard deviation of concept centers.
    pub concept_spread: f64,
    /// Standard deviation of a word's embedding around its concept center.
    pub word_jitter: f64,
    /// Within-concept usage frequency falls off as `1 / (rank + 1)^zipf`.
    pub zipf: f64,
    /// Number of concepts whose two most frequent words are made exact synonyms
    /// (identical embeddings) that never co-occur in a caption.
    pub planted_synonyms: usize,
    pub prototype_step: f64,
    pub prototype_noise: f64,
}

impl Default for OntologyConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_words: 60,
            num_concepts: 12,
            num_function_words: 8,
            d_concept: 16,
            d_feat: 13,
            prototype_len: [6, 12],
            gamma: 1.0,
            concept_spread: 0.45,
            word_jitter: 0.1,
            zipf: 1.2,
            planted_synonyms: 1,
            prototype_step: 0.35,
            prototype_noise: 0.1,
        }
    }
}

impl OntologyConfig {
    pub fn num_content_words(&self) -> usize {
        self.num_words.saturating_sub(self.num_function_words)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ontology: {m}")));
        if self.num_concepts == 0 {
            return bad("num_concepts must be ≥ 1");
        }
        if self.num_words < self.num_concepts || self.num_content_words() < self.num_concepts {
            return bad("need at least one content word per concept (num_words - num_function_words ≥ num_concepts)");
        }
        if self.d_concept == 0 || self.d_feat == 0 {
            return bad("d_concept and d_feat must be ≥ 1");
        }
        if self.prototype_len[0] == 0 || self.prototype_len[0] > self.prototype_len[1] {
            return bad("prototype_len must be [min ≥ 1, max ≥ min]");
        }
        if !(self.gamma > 0.0) || self.concept_spread < 0.0 || self.word_jitter < 0.0 {
            return bad("gamma must be positive; spreads non-negative");
        }
        if self.planted_synonyms > 0 {
            let with_two = self.num_content_words().saturating_sub(self.num_concepts).min(self.num_concepts);
            if self.planted_synonyms > with_two {
                return bad("planted_synonyms exceeds the number of concepts with two or more words");
            }
        }
        Ok(())
    }
}

/// Synthetic semantics: words grouped into concepts, pairwise relatedness and
/// an acoustic prototype per word.
///
/// Content word `i` belongs to concept `i % num_concepts` with within-concept
/// rank `i / num_concepts`, so ids `0..num_concepts` are each concept's most
/// frequent word. Function words take the trailing ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    pub vocab: Vocabulary,
    pub gamma: f64,
    pub concept_of: Vec<Option<usize>>,
    pub concept_centers: Vec<Vec<f64>>,
    /// Per-word concept embedding, `W × d_concept`.
    pub embeddings: Vec<Vec<f64>>,
    /// Row-major `W × W`.
    pub relatedness: Vec<f64>,
    /// Per-word `L × d_feat` frame pattern, row-major.
    pub prototypes: Vec<Vec<f64>>,
    pub d_feat: usize,
    /// Relative usage frequency within the word's concept.
    pub frequency: Vec<f64>,
    /// `(frequent word, planted synonym)` pairs.
    pub synonyms: Vec<(usize, usize)>,
}

impl Ontology {
    pub fn num_words(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_centers.len()
    }

    pub fn relatedness(&self, a: usize, b: usize) -> f64 {
        self.relatedness[a * self.num_words() + b]
    }

    pub fn prototype_len(&self, word: usize) -> usize {
        self.prototypes[word].len() / self.d_feat
    }

    pub fn content_words(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_words()).filter(|&w| !self.vocab.is_stopword(w))
    }

    pub fn function_words(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_words()).filter(|&w| self.vocab.is_stopword(w))
    }

    /// `exp(-gamma |e_word - center|^2)`.
    pub fn affinity(&self, word: usize, concept: usize) -> f64 {
        (-self.gamma * sq_dist(&self.embeddings[word], &self.concept_centers[concept])).exp()
    }

    /// The word a planted synonym may not appear alongside, if any.
    pub fn exclusive_partner(&self, word: usize) -> Option<usize> {
        self.synonyms.iter().find_map(|&(a, b)| {
            if a == word {
                Some(b)
            } else if b == word {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Recomputes the relatedness matrix from the embeddings.
    pub fn rebuild_relatedness(&mut self) {
        self.relatedness = relatedness_matrix(&self.embeddings, self.gamma);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn relatedness_matrix(embeddings: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let w = embeddings.len();
    let mut r = vec![0.0; w * w];
    for i in 0..w {
        r[i * w + i] = 1.0;
        for j in i + 1..w {
            let v = (-gamma * sq_dist(&embeddings[i], &embeddings[j])).exp();
            r[i * w + j] = v;
            r[j * w + i] = v;
        }
    }
    r
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            let o = ONSETS[rng.random_range(0..ONSETS.len())];
            let v = VOWELS[rng.random_range(0..VOWELS.len())];
            format!("{o}{v}")
        })
        .collect()
}

pub fn generate_ontology(config: &OntologyConfig) -> Result<Ontology> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_content = config.num_content_words();
    let w = config.num_words;
    let c = config.num_concepts;

    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(w);
    for i in 0..w {
        let syllables = if i < n_content { 2 + (i % 2) } else { 1 };
        let word = loop {
            let candidate = pseudo_word(&mut rng, syllables);
            if seen.insert(candidate.clone()) {
                break candidate;
            }
        };
        words.push(word);
    }
    let stopword: Vec<bool> = (0..w).map(|i| i >= n_content).collect();
    let vocab = Vocabulary::new(words, stopword)?;

    let concept_centers: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..config.d_concept).map(|_| config.concept_spread * gauss(&mut rng)).collect())
        .collect();

    let mut concept_of = Vec::with_capacity(w);
    let mut embeddings = Vec::with_capacity(w);
    let mut frequency = Vec::with_capacity(w);
    for i in 0..w {
        if i < n_content {
            let concept = i % c;
            let rank = i / c;
            concept_of.push(Some(concept));
            embeddings.push(
                concept_centers[concept]
                    .iter()
                    .map(|&m| m + config.word_jitter * gauss(&mut rng))
                    .collect::<Vec<f64>>(),
            );
            frequency.push(1.0 / ((rank + 1) as f64).powf(config.zipf));
        } else {
            // Function words sit far from every concept.
            concept_of.push(None);
            embeddings.push(
                (0..config.d_concept)
                    .map(|_| 4.0 * config.concept_spread.max(0.25) * gauss(&mut rng) + 6.0)
                    .collect(),
            );
            frequency.push(1.0);
        }
    }

    let mut synonyms = Vec::with_capacity(config.planted_synonyms);
    for concept in 0..config.planted_synonyms {
        let (head, syn) = (concept, concept + c);
        embeddings[syn] = embeddings[head].clone();
        synonyms.push((head, syn));
    }

    let relatedness = relatedness_matrix(&embeddings, config.gamma);

    let d = config.d_feat;
    let mut prototypes = Vec::with_capacity(w);
    for _ in 0..w {
        let len = rng.random_range(config.prototype_len[0]..=config.prototype_len[1]);
        let mut state: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let mut frames = Vec::with_capacity(len * d);
        for _ in 0..len {
            for x in state.iter() {
                frames.push(x + config.prototype_noise * gauss(&mut rng));
            }
            for x in state.iter_mut() {
                *x += config.prototype_step * gauss(&mut rng);
            }
        }
        prototypes.push(frames);
    }

    Ok(Ontology {
        vocab,
        gamma: config.gamma,
        concept_of,
        concept_centers,
        embeddings,
        relatedness,
        prototypes,
        d_feat: d,
        frequency,
        synonyms,
    })
}
