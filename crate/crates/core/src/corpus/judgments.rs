use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{CorpusItem, Ontology};
use crate::error::{Error, Result};

/// Annotator relevance votes for every (query, utterance) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Judgments {
    pub queries: Vec<usize>,
    pub utterances: Vec<u32>,
    /// Row-major `Q × M`.
    pub votes: Vec<u8>,
    pub hard: Vec<bool>,
    pub num_annotators: u8,
}

impl Judgments {
    /// Builds judgments from vote counts, deriving the majority labels.
    pub fn from_votes(queries: Vec<usize>, utterances: Vec<u32>, votes: Vec<u8>, num_annotators: u8) -> Result<Self> {
        if votes.len() != queries.len() * utterances.len() {
            return Err(Error::dim(
                "judgments",
                "votes",
                queries.len() * utterances.len(),
                votes.len(),
            ));
        }
        if let Some(v) = votes.iter().find(|&&v| v > num_annotators) {
            return Err(Error::Format(format!("vote count {v} exceeds {num_annotators} annotators")));
        }
        let hard = votes.iter().map(|&v| 2 * v as usize > num_annotators as usize).collect();
        Ok(Self {
            queries,
            utterances,
            votes,
            hard,
            num_annotators,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.utterances.len()
    }

    pub fn votes_row(&self, q: usize) -> &[u8] {
        let m = self.utterances.len();
        &self.votes[q * m..(q + 1) * m]
    }

    pub fn hard_row(&self, q: usize) -> &[bool] {
        let m = self.utterances.len();
        &self.hard[q * m..(q + 1) * m]
    }
}

/// Number of `annotators` voting relevant when each votes with probability
/// `clamp(strength + noise * N(0, 1), 0, 1)`.
pub fn simulate_votes(strength: f64, annotators: u8, noise: f64, rng: &mut ChaCha8Rng) -> u8 {
    let mut votes = 0;
    for _ in 0..annotators {
        let jitter: f64 = if noise > 0.0 { noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        let p = (strength + jitter).clamp(0.0, 1.0);
        if rng.random::<f64>() < p {
            votes += 1;
        }
    }
    votes
}

/// Simulated relevance judgments. The relevance strength of query `q` for an
/// utterance is the maximum relatedness between `q` and any transcript word.
pub fn generate_judgments(
    ontology: &Ontology,
    items: &[&CorpusItem],
    queries: &[usize],
    num_annotators: u8,
    annotator_noise: f64,
    seed: u64,
) -> Result<Judgments> {
    let unknown: Vec<String> = queries
        .iter()
        .filter(|&&q| q >= ontology.num_words())
        .map(|q| format!("#{q}"))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Vocabulary(unknown));
    }
    if num_annotators == 0 {
        return Err(Error::Config("num_annotators must be ≥ 1".into()));
    }
    if annotator_noise < 0.0 {
        return Err(Error::Config("annotator_noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut votes = Vec::with_capacity(queries.len() * items.len());
    for &q in queries {
        for item in items {
            let strength = item
                .transcript
                .as_deref()
                .unwrap_or(&[])
                .iter()
                .map(|&w| ontology.relatedness(q, w))
                .fold(0.0, f64::max);
            votes.push(simulate_votes(strength, num_annotators, annotator_noise, &mut rng));
        }
    }
    Judgments::from_votes(
        queries.to_vec(),
        items.iter().map(|i| i.id).collect(),
        votes,
        num_annotators,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, Split};

    #[test]
    fn certainty_and_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(simulate_votes(1.0, 5, 0.0, &mut rng), 5);
        assert_eq!(simulate_votes(0.0, 5, 0.0, &mut rng), 0);
    }

    #[test]
    fn monte_carlo_mean_votes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let total: u64 = (0..n).map(|_| simulate_votes(0.6, 5, 0.0, &mut rng) as u64).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 3.0).abs() < 0.05, "mean votes {mean}");
    }

    #[test]
    fn majority_and_exact_containment() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        let ontology = corpus.ontology.as_ref().unwrap();
        let test = corpus.split(Split::Test);
        let queries: Vec<usize> = (0..10).collect();
        let j = generate_judgments(ontology, &test, &queries, 5, 0.0, 3).unwrap();
        for (qi, &q) in queries.iter().enumerate() {
            for (ui, item) in test.iter().enumerate() {
                let v = j.votes_row(qi)[ui];
                assert_eq!(j.hard_row(qi)[ui], v >= 3);
                if item.contains_word(q) {
                    assert_eq!(v, 5);
                    assert!(j.hard_row(qi)[ui]);
                }
            }
        }
    }

    #[test]
    fn unknown_query_is_a_vocabulary_error() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        let ontology = corpus.ontology.as_ref().unwrap();
        let test = corpus.split(Split::Test);
        let err = generate_judgments(ontology, &test, &[0, 999], 5, 0.1, 1).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(_)));
    }
}
