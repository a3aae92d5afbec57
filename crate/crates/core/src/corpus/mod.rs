//! Paired image/speech/transcript corpora: the synthetic generator, relevance
//! judgments, image-level splitting and the on-disk manifest + feature blob.

mod io;
mod judgments;
mod ontology;
mod split;
mod synth;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Error, Result};

pub use io::{load_corpus, load_judgments, save_corpus, save_judgments, BLOB_FILE, MANIFEST_FILE};
pub use judgments::{generate_judgments, simulate_votes, Judgments};
pub use ontology::{generate_ontology, Ontology, OntologyConfig};
pub use split::{split_corpus, transcribed_subset, SplitSizes};
pub use synth::{synthesize_item, ItemConfig};

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    stopword: Vec<bool>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    words: Vec<String>,
    stopword: Vec<bool>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(r.words, r.stopword)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            words: v.words,
            stopword: v.stopword,
        }
    }
}

impl Vocabulary {
    pub fn new(words: Vec<String>, stopword: Vec<bool>) -> Result<Self> {
        if words.len() != stopword.len() {
            return Err(Error::Config(format!(
                "vocabulary has {} words but {} stopword flags",
                words.len(),
                stopword.len()
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid surface string {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate surface string {w:?}")));
            }
        }
        Ok(Self {
            words,
            stopword,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn is_stopword(&self, id: usize) -> bool {
        self.stopword[id]
    }

    pub fn stopwords(&self) -> &[bool] {
        &self.stopword
    }

    /// Maps surface strings to ids, reporting every unknown word at once.
    pub fn lookup_all<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(words.len());
        let mut missing = Vec::new();
        for w in words {
            match self.id(w.as_ref()) {
                Some(id) => ids.push(id),
                None => missing.push(w.as_ref().to_string()),
            }
        }
        if missing.is_empty() {
            Ok(ids)
        } else {
            Err(Error::Vocabulary(missing))
        }
    }
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary").field("len", &self.words.len()).finish()
    }
}

/// One spoken caption as a zero-padded `[t_max, d_feat]` frame matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    pub frames: Vec<f32>,
    pub t_max: usize,
    pub d_feat: usize,
    /// Frames before padding.
    pub length: usize,
    pub frame_period: f32,
}

impl UtteranceFeatures {
    /// Pads (or truncates) `frames` of `d_feat` columns to `t_max` rows.
    /// Returns the features and whether truncation happened.
    pub fn from_frames(mut frames: Vec<f32>, d_feat: usize, t_max: usize, frame_period: f32) -> (Self, bool) {
        let rows = frames.len() / d_feat.max(1);
        let truncated = rows > t_max;
        let length = rows.min(t_max);
        frames.truncate(length * d_feat);
        frames.resize(t_max * d_feat, 0.0);
        (
            Self {
                frames,
                t_max,
                d_feat,
                length,
                frame_period,
            },
            truncated,
        )
    }

    pub fn padding_is_zero(&self) -> bool {
        self.frames[self.length * self.d_feat..].iter().all(|&x| x == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    /// Set A: trains the image tagger.
    TaggerTrain,
    /// Set B: image/speech pairs for the speech model. Set C is a transcript subset of these.
    ImageSpeech,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::TaggerTrain => "tagger-train",
            Split::ImageSpeech => "image-speech",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tagger-train" | "A" => Ok(Split::TaggerTrain),
            "image-speech" | "B" => Ok(Split::ImageSpeech),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: u32,
    pub image_id: u32,
    pub image: Vec<f32>,
    pub utterance: UtteranceFeatures,
    pub transcript: Option<Vec<usize>>,
    pub split: Split,
    pub truncated: bool,
}

impl CorpusItem {
    pub fn contains_word(&self, word: usize) -> bool {
        self.transcript.as_ref().is_some_and(|t| t.contains(&word))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub items: Vec<CorpusItem>,
    pub ontology: Option<Ontology>,
    pub d_feat: usize,
    pub t_max: usize,
    pub d_img: usize,
    pub frame_period: f32,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&CorpusItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.items.iter().filter(|i| i.split == split).count()
    }

    /// Word frequencies (one count per item containing the word) over items of `split`.
    pub fn word_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0usize; self.vocab.len()];
        for item in self.items.iter().filter(|i| i.split == split) {
            if let Some(t) = &item.transcript {
                let mut seen = t.clone();
                seen.sort_unstable();
                seen.dedup();
                for w in seen {
                    counts[w] += 1;
                }
            }
        }
        counts
    }

    /// The `n` most frequent content words in `split`, ties broken by word id.
    pub fn top_content_words(&self, split: Split, n: usize) -> Vec<usize> {
        let counts = self.word_counts(split);
        let mut ids: Vec<usize> = (0..self.vocab.len())
            .filter(|&w| !self.vocab.is_stopword(w) && counts[w] > 0)
            .collect();
        ids.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        ids.truncate(n);
        ids
    }

    pub fn transcript_text(&self, item: &CorpusItem) -> Option<String> {
        item.transcript.as_ref().map(|t| {
            t.iter()
                .map(|&w| self.vocab.word(w))
                .collect::<Vec<_>>()
                .join(" ")
        })
    }

    /// SHA-256 over the serialized manifest and feature blob.
    pub fn checksum(&self) -> String {
        let (manifest, blob) = io::encode(self);
        let mut all = manifest.into_bytes();
        all.extend_from_slice(&blob);
        binfmt::hex_digest(&all)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub ontology: OntologyConfig,
    pub item: ItemConfig,
    pub captions_per_image: usize,
    pub split: SplitSizes,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            ontology: OntologyConfig::default(),
            item: ItemConfig::default(),
            captions_per_image: 1,
            split: SplitSizes::default(),
        }
    }
}

impl CorpusConfig {
    pub fn total_images(&self) -> usize {
        self.split.total()
    }

    pub fn total_items(&self) -> usize {
        self.split.total() * self.captions_per_image
    }

    pub fn validate(&self) -> Result<()> {
        self.ontology.validate()?;
        self.item.validate()?;
        if self.captions_per_image == 0 {
            return Err(Error::Config("corpus.captions_per_image must be ≥ 1".into()));
        }
        if self.split.tagger == 0 || self.split.speech == 0 || self.split.dev == 0 || self.split.test == 0 {
            return Err(Error::Config("corpus.split sizes must all be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Generates an ontology, synthesizes every item and assigns splits.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let ontology = generate_ontology(&config.ontology)?;
    let mut items = Vec::with_capacity(config.total_items());
    for image in 0..config.total_images() {
        let image_seed = derive_seed(config.seed, image as u64);
        let scene = synth::sample_scene(&ontology, image_seed, &config.item);
        for caption in 0..config.captions_per_image {
            let id = (image * config.captions_per_image + caption) as u32;
            let item_seed = derive_seed(image_seed, caption as u64 + 1);
            let mut item = synth::render_item(&ontology, &scene, item_seed, &config.item)?;
            item.id = id;
            item.image_id = image as u32;
            items.push(item);
        }
    }
    let items = split_corpus(items, derive_seed(config.seed, u64::MAX), &config.split)?;
    Ok(Corpus {
        vocab: ontology.vocab.clone(),
        items,
        d_feat: config.ontology.d_feat,
        t_max: config.item.t_max,
        d_img: config.ontology.d_concept,
        frame_period: config.item.frame_period,
        ontology: Some(ontology),
    })
}
