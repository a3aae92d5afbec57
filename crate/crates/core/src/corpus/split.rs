use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusItem, Split};
use crate::error::{Error, Result};

/// Image counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub tagger: usize,
    pub speech: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            tagger: 500,
            speech: 1200,
            dev: 150,
            test: 150,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.tagger + self.speech + self.dev + self.test
    }
}

/// Assigns whole images to splits after a seeded shuffle. Items of images not
/// covered by `sizes` are dropped; the result is ordered by item id.
pub fn split_corpus(items: Vec<CorpusItem>, seed: u64, sizes: &SplitSizes) -> Result<Vec<CorpusItem>> {
    let mut by_image: BTreeMap<u32, Vec<CorpusItem>> = BTreeMap::new();
    for item in items {
        by_image.entry(item.image_id).or_default().push(item);
    }
    if sizes.total() > by_image.len() {
        return Err(Error::Config(format!(
            "split sizes request {} images but only {} are available",
            sizes.total(),
            by_image.len()
        )));
    }
    let mut images: Vec<u32> = by_image.keys().copied().collect();
    images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let plan = [
        (Split::TaggerTrain, sizes.tagger),
        (Split::ImageSpeech, sizes.speech),
        (Split::Dev, sizes.dev),
        (Split::Test, sizes.test),
    ];
    let mut out = Vec::new();
    let mut cursor = images.iter();
    for (split, count) in plan {
        for image in cursor.by_ref().take(count) {
            for mut item in by_image.remove(image).unwrap_or_default() {
                item.split = split;
                out.push(item);
            }
        }
    }
    out.sort_by_key(|i| i.id);
    Ok(out)
}

/// Indices (into `corpus.items`) of the image-speech items whose transcripts
/// are used for text supervision. Subsets for increasing fractions under the
/// same seed are nested.
pub fn transcribed_subset(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("set-C fraction {fraction} outside [0, 1]")));
    }
    let mut pool: Vec<usize> = corpus
        .indices(Split::ImageSpeech)
        .into_iter()
        .filter(|&i| corpus.items[i].transcript.is_some())
        .collect();
    if fraction == 0.0 || pool.is_empty() {
        return Ok(Vec::new());
    }
    let count = ((fraction * pool.len() as f64).round() as usize).clamp(1, pool.len());
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = pool[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}
