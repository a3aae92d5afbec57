#![allow(dead_code)]

use std::sync::OnceLock;

use vgkw::corpus::{Corpus, Judgments};
use vgkw::experiment::{prepare, ExperimentConfig};
use vgkw::tagger::Tagger;

/// A corpus and model small enough for a few dozen training steps per test.
pub fn small_config() -> ExperimentConfig {
    let overrides: Vec<String> = [
        "corpus.split.tagger=120",
        "corpus.split.speech=160",
        "corpus.split.dev=40",
        "corpus.split.test=40",
        "corpus.item.t_max=80",
        "tagger.hidden=[32, 32]",
        "tagger.n_vis=20",
        "tagger.steps=300",
        "model.conv=[{channels=8, kernel=5, stride=1}, {channels=16, kernel=5, stride=2}]",
        "model.n_bow=20",
        "train.batch_size=8",
        "train.max_steps=60",
        "train.eval_interval=20",
        "train.contrastive.n_neg=3",
        "train.set_c_fraction=0.25",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    ExperimentConfig::from_toml("", &overrides).expect("small config is valid")
}

pub struct Fixture {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub tagger: Tagger,
    pub judgments: Judgments,
    pub bow_vocab: Vec<usize>,
}

pub fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let config = small_config();
        let (corpus, tagger, judgments) = prepare(&config).unwrap();
        let bow_vocab = config.bow_vocab(&corpus);
        Fixture {
            config,
            corpus,
            tagger,
            judgments,
            bow_vocab,
        }
    })
}
