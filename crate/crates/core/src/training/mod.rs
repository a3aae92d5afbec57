//! Multitask optimization: batch scheduling over the image-speech and
//! transcribed pools, Adam updates on the active path, and early stopping on
//! exact-match keyword F1.

mod checkpoint;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, transcribed_subset, Corpus, CorpusItem, Split, UtteranceFeatures};
use crate::error::{Error, Result};
use crate::eval::{detections, ensemble, exact_truth, f1_score, run_heads, score_matrix, Head, HeadOutputs, ScoreMatrix};
use crate::losses::{
    combined_loss, draw_negatives, ActiveLosses, ContrastiveConfig, LossBreakdown, LossInputs, LossWeights, Negatives, TaskTag,
};
use crate::model::{OutputGrads, ParamGroup, Parameters, SpeechModel, SpeechModelConfig, VisionProjection};
use crate::numerics::{Precision, Real, Tensor};
use crate::optim::{Adam, AdamConfig};
use crate::tagger::Tagger;

pub use checkpoint::{
    decode_checkpoint, decode_meta, encode_checkpoint, load_checkpoint, load_checkpoint_meta, save_checkpoint,
    Checkpoint, CheckpointMeta, RngState, BEST_FILE, CKPT_MAGIC, CKPT_VERSION, LAST_FILE, LOG_FILE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_steps: usize,
    /// Steps between dev evaluations.
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub text_batches_use_visual_losses: bool,
    pub seed: u64,
    /// Fraction of the image-speech split whose transcripts are used.
    pub set_c_fraction: f64,
    /// Detection threshold for the early-stopping F-score.
    pub threshold: f64,
    pub macro_f1: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            adam: AdamConfig::default(),
            max_steps: 2000,
            eval_interval: 200,
            patience: 5,
            weights: LossWeights::default(),
            contrastive: ContrastiveConfig::default(),
            text_batches_use_visual_losses: false,
            seed: 1,
            set_c_fraction: 1.0,
            threshold: 0.3,
            macro_f1: false,
            precision: Precision::Single,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be ≥ 2".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be ≥ 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("train.eval_interval must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.set_c_fraction) {
            return Err(Error::Config(format!(
                "train.set_c_fraction {} outside [0, 1]",
                self.set_c_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("train.threshold {} outside [0, 1]", self.threshold)));
        }
        self.weights.validate()?;
        self.adam.validate()?;
        if self.weights.rep() > 0.0 {
            self.contrastive.validate(self.batch_size)?;
        }
        Ok(())
    }

    pub fn losses(&self, tag: TaskTag) -> ActiveLosses {
        ActiveLosses::for_batch(tag, &self.weights, self.text_batches_use_visual_losses)
    }

    /// Whether batches from the given pool would carry any loss.
    pub fn pool_active(&self, tag: TaskTag) -> bool {
        let a = self.losses(tag);
        a.vis > 0.0 || a.bow > 0.0 || a.rep > 0.0
    }
}

/// Draws the batch source with probability proportional to pool size, then
/// `batch` distinct positions uniformly from that pool.
pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, b_len: usize, c_len: usize, batch: usize) -> Result<(TaskTag, Vec<usize>)> {
    let total = b_len + c_len;
    if total == 0 {
        return Err(Error::Config("both training pools are empty".into()));
    }
    let tag = if rng.random_range(0..total) < b_len {
        TaskTag::Visual
    } else {
        TaskTag::Text
    };
    let pool = if tag == TaskTag::Visual { b_len } else { c_len };
    if batch > pool {
        return Err(Error::Config(format!(
            "batch size {batch} exceeds the {} pool of {pool} items",
            tag.as_str()
        )));
    }
    Ok((tag, sample(rng, pool, batch).into_vec()))
}

/// Multi-hot bag over `vocab` for a transcript.
pub fn bow_target(vocab: &[usize], transcript: &[usize]) -> Vec<f64> {
    vocab
        .iter()
        .map(|w| if transcript.contains(w) { 1.0 } else { 0.0 })
        .collect()
}

/// Scores of the requested head over `items`, ensembling over shared keywords.
pub fn head_scores(
    outputs: &HeadOutputs,
    head: Head,
    vis_vocab: &[usize],
    bow_vocab: &[usize],
    keywords: &[usize],
) -> Result<ScoreMatrix> {
    match head {
        Head::Vis => score_matrix(outputs, Head::Vis, vis_vocab, keywords),
        Head::Bow => score_matrix(outputs, Head::Bow, bow_vocab, keywords),
        Head::Ensemble => {
            let shared: Vec<usize> = keywords
                .iter()
                .copied()
                .filter(|k| vis_vocab.contains(k) && bow_vocab.contains(k))
                .collect();
            let v = score_matrix(outputs, Head::Vis, vis_vocab, &shared)?;
            let b = score_matrix(outputs, Head::Bow, bow_vocab, &shared)?;
            ensemble(&v, &b)
        }
    }
}

/// Keyword-spotting F1 on `items`: detection is `p > threshold`, truth is the
/// keyword occurring in the transcript. Micro-averaged unless `macro_avg`.
#[allow(clippy::too_many_arguments)]
pub fn f_score_exact<F: Real>(
    model: &SpeechModel<F>,
    items: &[&CorpusItem],
    head: Head,
    vis_vocab: &[usize],
    bow_vocab: &[usize],
    keywords: &[usize],
    threshold: f64,
    macro_avg: bool,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Evaluation("empty dev set".into()));
    }
    let outputs = run_heads(model, items)?;
    let m = head_scores(&outputs, head, vis_vocab, bow_vocab, keywords)?;
    f1_score(&detections(&m, threshold), &exact_truth(&m, items)?, macro_avg)
}

/// Parameters updated by the optimizer: the speech model and the vision projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable<F> {
    pub model: SpeechModel<F>,
    pub projection: VisionProjection<F>,
}

impl<F: Real> Parameters<F> for Trainable<F> {
    fn visit(&self, f: &mut dyn FnMut(ParamGroup, &str, &Tensor<F>)) {
        self.model.visit(f);
        self.projection.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Tensor<F>)) {
        self.model.visit_mut(f);
        self.projection.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: u64,
        task: TaskTag,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Eval {
        step: u64,
        head: Head,
        f1: f64,
        best: bool,
    },
}

/// Passed to the observer after every dev evaluation.
pub struct EvalEvent<'a, F> {
    pub step: u64,
    pub f1: f64,
    pub head: Head,
    pub keywords: &'a [usize],
    pub model: &'a SpeechModel<F>,
}

/// Everything the loop needs besides parameters: pools, targets and vocabularies.
pub struct TrainingData<'a, F> {
    pub b_items: Vec<&'a CorpusItem>,
    pub b_vis: Vec<Vec<F>>,
    pub b_feature: Vec<Vec<F>>,
    pub c_items: Vec<&'a CorpusItem>,
    pub c_bow: Vec<Vec<F>>,
    /// Tagger targets for set-C items (used only with visual losses on text batches).
    pub c_vis: Vec<Vec<F>>,
    pub c_feature: Vec<Vec<F>>,
    pub dev: Vec<&'a CorpusItem>,
    pub vis_vocab: Vec<usize>,
    pub bow_vocab: Vec<usize>,
}

fn to_f<F: Real>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&x| F::of(x)).collect()
}

impl<'a, F: Real> TrainingData<'a, F> {
    /// Tags every image-speech item, picks the set-C subset and builds the
    /// bag-of-words targets. Pools whose batches would carry no loss are left empty.
    pub fn prepare(corpus: &'a Corpus, tagger: &Tagger, bow_vocab: &[usize], config: &TrainConfig) -> Result<Self> {
        let b_all = corpus.indices(Split::ImageSpeech);
        let c_idx = if config.pool_active(TaskTag::Text) {
            transcribed_subset(corpus, config.set_c_fraction, derive_seed(config.seed, 40))?
        } else {
            Vec::new()
        };
        let b_idx = if config.pool_active(TaskTag::Visual) { b_all } else { Vec::new() };
        let mut data = TrainingData {
            b_items: Vec::with_capacity(b_idx.len()),
            b_vis: Vec::with_capacity(b_idx.len()),
            b_feature: Vec::with_capacity(b_idx.len()),
            c_items: Vec::with_capacity(c_idx.len()),
            c_bow: Vec::with_capacity(c_idx.len()),
            c_vis: Vec::new(),
            c_feature: Vec::new(),
            dev: corpus.split(Split::Dev),
            vis_vocab: tagger.tags.clone(),
            bow_vocab: bow_vocab.to_vec(),
        };
        for &i in &b_idx {
            let item = &corpus.items[i];
            let t = tagger.tag(&item.image)?;
            data.b_items.push(item);
            data.b_vis.push(to_f(&t.y_vis));
            data.b_feature.push(to_f(&t.hidden));
        }
        let text_visual = config.losses(TaskTag::Text).needs_image();
        for &i in &c_idx {
            let item = &corpus.items[i];
            let transcript = item.transcript.as_deref().unwrap_or(&[]);
            data.c_items.push(item);
            data.c_bow.push(to_f(&bow_target(bow_vocab, transcript)));
            if text_visual {
                let t = tagger.tag(&item.image)?;
                data.c_vis.push(to_f(&t.y_vis));
                data.c_feature.push(to_f(&t.hidden));
            }
        }
        Ok(data)
    }

    pub fn trained_heads(&self, config: &TrainConfig) -> Vec<Head> {
        let mut heads = Vec::new();
        let vis_from_b = !self.b_items.is_empty() && config.losses(TaskTag::Visual).vis > 0.0;
        let vis_from_c = !self.c_items.is_empty() && config.losses(TaskTag::Text).vis > 0.0;
        if vis_from_b || vis_from_c {
            heads.push(Head::Vis);
        }
        if !self.c_items.is_empty() && config.losses(TaskTag::Text).bow > 0.0 {
            heads.push(Head::Bow);
        }
        heads
    }

    /// Head scored for early stopping: the ensemble when both heads train,
    /// otherwise whichever does.
    pub fn stop_head(&self, config: &TrainConfig) -> Head {
        let heads = self.trained_heads(config);
        match (heads.contains(&Head::Vis), heads.contains(&Head::Bow)) {
            (true, true) => Head::Ensemble,
            (false, true) => Head::Bow,
            _ => Head::Vis,
        }
    }

    pub fn stop_keywords(&self, head: Head) -> Vec<usize> {
        match head {
            Head::Vis => self.vis_vocab.clone(),
            Head::Bow => self.bow_vocab.clone(),
            Head::Ensemble => self
                .vis_vocab
                .iter()
                .copied()
                .filter(|w| self.bow_vocab.contains(w))
                .collect(),
        }
    }
}

/// Result of a training run: the best parameters by dev F1 and the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub best: Trainable<F>,
    pub best_f1: Option<f64>,
    pub best_step: u64,
    pub steps: u64,
    pub meta: CheckpointMeta,
    pub log: Vec<LogRecord>,
}

/// Fills the corpus- and tagger-dependent sizes of a model configuration.
pub fn resolve_model_config(base: &SpeechModelConfig, corpus: &Corpus, tagger: &Tagger, bow_vocab: &[usize]) -> SpeechModelConfig {
    SpeechModelConfig {
        d_feat: corpus.d_feat,
        t_max: corpus.t_max,
        n_vis: tagger.n_vis(),
        n_bow: bow_vocab.len().max(1),
        d_vis_hidden: tagger.hidden_dim(),
        ..base.clone()
    }
}

struct LoopState<F> {
    params: Trainable<F>,
    best: Trainable<F>,
    adam: Adam<F>,
    rng: ChaCha8Rng,
    step: u64,
    best_step: u64,
    best_f1: Option<f64>,
    since_best: usize,
}

/// One batch as seen by the loss: utterances plus whichever targets the
/// active losses need (tagger posteriors, tagger features, bags of words).
pub struct BatchData<'b, F> {
    pub utterances: Vec<&'b UtteranceFeatures>,
    pub y_vis: Vec<&'b [F]>,
    pub y_bow: Vec<&'b [F]>,
    pub features: Vec<&'b [F]>,
}

/// Combined loss of a batch and its gradient w.r.t. every trainable parameter.
pub fn batch_gradient<F: Real>(
    params: &Trainable<F>,
    batch: &BatchData<'_, F>,
    active: &ActiveLosses,
    negatives: Option<&Negatives>,
    margin: f64,
) -> Result<(LossBreakdown, Trainable<F>)> {
    let model = &params.model;
    let projection = &params.projection;
    let fwds = batch
        .utterances
        .iter()
        .map(|u| model.forward(u))
        .collect::<Result<Vec<_>>>()?;
    let proj = if active.rep > 0.0 {
        batch
            .features
            .iter()
            .map(|x| projection.forward(x))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let owned = |rows: &[&[F]]| rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let y_vis = if active.vis > 0.0 { owned(&batch.y_vis) } else { Vec::new() };
    let y_bow = if active.bow > 0.0 { owned(&batch.y_bow) } else { Vec::new() };
    let y_vis_hat: Vec<Vec<F>> = fwds.iter().map(|f| f.y_vis.clone()).collect();
    let y_bow_hat: Vec<Vec<F>> = fwds.iter().map(|f| f.y_bow.clone()).collect();
    let speech: Vec<Vec<F>> = fwds.iter().map(|f| f.embedding.clone()).collect();
    let image: Vec<Vec<F>> = proj.iter().map(|p| p.v.clone()).collect();
    let loss = combined_loss(
        &LossInputs {
            y_vis_hat: &y_vis_hat,
            y_vis: &y_vis,
            y_bow_hat: &y_bow_hat,
            y_bow: &y_bow,
            speech: &speech,
            image: &image,
        },
        active,
        negatives,
        margin,
    )?;
    let mut grads = Trainable {
        model: model.zeros_like(),
        projection: projection.zeros_like(),
    };
    for (k, fwd) in fwds.iter().enumerate() {
        let out = OutputGrads {
            y_vis: loss.grad_y_vis.get(k).map(|g| g.as_slice()),
            y_bow: loss.grad_y_bow.get(k).map(|g| g.as_slice()),
            embedding: loss.grad_speech.get(k).map(|g| g.as_slice()),
        };
        model.backward(fwd, &out, &mut grads.model, false)?;
        if let Some(g) = loss.grad_image.get(k) {
            projection.backward(&proj[k], g, &mut grads.projection)?;
        }
    }
    Ok((loss.breakdown, grads))
}

/// Parameter groups a batch with these losses can change.
pub fn live_groups(active: &ActiveLosses) -> impl Fn(ParamGroup) -> bool {
    let (vis, bow, rep) = (active.vis > 0.0, active.bow > 0.0, active.rep > 0.0);
    move |g| match g {
        ParamGroup::Trunk => vis || bow || rep,
        ParamGroup::VisHead => vis,
        ParamGroup::BowHead => bow,
        ParamGroup::Projection => rep,
        ParamGroup::Tagger => false,
    }
}

/// Runs one optimization step and returns its loss record.
fn train_step<F: Real>(
    state: &mut LoopState<F>,
    data: &TrainingData<'_, F>,
    config: &TrainConfig,
) -> Result<(TaskTag, LossBreakdown)> {
    let (tag, picks) = sample_batch(&mut state.rng, data.b_items.len(), data.c_items.len(), config.batch_size)?;
    let active = config.losses(tag);
    fn rows<'r, F>(src: &'r [Vec<F>], picks: &[usize]) -> Vec<&'r [F]> {
        picks.iter().filter_map(|&i| src.get(i).map(|r| r.as_slice())).collect()
    }
    let batch = match tag {
        TaskTag::Visual => BatchData {
            utterances: picks.iter().map(|&i| &data.b_items[i].utterance).collect(),
            y_vis: rows(&data.b_vis, &picks),
            y_bow: Vec::new(),
            features: rows(&data.b_feature, &picks),
        },
        TaskTag::Text => BatchData {
            utterances: picks.iter().map(|&i| &data.c_items[i].utterance).collect(),
            y_vis: rows(&data.c_vis, &picks),
            y_bow: rows(&data.c_bow, &picks),
            features: rows(&data.c_feature, &picks),
        },
    };
    let negatives = if active.rep > 0.0 {
        config.contrastive.validate(picks.len())?;
        Some(draw_negatives(picks.len(), config.contrastive.n_neg, &mut state.rng)?)
    } else {
        None
    };
    let (breakdown, grads) = batch_gradient(&state.params, &batch, &active, negatives.as_ref(), config.contrastive.margin)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged {
            step: state.step + 1,
            detail: format!("non-finite loss {breakdown:?}"),
        });
    }
    state.adam.step(&mut state.params, &grads, &live_groups(&active)).map_err(|e| match e {
        Error::NonFinite(detail) => Error::Diverged {
            step: state.step + 1,
            detail,
        },
        other => other,
    })?;
    Ok((tag, breakdown))
}

/// Options for where and how a run persists its state.
#[derive(Default)]
pub struct RunIo<'a> {
    /// Directory for `best.ckpt`, `last.ckpt` and `log.jsonl`.
    pub run_dir: Option<&'a Path>,
    /// Continue from `run_dir/last.ckpt` (and `best.ckpt`).
    pub resume: bool,
}

fn append_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// The training loop. Every `eval_interval` steps the stopping head is scored
/// on the dev split; the best parameters are kept and the run stops after
/// `patience` evaluations without strict improvement, or at `max_steps`.
/// Untrained parameters are never a candidate: at initialization every output
/// sits near 0.5, above the usual threshold, so their F-score only reflects
/// predicting every keyword.
pub fn train<F: Real>(
    corpus: &Corpus,
    tagger: &Tagger,
    bow_vocab: &[usize],
    model_config: &SpeechModelConfig,
    config: &TrainConfig,
    io: &RunIo<'_>,
    observer: &mut dyn FnMut(&EvalEvent<'_, F>),
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if F::PRECISION != config.precision {
        return Err(Error::Config(format!(
            "train.precision is {} but the loop runs in {}",
            config.precision,
            F::PRECISION
        )));
    }
    let mcfg = resolve_model_config(model_config, corpus, tagger, bow_vocab);
    mcfg.validate()?;
    if bow_vocab.is_empty() {
        return Err(Error::Config("bag-of-words vocabulary is empty".into()));
    }
    let data = TrainingData::<F>::prepare(corpus, tagger, bow_vocab, config)?;
    if data.b_items.is_empty() && data.c_items.is_empty() {
        return Err(Error::Config("no training pool carries a loss under these weights".into()));
    }
    for (pool, n) in [("image-speech", data.b_items.len()), ("transcribed", data.c_items.len())] {
        if n > 0 && n < config.batch_size {
            return Err(Error::Config(format!(
                "batch size {} exceeds the {pool} pool of {n} items",
                config.batch_size
            )));
        }
    }
    let stop_head = data.stop_head(config);
    let keywords = data.stop_keywords(stop_head);
    if keywords.is_empty() {
        return Err(Error::Config("no keywords shared by the scored heads".into()));
    }
    let mut meta = CheckpointMeta {
        precision: config.precision,
        model: mcfg.clone(),
        train: config.clone(),
        vis_vocab: data.vis_vocab.clone(),
        bow_vocab: data.bow_vocab.clone(),
        trained_heads: data.trained_heads(config),
        stop_head,
        step: 0,
        best_step: 0,
        best_f1: None,
        evals_since_best: 0,
    };

    let mut state = if io.resume {
        let dir = io
            .run_dir
            .ok_or_else(|| Error::Config("resume requires a run directory".into()))?;
        let last: Checkpoint<F> = load_checkpoint(&dir.join(LAST_FILE))?;
        let best: Checkpoint<F> = load_checkpoint(&dir.join(BEST_FILE))?;
        if last.meta.model != mcfg {
            return Err(Error::Config("resumed checkpoint has a different model configuration".into()));
        }
        LoopState {
            params: Trainable {
                model: last.model,
                projection: last.projection,
            },
            best: Trainable {
                model: best.model,
                projection: best.projection,
            },
            adam: last
                .adam
                .ok_or_else(|| Error::Format("last checkpoint lacks optimizer state".into()))?,
            rng: last
                .rng
                .ok_or_else(|| Error::Format("last checkpoint lacks RNG state".into()))?
                .restore(),
            step: last.meta.step,
            best_step: last.meta.best_step,
            best_f1: last.meta.best_f1,
            since_best: last.meta.evals_since_best,
        }
    } else {
        let params = Trainable {
            model: SpeechModel::<F>::init(&mcfg, derive_seed(config.seed, 1))?,
            projection: VisionProjection::<F>::init(&mcfg, derive_seed(config.seed, 2))?,
        };
        LoopState {
            best: params.clone(),
            adam: Adam::new(config.adam, &params),
            params,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 30)),
            step: 0,
            best_step: 0,
            best_f1: None,
            since_best: 0,
        }
    };
    if let Some(dir) = io.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if !io.resume {
            let log = dir.join(LOG_FILE);
            if log.exists() {
                std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
            }
        }
    }

    let write_ckpts = |state: &LoopState<F>, meta: &mut CheckpointMeta, best_changed: bool| -> Result<()> {
        meta.step = state.step;
        meta.best_step = state.best_step;
        meta.best_f1 = state.best_f1;
        meta.evals_since_best = state.since_best;
        let Some(dir) = io.run_dir else { return Ok(()) };
        if best_changed || !dir.join(BEST_FILE).exists() {
            save_checkpoint(
                &Checkpoint {
                    meta: meta.clone(),
                    model: state.best.model.clone(),
                    projection: state.best.projection.clone(),
                    adam: None,
                    rng: None,
                },
                &dir.join(BEST_FILE),
            )?;
        }
        save_checkpoint(
            &Checkpoint {
                meta: meta.clone(),
                model: state.params.model.clone(),
                projection: state.params.projection.clone(),
                adam: Some(state.adam.clone()),
                rng: Some(RngState::capture(&state.rng)),
            },
            &dir.join(LAST_FILE),
        )
    };

    let mut log = Vec::new();
    let mut pending = Vec::new();
    let max = config.max_steps as u64;
    let stopped_early = |s: &LoopState<F>| s.since_best >= config.patience;
    while state.step < max && !stopped_early(&state) {
        let (task, loss) = match train_step(&mut state, &data, config) {
            Ok(x) => x,
            Err(e) => {
                if let Some(dir) = io.run_dir {
                    append_log(&dir.join(LOG_FILE), &pending)?;
                }
                return Err(e);
            }
        };
        state.step += 1;
        let rec = LogRecord::Step {
            step: state.step,
            task,
            loss,
        };
        log.push(rec.clone());
        pending.push(rec);
        if state.step % config.eval_interval as u64 == 0 {
            let f1 = f_score_exact(
                &state.params.model,
                &data.dev,
                stop_head,
                &data.vis_vocab,
                &data.bow_vocab,
                &keywords,
                config.threshold,
                config.macro_f1,
            )?;
            observer(&EvalEvent {
                step: state.step,
                f1,
                head: stop_head,
                keywords: &keywords,
                model: &state.params.model,
            });
            let improved = state.best_f1.is_none_or(|b| f1 > b);
            if improved {
                state.best = state.params.clone();
                state.best_f1 = Some(f1);
                state.best_step = state.step;
                state.since_best = 0;
            } else {
                state.since_best += 1;
            }
            let rec = LogRecord::Eval {
                step: state.step,
                head: stop_head,
                f1,
                best: improved,
            };
            log.push(rec.clone());
            pending.push(rec);
            write_ckpts(&state, &mut meta, improved)?;
            if let Some(dir) = io.run_dir {
                append_log(&dir.join(LOG_FILE), &pending)?;
                pending.clear();
            }
        }
    }
    if state.best_f1.is_none() {
        // No evaluation happened: the final parameters are the result.
        state.best = state.params.clone();
        state.best_step = state.step;
    }
    if max > 0 {
        write_ckpts(&state, &mut meta, state.best_f1.is_none())?;
    }
    if let Some(dir) = io.run_dir {
        append_log(&dir.join(LOG_FILE), &pending)?;
    }
    meta.step = state.step;
    Ok(TrainOutcome {
        best: state.best,
        best_f1: state.best_f1,
        best_step: state.best_step,
        steps: state.step,
        meta,
        log,
    })
}
