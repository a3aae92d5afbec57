//! Experiment plumbing shared by the command line and the acceptance suite:
//! configuration files, system definitions, run evaluation and the
//! supervision-fraction sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, generate_judgments, Corpus, CorpusConfig, CorpusItem, Judgments, Split};
use crate::error::{Error, Result};
use crate::eval::{ensemble, evaluate, run_heads, score_matrix, Aggregates, EvalOptions, Head, MetricReport, ScoreMatrix};
use crate::losses::LossWeights;
use crate::model::{SpeechModel, SpeechModelConfig};
use crate::numerics::{Precision, Real};
use crate::tagger::{train_tagger, Tagger, TaggerConfig};
use crate::training::{train, CheckpointMeta, EvalEvent, RunIo, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgmentConfig {
    pub num_annotators: u8,
    pub annotator_noise: f64,
    pub seed: u64,
}

impl Default for JudgmentConfig {
    fn default() -> Self {
        Self {
            num_annotators: 5,
            annotator_noise: 0.1,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    TextualBaseline,
    VisualBaseline,
    Mtl,
}

impl System {
    pub const ALL: [System; 3] = [System::TextualBaseline, System::VisualBaseline, System::Mtl];

    pub fn as_str(self) -> &'static str {
        match self {
            System::TextualBaseline => "textual-baseline",
            System::VisualBaseline => "visual-baseline",
            System::Mtl => "mtl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|sys| sys.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown system {s:?} (textual-baseline, visual-baseline, mtl)")))
    }

    /// Training configuration for this system at a transcript fraction. The
    /// visual baseline ignores the fraction: it never sees transcripts.
    pub fn train_config(self, base: &TrainConfig, fraction: f64, seed: u64) -> TrainConfig {
        let (weights, set_c_fraction) = match self {
            System::TextualBaseline => (
                LossWeights {
                    alpha_vis: 0.0,
                    alpha_bow: 1.0,
                },
                fraction,
            ),
            System::VisualBaseline => (
                LossWeights {
                    alpha_vis: 1.0,
                    alpha_bow: 0.0,
                },
                0.0,
            ),
            System::Mtl => (base.weights, fraction),
        };
        TrainConfig {
            weights,
            set_c_fraction,
            seed,
            ..base.clone()
        }
    }

    /// Report rows this system contributes, with the head each is scored on.
    pub fn rows(self) -> &'static [(&'static str, Head)] {
        match self {
            System::TextualBaseline => &[("textual-baseline", Head::Bow)],
            System::VisualBaseline => &[("visual-baseline", Head::Vis)],
            System::Mtl => &[
                ("mtl-textSup", Head::Bow),
                ("mtl-visSup", Head::Vis),
                ("mtl-ensemble", Head::Ensemble),
            ],
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub systems: Vec<System>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.01, 0.05, 0.25, 1.0],
            seeds: vec![1, 2, 3, 4, 5],
            systems: System::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub tagger: TaggerConfig,
    pub model: SpeechModelConfig,
    pub train: TrainConfig,
    pub judgments: JudgmentConfig,
    pub eval: EvalOptions,
    pub sweep: SweepConfig,
    /// Output root; falls back to the environment or `runs`.
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML, applies `key.path=value` overrides (values in TOML
    /// syntax, bare words taken as strings) and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.tagger.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.judgments.num_annotators == 0 {
            return Err(Error::Config("judgments.num_annotators must be ≥ 1".into()));
        }
        if !(self.judgments.annotator_noise >= 0.0) {
            return Err(Error::Config("judgments.annotator_noise must be non-negative".into()));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be ≥ 1".into()));
        }
        if let Some(f) = self.sweep.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("sweep.fractions: {f} outside (0, 1]")));
        }
        if self.sweep.fractions.is_empty() {
            return Err(Error::Config("sweep.fractions must not be empty".into()));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds needs at least one seed".into()));
        }
        if self.sweep.systems.is_empty() {
            return Err(Error::Config("sweep.systems must not be empty".into()));
        }
        Ok(())
    }

    /// Tag vocabulary: the most frequent content words of the tagger split.
    pub fn tag_vocab(&self, corpus: &Corpus) -> Vec<usize> {
        corpus.top_content_words(Split::TaggerTrain, self.tagger.n_vis)
    }

    pub fn bow_vocab(&self, corpus: &Corpus) -> Vec<usize> {
        corpus.top_content_words(Split::TaggerTrain, self.model.n_bow)
    }

    /// Query words: keywords shared by both heads.
    pub fn queries(&self, corpus: &Corpus) -> Vec<usize> {
        corpus.top_content_words(Split::TaggerTrain, self.tagger.n_vis.min(self.model.n_bow))
    }

    pub fn make_judgments(&self, corpus: &Corpus) -> Result<Judgments> {
        let ontology = corpus
            .ontology
            .as_ref()
            .ok_or_else(|| Error::Config("judgment simulation needs a synthetic corpus with its ontology".into()))?;
        generate_judgments(
            ontology,
            &corpus.split(Split::Test),
            &self.queries(corpus),
            self.judgments.num_annotators,
            self.judgments.annotator_noise,
            derive_seed(self.judgments.seed, 50),
        )
    }

    pub fn fit_tagger(&self, corpus: &Corpus) -> Result<Tagger> {
        let (tagger, _) = train_tagger(&corpus.split(Split::TaggerTrain), self.tag_vocab(corpus), &self.tagger)?;
        Ok(tagger)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path}: {k} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Items of `corpus` in the order of the judged utterances.
pub fn judged_items<'a>(corpus: &'a Corpus, judgments: &Judgments) -> Result<Vec<&'a CorpusItem>> {
    let by_id: BTreeMap<u32, &CorpusItem> = corpus.items.iter().map(|i| (i.id, i)).collect();
    judgments
        .utterances
        .iter()
        .map(|u| {
            by_id
                .get(u)
                .copied()
                .ok_or_else(|| Error::Alignment(format!("judged utterance {u} is not in the corpus")))
        })
        .collect()
}

/// Score matrices for the heads a checkpoint trained, ensemble included when
/// both heads were trained. Queries outside a head's vocabulary are dropped.
pub fn head_matrices<F: Real>(
    model: &SpeechModel<F>,
    meta: &CheckpointMeta,
    items: &[&CorpusItem],
    queries: &[usize],
) -> Result<Vec<ScoreMatrix>> {
    let outputs = run_heads(model, items)?;
    let mut out = Vec::new();
    let mut vis = None;
    let mut bow = None;
    if meta.trained_heads.contains(&Head::Vis) {
        let q: Vec<usize> = queries.iter().copied().filter(|q| meta.vis_vocab.contains(q)).collect();
        let m = score_matrix(&outputs, Head::Vis, &meta.vis_vocab, &q)?;
        out.push(m.clone());
        vis = Some(m);
    }
    if meta.trained_heads.contains(&Head::Bow) {
        let q: Vec<usize> = queries.iter().copied().filter(|q| meta.bow_vocab.contains(q)).collect();
        let m = score_matrix(&outputs, Head::Bow, &meta.bow_vocab, &q)?;
        out.push(m.clone());
        bow = Some(m);
    }
    if let (Some(v), Some(b)) = (&vis, &bow) {
        out.push(ensemble(v, b)?);
    }
    Ok(out)
}

/// Metric reports for every head in [`head_matrices`].
pub fn evaluate_model<F: Real>(
    model: &SpeechModel<F>,
    meta: &CheckpointMeta,
    corpus: &Corpus,
    judgments: &Judgments,
    options: &EvalOptions,
) -> Result<Vec<MetricReport>> {
    let items = judged_items(corpus, judgments)?;
    head_matrices(model, meta, &items, &judgments.queries)?
        .iter()
        .map(|m| evaluate(m, judgments, options))
        .collect()
}

/// Utterances scoring above `threshold` for one query row, best first, at
/// most `top_k` of them.
pub fn retrieve(matrix: &ScoreMatrix, query: usize, threshold: f64, top_k: usize) -> Result<Vec<(u32, f64)>> {
    let qi = matrix
        .query_index(query)
        .ok_or_else(|| Error::Vocabulary(vec![format!("#{query}")]))?;
    let row = matrix.row(qi);
    let order = crate::eval::ranking(row, &matrix.utterances);
    Ok(order
        .into_iter()
        .filter(|&i| row[i] > threshold)
        .take(top_k)
        .map(|i| (matrix.utterances[i], row[i]))
        .collect())
}

/// Trains in the precision the configuration asks for.
pub fn train_any(
    corpus: &Corpus,
    tagger: &Tagger,
    bow_vocab: &[usize],
    model: &SpeechModelConfig,
    config: &TrainConfig,
    io: &RunIo<'_>,
) -> Result<AnyOutcome> {
    match config.precision {
        Precision::Single => {
            train::<f32>(corpus, tagger, bow_vocab, model, config, io, &mut |_: &EvalEvent<'_, f32>| {}).map(AnyOutcome::Single)
        }
        Precision::Double => {
            train::<f64>(corpus, tagger, bow_vocab, model, config, io, &mut |_: &EvalEvent<'_, f64>| {}).map(AnyOutcome::Double)
        }
    }
}

#[derive(Debug, Clone)]
pub enum AnyOutcome {
    Single(TrainOutcome<f32>),
    Double(TrainOutcome<f64>),
}

impl AnyOutcome {
    pub fn meta(&self) -> &CheckpointMeta {
        match self {
            AnyOutcome::Single(o) => &o.meta,
            AnyOutcome::Double(o) => &o.meta,
        }
    }

    pub fn evaluate(&self, corpus: &Corpus, judgments: &Judgments, options: &EvalOptions) -> Result<Vec<MetricReport>> {
        match self {
            AnyOutcome::Single(o) => evaluate_model(&o.best.model, &o.meta, corpus, judgments, options),
            AnyOutcome::Double(o) => evaluate_model(&o.best.model, &o.meta, corpus, judgments, options),
        }
    }
}

/// Shared inputs of every sweep cell.
pub struct SweepInputs<'a> {
    pub config: &'a ExperimentConfig,
    pub corpus: &'a Corpus,
    pub tagger: &'a Tagger,
    pub judgments: &'a Judgments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub system: System,
    /// `None` for the visual baseline, which does not depend on the fraction.
    pub fraction: Option<f64>,
    pub seed: u64,
    pub steps: u64,
    pub best_step: u64,
    pub best_f1: Option<f64>,
    pub rows: Vec<(String, Aggregates)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub system: String,
    pub aggregate: Aggregates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub fraction: f64,
    pub system: String,
    pub n: usize,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub spearman_mean: f64,
    pub spearman_std: f64,
    pub p_at_k_mean: f64,
    pub p_at_n_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub system: System,
    pub fraction: Option<f64>,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<CellFailure>,
}

impl SweepReport {
    pub fn summary_row(&self, system: &str, fraction: f64) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.system == system && r.fraction == fraction)
    }

    pub fn row(&self, system: &str, fraction: f64, seed: u64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.system == system && r.fraction == fraction && r.seed == seed)
    }

    /// Mean ± std table of one metric (`ap` or `spearman`) per fraction and system.
    pub fn curve_tsv(&self, metric: &str) -> String {
        let mut out = String::from("fraction\tsystem\tn\tmean\tstd\n");
        for r in &self.summary {
            let (m, s) = if metric == "ap" {
                (r.ap_mean, r.ap_std)
            } else {
                (r.spearman_mean, r.spearman_std)
            };
            out.push_str(&format!("{}\t{}\t{}\t{m:.6}\t{s:.6}\n", r.fraction, r.system, r.n));
        }
        out
    }

    pub fn rows_tsv(&self) -> String {
        let mut out = String::from("fraction\tseed\tsystem\tp_at_k\tp_at_n\tap\tspearman\n");
        for r in &self.rows {
            let a = &r.aggregate;
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.fraction, r.seed, r.system, a.p_at_k, a.p_at_n, a.ap, a.spearman
            ));
        }
        out
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const DONE_FILE: &str = "done.json";

pub fn cell_dir(root: &Path, system: System, fraction: Option<f64>, seed: u64) -> PathBuf {
    let mut dir = root.join(system.as_str());
    if let Some(f) = fraction {
        dir = dir.join(format!("f{f}"));
    }
    dir.join(format!("s{seed}"))
}

/// Trains and evaluates one cell, or loads its result if a done-marker exists.
pub fn run_cell(inputs: &SweepInputs<'_>, system: System, fraction: Option<f64>, seed: u64, root: Option<&Path>) -> Result<CellResult> {
    let dir = root.map(|r| cell_dir(r, system, fraction, seed));
    if let Some(d) = &dir {
        let done = d.join(DONE_FILE);
        if done.exists() {
            let text = std::fs::read_to_string(&done).map_err(|e| Error::io(&done, e))?;
            return Ok(serde_json::from_str(&text)?);
        }
    }
    let cfg = inputs.config;
    let train_cfg = system.train_config(&cfg.train, fraction.unwrap_or(0.0), seed);
    let io = RunIo {
        run_dir: dir.as_deref(),
        resume: false,
    };
    let outcome = train_any(
        inputs.corpus,
        inputs.tagger,
        &cfg.bow_vocab(inputs.corpus),
        &cfg.model,
        &train_cfg,
        &io,
    )?;
    let reports = outcome.evaluate(inputs.corpus, inputs.judgments, &cfg.eval)?;
    let mut rows = Vec::new();
    for &(name, head) in system.rows() {
        let report = reports
            .iter()
            .find(|r| r.head == head)
            .ok_or_else(|| Error::Evaluation(format!("{system} produced no {head} report")))?;
        rows.push((name.to_string(), report.aggregate.clone()));
    }
    let (steps, best_step, best_f1) = match &outcome {
        AnyOutcome::Single(o) => (o.steps, o.best_step, o.best_f1),
        AnyOutcome::Double(o) => (o.steps, o.best_step, o.best_f1),
    };
    let result = CellResult {
        system,
        fraction,
        seed,
        steps,
        best_step,
        best_f1,
        rows,
    };
    if let Some(d) = &dir {
        for r in &reports {
            crate::eval::save_report_json(r, &d.join(format!("report_{}.json", r.head)))?;
        }
        let done = d.join(DONE_FILE);
        std::fs::write(&done, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&done, e))?;
    }
    Ok(result)
}

/// Every (system, fraction, seed) cell in a fixed order. The visual baseline
/// is trained once per seed and its rows repeated for each fraction. Failed
/// cells are recorded and the sweep continues.
pub fn run_sweep(inputs: &SweepInputs<'_>, root: Option<&Path>, progress: &mut dyn FnMut(&str)) -> SweepReport {
    let sweep = &inputs.config.sweep;
    let mut report = SweepReport::default();
    let mut systems = sweep.systems.clone();
    systems.sort();
    systems.dedup();
    for &seed in &sweep.seeds {
        for &system in &systems {
            let fractions: Vec<Option<f64>> = if system == System::VisualBaseline {
                vec![None]
            } else {
                sweep.fractions.iter().map(|&f| Some(f)).collect()
            };
            for fraction in fractions {
                let label = match fraction {
                    Some(f) => format!("{system} fraction={f} seed={seed}"),
                    None => format!("{system} seed={seed}"),
                };
                match run_cell(inputs, system, fraction, seed, root) {
                    Ok(cell) => {
                        progress(&format!("done {label} (steps {}, best F1 {:?})", cell.steps, cell.best_f1));
                        let targets: Vec<f64> = match fraction {
                            Some(f) => vec![f],
                            None => sweep.fractions.clone(),
                        };
                        for f in targets {
                            for (name, agg) in &cell.rows {
                                report.rows.push(SweepRow {
                                    fraction: f,
                                    seed,
                                    system: name.clone(),
                                    aggregate: agg.clone(),
                                });
                            }
                        }
                    }
                    Err(e) => {
                        progress(&format!("FAILED {label}: {e}"));
                        report.failures.push(CellFailure {
                            system,
                            fraction,
                            seed,
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    report.rows.sort_by(|a, b| {
        a.fraction
            .total_cmp(&b.fraction)
            .then(a.system.cmp(&b.system))
            .then(a.seed.cmp(&b.seed))
    });
    report.summary = summarize(&report.rows);
    report
}

fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((f64, String), Vec<&Aggregates>)> = Vec::new();
    for r in rows {
        match groups
            .iter_mut()
            .find(|((f, s), _)| *f == r.fraction && *s == r.system)
        {
            Some((_, v)) => v.push(&r.aggregate),
            None => groups.push(((r.fraction, r.system.clone()), vec![&r.aggregate])),
        }
    }
    groups
        .into_iter()
        .map(|((fraction, system), aggs)| {
            let col = |f: fn(&Aggregates) -> f64| aggs.iter().map(|a| f(a)).collect::<Vec<_>>();
            let (ap_mean, ap_std) = mean_std(&col(|a| a.ap));
            let (spearman_mean, spearman_std) = mean_std(&col(|a| a.spearman));
            SummaryRow {
                fraction,
                system,
                n: aggs.len(),
                ap_mean,
                ap_std,
                spearman_mean,
                spearman_std,
                p_at_k_mean: mean_std(&col(|a| a.p_at_k)).0,
                p_at_n_mean: mean_std(&col(|a| a.p_at_n)).0,
            }
        })
        .collect()
}

/// Writes `sweep_report.json`, `sweep_rows.tsv`, `curve_ap.tsv` and `curve_spearman.tsv`.
pub fn save_sweep_report(report: &SweepReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("sweep_report.json", serde_json::to_string_pretty(report)?),
        ("sweep_rows.tsv", report.rows_tsv()),
        ("curve_ap.tsv", report.curve_tsv("ap")),
        ("curve_spearman.tsv", report.curve_tsv("spearman")),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Prepares corpus, tagger and judgments from a configuration.
pub fn prepare(config: &ExperimentConfig) -> Result<(Corpus, Tagger, Judgments)> {
    let corpus = crate::corpus::generate_corpus(&config.corpus)?;
    let tagger = config.fit_tagger(&corpus)?;
    let judgments = config.make_judgments(&corpus)?;
    Ok((corpus, tagger, judgments))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_parse_types() {
        let cfg = ExperimentConfig::from_toml(
            "[train]\nmax_steps = 10\n",
            &[
                "train.max_steps=25".into(),
                "sweep.fractions=[0.5, 1.0]".into(),
                "train.precision=double".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.max_steps, 25);
        assert_eq!(cfg.sweep.fractions, vec![0.5, 1.0]);
        assert_eq!(cfg.train.precision, Precision::Double);
    }

    #[test]
    fn invalid_fraction_names_field() {
        let err = ExperimentConfig::from_toml("", &["sweep.fractions=[1.5]".into()]).unwrap_err();
        assert!(err.to_string().contains("sweep.fractions"), "{err}");
        let err = ExperimentConfig::from_toml("", &["train.set_c_fraction=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("set_c_fraction"), "{err}");
        assert!(ExperimentConfig::from_toml("[train]\nbogus = 1\n", &[]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn system_mapping() {
        let base = TrainConfig::default();
        let v = System::VisualBaseline.train_config(&base, 0.25, 4);
        assert_eq!((v.weights.alpha_vis, v.weights.alpha_bow, v.set_c_fraction), (1.0, 0.0, 0.0));
        assert_eq!(v.weights.rep(), 0.0);
        let t = System::TextualBaseline.train_config(&base, 0.25, 4);
        assert_eq!((t.weights.alpha_vis, t.weights.rep(), t.set_c_fraction), (0.0, 0.0, 0.25));
        let m = System::Mtl.train_config(&base, 0.05, 4);
        assert_eq!((m.weights, m.seed), (base.weights, 4));
        assert!(System::parse("nope").is_err());
    }

    #[test]
    fn std_is_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }
}
