//! Keyword scoring of utterances, head ensembling and the retrieval metric
//! suite (P@10, P@N, average precision, Spearman's ρ).

mod metrics;

use std::collections::HashMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{Reader, Writer};
use crate::corpus::{CorpusItem, Judgments, Vocabulary};
use crate::error::{Error, Result};
use crate::model::SpeechModel;
use crate::numerics::Real;

pub use metrics::{
    average_precision, average_ranks, count_ties, f1_score, precision_at_k, precision_at_n, ranking, recall_at_k,
    spearman_rho, Counts,
};

pub const SCORES_MAGIC: &[u8; 8] = b"VGKWSCOR";
pub const SCORES_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Vis,
    Bow,
    Ensemble,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Vis => "vis",
            Head::Bow => "bow",
            Head::Ensemble => "ensemble",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vis" => Ok(Head::Vis),
            "bow" => Ok(Head::Bow),
            "ensemble" => Ok(Head::Ensemble),
            other => Err(Error::Config(format!("unknown head {other:?} (vis, bow, ensemble)"))),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Keyword probabilities for `Q` queries over `M` utterances, row-major by query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub queries: Vec<usize>,
    pub utterances: Vec<u32>,
    pub scores: Vec<f64>,
    pub head: Head,
}

impl ScoreMatrix {
    pub fn new(queries: Vec<usize>, utterances: Vec<u32>, scores: Vec<f64>, head: Head) -> Result<Self> {
        if scores.len() != queries.len() * utterances.len() {
            return Err(Error::dim(
                "score_matrix",
                "scores",
                queries.len() * utterances.len(),
                scores.len(),
            ));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Evaluation(format!("score {s} outside [0, 1]")));
        }
        let mut q = queries.clone();
        q.sort_unstable();
        q.dedup();
        let mut u = utterances.clone();
        u.sort_unstable();
        u.dedup();
        if q.len() != queries.len() || u.len() != utterances.len() {
            return Err(Error::Alignment("duplicate query or utterance ids".into()));
        }
        Ok(Self {
            queries,
            utterances,
            scores,
            head,
        })
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let m = self.utterances.len();
        &self.scores[q * m..(q + 1) * m]
    }

    pub fn query_index(&self, word: usize) -> Option<usize> {
        self.queries.iter().position(|&q| q == word)
    }
}

/// Both heads' sigmoid outputs for a list of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub utterances: Vec<u32>,
    pub vis: Vec<Vec<f64>>,
    pub bow: Vec<Vec<f64>>,
}

pub fn run_heads<F: Real>(model: &SpeechModel<F>, items: &[&CorpusItem]) -> Result<HeadOutputs> {
    let mut out = HeadOutputs {
        utterances: Vec::with_capacity(items.len()),
        vis: Vec::with_capacity(items.len()),
        bow: Vec::with_capacity(items.len()),
    };
    for item in items {
        let f = model.forward(&item.utterance)?;
        out.utterances.push(item.id);
        out.vis.push(f.y_vis.iter().map(|x| x.as_f64()).collect());
        out.bow.push(f.y_bow.iter().map(|x| x.as_f64()).collect());
    }
    Ok(out)
}

fn vocab_positions(head_vocab: &[usize], queries: &[usize]) -> Result<Vec<usize>> {
    let index: HashMap<usize, usize> = head_vocab.iter().enumerate().map(|(i, &w)| (w, i)).collect();
    let mut missing = Vec::new();
    let pos: Vec<usize> = queries
        .iter()
        .filter_map(|q| {
            let p = index.get(q).copied();
            if p.is_none() {
                missing.push(format!("#{q}"));
            }
            p
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::Vocabulary(missing));
    }
    Ok(pos)
}

/// Score matrix for `head` (vis or bow) whose output units are `head_vocab`.
pub fn score_matrix(outputs: &HeadOutputs, head: Head, head_vocab: &[usize], queries: &[usize]) -> Result<ScoreMatrix> {
    let rows = match head {
        Head::Vis => &outputs.vis,
        Head::Bow => &outputs.bow,
        Head::Ensemble => return Err(Error::Config("ensemble scores come from ensemble()".into())),
    };
    let pos = vocab_positions(head_vocab, queries)?;
    let mut scores = Vec::with_capacity(queries.len() * rows.len());
    for &p in &pos {
        for r in rows {
            let y = *r.get(p).ok_or_else(|| Error::dim("score_utterances", "head output", p + 1, r.len()))?;
            scores.push(y);
        }
    }
    ScoreMatrix::new(queries.to_vec(), outputs.utterances.clone(), scores, head)
}

/// `score(q, u)` = the head's probability for keyword `q` on utterance `u`.
pub fn score_utterances<F: Real>(
    model: &SpeechModel<F>,
    head: Head,
    head_vocab: &[usize],
    items: &[&CorpusItem],
    queries: &[usize],
) -> Result<ScoreMatrix> {
    vocab_positions(head_vocab, queries)?;
    score_matrix(&run_heads(model, items)?, head, head_vocab, queries)
}

/// Elementwise mean of two score matrices over their shared queries (in the
/// order of `vis`). Utterance lists must agree exactly.
pub fn ensemble(vis: &ScoreMatrix, bow: &ScoreMatrix) -> Result<ScoreMatrix> {
    if vis.utterances != bow.utterances {
        return Err(Error::Alignment("score matrices cover different utterances".into()));
    }
    let shared: Vec<(usize, usize)> = vis
        .queries
        .iter()
        .enumerate()
        .filter_map(|(i, &q)| bow.query_index(q).map(|j| (i, j)))
        .collect();
    if shared.is_empty() {
        return Err(Error::Alignment("heads share no query words".into()));
    }
    let mut scores = Vec::with_capacity(shared.len() * vis.utterances.len());
    for &(i, j) in &shared {
        for (&a, &b) in vis.row(i).iter().zip(bow.row(j)) {
            scores.push((a + b) / 2.0);
        }
    }
    ScoreMatrix::new(
        shared.iter().map(|&(i, _)| vis.queries[i]).collect(),
        vis.utterances.clone(),
        scores,
        Head::Ensemble,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub k: usize,
    /// Also report AP over all (query, utterance) pairs pooled into one ranking.
    pub pooled_ap: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { k: 10, pooled_ap: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: usize,
    pub positives: usize,
    pub p_at_k: f64,
    pub p_at_n: Option<f64>,
    pub ap: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Mean over queries with at least one positive.
    pub p_at_k: f64,
    pub p_at_n: f64,
    /// Macro average: mean of per-query AP.
    pub ap: f64,
    pub spearman: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_pooled: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    /// Queries without positives (excluded from P@k, P@N and AP means).
    pub no_positives: Vec<usize>,
    /// Queries whose Spearman's ρ is undefined (constant votes or scores).
    pub spearman: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TieCounts {
    /// Adjacent equal-score pairs across all query rankings.
    pub score: usize,
    /// Utterances sharing a vote count with another, summed over queries.
    pub votes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub head: Head,
    pub k: usize,
    pub num_queries: usize,
    pub num_utterances: usize,
    pub aggregate: Aggregates,
    pub skipped: Skipped,
    pub ties: TieCounts,
    pub queries: Vec<QueryMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// All metrics per query plus their means. Judgments are aligned to the
/// matrix by query and utterance id.
pub fn evaluate(matrix: &ScoreMatrix, judgments: &Judgments, options: &EvalOptions) -> Result<MetricReport> {
    let m = matrix.utterances.len();
    if judgments.utterances.len() != m {
        return Err(Error::Alignment(format!(
            "{m} scored utterances but {} judged",
            judgments.utterances.len()
        )));
    }
    let u_index: HashMap<u32, usize> = judgments.utterances.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let u_map: Vec<usize> = matrix
        .utterances
        .iter()
        .map(|u| {
            u_index
                .get(u)
                .copied()
                .ok_or_else(|| Error::Alignment(format!("utterance {u} has no judgments")))
        })
        .collect::<Result<_>>()?;
    if m < options.k {
        return Err(Error::Evaluation(format!(
            "precision at {} needs at least {} utterances, got {m}",
            options.k, options.k
        )));
    }
    let ids = &matrix.utterances;
    let mut rows = Vec::with_capacity(matrix.queries.len());
    let mut skipped = Skipped::default();
    let mut ties = TieCounts::default();
    let mut pooled: Vec<(f64, u32, usize, bool)> = Vec::new();
    for (qi, &q) in matrix.queries.iter().enumerate() {
        let jq = judgments
            .queries
            .iter()
            .position(|&x| x == q)
            .ok_or_else(|| Error::Alignment(format!("query #{q} has no judgments")))?;
        let hard_row = judgments.hard_row(jq);
        let vote_row = judgments.votes_row(jq);
        let labels: Vec<bool> = u_map.iter().map(|&j| hard_row[j]).collect();
        let votes: Vec<u8> = u_map.iter().map(|&j| vote_row[j]).collect();
        let scores = matrix.row(qi);
        let positives = labels.iter().filter(|&&l| l).count();
        let order = ranking(scores, ids);
        ties.score += count_ties(scores, &order);
        let mut vote_hist = [0usize; 256];
        votes.iter().for_each(|&v| vote_hist[v as usize] += 1);
        ties.votes += vote_hist.iter().filter(|&&c| c > 1).sum::<usize>();

        let row = QueryMetrics {
            query: q,
            positives,
            p_at_k: precision_at_k(scores, &labels, ids, options.k)?,
            p_at_n: precision_at_n(scores, &labels, ids),
            ap: average_precision(scores, &labels, ids),
            spearman: spearman_rho(scores, &votes),
        };
        if positives == 0 {
            skipped.no_positives.push(q);
        }
        if row.spearman.is_none() {
            skipped.spearman.push(q);
        }
        if options.pooled_ap {
            pooled.extend(
                scores
                    .iter()
                    .zip(&labels)
                    .zip(ids)
                    .map(|((&s, &l), &u)| (s, u, qi, l)),
            );
        }
        rows.push(row);
    }
    let ap_pooled = if options.pooled_ap {
        pooled.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        metrics::ranked_ap(pooled.iter().map(|p| p.3))
    } else {
        None
    };
    let with_pos = || rows.iter().filter(|r| r.positives > 0);
    let aggregate = Aggregates {
        p_at_k: mean(with_pos().map(|r| r.p_at_k)),
        p_at_n: mean(rows.iter().filter_map(|r| r.p_at_n)),
        ap: mean(rows.iter().filter_map(|r| r.ap)),
        spearman: mean(rows.iter().filter_map(|r| r.spearman)),
        ap_pooled,
    };
    Ok(MetricReport {
        head: matrix.head,
        k: options.k,
        num_queries: rows.len(),
        num_utterances: m,
        aggregate,
        skipped,
        ties,
        queries: rows,
    })
}

/// Detection table at `threshold`: `pred[q][u] = score > threshold`.
pub fn detections(matrix: &ScoreMatrix, threshold: f64) -> Vec<Vec<bool>> {
    (0..matrix.queries.len())
        .map(|q| matrix.row(q).iter().map(|&s| s > threshold).collect())
        .collect()
}

/// Exact-match truth table: keyword occurs in the utterance transcript.
pub fn exact_truth(matrix: &ScoreMatrix, items: &[&CorpusItem]) -> Result<Vec<Vec<bool>>> {
    let by_id: HashMap<u32, &CorpusItem> = items.iter().map(|i| (i.id, *i)).collect();
    let cols: Vec<&CorpusItem> = matrix
        .utterances
        .iter()
        .map(|u| {
            by_id
                .get(u)
                .copied()
                .ok_or_else(|| Error::Alignment(format!("utterance {u} not among items")))
        })
        .collect::<Result<_>>()?;
    Ok(matrix
        .queries
        .iter()
        .map(|&q| cols.iter().map(|i| i.contains_word(q)).collect())
        .collect())
}

pub fn save_report_json(report: &MetricReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Tab-separated per-query rows followed by one `ALL` row of aggregates.
pub fn report_tsv(report: &MetricReport, vocab: Option<&Vocabulary>) -> String {
    let mut out = format!("query\tword\tpositives\tp_at_{}\tp_at_n\tap\tspearman\n", report.k);
    let word = |q: usize| vocab.map_or_else(|| format!("#{q}"), |v| v.word(q).to_string());
    for r in &report.queries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\n",
            r.query,
            word(r.query),
            r.positives,
            r.p_at_k,
            opt(r.p_at_n),
            opt(r.ap),
            opt(r.spearman)
        ));
    }
    let a = &report.aggregate;
    out.push_str(&format!(
        "ALL\t-\t-\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
        a.p_at_k, a.p_at_n, a.ap, a.spearman
    ));
    out
}

pub fn save_report_tsv(report: &MetricReport, vocab: Option<&Vocabulary>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(report_tsv(report, vocab).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn encode_scores(matrix: &ScoreMatrix) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(matrix.head.as_str());
    w.u64(matrix.queries.len() as u64);
    for &q in &matrix.queries {
        w.u64(q as u64);
    }
    w.u64(matrix.utterances.len() as u64);
    for &u in &matrix.utterances {
        w.u32(u);
    }
    w.f64s(&matrix.scores);
    w.seal(SCORES_MAGIC, SCORES_VERSION)
}

pub fn decode_scores(bytes: &[u8]) -> Result<ScoreMatrix> {
    let mut r = Reader::open(bytes, SCORES_MAGIC, SCORES_VERSION, "score matrix")?;
    let head = Head::parse(&r.str()?).map_err(|e| Error::Format(e.to_string()))?;
    let nq = r.u64()? as usize;
    let queries = (0..nq).map(|_| r.u64().map(|q| q as usize)).collect::<Result<Vec<_>>>()?;
    let nu = r.u64()? as usize;
    let utterances = (0..nu).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let scores = r.f64s(nq.saturating_mul(nu))?;
    if !r.at_end() {
        return Err(Error::Format("score matrix: trailing bytes".into()));
    }
    ScoreMatrix::new(queries, utterances, scores, head)
}
