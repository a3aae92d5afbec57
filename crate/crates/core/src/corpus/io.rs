//! Corpus directory layout:
//!
//! - `manifest.tsv`: a `#vgkw-manifest` header line with format version and
//!   matrix dimensions, a column header, then one record per item
//!   (`id, image_id, split, transcript, frames_offset, length, image_offset, truncated`).
//!   Offsets are byte offsets into the blob payload; `-` marks a missing transcript.
//! - `features.bin`: the shared binary container holding little-endian `f32`
//!   frame matrices (`t_max × d_feat`) and image vectors (`d_img`).
//! - `vocab.tsv` (optional): `word<TAB>stopword` rows. Without it the
//!   vocabulary is built from transcripts in order of first appearance, with
//!   stopword flags taken from an optional `stopwords.txt`.
//! - `ontology.json` (optional): the generating ontology of a synthetic corpus.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use super::{Corpus, CorpusItem, Judgments, Ontology, Split, UtteranceFeatures, Vocabulary};
use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const BLOB_FILE: &str = "features.bin";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const STOPWORDS_FILE: &str = "stopwords.txt";
pub const ONTOLOGY_FILE: &str = "ontology.json";

pub const MANIFEST_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 8] = b"VGKWFEAT";
pub const BLOB_VERSION: u32 = 1;

const COLUMNS: &str = "id\timage_id\tsplit\ttranscript\tframes_offset\tlength\timage_offset\ttruncated";

pub(crate) fn encode(corpus: &Corpus) -> (String, Vec<u8>) {
    let mut blob = Writer::new();
    let mut manifest = format!(
        "#vgkw-manifest\tversion={MANIFEST_VERSION}\tblob={BLOB_FILE}\td_feat={}\tt_max={}\td_img={}\tframe_period={}\n{COLUMNS}\n",
        corpus.d_feat, corpus.t_max, corpus.d_img, corpus.frame_period
    );
    for item in &corpus.items {
        let frames_offset = blob.len();
        blob.f32s(&item.utterance.frames);
        let image_offset = blob.len();
        blob.f32s(&item.image);
        let transcript = match &item.transcript {
            Some(t) => t.iter().map(|&w| corpus.vocab.word(w)).collect::<Vec<_>>().join(" "),
            None => "-".to_string(),
        };
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            item.id,
            item.image_id,
            item.split.as_str(),
            transcript,
            frames_offset,
            item.utterance.length,
            image_offset,
            u8::from(item.truncated)
        ));
    }
    (manifest, blob.seal(BLOB_MAGIC, BLOB_VERSION))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = encode(corpus);
    write(&dir.join(BLOB_FILE), &blob)?;
    write(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    let mut vocab = String::from("word\tstopword\n");
    for (w, &s) in corpus.vocab.words().iter().zip(corpus.vocab.stopwords()) {
        vocab.push_str(&format!("{w}\t{}\n", u8::from(s)));
    }
    write(&dir.join(VOCAB_FILE), vocab.as_bytes())?;
    if let Some(ontology) = &corpus.ontology {
        write(&dir.join(ONTOLOGY_FILE), &serde_json::to_vec(ontology)?)?;
    }
    Ok(())
}

struct Header {
    blob: String,
    d_feat: usize,
    t_max: usize,
    d_img: usize,
    frame_period: f32,
}

fn parse_header(line: &str) -> Result<Header> {
    let mut fields = line.split('\t');
    if fields.next() != Some("#vgkw-manifest") {
        return Err(Error::Format("manifest does not start with #vgkw-manifest".into()));
    }
    let kv: HashMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("manifest header lacks `{k}`")));
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest header `{k}` is not an integer")))
    };
    let version: u32 = get("version")?
        .parse()
        .map_err(|_| Error::Format("manifest version is not an integer".into()))?;
    if version != MANIFEST_VERSION {
        return Err(Error::Version {
            expected: MANIFEST_VERSION,
            found: version,
        });
    }
    Ok(Header {
        blob: kv.get("blob").unwrap_or(&BLOB_FILE).to_string(),
        d_feat: num("d_feat")?,
        t_max: num("t_max")?,
        d_img: num("d_img")?,
        frame_period: get("frame_period")?
            .parse()
            .map_err(|_| Error::Format("manifest frame_period is not a number".into()))?,
    })
}

struct Record<'a> {
    id: u32,
    image_id: u32,
    split: Split,
    transcript: Option<Vec<&'a str>>,
    frames_offset: usize,
    length: usize,
    image_offset: usize,
    truncated: bool,
}

fn parse_record(line: &str, lineno: usize) -> Result<Record<'_>> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 8 {
        return Err(Error::Format(format!("manifest line {lineno}: expected 8 columns, found {}", cols.len())));
    }
    let bad = |what: &str| Error::Format(format!("manifest line {lineno}: bad {what}"));
    let transcript = match cols[3] {
        "-" => None,
        t => Some(t.split_whitespace().collect()),
    };
    Ok(Record {
        id: cols[0].parse().map_err(|_| bad("id"))?,
        image_id: cols[1].parse().map_err(|_| bad("image_id"))?,
        split: Split::parse(cols[2])?,
        transcript,
        frames_offset: cols[4].parse().map_err(|_| bad("frames_offset"))?,
        length: cols[5].parse().map_err(|_| bad("length"))?,
        image_offset: cols[6].parse().map_err(|_| bad("image_offset"))?,
        truncated: match cols[7] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("truncated flag")),
        },
    })
}

fn load_vocab(dir: &Path, records: &[Record<'_>]) -> Result<Vocabulary> {
    let path = dir.join(VOCAB_FILE);
    if path.exists() {
        let text = read_to_string(&path)?;
        let mut words = Vec::new();
        let mut stop = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let (w, s) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocab line {}: expected word<TAB>flag", n + 1)))?;
            words.push(w.to_string());
            stop.push(s == "1");
        }
        return Vocabulary::new(words, stop);
    }
    let stopwords: HashSet<String> = match fs::read_to_string(dir.join(STOPWORDS_FILE)) {
        Ok(text) => text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        Err(_) => HashSet::new(),
    };
    let mut seen = HashSet::new();
    let mut words = Vec::new();
    for r in records {
        for &w in r.transcript.iter().flatten() {
            if seen.insert(w) {
                words.push(w.to_string());
            }
        }
    }
    let stop = words.iter().map(|w| stopwords.contains(w)).collect();
    Vocabulary::new(words, stop)
}

/// Loads a corpus directory written by [`save_corpus`] or prepared externally
/// in the same manifest format.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_to_string(&dir.join(MANIFEST_FILE))?;
    let mut lines = manifest.lines().enumerate();
    let header = parse_header(lines.next().map(|(_, l)| l).unwrap_or(""))?;
    match lines.next() {
        Some((_, l)) if l == COLUMNS => {}
        _ => return Err(Error::Format("manifest column header missing or malformed".into())),
    }
    let records = lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| parse_record(l, n + 1))
        .collect::<Result<Vec<_>>>()?;

    let blob_path = dir.join(&header.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut reader = Reader::open(&blob, BLOB_MAGIC, BLOB_VERSION, "feature blob")?;

    let vocab = load_vocab(dir, &records)?;
    let frame_len = header.t_max * header.d_feat;
    let mut items = Vec::with_capacity(records.len());
    for r in &records {
        if r.length > header.t_max {
            return Err(Error::Format(format!("item {}: length {} exceeds t_max {}", r.id, r.length, header.t_max)));
        }
        reader.seek(r.frames_offset)?;
        let frames = reader.f32s(frame_len)?;
        reader.seek(r.image_offset)?;
        let image = reader.f32s(header.d_img)?;
        if image.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("image vector of item {}", r.id)));
        }
        let utterance = UtteranceFeatures {
            frames,
            t_max: header.t_max,
            d_feat: header.d_feat,
            length: r.length,
            frame_period: header.frame_period,
        };
        if !utterance.padding_is_zero() {
            return Err(Error::Format(format!("item {}: non-zero frames past length {}", r.id, r.length)));
        }
        let transcript = r.transcript.as_ref().map(|t| vocab.lookup_all(t)).transpose()?;
        items.push(CorpusItem {
            id: r.id,
            image_id: r.image_id,
            image,
            utterance,
            transcript,
            split: r.split,
            truncated: r.truncated,
        });
    }

    let ontology_path = dir.join(ONTOLOGY_FILE);
    let ontology: Option<Ontology> = if ontology_path.exists() {
        Some(serde_json::from_slice(&fs::read(&ontology_path).map_err(|e| Error::io(&ontology_path, e))?)?)
    } else {
        None
    };

    Ok(Corpus {
        vocab,
        items,
        ontology,
        d_feat: header.d_feat,
        t_max: header.t_max,
        d_img: header.d_img,
        frame_period: header.frame_period,
    })
}

pub fn save_judgments(judgments: &Judgments, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut out = format!("# annotators={}\nquery\tutterance\tvotes\n", judgments.num_annotators);
    for (qi, &q) in judgments.queries.iter().enumerate() {
        for (ui, &u) in judgments.utterances.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\n", vocab.word(q), u, judgments.votes_row(qi)[ui]));
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write(path, out.as_bytes())
}

pub fn load_judgments(path: &Path, vocab: &Vocabulary) -> Result<Judgments> {
    let text = read_to_string(path)?;
    let mut annotators: u8 = 5;
    let mut queries: Vec<usize> = Vec::new();
    let mut utterances: Vec<u32> = Vec::new();
    let mut q_index = HashMap::new();
    let mut u_index = HashMap::new();
    let mut cells: Vec<(usize, usize, u8)> = Vec::new();
    let mut unknown = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("# annotators=") {
            annotators = rest
                .trim()
                .parse()
                .map_err(|_| Error::Format("bad annotator count".into()))?;
            continue;
        }
        if line.starts_with('#') || line.is_empty() || line == "query\tutterance\tvotes" {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Format(format!("judgments line {}: expected 3 columns", n + 1)));
        }
        let Some(q) = vocab.id(cols[0]) else {
            unknown.push(cols[0].to_string());
            continue;
        };
        let u: u32 = cols[1]
            .parse()
            .map_err(|_| Error::Format(format!("judgments line {}: bad utterance id", n + 1)))?;
        let v: u8 = cols[2]
            .parse()
            .map_err(|_| Error::Format(format!("judgments line {}: bad vote count", n + 1)))?;
        let qi = *q_index.entry(q).or_insert_with(|| {
            queries.push(q);
            queries.len() - 1
        });
        let ui = *u_index.entry(u).or_insert_with(|| {
            utterances.push(u);
            utterances.len() - 1
        });
        cells.push((qi, ui, v));
    }
    if !unknown.is_empty() {
        unknown.dedup();
        return Err(Error::Vocabulary(unknown));
    }
    let m = utterances.len();
    if cells.len() != queries.len() * m {
        return Err(Error::Format(format!(
            "judgments table has {} rows for {} queries × {m} utterances",
            cells.len(),
            queries.len()
        )));
    }
    let mut votes = vec![0u8; queries.len() * m];
    let mut filled = vec![false; votes.len()];
    for (qi, ui, v) in cells {
        if std::mem::replace(&mut filled[qi * m + ui], true) {
            return Err(Error::Format("duplicate (query, utterance) row in judgments".into()));
        }
        votes[qi * m + ui] = v;
    }
    Judgments::from_votes(queries, utterances, votes, annotators)
}
