//! Byte-level tokens, JSONL transcript ingestion, a synthetic corpus, and a
//! seeded batcher.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD_ID: usize = 256;
pub const BOS_ID: usize = 257;
pub const EOS_ID: usize = 258;
/// 256 byte values plus pad, bos and eos.
pub const VOCAB_SIZE: usize = 259;

/// `[BOS, bytes…]` truncated to `max_len` and padded with [`PAD_ID`].
pub fn tokenize_bytes(text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS_ID);
    ids.extend(text.bytes().map(usize::from));
    ids.truncate(max_len);
    ids.resize(max_len, PAD_ID);
    ids
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: u64,
    pub malformed_lines: u64,
    pub empty_documents: u64,
    pub bytes_read: u64,
    pub tokens: u64,
}

#[derive(Deserialize)]
struct Line {
    messages: Vec<Message>,
}

#[derive(Deserialize)]
struct Message {
    role: String,
    content: String,
}

/// Renders one JSONL line as `"role: content\n"` per message.
pub fn render_messages_line(line: &str) -> Option<String> {
    let parsed: Line = serde_json::from_str(line).ok()?;
    Some(
        parsed
            .messages
            .iter()
            .map(|m| format!("{}: {}\n", m.role, m.content))
            .collect(),
    )
}

/// Reads every document of a JSONL transcript file. Blank lines are ignored;
/// lines that do not parse are skipped and counted.
pub fn parse_messages_jsonl(path: &Path, stats: &mut CorpusStats) -> Result<Vec<String>> {
    let raw = fs::read(path)?;
    stats.bytes_read += raw.len() as u64;
    let text = String::from_utf8_lossy(&raw);
    let mut docs = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match render_messages_line(line) {
            Some(doc) => {
                stats.documents += 1;
                if doc.is_empty() {
                    stats.empty_documents += 1;
                }
                docs.push(doc);
            }
            None => {
                stats.malformed_lines += 1;
                log::debug!("skipping malformed line in {}", path.display());
            }
        }
    }
    Ok(docs)
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "ta", "vo", "shi", "pa", "dor", "el", "nu", "qi", "sa", "tor", "be", "yun",
];

/// Seeded pseudo-sentences drawn from a sparse first-order word chain, so
/// word bigrams repeat and the text is learnable.
pub fn synth_corpus(seed: u64, n_docs: usize, words_per_doc: (usize, usize)) -> Vec<String> {
    let mut r = rng::stream(seed, "synth_corpus");
    let words: Vec<String> = (0..48)
        .map(|_| (0..r.gen_range(1..=3)).map(|_| SYLLABLES[r.gen_range(0..SYLLABLES.len())]).collect())
        .collect();
    let successors: Vec<[usize; 3]> = (0..words.len())
        .map(|_| [r.gen_range(0..words.len()), r.gen_range(0..words.len()), r.gen_range(0..words.len())])
        .collect();
    let (lo, hi) = (words_per_doc.0.max(1), words_per_doc.1.max(words_per_doc.0.max(1)));
    (0..n_docs)
        .map(|_| {
            let len = r.gen_range(lo..=hi);
            let mut w = r.gen_range(0..words.len());
            let mut doc = String::new();
            for i in 0..len {
                doc.push_str(&words[w]);
                doc.push(if (i + 1) % 8 == 0 { '.' } else { ' ' });
                // Mostly the first successor, sometimes the others.
                let pick = match r.gen_range(0..10) {
                    0..=6 => 0,
                    7 | 8 => 1,
                    _ => 2,
                };
                w = successors[w][pick];
            }
            doc.trim_end().to_string()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum DataSource {
    Synth,
    Jsonl(PathBuf),
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "" => Err(Error::Config("empty data source".into())),
            "synth" => Ok(DataSource::Synth),
            p => Ok(DataSource::Jsonl(PathBuf::from(p))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Synth => f.write_str("synth"),
            DataSource::Jsonl(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Number of documents the synthetic source produces.
pub const SYNTH_DOCS: usize = 2000;

pub fn load_documents(source: &DataSource, seed: u64, stats: &mut CorpusStats) -> Result<Vec<String>> {
    match source {
        DataSource::Synth => {
            let docs = synth_corpus(seed, SYNTH_DOCS, (12, 40));
            stats.documents += docs.len() as u64;
            Ok(docs)
        }
        DataSource::Jsonl(path) => parse_messages_jsonl(path, stats),
    }
}

/// `batch × seq_len` ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Non-pad length of each row.
    pub lengths: Vec<usize>,
    pub pad_id: usize,
}

impl TokenBatch {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

/// Serves batches from a tokenized corpus in a seeded order. Rows are drawn
/// pass by pass; each pass is a fresh permutation keyed by the seed and the
/// pass index, so the stream is fully determined by `(seed, corpus)`.
#[derive(Clone, Debug)]
pub struct Batcher {
    rows: Vec<Vec<usize>>,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    cursor: usize,
    perm: Vec<usize>,
    pass: Option<usize>,
    pub stats: CorpusStats,
}

impl Batcher {
    /// Documents without content are dropped.
    pub fn new(documents: &[String], batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be at least 1".into()));
        }
        let rows: Vec<Vec<usize>> = documents
            .iter()
            .filter(|d| !d.is_empty())
            .map(|d| tokenize_bytes(d, seq_len))
            .collect();
        if rows.len() < batch_size {
            return Err(Error::Data(format!(
                "corpus has {} non-empty documents, fewer than one batch of {batch_size}",
                rows.len()
            )));
        }
        Ok(Self {
            rows,
            batch_size,
            seq_len,
            seed,
            cursor: 0,
            perm: Vec::new(),
            pass: None,
            stats: CorpusStats::default(),
        })
    }

    /// Full batches available before a pass is exhausted.
    pub fn batches_per_pass(&self) -> usize {
        self.rows.len() / self.batch_size
    }

    fn permutation(&self, pass: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.rows.len()).collect();
        perm.shuffle(&mut rng::stream(self.seed, &format!("batcher.pass{pass}")));
        perm
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        let per_pass = self.batches_per_pass() * self.batch_size;
        let pass = self.cursor / per_pass;
        if self.pass != Some(pass) {
            self.perm = self.permutation(pass);
            self.pass = Some(pass);
        }
        let start = self.cursor % per_pass;
        let mut ids = Vec::with_capacity(self.batch_size * self.seq_len);
        let mut lengths = Vec::with_capacity(self.batch_size);
        for &r in &self.perm[start..start + self.batch_size] {
            let row = &self.rows[r];
            lengths.push(row.iter().position(|&t| t == PAD_ID).unwrap_or(self.seq_len));
            ids.extend_from_slice(row);
        }
        self.cursor += self.batch_size;
        self.stats.tokens += ids.len() as u64;
        TokenBatch {
            ids,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            lengths,
            pad_id: PAD_ID,
        }
    }

    /// The next `n` batches.
    pub fn epoch(&mut self, n: usize) -> Vec<TokenBatch> {
        (0..n).map(|_| self.next_batch()).collect()
    }
}

#[cfg(test)]
mod tests;
