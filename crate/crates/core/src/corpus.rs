//! Tokenization, vocabulary construction and bag-of-words vectors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lowercases, splits on runs of non-alphanumeric characters and drops
/// tokens shorter than two characters or made only of digits.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2 && !t.chars().all(|c| c.is_ascii_digit()))
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug)]
pub struct VocabOptions {
    pub min_df: usize,
    pub max_df_frac: f64,
    pub max_size: usize,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            min_df: 5,
            max_df_frac: 0.7,
            max_size: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    df: Vec<usize>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    words: Vec<String>,
    df: Vec<usize>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>, df: Vec<usize>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::invalid("vocabulary must contain at least one word"));
        }
        if words.len() != df.len() {
            return Err(Error::invalid(format!(
                "vocabulary has {} words but {} document frequencies",
                words.len(),
                df.len()
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word '{w}'")));
            }
        }
        if let Some(i) = df.iter().position(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "vocabulary word '{}' has document frequency 0",
                words[i]
            )));
        }
        Ok(Vocabulary { words, df, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn df(&self) -> &[usize] {
        &self.df
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// SHA-256 over the ordered word list; ties checkpoints to a vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabularyFile {
            words: self.words.clone(),
            df: self.df.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text)?;
        Vocabulary::new(file.words, file.df)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)
            .map_err(|e| Error::io(format!("writing vocabulary {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
        Vocabulary::from_json(&text)
    }
}

/// Keeps tokens with `min_df ≤ df ≤ max_df_frac·|texts|`, ordered by df
/// descending then token, truncated to `max_size`.
pub fn build_vocabulary<S: AsRef<str>>(texts: &[S], opts: &VocabOptions) -> Result<Vocabulary> {
    if texts.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from zero texts"));
    }
    if !(opts.max_df_frac > 0.0 && opts.max_df_frac <= 1.0) {
        return Err(Error::invalid(format!(
            "max_df_frac must lie in (0, 1], got {}",
            opts.max_df_frac
        )));
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for text in texts {
        let mut tokens = tokenize(text.as_ref());
        tokens.sort_unstable();
        tokens.dedup();
        for t in tokens {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let max_df = opts.max_df_frac * texts.len() as f64;
    let mut kept: Vec<(String, usize)> = df
        .into_iter()
        .filter(|&(_, d)| d >= opts.min_df && d as f64 <= max_df)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.truncate(opts.max_size);
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary {
            min_df: opts.min_df,
            max_df_frac: opts.max_df_frac,
            max_size: opts.max_size,
            num_docs: texts.len(),
        });
    }
    let (words, df) = kept.into_iter().unzip();
    Vocabulary::new(words, df)
}

/// Sparse word counts. Entries are sorted by word index and every count is
/// positive.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowDocument {
    pub counts: Vec<(usize, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl BowDocument {
    /// Builds a document from `(index, count)` pairs in any order; zero counts
    /// are dropped and repeated indices merged.
    pub fn from_counts(pairs: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut counts: Vec<(usize, u32)> = pairs.into_iter().filter(|&(_, c)| c > 0).collect();
        counts.sort_unstable_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, u32)> = Vec::with_capacity(counts.len());
        for (i, c) in counts {
            match merged.last_mut() {
                Some((j, total)) if *j == i => *total += c,
                _ => merged.push((i, c)),
            }
        }
        BowDocument {
            counts: merged,
            label: None,
            raw_text: None,
        }
    }

    /// No in-vocabulary tokens; such documents are kept but never trained on.
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn count(&self, index: usize) -> u32 {
        self.counts
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0, |p| self.counts[p].1)
    }

    pub fn max_index(&self) -> Option<usize> {
        self.counts.last().map(|&(i, _)| i)
    }

    /// Space-joined words, each repeated by its count. Vectorizing the result
    /// against the same vocabulary gives back the same counts.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for &(i, c) in &self.counts {
            for _ in 0..c {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(vocab.word(i));
            }
        }
        out
    }
}

pub fn vectorize(text: &str, vocab: &Vocabulary) -> BowDocument {
    let mut counts: HashMap<usize, u32> = HashMap::new();
    for token in tokenize(text) {
        if let Some(i) = vocab.get(&token) {
            *counts.entry(i).or_insert(0) += 1;
        }
    }
    let mut doc = BowDocument::from_counts(counts);
    doc.raw_text = Some(text.to_string());
    doc
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub text: String,
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadedCorpus {
    pub records: Vec<RawRecord>,
    pub malformed: Vec<MalformedLine>,
}

/// Largest tolerated fraction of malformed lines in a corpus file.
pub const MAX_MALFORMED_FRAC: f64 = 0.01;

fn parse_record(line: &str) -> std::result::Result<RawRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("line is not a JSON object")?;
    let text = match obj.get("text") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("field \"text\" is not a string".into()),
        None => return Err("missing field \"text\"".into()),
    };
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        Some(_) => return Err("field \"label\" must be a string or integer".into()),
    };
    Ok(RawRecord { text, label })
}

/// Parses JSONL text. Blank lines are ignored. Malformed lines are collected;
/// the call fails only when more than 1% of the non-blank lines are bad.
pub fn parse_corpus(text: &str, path: &Path) -> Result<LoadedCorpus> {
    let mut loaded = LoadedCorpus::default();
    let mut total = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_record(line) {
            Ok(r) => loaded.records.push(r),
            Err(reason) => loaded.malformed.push(MalformedLine { line: n + 1, reason }),
        }
    }
    if total == 0 {
        log::warn!("{}: corpus file is empty", path.display());
    }
    if let Some(first) = loaded.malformed.first() {
        for m in &loaded.malformed {
            log::warn!("{}:{}: {}", path.display(), m.line, m.reason);
        }
        if loaded.malformed.len() as f64 > MAX_MALFORMED_FRAC * total as f64 {
            return Err(Error::MalformedCorpus {
                path: path.to_path_buf(),
                malformed: loaded.malformed.len(),
                total,
                first_line: first.line,
                first_reason: first.reason.clone(),
            });
        }
    }
    Ok(loaded)
}

pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
    parse_corpus(&text, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub documents: Vec<BowDocument>,
    pub vocabulary: Vocabulary,
    pub split: Split,
}

impl Corpus {
    pub fn from_records(records: &[RawRecord], vocabulary: Vocabulary, split: Split) -> Self {
        let documents = records
            .iter()
            .map(|r| {
                let mut d = vectorize(&r.text, &vocabulary);
                d.label = r.label.clone();
                d
            })
            .collect();
        Corpus {
            documents,
            vocabulary,
            split,
        }
    }

    /// Indices of documents with at least one in-vocabulary token.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.documents.len())
            .filter(|&i| !self.documents[i].is_empty())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}
