//! Positive and negative views of each document.
//!
//! Views come from an LLM completion endpoint or from two deterministic
//! fallbacks (TF-IDF word replacement and word dropout). They are produced
//! once, ahead of training, and cached as JSONL.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{vectorize, BowDocument, Corpus, Vocabulary};
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "PARETOPIC_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Related,
    Unrelated,
}

impl Polarity {
    pub fn word(self) -> &'static str {
        match self {
            Polarity::Related => "related",
            Polarity::Unrelated => "unrelated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMethod {
    Llm,
    Tfidf,
    Dropout,
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentMethod::Llm => "llm",
            AugmentMethod::Tfidf => "tfidf",
            AugmentMethod::Dropout => "dropout",
        })
    }
}

impl FromStr for AugmentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "llm" => Ok(AugmentMethod::Llm),
            "tfidf" => Ok(AugmentMethod::Tfidf),
            "dropout" => Ok(AugmentMethod::Dropout),
            other => Err(Error::invalid(format!(
                "unknown augmentation mode '{other}' (expected llm|tfidf|dropout)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedTriple {
    pub anchor_id: usize,
    pub positive_text: String,
    pub negative_text: String,
    pub method: AugmentMethod,
}

/// The prompt sent to the completion endpoint.
pub fn prompt(doc_text: &str, polarity: Polarity, max_chars: usize) -> String {
    let doc: String = doc_text.chars().take(max_chars).collect();
    format!("A sentence that is {} to this text: {}", polarity.word(), doc)
}

pub const DEFAULT_REQUEST_TEMPLATE: &str = r#"{"model": {{model}}, "messages": [{"role": "user", "content": {{prompt}}}], "temperature": {{temperature}}, "max_tokens": {{max_tokens}}}"#;
pub const DEFAULT_RESPONSE_PATH: &str = "choices.0.message.content";

#[derive(Clone, Debug)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_attempts: usize,
    /// Delay before the first retry; doubled after each failed attempt.
    pub initial_backoff: Duration,
    /// JSON request body; `{{model}}`, `{{prompt}}`, `{{temperature}}` and
    /// `{{max_tokens}}` are replaced by JSON-encoded values.
    pub request_template: String,
    /// Dot-separated path to the completion text in the response JSON.
    pub response_path: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub max_prompt_chars: usize,
    pub parallelism: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            request_template: DEFAULT_REQUEST_TEMPLATE.into(),
            response_path: DEFAULT_RESPONSE_PATH.into(),
            temperature: 1.0,
            max_tokens: 256,
            max_prompt_chars: 2000,
            parallelism: 4,
        }
    }
}

impl LlmConfig {
    pub fn with_env_key(mut self) -> Self {
        if self.api_key.is_none() {
            self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        }
        self
    }

    pub fn request_body(&self, prompt: &str) -> String {
        let enc = |v: Value| v.to_string();
        self.request_template
            .replace("{{model}}", &enc(Value::from(self.model.as_str())))
            .replace("{{prompt}}", &enc(Value::from(prompt)))
            .replace("{{temperature}}", &enc(Value::from(self.temperature)))
            .replace("{{max_tokens}}", &enc(Value::from(self.max_tokens)))
    }
}

/// Walks a dot path such as `choices.0.message.content`.
pub fn extract_text(body: &str, path: &str) -> std::result::Result<String, String> {
    let root: Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    let mut cur = &root;
    for key in path.split('.').filter(|k| !k.is_empty()) {
        cur = match key.parse::<usize>() {
            Ok(i) => cur.get(i),
            Err(_) => cur.get(key),
        }
        .ok_or_else(|| format!("response has no '{key}' along '{path}'"))?;
    }
    match cur {
        Value::String(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Value::String(_) => Err("response text is empty".into()),
        other => Err(format!("response value at '{path}' is not text: {other}")),
    }
}

pub struct LlmClient {
    config: LlmConfig,
    agent: ureq::Agent,
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        LlmClient { config, agent }
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn attempt(&self, body: &str) -> std::result::Result<String, String> {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        if !(200..300).contains(&status) {
            return Err(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()));
        }
        extract_text(&text, &self.config.response_path)
    }

    /// One completion for `doc_text`, retried with exponential backoff.
    pub fn augment(&self, doc_id: usize, doc_text: &str, polarity: Polarity) -> Result<String> {
        if doc_text.trim().is_empty() {
            return Err(Error::Augmentation {
                doc_id,
                attempts: 0,
                reason: "document text is empty".into(),
            });
        }
        let body = self.config.request_body(&prompt(doc_text, polarity, self.config.max_prompt_chars));
        let attempts = self.config.max_attempts.max(1);
        let mut delay = self.config.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("document {doc_id}: attempt {attempt}/{attempts} failed: {e}");
                    last = e;
                }
            }
            if attempt < attempts {
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(Error::Augmentation {
            doc_id,
            attempts,
            reason: last,
        })
    }

    /// Related and unrelated completions for every `(doc_id, text)`, with at
    /// most `parallelism` requests in flight. Output order follows input.
    pub fn augment_many(&self, docs: &[(usize, String)]) -> Result<Vec<(String, String)>> {
        let jobs: Vec<(usize, Polarity)> = (0..docs.len())
            .flat_map(|i| [(i, Polarity::Related), (i, Polarity::Unrelated)])
            .collect();
        let results: Mutex<Vec<Option<Result<String>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.config.parallelism.clamp(1, jobs.len().max(1));
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let j = next.fetch_add(1, Ordering::SeqCst);
                    if j >= jobs.len() {
                        break;
                    }
                    let (i, pol) = jobs[j];
                    let r = self.augment(docs[i].0, &docs[i].1, pol);
                    results.lock().expect("result slots")[j] = Some(r);
                });
            }
        });
        let mut flat = results.into_inner().expect("result slots").into_iter();
        let mut out = Vec::with_capacity(docs.len());
        while let (Some(p), Some(n)) = (flat.next(), flat.next()) {
            out.push((p.expect("job ran")?, n.expect("job ran")?));
        }
        Ok(out)
    }
}

/// Smoothed inverse document frequencies, `ln((1+D)/(1+df)) + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TfidfAugmenter {
    idf: Vec<f64>,
}

impl TfidfAugmenter {
    pub fn fit(docs: &[BowDocument], vocab_size: usize) -> Self {
        let mut df = vec![0usize; vocab_size];
        for d in docs {
            for &(w, _) in &d.counts {
                if w < vocab_size {
                    df[w] += 1;
                }
            }
        }
        let n = docs.len() as f64;
        TfidfAugmenter {
            idf: df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect(),
        }
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn vocab_size(&self) -> usize {
        self.idf.len()
    }

    /// Entries of `doc` sorted by ascending TF-IDF, word index breaking ties.
    pub fn ranked(&self, doc: &BowDocument) -> Vec<(usize, u32)> {
        let mut entries = doc.counts.clone();
        entries.sort_by(|a, b| {
            let (ta, tb) = (a.1 as f64 * self.idf[a.0], b.1 as f64 * self.idf[b.0]);
            ta.total_cmp(&tb).then(a.0.cmp(&b.0))
        });
        entries
    }

    /// Replaces `⌈frac·nnz⌉` words with random vocabulary words, moving their
    /// counts along. Related views replace the lowest-TF-IDF words (always
    /// keeping at least one); unrelated views replace the highest.
    pub fn augment(&self, doc: &BowDocument, polarity: Polarity, replace_frac: f64, seed: u64) -> Result<BowDocument> {
        if doc.is_empty() {
            return Err(Error::EmptyDocument("passed to tfidf_augment".into()));
        }
        if !(replace_frac > 0.0 && replace_frac < 1.0) {
            return Err(Error::invalid(format!("replace_frac must lie in (0, 1), got {replace_frac}")));
        }
        if doc.max_index().is_some_and(|m| m >= self.idf.len()) {
            return Err(Error::invalid("document index outside the TF-IDF vocabulary"));
        }
        let nnz = doc.nnz();
        let wanted = (replace_frac * nnz as f64).ceil() as usize;
        let ranked = self.ranked(doc);
        let (replaced, kept): (Vec<_>, Vec<_>) = match polarity {
            Polarity::Related => {
                let n = wanted.min(nnz - 1);
                (ranked[..n].to_vec(), ranked[n..].to_vec())
            }
            Polarity::Unrelated => {
                let n = wanted.min(nnz);
                (ranked[nnz - n..].to_vec(), ranked[..nnz - n].to_vec())
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = self.idf.len();
        let mut used: Vec<bool> = vec![false; v];
        for &(w, _) in &doc.counts {
            used[w] = true;
        }
        let mut out = kept;
        for (_, count) in replaced {
            let free = used.iter().filter(|u| !**u).count();
            let word = if free == 0 {
                rng.random_range(0..v)
            } else {
                let k = rng.random_range(0..free);
                used.iter().enumerate().filter(|(_, u)| !**u).nth(k).map(|(i, _)| i).expect("k < free")
            };
            used[word] = true;
            out.push((word, count));
        }
        let mut result = BowDocument::from_counts(out);
        result.label = doc.label.clone();
        Ok(result)
    }
}

/// Removes `⌊frac·nnz⌋` uniformly chosen entries, never all of them.
pub fn dropout_augment(doc: &BowDocument, drop_frac: f64, seed: u64) -> Result<BowDocument> {
    if !(drop_frac > 0.0 && drop_frac < 1.0) {
        return Err(Error::invalid(format!("drop_frac must lie in (0, 1), got {drop_frac}")));
    }
    let nnz = doc.nnz();
    let n_drop = ((drop_frac * nnz as f64).floor() as usize).min(nnz.saturating_sub(1));
    let mut order: Vec<usize> = (0..nnz).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = vec![true; nnz];
    for &i in &order[..n_drop] {
        keep[i] = false;
    }
    let mut result = BowDocument::from_counts(
        doc.counts.iter().zip(&keep).filter(|(_, &k)| k).map(|(&e, _)| e),
    );
    result.label = doc.label.clone();
    Ok(result)
}

/// Per-document, per-view seed derived from the run seed.
pub fn view_seed(seed: u64, doc: usize, view: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (doc as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ view.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct AugmentOptions {
    pub method: AugmentMethod,
    pub replace_frac: f64,
    pub drop_frac: f64,
    pub seed: u64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            method: AugmentMethod::Tfidf,
            replace_frac: 0.3,
            drop_frac: 0.3,
            seed: 0,
        }
    }
}

fn dropout_triple(corpus: &Corpus, i: usize, opts: &AugmentOptions, trainable: &[usize]) -> Result<AugmentedTriple> {
    let doc = &corpus.documents[i];
    let positive = dropout_augment(doc, opts.drop_frac, view_seed(opts.seed, i, 0))?;
    // negative: a dropout view of some other trainable document
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed(opts.seed, i, 1));
    let others: Vec<usize> = trainable.iter().copied().filter(|&j| j != i).collect();
    let source = others.get(rng.random_range(0..others.len().max(1))).copied().unwrap_or(i);
    let negative = dropout_augment(&corpus.documents[source], opts.drop_frac, view_seed(opts.seed, i, 2))?;
    Ok(AugmentedTriple {
        anchor_id: i,
        positive_text: positive.to_text(&corpus.vocabulary),
        negative_text: negative.to_text(&corpus.vocabulary),
        method: AugmentMethod::Dropout,
    })
}

/// Builds one triple per trainable document of `corpus`. TF-IDF weights
/// come from `corpus` itself, so pass the training split. LLM views that
/// vectorize to nothing are replaced by a dropout triple.
pub fn augment_corpus(corpus: &Corpus, opts: &AugmentOptions, llm: Option<&LlmClient>) -> Result<Vec<AugmentedTriple>> {
    let trainable = corpus.trainable();
    let vocab = &corpus.vocabulary;
    match opts.method {
        AugmentMethod::Dropout => trainable
            .iter()
            .map(|&i| dropout_triple(corpus, i, opts, &trainable))
            .collect(),
        AugmentMethod::Tfidf => {
            let tfidf = TfidfAugmenter::fit(&corpus.documents, vocab.len());
            trainable
                .iter()
                .map(|&i| {
                    let doc = &corpus.documents[i];
                    let pos = tfidf.augment(doc, Polarity::Related, opts.replace_frac, view_seed(opts.seed, i, 0))?;
                    let neg = tfidf.augment(doc, Polarity::Unrelated, opts.replace_frac, view_seed(opts.seed, i, 1))?;
                    Ok(AugmentedTriple {
                        anchor_id: i,
                        positive_text: pos.to_text(vocab),
                        negative_text: neg.to_text(vocab),
                        method: AugmentMethod::Tfidf,
                    })
                })
                .collect()
        }
        AugmentMethod::Llm => {
            let client = llm.ok_or_else(|| Error::invalid("llm augmentation needs an endpoint configuration"))?;
            let inputs: Vec<(usize, String)> = trainable
                .iter()
                .map(|&i| {
                    let d = &corpus.documents[i];
                    (i, d.raw_text.clone().unwrap_or_else(|| d.to_text(vocab)))
                })
                .collect();
            let outputs = client.augment_many(&inputs)?;
            inputs
                .iter()
                .zip(outputs)
                .map(|(&(i, _), (pos, neg))| {
                    if vectorize(&pos, vocab).is_empty() || vectorize(&neg, vocab).is_empty() {
                        log::warn!("document {i}: LLM view has no in-vocabulary words, using dropout");
                        dropout_triple(corpus, i, opts, &trainable)
                    } else {
                        Ok(AugmentedTriple {
                            anchor_id: i,
                            positive_text: pos,
                            negative_text: neg,
                            method: AugmentMethod::Llm,
                        })
                    }
                })
                .collect()
        }
    }
}

pub fn save_triples(path: &Path, triples: &[AugmentedTriple]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for t in triples {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads a cache and checks every anchor id against `corpus_size`.
pub fn load_triples(path: &Path, corpus_size: usize) -> Result<Vec<AugmentedTriple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: AugmentedTriple = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        if t.anchor_id >= corpus_size {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason: format!("anchor_id {} out of range for corpus of {corpus_size}", t.anchor_id),
            });
        }
        if t.positive_text.is_empty() || t.negative_text.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason: "augmented text is empty".into(),
            });
        }
        out.push(t);
    }
    Ok(out)
}

/// Vectorized views for a cache, keyed by anchor.
pub fn vectorize_triple(t: &AugmentedTriple, vocab: &Vocabulary) -> Result<(BowDocument, BowDocument)> {
    let pos = vectorize(&t.positive_text, vocab);
    let neg = vectorize(&t.negative_text, vocab);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyDocument(format!(
            "augmented view of anchor {}",
            t.anchor_id
        )));
    }
    Ok((pos, neg))
}
