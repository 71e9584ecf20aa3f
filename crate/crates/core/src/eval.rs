//! Topic quality and downstream evaluation.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{vectorize, BowDocument, Vocabulary};
use crate::diffnet::{softmax, Matrix};
use crate::error::{Error, Result};
use crate::ntm::{infer_theta, DecoderParams, TopicList, TopicModel};

pub const NPMI_EPS: f64 = 1e-12;

/// Document-level word and pair frequencies of a reference corpus.
#[derive(Clone, Debug, Default)]
pub struct CooccurrenceStats {
    pub doc_count: usize,
    pub word_doc_freq: HashMap<usize, usize>,
    /// Keyed by `(min, max)` word index.
    pub pair_doc_freq: HashMap<(usize, usize), usize>,
}

impl CooccurrenceStats {
    /// Counts over `docs`. With `restrict`, only those words (and pairs of
    /// them) are tracked, which keeps large vocabularies cheap.
    pub fn from_documents(docs: &[BowDocument], restrict: Option<&BTreeSet<usize>>) -> Self {
        let mut stats = CooccurrenceStats {
            doc_count: docs.len(),
            ..Default::default()
        };
        for d in docs {
            let words: Vec<usize> = d
                .counts
                .iter()
                .map(|&(w, _)| w)
                .filter(|w| restrict.is_none_or(|r| r.contains(w)))
                .collect();
            for (a, &wa) in words.iter().enumerate() {
                *stats.word_doc_freq.entry(wa).or_default() += 1;
                for &wb in &words[a + 1..] {
                    *stats.pair_doc_freq.entry((wa.min(wb), wa.max(wb))).or_default() += 1;
                }
            }
        }
        stats
    }

    pub fn for_topics(docs: &[BowDocument], topics: &TopicList) -> Self {
        let words: BTreeSet<usize> = topics.topics.iter().flatten().copied().collect();
        Self::from_documents(docs, Some(&words))
    }

    pub fn word_freq(&self, w: usize) -> usize {
        self.word_doc_freq.get(&w).copied().unwrap_or(0)
    }

    pub fn pair_freq(&self, a: usize, b: usize) -> usize {
        self.pair_doc_freq.get(&(a.min(b), a.max(b))).copied().unwrap_or(0)
    }
}

/// NPMI of one word pair from document probabilities.
pub fn pair_npmi(p_i: f64, p_j: f64, p_ij: f64, eps: f64) -> f64 {
    if p_i <= 0.0 || p_j <= 0.0 {
        return -1.0;
    }
    let joint = p_ij + eps;
    if joint >= 1.0 {
        return 1.0;
    }
    let v = (joint / (p_i * p_j)).ln() / -joint.ln();
    v.clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpmiScores {
    pub per_topic: Vec<f64>,
    pub mean: f64,
}

pub fn npmi(topics: &TopicList, stats: &CooccurrenceStats, eps: f64) -> Result<NpmiScores> {
    if stats.doc_count == 0 {
        return Err(Error::invalid("NPMI needs a nonempty reference corpus"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("NPMI smoothing must be positive, got {eps}")));
    }
    if topics.topics.is_empty() {
        return Err(Error::invalid("NPMI needs at least one topic"));
    }
    let d = stats.doc_count as f64;
    let mut per_topic = Vec::with_capacity(topics.topics.len());
    for words in &topics.topics {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &wi) in words.iter().enumerate() {
            for &wj in &words[a + 1..] {
                let p_i = stats.word_freq(wi) as f64 / d;
                let p_j = stats.word_freq(wj) as f64 / d;
                let p_ij = stats.pair_freq(wi, wj) as f64 / d;
                sum += pair_npmi(p_i, p_j, p_ij, eps);
                pairs += 1;
            }
        }
        per_topic.push(if pairs == 0 { 0.0 } else { sum / pairs as f64 });
    }
    let mean = per_topic.iter().sum::<f64>() / per_topic.len() as f64;
    Ok(NpmiScores { per_topic, mean })
}

/// Distinct words over all topics divided by `N·T`.
pub fn topic_diversity(topics: &TopicList) -> Result<f64> {
    let total: usize = topics.topics.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::invalid("topic diversity of an empty topic list"));
    }
    let distinct: BTreeSet<usize> = topics.topics.iter().flatten().copied().collect();
    Ok(distinct.len() as f64 / total as f64)
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &mi)| pi * (pi / mi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "JS divergence of distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Softmax of each decoder row: one word distribution per topic.
pub fn topic_word_distributions(dec: &DecoderParams) -> Vec<Vec<f64>> {
    softmax(&dec.beta).to_rows()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub i: usize,
    pub j: usize,
    pub js: f64,
}

/// Competitive linking: repeatedly takes the lowest-JS pair among unmatched
/// topics until that JS exceeds `threshold`.
pub fn align_topics(a: &[Vec<f64>], b: &[Vec<f64>], threshold: f64) -> Result<Vec<Alignment>> {
    let width = a.first().or(b.first()).map(Vec::len).unwrap_or(0);
    if a.iter().chain(b).any(|t| t.len() != width) {
        return Err(Error::invalid("topic distributions are over different vocabularies"));
    }
    let mut pairs = Vec::with_capacity(a.len() * b.len());
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            pairs.push(Alignment { i, j, js: js_divergence(p, q)? });
        }
    }
    pairs.sort_by(|x, y| x.js.total_cmp(&y.js).then(x.i.cmp(&y.i)).then(x.j.cmp(&y.j)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for p in pairs {
        if p.js > threshold {
            break;
        }
        if !used_a[p.i] && !used_b[p.j] {
            used_a[p.i] = true;
            used_b[p.j] = true;
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub npmi: f64,
    pub npmi_per_topic: Vec<f64>,
    pub td: f64,
    pub num_topics: usize,
}

/// NPMI against `reference` plus topic diversity.
pub fn evaluate_topics(topics: &TopicList, reference: &[BowDocument], vocab_size: usize) -> Result<Metrics> {
    if let Some(w) = topics.topics.iter().flatten().find(|&&w| w >= vocab_size) {
        return Err(Error::Data(format!(
            "topic word index {w} is outside the vocabulary of {vocab_size}"
        )));
    }
    let stats = CooccurrenceStats::for_topics(reference, topics);
    let scores = npmi(topics, &stats, NPMI_EPS)?;
    Ok(Metrics {
        npmi: scores.mean,
        npmi_per_topic: scores.per_topic,
        td: topic_diversity(topics)?,
        num_topics: topics.num_topics(),
    })
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Mean-path θ for the nonempty documents, with their positions in `docs`.
pub fn theta_features(model: &TopicModel, docs: &[BowDocument]) -> Result<(Vec<usize>, Matrix)> {
    let kept: Vec<usize> = (0..docs.len()).filter(|&i| !docs[i].is_empty()).collect();
    let refs: Vec<&BowDocument> = kept.iter().map(|&i| &docs[i]).collect();
    if refs.is_empty() {
        return Ok((kept, Matrix::zeros(0, model.dims().topics)));
    }
    Ok((kept, infer_theta(model, &refs)?))
}

pub fn features_csv(theta: &Matrix, labels: &[Option<String>]) -> String {
    let mut s = String::new();
    let header: Vec<String> = (0..theta.cols()).map(|t| format!("theta_{t}")).collect();
    let _ = writeln!(s, "{},label", header.join(","));
    for (r, label) in labels.iter().enumerate().take(theta.rows()) {
        let row: Vec<String> = theta.row(r).iter().map(|v| v.to_string()).collect();
        let label = label.as_deref().unwrap_or("");
        let label = if label.contains([',', '"', '\n']) {
            format!("\"{}\"", label.replace('"', "\"\""))
        } else {
            label.to_string()
        };
        let _ = writeln!(s, "{},{}", row.join(","), label);
    }
    s
}

pub const LR_L2: f64 = 1e-4;
pub const LR_STEPS: usize = 500;
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(d+1) × C`, last row is the bias.
    weights: Matrix,
}

impl LogisticRegression {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() || classes == 0 {
            return Err(Error::invalid("logistic regression needs matching nonempty features and labels"));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|k| {
                let var = x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let mut model = LogisticRegression {
            mean,
            scale,
            weights: Matrix::zeros(d + 1, classes),
        };
        let xs = model.design(x);
        let mean_sq = (0..xs.rows()).map(|r| xs.row(r).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
        let lr = 1.0 / (0.5 * mean_sq + LR_L2);
        let mut target = Matrix::zeros(x.len(), classes);
        for (r, &c) in y.iter().enumerate() {
            target.set(r, c, 1.0);
        }
        for _ in 0..LR_STEPS {
            let mut p = softmax(&xs.matmul(&model.weights)?);
            p.add_assign(&target.map(|t| -t))?;
            let mut grad = xs.t_matmul(&p)?;
            grad.scale(1.0 / n);
            let mut reg = model.weights.clone();
            reg.scale(LR_L2);
            grad.add_assign(&reg)?;
            grad.scale(-lr);
            model.weights.add_assign(&grad)?;
        }
        Ok(model)
    }

    fn design(&self, x: &[Vec<f64>]) -> Matrix {
        let d = self.mean.len();
        let mut m = Matrix::zeros(x.len(), d + 1);
        for (r, row) in x.iter().enumerate() {
            for k in 0..d {
                m.set(r, k, (row[k] - self.mean[k]) / self.scale[k]);
            }
            m.set(r, d, 1.0);
        }
        m
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        let scores = self.design(x).matmul(&self.weights)?;
        Ok((0..scores.rows())
            .map(|r| {
                let row = scores.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect())
    }
}

/// Macro-averaged F1 over the classes seen in either vector.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let classes: BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let tp = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|(&t, &p)| t != c && p == c).count() as f64;
        let fn_ = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p != c).count() as f64;
        total += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    }
    total / classes.len() as f64
}

/// Fits the proxy classifier on a seeded 80/20 split and scores the held-out
/// part. Returns `None` when some row has no label.
pub fn classify(features: &Matrix, labels: &[Option<String>], seed: u64) -> Result<Option<ClassificationReport>> {
    if labels.len() != features.rows() {
        return Err(Error::invalid("feature and label counts differ"));
    }
    if labels.is_empty() || labels.iter().any(Option::is_none) {
        return Ok(None);
    }
    let classes: Vec<String> = labels
        .iter()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l.as_ref().expect("checked")).expect("collected"))
        .collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((labels.len() as f64 * TEST_FRACTION).round() as usize).clamp(1, labels.len().saturating_sub(1).max(1));
    let (test, train) = order.split_at(n_test);
    if train.is_empty() {
        return Err(Error::Data("too few labeled documents for a train/test split".into()));
    }
    let rows = |idx: &[usize]| idx.iter().map(|&i| features.row(i).to_vec()).collect::<Vec<_>>();
    let model = LogisticRegression::fit(&rows(train), &train.iter().map(|&i| y[i]).collect::<Vec<_>>(), classes.len())?;
    let pred = model.predict(&rows(test))?;
    let truth: Vec<usize> = test.iter().map(|&i| y[i]).collect();
    let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
    Ok(Some(ClassificationReport {
        classes,
        train_size: train.len(),
        test_size: test.len(),
        macro_f1: macro_f1(&truth, &pred),
        accuracy: correct as f64 / truth.len() as f64,
    }))
}

/// Cosine similarity of the mean-path θ of two raw texts.
pub fn similarity_probe(text_a: &str, text_b: &str, model: &TopicModel, vocab: &Vocabulary) -> Result<f64> {
    let docs = [text_a, text_b].map(|t| vectorize(t, vocab));
    for (d, t) in docs.iter().zip([text_a, text_b]) {
        if d.is_empty() {
            let shown: String = t.chars().take(60).collect();
            return Err(Error::EmptyDocument(format!("'{shown}'")));
        }
    }
    let theta = infer_theta(model, &[&docs[0], &docs[1]])?;
    Ok(cosine(theta.row(0), theta.row(1)))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
