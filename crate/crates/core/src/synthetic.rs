//! Planted-topic corpora: each topic owns a disjoint block of words.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;

use crate::corpus::{build_vocabulary, Corpus, RawRecord, Split, VocabOptions};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct PlantedConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub train_docs: usize,
    pub test_docs: usize,
    /// Symmetric Dirichlet concentration of document mixtures.
    pub alpha: f64,
    /// Probability mass a topic puts on its own block; the rest is uniform
    /// over the whole vocabulary.
    pub block_mass: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            topics: 5,
            words_per_topic: 40,
            train_docs: 2000,
            test_docs: 500,
            alpha: 0.1,
            block_mass: 0.9,
            min_len: 50,
            max_len: 100,
        }
    }
}

pub struct PlantedCorpus {
    pub train: Corpus,
    pub test: Corpus,
    pub train_texts: Vec<String>,
    pub test_texts: Vec<String>,
    /// Vocabulary indices of each topic's block.
    pub blocks: Vec<Vec<usize>>,
    pub train_mixtures: Vec<Vec<f64>>,
    pub test_mixtures: Vec<Vec<f64>>,
}

pub fn planted_word(topic: usize, j: usize) -> String {
    format!("t{topic}w{j:03}")
}

fn dirichlet<R: Rng>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let v: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 && s.is_finite() {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

pub fn planted_corpus(cfg: &PlantedConfig, seed: u64) -> Result<PlantedCorpus> {
    if cfg.topics == 0 || cfg.words_per_topic == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::invalid("planted corpus needs positive sizes and min_len ≤ max_len"));
    }
    if !(cfg.alpha > 0.0) || !(0.0..=1.0).contains(&cfg.block_mass) {
        return Err(Error::invalid("planted corpus needs alpha > 0 and block_mass in [0, 1]"));
    }
    let v = cfg.topics * cfg.words_per_topic;
    let names: Vec<String> = (0..cfg.topics)
        .flat_map(|t| (0..cfg.words_per_topic).map(move |j| planted_word(t, j)))
        .collect();
    let background = (1.0 - cfg.block_mass) / v as f64;
    let word_dists: Vec<WeightedIndex<f64>> = (0..cfg.topics)
        .map(|t| {
            let w: Vec<f64> = (0..v)
                .map(|i| {
                    let own = i / cfg.words_per_topic == t;
                    background + if own { cfg.block_mass / cfg.words_per_topic as f64 } else { 0.0 }
                })
                .collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut generate = |n: usize| {
        let mut texts = Vec::with_capacity(n);
        let mut mixtures = Vec::with_capacity(n);
        for _ in 0..n {
            let theta = dirichlet(cfg.topics, cfg.alpha, &mut rng);
            let pick = WeightedIndex::new(&theta).expect("nonzero mixture");
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let words: Vec<&str> = (0..len)
                .map(|_| names[word_dists[pick.sample(&mut rng)].sample(&mut rng)].as_str())
                .collect();
            texts.push(words.join(" "));
            mixtures.push(theta);
        }
        (texts, mixtures)
    };
    let (train_texts, train_mixtures) = generate(cfg.train_docs);
    let (test_texts, test_mixtures) = generate(cfg.test_docs);

    let vocab = build_vocabulary(
        &train_texts,
        &VocabOptions {
            min_df: 1,
            max_df_frac: 1.0,
            max_size: v,
        },
    )?;
    let blocks = (0..cfg.topics)
        .map(|t| {
            (0..cfg.words_per_topic)
                .filter_map(|j| vocab.get(&planted_word(t, j)))
                .collect()
        })
        .collect();
    let records = |texts: &[String]| -> Vec<RawRecord> {
        texts
            .iter()
            .map(|t| RawRecord {
                text: t.clone(),
                label: None,
            })
            .collect()
    };
    Ok(PlantedCorpus {
        train: Corpus::from_records(&records(&train_texts), vocab.clone(), Split::Train),
        test: Corpus::from_records(&records(&test_texts), vocab, Split::Test),
        train_texts,
        test_texts,
        blocks,
        train_mixtures,
        test_mixtures,
    })
}

/// How many planted blocks supply at least `min_hits` of some learned
/// topic's words.
pub fn captured_blocks(topics: &[Vec<usize>], blocks: &[Vec<usize>], min_hits: usize) -> usize {
    blocks
        .iter()
        .filter(|block| {
            topics
                .iter()
                .any(|t| t.iter().filter(|w| block.contains(w)).count() >= min_hits)
        })
        .count()
}
