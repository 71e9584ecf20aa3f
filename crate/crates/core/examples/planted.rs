//! Trains on a planted-topic corpus and prints recovery metrics.
//!
//! `cargo run --release --example planted -- <seed> <strategy> <optimizer> [epochs] [lr]`

use std::time::Instant;

use paretopic::augment::{augment_corpus, AugmentOptions};
use paretopic::eval::evaluate_topics;
use paretopic::ntm::top_words;
use paretopic::synthetic::{captured_blocks, planted_corpus, PlantedConfig};
use paretopic::trainer::{fit, AugmentationViews, TrainConfig, TrainState};

fn main() -> paretopic::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let strategy = args.get(2).cloned().unwrap_or_else(|| "mgda".into());
    let optimizer = args.get(3).cloned().unwrap_or_else(|| "sgd".into());
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.002);

    let data = planted_corpus(&PlantedConfig::default(), seed)?;
    let triples = augment_corpus(&data.train, &AugmentOptions { seed, ..Default::default() }, None)?;
    let views = AugmentationViews::from_triples(&triples, &data.train)?;
    let mut cfg = TrainConfig { topics: 5, epochs, lr, seed: Some(seed), ..Default::default() };
    cfg.set("moo.strategy", &strategy)?;
    cfg.set("train.optimizer", &optimizer)?;
    let start = Instant::now();
    let mut state = TrainState::new(data.train.vocabulary.len(), &cfg)?;
    let log = fit(&mut state, &data.train, &views, &cfg, None, |_| Ok(()))?;
    let topics = top_words(&state.model.decoder, 10, &data.train.vocabulary)?;
    let m = evaluate_topics(&topics, &data.test.documents, data.train.vocabulary.len())?;
    let captured = captured_blocks(&topics.topics, &data.blocks, 6);
    let alphas: Vec<f64> = log.records.iter().filter_map(|r| r.alpha).collect();
    let q = |f: f64| alphas[((alphas.len() - 1) as f64 * f) as usize];
    println!(
        "seed={seed} {strategy}/{optimizer} td={:.3} npmi={:.3} captured={captured}/5 elbo={:.2} infonce={:.3} alpha at 0,25,50,100% of steps={:.3},{:.3},{:.3},{:.3} secs={:.1}",
        m.td,
        m.npmi,
        log.records.last().unwrap().elbo,
        log.records.last().unwrap().infonce,
        q(0.0), q(0.25), q(0.5), q(1.0),
        start.elapsed().as_secs_f64()
    );
    println!("{}", topics.to_text(&data.train.vocabulary));
    Ok(())
}
