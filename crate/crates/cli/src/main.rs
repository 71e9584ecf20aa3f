use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use paretopic::augment::{augment_corpus, load_triples, save_triples, AugmentMethod, AugmentOptions, LlmClient, LlmConfig};
use paretopic::corpus::{build_vocabulary, load_corpus, Corpus, Split, VocabOptions, Vocabulary};
use paretopic::eval::{
    align_topics, classify, evaluate_topics, features_csv, similarity_probe, theta_features, topic_word_distributions,
};
use paretopic::ntm::{top_words, TopicList};
use paretopic::selftest::run_selftest;
use paretopic::trainer::{
    fit, load_checkpoint, save_checkpoint, AugmentationViews, TrainConfig, TrainLog, TrainState, CONFIG_KEYS,
};
use paretopic::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn config_keys_help() -> String {
    let mut s = String::from("Config keys (file lines or --set KEY=VALUE; flags win over the file):\n");
    for (key, default, desc) in CONFIG_KEYS {
        let default = if default.is_empty() { "none" } else { default };
        let _ = writeln!(s, "  {key:<28} default {default:<6} {desc}");
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "paretopic", version, about = "Setwise contrastive neural topic model with MGDA-balanced training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary from a JSONL corpus ({"text": ..., "label": ...} per line).
    BuildVocab(BuildVocabArgs),
    /// Build the positive/negative augmentation cache for a training corpus.
    Augment(AugmentArgs),
    /// Train a model and write a checkpoint and a per-step JSONL log.
    #[command(after_help = config_keys_help())]
    Train(TrainArgs),
    /// Write the top words of every topic of a checkpoint.
    Topics(TopicsArgs),
    /// NPMI and topic diversity of a topics file against a reference corpus.
    Eval(EvalArgs),
    /// Match the topics of two checkpoints by Jensen-Shannon divergence.
    Align(AlignArgs),
    /// Export document-topic features as CSV and score a classifier on them.
    #[command(
        after_help = "The built-in classifier is multinomial logistic regression, used as a cheap proxy \
                      in place of a Random Forest. Feed the CSV to an external Random Forest to reproduce \
                      that protocol exactly."
    )]
    Classify(ClassifyArgs),
    /// Cosine similarity of the topic proportions of two texts.
    Probe(ProbeArgs),
    /// Gradient checks, the MGDA solver oracle and metric identities.
    Selftest,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_df: usize,
    #[arg(long, default_value_t = 0.7)]
    max_df_frac: f64,
    #[arg(long, default_value_t = 2000)]
    max_size: usize,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// llm | tfidf | dropout
    #[arg(long, default_value = "tfidf")]
    mode: AugmentMethod,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of words replaced by tfidf augmentation.
    #[arg(long, default_value_t = 0.3)]
    replace_frac: f64,
    /// Fraction of distinct words removed by dropout augmentation.
    #[arg(long, default_value_t = 0.3)]
    drop_frac: f64,
    /// Chat-completions style endpoint (llm mode). The key is read from PARETOPIC_API_KEY.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// File holding the JSON request body template.
    #[arg(long)]
    request_template: Option<PathBuf>,
    /// Dot-separated path of the completion text in the response.
    #[arg(long)]
    response_path: Option<String>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 3)]
    max_attempts: usize,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Augmentation cache written by `augment`.
    #[arg(long)]
    cache: PathBuf,
    /// Checkpoint path, rewritten at the end of every epoch.
    #[arg(long, short)]
    output: PathBuf,
    /// Per-step JSONL log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Config file of KEY=VALUE lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Same as --set train.seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint up to train.epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TopicsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, short = 'n', default_value_t = 10)]
    top_n: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    topics: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// JSONL corpus the co-occurrence statistics are counted on.
    #[arg(long)]
    reference: PathBuf,
    /// Metrics JSON; printed to stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Pairs with JS divergence above this stay unmatched.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, short = 'n', default_value_t = 10)]
    top_n: usize,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Features CSV (theta_0..theta_{T-1},label).
    #[arg(long, short)]
    output: PathBuf,
    /// Seed of the 80/20 split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    text_a: String,
    text_b: String,
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| anyhow!(Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    }))
}

fn read_file(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| anyhow!(Error::Io {
        context: format!("reading {}", path.display()),
        source: e,
    }))
}

fn load_split(path: &Path, vocab: Vocabulary, split: Split) -> anyhow::Result<Corpus> {
    let loaded = load_corpus(path)?;
    let corpus = Corpus::from_records(&loaded.records, vocab, split);
    log::info!(
        "{}: {} documents, {} with in-vocabulary words",
        path.display(),
        corpus.len(),
        corpus.trainable().len()
    );
    Ok(corpus)
}

fn build_vocab(args: &BuildVocabArgs) -> anyhow::Result<()> {
    let loaded = load_corpus(&args.corpus)?;
    let texts: Vec<&str> = loaded.records.iter().map(|r| r.text.as_str()).collect();
    let vocab = build_vocabulary(
        &texts,
        &VocabOptions {
            min_df: args.min_df,
            max_df_frac: args.max_df_frac,
            max_size: args.max_size,
        },
    )?;
    vocab.save(&args.output)?;
    println!("{} words, hash {}", vocab.len(), vocab.hash());
    Ok(())
}

fn augment(args: &AugmentArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let corpus = load_split(&args.corpus, vocab, Split::Train)?;
    let client = match args.mode {
        AugmentMethod::Llm => {
            let mut cfg = LlmConfig {
                timeout: Duration::from_secs(args.timeout_secs),
                max_attempts: args.max_attempts,
                parallelism: args.parallelism,
                temperature: args.temperature,
                ..LlmConfig::default()
            }
            .with_env_key();
            if let Some(e) = &args.endpoint {
                cfg.endpoint = e.clone();
            }
            if let Some(m) = &args.model {
                cfg.model = m.clone();
            }
            if let Some(p) = &args.request_template {
                cfg.request_template = read_file(p)?;
            }
            if let Some(p) = &args.response_path {
                cfg.response_path = p.clone();
            }
            if cfg.api_key.is_none() {
                log::warn!("PARETOPIC_API_KEY is not set; sending requests without authorization");
            }
            Some(LlmClient::new(cfg))
        }
        _ => None,
    };
    let opts = AugmentOptions {
        method: args.mode,
        replace_frac: args.replace_frac,
        drop_frac: args.drop_frac,
        seed: args.seed,
    };
    let triples = augment_corpus(&corpus, &opts, client.as_ref())?;
    save_triples(&args.output, &triples)?;
    println!("{} triples written to {}", triples.len(), args.output.display());
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if cfg.seed.is_none() {
        return Err(Error::InvalidArgument("a seed is required: pass --seed or set train.seed".into()).into());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_train_config(args)?;
    eprint!("resolved training config:\n{}", cfg.to_text());

    let vocab = Vocabulary::load(&args.vocab)?;
    let hash = vocab.hash();
    let corpus = load_split(&args.corpus, vocab, Split::Train)?;
    let triples = load_triples(&args.cache, corpus.len())?;
    let views = AugmentationViews::from_triples(&triples, &corpus)?;

    let mut state = match &args.resume {
        Some(p) => {
            let state = load_checkpoint(p, Some(&hash))?;
            let dims = state.model.dims();
            if dims.topics != cfg.topics || dims.hidden != cfg.hidden {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint has T={} H={} but the config asks for T={} H={}",
                    dims.topics, dims.hidden, cfg.topics, cfg.hidden
                ))
                .into());
            }
            if state.optimizer.kind() != cfg.optimizer {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint optimizer is {} but the config asks for {}",
                    state.optimizer.kind().name(),
                    cfg.optimizer.name()
                ))
                .into());
            }
            log::info!("resuming from {} at epoch {}", p.display(), state.epoch);
            state
        }
        None => TrainState::new(corpus.vocabulary.len(), &cfg)?,
    };

    let mut log_file = match &args.log {
        Some(p) => {
            let f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(args.resume.is_some())
                .truncate(args.resume.is_none())
                .open(p)
                .with_context(|| format!("opening log {}", p.display()))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let result = fit(&mut state, &corpus, &views, &cfg, Some(&args.output), |record| {
        if let Some(w) = log_file.as_mut() {
            let line = TrainLog {
                records: vec![record.clone()],
            }
            .to_jsonl()?;
            w.write_all(line.as_bytes())
                .map_err(|e| Error::Io {
                    context: "writing training log".into(),
                    source: e,
                })?;
        }
        Ok(())
    });
    if let Some(mut w) = log_file {
        w.flush().context("flushing training log")?;
    }
    let log = result?;
    save_checkpoint(&state, &hash, &args.output)?;
    match log.records.last() {
        Some(r) => println!(
            "trained {} steps to epoch {}: elbo={:.6} infonce={:.6}",
            log.records.len(),
            state.epoch,
            r.elbo,
            r.infonce
        ),
        None => println!("nothing to train: checkpoint already at epoch {}", state.epoch),
    }
    Ok(())
}

fn topics(args: &TopicsArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let state = load_checkpoint(&args.checkpoint, Some(&vocab.hash()))?;
    let list = top_words(&state.model.decoder, args.top_n, &vocab)?;
    write_file(&args.output, &list.to_text(&vocab))?;
    println!("{} topics written to {}", list.num_topics(), args.output.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let list = TopicList::from_text(&read_file(&args.topics)?, &vocab).map_err(|e| match e {
        Error::Parse { line, reason, .. } => Error::Parse {
            path: args.topics.clone(),
            line,
            reason,
        },
        other => other,
    })?;
    let v = vocab.len();
    let reference = load_split(&args.reference, vocab, Split::Test)?;
    let metrics = evaluate_topics(&list, &reference.documents, v)?;
    let json = metrics.to_json()?;
    match &args.output {
        Some(p) => {
            write_file(p, &json)?;
            println!("npmi={:.6} td={:.6}", metrics.npmi, metrics.td);
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn align(args: &AlignArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let hash = vocab.hash();
    let a = load_checkpoint(&args.a, Some(&hash))?;
    let b = load_checkpoint(&args.b, Some(&hash))?;
    let matches = align_topics(
        &topic_word_distributions(&a.model.decoder),
        &topic_word_distributions(&b.model.decoder),
        args.threshold,
    )?;
    let words_a = top_words(&a.model.decoder, args.top_n, &vocab)?;
    let words_b = top_words(&b.model.decoder, args.top_n, &vocab)?;
    let names = |list: &TopicList, t: usize| -> Vec<&str> { list.topics[t].iter().map(|&w| vocab.word(w)).collect() };
    let pairs: Vec<serde_json::Value> = matches
        .iter()
        .map(|m| {
            serde_json::json!({
                "a": m.i,
                "b": m.j,
                "js": m.js,
                "words_a": names(&words_a, m.i),
                "words_b": names(&words_b, m.j),
            })
        })
        .collect();
    let unmatched = |n: usize, used: &dyn Fn(usize) -> bool| -> Vec<usize> { (0..n).filter(|&t| !used(t)).collect() };
    let report = serde_json::json!({
        "threshold": args.threshold,
        "matched": pairs,
        "unmatched_a": unmatched(words_a.num_topics(), &|t| matches.iter().any(|m| m.i == t)),
        "unmatched_b": unmatched(words_b.num_topics(), &|t| matches.iter().any(|m| m.j == t)),
    });
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match &args.output {
        Some(p) => {
            write_file(p, &text)?;
            println!("{} of {} topics matched", matches.len(), words_a.num_topics());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn classify_cmd(args: &ClassifyArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let state = load_checkpoint(&args.checkpoint, Some(&vocab.hash()))?;
    let corpus = load_split(&args.corpus, vocab, Split::Test)?;
    let (kept, theta) = theta_features(&state.model, &corpus.documents)?;
    if kept.len() < corpus.len() {
        log::warn!("{} documents without in-vocabulary words skipped", corpus.len() - kept.len());
    }
    let labels: Vec<Option<String>> = kept.iter().map(|&i| corpus.documents[i].label.clone()).collect();
    write_file(&args.output, &features_csv(&theta, &labels))?;
    println!("{} feature rows written to {}", kept.len(), args.output.display());
    match classify(&theta, &labels, args.seed)? {
        Some(r) => println!(
            "logistic regression proxy: macro_f1={:.4} accuracy={:.4} (train {}, test {}, {} classes)",
            r.macro_f1,
            r.accuracy,
            r.train_size,
            r.test_size,
            r.classes.len()
        ),
        None => log::warn!("some documents have no label; skipping the classifier"),
    }
    Ok(())
}

fn probe(args: &ProbeArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let state = load_checkpoint(&args.checkpoint, Some(&vocab.hash()))?;
    let sim = similarity_probe(&args.text_a, &args.text_b, &state.model, &vocab)?;
    println!("{sim:.6}");
    Ok(())
}

fn selftest() -> anyhow::Result<bool> {
    let report = run_selftest();
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report.all_passed())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_)) => EXIT_USAGE,
        Some(e) if e.is_data_error() => EXIT_DATA,
        Some(_) => EXIT_RUNTIME,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_RUNTIME,
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::BuildVocab(a) => build_vocab(a).map(|_| true),
        Command::Augment(a) => augment(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Topics(a) => topics(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Align(a) => align(a).map(|_| true),
        Command::Classify(a) => classify_cmd(a).map(|_| true),
        Command::Probe(a) => probe(a).map(|_| true),
        Command::Selftest => selftest(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    eprintln!("resolved config: {:?}", cli.command);
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
