//! Training loop: three encoded views, both losses, the blended encoder
//! update and the ELBO-only decoder update. Also configuration, checkpoints
//! and the per-step log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{vectorize_triple, AugmentedTriple};
use crate::corpus::{BowDocument, Corpus};
use crate::diffnet::{GradientVector, PoolMode};
use crate::error::{Error, Result};
use crate::moo::{strategy_dispatch, Strategy, DEFAULT_TIE_EPS};
use crate::ntm::{
    count_batch, elbo_forward_backward, elbo_with_gradients, sample_eps, DecoderParams, ElboBreakdown,
    EncoderParams, ModelDims, TopicModel, ViewPass,
};
use crate::setcl::{build_index_matrix, build_sets, setwise_infonce_with_grad, ContrastConfig, PoolingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer '{other}' (expected sgd|adam)"))),
        }
    }
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub topics: usize,
    pub hidden: usize,
    pub set_size: usize,
    pub shuffles: usize,
    pub temperature: f64,
    pub pooling: PoolingConfig,
    pub include_own_negative: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: Option<u64>,
    pub optimizer: OptimizerKind,
    pub strategy: String,
    pub linear_alpha: f64,
    pub tie_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            topics: 50,
            hidden: 100,
            set_size: 4,
            shuffles: 8,
            temperature: 0.2,
            pooling: PoolingConfig::default(),
            include_own_negative: false,
            lr: 0.002,
            batch_size: 200,
            epochs: 200,
            seed: None,
            optimizer: OptimizerKind::Sgd,
            strategy: "mgda".into(),
            linear_alpha: 0.5,
            tie_eps: DEFAULT_TIE_EPS,
        }
    }
}

/// Every config key with its default and a short description.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("model.T", "50", "number of topics"),
    ("model.H", "100", "encoder hidden width"),
    ("setcl.K", "4", "documents per set"),
    ("setcl.S", "8", "rows of the index matrix (identity + S-1 shuffles)"),
    ("setcl.tau", "0.2", "InfoNCE temperature"),
    ("setcl.pooling_positive", "min", "pooling for anchor-positive sets (min|max|mean|sum)"),
    ("setcl.pooling_negative", "max", "pooling for anchor-negative sets (min|max|mean|sum)"),
    ("setcl.include_own_negative", "false", "count the set's own negative in the denominator"),
    ("train.lr", "0.002", "learning rate"),
    ("train.batch_size", "200", "batch size B"),
    ("train.epochs", "200", "training epochs"),
    ("train.seed", "", "RNG seed (required for training)"),
    ("train.optimizer", "sgd", "sgd|adam"),
    ("moo.strategy", "mgda", "mgda|linear|random|pcgrad"),
    ("moo.linear_alpha", "0.5", "contrastive weight for moo.strategy=linear"),
    ("moo.tie_eps", "1e-12", "MGDA tie tolerance on |g1-g2|^2"),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("bad value '{value}' for {key}: {e}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "model.T" => self.topics = parse_value(key, v)?,
            "model.H" => self.hidden = parse_value(key, v)?,
            "setcl.K" => self.set_size = parse_value(key, v)?,
            "setcl.S" => self.shuffles = parse_value(key, v)?,
            "setcl.tau" => self.temperature = parse_value(key, v)?,
            "setcl.pooling_positive" => self.pooling.positive = v.parse::<PoolMode>()?,
            "setcl.pooling_negative" => self.pooling.negative = v.parse::<PoolMode>()?,
            "setcl.include_own_negative" => self.include_own_negative = parse_value(key, v)?,
            "train.lr" => self.lr = parse_value(key, v)?,
            "train.batch_size" => self.batch_size = parse_value(key, v)?,
            "train.epochs" => self.epochs = parse_value(key, v)?,
            "train.seed" => self.seed = if v.is_empty() { None } else { Some(parse_value(key, v)?) },
            "train.optimizer" => self.optimizer = v.parse()?,
            "moo.strategy" => {
                Strategy::from_name(v, 0.5)?;
                self.strategy = v.to_ascii_lowercase();
            }
            "moo.linear_alpha" => self.linear_alpha = parse_value(key, v)?,
            "moo.tie_eps" => self.tie_eps = parse_value(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("{origin}:{}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::invalid(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Resolved configuration in the same `key=value` format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
        let rows: [(&str, String); 16] = [
            ("model.T", self.topics.to_string()),
            ("model.H", self.hidden.to_string()),
            ("setcl.K", self.set_size.to_string()),
            ("setcl.S", self.shuffles.to_string()),
            ("setcl.tau", self.temperature.to_string()),
            ("setcl.pooling_positive", self.pooling.positive.to_string()),
            ("setcl.pooling_negative", self.pooling.negative.to_string()),
            ("setcl.include_own_negative", self.include_own_negative.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.seed", seed),
            ("train.optimizer", self.optimizer.name().to_string()),
            ("moo.strategy", self.strategy.clone()),
            ("moo.linear_alpha", self.linear_alpha.to_string()),
            ("moo.tie_eps", self.tie_eps.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Strategy::from_name(&self.strategy, self.linear_alpha)
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            temperature: self.temperature,
            pooling: self.pooling,
            include_own_negative: self.include_own_negative,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.T", self.topics),
            ("model.H", self.hidden),
            ("setcl.K", self.set_size),
            ("setcl.S", self.shuffles),
            ("train.batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{k} must be positive")));
            }
        }
        if self.set_size > self.batch_size {
            return Err(Error::invalid(format!(
                "set size K={} exceeds batch size B={}",
                self.set_size, self.batch_size
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("setcl.tau must be positive, got {}", self.temperature)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.tie_eps >= 0.0) {
            return Err(Error::invalid("moo.tie_eps must be nonnegative"));
        }
        self.strategy()?;
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerState {
    Sgd,
    Adam {
        t: u64,
        m_enc: Vec<f64>,
        v_enc: Vec<f64>,
        m_dec: Vec<f64>,
        v_dec: Vec<f64>,
    },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, dims: ModelDims) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                t: 0,
                m_enc: vec![0.0; dims.encoder_len()],
                v_enc: vec![0.0; dims.encoder_len()],
                m_dec: vec![0.0; dims.decoder_len()],
                v_dec: vec![0.0; dims.decoder_len()],
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Sgd => OptimizerKind::Sgd,
            OptimizerState::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Moves the encoder against `enc_dir` and the decoder against `dec_grad`.
    pub fn apply(
        &mut self,
        lr: f64,
        model: &mut TopicModel,
        enc_dir: &GradientVector,
        dec_grad: &GradientVector,
    ) -> Result<()> {
        let mut enc = model.encoder.flatten().values;
        let mut dec = model.decoder.flatten().values;
        if enc.len() != enc_dir.len() || dec.len() != dec_grad.len() {
            return Err(Error::invalid("gradient length does not match the model"));
        }
        match self {
            OptimizerState::Sgd => {
                for (p, g) in enc.iter_mut().zip(&enc_dir.values) {
                    *p -= lr * g;
                }
                for (p, g) in dec.iter_mut().zip(&dec_grad.values) {
                    *p -= lr * g;
                }
            }
            OptimizerState::Adam { t, m_enc, v_enc, m_dec, v_dec } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                let adam = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                };
                adam(&mut enc, &enc_dir.values, m_enc, v_enc);
                adam(&mut dec, &dec_grad.values, m_dec, v_dec);
            }
        }
        model.encoder.assign(&enc)?;
        model.decoder.assign(&dec)
    }
}

/// Model parameters, the RNG stream and progress counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: TopicModel,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub optimizer: OptimizerState,
}

impl TrainState {
    /// Fresh model; the same seeded stream then drives all training noise.
    pub fn new(vocab_size: usize, cfg: &TrainConfig) -> Result<Self> {
        let seed = cfg
            .seed
            .ok_or_else(|| Error::invalid("train.seed is required for training"))?;
        let dims = ModelDims {
            vocab: vocab_size,
            hidden: cfg.hidden,
            topics: cfg.topics,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TopicModel::init(dims, &mut rng);
        Ok(TrainState {
            model,
            rng,
            epoch: 0,
            step: 0,
            optimizer: OptimizerState::new(cfg.optimizer, dims),
        })
    }
}

/// Vectorized positive and negative views, indexed by document.
#[derive(Clone, Debug, Default)]
pub struct AugmentationViews {
    views: Vec<Option<(BowDocument, BowDocument)>>,
}

impl AugmentationViews {
    pub fn from_triples(triples: &[AugmentedTriple], corpus: &Corpus) -> Result<Self> {
        let mut views = vec![None; corpus.len()];
        for t in triples {
            if t.anchor_id >= corpus.len() {
                return Err(Error::Data(format!(
                    "augmentation cache references document {} but the corpus has {}",
                    t.anchor_id,
                    corpus.len()
                )));
            }
            if views[t.anchor_id].is_some() {
                return Err(Error::Data(format!("augmentation cache repeats document {}", t.anchor_id)));
            }
            views[t.anchor_id] = Some(vectorize_triple(t, &corpus.vocabulary)?);
        }
        Ok(AugmentationViews { views })
    }

    pub fn get(&self, doc: usize) -> Option<&(BowDocument, BowDocument)> {
        self.views.get(doc).and_then(|v| v.as_ref())
    }

    pub fn check_covers(&self, docs: &[usize]) -> Result<()> {
        let missing: Vec<usize> = docs.iter().copied().filter(|&d| self.get(d).is_none()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "augmentation cache is missing {} documents (first: {})",
                missing.len(),
                missing[0]
            )))
        }
    }
}

/// Losses and gradients of one batch, before any update.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub elbo: ElboBreakdown,
    pub infonce: f64,
    pub num_sets: usize,
    /// Encoder gradient of the contrastive loss (`g1`).
    pub g_infonce: GradientVector,
    /// Encoder gradient of the ELBO (`g2`).
    pub g_elbo: GradientVector,
    pub g_decoder: GradientVector,
}

/// Draws noise for x, x⁺, x⁻ (in that order), then the index matrix, and
/// returns both losses with their gradients.
pub fn step_gradients(
    model: &TopicModel,
    docs: &[BowDocument],
    views: &AugmentationViews,
    batch: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepGradients> {
    let dims = model.dims();
    let b = batch.len();
    if b < cfg.set_size {
        return Err(Error::invalid(format!("batch of {b} is smaller than set size K={}", cfg.set_size)));
    }
    views.check_covers(batch)?;
    let x: Vec<&BowDocument> = batch.iter().map(|&i| &docs[i]).collect();
    let xp: Vec<&BowDocument> = batch.iter().map(|&i| &views.get(i).expect("covered").0).collect();
    let xm: Vec<&BowDocument> = batch.iter().map(|&i| &views.get(i).expect("covered").1).collect();

    let eps_x = sample_eps(b, dims.topics, rng);
    let eps_p = sample_eps(b, dims.topics, rng);
    let eps_m = sample_eps(b, dims.topics, rng);
    let vx = ViewPass::forward(&x, &model.encoder, eps_x)?;
    let vp = ViewPass::forward(&xp, &model.encoder, eps_p)?;
    let vm = ViewPass::forward(&xm, &model.encoder, eps_m)?;

    let index = build_index_matrix(b, cfg.shuffles, rng)?;
    let sets = build_sets(&index, cfg.set_size)?;
    let contrast = setwise_infonce_with_grad(&sets, &vx.z, &vp.z, &vm.z, &cfg.contrast())?;

    let counts = count_batch(&x, dims.vocab)?;
    let elbo = elbo_forward_backward(&counts, &vx.encoder.mu, &vx.encoder.logvar, &vx.z, &model.decoder)?;
    let g_elbo = vx.backward(&model.encoder, &elbo.d_z, Some((&elbo.d_mu, &elbo.d_logvar)))?;

    let mut g_con = vx.backward(&model.encoder, &contrast.d_z, None)?;
    g_con.add_assign(&vp.backward(&model.encoder, &contrast.d_z_plus, None)?)?;
    g_con.add_assign(&vm.backward(&model.encoder, &contrast.d_z_minus, None)?)?;

    Ok(StepGradients {
        elbo: elbo.value,
        infonce: contrast.loss,
        num_sets: sets.len(),
        g_infonce: g_con.flatten(),
        g_elbo: g_elbo.flatten(),
        g_decoder: elbo.decoder.flatten(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub infonce: f64,
    /// Weight on the contrastive gradient; absent for PCGrad.
    pub alpha: Option<f64>,
    pub g_infonce_norm: f64,
    pub g_elbo_norm: f64,
    pub direction_norm: f64,
    pub g_dot: f64,
}

fn diverged(step: u64, batch: &[usize], what: &str) -> Error {
    log::error!("non-finite {what} at step {step}; batch documents: {batch:?}");
    let shown: Vec<String> = batch.iter().take(20).map(|d| d.to_string()).collect();
    Error::Diverged {
        step,
        detail: format!(
            "non-finite {what}; batch of {} documents [{}{}]",
            batch.len(),
            shown.join(", "),
            if batch.len() > 20 { ", ..." } else { "" }
        ),
    }
}

/// One update of Algorithm 1 on `batch` (indices into `docs`).
pub fn train_step(
    state: &mut TrainState,
    docs: &[BowDocument],
    views: &AugmentationViews,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let strategy = cfg.strategy()?;
    let g = step_gradients(&state.model, docs, views, batch, cfg, &mut state.rng)?;
    let step = state.step + 1;
    if !(g.elbo.loss.is_finite() && g.infonce.is_finite()) {
        return Err(diverged(step, batch, &format!("loss (elbo={}, infonce={})", g.elbo.loss, g.infonce)));
    }
    if !(g.g_infonce.is_finite() && g.g_elbo.is_finite() && g.g_decoder.is_finite()) {
        return Err(diverged(step, batch, "gradient"));
    }
    let decision = strategy_dispatch(strategy, &g.g_infonce, &g.g_elbo, cfg.tie_eps, &mut state.rng)?;
    let mut model = state.model.clone();
    let mut optimizer = state.optimizer.clone();
    optimizer.apply(cfg.lr, &mut model, &decision.direction, &g.g_decoder)?;
    if !model.is_finite() {
        return Err(diverged(step, batch, "parameters after update"));
    }
    state.model = model;
    state.optimizer = optimizer;
    state.step = step;
    Ok(StepRecord {
        step,
        epoch: state.epoch,
        elbo: g.elbo.loss,
        recon: g.elbo.recon,
        kl: g.elbo.kl,
        infonce: g.infonce,
        alpha: decision.alpha,
        g_infonce_norm: decision.diagnostics.g1_norm,
        g_elbo_norm: decision.diagnostics.g2_norm,
        direction_norm: decision.diagnostics.direction_norm,
        g_dot: decision.diagnostics.g1_dot_g2,
    })
}

/// An ELBO-only update on `batch`, drawing the x noise exactly as
/// [`train_step`] does.
pub fn plain_elbo_step(
    state: &mut TrainState,
    docs: &[BowDocument],
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<ElboBreakdown> {
    let x: Vec<&BowDocument> = batch.iter().map(|&i| &docs[i]).collect();
    let eps = sample_eps(batch.len(), state.model.dims().topics, &mut state.rng);
    let (value, g_enc, g_dec) = elbo_with_gradients(&state.model, &x, eps)?;
    let step = state.step + 1;
    if !value.loss.is_finite() {
        return Err(diverged(step, batch, "ELBO"));
    }
    state.optimizer.apply(cfg.lr, &mut state.model, &g_enc.flatten(), &g_dec.flatten())?;
    state.step = step;
    Ok(value)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }
}

/// Epoch loop around [`train_step`], continuing from `state.epoch` up to
/// `cfg.epochs`. Each epoch reshuffles the trainable documents, drops the
/// ragged tail and, if `checkpoint` is given, saves a checkpoint at its end.
pub fn fit(
    state: &mut TrainState,
    corpus: &Corpus,
    views: &AugmentationViews,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let dims = state.model.dims();
    if dims.vocab != corpus.vocabulary.len() {
        return Err(Error::Data(format!(
            "model vocabulary size {} does not match corpus vocabulary size {}",
            dims.vocab,
            corpus.vocabulary.len()
        )));
    }
    let trainable = corpus.trainable();
    let mut log = TrainLog::default();
    if state.epoch >= cfg.epochs {
        return Ok(log);
    }
    if trainable.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} trainable documents is fewer than batch size B={}",
            trainable.len(),
            cfg.batch_size
        )));
    }
    views.check_covers(&trainable)?;
    let vocab_hash = corpus.vocabulary.hash();
    while state.epoch < cfg.epochs {
        let mut order = trainable.clone();
        order.shuffle(&mut state.rng);
        for batch in order.chunks_exact(cfg.batch_size) {
            let record = train_step(state, &corpus.documents, views, batch, cfg)?;
            on_step(&record)?;
            log.records.push(record);
        }
        state.epoch += 1;
        if let Some(path) = checkpoint {
            save_checkpoint(state, &vocab_hash, path)?;
        }
        if let Some(last) = log.records.last() {
            log::info!(
                "epoch {}/{}: elbo={:.4} infonce={:.4} alpha={}",
                state.epoch,
                cfg.epochs,
                last.elbo,
                last.infonce,
                last.alpha.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
            );
        }
    }
    Ok(log)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since it does not fit a JSON number.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng_state".into());
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(rename = "V")]
    pub vocab: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    #[serde(rename = "T")]
    pub topics: usize,
    pub vocab_hash: String,
    pub epoch: usize,
    pub step: u64,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub rng_state: RngState,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, vocab_hash: &str) -> Self {
        let dims = state.model.dims();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            vocab: dims.vocab,
            hidden: dims.hidden,
            topics: dims.topics,
            vocab_hash: vocab_hash.to_string(),
            epoch: state.epoch,
            step: state.step,
            encoder: state.model.encoder.clone(),
            decoder: state.model.decoder.clone(),
            rng_state: RngState::capture(&state.rng),
            optimizer: state.optimizer.clone(),
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        let dims = ModelDims {
            vocab: self.vocab,
            hidden: self.hidden,
            topics: self.topics,
        };
        let shapes_ok = self.encoder.w1.shape() == (dims.vocab, dims.hidden)
            && self.encoder.flatten().len() == dims.encoder_len()
            && self.decoder.beta.shape() == (dims.topics, dims.vocab)
            && self.decoder.flatten().len() == dims.decoder_len();
        if !shapes_ok {
            return Err(Error::Checkpoint(format!(
                "parameter shapes do not match V={}, H={}, T={}",
                dims.vocab, dims.hidden, dims.topics
            )));
        }
        if let OptimizerState::Adam { m_enc, v_enc, m_dec, v_dec, .. } = &self.optimizer {
            if m_enc.len() != dims.encoder_len()
                || v_enc.len() != dims.encoder_len()
                || m_dec.len() != dims.decoder_len()
                || v_dec.len() != dims.decoder_len()
            {
                return Err(Error::Checkpoint("optimizer state does not match model size".into()));
            }
        }
        Ok(TrainState {
            model: TopicModel {
                encoder: self.encoder,
                decoder: self.decoder,
            },
            rng: self.rng_state.restore()?,
            epoch: self.epoch,
            step: self.step,
            optimizer: self.optimizer,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Writes through a sibling temporary file so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(state: &TrainState, vocab_hash: &str, path: &Path) -> Result<()> {
    let json = Checkpoint::from_state(state, vocab_hash).to_json()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, json).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("replacing {}", path.display()), e))
}

/// Loads a checkpoint; with `expected_hash`, its vocabulary must match.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<TrainState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if let Some(h) = expected_hash {
        if ckpt.vocab_hash != h {
            return Err(Error::Checkpoint(format!(
                "{}: vocabulary hash {} does not match {h}",
                path.display(),
                ckpt.vocab_hash
            )));
        }
    }
    ckpt.into_state()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{augment_corpus, AugmentOptions};
    use crate::corpus::{RawRecord, Split, Vocabulary};
    use crate::ntm::elbo_loss;

    fn toy_corpus(docs: usize) -> Corpus {
        let words: Vec<String> = (0..20).map(|i| format!("w{i:02}")).collect();
        let vocab = Vocabulary::new(words.clone(), vec![1; 20]).unwrap();
        let records: Vec<RawRecord> = (0..docs)
            .map(|d| RawRecord {
                text: (0..6).map(|k| words[(d * 3 + k * k) % 20].as_str()).collect::<Vec<_>>().join(" "),
                label: None,
            })
            .collect();
        Corpus::from_records(&records, vocab, Split::Train)
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            topics: 4,
            hidden: 8,
            set_size: 2,
            shuffles: 3,
            batch_size: 8,
            epochs: 2,
            lr: 0.05,
            seed: Some(11),
            ..Default::default()
        }
    }

    fn toy_setup(docs: usize) -> (Corpus, AugmentationViews) {
        let corpus = toy_corpus(docs);
        let triples = augment_corpus(&corpus, &AugmentOptions { seed: 3, ..Default::default() }, None).unwrap();
        let views = AugmentationViews::from_triples(&triples, &corpus).unwrap();
        (corpus, views)
    }

    #[test]
    fn config_round_trip_and_validation() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# comment\nmodel.T = 7\nmoo.strategy=linear\nmoo.linear_alpha=0.25\ntrain.seed=5\n", "test")
            .unwrap();
        assert_eq!(cfg.topics, 7);
        assert_eq!(cfg.strategy().unwrap(), Strategy::Linear { alpha: 0.25 });
        let mut again = TrainConfig::default();
        again.apply_text(&cfg.to_text(), "resolved").unwrap();
        assert_eq!(again, cfg);

        assert!(cfg.clone().set("model.X", "1").is_err());
        assert!(cfg.clone().set("setcl.tau", "abc").is_err());
        let err = TrainConfig { set_size: 9, batch_size: 4, ..Default::default() }.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("K=9") && msg.contains("B=4"), "{msg}");
        assert_eq!(CONFIG_KEYS.len(), TrainConfig::default().to_text().lines().count());
    }

    #[test]
    fn zero_epochs_leaves_state_unchanged() {
        let (corpus, views) = toy_setup(16);
        let cfg = TrainConfig { epochs: 0, ..toy_config() };
        let mut state = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
        let before = state.model.clone();
        let log = fit(&mut state, &corpus, &views, &cfg, None, |_| Ok(())).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(state.model, before);
    }

    #[test]
    fn fit_is_deterministic_and_drops_tail() {
        let (corpus, views) = toy_setup(20);
        let cfg = toy_config();
        let run = || {
            let mut s = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
            let log = fit(&mut s, &corpus, &views, &cfg, None, |_| Ok(())).unwrap();
            (s.model, log)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(m1, m2);
        assert_eq!(l1.to_jsonl().unwrap(), l2.to_jsonl().unwrap());
        // 20 docs, B=8: two full batches per epoch
        assert_eq!(l1.records.len(), 4);
        assert!(l1.records.iter().all(|r| r.alpha.is_some_and(|a| (0.0..=1.0).contains(&a))));
        assert_eq!(TrainLog::from_jsonl(&l1.to_jsonl().unwrap()).unwrap(), l1);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (corpus, views) = toy_setup(20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = TrainConfig { epochs: 3, optimizer, ..toy_config() };
            let mut full = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
            fit(&mut full, &corpus, &views, &cfg, None, |_| Ok(())).unwrap();

            let first = TrainConfig { epochs: 1, ..cfg.clone() };
            let mut part = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
            fit(&mut part, &corpus, &views, &first, Some(&path), |_| Ok(())).unwrap();
            let mut resumed = load_checkpoint(&path, Some(&corpus.vocabulary.hash())).unwrap();
            assert_eq!(resumed.epoch, 1);
            fit(&mut resumed, &corpus, &views, &cfg, None, |_| Ok(())).unwrap();
            assert_eq!(resumed.model, full.model);
            assert_eq!(resumed.step, full.step);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (corpus, views) = toy_setup(16);
        let cfg = TrainConfig { optimizer: OptimizerKind::Adam, epochs: 1, ..toy_config() };
        let mut state = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
        fit(&mut state, &corpus, &views, &cfg, None, |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        let hash = corpus.vocabulary.hash();
        save_checkpoint(&state, &hash, &a).unwrap();
        let loaded = load_checkpoint(&a, Some(&hash)).unwrap();
        assert_eq!(loaded.model, state.model);
        assert_eq!(loaded.optimizer, state.optimizer);
        assert_eq!(RngState::capture(&loaded.rng), RngState::capture(&state.rng));
        save_checkpoint(&loaded, &hash, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        assert!(matches!(load_checkpoint(&a, Some("deadbeef")), Err(Error::Checkpoint(_))));
        let text = fs::read_to_string(&a).unwrap();
        fs::write(&b, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&b, None), Err(Error::Checkpoint(_))));
        fs::write(&b, text.replace("\"format_version\":1", "\"format_version\":9")).unwrap();
        assert!(matches!(load_checkpoint(&b, None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn linear_zero_matches_elbo_only_step() {
        let (corpus, views) = toy_setup(16);
        let cfg = TrainConfig { strategy: "linear".into(), linear_alpha: 0.0, ..toy_config() };
        let batch: Vec<usize> = (0..8).collect();
        let mut a = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
        let mut b = a.clone();
        train_step(&mut a, &corpus.documents, &views, &batch, &cfg).unwrap();
        plain_elbo_step(&mut b, &corpus.documents, &batch, &cfg).unwrap();
        let (ea, eb) = (a.model.encoder.flatten().values, b.model.encoder.flatten().values);
        assert!(ea.iter().zip(&eb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.model.decoder, b.model.decoder);
    }

    #[test]
    fn linear_update_is_convex_combination() {
        let (corpus, views) = toy_setup(16);
        let batch: Vec<usize> = (0..8).collect();
        let alpha = 0.3;
        let cfg = |a: f64| TrainConfig { strategy: "linear".into(), linear_alpha: a, ..toy_config() };
        let start = TrainState::new(corpus.vocabulary.len(), &cfg(0.0)).unwrap();
        let after = |a: f64| {
            let mut s = start.clone();
            train_step(&mut s, &corpus.documents, &views, &batch, &cfg(a)).unwrap();
            s.model.encoder.flatten().values
        };
        let (u0, u1, ua) = (after(0.0), after(1.0), after(alpha));
        for ((x0, x1), xa) in u0.iter().zip(&u1).zip(&ua) {
            assert!((alpha * x1 + (1.0 - alpha) * x0 - xa).abs() < 1e-12);
        }
    }

    #[test]
    fn step_descends_blended_loss() {
        let (corpus, views) = toy_setup(16);
        let batch: Vec<usize> = (0..8).collect();
        let cfg = TrainConfig { lr: 1e-3, ..toy_config() };
        let mut state = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
        let rng0 = state.rng.clone();
        let before = step_gradients(&state.model, &corpus.documents, &views, &batch, &cfg, &mut rng0.clone()).unwrap();
        let rec = train_step(&mut state, &corpus.documents, &views, &batch, &cfg).unwrap();
        let after = step_gradients(&state.model, &corpus.documents, &views, &batch, &cfg, &mut rng0.clone()).unwrap();
        let a = rec.alpha.unwrap();
        let h = |g: &StepGradients| a * g.infonce + (1.0 - a) * g.elbo.loss;
        assert!(h(&after) < h(&before), "{} -> {}", h(&before), h(&after));
        assert!(after.elbo.loss < before.elbo.loss);
    }

    #[test]
    fn contrastive_loss_ignores_decoder() {
        let (corpus, views) = toy_setup(16);
        let batch: Vec<usize> = (0..8).collect();
        let cfg = toy_config();
        let state = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
        let mut other = state.model.clone();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        other.decoder = DecoderParams::init(other.dims(), &mut r);
        let g1 = step_gradients(&state.model, &corpus.documents, &views, &batch, &cfg, &mut state.rng.clone()).unwrap();
        let g2 = step_gradients(&other, &corpus.documents, &views, &batch, &cfg, &mut state.rng.clone()).unwrap();
        assert_eq!(g1.infonce.to_bits(), g2.infonce.to_bits());
        assert_eq!(g1.g_infonce, g2.g_infonce);
        assert_ne!(g1.elbo.loss, g2.elbo.loss);
    }

    #[test]
    fn elbo_value_matches_forward_only() {
        let (corpus, views) = toy_setup(16);
        let batch: Vec<usize> = (0..8).collect();
        let cfg = toy_config();
        let state = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
        let mut rng = state.rng.clone();
        let g = step_gradients(&state.model, &corpus.documents, &views, &batch, &cfg, &mut state.rng.clone()).unwrap();
        let x: Vec<&BowDocument> = batch.iter().map(|&i| &corpus.documents[i]).collect();
        let eps = sample_eps(8, 4, &mut rng);
        let v = ViewPass::forward(&x, &state.model.encoder, eps).unwrap();
        let counts = count_batch(&x, 20).unwrap();
        let e = elbo_loss(&counts, &v.encoder.mu, &v.encoder.logvar, &v.z, &state.model.decoder).unwrap();
        assert!((e.loss - g.elbo.loss).abs() < 1e-12);
        assert_eq!(g.num_sets, 3 * 4);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let (corpus, views) = toy_setup(6);
        let cfg = toy_config();
        let mut state = TrainState::new(corpus.vocabulary.len(), &cfg).unwrap();
        assert!(matches!(fit(&mut state, &corpus, &views, &cfg, None, |_| Ok(())), Err(Error::Data(_))));
        let (corpus, _) = toy_setup(16);
        let partial = AugmentationViews::from_triples(&[], &corpus).unwrap();
        assert!(matches!(fit(&mut state, &corpus, &partial, &cfg, None, |_| Ok(())), Err(Error::Data(_))));
        assert!(TrainState::new(20, &TrainConfig { seed: None, ..cfg }).is_err());
    }
}
