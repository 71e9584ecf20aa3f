//! VAE topic model: encoder, reparameterized latent, multinomial decoder and
//! the ELBO, with backward passes for all of them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BowDocument, Vocabulary};
use crate::diffnet::{
    affine, affine_backward, affine_param_grads, log_softmax, log_softmax_backward, softmax, softmax_backward,
    softplus, softplus_backward, GradientVector, Matrix,
};
use crate::error::{Error, Result};

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;
pub const INIT_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub hidden: usize,
    pub topics: usize,
}

impl ModelDims {
    pub fn encoder_len(&self) -> usize {
        let (v, h, t) = (self.vocab, self.hidden, self.topics);
        v * h + h + 2 * (h * t + t)
    }

    pub fn decoder_len(&self) -> usize {
        self.topics * self.vocab + self.vocab
    }

    pub fn encoder_layout(&self) -> String {
        format!("encoder:V={},H={},T={}", self.vocab, self.hidden, self.topics)
    }

    pub fn decoder_layout(&self) -> String {
        format!("decoder:V={},T={}", self.vocab, self.topics)
    }
}

/// Encoder parameters. Also used to hold encoder gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w_mu: Matrix,
    pub b_mu: Matrix,
    pub w_lv: Matrix,
    pub b_lv: Matrix,
}

/// Decoder parameters. Also used to hold decoder gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// Topic-word weights, `T × V`.
    pub beta: Matrix,
    pub b_dec: Matrix,
}

fn flatten(parts: &[&Matrix]) -> Vec<f64> {
    let mut out = Vec::with_capacity(parts.iter().map(|m| m.as_slice().len()).sum());
    for m in parts {
        out.extend_from_slice(m.as_slice());
    }
    out
}

fn unflatten(parts: &mut [&mut Matrix], values: &[f64]) -> Result<()> {
    let need: usize = parts.iter().map(|m| m.as_slice().len()).sum();
    if need != values.len() {
        return Err(Error::invalid(format!(
            "parameter vector has {} values, layout needs {need}",
            values.len()
        )));
    }
    let mut offset = 0;
    for m in parts.iter_mut() {
        let n = m.as_slice().len();
        m.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

impl EncoderParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let (v, h, t) = (dims.vocab, dims.hidden, dims.topics);
        EncoderParams {
            w1: Matrix::zeros(v, h),
            b1: Matrix::zeros(1, h),
            w_mu: Matrix::zeros(h, t),
            b_mu: Matrix::zeros(1, t),
            w_lv: Matrix::zeros(h, t),
            b_lv: Matrix::zeros(1, t),
        }
    }

    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let (v, h, t) = (dims.vocab, dims.hidden, dims.topics);
        EncoderParams {
            w1: Matrix::uniform(v, h, INIT_SCALE, rng),
            b1: Matrix::zeros(1, h),
            w_mu: Matrix::uniform(h, t, INIT_SCALE, rng),
            b_mu: Matrix::zeros(1, t),
            w_lv: Matrix::uniform(h, t, INIT_SCALE, rng),
            b_lv: Matrix::zeros(1, t),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.w1.rows(),
            hidden: self.w1.cols(),
            topics: self.w_mu.cols(),
        }
    }

    fn parts(&self) -> [&Matrix; 6] {
        [&self.w1, &self.b1, &self.w_mu, &self.b_mu, &self.w_lv, &self.b_lv]
    }

    pub fn flatten(&self) -> GradientVector {
        GradientVector::new(flatten(&self.parts()), self.dims().encoder_layout())
    }

    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        unflatten(
            &mut [
                &mut self.w1,
                &mut self.b1,
                &mut self.w_mu,
                &mut self.b_mu,
                &mut self.w_lv,
                &mut self.b_lv,
            ],
            values,
        )
    }

    pub fn add_assign(&mut self, other: &EncoderParams) -> Result<()> {
        self.w1.add_assign(&other.w1)?;
        self.b1.add_assign(&other.b1)?;
        self.w_mu.add_assign(&other.w_mu)?;
        self.b_mu.add_assign(&other.b_mu)?;
        self.w_lv.add_assign(&other.w_lv)?;
        self.b_lv.add_assign(&other.b_lv)
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|m| m.is_finite())
    }
}

impl DecoderParams {
    pub fn zeros(dims: ModelDims) -> Self {
        DecoderParams {
            beta: Matrix::zeros(dims.topics, dims.vocab),
            b_dec: Matrix::zeros(1, dims.vocab),
        }
    }

    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        DecoderParams {
            beta: Matrix::uniform(dims.topics, dims.vocab, INIT_SCALE, rng),
            b_dec: Matrix::zeros(1, dims.vocab),
        }
    }

    pub fn flatten(&self) -> GradientVector {
        let layout = format!("decoder:V={},T={}", self.beta.cols(), self.beta.rows());
        GradientVector::new(flatten(&[&self.beta, &self.b_dec]), layout)
    }

    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        unflatten(&mut [&mut self.beta, &mut self.b_dec], values)
    }

    pub fn is_finite(&self) -> bool {
        self.beta.is_finite() && self.b_dec.is_finite()
    }
}

/// Encoder and decoder together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl TopicModel {
    /// Weights uniform in ±0.05, biases zero; encoder drawn before decoder.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let encoder = EncoderParams::init(dims, rng);
        let decoder = DecoderParams::init(dims, rng);
        TopicModel { encoder, decoder }
    }

    pub fn dims(&self) -> ModelDims {
        self.encoder.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }
}

/// L1-normalized counts of a batch, `B × V`.
pub fn normalized_batch(docs: &[&BowDocument], vocab_size: usize) -> Result<Matrix> {
    let mut x = Matrix::zeros(docs.len(), vocab_size);
    for (i, d) in docs.iter().enumerate() {
        let total = d.total();
        if total == 0 {
            return Err(Error::EmptyDocument(format!("at batch position {i}")));
        }
        check_indices(d, vocab_size)?;
        let row = x.row_mut(i);
        for &(w, c) in &d.counts {
            row[w] = c as f64 / total as f64;
        }
    }
    Ok(x)
}

/// Raw counts of a batch, `B × V`.
pub fn count_batch(docs: &[&BowDocument], vocab_size: usize) -> Result<Matrix> {
    let mut x = Matrix::zeros(docs.len(), vocab_size);
    for (i, d) in docs.iter().enumerate() {
        check_indices(d, vocab_size)?;
        let row = x.row_mut(i);
        for &(w, c) in &d.counts {
            row[w] = c as f64;
        }
    }
    Ok(x)
}

fn check_indices(d: &BowDocument, vocab_size: usize) -> Result<()> {
    match d.max_index() {
        Some(m) if m >= vocab_size => Err(Error::invalid(format!(
            "document references word {m} but vocabulary has {vocab_size} words"
        ))),
        _ => Ok(()),
    }
}

/// Everything the encoder backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct EncoderPass {
    pub input: Matrix,
    pub pre_hidden: Matrix,
    pub hidden: Matrix,
    pub mu: Matrix,
    /// Log-variance before clamping; the clamp blocks gradients outside it.
    pub logvar_raw: Matrix,
    pub logvar: Matrix,
}

impl EncoderPass {
    pub fn forward(input: Matrix, enc: &EncoderParams) -> Result<Self> {
        let pre_hidden = affine(&input, &enc.w1, &enc.b1)?;
        let hidden = softplus(&pre_hidden);
        let mu = affine(&hidden, &enc.w_mu, &enc.b_mu)?;
        let logvar_raw = affine(&hidden, &enc.w_lv, &enc.b_lv)?;
        let logvar = logvar_raw.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok(EncoderPass {
            input,
            pre_hidden,
            hidden,
            mu,
            logvar_raw,
            logvar,
        })
    }

    /// Gradients of the encoder parameters given upstream gradients on `mu`
    /// and on the clamped `logvar`.
    pub fn backward(&self, enc: &EncoderParams, d_mu: &Matrix, d_logvar: &Matrix) -> Result<EncoderParams> {
        let mut d_lv_raw = d_logvar.clone();
        for (d, &raw) in d_lv_raw.as_mut_slice().iter_mut().zip(self.logvar_raw.as_slice()) {
            if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&raw) {
                *d = 0.0;
            }
        }
        let g_mu = affine_backward(&self.hidden, &enc.w_mu, d_mu)?;
        let g_lv = affine_backward(&self.hidden, &enc.w_lv, &d_lv_raw)?;
        let mut d_hidden = g_mu.dx;
        d_hidden.add_assign(&g_lv.dx)?;
        let d_pre = softplus_backward(&self.pre_hidden, &d_hidden)?;
        let (w1, b1) = affine_param_grads(&self.input, &d_pre)?;
        Ok(EncoderParams {
            w1,
            b1,
            w_mu: g_mu.dw,
            b_mu: g_mu.db,
            w_lv: g_lv.dw,
            b_lv: g_lv.db,
        })
    }
}

/// Encodes one document to `(mu, logvar)`.
pub fn encode(x: &BowDocument, enc: &EncoderParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let input = normalized_batch(&[x], enc.w1.rows())?;
    let pass = EncoderPass::forward(input, enc)?;
    Ok((pass.mu.row(0).to_vec(), pass.logvar.row(0).to_vec()))
}

/// `z = mu + exp(logvar/2) ⊙ eps`.
pub fn reparameterize(mu: &Matrix, logvar: &Matrix, eps: &Matrix) -> Result<Matrix> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "reparameterize",
            left: mu.shape(),
            right: eps.shape(),
        });
    }
    let mut z = mu.clone();
    for ((zv, &lv), &e) in z.as_mut_slice().iter_mut().zip(logvar.as_slice()).zip(eps.as_slice()) {
        *zv += (0.5 * lv).exp() * e;
    }
    Ok(z)
}

/// Document-topic proportions `softmax(z)`.
pub fn theta(z: &Matrix) -> Matrix {
    softmax(z)
}

/// `B × T` standard normal draws.
pub fn sample_eps<R: Rng>(rows: usize, topics: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * topics)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Matrix::from_vec(rows, topics, data).expect("sized by construction")
}

/// Per-document `−Σ_v x_v · log softmax(θ·β + b)_v`.
pub fn reconstruction_losses(counts: &Matrix, theta_doc: &Matrix, dec: &DecoderParams) -> Result<Vec<f64>> {
    let log_p = log_softmax(&affine(theta_doc, &dec.beta, &dec.b_dec)?);
    Ok((0..counts.rows())
        .map(|i| {
            -counts
                .row(i)
                .iter()
                .zip(log_p.row(i))
                .filter(|(&c, _)| c != 0.0)
                .map(|(&c, &lp)| c * lp)
                .sum::<f64>()
        })
        .collect())
}

pub fn reconstruction_loss(x: &BowDocument, theta_doc: &[f64], dec: &DecoderParams) -> Result<f64> {
    let counts = count_batch(&[x], dec.beta.cols())?;
    let theta_m = Matrix::from_vec(1, theta_doc.len(), theta_doc.to_vec())?;
    Ok(reconstruction_losses(&counts, &theta_m, dec)?[0])
}

/// Closed-form KL to the standard normal prior, `½Σ(μ² + e^lv − lv − 1)`.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Batch ELBO value plus gradients with respect to the latent sample, the
/// encoder outputs and the decoder.
pub struct ElboGrads {
    pub value: ElboBreakdown,
    pub d_z: Matrix,
    pub d_mu: Matrix,
    pub d_logvar: Matrix,
    pub decoder: DecoderParams,
}

/// Mean over the batch of reconstruction + KL, given the latent `z` drawn
/// from `(mu, logvar)`.
pub fn elbo_loss(counts: &Matrix, mu: &Matrix, logvar: &Matrix, z: &Matrix, dec: &DecoderParams) -> Result<ElboBreakdown> {
    let b = counts.rows() as f64;
    let recon: f64 = reconstruction_losses(counts, &theta(z), dec)?.iter().sum::<f64>() / b;
    let kl: f64 = (0..mu.rows()).map(|i| kl_loss(mu.row(i), logvar.row(i))).sum::<f64>() / b;
    Ok(ElboBreakdown {
        loss: recon + kl,
        recon,
        kl,
    })
}

pub fn elbo_forward_backward(
    counts: &Matrix,
    mu: &Matrix,
    logvar: &Matrix,
    z: &Matrix,
    dec: &DecoderParams,
) -> Result<ElboGrads> {
    let b = counts.rows() as f64;
    let theta_doc = theta(z);
    let log_p = log_softmax(&affine(&theta_doc, &dec.beta, &dec.b_dec)?);
    let mut recon = 0.0;
    for i in 0..counts.rows() {
        recon -= counts.row(i).iter().zip(log_p.row(i)).filter(|(&c, _)| c != 0.0).map(|(&c, &lp)| c * lp).sum::<f64>();
    }
    recon /= b;
    let kl: f64 = (0..mu.rows()).map(|i| kl_loss(mu.row(i), logvar.row(i))).sum::<f64>() / b;

    let d_log_p = counts.map(|c| -c / b);
    let d_logits = log_softmax_backward(&log_p, &d_log_p)?;
    let g_dec = affine_backward(&theta_doc, &dec.beta, &d_logits)?;
    let d_z = softmax_backward(&theta_doc, &g_dec.dx)?;
    let d_mu = mu.map(|m| m / b);
    let d_logvar = logvar.map(|lv| 0.5 * (lv.exp() - 1.0) / b);

    Ok(ElboGrads {
        value: ElboBreakdown {
            loss: recon + kl,
            recon,
            kl,
        },
        d_z,
        d_mu,
        d_logvar,
        decoder: DecoderParams {
            beta: g_dec.dw,
            b_dec: g_dec.db,
        },
    })
}

/// Pushes `∂L/∂z` through the reparameterization onto `mu` and `logvar`,
/// treating `eps` as constant, and adds it to the existing upstream terms.
pub fn reparameterize_backward(
    d_z: &Matrix,
    logvar: &Matrix,
    eps: &Matrix,
    d_mu: &mut Matrix,
    d_logvar: &mut Matrix,
) -> Result<()> {
    d_mu.add_assign(d_z)?;
    for (((dl, &dz), &lv), &e) in d_logvar
        .as_mut_slice()
        .iter_mut()
        .zip(d_z.as_slice())
        .zip(logvar.as_slice())
        .zip(eps.as_slice())
    {
        *dl += dz * 0.5 * (0.5 * lv).exp() * e;
    }
    Ok(())
}

/// A full forward pass of one view: encoder outputs, noise and latent.
#[derive(Clone, Debug)]
pub struct ViewPass {
    pub encoder: EncoderPass,
    pub eps: Matrix,
    pub z: Matrix,
}

impl ViewPass {
    pub fn forward(docs: &[&BowDocument], enc: &EncoderParams, eps: Matrix) -> Result<Self> {
        let input = normalized_batch(docs, enc.w1.rows())?;
        let encoder = EncoderPass::forward(input, enc)?;
        let z = reparameterize(&encoder.mu, &encoder.logvar, &eps)?;
        Ok(ViewPass { encoder, eps, z })
    }

    /// Encoder gradient for upstream `∂L/∂z` plus optional direct terms on
    /// `mu` and `logvar`.
    pub fn backward(
        &self,
        enc: &EncoderParams,
        d_z: &Matrix,
        direct: Option<(&Matrix, &Matrix)>,
    ) -> Result<EncoderParams> {
        let (mut d_mu, mut d_lv) = match direct {
            Some((m, l)) => (m.clone(), l.clone()),
            None => (
                Matrix::zeros(d_z.rows(), d_z.cols()),
                Matrix::zeros(d_z.rows(), d_z.cols()),
            ),
        };
        reparameterize_backward(d_z, &self.encoder.logvar, &self.eps, &mut d_mu, &mut d_lv)?;
        self.encoder.backward(enc, &d_mu, &d_lv)
    }
}

/// ELBO of a batch and its gradients with respect to every model parameter,
/// using the supplied noise.
pub fn elbo_with_gradients(
    model: &TopicModel,
    docs: &[&BowDocument],
    eps: Matrix,
) -> Result<(ElboBreakdown, EncoderParams, DecoderParams)> {
    let view = ViewPass::forward(docs, &model.encoder, eps)?;
    let counts = count_batch(docs, model.dims().vocab)?;
    let g = elbo_forward_backward(&counts, &view.encoder.mu, &view.encoder.logvar, &view.z, &model.decoder)?;
    let enc = view.backward(&model.encoder, &g.d_z, Some((&g.d_mu, &g.d_logvar)))?;
    Ok((g.value, enc, g.decoder))
}

/// Mean-path (`eps = 0`) document-topic proportions.
pub fn infer_theta(model: &TopicModel, docs: &[&BowDocument]) -> Result<Matrix> {
    let input = normalized_batch(docs, model.dims().vocab)?;
    let pass = EncoderPass::forward(input, &model.encoder)?;
    Ok(theta(&pass.mu))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicList {
    /// Word indices per topic, by descending weight.
    pub topics: Vec<Vec<usize>>,
    pub n: usize,
}

impl TopicList {
    pub fn num_topics(&self) -> usize {
        self.topics.len()
    }

    /// One topic per line, words separated by spaces.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for topic in &self.topics {
            let words: Vec<&str> = topic.iter().map(|&i| vocab.word(i)).collect();
            out.push_str(&words.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses a topics file. Unknown words are a data error.
    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut topics = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let topic = line
                .split_whitespace()
                .map(|w| {
                    vocab.get(w).ok_or_else(|| Error::Parse {
                        path: "topics".into(),
                        line: n + 1,
                        reason: format!("word '{w}' is not in the vocabulary"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            topics.push(topic);
        }
        let n = topics.first().map_or(0, Vec::len);
        if let Some(bad) = topics.iter().position(|t| t.len() != n) {
            return Err(Error::Parse {
                path: "topics".into(),
                line: bad + 1,
                reason: format!("expected {n} words per topic"),
            });
        }
        Ok(TopicList { topics, n })
    }
}

/// Top `n` words of every topic by `beta` weight; ties go to the
/// lexicographically smaller word.
pub fn top_words(dec: &DecoderParams, n: usize, vocab: &Vocabulary) -> Result<TopicList> {
    let v = dec.beta.cols();
    if n > v || v != vocab.len() {
        return Err(Error::invalid(format!(
            "top_words: n={n}, decoder vocabulary {v}, vocabulary {}",
            vocab.len()
        )));
    }
    let topics = (0..dec.beta.rows())
        .map(|t| {
            let row = dec.beta.row(t);
            let mut idx: Vec<usize> = (0..v).collect();
            idx.sort_by(|&a, &b| {
                row[b]
                    .total_cmp(&row[a])
                    .then_with(|| vocab.word(a).cmp(vocab.word(b)))
            });
            idx.truncate(n);
            idx
        })
        .collect();
    Ok(TopicList { topics, n })
}
