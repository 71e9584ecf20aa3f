//! Built-in numerical checks: gradients against finite differences, the
//! closed-form MGDA weight against a grid search, and metric identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::BowDocument;
use crate::diffnet::{grad_check, GradCheckOptions, GradientVector};
use crate::error::Result;
use crate::eval::{js_divergence, npmi, topic_diversity, CooccurrenceStats, NPMI_EPS};
use crate::moo::{alpha_grid_oracle, alpha_min_norm, blend, DEFAULT_TIE_EPS};
use crate::ntm::{
    count_batch, elbo_loss, elbo_with_gradients, sample_eps, DecoderParams, EncoderParams, ModelDims, TopicList,
    TopicModel, ViewPass,
};
use crate::setcl::{build_index_matrix, build_sets, setwise_infonce_with_grad, ContrastConfig, DocumentSet};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, result: Result<(bool, String)>) {
        let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

fn random_document<R: Rng>(vocab: usize, rng: &mut R) -> BowDocument {
    let n = rng.random_range(2..=vocab.min(12));
    BowDocument::from_counts((0..n).map(|_| (rng.random_range(0..vocab), rng.random_range(1..4u32))))
}

/// Worst relative errors of the full-model gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub elbo: f64,
    pub infonce: f64,
}

fn concat(enc: &EncoderParams, dec: &DecoderParams) -> Vec<f64> {
    let mut v = enc.flatten().values;
    v.extend(dec.flatten().values);
    v
}

fn split(template: &TopicModel, params: &[f64]) -> Result<TopicModel> {
    let mut m = template.clone();
    let n = m.dims().encoder_len();
    m.encoder.assign(&params[..n])?;
    m.decoder.assign(&params[n..])?;
    Ok(m)
}

/// Checks the ELBO and setwise InfoNCE gradients of a random model with
/// respect to every encoder and decoder parameter, with the noise and the
/// index matrix held fixed.
pub fn model_gradient_check(
    dims: ModelDims,
    batch: usize,
    set_size: usize,
    shuffles: usize,
    opts: &GradCheckOptions,
) -> Result<ModelGradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let model = TopicModel::init(dims, &mut rng);
    let docs: Vec<BowDocument> = (0..3 * batch).map(|_| random_document(dims.vocab, &mut rng)).collect();
    let views: [Vec<&BowDocument>; 3] = [0, 1, 2].map(|k| docs[k * batch..(k + 1) * batch].iter().collect());
    let eps: Vec<_> = (0..3).map(|_| sample_eps(batch, dims.topics, &mut rng)).collect();
    let sets: Vec<DocumentSet> = build_sets(&build_index_matrix(batch, shuffles, &mut rng)?, set_size)?;
    let cfg = ContrastConfig::default();
    let params = concat(&model.encoder, &model.decoder);

    let elbo_at = |p: &[f64]| -> Result<f64> {
        let m = split(&model, p)?;
        let v = ViewPass::forward(&views[0], &m.encoder, eps[0].clone())?;
        let counts = count_batch(&views[0], dims.vocab)?;
        Ok(elbo_loss(&counts, &v.encoder.mu, &v.encoder.logvar, &v.z, &m.decoder)?.loss)
    };
    let elbo_grad = |p: &[f64]| -> Result<Vec<f64>> {
        let m = split(&model, p)?;
        let (_, ge, gd) = elbo_with_gradients(&m, &views[0], eps[0].clone())?;
        Ok(concat(&ge, &gd))
    };
    let elbo = grad_check(elbo_at, elbo_grad, &params, opts)?;

    let passes = |m: &TopicModel| -> Result<Vec<ViewPass>> {
        (0..3)
            .map(|k| ViewPass::forward(&views[k], &m.encoder, eps[k].clone()))
            .collect()
    };
    let infonce_at = |p: &[f64]| -> Result<f64> {
        let v = passes(&split(&model, p)?)?;
        Ok(setwise_infonce_with_grad(&sets, &v[0].z, &v[1].z, &v[2].z, &cfg)?.loss)
    };
    let infonce_grad = |p: &[f64]| -> Result<Vec<f64>> {
        let m = split(&model, p)?;
        let v = passes(&m)?;
        let out = setwise_infonce_with_grad(&sets, &v[0].z, &v[1].z, &v[2].z, &cfg)?;
        let mut g = v[0].backward(&m.encoder, &out.d_z, None)?;
        g.add_assign(&v[1].backward(&m.encoder, &out.d_z_plus, None)?)?;
        g.add_assign(&v[2].backward(&m.encoder, &out.d_z_minus, None)?)?;
        Ok(concat(&g, &DecoderParams::zeros(dims)))
    };
    let infonce = grad_check(infonce_at, infonce_grad, &params, opts)?;
    Ok(ModelGradCheck { elbo, infonce })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolverCheck {
    pub pairs: usize,
    pub interior: usize,
    pub max_oracle_gap: f64,
    pub max_kkt_residual: f64,
    pub norm_bound_violations: usize,
}

/// Random gradient pairs with unit-scale norms. A third of them are made
/// strongly aligned so clipped solutions show up too.
pub fn random_gradient_pair<R: Rng>(dim: usize, rng: &mut R) -> (GradientVector, GradientVector) {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect() };
    let g1 = draw();
    let mut g2 = draw();
    if dim % 3 == 0 {
        for (b, a) in g2.iter_mut().zip(&g1) {
            *b = 2.0 * a + 0.2 * *b;
        }
    }
    (GradientVector::new(g1, "pair"), GradientVector::new(g2, "pair"))
}

pub fn solver_oracle_check(pairs: usize, min_dim: usize, max_dim: usize, grid_steps: usize, seed: u64) -> Result<SolverCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SolverCheck {
        pairs,
        ..Default::default()
    };
    for _ in 0..pairs {
        let dim = rng.random_range(min_dim..=max_dim);
        let (g1, g2) = random_gradient_pair(dim, &mut rng);
        let alpha = alpha_min_norm(&g1, &g2, DEFAULT_TIE_EPS)?;
        let grid = alpha_grid_oracle(&g1, &g2, grid_steps)?;
        out.max_oracle_gap = out.max_oracle_gap.max((alpha - grid).abs());
        let d = blend(&g1, &g2, alpha)?;
        let dd = d.norm_sq();
        if alpha > 0.0 && alpha < 1.0 {
            out.interior += 1;
            let r = (d.dot(&g1) - dd).abs().max((d.dot(&g2) - dd).abs());
            out.max_kkt_residual = out.max_kkt_residual.max(r);
        }
        if d.norm() > g1.norm().min(g2.norm()) * (1.0 + 1e-12) {
            out.norm_bound_violations += 1;
        }
    }
    Ok(out)
}

fn docs(lists: &[&[usize]]) -> Vec<BowDocument> {
    lists.iter().map(|l| BowDocument::from_counts(l.iter().map(|&w| (w, 1)))).collect()
}

/// NPMI of the pair `{0, 1}` on three constructed corpora: always together,
/// independent, never together.
pub fn npmi_identity_values() -> Result<[f64; 3]> {
    let pair = TopicList {
        topics: vec![vec![0, 1]],
        n: 2,
    };
    let cases = [
        docs(&[&[0, 1], &[0, 1], &[2], &[3]]),
        docs(&[&[0, 1], &[0], &[1], &[2]]),
        docs(&[&[0], &[0], &[1], &[1]]),
    ];
    let mut out = [0.0; 3];
    for (o, c) in out.iter_mut().zip(&cases) {
        *o = npmi(&pair, &CooccurrenceStats::from_documents(c, None), NPMI_EPS)?.mean;
    }
    Ok(out)
}

pub fn run_selftest() -> SelftestReport {
    let mut report = SelftestReport::default();
    let dims = ModelDims {
        vocab: 50,
        hidden: 16,
        topics: 8,
    };
    report.push(
        "model gradients (ELBO, setwise InfoNCE)",
        model_gradient_check(dims, 12, 3, 2, &GradCheckOptions { seed: 7, ..Default::default() }).map(|g| {
            (
                g.elbo < 1e-4 && g.infonce < 1e-4,
                format!("max relative error elbo={:.2e} infonce={:.2e}", g.elbo, g.infonce),
            )
        }),
    );
    report.push(
        "MGDA closed form vs grid oracle",
        solver_oracle_check(200, 2, 1000, 10_000, 11).map(|s| {
            (
                s.max_oracle_gap <= 1e-4 && s.max_kkt_residual <= 1e-8 && s.norm_bound_violations == 0,
                format!(
                    "{} pairs ({} interior): max |alpha - grid|={:.2e}, max KKT residual={:.2e}, norm-bound violations={}",
                    s.pairs, s.interior, s.max_oracle_gap, s.max_kkt_residual, s.norm_bound_violations
                ),
            )
        }),
    );
    report.push(
        "NPMI identities",
        npmi_identity_values().map(|[a, b, c]| {
            (
                (a - 1.0).abs() < 1e-9 && b.abs() < 1e-9 && c < -0.9,
                format!("together={a:.6} independent={b:.6} apart={c:.6}"),
            )
        }),
    );
    let disjoint = TopicList {
        topics: vec![vec![0, 1], vec![2, 3], vec![4, 5]],
        n: 2,
    };
    let identical = TopicList {
        topics: vec![vec![0, 1]; 3],
        n: 2,
    };
    report.push(
        "topic diversity identities",
        topic_diversity(&disjoint)
            .and_then(|a| Ok((a, topic_diversity(&identical)?)))
            .map(|(a, b)| (a == 1.0 && (b - 1.0 / 3.0).abs() < 1e-15, format!("disjoint={a} identical={b:.6}"))),
    );
    report.push(
        "JS divergence identities",
        js_divergence(&[0.2, 0.8], &[0.2, 0.8])
            .and_then(|a| Ok((a, js_divergence(&[1.0, 0.0], &[0.0, 1.0])?)))
            .map(|(a, b)| {
                (
                    a == 0.0 && (b - std::f64::consts::LN_2).abs() < 1e-12,
                    format!("identical={a} disjoint={b:.12}"),
                )
            }),
    );
    report
}
