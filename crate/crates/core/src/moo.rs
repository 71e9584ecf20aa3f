//! Combining the contrastive and ELBO encoder gradients into one update
//! direction.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::GradientVector;
use crate::error::{Error, Result};

pub const DEFAULT_TIE_EPS: f64 = 1e-12;

/// `h(α) = ‖α·g1 + (1−α)·g2‖²`.
pub fn blended_norm_sq(g1: &[f64], g2: &[f64], alpha: f64) -> f64 {
    g1.iter()
        .zip(g2)
        .map(|(&a, &b)| {
            let d = alpha * a + (1.0 - alpha) * b;
            d * d
        })
        .sum()
}

fn check_lengths(g1: &GradientVector, g2: &GradientVector) -> Result<()> {
    if g1.len() != g2.len() {
        return Err(Error::invalid(format!(
            "gradient lengths differ: {} vs {}",
            g1.len(),
            g2.len()
        )));
    }
    Ok(())
}

/// Exact minimizer of `h(α)` over `[0, 1]`:
/// `α* = clip((g2 − g1)ᵀg2 / ‖g1 − g2‖², 0, 1)`, or 0.5 when the two
/// gradients (nearly) coincide.
pub fn alpha_min_norm(g1: &GradientVector, g2: &GradientVector, tie_eps: f64) -> Result<f64> {
    check_lengths(g1, g2)?;
    let mut diff_sq = 0.0;
    let mut num = 0.0;
    for (&a, &b) in g1.values.iter().zip(&g2.values) {
        let d = b - a;
        diff_sq += d * d;
        num += d * b;
    }
    if diff_sq < tie_eps {
        return Ok(0.5);
    }
    Ok((num / diff_sq).clamp(0.0, 1.0))
}

/// Brute-force minimizer of `h(α)` over `steps + 1` evenly spaced points of
/// `[0, 1]`. The lowest α wins ties.
pub fn alpha_grid_oracle(g1: &GradientVector, g2: &GradientVector, steps: usize) -> Result<f64> {
    check_lengths(g1, g2)?;
    if steps < 100 {
        return Err(Error::invalid(format!("grid oracle needs at least 100 steps, got {steps}")));
    }
    // h is quadratic in α: expand once instead of re-summing per grid point
    let (mut aa, mut ab, mut bb) = (0.0, 0.0, 0.0);
    for (&a, &b) in g1.values.iter().zip(&g2.values) {
        aa += a * a;
        ab += a * b;
        bb += b * b;
    }
    let h = |alpha: f64| {
        let beta = 1.0 - alpha;
        alpha * alpha * aa + 2.0 * alpha * beta * ab + beta * beta * bb
    };
    let mut best = (0.0, h(0.0));
    for i in 1..=steps {
        let alpha = i as f64 / steps as f64;
        let value = h(alpha);
        if value < best.1 {
            best = (alpha, value);
        }
    }
    Ok(best.0)
}

/// `α·g1 + (1−α)·g2`; the endpoints return a copy of the selected gradient.
pub fn blend(g1: &GradientVector, g2: &GradientVector, alpha: f64) -> Result<GradientVector> {
    check_lengths(g1, g2)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("blend weight must lie in [0, 1], got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(g2.clone());
    }
    if alpha == 1.0 {
        return Ok(g1.clone());
    }
    let values = g1
        .values
        .iter()
        .zip(&g2.values)
        .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    Ok(GradientVector::new(values, g1.layout_id.clone()))
}

/// Two-task PCGrad: when the gradients conflict, each is projected onto the
/// normal plane of the other (using the original gradients) and the
/// projections are summed.
pub fn pcgrad(g1: &GradientVector, g2: &GradientVector) -> Result<GradientVector> {
    check_lengths(g1, g2)?;
    let dot = g1.dot(g2);
    let (n1, n2) = (g1.norm_sq(), g2.norm_sq());
    let values = if dot < 0.0 && n1 > 0.0 && n2 > 0.0 {
        let (c1, c2) = (dot / n2, dot / n1);
        g1.values
            .iter()
            .zip(&g2.values)
            .map(|(&a, &b)| (a - c1 * b) + (b - c2 * a))
            .collect()
    } else {
        g1.values.iter().zip(&g2.values).map(|(&a, &b)| a + b).collect()
    };
    Ok(GradientVector::new(values, g1.layout_id.clone()))
}

/// Random weighting: two uniform draws pushed through a softmax.
pub fn random_alpha<R: Rng>(rng: &mut R) -> f64 {
    let w1: f64 = rng.random();
    let w2: f64 = rng.random();
    let (e1, e2) = (w1.exp(), w2.exp());
    e1 / (e1 + e2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum Strategy {
    Mgda,
    Linear { alpha: f64 },
    Random,
    Pcgrad,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Mgda => "mgda",
            Strategy::Linear { .. } => "linear",
            Strategy::Random => "random",
            Strategy::Pcgrad => "pcgrad",
        }
    }

    /// Resolves a strategy name; `linear_alpha` is only used by `linear`.
    pub fn from_name(name: &str, linear_alpha: f64) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mgda" => Ok(Strategy::Mgda),
            "linear" => {
                if !(0.0..=1.0).contains(&linear_alpha) {
                    return Err(Error::invalid(format!(
                        "moo.linear_alpha must lie in [0, 1], got {linear_alpha}"
                    )));
                }
                Ok(Strategy::Linear { alpha: linear_alpha })
            }
            "random" => Ok(Strategy::Random),
            "pcgrad" => Ok(Strategy::Pcgrad),
            other => Err(Error::invalid(format!(
                "unknown moo strategy '{other}' (expected mgda|linear|random|pcgrad)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::from_name(s, 0.5)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlendDiagnostics {
    pub g1_norm: f64,
    pub g2_norm: f64,
    pub direction_norm: f64,
    pub g1_dot_g2: f64,
    /// `‖g1 − g2‖²` fell below the tie tolerance, so every α is optimal.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendDecision {
    /// Weight on `g1`; `None` for PCGrad, which is not a convex combination.
    pub alpha: Option<f64>,
    pub direction: GradientVector,
    pub strategy: Strategy,
    pub diagnostics: BlendDiagnostics,
}

/// Chooses α (or a surgery direction) for `g1` = contrastive gradient and
/// `g2` = ELBO gradient.
pub fn strategy_dispatch<R: Rng>(
    strategy: Strategy,
    g1: &GradientVector,
    g2: &GradientVector,
    tie_eps: f64,
    rng: &mut R,
) -> Result<BlendDecision> {
    check_lengths(g1, g2)?;
    let g1_dot_g2 = g1.dot(g2);
    let (n1, n2) = (g1.norm_sq(), g2.norm_sq());
    let degenerate = (n1 - 2.0 * g1_dot_g2 + n2) < tie_eps;
    let (alpha, direction) = match strategy {
        Strategy::Mgda => {
            let a = alpha_min_norm(g1, g2, tie_eps)?;
            (Some(a), blend(g1, g2, a)?)
        }
        Strategy::Linear { alpha } => (Some(alpha), blend(g1, g2, alpha)?),
        Strategy::Random => {
            let a = random_alpha(rng);
            (Some(a), blend(g1, g2, a)?)
        }
        Strategy::Pcgrad => (None, pcgrad(g1, g2)?),
    };
    Ok(BlendDecision {
        alpha,
        diagnostics: BlendDiagnostics {
            g1_norm: n1.sqrt(),
            g2_norm: n2.sqrt(),
            direction_norm: direction.norm(),
            g1_dot_g2,
            degenerate,
        },
        direction,
        strategy,
    })
}
