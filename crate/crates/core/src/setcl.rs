//! Setwise contrastive objective.
//!
//! A batch of `B` documents is shuffled `S` times; each shuffled row is cut
//! into consecutive blocks of `K` documents. Every block yields four pooled
//! vectors (anchor pooled both ways, positive view, negative view) and the
//! loss contrasts each set's positive pair against the negative views of all
//! other sets.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffnet::{cosine_sim_tau_grad, pool, pool_backward, Matrix, PoolMode, Pooled};
use crate::error::{Error, Result};

/// `S` rows, each a permutation of `0..B`. Row 0 is the identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMatrix {
    pub rows: Vec<Vec<usize>>,
}

impl IndexMatrix {
    pub fn shuffle_count(&self) -> usize {
        self.rows.len()
    }

    pub fn batch_size(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

pub fn build_index_matrix<R: Rng>(batch_size: usize, shuffles: usize, rng: &mut R) -> Result<IndexMatrix> {
    if batch_size == 0 || shuffles == 0 {
        return Err(Error::invalid(format!(
            "index matrix needs B ≥ 1 and S ≥ 1, got B={batch_size}, S={shuffles}"
        )));
    }
    let identity: Vec<usize> = (0..batch_size).collect();
    let mut rows = vec![identity.clone()];
    for _ in 1..shuffles {
        let mut row = identity.clone();
        row.shuffle(rng);
        rows.push(row);
    }
    Ok(IndexMatrix { rows })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentSet {
    /// Batch positions of the members.
    pub members: Vec<usize>,
    pub shuffle_row: usize,
    pub set_column: usize,
}

/// Consecutive non-overlapping blocks of `K` per row; the `B mod K` leftover
/// positions of each row are dropped.
pub fn build_sets(m: &IndexMatrix, set_size: usize) -> Result<Vec<DocumentSet>> {
    let b = m.batch_size();
    if set_size == 0 || set_size > b {
        return Err(Error::invalid(format!(
            "set size K={set_size} must satisfy 1 ≤ K ≤ B={b}"
        )));
    }
    let mut sets = Vec::with_capacity(m.shuffle_count() * (b / set_size));
    for (s, row) in m.rows.iter().enumerate() {
        for (j, block) in row.chunks_exact(set_size).enumerate() {
            sets.push(DocumentSet {
                members: block.to_vec(),
                shuffle_row: s,
                set_column: j,
            });
        }
    }
    Ok(sets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingConfig {
    /// Applied to the anchor for the positive pair and to the positive view.
    pub positive: PoolMode,
    /// Applied to the anchor for negative pairs and to the negative view.
    pub negative: PoolMode,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            positive: PoolMode::Min,
            negative: PoolMode::Max,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetRepresentation {
    /// Anchor pooled with the negative-side pooling (max by default).
    pub s_phi_minus: Vec<f64>,
    /// Anchor pooled with the positive-side pooling (min by default).
    pub s_phi_plus: Vec<f64>,
    pub s_minus: Vec<f64>,
    pub s_plus: Vec<f64>,
}

struct PooledSet {
    phi_minus: Pooled,
    phi_plus: Pooled,
    minus: Pooled,
    plus: Pooled,
}

impl PooledSet {
    fn representation(&self) -> SetRepresentation {
        SetRepresentation {
            s_phi_minus: self.phi_minus.value.clone(),
            s_phi_plus: self.phi_plus.value.clone(),
            s_minus: self.minus.value.clone(),
            s_plus: self.plus.value.clone(),
        }
    }
}

fn member_rows<'a>(set: &DocumentSet, m: &'a Matrix, view: &str) -> Result<Vec<&'a [f64]>> {
    set.members
        .iter()
        .map(|&i| {
            if i < m.rows() {
                Ok(m.row(i))
            } else {
                Err(Error::invalid(format!(
                    "set member {i} has no {view} topic vector ({} available)",
                    m.rows()
                )))
            }
        })
        .collect()
}

fn pool_set(set: &DocumentSet, z: &Matrix, z_plus: &Matrix, z_minus: &Matrix, pooling: PoolingConfig) -> Result<PooledSet> {
    let anchor = member_rows(set, z, "anchor")?;
    Ok(PooledSet {
        phi_minus: pool(&anchor, pooling.negative)?,
        phi_plus: pool(&anchor, pooling.positive)?,
        minus: pool(&member_rows(set, z_minus, "negative-view")?, pooling.negative)?,
        plus: pool(&member_rows(set, z_plus, "positive-view")?, pooling.positive)?,
    })
}

pub fn set_representations(
    set: &DocumentSet,
    z: &Matrix,
    z_plus: &Matrix,
    z_minus: &Matrix,
    pooling: PoolingConfig,
) -> Result<SetRepresentation> {
    Ok(pool_set(set, z, z_plus, z_minus, pooling)?.representation())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub pooling: PoolingConfig,
    /// Also count each set's own negative view in its denominator.
    pub include_own_negative: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.2,
            pooling: PoolingConfig::default(),
            include_own_negative: false,
        }
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Summed setwise InfoNCE over already-pooled representations.
pub fn setwise_infonce(reps: &[SetRepresentation], temperature: f64, include_own_negative: bool) -> Result<f64> {
    if reps.is_empty() {
        return Err(Error::invalid("setwise InfoNCE needs at least one set"));
    }
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(reps.len());
    for (i, r) in reps.iter().enumerate() {
        logits.clear();
        let pos = crate::diffnet::cosine_sim_tau(&r.s_phi_plus, &r.s_plus, temperature)?;
        logits.push(pos);
        for (q, other) in reps.iter().enumerate() {
            if q != i || include_own_negative {
                logits.push(crate::diffnet::cosine_sim_tau(&r.s_phi_minus, &other.s_minus, temperature)?);
            }
        }
        total += log_sum_exp(&logits) - pos;
    }
    Ok(total)
}

/// Loss and gradients with respect to the three views' topic vectors.
pub struct ContrastOutput {
    pub loss: f64,
    pub d_z: Matrix,
    pub d_z_plus: Matrix,
    pub d_z_minus: Matrix,
}

/// Normalized vector and norm, shared by every cosine involving it.
struct Unit {
    dir: Vec<f64>,
    norm: f64,
}

impl Unit {
    fn new(v: &[f64]) -> Result<Self> {
        let norm = crate::diffnet::norm(v);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm("setwise InfoNCE"));
        }
        Ok(Unit {
            dir: v.iter().map(|x| x / norm).collect(),
            norm,
        })
    }
}

fn scatter(pooled: &Pooled, upstream: &[f64], set: &DocumentSet, into: &mut Matrix) {
    for (&member, g) in set.members.iter().zip(pool_backward(pooled, upstream)) {
        for (d, v) in into.row_mut(member).iter_mut().zip(g) {
            *d += v;
        }
    }
}

/// Setwise InfoNCE for a batch plus its gradient on `z`, `z⁺` and `z⁻`.
///
/// For set `i`: `L_i = −a_i + log(e^{a_i} + Σ_{q≠i} e^{n_iq})` with
/// `a_i = f(s^{φ+}_i, s^+_i)` and `n_iq = f(s^{φ−}_i, s^−_q)`.
pub fn setwise_infonce_with_grad(
    sets: &[DocumentSet],
    z: &Matrix,
    z_plus: &Matrix,
    z_minus: &Matrix,
    cfg: &ContrastConfig,
) -> Result<ContrastOutput> {
    if sets.is_empty() {
        return Err(Error::invalid("setwise InfoNCE needs at least one set"));
    }
    let tau = cfg.temperature;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let pooled: Vec<PooledSet> = sets
        .iter()
        .map(|s| pool_set(s, z, z_plus, z_minus, cfg.pooling))
        .collect::<Result<_>>()?;
    let anchors_neg: Vec<Unit> = pooled.iter().map(|p| Unit::new(&p.phi_minus.value)).collect::<Result<_>>()?;
    let negatives: Vec<Unit> = pooled.iter().map(|p| Unit::new(&p.minus.value)).collect::<Result<_>>()?;

    let n = sets.len();
    let dim = z.cols();
    let mut d_anchor_neg = vec![vec![0.0; dim]; n];
    let mut d_negative = vec![vec![0.0; dim]; n];
    let mut d_anchor_pos = vec![vec![0.0; dim]; n];
    let mut d_positive = vec![vec![0.0; dim]; n];
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(n + 1);
    let mut cosines = Vec::with_capacity(n);

    for i in 0..n {
        let (pos, du, dv) = cosine_sim_tau_grad(&pooled[i].phi_plus.value, &pooled[i].plus.value, tau)?;
        logits.clear();
        cosines.clear();
        logits.push(pos);
        let a = &anchors_neg[i];
        for (q, neg) in negatives.iter().enumerate() {
            if q == i && !cfg.include_own_negative {
                continue;
            }
            let c = crate::diffnet::dot(&a.dir, &neg.dir);
            cosines.push((q, c));
            logits.push(c / tau);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
        }
        let total: f64 = logits.iter().sum();
        loss += max + total.ln() - pos;

        // ∂L_i/∂a_i = p_pos − 1, ∂L_i/∂n_iq = p_q
        let w_pos = logits[0] / total - 1.0;
        for (t, (&gu, &gv)) in du.iter().zip(&dv).enumerate() {
            d_anchor_pos[i][t] += w_pos * gu;
            d_positive[i][t] += w_pos * gv;
        }
        for (k, &(q, c)) in cosines.iter().enumerate() {
            let w = logits[k + 1] / total;
            if w == 0.0 {
                continue;
            }
            let neg = &negatives[q];
            let su = w / (a.norm * tau);
            let sv = w / (neg.norm * tau);
            for t in 0..dim {
                d_anchor_neg[i][t] += su * (neg.dir[t] - c * a.dir[t]);
                d_negative[q][t] += sv * (a.dir[t] - c * neg.dir[t]);
            }
        }
    }

    let mut d_z = Matrix::zeros(z.rows(), dim);
    let mut d_z_plus = Matrix::zeros(z_plus.rows(), dim);
    let mut d_z_minus = Matrix::zeros(z_minus.rows(), dim);
    for (i, (set, p)) in sets.iter().zip(&pooled).enumerate() {
        scatter(&p.phi_minus, &d_anchor_neg[i], set, &mut d_z);
        scatter(&p.phi_plus, &d_anchor_pos[i], set, &mut d_z);
        scatter(&p.minus, &d_negative[i], set, &mut d_z_minus);
        scatter(&p.plus, &d_positive[i], set, &mut d_z_plus);
    }
    Ok(ContrastOutput {
        loss,
        d_z,
        d_z_plus,
        d_z_minus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{grad_check, GradCheckOptions};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rep(phi_minus: &[f64], phi_plus: &[f64], minus: &[f64], plus: &[f64]) -> SetRepresentation {
        SetRepresentation {
            s_phi_minus: phi_minus.to_vec(),
            s_phi_plus: phi_plus.to_vec(),
            s_minus: minus.to_vec(),
            s_plus: plus.to_vec(),
        }
    }

    #[test]
    fn index_matrix_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(build_index_matrix(4, 1, &mut rng).unwrap().rows, vec![vec![0, 1, 2, 3]]);
        let m = build_index_matrix(4, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(m, build_index_matrix(4, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap());
        for row in &m.rows {
            let mut r = row.clone();
            r.sort();
            assert_eq!(r, vec![0, 1, 2, 3]);
        }
        assert_eq!(build_index_matrix(1, 5, &mut rng).unwrap().rows, vec![vec![0]; 5]);
        assert!(build_index_matrix(0, 1, &mut rng).is_err());
    }

    #[test]
    fn set_count_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = build_index_matrix(200, 8, &mut rng).unwrap();
        assert_eq!(build_sets(&m, 4).unwrap().len(), 400);

        let m = build_index_matrix(5, 1, &mut rng).unwrap();
        let sets = build_sets(&m, 2).unwrap();
        assert_eq!(sets.len(), 2);
        assert!(sets.iter().all(|s| !s.members.contains(&4)));

        let m = build_index_matrix(6, 3, &mut rng).unwrap();
        assert_eq!(build_sets(&m, 1).unwrap().len(), 18);
        assert!(build_sets(&m, 7).is_err());
    }

    #[test]
    fn set_count_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for b in 1..=24 {
            for k in 1..=b {
                for s in 1..=4 {
                    let m = build_index_matrix(b, s, &mut rng).unwrap();
                    assert_eq!(build_sets(&m, k).unwrap().len(), s * (b / k));
                }
            }
        }
    }

    #[test]
    fn representation_examples() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let set = DocumentSet { members: vec![0, 1], shuffle_row: 0, set_column: 0 };
        let r = set_representations(&set, &z, &z, &z, PoolingConfig::default()).unwrap();
        assert_eq!(r.s_phi_minus, vec![1.0, 1.0]);
        assert_eq!(r.s_phi_plus, vec![0.0, 0.0]);

        let single = DocumentSet { members: vec![1], shuffle_row: 0, set_column: 0 };
        let zp = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let zm = Matrix::from_rows(&[vec![-1.0, 2.0], vec![3.0, -4.0]]).unwrap();
        for mode in [PoolMode::Min, PoolMode::Max, PoolMode::Mean, PoolMode::Sum] {
            let pooling = PoolingConfig { positive: mode, negative: mode };
            let r = set_representations(&single, &z, &zp, &zm, pooling).unwrap();
            assert_eq!(r.s_phi_minus, vec![0.0, 1.0]);
            assert_eq!(r.s_phi_plus, vec![0.0, 1.0]);
            assert_eq!(r.s_plus, vec![7.0, 8.0]);
            assert_eq!(r.s_minus, vec![3.0, -4.0]);
        }

        let zz = Matrix::from_rows(&[vec![2.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let mean = PoolingConfig { positive: PoolMode::Mean, negative: PoolMode::Mean };
        assert_eq!(set_representations(&set, &zz, &zz, &zz, mean).unwrap().s_plus, vec![1.0, 1.0]);

        let missing = DocumentSet { members: vec![0, 9], shuffle_row: 0, set_column: 0 };
        assert!(set_representations(&missing, &z, &z, &z, PoolingConfig::default()).is_err());
    }

    #[test]
    fn single_set_loss_is_zero() {
        let r = rep(&[1.0, 0.5], &[0.3, 0.1], &[0.2, 0.9], &[1.0, 1.0]);
        assert_eq!(setwise_infonce(&[r], 0.2, false).unwrap(), 0.0);
    }

    #[test]
    fn two_set_closed_form() {
        // f_pos = 1/0.2 = 5 for both sets; negatives orthogonal → f_neg = 0
        let a = rep(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]);
        let b = rep(&[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]);
        let loss = setwise_infonce(&[a, b], 0.2, false).unwrap();
        let want = 2.0 * (1.0 + (-5.0f64).exp()).ln();
        assert_abs_diff_eq!(loss, want, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.0134, epsilon = 1e-4);
    }

    #[test]
    fn loss_is_nonnegative_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let reps: Vec<SetRepresentation> = (0..5)
                .map(|_| {
                    let v = |rng: &mut ChaCha8Rng| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
                    rep(&v(&mut rng), &v(&mut rng), &v(&mut rng), &v(&mut rng))
                })
                .collect();
            let base = setwise_infonce(&reps, 0.5, false).unwrap();
            assert!(base >= 0.0);

            // raise positive similarity of set 0 by moving s_plus toward s_phi_plus
            let mut up = reps.clone();
            let target = up[0].s_phi_plus.clone();
            for (p, t) in up[0].s_plus.iter_mut().zip(&target) {
                *p = 0.5 * *p + 0.5 * t;
            }
            let before = crate::diffnet::cosine_sim_tau(&reps[0].s_phi_plus, &reps[0].s_plus, 0.5).unwrap();
            let after = crate::diffnet::cosine_sim_tau(&up[0].s_phi_plus, &up[0].s_plus, 0.5).unwrap();
            if after > before {
                assert!(setwise_infonce(&up, 0.5, false).unwrap() < base);
            }

            // with two sets, set 1's negative view only enters set 0's denominator
            let pair = reps[..2].to_vec();
            let base2 = setwise_infonce(&pair, 0.5, false).unwrap();
            let mut worse = pair.clone();
            worse[1].s_minus = worse[0].s_phi_minus.clone();
            let before = crate::diffnet::cosine_sim_tau(&pair[0].s_phi_minus, &pair[1].s_minus, 0.5).unwrap();
            if before < 1.0 / 0.5 - 1e-9 {
                assert!(setwise_infonce(&worse, 0.5, false).unwrap() > base2);
            }
        }
    }

    /// Direct instance-wise InfoNCE with the same anchor convention.
    fn instance_infonce(z: &Matrix, zp: &Matrix, zm: &Matrix, tau: f64) -> f64 {
        let f = |u: &[f64], v: &[f64]| crate::diffnet::cosine_sim_tau(u, v, tau).unwrap();
        (0..z.rows())
            .map(|i| {
                let pos = f(z.row(i), zp.row(i)).exp();
                let neg: f64 = (0..z.rows()).filter(|&j| j != i).map(|j| f(z.row(i), zm.row(j)).exp()).sum();
                -(pos / (pos + neg)).ln()
            })
            .sum()
    }

    #[test]
    fn k1_s1_reduces_to_instance_infonce() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let b = rng.random_range(2..10);
            let z = Matrix::uniform(b, 4, 2.0, &mut rng);
            let zp = Matrix::uniform(b, 4, 2.0, &mut rng);
            let zm = Matrix::uniform(b, 4, 2.0, &mut rng);
            let sets = build_sets(&build_index_matrix(b, 1, &mut rng).unwrap(), 1).unwrap();
            let cfg = ContrastConfig { temperature: 0.3, ..Default::default() };
            let got = setwise_infonce_with_grad(&sets, &z, &zp, &zm, &cfg).unwrap().loss;
            let want = instance_infonce(&z, &zp, &zm, 0.3);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (include_own, pooling) in [
            (false, PoolingConfig::default()),
            (true, PoolingConfig { positive: PoolMode::Mean, negative: PoolMode::Sum }),
        ] {
            let (b, t) = (9, 4);
            let sets = build_sets(&build_index_matrix(b, 3, &mut rng).unwrap(), 3).unwrap();
            let cfg = ContrastConfig { temperature: 0.2, pooling, include_own_negative: include_own };
            let split = |p: &[f64]| {
                (
                    Matrix::from_vec(b, t, p[..b * t].to_vec()).unwrap(),
                    Matrix::from_vec(b, t, p[b * t..2 * b * t].to_vec()).unwrap(),
                    Matrix::from_vec(b, t, p[2 * b * t..].to_vec()).unwrap(),
                )
            };
            let params: Vec<f64> = (0..3 * b * t).map(|_| rng.random_range(-2.0..2.0)).collect();
            let err = grad_check(
                |p| {
                    let (z, zp, zm) = split(p);
                    Ok(setwise_infonce_with_grad(&sets, &z, &zp, &zm, &cfg)?.loss)
                },
                |p| {
                    let (z, zp, zm) = split(p);
                    let o = setwise_infonce_with_grad(&sets, &z, &zp, &zm, &cfg)?;
                    Ok([o.d_z.into_vec(), o.d_z_plus.into_vec(), o.d_z_minus.into_vec()].concat())
                },
                &params,
                &GradCheckOptions { probes: 300, step: 1e-5, ..Default::default() },
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn batched_loss_matches_representation_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (b, t) = (12, 5);
        let z = Matrix::uniform(b, t, 1.0, &mut rng);
        let zp = Matrix::uniform(b, t, 1.0, &mut rng);
        let zm = Matrix::uniform(b, t, 1.0, &mut rng);
        let sets = build_sets(&build_index_matrix(b, 2, &mut rng).unwrap(), 4).unwrap();
        let cfg = ContrastConfig::default();
        let reps: Vec<_> = sets.iter().map(|s| set_representations(s, &z, &zp, &zm, cfg.pooling).unwrap()).collect();
        let direct = setwise_infonce(&reps, cfg.temperature, false).unwrap();
        let batched = setwise_infonce_with_grad(&sets, &z, &zp, &zm, &cfg).unwrap().loss;
        assert_abs_diff_eq!(direct, batched, epsilon = 1e-10);
    }
}
