//! Batch construction and triplet mining for the three ranking tasks.
//!
//! Negatives (and, for the shared task, positives) are drawn with
//! probability proportional to the inverse density of pairwise distances on
//! the unit hypersphere, capped at `λ`. This spreads picks across the whole
//! distance range instead of favouring the typical distance near `√2`.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DivaError, Result};
use crate::model::TaskKind;
use crate::tensor::{sq_dist, Tensor};

/// Lower clamp applied to distances before weighting.
pub const DIST_MIN: f64 = 0.5;
/// Upper clamp applied to distances before weighting.
pub const DIST_MAX: f64 = 2.0 - 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSpec {
    pub n_classes: usize,
    pub m_per_class: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec { n_classes: 8, m_per_class: 4 }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.n_classes * self.m_per_class
    }

    /// Checks the per-task minimums: three samples per class for the
    /// intra-class task, three classes for the shared task, two for the
    /// discriminative one.
    pub fn validate(&self, tasks: &[TaskKind]) -> Result<()> {
        if self.n_classes == 0 || self.m_per_class == 0 {
            return Err(DivaError::BatchSpec("batch must hold at least one class and sample".into()));
        }
        if tasks.contains(&TaskKind::Intra) && self.m_per_class < 3 {
            return Err(DivaError::BatchSpec(format!(
                "intra-class task needs m_per_class >= 3, got {}",
                self.m_per_class
            )));
        }
        if tasks.contains(&TaskKind::Shared) && self.n_classes < 3 {
            return Err(DivaError::BatchSpec(format!("shared task needs n_classes >= 3, got {}", self.n_classes)));
        }
        if tasks.contains(&TaskKind::Disc) && (self.n_classes < 2 || self.m_per_class < 2) {
            return Err(DivaError::BatchSpec(
                "discriminative task needs n_classes >= 2 and m_per_class >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub kind: TaskKind,
}

impl Triplet {
    /// Whether the labels satisfy the constraint of the triplet's task.
    pub fn is_valid(&self, labels: &[u32]) -> bool {
        let (a, p, n) = (self.anchor, self.positive, self.negative);
        if a == p || a == n || p == n {
            return false;
        }
        let (ya, yp, yn) = (labels[a], labels[p], labels[n]);
        match self.kind {
            TaskKind::Disc => ya == yp && ya != yn,
            TaskKind::Shared => ya != yp && yp != yn && ya != yn,
            TaskKind::Intra => ya == yp && yp == yn,
            TaskKind::Dance => false,
        }
    }
}

/// Draws `n_classes` distinct training classes and `m_per_class` distinct
/// samples from each. Returns dataset row indices grouped by class.
pub fn build_batch<R: Rng + ?Sized>(dataset: &Dataset, spec: &BatchSpec, rng: &mut R) -> Result<Vec<usize>> {
    let members = dataset.train_members();
    build_batch_from(&members, spec, rng)
}

pub fn build_batch_from<R: Rng + ?Sized>(
    members: &BTreeMap<u32, Vec<usize>>,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let eligible: Vec<&Vec<usize>> = members.values().filter(|m| m.len() >= spec.m_per_class).collect();
    if eligible.len() < spec.n_classes {
        return Err(DivaError::BatchSpec(format!(
            "need {} classes with >= {} samples, dataset has {}",
            spec.n_classes,
            spec.m_per_class,
            eligible.len()
        )));
    }
    let mut batch = Vec::with_capacity(spec.batch_size());
    for ci in index::sample(rng, eligible.len(), spec.n_classes) {
        let class = eligible[ci];
        for si in index::sample(rng, class.len(), spec.m_per_class) {
            batch.push(class[si]);
        }
    }
    Ok(batch)
}

/// `ln q(d)` for the unnormalized pairwise-distance density on `S^{dim−1}`.
pub fn log_q_density(d: f64, dim: usize) -> Result<f64> {
    if !(0.0..=2.0).contains(&d) {
        return Err(DivaError::Domain(format!("distance {d} outside [0, 2]")));
    }
    if dim < 2 {
        return Err(DivaError::Domain(format!("sphere dimension {dim} < 2")));
    }
    let dm = dim as f64;
    let radial = if dim == 2 { 0.0 } else { (dm - 2.0) * d.ln() };
    let bracket = 1.0 - 0.25 * d * d;
    let angular = if dim == 3 { 0.0 } else { 0.5 * (dm - 3.0) * bracket.ln() };
    Ok(radial + angular)
}

/// `q(d) = d^{D−2} (1 − d²/4)^{(D−3)/2}`.
pub fn q_density(d: f64, dim: usize) -> Result<f64> {
    Ok(log_q_density(d, dim)?.exp())
}

/// `min(λ, 1/q(d))` with `d` clamped to `[DIST_MIN, DIST_MAX]`, together
/// with its derivative in `d` (zero on the clamped and capped pieces).
pub fn sampling_weight_with_grad(d: f64, dim: usize, lambda: f64) -> (f64, f64) {
    let dc = d.clamp(DIST_MIN, DIST_MAX);
    let log_q = log_q_density(dc, dim).expect("clamped distance is in domain");
    let inv_q_log = -log_q;
    if inv_q_log >= lambda.ln() {
        return (lambda, 0.0);
    }
    let w = inv_q_log.exp();
    if !(DIST_MIN..=DIST_MAX).contains(&d) {
        return (w, 0.0);
    }
    let dm = dim as f64;
    let dlogq = if dim == 2 { 0.0 } else { (dm - 2.0) / dc }
        - if dim == 3 { 0.0 } else { 0.5 * (dm - 3.0) * (0.5 * dc) / (1.0 - 0.25 * dc * dc) };
    (w, -w * dlogq)
}

pub fn sampling_weight(d: f64, dim: usize, lambda: f64) -> f64 {
    sampling_weight_with_grad(d, dim, lambda).0
}

/// Picks one unmasked candidate row with probability proportional to
/// [`sampling_weight`] of its distance to `anchor`.
pub fn sample_negative<R: Rng + ?Sized>(
    anchor: &[f64],
    candidates: &Tensor,
    mask: &[bool],
    dim: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<usize> {
    let pool: Vec<usize> = (0..candidates.rows()).filter(|&i| mask.get(i).copied().unwrap_or(false)).collect();
    pick_weighted(anchor, candidates, &pool, dim, lambda, rng)
}

fn pick_weighted<R: Rng + ?Sized>(
    anchor: &[f64],
    emb: &Tensor,
    pool: &[usize],
    dim: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<usize> {
    match pool {
        [] => Err(DivaError::Mining("no eligible candidate".into())),
        [only] => Ok(*only),
        _ => {
            let weights: Vec<f64> = pool
                .iter()
                .map(|&i| {
                    let d = sq_dist(anchor, emb.row(i)).sqrt().min(2.0);
                    sampling_weight(d, dim, lambda)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (&i, &w) in pool.iter().zip(&weights) {
                if u < w {
                    return Ok(i);
                }
                u -= w;
            }
            Ok(*pool.last().expect("non-empty"))
        }
    }
}

/// Mines one triplet per valid anchor of the batch for a ranking task.
///
/// * disc: uniform same-class positive, distance-weighted other-class negative
/// * shared: distance-weighted other-class positive, then a distance-weighted
///   negative from a third class
/// * intra: uniform same-class positive, distance-weighted same-class negative
///
/// Anchors without a valid triplet are skipped; the result can be empty.
pub fn mine_triplets<R: Rng + ?Sized>(
    kind: TaskKind,
    embeddings: &Tensor,
    labels: &[u32],
    lambda: f64,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if embeddings.rows() != labels.len() {
        return Err(DivaError::dim(format!("{} embeddings for {} labels", embeddings.rows(), labels.len())));
    }
    if kind == TaskKind::Dance {
        return Err(DivaError::Mining("the contrastive task does not use triplets".into()));
    }
    let dim = embeddings.cols();
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        let ya = labels[a];
        let anchor = embeddings.row(a);
        let same: Vec<usize> = (0..n).filter(|&i| i != a && labels[i] == ya).collect();
        let other: Vec<usize> = (0..n).filter(|&i| labels[i] != ya).collect();
        let t = match kind {
            TaskKind::Disc => {
                if same.is_empty() || other.is_empty() {
                    continue;
                }
                let p = same[rng.random_range(0..same.len())];
                let neg = pick_weighted(anchor, embeddings, &other, dim, lambda, rng)?;
                (p, neg)
            }
            TaskKind::Shared => {
                if other.is_empty() {
                    continue;
                }
                let p = pick_weighted(anchor, embeddings, &other, dim, lambda, rng)?;
                let yp = labels[p];
                let third: Vec<usize> = other.iter().copied().filter(|&i| labels[i] != yp).collect();
                if third.is_empty() {
                    continue;
                }
                let neg = pick_weighted(anchor, embeddings, &third, dim, lambda, rng)?;
                (p, neg)
            }
            TaskKind::Intra => {
                if same.len() < 2 {
                    continue;
                }
                let p = same[rng.random_range(0..same.len())];
                let rest: Vec<usize> = same.iter().copied().filter(|&i| i != p).collect();
                let neg = pick_weighted(anchor, embeddings, &rest, dim, lambda, rng)?;
                (p, neg)
            }
            TaskKind::Dance => unreachable!(),
        };
        out.push(Triplet { anchor: a, positive: t.0, negative: t.1, kind });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn q_density_examples() {
        assert!((q_density(1.0, 3).unwrap() - 1.0).abs() < 1e-15);
        assert!((q_density(0.37, 3).unwrap() - 0.37).abs() < 1e-15);
        let v = q_density(2f64.sqrt(), 4).unwrap();
        assert!((v - 2f64.sqrt() * 0.5f64.sqrt() * 2f64.sqrt()).abs() < 1e-12);
        assert!((v - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(q_density(0.0, 3).unwrap(), 0.0);
        assert_eq!(q_density(0.0, 8).unwrap(), 0.0);
        assert!(q_density(2.1, 3).is_err());
        assert!(q_density(-0.1, 3).is_err());
    }

    #[test]
    fn sampling_weight_examples() {
        assert!((sampling_weight(1.0, 3, 10.0) - 1.0).abs() < 1e-12);
        // 1/q(0.6) = 1/0.6 > 1 → capped
        assert_eq!(sampling_weight(0.6, 3, 1.0), 1.0);
        assert_eq!(sampling_weight(0.1, 3, 10.0), sampling_weight(DIST_MIN, 3, 10.0));
        assert_eq!(sampling_weight(0.0, 3, 10.0), 2.0);
        for d in [0.0, 0.3, 1.0, 1.4, 1.9, 2.0] {
            let w = sampling_weight(d, 128, 1.0);
            assert!(w > 0.0 && w <= 1.0);
        }
    }

    #[test]
    fn sampling_weight_derivative_matches_differences() {
        for &(d, dim, lambda) in &[(1.2, 3, 10.0), (1.5, 8, 5.0), (1.4, 128, 1.0), (0.9, 4, 10.0)] {
            let (w, g) = sampling_weight_with_grad(d, dim, lambda);
            let h = 1e-6;
            let num = (sampling_weight(d + h, dim, lambda) - sampling_weight(d - h, dim, lambda)) / (2.0 * h);
            assert!(w < lambda, "test point should be uncapped");
            assert!((g - num).abs() < 1e-6 * g.abs().max(1.0), "d={d} dim={dim}: {g} vs {num}");
        }
    }

    #[test]
    fn single_candidate_is_always_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        for _ in 0..20 {
            assert_eq!(sample_negative(&[1.0, 0.0], &c, &[false, true, false], 2, 1.0, &mut rng).unwrap(), 1);
        }
        assert!(sample_negative(&[1.0, 0.0], &c, &[false, false, false], 2, 1.0, &mut rng).is_err());
    }

    #[test]
    fn equal_distances_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        let draws = 10_000;
        let hits = (0..draws)
            .filter(|_| sample_negative(&[1.0, 0.0], &c, &[true, true], 3, 10.0, &mut rng).unwrap() == 0)
            .count();
        let f = hits as f64 / draws as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn build_batch_shapes() {
        let members: BTreeMap<u32, Vec<usize>> = (0..10).map(|c| (c, (c as usize * 6..c as usize * 6 + 6).collect())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = BatchSpec { n_classes: 8, m_per_class: 4 };
        let b = build_batch_from(&members, &spec, &mut rng).unwrap();
        assert_eq!(b.len(), 32);
        let mut per: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &b {
            *per.entry(i / 6).or_default() += 1;
        }
        assert_eq!(per.len(), 8);
        assert!(per.values().all(|&c| c == 4));
        let mut dedup = b.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 32);

        let two: BTreeMap<u32, Vec<usize>> = [(0, vec![0, 1, 2]), (1, vec![3, 4, 5])].into_iter().collect();
        let b = build_batch_from(&two, &BatchSpec { n_classes: 2, m_per_class: 3 }, &mut rng).unwrap();
        assert_eq!(b.len(), 6);
        assert!(build_batch_from(&two, &BatchSpec { n_classes: 3, m_per_class: 3 }, &mut rng).is_err());
        assert!(build_batch_from(&two, &BatchSpec { n_classes: 2, m_per_class: 4 }, &mut rng).is_err());
    }

    #[test]
    fn batch_spec_rejects_small_intra() {
        let spec = BatchSpec { n_classes: 8, m_per_class: 2 };
        assert!(spec.validate(&[TaskKind::Disc, TaskKind::Intra]).is_err());
        assert!(spec.validate(&[TaskKind::Disc]).is_ok());
        assert!(BatchSpec { n_classes: 2, m_per_class: 4 }.validate(&[TaskKind::Disc, TaskKind::Shared]).is_err());
    }

    fn toy() -> (Tensor, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for _ in 0..6 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
        (Tensor::from_rows(&rows).unwrap(), vec![0, 0, 1, 1, 2, 2])
    }

    #[test]
    fn mining_label_examples() {
        let (e, labels) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let d = mine_triplets(TaskKind::Disc, &e, &labels, 1.0, &mut rng).unwrap();
            assert_eq!(d.len(), 6);
            let t0 = d.iter().find(|t| t.anchor == 0).unwrap();
            assert_eq!(t0.positive, 1);
            assert!((2..6).contains(&t0.negative));

            let s = mine_triplets(TaskKind::Shared, &e, &labels, 1.0, &mut rng).unwrap();
            let t0 = s.iter().find(|t| t.anchor == 0).unwrap();
            assert!(labels[t0.positive] != 0 && labels[t0.negative] != 0);
            assert_ne!(labels[t0.positive], labels[t0.negative]);
        }
        assert!(mine_triplets(TaskKind::Intra, &e, &labels, 1.0, &mut rng).unwrap().is_empty());
    }
}
