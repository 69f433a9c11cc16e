//! Retrieval and clustering metrics on held-out classes.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{DivaError, Result};
use crate::model::ModelState;
use crate::tensor::{sq_dist, Tensor};

pub const DEFAULT_KS: [usize; 4] = [1, 2, 4, 8];

/// Fraction of queries whose `k` nearest neighbours (self excluded) contain
/// a sample of the same label, for each `k` in `ks`. Distances are
/// Euclidean; equal distances are ordered by sample index.
pub fn recall_at_k(embeddings: &Tensor, labels: &[u32], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let n = embeddings.rows();
    if n != labels.len() {
        return Err(DivaError::dim(format!("{n} embeddings for {} labels", labels.len())));
    }
    if n < 2 {
        return Err(DivaError::Contract("recall needs at least two samples".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(DivaError::Contract(format!("k={k} must lie in 1..{n}")));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let mut hits = vec![0usize; ks.len()];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for q in 0..n {
        cand.clear();
        let row = embeddings.row(q);
        cand.extend((0..n).filter(|&j| j != q).map(|j| (sq_dist(row, embeddings.row(j)), j)));
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if kmax < cand.len() {
            cand.select_nth_unstable_by(kmax - 1, by_dist);
            cand.truncate(kmax);
        }
        cand.sort_by(by_dist);
        // rank of the first same-label neighbour
        if let Some(first) = cand.iter().position(|&(_, j)| labels[j] == labels[q]) {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if first < k {
                    *h += 1;
                }
            }
        }
    }
    Ok(ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centroids: Tensor,
    /// Inertia after seeding and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least the seeding inertia")
    }
}

fn nearest(row: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter_rows().enumerate() {
        let d = sq_dist(row, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by at most `iters` Lloyd iterations. A
/// cluster that loses all its points keeps its previous centroid.
pub fn kmeans(embeddings: &Tensor, k: usize, seed: u64, iters: usize) -> Result<KMeans> {
    let n = embeddings.rows();
    if n == 0 {
        return Err(DivaError::Contract("k-means on empty input".into()));
    }
    if k == 0 || k > n {
        return Err(DivaError::Contract(format!("k={k} must lie in 1..={n}")));
    }
    let dim = embeddings.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = embeddings.iter_rows().map(|r| sq_dist(r, embeddings.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = Some(i);
                    break;
                }
                u -= w;
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            // all remaining points coincide with a centre; take unused indices in order
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, r) in embeddings.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, embeddings.row(next)));
        }
    }
    let mut centroids = embeddings.select_rows(&chosen);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut inertia = 0.0;
    for (i, r) in embeddings.iter_rows().enumerate() {
        let (c, d) = nearest(r, &centroids);
        assignment[i] = c;
        inertia += d;
    }
    // a centre chosen at a duplicated point must still own that point
    for (c, &i) in chosen.iter().enumerate() {
        if sq_dist(embeddings.row(i), centroids.row(assignment[i])) == 0.0 {
            assignment[i] = c;
        }
    }
    history.push(inertia);
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, r) in embeddings.iter_rows().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let row = centroids.row_mut(c);
                for (dst, s) in row.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, r) in embeddings.iter_rows().enumerate() {
            let cur = sq_dist(r, centroids.row(assignment[i]));
            let (c, d) = nearest(r, &centroids);
            // keep the current cluster unless another is strictly closer
            let (c, d) = if d < cur { (c, d) } else { (assignment[i], cur) };
            if c != assignment[i] {
                assignment[i] = c;
                changed = true;
            }
            inertia += d;
        }
        history.push(inertia);
        if !changed {
            break;
        }
    }
    Ok(KMeans { assignment, centroids, inertia_history: history })
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `I(a;b) / √(H(a)·H(b))`.
///
/// Two single-cluster partitions score 1; a single-cluster partition
/// against a non-trivial one scores 0.
pub fn nmi<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DivaError::dim(format!("partitions of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(DivaError::Contract("nmi of empty partitions".into()));
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<A, usize> = BTreeMap::new();
    let mut cb: BTreeMap<B, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(A, B), usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Singular values of the centred matrix, descending, normalized to sum 1.
    pub normalized: Vec<f64>,
    /// KL divergence of `normalized` from the uniform distribution.
    pub decay: f64,
}

/// Normalized singular-value spectrum of the mean-centred embeddings and
/// its KL divergence from uniform over `min(D, N−1)` entries.
pub fn spectrum(embeddings: &Tensor) -> Result<Spectrum> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if n < 2 || d == 0 {
        return Err(DivaError::Contract("spectrum needs at least two samples".into()));
    }
    let mut mean = vec![0.0; d];
    for r in embeddings.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| embeddings.row(i)[j] - mean[j]);
    let mut sv: Vec<f64> = centred.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let m = d.min(n - 1);
    sv.truncate(m);
    let total: f64 = sv.iter().sum();
    if !(total > 0.0) {
        return Err(DivaError::Domain("rank-0 embeddings: all points coincide".into()));
    }
    let normalized: Vec<f64> = sv.iter().map(|s| s / total).collect();
    let decay = normalized.iter().filter(|&&p| p > 0.0).map(|&p| p * (p * m as f64).ln()).sum::<f64>().max(0.0);
    Ok(Spectrum { normalized, decay })
}

pub fn spectral_decay(embeddings: &Tensor) -> Result<f64> {
    Ok(spectrum(embeddings)?.decay)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub kmeans_iters: usize,
    pub kmeans_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: DEFAULT_KS.to_vec(), kmeans_iters: 100, kmeans_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub dim: usize,
    /// Keyed `recall@k`.
    pub recall: BTreeMap<String, f64>,
    pub nmi: f64,
    pub spectral_decay: f64,
}

impl MetricSet {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&format!("recall@{k}")).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub n_classes: usize,
    pub heads: BTreeMap<String, MetricSet>,
    pub ensemble: MetricSet,
}

/// All metrics for one embedding matrix.
pub fn metrics(embeddings: &Tensor, labels: &[u32], n_clusters: usize, cfg: &EvalConfig) -> Result<MetricSet> {
    let recall = recall_at_k(embeddings, labels, &cfg.ks)?.into_iter().map(|(k, r)| (format!("recall@{k}"), r)).collect();
    let km = kmeans(embeddings, n_clusters, cfg.kmeans_seed, cfg.kmeans_iters)?;
    let nmi = nmi(labels, &km.assignment)?;
    Ok(MetricSet { dim: embeddings.cols(), recall, nmi, spectral_decay: spectral_decay(embeddings)? })
}

/// Embeds every test-split sample under each head and the weighted
/// ensemble, with `K` = number of test classes for clustering.
pub fn evaluate(model: &ModelState, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if dataset.feature_dim() != model.input_dim() {
        return Err(DivaError::Incompatible(format!(
            "dataset has {} features, model expects {}",
            dataset.feature_dim(),
            model.input_dim()
        )));
    }
    let (train, test) = dataset.classes_by_split();
    if !train.is_disjoint(&test) {
        return Err(DivaError::Contract("train and test classes overlap".into()));
    }
    let (x, labels) = dataset.split_data(Split::Test);
    let per_head = model.embed_batch(&x)?;
    let k = test.len();
    let mut heads = BTreeMap::new();
    for (kind, e) in &per_head {
        heads.insert(kind.name().to_string(), metrics(e, &labels, k, cfg)?);
    }
    let ens = crate::model::ensemble(&per_head, &model.default_ensemble_weights())?;
    let ensemble = metrics(&ens, &labels, k, cfg)?;
    Ok(EvalReport { n_samples: labels.len(), n_classes: k, heads, ensemble })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_examples() {
        let two = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(recall_at_k(&two, &[3, 3], &[1]).unwrap(), vec![(1, 1.0)]);
        let line = Tensor::from_rows(&(0..6).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
        let r = recall_at_k(&line, &[0, 1, 0, 1, 0, 1], &[1]).unwrap();
        assert_eq!(r[0].1, 0.0);
        assert!(recall_at_k(&two, &[0, 0], &[2]).is_err());
    }

    #[test]
    fn kmeans_examples() {
        let pts = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 10.0], vec![10.0, 10.1]]).unwrap();
        let km = kmeans(&pts, 4, 1, 10).unwrap();
        assert_eq!(km.inertia(), 0.0);
        let mut a = km.assignment.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 4);
        let km = kmeans(&pts, 2, 3, 10).unwrap();
        assert_eq!(km.assignment[0], km.assignment[1]);
        assert_eq!(km.assignment[2], km.assignment[3]);
        assert_ne!(km.assignment[0], km.assignment[2]);
        assert!(km.inertia_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(kmeans(&Tensor::zeros(&[0, 2]), 1, 0, 5).is_err());
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert!((nmi(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap() - 1.0).abs() < 1e-12);
        // a = [0,0,0,1,1,1], b = [0,0,1,1,2,2]
        let (a, b) = ([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 2, 2]);
        let ha = 2f64.ln();
        let hb = 3f64.ln();
        let mi = (2.0 / 6.0) * (2.0f64 / 6.0 / (0.5 * (1.0 / 3.0))).ln() * 2.0
            + 2.0 * (1.0 / 6.0) * (1.0f64 / 6.0 / (0.5 * (1.0 / 3.0))).ln();
        assert!((nmi(&a, &b).unwrap() - mi / (ha * hb).sqrt()).abs() < 1e-12);
        assert!(nmi(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn spectrum_examples() {
        let iso = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        assert!(spectral_decay(&iso).unwrap().abs() < 1e-12);
        let line = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert!((spectral_decay(&line).unwrap() - 2f64.ln()).abs() < 1e-12);
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(spectral_decay(&same).is_err());
    }
}
