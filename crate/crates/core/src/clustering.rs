//! k-means with outlier promotion.
//!
//! Outliers are found by a robust distance rule in latent space, inliers are
//! clustered with k-means++ / Lloyd, and the outliers are clustered separately
//! so they end up in clusters of their own.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::stats::median;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const DEFAULT_OUTLIER_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub labels: Vec<usize>,
    /// `K x l`.
    pub centroids: Array2<f64>,
    pub outlier_clusters: BTreeSet<usize>,
    /// Within-cluster sum of squares after each Lloyd assignment step. Empty
    /// for clusterings not produced by a single k-means run.
    pub objective_trace: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k()];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == cluster).then_some(i))
            .collect()
    }

    pub fn is_outlier_cluster(&self, cluster: usize) -> bool {
        self.outlier_clusters.contains(&cluster)
    }

    /// Builds a clustering from labels, recomputing centroids as member means.
    /// Labels are compacted to `0..K` in order of first appearance of each id
    /// in ascending id order.
    pub fn from_labels(codes: &Array2<f64>, labels: &[usize], outlier: &BTreeSet<usize>) -> Result<Self> {
        if labels.len() != codes.nrows() {
            return Err(Error::shape("labels", codes.nrows(), labels.len()));
        }
        let ids: BTreeSet<usize> = labels.iter().copied().collect();
        let remap: std::collections::BTreeMap<usize, usize> =
            ids.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let labels: Vec<usize> = labels.iter().map(|l| remap[l]).collect();
        let outlier_clusters = outlier.iter().filter_map(|o| remap.get(o).copied()).collect();
        let centroids = centroids_of(codes, &labels, ids.len());
        Ok(Self {
            labels,
            centroids,
            outlier_clusters,
            objective_trace: Vec::new(),
        })
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn centroids_of(codes: &Array2<f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let mut c = Array2::zeros((k, codes.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        c.row_mut(l).scaled_add(1.0, &codes.row(i));
        counts[l] += 1;
    }
    for (l, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            c.row_mut(l).mapv_inplace(|v| v / cnt as f64);
        }
    }
    c
}

fn assign(codes: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(codes.nrows());
    let mut objective = 0.0;
    for row in codes.rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(row, centroid);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        labels.push(best);
        objective += best_d;
    }
    (labels, objective)
}

fn plus_plus_seeds(codes: &Array2<f64>, k: usize, rng: &RngState) -> Array2<f64> {
    let n = codes.nrows();
    let mut r = rng.rng();
    let mut chosen = vec![r.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(codes.row(i), codes.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on an already chosen point
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(codes.row(i), codes.row(next)));
        }
    }
    let mut c = Array2::zeros((k, codes.ncols()));
    for (row, &i) in chosen.iter().enumerate() {
        c.row_mut(row).assign(&codes.row(i));
    }
    c
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or [`MAX_LLOYD_ITERATIONS`] is reached.
pub fn kmeans(codes: &Array2<f64>, k: usize, rng: &RngState) -> Result<Clustering> {
    let n = codes.nrows();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k = {k} must lie in [1, {n}]")));
    }
    let mut centroids = plus_plus_seeds(codes, k, rng);
    let mut trace = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut labels = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let (new_labels, objective) = assign(codes, &centroids);
        if let Some(&last) = trace.last() {
            debug_assert!(
                objective <= last + 1e-9 * (1.0 + last),
                "k-means objective increased: {last} -> {objective}"
            );
        }
        trace.push(objective);
        labels = new_labels;
        if previous.as_ref() == Some(&labels) {
            break;
        }
        centroids = centroids_of(codes, &labels, k);
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let mut taken = BTreeSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // reseed an empty centroid at the point farthest from its own centroid
            let far = (0..n)
                .filter(|i| !taken.contains(i))
                .max_by(|&a, &b| {
                    let da = sq_dist(codes.row(a), centroids.row(labels[a]));
                    let db = sq_dist(codes.row(b), centroids.row(labels[b]));
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("k <= n leaves a candidate");
            taken.insert(far);
            centroids.row_mut(c).assign(&codes.row(far));
        }
        previous = Some(labels.clone());
    }
    fill_empty_clusters(codes, &mut labels, k);
    Ok(Clustering {
        centroids: centroids_of(codes, &labels, k),
        labels,
        outlier_clusters: BTreeSet::new(),
        objective_trace: trace,
    })
}

/// Only reachable with duplicated points, where ties keep a reseeded centroid
/// empty: hand it the point farthest from its centroid among clusters with
/// more than one member.
fn fill_empty_clusters(codes: &Array2<f64>, labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let centroids = centroids_of(codes, labels, k);
        let donor = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(codes.row(a), centroids.row(labels[a]));
                let db = sq_dist(codes.row(b), centroids.row(labels[b]));
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= n guarantees a donor");
        labels[donor] = empty;
    }
}

/// Indices whose distance to the coordinatewise median exceeds
/// `median(dist) + multiplier * MAD(dist)`.
pub fn detect_outliers(codes: &Array2<f64>, multiplier: f64) -> Result<Vec<usize>> {
    let n = codes.nrows();
    if n < 4 {
        return Err(Error::Domain(format!("outlier detection needs n >= 4, got {n}")));
    }
    let center: Vec<f64> = codes.columns().into_iter().map(|c| median(&c.to_vec())).collect();
    let dist: Vec<f64> = codes
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .zip(&center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let med = median(&dist);
    let dev: Vec<f64> = dist.iter().map(|d| (d - med).abs()).collect();
    let mad = median(&dev);
    if mad == 0.0 {
        return Ok(Vec::new());
    }
    let cut = med + multiplier * mad;
    Ok((0..n).filter(|&i| dist[i] > cut).collect())
}

fn select_rows(codes: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), codes.ncols()), |(i, j)| codes[[rows[i], j]])
}

/// Clusters inliers into `k` groups and promotes detected outliers into
/// `max(1, floor(sqrt(count)))` additional clusters.
pub fn cluster_with_outliers(codes: &Array2<f64>, k: usize, multiplier: f64, rng: &RngState) -> Result<Clustering> {
    let outliers = detect_outliers(codes, multiplier)?;
    cluster_with_known_outliers(codes, k, &outliers, rng)
}

pub fn cluster_with_known_outliers(
    codes: &Array2<f64>,
    k: usize,
    outliers: &[usize],
    rng: &RngState,
) -> Result<Clustering> {
    let n = codes.nrows();
    let is_out: BTreeSet<usize> = outliers.iter().copied().collect();
    let inliers: Vec<usize> = (0..n).filter(|i| !is_out.contains(i)).collect();
    let mut k = k;
    if inliers.len() < k {
        log::warn!("only {} inliers for k = {k}; reducing k", inliers.len());
        k = inliers.len();
    }
    let inlier_fit = kmeans(&select_rows(codes, &inliers), k, &rng.split("inliers"))?;
    if outliers.is_empty() {
        return Ok(inlier_fit);
    }
    let k_out = ((outliers.len() as f64).sqrt().floor() as usize).max(1);
    let outlier_fit = kmeans(&select_rows(codes, outliers), k_out, &rng.split("outliers"))?;

    let mut labels = vec![0; n];
    for (pos, &i) in inliers.iter().enumerate() {
        labels[i] = inlier_fit.labels[pos];
    }
    for (pos, &i) in outliers.iter().enumerate() {
        labels[i] = k + outlier_fit.labels[pos];
    }
    let mut centroids = Array2::zeros((k + k_out, codes.ncols()));
    centroids.slice_mut(ndarray::s![..k, ..]).assign(&inlier_fit.centroids);
    centroids.slice_mut(ndarray::s![k.., ..]).assign(&outlier_fit.centroids);
    Ok(Clustering {
        labels,
        centroids,
        outlier_clusters: (k..k + k_out).collect(),
        objective_trace: Vec::new(),
    })
}

/// Mean silhouette width. Points in singleton clusters score 0.
pub fn silhouette(codes: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = codes.nrows();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sq_dist(codes.row(i), codes.row(j)).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// The `k` in `range` with the best mean silhouette; ties go to the smaller `k`.
pub fn select_k(codes: &Array2<f64>, range: RangeInclusive<usize>, rng: &RngState) -> Result<usize> {
    let n = codes.nrows();
    if range.is_empty() {
        return Err(Error::Domain("empty k range".into()));
    }
    if *range.start() < 2 || *range.end() + 1 > n {
        return Err(Error::Domain(format!(
            "k range {}..={} not within [2, {}]",
            range.start(),
            range.end(),
            n.saturating_sub(1)
        )));
    }
    let mut best = (*range.start(), f64::NEG_INFINITY);
    for k in range {
        let fit = kmeans(codes, k, &rng.split(&format!("k{k}")))?;
        let score = silhouette(codes, &fit.labels);
        if score > best.1 {
            best = (k, score);
        }
    }
    Ok(best.0)
}

/// Default search range `2..=min(6, n - 1)`, or `None` when `n < 3`.
pub fn default_k_range(n: usize) -> Option<RangeInclusive<usize>> {
    (n >= 3).then(|| 2..=6.min(n - 1))
}

/// Merges clusters lacking `min_per_arm` treated or control members into the
/// nearest cluster by centroid (eligible clusters preferred), smallest first.
/// A merged cluster keeps the outlier flag of the cluster it was merged into.
pub fn merge_small_clusters(
    clustering: &Clustering,
    codes: &Array2<f64>,
    d: &[u8],
    min_per_arm: usize,
) -> Result<Clustering> {
    let mut labels = clustering.labels.clone();
    let mut outlier = clustering.outlier_clusters.clone();
    let mut alive: BTreeSet<usize> = labels.iter().copied().collect();
    let k_total = clustering.k();
    loop {
        let mut treated = vec![0usize; k_total];
        let mut control = vec![0usize; k_total];
        let mut size = vec![0usize; k_total];
        for (i, &l) in labels.iter().enumerate() {
            size[l] += 1;
            if d[i] == 1 {
                treated[l] += 1;
            } else {
                control[l] += 1;
            }
        }
        let eligible = |c: usize| treated[c] >= min_per_arm && control[c] >= min_per_arm;
        let Some(&small) = alive.iter().filter(|&&c| !eligible(c)).min_by_key(|&&c| (size[c], c)) else {
            break;
        };
        if alive.len() == 1 {
            return Err(Error::ClusterSize {
                cluster: small,
                n_treated: treated[small],
                n_control: control[small],
                min: min_per_arm,
            });
        }
        let centroids = centroids_of(codes, &labels, k_total);
        let others: Vec<usize> = alive.iter().copied().filter(|&c| c != small).collect();
        let pool: Vec<usize> = if others.iter().any(|&c| eligible(c)) {
            others.into_iter().filter(|&c| eligible(c)).collect()
        } else {
            others
        };
        let target = pool
            .into_iter()
            .min_by(|&a, &b| {
                sq_dist(centroids.row(small), centroids.row(a))
                    .total_cmp(&sq_dist(centroids.row(small), centroids.row(b)))
                    .then(a.cmp(&b))
            })
            .expect("at least one other cluster");
        for l in labels.iter_mut() {
            if *l == small {
                *l = target;
            }
        }
        outlier.remove(&small);
        alive.remove(&small);
    }
    Clustering::from_labels(codes, &labels, &outlier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separated_pairs() {
        let codes = array![[0.0], [0.1], [10.0], [10.1]];
        let c = kmeans(&codes, 2, &RngState::new(1)).unwrap();
        assert_eq!(c.labels[0], c.labels[1]);
        assert_eq!(c.labels[2], c.labels[3]);
        assert_ne!(c.labels[0], c.labels[2]);
        let mut cents: Vec<f64> = c.centroids.column(0).to_vec();
        cents.sort_by(f64::total_cmp);
        assert!((cents[0] - 0.05).abs() < 1e-12 && (cents[1] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n() {
        let codes = array![[0.0, 1.0], [2.0, 0.0], [5.0, 5.0], [-1.0, 3.0]];
        let c = kmeans(&codes, 4, &RngState::new(2)).unwrap();
        assert_eq!(c.sizes(), vec![1; 4]);
        assert_eq!(*c.objective_trace.last().unwrap(), 0.0);
    }

    #[test]
    fn k_one_is_mean() {
        let codes = array![[0.0, 1.0], [2.0, 0.0], [4.0, 5.0]];
        let c = kmeans(&codes, 1, &RngState::new(3)).unwrap();
        assert!((c.centroids[[0, 0]] - 2.0).abs() < 1e-15);
        assert!((c.centroids[[0, 1]] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn k_above_n_rejected() {
        let codes = array![[0.0], [1.0]];
        assert!(matches!(kmeans(&codes, 3, &RngState::new(0)), Err(Error::Domain(_))));
    }

    #[test]
    fn duplicate_points_fill_every_cluster() {
        let codes = array![[1.0], [1.0], [1.0], [1.0]];
        let c = kmeans(&codes, 2, &RngState::new(4)).unwrap();
        assert!(c.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn extreme_singleton_flagged() {
        let mut rows = Vec::new();
        let mut r = RngState::new(5).rng();
        for _ in 0..20 {
            let (a, b): (f64, f64) = (
                r.sample(rand_distr::StandardNormal),
                r.sample(rand_distr::StandardNormal),
            );
            rows.push([0.1 * a, 0.1 * b]);
        }
        rows.push([100.0, 0.0]);
        let codes = Array2::from_shape_fn((21, 2), |(i, j)| rows[i][j]);
        assert_eq!(detect_outliers(&codes, 3.0).unwrap(), vec![20]);
    }

    #[test]
    fn identical_points_have_no_outliers() {
        let codes = Array2::from_elem((10, 2), 0.5);
        assert!(detect_outliers(&codes, 3.0).unwrap().is_empty());
    }

    #[test]
    fn no_outliers_reduces_to_kmeans() {
        let codes = array![[0.0], [0.1], [0.2], [10.0], [10.1], [10.2]];
        let rng = RngState::new(6);
        let a = cluster_with_known_outliers(&codes, 2, &[], &rng).unwrap();
        let b = kmeans(&codes, 2, &rng.split("inliers")).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(a.outlier_clusters.is_empty());
    }

    #[test]
    fn single_outlier_becomes_singleton_cluster() {
        let codes = array![[0.0], [0.1], [0.2], [0.15], [10.0], [10.1], [10.2], [10.05], [500.0]];
        let c = cluster_with_outliers(&codes, 2, 3.0, &RngState::new(7)).unwrap();
        assert_eq!(c.k(), 3);
        assert_eq!(c.members(2), vec![8]);
        assert!(c.is_outlier_cluster(2));
    }

    #[test]
    fn flat_silhouette_prefers_smaller_k() {
        let codes = Array2::from_elem((6, 2), 3.0);
        assert_eq!(select_k(&codes, 2..=3, &RngState::new(8)).unwrap(), 2);
    }

    #[test]
    fn select_k_range_errors() {
        let codes = Array2::from_elem((4, 1), 0.0);
        assert!(select_k(&codes, 1..=3, &RngState::new(0)).is_err());
        assert!(select_k(&codes, 2..=4, &RngState::new(0)).is_err());
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 3..=2;
        assert!(select_k(&codes, empty, &RngState::new(0)).is_err());
    }

    #[test]
    fn merging_absorbs_single_arm_cluster() {
        let codes = array![[0.0], [0.1], [0.2], [0.3], [5.0], [5.1], [9.0]];
        let labels = vec![0, 0, 0, 0, 1, 1, 2];
        let d = vec![1, 0, 1, 0, 1, 1, 0];
        let c = Clustering::from_labels(&codes, &labels, &BTreeSet::from([2])).unwrap();
        let merged = merge_small_clusters(&c, &codes, &d, 1).unwrap();
        // cluster 1 (treated only) joins 0; cluster 2 (control only) follows
        assert_eq!(merged.k(), 1);
        assert!(merged.outlier_clusters.is_empty());
    }

    #[test]
    fn merging_fails_when_data_lacks_an_arm() {
        let codes = array![[0.0], [1.0]];
        let c = Clustering::from_labels(&codes, &[0, 1], &BTreeSet::new()).unwrap();
        assert!(matches!(
            merge_small_clusters(&c, &codes, &[1, 1], 1),
            Err(Error::ClusterSize { .. })
        ));
    }
}
