//! Per-class, per-domain statistical feature distributions.
//!
//! The bank stores one running mean feature vector per (domain, class,
//! region). It is (re)built by clustering full-dataset features every few
//! epochs and nudged toward batch means every iteration with an exponential
//! moving average. Features are stored region-concatenated: a sample's six
//! extracted region vectors in canonical order form one row.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AgraError, Result};
use crate::graph::{Domain, REGION_COUNT};

// ---------------------------------------------------------------------------
// K-means (Lloyd)
// ---------------------------------------------------------------------------

/// One sample's cluster membership after an assignment pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub sample_index: usize,
    pub cluster: usize,
    /// Squared distance to the assigned centroid.
    pub distance: f64,
}

/// Centroid initialization: explicit list or seeded k-means++.
#[derive(Debug, Clone)]
pub enum KmeansInit {
    Centroids(Array2<f64>),
    Seeded(u64),
}

/// Result of a Lloyd run. `distortion_history` holds the total squared
/// distance after every iteration, which is non-increasing.
#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    pub assignments: Vec<ClusterAssignment>,
    pub centroids: Array2<f64>,
    pub distortion_history: Vec<f64>,
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_plus_plus(points: &Array2<f64>, clusters: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.nrows();
    let mut centroids = Array2::zeros((clusters, points.ncols()));
    let first = sample_indices(&mut rng, n, 1).index(0);
    centroids.row_mut(0).assign(&points.row(first));

    let mut best = vec![f64::INFINITY; n];
    for c in 1..clusters {
        for (i, point) in points.rows().into_iter().enumerate() {
            let d = squared_distance(point, centroids.row(c - 1));
            if d < best[i] {
                best[i] = d;
            }
        }
        let total: f64 = best.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            sample_indices(&mut rng, n, 1).index(0)
        };
        centroids.row_mut(c).assign(&points.row(chosen));
    }
    centroids
}

/// Lloyd's algorithm over row-vector points. Deterministic given the init.
/// Empty clusters are re-seeded with the point farthest from its assigned
/// centroid.
pub fn kmeans(
    points: &Array2<f64>,
    clusters: usize,
    init: KmeansInit,
    max_iter: usize,
    tol: f64,
) -> Result<KmeansOutcome> {
    let n = points.nrows();
    if clusters == 0 {
        return Err(AgraError::Argument("cluster count must be at least 1".into()));
    }
    if n == 0 {
        return Err(AgraError::Argument("kmeans needs a non-empty point set".into()));
    }
    if clusters > n {
        return Err(AgraError::Argument(format!(
            "cluster count {clusters} exceeds point count {n}"
        )));
    }

    let mut centroids = match init {
        KmeansInit::Centroids(c) => {
            if c.dim() != (clusters, points.ncols()) {
                return Err(AgraError::Dimension(format!(
                    "initial centroids are {:?}, expected ({clusters}, {})",
                    c.dim(),
                    points.ncols()
                )));
            }
            c
        }
        KmeansInit::Seeded(seed) => kmeans_plus_plus(points, clusters, seed),
    };

    let mut assignment = vec![0usize; n];
    let mut distance = vec![0f64; n];
    let mut history = Vec::new();

    for _ in 0..max_iter.max(1) {
        // Assignment pass.
        for (i, point) in points.rows().into_iter().enumerate() {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.rows().into_iter().enumerate() {
                let d = squared_distance(point, centroid);
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            assignment[i] = best_c;
            distance[i] = best_d;
        }

        // Re-seed empty clusters with the farthest point from its centroid.
        let mut sizes = vec![0usize; clusters];
        for &a in &assignment {
            sizes[a] += 1;
        }
        for c in 0..clusters {
            if sizes[c] > 0 {
                continue;
            }
            let farthest = (0..n)
                .filter(|&i| sizes[assignment[i]] > 1)
                .max_by(|&a, &b| distance[a].partial_cmp(&distance[b]).unwrap())
                .unwrap_or(0);
            sizes[assignment[farthest]] -= 1;
            sizes[c] += 1;
            centroids.row_mut(c).assign(&points.row(farthest));
            assignment[farthest] = c;
            distance[farthest] = 0.0;
        }

        // Update pass.
        let mut next = Array2::<f64>::zeros(centroids.raw_dim());
        for (i, point) in points.rows().into_iter().enumerate() {
            let mut row = next.row_mut(assignment[i]);
            row += &point;
        }
        let mut movement = 0f64;
        for c in 0..clusters {
            if sizes[c] == 0 {
                next.row_mut(c).assign(&centroids.row(c));
                continue;
            }
            let mut row = next.row_mut(c);
            row /= sizes[c] as f64;
            movement = movement.max(squared_distance(row.view(), centroids.row(c)).sqrt());
        }
        centroids = next;

        for (i, point) in points.rows().into_iter().enumerate() {
            distance[i] = squared_distance(point, centroids.row(assignment[i]));
        }
        history.push(distance.iter().sum());

        if movement < tol {
            break;
        }
    }

    let assignments = (0..n)
        .map(|i| ClusterAssignment {
            sample_index: i,
            cluster: assignment[i],
            distance: distance[i],
        })
        .collect();
    Ok(KmeansOutcome {
        assignments,
        centroids,
        distortion_history: history,
    })
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for i in 0..n {
        table[a[i]][b[i]] += 1;
    }
    let choose2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let sum_ij: f64 = table.iter().flatten().map(|&x| choose2(x)).sum();
    let sum_a: f64 = table.iter().map(|row| choose2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

// ---------------------------------------------------------------------------
// Cluster-to-class alignment
// ---------------------------------------------------------------------------

/// Minimum-total-squared-distance assignment of cluster rows to reference
/// rows. Returns `perm` with `perm[class] = cluster`. Exact bitmask dynamic
/// program, fine for the class counts used here.
pub fn align_clusters(cluster_means: &ArrayView2<f64>, reference: &ArrayView2<f64>) -> Vec<usize> {
    let c = reference.nrows();
    assert_eq!(cluster_means.nrows(), c);
    assert!(c <= 20, "alignment supports up to 20 classes");
    let cost: Vec<Vec<f64>> = (0..c)
        .map(|class| {
            (0..c)
                .map(|k| squared_distance(reference.row(class), cluster_means.row(k)))
                .collect()
        })
        .collect();

    let full = 1usize << c;
    let mut dp = vec![f64::INFINITY; full];
    let mut parent = vec![usize::MAX; full];
    dp[0] = 0.0;
    for mask in 0..full {
        if dp[mask].is_infinite() {
            continue;
        }
        let class = (mask as u32).count_ones() as usize;
        if class == c {
            continue;
        }
        for k in 0..c {
            if mask & (1 << k) != 0 {
                continue;
            }
            let next = mask | (1 << k);
            let cand = dp[mask] + cost[class][k];
            if cand < dp[next] {
                dp[next] = cand;
                parent[next] = k;
            }
        }
    }

    let mut perm = vec![0usize; c];
    let mut mask = full - 1;
    while mask != 0 {
        let k = parent[mask];
        let class = (mask as u32).count_ones() as usize - 1;
        perm[class] = k;
        mask &= !(1 << k);
    }
    perm
}

// ---------------------------------------------------------------------------
// The bank
// ---------------------------------------------------------------------------

/// How source-domain clusters are formed at (re)initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceClusterMode {
    /// Group source samples by their ground-truth labels.
    Labels,
    /// Cluster source samples like the target domain, then align cluster
    /// indices to per-label means.
    Kmeans,
}

/// Running mean feature vectors per (domain, class, region), stored
/// region-concatenated as one `classes x (6 * region_dim)` matrix per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistributionBank {
    classes: usize,
    region_dim: usize,
    means: [Array2<f64>; 2],
    counts: [Vec<usize>; 2],
    pub alpha: f64,
    pub recluster_period: usize,
}

impl ClassDistributionBank {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn region_dim(&self) -> usize {
        self.region_dim
    }

    pub fn feature_dim(&self) -> usize {
        REGION_COUNT * self.region_dim
    }

    /// All class means for one domain, classes x (6 * region_dim).
    pub fn means(&self, domain: Domain) -> &Array2<f64> {
        &self.means[domain.index()]
    }

    pub fn means_mut(&mut self, domain: Domain) -> &mut Array2<f64> {
        &mut self.means[domain.index()]
    }

    /// Sample counts per cluster recorded at the last (re)initialization.
    pub fn counts(&self, domain: Domain) -> &[usize] {
        &self.counts[domain.index()]
    }

    /// The mean vector of one region for a class, as a slice of the
    /// concatenated row.
    pub fn region_mean(&self, domain: Domain, class: usize, region: usize) -> ArrayView1<'_, f64> {
        let d = self.region_dim;
        self.means[domain.index()]
            .slice(s![class, region * d..(region + 1) * d])
    }

    /// Rebuild from raw parts (checkpoint loading).
    pub fn from_parts(
        means_source: Array2<f64>,
        means_target: Array2<f64>,
        counts_source: Vec<usize>,
        counts_target: Vec<usize>,
        alpha: f64,
        recluster_period: usize,
    ) -> Result<Self> {
        if means_source.dim() != means_target.dim() {
            return Err(AgraError::Dimension(
                "bank domain matrices must have identical shapes".into(),
            ));
        }
        let (classes, feat) = means_source.dim();
        if feat % REGION_COUNT != 0 {
            return Err(AgraError::Dimension(format!(
                "bank feature dim {feat} is not divisible by {REGION_COUNT}"
            )));
        }
        Ok(ClassDistributionBank {
            classes,
            region_dim: feat / REGION_COUNT,
            means: [means_source, means_target],
            counts: [counts_source, counts_target],
            alpha,
            recluster_period,
        })
    }
}

fn class_means(
    features: &Array2<f64>,
    labels: &[usize],
    classes: usize,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut sums = Array2::<f64>::zeros((classes, features.ncols()));
    let mut counts = vec![0usize; classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(AgraError::Argument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let mut row = sums.row_mut(label);
        row += &features.row(i);
        counts[label] += 1;
    }
    for c in 0..classes {
        if counts[c] == 0 {
            return Err(AgraError::Argument(format!(
                "source class {c} has no samples"
            )));
        }
        let mut row = sums.row_mut(c);
        row /= counts[c] as f64;
    }
    Ok((sums, counts))
}

fn cluster_means(
    features: &Array2<f64>,
    outcome: &KmeansOutcome,
    classes: usize,
) -> (Array2<f64>, Vec<usize>) {
    let mut sums = Array2::<f64>::zeros((classes, features.ncols()));
    let mut counts = vec![0usize; classes];
    for a in &outcome.assignments {
        let mut row = sums.row_mut(a.cluster);
        row += &features.row(a.sample_index);
        counts[a.cluster] += 1;
    }
    for c in 0..classes {
        if counts[c] > 0 {
            let mut row = sums.row_mut(c);
            row /= counts[c] as f64;
        }
    }
    (sums, counts)
}

fn apply_perm(means: &Array2<f64>, counts: &[usize], perm: &[usize]) -> (Array2<f64>, Vec<usize>) {
    let mut out = Array2::zeros(means.raw_dim());
    let mut out_counts = vec![0usize; counts.len()];
    for (class, &cluster) in perm.iter().enumerate() {
        out.row_mut(class).assign(&means.row(cluster));
        out_counts[class] = counts[cluster];
    }
    (out, out_counts)
}

/// Build a fresh bank from full-dataset extracted features.
///
/// Source means come from ground-truth labels or aligned K-means clusters;
/// target means always come from K-means over the concatenated region
/// features, with cluster indices permuted to best match the source class
/// means.
pub fn initialize_bank(
    source_features: &Array2<f64>,
    source_labels: &[usize],
    target_features: &Array2<f64>,
    classes: usize,
    mode: SourceClusterMode,
    alpha: f64,
    recluster_period: usize,
    seed: u64,
) -> Result<ClassDistributionBank> {
    if classes == 0 {
        return Err(AgraError::Argument("class count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AgraError::Argument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if source_features.nrows() != source_labels.len() {
        return Err(AgraError::Argument(format!(
            "{} source rows but {} labels",
            source_features.nrows(),
            source_labels.len()
        )));
    }
    if source_features.ncols() != target_features.ncols() {
        return Err(AgraError::Dimension(
            "source and target feature dims differ".into(),
        ));
    }
    if source_features.ncols() % REGION_COUNT != 0 {
        return Err(AgraError::Dimension(format!(
            "feature dim {} is not divisible by {REGION_COUNT}",
            source_features.ncols()
        )));
    }

    let (label_means, label_counts) = class_means(source_features, source_labels, classes)?;
    let (src_means, src_counts) = match mode {
        SourceClusterMode::Labels => (label_means.clone(), label_counts),
        SourceClusterMode::Kmeans => {
            let outcome = kmeans(
                source_features,
                classes,
                KmeansInit::Seeded(seed ^ 0x5eed_0001),
                100,
                1e-8,
            )?;
            let (means, counts) = cluster_means(source_features, &outcome, classes);
            let perm = align_clusters(&means.view(), &label_means.view());
            apply_perm(&means, &counts, &perm)
        }
    };

    let outcome = kmeans(
        target_features,
        classes,
        KmeansInit::Seeded(seed ^ 0x5eed_0002),
        100,
        1e-8,
    )?;
    let (tgt_raw, tgt_counts_raw) = cluster_means(target_features, &outcome, classes);
    let perm = align_clusters(&tgt_raw.view(), &src_means.view());
    let (tgt_means, tgt_counts) = apply_perm(&tgt_raw, &tgt_counts_raw, &perm);

    Ok(ClassDistributionBank {
        classes,
        region_dim: source_features.ncols() / REGION_COUNT,
        means: [src_means, tgt_means],
        counts: [src_counts, tgt_counts],
        alpha,
        recluster_period,
    })
}

/// Nearest cluster for one region-concatenated feature row: argmin over
/// classes of the summed squared distance. Ties break to the lowest index.
pub fn assign_cluster(
    features: ArrayView1<f64>,
    bank: &ClassDistributionBank,
    domain: Domain,
) -> Result<usize> {
    if features.len() != bank.feature_dim() {
        return Err(AgraError::Dimension(format!(
            "feature length {} does not match bank dim {}",
            features.len(),
            bank.feature_dim()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(AgraError::Numeric("features contain non-finite values".into()));
    }
    let means = bank.means(domain);
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, row) in means.rows().into_iter().enumerate() {
        let d = squared_distance(features, row);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    Ok(best)
}

/// Moving-average update toward the batch means of the clusters present in
/// the batch. Clusters with no assigned samples are left untouched.
pub fn update_moving_average(
    bank: &mut ClassDistributionBank,
    batch_features: &Array2<f64>,
    assignments: &[usize],
    domain: Domain,
) -> Result<()> {
    if batch_features.nrows() != assignments.len() {
        return Err(AgraError::Argument(format!(
            "{} batch rows but {} assignments",
            batch_features.nrows(),
            assignments.len()
        )));
    }
    if batch_features.nrows() == 0 {
        return Err(AgraError::Argument("batch must be non-empty".into()));
    }
    if batch_features.ncols() != bank.feature_dim() {
        return Err(AgraError::Dimension(format!(
            "batch feature dim {} does not match bank dim {}",
            batch_features.ncols(),
            bank.feature_dim()
        )));
    }
    let classes = bank.classes;
    let mut sums = Array2::<f64>::zeros((classes, batch_features.ncols()));
    let mut counts = vec![0usize; classes];
    for (i, &c) in assignments.iter().enumerate() {
        if c >= classes {
            return Err(AgraError::Argument(format!(
                "assignment {c} out of range for {classes} clusters"
            )));
        }
        let mut row = sums.row_mut(c);
        row += &batch_features.row(i);
        counts[c] += 1;
    }
    let alpha = bank.alpha;
    let means = bank.means_mut(domain);
    for c in 0..classes {
        if counts[c] == 0 {
            continue;
        }
        let batch_mean = &sums.row(c) / counts[c] as f64;
        let mut row = means.row_mut(c);
        row.zip_mut_with(&batch_mean.view(), |m, &b| *m = (1.0 - alpha) * *m + alpha * b);
    }
    Ok(())
}

/// Rebuild the bank at an epoch boundary when the re-clustering period is
/// hit; otherwise leave it unchanged. Returns whether a rebuild happened.
#[allow(clippy::too_many_arguments)]
pub fn maybe_recluster(
    bank: &mut ClassDistributionBank,
    epoch: usize,
    source_features: &Array2<f64>,
    source_labels: &[usize],
    target_features: &Array2<f64>,
    mode: SourceClusterMode,
    recluster_enabled: bool,
    seed: u64,
) -> Result<bool> {
    if !recluster_enabled
        || bank.recluster_period == 0
        || epoch == 0
        || epoch % bank.recluster_period != 0
    {
        return Ok(false);
    }
    *bank = initialize_bank(
        source_features,
        source_labels,
        target_features,
        bank.classes,
        mode,
        bank.alpha,
        bank.recluster_period,
        seed.wrapping_add(epoch as u64),
    )?;
    Ok(true)
}

/// Global per-region means regardless of class, as a single row. Used by the
/// mean-distribution ablation tests as an independent reference.
pub fn global_mean_row(features: &Array2<f64>) -> Array1<f64> {
    features.mean_axis(Axis(0)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn blobs(
        seed: u64,
        clusters: usize,
        per_cluster: usize,
        dim: usize,
        spread: f64,
        std: f64,
    ) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = Array2::<f64>::zeros((clusters, dim));
        for c in 0..clusters {
            centers[[c, c % dim]] = spread * (c + 1) as f64;
            centers[[c, (c + 1) % dim]] = -spread * (c + 1) as f64;
        }
        let n = clusters * per_cluster;
        let mut points = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % clusters;
            labels.push(c);
            for d in 0..dim {
                points[[i, d]] = centers[[c, d]] + std * rng.random_range(-1.0..1.0);
            }
        }
        (points, labels)
    }

    /// Bank with well-separated integer-valued rows. Integer entries make
    /// midpoints exactly representable, so distance ties are exact.
    fn bank_fixture(classes: usize, region_dim: usize) -> ClassDistributionBank {
        let feat = REGION_COUNT * region_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + (classes * 64 + region_dim) as u64);
        let rows = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((classes, feat), |_| rng.random_range(-8..=8i32) as f64)
        };
        let src = rows(&mut rng);
        let tgt = rows(&mut rng);
        ClassDistributionBank::from_parts(src, tgt, vec![1; classes], vec![1; classes], 0.1, 10)
            .unwrap()
    }

    #[test]
    fn kmeans_recovers_two_planted_blobs() {
        let (points, labels) = blobs(11, 2, 40, 8, 25.0, 1.0);
        let outcome = kmeans(&points, 2, KmeansInit::Seeded(3), 100, 1e-9).unwrap();
        let found: Vec<usize> = outcome.assignments.iter().map(|a| a.cluster).collect();
        assert_eq!(adjusted_rand_index(&labels, &found), 1.0);
    }

    #[test]
    fn kmeans_identical_points_single_cluster() {
        let points = Array2::from_elem((9, 4), 3.25);
        let outcome = kmeans(&points, 1, KmeansInit::Seeded(0), 50, 1e-12).unwrap();
        assert_eq!(outcome.centroids, Array2::from_elem((1, 4), 3.25));
    }

    #[test]
    fn kmeans_one_cluster_per_distinct_point() {
        let mut points = Array2::zeros((4, 3));
        for i in 0..4 {
            points[[i, 0]] = i as f64 * 10.0;
        }
        let outcome = kmeans(&points, 4, KmeansInit::Seeded(5), 100, 1e-12).unwrap();
        let distortion: f64 = outcome.assignments.iter().map(|a| a.distance).sum();
        assert_eq!(distortion, 0.0);
    }

    #[test]
    fn kmeans_rejects_more_clusters_than_points() {
        let points = Array2::<f64>::zeros((3, 2));
        let err = kmeans(&points, 4, KmeansInit::Seeded(0), 10, 1e-9).unwrap_err();
        assert!(matches!(err, AgraError::Argument(_)));
    }

    #[test]
    fn kmeans_distortion_is_non_increasing() {
        let (points, _) = blobs(21, 4, 30, 6, 4.0, 2.5);
        let outcome = kmeans(&points, 4, KmeansInit::Seeded(9), 100, 0.0).unwrap();
        for pair in outcome.distortion_history.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "distortion increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn kmeans_planted_recovery_over_seeds() {
        for seed in 0..20u64 {
            let (points, labels) = blobs(100 + seed, 3, 30, 10, 30.0, 1.0);
            let outcome = kmeans(&points, 3, KmeansInit::Seeded(seed), 100, 1e-9).unwrap();
            let found: Vec<usize> = outcome.assignments.iter().map(|a| a.cluster).collect();
            let ari = adjusted_rand_index(&labels, &found);
            assert!(ari >= 0.99, "seed {seed}: ARI {ari}");
        }
    }

    #[test]
    fn align_clusters_finds_planted_permutation() {
        let mut reference = Array2::zeros((4, 3));
        for c in 0..4 {
            reference[[c, 0]] = c as f64 * 5.0;
        }
        let perm_true = [2usize, 0, 3, 1];
        let mut shuffled = Array2::zeros((4, 3));
        for (class, &k) in perm_true.iter().enumerate() {
            shuffled.row_mut(k).assign(&reference.row(class));
        }
        let perm = align_clusters(&shuffled.view(), &reference.view());
        assert_eq!(perm, perm_true.to_vec());
    }

    #[test]
    fn initialize_bank_single_sample_per_class() {
        let classes = 3;
        let feat = REGION_COUNT * 4;
        let mut src = Array2::zeros((classes, feat));
        for c in 0..classes {
            for j in 0..feat {
                src[[c, j]] = c as f64 * 7.0 + j as f64;
            }
        }
        let labels = vec![0, 1, 2];
        let bank = initialize_bank(&src, &labels, &src, classes, SourceClusterMode::Labels, 0.1, 10, 7)
            .unwrap();
        assert_eq!(bank.means(Domain::Source), &src);
    }

    #[test]
    fn initialize_bank_target_aligns_to_source_on_identical_data() {
        let (points, labels) = blobs(31, 3, 25, REGION_COUNT * 2, 40.0, 0.5);
        let bank = initialize_bank(&points, &labels, &points, 3, SourceClusterMode::Labels, 0.1, 10, 3)
            .unwrap();
        let diff = (bank.means(Domain::Source) - bank.means(Domain::Target))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff <= 1e-9, "aligned target means deviate by {diff}");
    }

    #[test]
    fn initialize_bank_single_cluster_matches_global_mean() {
        let (points, _) = blobs(41, 4, 10, REGION_COUNT, 3.0, 1.0);
        let labels = vec![0usize; points.nrows()];
        let bank = initialize_bank(&points, &labels, &points, 1, SourceClusterMode::Labels, 0.1, 10, 1)
            .unwrap();
        let global = global_mean_row(&points);
        for domain in [Domain::Source, Domain::Target] {
            let diff = (&bank.means(domain).row(0) - &global)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff <= 1e-9);
        }
        assert_eq!(bank.means(Domain::Source).dim(), (1, REGION_COUNT));
    }

    #[test]
    fn initialize_bank_rejects_empty_class() {
        let src = Array2::<f64>::zeros((4, REGION_COUNT));
        let labels = vec![0, 0, 1, 1];
        let err = initialize_bank(&src, &labels, &src, 3, SourceClusterMode::Labels, 0.1, 10, 0)
            .unwrap_err();
        assert!(matches!(err, AgraError::Argument(_)));
    }

    #[test]
    fn initialize_bank_rejects_label_out_of_range() {
        let src = Array2::<f64>::zeros((2, REGION_COUNT));
        let labels = vec![0, 5];
        let err = initialize_bank(&src, &labels, &src, 2, SourceClusterMode::Labels, 0.1, 10, 0)
            .unwrap_err();
        assert!(matches!(err, AgraError::Argument(_)));
    }

    #[test]
    fn assign_cluster_exact_match_and_tie_break() {
        let bank = bank_fixture(5, 4);
        let row3 = bank.means(Domain::Target).row(3).to_owned();
        assert_eq!(assign_cluster(row3.view(), &bank, Domain::Target).unwrap(), 3);

        // Exactly equidistant between clusters 1 and 4 (integer rows make the
        // midpoint distances bitwise equal): the tie goes to the lower index.
        let means = bank.means(Domain::Source);
        let mid = (&means.row(1) + &means.row(4)) / 2.0;
        let dist = |c: usize| squared_distance(mid.view(), means.row(c));
        assert_eq!(dist(1).to_bits(), dist(4).to_bits());
        assert!((0..5).filter(|&c| c != 1 && c != 4).all(|c| dist(c) > dist(1)));
        assert_eq!(assign_cluster(mid.view(), &bank, Domain::Source).unwrap(), 1);
    }

    #[test]
    fn assign_cluster_matches_brute_force_scan() {
        let bank = bank_fixture(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let sample =
                Array1::from_shape_fn(bank.feature_dim(), |_| rng.random_range(-30.0..80.0));
            let got = assign_cluster(sample.view(), &bank, Domain::Target).unwrap();
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..bank.classes() {
                let d = squared_distance(sample.view(), bank.means(Domain::Target).row(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            assert_eq!(got, best.1);
        }
    }

    #[test]
    fn assign_cluster_rejects_non_finite() {
        let bank = bank_fixture(2, 2);
        let mut sample = Array1::zeros(bank.feature_dim());
        sample[0] = f64::NAN;
        let err = assign_cluster(sample.view(), &bank, Domain::Source).unwrap_err();
        assert!(matches!(err, AgraError::Numeric(_)));
    }

    #[test]
    fn ema_direct_evaluation() {
        let mut bank = bank_fixture(2, 2);
        bank.means_mut(Domain::Source).fill(0.0);
        let batch = Array2::ones((4, bank.feature_dim()));
        update_moving_average(&mut bank, &batch, &[0, 0, 0, 0], Domain::Source).unwrap();
        for v in bank.means(Domain::Source).row(0).iter() {
            assert!((v - 0.1).abs() <= 1e-15);
        }
    }

    #[test]
    fn ema_alpha_zero_is_identity() {
        let mut bank = bank_fixture(3, 2);
        bank.alpha = 0.0;
        let before = bank.clone();
        let batch = Array2::from_elem((5, bank.feature_dim()), -4.0);
        update_moving_average(&mut bank, &batch, &[0, 1, 2, 1, 0], Domain::Target).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn ema_skips_clusters_absent_from_batch() {
        let mut bank = bank_fixture(4, 2);
        let row2_before = bank.means(Domain::Source).row(2).to_owned();
        let batch = Array2::from_elem((3, bank.feature_dim()), 99.0);
        update_moving_average(&mut bank, &batch, &[0, 1, 3], Domain::Source).unwrap();
        // Bitwise untouched.
        assert_eq!(bank.means(Domain::Source).row(2).to_owned(), row2_before);
    }

    #[test]
    fn ema_fixed_point_convergence() {
        let mut bank = bank_fixture(1, 2);
        bank.means_mut(Domain::Source).fill(1.0); // unit-scale initial gap from target M = 0
        let batch = Array2::zeros((2, bank.feature_dim()));
        for _ in 0..200 {
            update_moving_average(&mut bank, &batch, &[0, 0], Domain::Source).unwrap();
        }
        let residual = bank
            .means(Domain::Source)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(residual <= 1e-6, "residual {residual}");
        assert!(residual <= (0.9f64).powi(200) + 1e-12);
    }

    #[test]
    fn ema_stays_in_bounding_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bank = bank_fixture(2, 3);
        let feat = bank.feature_dim();
        for _ in 0..20 {
            let old = bank.means(Domain::Target).row(0).to_owned();
            let batch = Array2::from_shape_fn((3, feat), |_| rng.random_range(-10.0..10.0));
            let batch_mean = batch.mean_axis(Axis(0)).unwrap();
            update_moving_average(&mut bank, &batch, &[0, 0, 0], Domain::Target).unwrap();
            for j in 0..feat {
                let lo = old[j].min(batch_mean[j]) - 1e-12;
                let hi = old[j].max(batch_mean[j]) + 1e-12;
                let v = bank.means(Domain::Target)[[0, j]];
                assert!(v >= lo && v <= hi, "component {j} escaped [{lo}, {hi}]: {v}");
            }
        }
    }

    #[test]
    fn assign_cluster_is_scale_consistent() {
        let bank = bank_fixture(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let sample =
                Array1::from_shape_fn(bank.feature_dim(), |_| rng.random_range(-20.0..60.0));
            let base = assign_cluster(sample.view(), &bank, Domain::Source).unwrap();
            for scale in [0.25, 3.0, 17.5] {
                let mut scaled_bank = bank.clone();
                scaled_bank.means_mut(Domain::Source).mapv_inplace(|v| v * scale);
                let scaled = (&sample * scale).to_owned();
                let got = assign_cluster(scaled.view(), &scaled_bank, Domain::Source).unwrap();
                assert_eq!(got, base);
            }
        }
    }

    #[test]
    fn maybe_recluster_respects_period() {
        let (points, labels) = blobs(61, 3, 20, REGION_COUNT * 2, 30.0, 0.5);
        let mut bank =
            initialize_bank(&points, &labels, &points, 3, SourceClusterMode::Labels, 0.1, 10, 1)
                .unwrap();
        bank.means_mut(Domain::Source).fill(-1.0); // drift the bank away

        let drifted = bank.clone();
        let did = maybe_recluster(
            &mut bank, 7, &points, &labels, &points, SourceClusterMode::Labels, true, 1,
        )
        .unwrap();
        assert!(!did);
        assert_eq!(bank, drifted);

        let did = maybe_recluster(
            &mut bank, 10, &points, &labels, &points, SourceClusterMode::Labels, true, 1,
        )
        .unwrap();
        assert!(did);
        let fresh =
            initialize_bank(&points, &labels, &points, 3, SourceClusterMode::Labels, 0.1, 10, 11)
                .unwrap();
        assert_eq!(bank.means(Domain::Source), fresh.means(Domain::Source));
    }

    #[test]
    fn mean_mode_bank_has_single_cluster_shape() {
        let (points, _) = blobs(71, 2, 15, REGION_COUNT, 10.0, 1.0);
        let labels = vec![0usize; points.nrows()];
        let bank = initialize_bank(&points, &labels, &points, 1, SourceClusterMode::Labels, 0.1, 10, 2)
            .unwrap();
        assert_eq!(bank.means(Domain::Source).nrows(), 1);
        assert_eq!(bank.means(Domain::Target).nrows(), 1);
        assert_eq!(bank.feature_dim(), REGION_COUNT);
    }
}
