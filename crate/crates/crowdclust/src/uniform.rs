//! Nonadaptive clustering pipeline.
//!
//! With a budget of `T` users each question is asked for each item
//! `tau = floor(Tw / (nL))` times. The per-item empirical answer rates are
//! turned into normalized signature profiles `(2 q^ - 1) / ||2 q^ - 1||`
//! (sup-norm), which concentrate around a vector depending on the item's
//! cluster only; a neighborhood-seeded K-means pass on those profiles
//! recovers the partition. Misclassification is scored against the ground
//! truth minimized over cluster relabelings.

use std::io::Write;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::scalar::Real;

/// Ask counts `Y`, positive-answer counts `x`, and empirical rates
/// `q^ = x / Y` (`1/2` where `Y = 0`) per (item, question).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCounts<F> {
    items: usize,
    questions: usize,
    asks: Vec<u64>,
    positives: Vec<u64>,
    q_hat: Vec<F>,
    /// Per-pair ask count under uniform collection, when applicable.
    pub tau: Option<u64>,
}

impl<F: Real> ResponseCounts<F> {
    pub fn zero(items: usize, questions: usize) -> Self {
        Self {
            items,
            questions,
            asks: vec![0; items * questions],
            positives: vec![0; items * questions],
            q_hat: vec![F::of(0.5); items * questions],
            tau: None,
        }
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn questions(&self) -> usize {
        self.questions
    }

    /// Records one `+1`/`-1` answer.
    pub fn record(&mut self, item: usize, question: usize, answer: i8) {
        let idx = item * self.questions + question;
        self.asks[idx] += 1;
        if answer > 0 {
            self.positives[idx] += 1;
        }
        self.q_hat[idx] = F::of(self.positives[idx] as f64) / F::of(self.asks[idx] as f64);
    }

    pub fn asks(&self, item: usize, question: usize) -> u64 {
        self.asks[item * self.questions + question]
    }

    pub fn positives(&self, item: usize, question: usize) -> u64 {
        self.positives[item * self.questions + question]
    }

    pub fn q_hat(&self, item: usize, question: usize) -> F {
        self.q_hat[item * self.questions + question]
    }

    pub fn q_hat_row(&self, item: usize) -> &[F] {
        &self.q_hat[item * self.questions..(item + 1) * self.questions]
    }

    pub fn asks_row(&self, item: usize) -> &[u64] {
        &self.asks[item * self.questions..(item + 1) * self.questions]
    }

    pub fn total_asks(&self) -> u64 {
        self.asks.iter().sum()
    }

    /// Writes the counts as CSV rows `(item_id, question_id, asks, positives)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["item_id", "question_id", "asks", "positives"])?;
        for i in 0..self.items {
            for l in 0..self.questions {
                wtr.write_record([
                    i.to_string(),
                    l.to_string(),
                    self.asks(i, l).to_string(),
                    self.positives(i, l).to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Simulates uniform collection: every (item, question) pair is asked exactly
/// `tau = floor(Tw / (nL))` times; leftover budget stays unused.
///
/// Draws are keyed by `(seed, item, question, repetition)`, so shards over
/// items are independent and a larger budget extends a smaller one (the first
/// `tau` repetitions are shared).
pub fn collect_uniform<F: Real>(
    model: &Model<F>,
    budget: u64,
    w: usize,
    seed: u64,
) -> Result<ResponseCounts<F>> {
    let n = model.num_items() as u64;
    let l = model.num_questions() as u64;
    if w == 0 || w as u64 > n {
        return Err(Error::Structure(format!(
            "list size w = {w} must lie in [1, {n}]"
        )));
    }
    let tau = budget * w as u64 / (n * l);
    if tau == 0 {
        return Err(Error::Budget(format!(
            "floor(Tw/(nL)) = 0 for T = {budget}, w = {w}, n = {n}, L = {l}"
        )));
    }
    let mut counts = ResponseCounts::zero(model.num_items(), model.num_questions());
    for i in 0..model.num_items() {
        for ql in 0..model.num_questions() {
            let q = model.answer_prob(i, ql).as_f64();
            let mut pos = 0u64;
            for rep in 0..tau {
                if rng::unit_f64(seed, &[i as u64, ql as u64, rep]) < q {
                    pos += 1;
                }
            }
            let idx = i * model.num_questions() + ql;
            counts.asks[idx] = tau;
            counts.positives[idx] = pos;
            counts.q_hat[idx] = F::of(pos as f64) / F::of(tau as f64);
        }
    }
    counts.tau = Some(tau);
    Ok(counts)
}

/// Sup-norm-normalized signature profile of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedProfile<F> {
    /// `(2 q^_i - 1) / ||2 q^_i - 1||`, or the zero vector when degenerate.
    pub values: Vec<F>,
    /// Set when `||2 q^_i - 1|| = 0` (no usable signal for this item).
    pub degenerate: bool,
}

/// Normalizes every item's empirical rate row.
pub fn normalize_profiles<F: Real>(counts: &ResponseCounts<F>) -> Vec<NormalizedProfile<F>> {
    (0..counts.items())
        .map(|i| normalize_rate_row(counts.q_hat_row(i)))
        .collect()
}

/// Normalizes a single row of answer rates. The normalization removes the
/// per-item hardness scale: rows proportional in `2q - 1` map to the same
/// profile.
pub fn normalize_rate_row<F: Real>(rates: &[F]) -> NormalizedProfile<F> {
    let r: Vec<F> = rates.iter().map(|&q| F::of(2.0) * q - F::one()).collect();
    let norm = r.iter().map(|&x| x.abs()).fold(F::zero(), F::max);
    if norm == F::zero() {
        return NormalizedProfile {
            values: vec![F::zero(); rates.len()],
            degenerate: true,
        };
    }
    NormalizedProfile {
        values: r.iter().map(|&x| x / norm).collect(),
        degenerate: false,
    }
}

/// Result of the clustering pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterResult<F> {
    /// Estimated cluster per item (the final nearest-centroid pass covers
    /// every item, so this is always a partition).
    pub assignments: Vec<usize>,
    /// Items per estimated cluster, consistent with `assignments`.
    pub clusters: Vec<Vec<usize>>,
    /// Centroids computed from the seed neighborhoods.
    pub centroids: Vec<Vec<F>>,
    /// Seed item per cluster.
    pub seeds: Vec<usize>,
    /// `|T_i|` per item (0 for degenerate profiles).
    pub neighborhood_sizes: Vec<usize>,
}

/// Options for the clustering pass.
#[derive(Debug, Clone)]
pub struct KmeansOptions {
    /// The neighborhood threshold compares the squared sup-norm distance
    /// against `(n/T)^threshold_exponent`. Defaults to `1/2`.
    pub threshold_exponent: f64,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        Self {
            threshold_exponent: 0.5,
        }
    }
}

/// Neighborhood-seeded K-means on normalized profiles with budget-dependent
/// threshold `(n/T)^{1/2}`; see [`kmeans_cluster_with`].
pub fn kmeans_cluster<F: Real>(
    profiles: &[NormalizedProfile<F>],
    k: usize,
    budget: u64,
) -> Result<ClusterResult<F>> {
    kmeans_cluster_with(profiles, k, budget, &KmeansOptions::default())
}

/// Neighborhood-seeded K-means.
///
/// For each non-degenerate item, `T_i` collects the items whose squared
/// sup-norm distance is at most `(n/T)^e`. Seeds are chosen greedily by
/// largest `|T_i \ assigned|`; each seed's unassigned neighborhood forms a
/// provisional cluster whose mean is the centroid; a final pass reassigns
/// every item (degenerate ones included) to the nearest centroid. All ties
/// break towards the smallest index.
pub fn kmeans_cluster_with<F: Real>(
    profiles: &[NormalizedProfile<F>],
    k: usize,
    budget: u64,
    options: &KmeansOptions,
) -> Result<ClusterResult<F>> {
    let n = profiles.len();
    if k < 2 {
        return Err(Error::Structure(format!(
            "need at least 2 clusters, got {k}"
        )));
    }
    if budget == 0 {
        return Err(Error::Budget("clustering threshold needs T > 0".into()));
    }
    let usable: Vec<usize> = (0..n).filter(|&i| !profiles[i].degenerate).collect();
    if usable.len() < k {
        return Err(Error::Seeding(format!(
            "{} non-degenerate profiles cannot seed {k} clusters",
            usable.len()
        )));
    }
    let threshold = F::of((n as f64 / budget as f64).powf(options.threshold_exponent));

    // Neighborhoods over non-degenerate items only; degenerate items join in
    // the final pass.
    let mut neighborhoods: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut neighborhood_sizes = vec![0usize; n];
    for &i in &usable {
        let members: Vec<usize> = usable
            .iter()
            .copied()
            .filter(|&j| {
                let d = linf_distance(&profiles[i].values, &profiles[j].values);
                d * d <= threshold
            })
            .collect();
        neighborhood_sizes[i] = members.len();
        neighborhoods[i] = members;
    }

    let mut assigned = vec![false; n];
    let mut seeds = Vec::with_capacity(k);
    let mut centroids: Vec<Vec<F>> = Vec::with_capacity(k);
    for round in 0..k {
        let mut best_item = None;
        let mut best_count = 0usize;
        for &i in &usable {
            let count = neighborhoods[i].iter().filter(|&&j| !assigned[j]).count();
            if count > best_count {
                best_count = count;
                best_item = Some(i);
            }
        }
        let seed = best_item.ok_or_else(|| {
            Error::Seeding(format!(
                "no unassigned neighborhood left for seed {} of {k}; \
                 profiles may be too concentrated",
                round + 1
            ))
        })?;
        let members: Vec<usize> = neighborhoods[seed]
            .iter()
            .copied()
            .filter(|&j| !assigned[j])
            .collect();
        for &j in &members {
            assigned[j] = true;
        }
        let dim = profiles[seed].values.len();
        let mut centroid = vec![F::zero(); dim];
        for &j in &members {
            for (c, v) in centroid.iter_mut().zip(&profiles[j].values) {
                *c = *c + *v;
            }
        }
        let size = F::of_usize(members.len());
        for c in &mut centroid {
            *c = *c / size;
        }
        seeds.push(seed);
        centroids.push(centroid);
    }

    // Final pass: every item goes to the nearest centroid.
    let mut assignments = vec![0usize; n];
    for i in 0..n {
        let mut best_k = 0usize;
        let mut best_d = F::infinity();
        for (kk, centroid) in centroids.iter().enumerate() {
            let d = linf_distance(centroid, &profiles[i].values);
            if d < best_d {
                best_d = d;
                best_k = kk;
            }
        }
        assignments[i] = best_k;
    }
    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assignments.iter().enumerate() {
        clusters[c].push(i);
    }
    Ok(ClusterResult {
        assignments,
        clusters,
        centroids,
        seeds,
        neighborhood_sizes,
    })
}

fn linf_distance<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(F::zero(), F::max)
}

/// Ask shares by (hardest items, question group). The four shares partition
/// the asks recorded so far: `hard + rest = 1` and `informative + dummy = 1`
/// (all zero only before any answer arrives).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryShares<F> {
    pub hard_informative: F,
    pub hard_dummy: F,
    pub rest_informative: F,
    pub rest_dummy: F,
}

impl<F: Real> CategoryShares<F> {
    pub fn zero() -> Self {
        Self {
            hard_informative: F::zero(),
            hard_dummy: F::zero(),
            rest_informative: F::zero(),
            rest_dummy: F::zero(),
        }
    }

    pub fn informative(&self) -> F {
        self.hard_informative + self.rest_informative
    }

    pub fn hard(&self) -> F {
        self.hard_informative + self.hard_dummy
    }
}

/// Splits the cumulative ask counts into category shares.
///
/// `hard` flags the items counted as hardest; the "informative" group is the
/// first two questions (all questions when `L <= 2`), matching the category
/// convention used for the four-question synthetic models.
pub fn category_shares<F: Real>(counts: &ResponseCounts<F>, hard: &[bool]) -> CategoryShares<F> {
    let informative_below = 2.min(counts.questions());
    let mut tally = [[0u64; 2]; 2];
    for (i, &is_hard) in hard.iter().enumerate() {
        for l in 0..counts.questions() {
            let hard_idx = usize::from(is_hard);
            let dummy_idx = usize::from(l >= informative_below);
            tally[hard_idx][dummy_idx] += counts.asks(i, l);
        }
    }
    let total: u64 = tally.iter().flatten().sum();
    if total == 0 {
        return CategoryShares::zero();
    }
    let share = |v: u64| F::of(v as f64) / F::of(total as f64);
    CategoryShares {
        hard_informative: share(tally[1][0]),
        hard_dummy: share(tally[1][1]),
        rest_informative: share(tally[0][0]),
        rest_dummy: share(tally[0][1]),
    }
}

/// Misclassification record for one clustering against the ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord<F> {
    /// Misclassified item ids under the best relabeling.
    pub misclassified: Vec<usize>,
    /// `gamma`: for each truth cluster, the matched result cluster.
    pub permutation: Vec<usize>,
    /// Per-item misclassification indicator.
    pub per_item: Vec<bool>,
    /// `|misclassified| / n`.
    pub rate: F,
}

/// Scores a clustering against the ground-truth map, minimizing the number of
/// misclassified items over all relabelings of the estimated clusters.
///
/// For `K <= 8` the permutations are enumerated exhaustively; for larger `K`
/// the equivalent maximum-weight assignment is solved with the Hungarian
/// method. Both routes are exposed for cross-checking.
pub fn misclassification_error<F: Real>(
    result: &ClusterResult<F>,
    truth: &[usize],
) -> Result<ErrorRecord<F>> {
    let n = result.assignments.len();
    let k = result.clusters.len();
    if truth.len() != n {
        return Err(Error::Structure(format!(
            "truth has {} items, clustering has {n}",
            truth.len()
        )));
    }
    if truth.iter().any(|&t| t >= k) {
        return Err(Error::Structure(format!(
            "truth uses a cluster id outside [0, {k})"
        )));
    }
    let overlap = cluster_overlap(truth, &result.assignments, k);
    let (permutation, _) = if k <= 8 {
        best_permutation_exhaustive(&overlap)
    } else {
        best_permutation_matching(&overlap)
    };
    let per_item: Vec<bool> = (0..n)
        .map(|i| result.assignments[i] != permutation[truth[i]])
        .collect();
    let misclassified: Vec<usize> = per_item
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    let rate = F::of_usize(misclassified.len()) / F::of_usize(n);
    Ok(ErrorRecord {
        misclassified,
        permutation,
        per_item,
        rate,
    })
}

/// Overlap counts `|I_k intersect S_j|` between truth clusters (rows) and
/// result clusters (columns).
pub fn cluster_overlap(truth: &[usize], assignments: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut overlap = vec![vec![0u64; k]; k];
    for (&t, &a) in truth.iter().zip(assignments) {
        overlap[t][a] += 1;
    }
    overlap
}

/// Exhaustive search over relabelings; returns the lexicographically smallest
/// maximizer of the total overlap and that total.
pub fn best_permutation_exhaustive(overlap: &[Vec<u64>]) -> (Vec<usize>, u64) {
    let k = overlap.len();
    let mut best_perm: Option<Vec<usize>> = None;
    let mut best_total = 0u64;
    for perm in (0..k).permutations(k) {
        let total: u64 = perm.iter().enumerate().map(|(t, &r)| overlap[t][r]).sum();
        if best_perm.is_none() || total > best_total {
            best_total = total;
            best_perm = Some(perm);
        }
    }
    (best_perm.expect("k >= 1"), best_total)
}

/// Assignment-problem route (Hungarian method) for the same maximization.
pub fn best_permutation_matching(overlap: &[Vec<u64>]) -> (Vec<usize>, u64) {
    let weights = pathfinding::matrix::Matrix::from_rows(
        overlap
            .iter()
            .map(|row| row.iter().map(|&v| v as i64).collect::<Vec<_>>()),
    )
    .expect("square overlap matrix");
    let (total, assignment) = pathfinding::kuhn_munkres::kuhn_munkres(&weights);
    (assignment, total as u64)
}
