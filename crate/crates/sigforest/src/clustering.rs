//! Triage of the most anomalous samples: select the lowest-scoring fraction,
//! cluster their signature vectors with k-means, and average the signatures
//! per cluster so distinct kinds of anomalies can be reviewed as groups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::forest::ForestModel;
use crate::scoring::{score_batch, ScoreReport};
use crate::signature::signature;

/// K-means configuration over signature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    /// Fraction of the dataset (by lowest score) fed to the clusterer.
    pub top_fraction: f64,
    pub restarts: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Standardize signature columns before clustering. Off by default:
    /// signature entries share units, so raw Euclidean distance is
    /// meaningful as-is.
    pub standardize: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 5,
            top_fraction: 0.10,
            restarts: 10,
            max_iterations: 300,
            tolerance: 1e-6,
            seed: 0,
            standardize: false,
        }
    }
}

/// Result of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansOutcome {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step, non-increasing within the kept
    /// restart.
    pub inertia_history: Vec<f64>,
}

/// Clustered triage report over the selected anomalies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    /// Row indices of the selected anomalies, score-ascending.
    pub selected_ids: Vec<usize>,
    /// Scores aligned with `selected_ids`.
    pub selected_scores: Vec<f64>,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Mean raw signature of each cluster's members.
    pub profiles: Vec<Vec<f64>>,
    pub cluster_sizes: Vec<usize>,
}

/// Indices of the `ceil(q * N)` lowest-scoring samples, score-ascending;
/// ties break by row index.
pub fn top_anomalies(scores: &[ScoreReport], q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidFraction(q));
    }
    let take = ((q * scores.len() as f64).ceil() as usize).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].score.total_cmp(&scores[b].score).then(a.cmp(&b)));
    order.truncate(take);
    Ok(order)
}

/// Lloyd's algorithm with k-means++ seeding and `restarts` independent
/// restarts; the lowest-inertia run wins, ties broken by restart index.
/// Empty clusters are reseeded from the point farthest from its centroid.
pub fn kmeans(rows: &[Vec<f64>], config: &ClusterConfig) -> Result<KmeansOutcome> {
    if rows.len() < config.k {
        return Err(Error::TooFewSamples {
            samples: rows.len(),
            k: config.k,
        });
    }
    if config.k == 0 || config.restarts == 0 {
        return Err(Error::InvalidConfig(
            "k and restarts must be at least 1".into(),
        ));
    }
    let runs = exec::map_indexed(config.restarts, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(r as u64);
        lloyd(rows, config, &mut rng)
    });
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.inertia.total_cmp(&b.inertia).then(i.cmp(j)))
        .map(|(_, run)| run)
        .expect("at least one restart");
    Ok(best)
}

fn lloyd<R: Rng>(rows: &[Vec<f64>], config: &ClusterConfig, rng: &mut R) -> KmeansOutcome {
    let k = config.k;
    let mut centroids = plus_plus_init(rows, k, rng);
    let mut assignments = vec![0usize; rows.len()];
    let mut distances = vec![0.0f64; rows.len()];
    let mut inertia_history = Vec::new();

    for _ in 0..config.max_iterations {
        let inertia = assign(rows, &centroids, &mut assignments, &mut distances);
        inertia_history.push(inertia);

        let mut next = centroid_means(rows, &assignments, k);
        let mut movement: f64 = 0.0;
        for (c, centroid) in next.iter_mut().enumerate() {
            if centroid.is_none() {
                // reseed an empty cluster from the point farthest from its
                // centroid; ties break on the lowest row index
                let farthest = distances
                    .iter()
                    .enumerate()
                    .max_by(|(i, a), (j, b)| a.total_cmp(b).then(j.cmp(i)))
                    .map(|(i, _)| i)
                    .expect("rows are non-empty");
                *centroid = Some(rows[farthest].clone());
                distances[farthest] = 0.0; // spend each donor at most once
            }
            let centroid = centroid.as_ref().expect("filled above");
            movement = movement.max(euclidean(centroid, &centroids[c]).sqrt());
            centroids[c] = centroid.clone();
        }
        if movement <= config.tolerance {
            break;
        }
    }
    // final pass so every point sits with its nearest centroid
    let inertia = assign(rows, &centroids, &mut assignments, &mut distances);
    inertia_history.push(inertia);
    KmeansOutcome {
        assignments,
        centroids,
        inertia,
        inertia_history,
    }
}

/// k-means++: first centroid uniform, then each next centroid drawn with
/// probability proportional to the squared distance to the nearest chosen
/// one. A zero total weight (coincident points) falls back to a uniform
/// draw.
fn plus_plus_init<R: Rng>(rows: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(rows[rng.random_range(0..rows.len())].clone());
    let mut best = vec![f64::INFINITY; rows.len()];
    while centroids.len() < k {
        let newest = centroids.last().expect("non-empty");
        for (i, row) in rows.iter().enumerate() {
            let d = euclidean(row, newest);
            if d < best[i] {
                best[i] = d;
            }
        }
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = rows.len() - 1;
            for (i, w) in best.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..rows.len())
        };
        centroids.push(rows[pick].clone());
    }
    centroids
}

/// Assigns every row to its nearest centroid (ties to the lowest index),
/// filling per-row squared distances; returns the inertia.
fn assign(
    rows: &[Vec<f64>],
    centroids: &[Vec<f64>],
    assignments: &mut [usize],
    distances: &mut [f64],
) -> f64 {
    let mut inertia = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = euclidean(row, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
        distances[i] = best_d;
        inertia += best_d;
    }
    inertia
}

/// Mean of each cluster's members, `None` for empty clusters.
fn centroid_means(rows: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let d = rows.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &c) in rows.iter().zip(assignments) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(mut sum, count)| {
            if count == 0 {
                return None;
            }
            for s in &mut sum {
                *s /= count as f64;
            }
            Some(sum)
        })
        .collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Full triage pipeline: score all rows, keep the top fraction, compute
/// their signatures, and cluster those vectors.
pub fn cluster_signatures(
    model: &ForestModel,
    data: &Dataset,
    config: &ClusterConfig,
) -> Result<ClusterReport> {
    let scores = score_batch(model, data)?;
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let selected = top_anomalies(&scores, config.top_fraction)?;
    let selected_scores: Vec<f64> = selected.iter().map(|&i| scores[i].score).collect();

    let signature_rows: Vec<Vec<f64>> = exec::map_indexed(selected.len(), |s| {
        signature(model, data.row(selected[s]))
            .expect("selected row matches the model schema")
            .values
    });

    let cluster_input = if config.standardize {
        standardize(&signature_rows)
    } else {
        signature_rows.clone()
    };
    let outcome = kmeans(&cluster_input, config)?;

    let mut profiles = vec![vec![0.0; model.n_features()]; config.k];
    let mut cluster_sizes = vec![0usize; config.k];
    for (row, &c) in signature_rows.iter().zip(&outcome.assignments) {
        cluster_sizes[c] += 1;
        for (p, v) in profiles[c].iter_mut().zip(row) {
            *p += v;
        }
    }
    for (profile, &count) in profiles.iter_mut().zip(&cluster_sizes) {
        if count > 0 {
            for p in profile {
                *p /= count as f64;
            }
        }
    }

    Ok(ClusterReport {
        selected_ids: selected,
        selected_scores,
        assignments: outcome.assignments,
        centroids: outcome.centroids,
        inertia: outcome.inertia,
        profiles,
        cluster_sizes,
    })
}

/// Column-wise zero-mean unit-variance rescaling; constant columns stay
/// zero.
fn standardize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return Vec::new();
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let diff = v - m;
            *s += diff * diff;
        }
    }
    for s in &mut var {
        *s = (*s / n).sqrt();
    }
    rows.iter()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&var)
                .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
                .collect()
        })
        .collect()
}
