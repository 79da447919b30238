//! Trajectory featurization, cluster-count selection and K-means labeling.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::ExpertDataset;
use crate::rollout::Trajectory;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("empty trajectory cannot be featurized")]
    EmptyTrajectory,
    #[error("step ({state}, {action}) outside a {num_states}x{num_actions} table")]
    OutOfRange { state: usize, action: usize, num_states: usize, num_actions: usize },
    #[error("need at least {needed} feature vectors, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("feature vectors have inconsistent dimensions")]
    RaggedFeatures,
    #[error("invalid clustering parameter: {0}")]
    InvalidParameter(String),
    #[error("{labels} labels for {returns} returns")]
    LengthMismatch { labels: usize, returns: usize },
    #[error("labeled dataset i/o: {0}")]
    Csv(#[from] csv::Error),
}

/// Normalized `(state, action)` visitation histogram, flattened state-major.
pub fn featurize(
    trajectory: &Trajectory,
    num_states: usize,
    num_actions: usize,
) -> Result<Vec<f64>, ClusterError> {
    if trajectory.is_empty() {
        return Err(ClusterError::EmptyTrajectory);
    }
    let mut hist = vec![0.0; num_states * num_actions];
    for &(s, a) in &trajectory.steps {
        if s >= num_states || a >= num_actions {
            return Err(ClusterError::OutOfRange { state: s, action: a, num_states, num_actions });
        }
        hist[s * num_actions + a] += 1.0;
    }
    let n = trajectory.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}

fn check_rectangular(features: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(ClusterError::RaggedFeatures);
    }
    Ok(dim)
}

/// Eigenvalues (descending) of the uncentered second-moment matrix `XᵀX / N`.
///
/// Computed through whichever of `XXᵀ` and `XᵀX` is smaller; both share their
/// nonzero spectrum.
pub fn second_moment_spectrum(features: &[Vec<f64>]) -> Result<Vec<f64>, ClusterError> {
    let dim = check_rectangular(features)?;
    let n = features.len();
    let x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
    let gram = if n <= dim { &x * x.transpose() } else { x.transpose() * &x };
    let eig = SymmetricEigen::new(gram / n as f64);
    let mut values: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Number of principal components explaining at least `threshold` of the total
/// energy of the feature matrix, clamped to `[1, k_max]`.
///
/// The matrix is not centered: `K` separated clusters then occupy `K`
/// components, whereas centering would collapse two clusters into one axis.
pub fn select_k_with_threshold(
    features: &[Vec<f64>],
    k_max: usize,
    threshold: f64,
) -> Result<usize, ClusterError> {
    if features.len() < 2 {
        return Err(ClusterError::TooFewPoints { needed: 2, got: features.len() });
    }
    if k_max == 0 {
        return Err(ClusterError::InvalidParameter("k_max must be at least 1".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ClusterError::InvalidParameter(format!("threshold {threshold}")));
    }
    let first = &features[0];
    if features.iter().all(|f| f == first) {
        check_rectangular(features)?;
        return Ok(1);
    }
    let spectrum = second_moment_spectrum(features)?;
    let total: f64 = spectrum.iter().sum();
    let mut acc = 0.0;
    let mut k = spectrum.len();
    for (i, v) in spectrum.iter().enumerate() {
        acc += v;
        if acc >= threshold * total * (1.0 - 1e-12) {
            k = i + 1;
            break;
        }
    }
    Ok(k.clamp(1, k_max))
}

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.9;

pub fn select_k(features: &[Vec<f64>], k_max: usize) -> Result<usize, ClusterError> {
    select_k_with_threshold(features, k_max, DEFAULT_VARIANCE_THRESHOLD)
}

const LLOYD_MAX_ITERATIONS: usize = 200;
const LLOYD_SHIFT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Canonical labels: clusters numbered by first appearance in input order.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    pub iterations: usize,
    /// Objective after each assignment step of the winning restart.
    pub objective_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn lloyd(features: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let dim = features[0].len();
    let mut centroids: Vec<Vec<f64>> =
        sample(rng, features.len(), k).into_iter().map(|i| features[i].clone()).collect();
    let mut labels = vec![0; features.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut wcss = 0.0;
        for (label, p) in labels.iter_mut().zip(features) {
            let (c, d) = nearest(p, &centroids);
            *label = c;
            wcss += d;
        }
        if let Some(&prev) = trace.last() {
            assert!(
                wcss <= prev + 1e-9 * (1.0 + f64::abs(prev)),
                "k-means objective increased: {prev} -> {wcss}"
            );
        }
        trace.push(wcss);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&c, p) in labels.iter().zip(features) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < LLOYD_SHIFT_TOLERANCE || iterations >= LLOYD_MAX_ITERATIONS {
            break;
        }
    }
    let wcss = labels.iter().zip(features).map(|(&c, p)| sq_dist(p, &centroids[c])).sum();
    KMeansResult { labels, centroids, wcss, iterations, objective_trace: trace }
}

fn canonicalize(result: &mut KMeansResult) {
    let k = result.centroids.len();
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &l in &result.labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    for slot in map.iter_mut().filter(|m| **m == usize::MAX) {
        *slot = next;
        next += 1;
    }
    let mut centroids = vec![Vec::new(); k];
    for (old, c) in result.centroids.drain(..).enumerate() {
        centroids[map[old]] = c;
    }
    result.centroids = centroids;
    result.labels.iter_mut().for_each(|l| *l = map[*l]);
}

/// Best-of-`restarts` Lloyd K-means with canonical labels.
pub fn kmeans<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    k: usize,
    rng: &mut R,
    restarts: usize,
) -> Result<KMeansResult, ClusterError> {
    check_rectangular(features)?;
    if k == 0 || restarts == 0 {
        return Err(ClusterError::InvalidParameter("k and restarts must be at least 1".into()));
    }
    if k > features.len() {
        return Err(ClusterError::TooFewPoints { needed: k, got: features.len() });
    }
    let seeds: Vec<u64> = (0..restarts).map(|_| rng.gen()).collect();
    let runs: Vec<KMeansResult> =
        seeds.par_iter().map(|&seed| lloyd(features, k, &mut ChaCha8Rng::seed_from_u64(seed))).collect();
    // min_by keeps the first of equal elements, i.e. the lowest restart index.
    let mut best = runs.into_iter().min_by(|a, b| a.wcss.total_cmp(&b.wcss)).expect("at least one restart");
    canonicalize(&mut best);
    Ok(best)
}

/// The observational pairs `{m_i, V_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    labels: Vec<usize>,
    returns: Vec<f64>,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct LabeledRow {
    traj_id: usize,
    m: usize,
    #[serde(rename = "V")]
    v: f64,
}

impl LabeledDataset {
    pub fn new(labels: Vec<usize>, returns: Vec<f64>, k: usize) -> Result<Self, ClusterError> {
        if labels.len() != returns.len() {
            return Err(ClusterError::LengthMismatch { labels: labels.len(), returns: returns.len() });
        }
        if labels.is_empty() {
            return Err(ClusterError::TooFewPoints { needed: 1, got: 0 });
        }
        if k == 0 || labels.iter().any(|&m| m >= k) {
            return Err(ClusterError::InvalidParameter(format!("labels must lie in [0, {k})")));
        }
        Ok(Self { labels, returns, k })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ClusterError> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        for (i, (&m, &v)) in self.labels.iter().zip(&self.returns).enumerate() {
            out.serialize(LabeledRow { traj_id: i, m, v })?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads `traj_id,m,V`; `K` is taken as `max(m) + 1` unless given.
    pub fn read_csv<R: Read>(r: R, k: Option<usize>) -> Result<Self, ClusterError> {
        let mut rows: Vec<LabeledRow> =
            csv::Reader::from_reader(r).deserialize().collect::<Result<_, _>>()?;
        rows.sort_by_key(|row| row.traj_id);
        let k = k.unwrap_or_else(|| rows.iter().map(|r| r.m + 1).max().unwrap_or(0));
        let (labels, returns) = rows.into_iter().map(|r| (r.m, r.v)).unzip();
        Self::new(labels, returns, k)
    }
}

/// Pair each trajectory's cluster label with its recorded return.
pub fn label_dataset(
    dataset: &ExpertDataset,
    labels: &[usize],
    k: usize,
) -> Result<LabeledDataset, ClusterError> {
    if labels.len() != dataset.len() {
        return Err(ClusterError::LengthMismatch { labels: labels.len(), returns: dataset.len() });
    }
    LabeledDataset::new(labels.to_vec(), dataset.returns(), k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    /// Fixed cluster count; chosen by [`select_k`] when absent.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_threshold")]
    pub variance_threshold: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_k_max() -> usize {
    4
}
fn default_threshold() -> f64 {
    DEFAULT_VARIANCE_THRESHOLD
}
fn default_restarts() -> usize {
    10
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: None,
            k_max: default_k_max(),
            variance_threshold: default_threshold(),
            restarts: default_restarts(),
        }
    }
}

/// Featurize, choose `K`, cluster and label a dataset in one pass.
pub fn cluster_dataset<R: Rng + ?Sized>(
    dataset: &ExpertDataset,
    num_states: usize,
    num_actions: usize,
    config: &ClusterConfig,
    rng: &mut R,
) -> Result<(LabeledDataset, KMeansResult), ClusterError> {
    let features = dataset
        .trajectories()
        .par_iter()
        .map(|t| featurize(t, num_states, num_actions))
        .collect::<Result<Vec<_>, _>>()?;
    let k = match config.k {
        Some(k) => k,
        None if features.len() < 2 => 1,
        None => select_k_with_threshold(&features, config.k_max, config.variance_threshold)?,
    };
    let result = kmeans(&features, k, rng, config.restarts)?;
    let labeled = label_dataset(dataset, &result.labels, k)?;
    Ok((labeled, result))
}
