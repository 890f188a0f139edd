//! Clustering, retrieval and classification metrics over frozen embeddings.
//!
//! Ground-truth clusters are the distinct exact label sets of the evaluated
//! split, and k-means uses that many clusters. A retrieved neighbour is
//! relevant when it shares at least one label with the query.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelSet};
use crate::error::{Error, Result};
use crate::model::EmbeddingModel;

/// Lloyd iterations cap.
pub const KMEANS_MAX_ITER: usize = 300;

/// Cut-offs reported for Recall@K.
pub const RECALL_KS: [usize; 4] = [1, 2, 4, 8];

/// Cluster assignment keyed by example id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    ids: Vec<String>,
    assignment: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(ids: Vec<String>, assignment: Vec<usize>, k: usize) -> Result<Self> {
        if ids.len() != assignment.len() {
            return Err(Error::Contract(format!(
                "{} ids for {} assignments",
                ids.len(),
                assignment.len()
            )));
        }
        if let Some(&c) = assignment.iter().find(|&&c| c >= k) {
            return Err(Error::Contract(format!("cluster id {c} outside [0, {k})")));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!("id {:?} assigned twice", w[0])));
        }
        Ok(Self { ids, assignment, k })
    }

    /// Partition over positional ids `"0"`, `"1"`, ...
    pub fn from_assignment(assignment: Vec<usize>) -> Self {
        let k = assignment.iter().max().map_or(0, |m| m + 1);
        let ids = (0..assignment.len()).map(|i| i.to_string()).collect();
        Self { ids, assignment, k }
    }

    /// Groups examples by their exact label set. Cluster ids follow the
    /// sorted order of the distinct sets.
    pub fn from_label_sets(ids: Vec<String>, labels: &[LabelSet]) -> Result<Self> {
        let mut distinct: Vec<&LabelSet> = labels.iter().collect();
        distinct.sort();
        distinct.dedup();
        let lookup: HashMap<&LabelSet, usize> = distinct.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let assignment = labels.iter().map(|s| lookup[s]).collect();
        Self::new(ids, assignment, distinct.len())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub partition: Partition,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment step.
    pub objective_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeding. Empty clusters are re-seeded at
/// the point farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], ids: &[String], k: usize, seed: u64) -> Result<KMeansResult> {
    if k < 1 {
        return Err(Error::Contract("k-means needs k >= 1".into()));
    }
    if k > points.len() {
        return Err(Error::Contract(format!("k = {k} exceeds {} points", points.len())));
    }
    if ids.len() != points.len() {
        return Err(Error::Contract(format!("{} ids for {} points", ids.len(), points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();

    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut objective = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            objective += d;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        history.push(objective);
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // farthest point from its own centroid, among clusters that can
            // spare a member
            let far = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| {
                    sq_dist(&points[a], &centroids[assignment[a]])
                        .total_cmp(&sq_dist(&points[b], &centroids[assignment[b]]))
                        .then(b.cmp(&a))
                });
            if let Some(i) = far {
                counts[assignment[i]] -= 1;
                counts[c] = 1;
                assignment[i] = c;
                centroids[c] = points[i].clone();
            }
        }
    }
    Ok(KMeansResult {
        partition: Partition::new(ids.to_vec(), assignment, k)?,
        centroids,
        objective_history: history,
    })
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

/// Normalized mutual information `2·I(A;B) / (H(A) + H(B))`.
///
/// Two single-cluster partitions are identical and score 1.
pub fn nmi(pred: &Partition, truth: &Partition) -> Result<f64> {
    if pred.ids != truth.ids {
        return Err(Error::Contract("partitions cover different ids".into()));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::Contract("empty partitions".into()));
    }
    let nf = n as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut a = vec![0usize; pred.k];
    let mut b = vec![0usize; truth.k];
    for (&x, &y) in pred.assignment.iter().zip(&truth.assignment) {
        *joint.entry((x, y)).or_default() += 1;
        a[x] += 1;
        b[y] += 1;
    }
    let ha = entropy(a.iter().copied(), nf);
    let hb = entropy(b.iter().copied(), nf);
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mut keys: Vec<_> = joint.into_iter().collect();
    keys.sort_unstable();
    let mi: f64 = keys
        .into_iter()
        .map(|((x, y), c)| {
            let pxy = c as f64 / nf;
            pxy * (pxy * nf * nf / (a[x] as f64 * b[y] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Neighbour order of every query: other points by ascending distance,
/// ties by index.
fn neighbour_ranks(embeddings: &[Vec<f64>], depth: usize) -> Vec<Vec<usize>> {
    (0..embeddings.len())
        .into_par_iter()
        .map(|q| {
            let mut others: Vec<(f64, usize)> = (0..embeddings.len())
                .filter(|&j| j != q)
                .map(|j| (sq_dist(&embeddings[q], &embeddings[j]), j))
                .collect();
            let depth = depth.min(others.len());
            if depth < others.len() {
                others.select_nth_unstable_by(depth, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                others.truncate(depth);
            }
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Recall@K for each requested K (self excluded, ties by index).
pub fn recall_at_ks(embeddings: &[Vec<f64>], labels: &[LabelSet], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if embeddings.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} embeddings for {} label sets",
            embeddings.len(),
            labels.len()
        )));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if ks.iter().any(|&k| k < 1) {
        return Err(Error::Contract("Recall@K needs K >= 1".into()));
    }
    if embeddings.len() < kmax + 1 {
        return Err(Error::Contract(format!(
            "Recall@{kmax} needs at least {} examples, got {}",
            kmax + 1,
            embeddings.len()
        )));
    }
    let ranks = neighbour_ranks(embeddings, kmax);
    // first relevant position for each query, if any within kmax
    let first_hit: Vec<Option<usize>> = ranks
        .iter()
        .enumerate()
        .map(|(q, order)| order.iter().position(|&j| labels[j].shares_any(&labels[q])))
        .collect();
    let n = embeddings.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|p| p < k)).count();
            (k, hits as f64 / n)
        })
        .collect())
}

pub fn recall_at_k(embeddings: &[Vec<f64>], labels: &[LabelSet], k: usize) -> Result<f64> {
    Ok(recall_at_ks(embeddings, labels, &[k])?[&k])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

impl ClassificationMetrics {
    /// From confusion counts; undefined ratios are reported as 0.
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fneg: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        let precision = ratio(tp, fp);
        let sensitivity = ratio(tp, fneg);
        let specificity = ratio(tn, fp);
        let f1 = if precision + sensitivity == 0.0 {
            0.0
        } else {
            2.0 * precision * sensitivity / (precision + sensitivity)
        };
        Self {
            precision,
            sensitivity,
            specificity,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub l2: f64,
    pub learning_rate: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            learning_rate: 0.5,
            max_iter: 5000,
            tolerance: 1e-6,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticModel {
    /// Full-batch gradient descent on the L2-regularized mean log loss over
    /// standardized features.
    pub fn fit(x: &[Vec<f64>], y: &[bool], opts: &LogisticOptions) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Contract(format!("{} rows for {} targets", x.len(), y.len())));
        }
        if y.iter().all(|&t| t) || y.iter().all(|&t| !t) {
            return Err(Error::Contract("logistic probe needs both classes in training data".into()));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|row| row.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
            .collect();

        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..opts.max_iter {
            let mut gw: Vec<f64> = w.iter().map(|wi| opts.l2 * wi).collect();
            let mut gb = 0.0;
            for (row, &t) in z.iter().zip(y) {
                let p = sigmoid(crate::numeric::dot(row, &w) + b);
                let r = (p - f64::from(u8::from(t))) / n;
                gb += r;
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += r * v;
                }
            }
            let gnorm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
            if gnorm < opts.tolerance {
                break;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= opts.learning_rate * g;
            }
            b -= opts.learning_rate * gb;
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            bias: b,
        })
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        let z: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum();
        sigmoid(z + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.probability(x) >= 0.5
    }
}

/// Fits a logistic regression on `(train_x, train_y)` and scores it on the
/// test rows at threshold 0.5. `true` is the positive class.
pub fn logistic_probe(
    train_x: &[Vec<f64>],
    train_y: &[bool],
    test_x: &[Vec<f64>],
    test_y: &[bool],
) -> Result<ClassificationMetrics> {
    if test_x.len() != test_y.len() {
        return Err(Error::Contract(format!("{} test rows for {} targets", test_x.len(), test_y.len())));
    }
    let model = LogisticModel::fit(train_x, train_y, &LogisticOptions::default())?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (row, &t) in test_x.iter().zip(test_y) {
        match (model.predict(row), t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    Ok(ClassificationMetrics::from_counts(tp, fp, tn, fneg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along the first two principal axes.
    pub variance: [f64; 2],
    /// Fraction of total variance carried by each axis.
    pub explained_ratio: [f64; 2],
    /// Set when the input has no variance; coordinates are then all zero.
    pub degenerate: bool,
}

/// Projects centered rows onto their top two principal components. Each
/// axis is oriented so its first non-negligible loading is positive.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Contract(format!("projection needs at least 2 points, got {n}")));
    }
    let d = points[0].len();
    if d < 2 {
        return Err(Error::Contract("projection needs at least 2 dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for c in &centered {
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j] / (n - 1) as f64;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let total: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    if total <= 1e-300 {
        return Ok(Projection {
            coords: vec![[0.0, 0.0]; n],
            variance: [0.0, 0.0],
            explained_ratio: [0.0, 0.0],
            degenerate: true,
        });
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let tol = 1e-12 * v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            if v.iter().find(|x| x.abs() > tol).is_some_and(|&x| x < 0.0) {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let coords = centered
        .iter()
        .map(|c| [crate::numeric::dot(c, &axes[0]), crate::numeric::dot(c, &axes[1])])
        .collect();
    let variance = [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)];
    Ok(Projection {
        coords,
        variance,
        explained_ratio: [variance[0] / total, variance[1] / total],
        degenerate: false,
    })
}

/// Table-style metrics for one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub classification: Option<ClassificationMetrics>,
    /// Number of ground-truth clusters (distinct label sets).
    pub clusters: usize,
    pub examples: usize,
}

pub fn embed_all(model: &EmbeddingModel, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    if ds.feature_dim() != model.config().input_dim && !ds.is_empty() {
        return Err(Error::Dimension(format!(
            "dataset has {} features, model expects {}",
            ds.feature_dim(),
            model.config().input_dim
        )));
    }
    ds.examples()
        .par_iter()
        .map(|e| model.embed(&e.features))
        .collect()
}

/// k-means NMI against the exact-label-set partition.
pub fn clustering_nmi(embeddings: &[Vec<f64>], ds: &Dataset, seed: u64) -> Result<f64> {
    let ids: Vec<String> = ds.examples().iter().map(|e| e.id.clone()).collect();
    let truth = Partition::from_label_sets(ids.clone(), &ds.label_sets())?;
    let clusters = kmeans(embeddings, &ids, truth.k(), seed)?;
    nmi(&clusters.partition, &truth)
}

/// Clustering and retrieval on `eval`; when `probe_train` is given, also a
/// normal-vs-abnormal logistic probe trained on its embeddings, with
/// "abnormal" as the positive class.
pub fn evaluate(
    model: &EmbeddingModel,
    eval: &Dataset,
    probe_train: Option<&Dataset>,
    seed: u64,
) -> Result<MetricsReport> {
    let emb = embed_all(model, eval)?;
    let labels = eval.label_sets();
    let nmi = clustering_nmi(&emb, eval, seed)?;
    let recall_at = recall_at_ks(&emb, &labels, &RECALL_KS)?;
    let classification = match probe_train {
        Some(train) => {
            let train_emb = embed_all(model, train)?;
            let train_y: Vec<bool> = train.examples().iter().map(|e| !e.is_normal()).collect();
            let test_y: Vec<bool> = eval.examples().iter().map(|e| !e.is_normal()).collect();
            Some(logistic_probe(&train_emb, &train_y, &emb, &test_y)?)
        }
        None => None,
    };
    let mut distinct = labels.clone();
    distinct.sort();
    distinct.dedup();
    Ok(MetricsReport {
        nmi,
        recall_at,
        classification,
        clusters: distinct.len(),
        examples: eval.len(),
    })
}
