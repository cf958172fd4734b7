//! Episodic N-way K-shot evaluation: task sampling, label-free
//! similarity classifiers, centroid ablation variants, and protocol-level
//! aggregation with 95% confidence intervals.
//!
//! Label firewall: `classify_1nn` and `classify_attn` take only feature
//! matrices. Labels live in private [`Episode`] fields read solely by the
//! scorer; the centroid ablation is the one place label access is granted,
//! and only to average keys, never to classify.
//!
//! # Example
//!
//! ```
//! use episodica::eval::{run_protocol, Classifier, FeaturePool, TaskSpec};
//! use episodica::tensor::Tensor;
//!
//! // two tightly clustered classes: near (1, 0) and near (0, 1)
//! let rows: Vec<Vec<f32>> = (0..12)
//!     .map(|i| {
//!         let t = 0.01 * (i % 6) as f32;
//!         if i < 6 { vec![1.0, t] } else { vec![t, 1.0] }
//!     })
//!     .collect();
//! let labels: Vec<usize> = (0..12).map(|i| i / 6).collect();
//! let pool = FeaturePool::new(Tensor::from_rows(&rows)?, labels)?;
//!
//! let spec = TaskSpec { n_way: 2, k_shot: 1, n_query: 2, n_tasks: 50 };
//! let report = run_protocol(&pool, &spec, Classifier::Attn, 0)?;
//! assert_eq!(report.mean, 1.0); // perfectly separable
//! # Ok::<(), episodica::Error>(())
//! ```

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::StreamKey;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of one evaluation protocol: N-way K-shot with Q queries per
/// class, repeated over `n_tasks` independently sampled episodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TaskSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_tasks: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec { n_way: 5, k_shot: 1, n_query: 15, n_tasks: 10_000 }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("n_query", self.n_query),
            ("n_tasks", self.n_tasks),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("task spec: {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Which similarity classifier the protocol runs, including the centroid
/// ablation variants that average each class's keys first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classifier {
    OneNn,
    Attn,
    OneNnCentroid,
    AttnCentroid,
}

impl Classifier {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classifier::OneNn => "1nn",
            Classifier::Attn => "attn",
            Classifier::OneNnCentroid => "1nn-centroid",
            Classifier::AttnCentroid => "attn-centroid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1nn" => Ok(Classifier::OneNn),
            "attn" => Ok(Classifier::Attn),
            "1nn-centroid" => Ok(Classifier::OneNnCentroid),
            "attn-centroid" => Ok(Classifier::AttnCentroid),
            other => Err(Error::Config(format!(
                "unknown classifier {other:?} (expected 1nn, attn, 1nn-centroid, attn-centroid)"
            ))),
        }
    }

    pub fn uses_centroids(&self) -> bool {
        matches!(self, Classifier::OneNnCentroid | Classifier::AttnCentroid)
    }
}

/// A labeled embedding table the protocol samples episodes from.
/// Features are immutable and shared read-only across worker threads.
#[derive(Clone, Debug)]
pub struct FeaturePool {
    features: Tensor,
    labels: Vec<usize>,
    /// class id -> row indices, class ids sorted ascending
    classes: Vec<(usize, Vec<usize>)>,
}

impl FeaturePool {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Shape(format!(
                "feature pool expects an n x d matrix, got {:?}",
                features.shape()
            )));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "feature pool: {} rows vs {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &c) in labels.iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        Ok(FeaturePool { features, labels, classes: by_class.into_iter().collect() })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Replace features with their row-wise L2 normalization (optional
    /// preprocessing; raw encoder output is the default).
    pub fn l2_normalized(&self) -> Result<FeaturePool> {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.features.len());
        for i in 0..self.features.shape()[0] {
            let row = self.features.row(i);
            let norm: f64 = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(format!("zero-norm feature row {i}")));
            }
            data.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
        }
        Ok(FeaturePool {
            features: Tensor::new(vec![self.features.shape()[0], d], data)?,
            labels: self.labels.clone(),
            classes: self.classes.clone(),
        })
    }
}

/// One N-way K-shot task. Labels are private: classifiers only ever see
/// the two feature matrices, and correctness is judged by the scorer via
/// the label of the chosen key.
#[derive(Clone, Debug)]
pub struct Episode {
    pub key_features: Tensor,
    pub query_features: Tensor,
    key_labels: Vec<usize>,
    query_labels: Vec<usize>,
}

impl Episode {
    /// Build an episode directly from features and labels. Intended for
    /// tests and synthetic constructions; `sample_task` is the protocol
    /// path.
    pub fn from_parts(
        key_features: Tensor,
        query_features: Tensor,
        key_labels: Vec<usize>,
        query_labels: Vec<usize>,
    ) -> Result<Self> {
        if key_features.rank() != 2
            || query_features.rank() != 2
            || key_features.shape()[1] != query_features.shape()[1]
        {
            return Err(Error::Shape(format!(
                "episode: keys {:?} vs queries {:?}",
                key_features.shape(),
                query_features.shape()
            )));
        }
        if key_features.shape()[0] != key_labels.len()
            || query_features.shape()[0] != query_labels.len()
        {
            return Err(Error::Shape("episode: label count does not match feature rows".into()));
        }
        Ok(Episode { key_features, query_features, key_labels, query_labels })
    }

    pub fn n_keys(&self) -> usize {
        self.key_labels.len()
    }

    pub fn n_queries(&self) -> usize {
        self.query_labels.len()
    }

    /// Centroid-ablation view of this episode: each class's K keys are
    /// averaged into a single representative key.
    pub fn to_centroids(&self) -> Result<Episode> {
        let (centroids, class_order) = centroid_reduce(&self.key_features, &self.key_labels)?;
        Episode::from_parts(
            centroids,
            self.query_features.clone(),
            class_order,
            self.query_labels.clone(),
        )
    }
}

/// Accuracy of one prediction vector: the fraction of queries whose
/// chosen key carries the query's own label. With K > 1, any same-class
/// key counts as correct.
pub fn score_task(episode: &Episode, predictions: &[usize]) -> Result<f64> {
    if predictions.len() != episode.query_labels.len() {
        return Err(Error::Shape(format!(
            "score_task: {} predictions for {} queries",
            predictions.len(),
            episode.query_labels.len()
        )));
    }
    let mut correct = 0usize;
    for (i, &p) in predictions.iter().enumerate() {
        let key_label = *episode.key_labels.get(p).ok_or_else(|| {
            Error::Shape(format!("score_task: prediction {p} out of range for {} keys", episode.key_labels.len()))
        })?;
        if key_label == episode.query_labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / predictions.len() as f64)
}

/// Draw one episode: N classes uniformly without replacement, then per
/// class K keys and Q queries uniformly without replacement (disjoint).
pub fn sample_task(pool: &FeaturePool, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Episode> {
    spec.validate()?;
    if pool.n_classes() < spec.n_way {
        return Err(Error::Data(format!(
            "pool has {} classes, task needs {}",
            pool.n_classes(),
            spec.n_way
        )));
    }
    let need = spec.k_shot + spec.n_query;
    let class_picks = rand::seq::index::sample(rng, pool.n_classes(), spec.n_way);
    let d = pool.dim();
    let mut key_rows = Vec::with_capacity(spec.n_way * spec.k_shot * d);
    let mut query_rows = Vec::with_capacity(spec.n_way * spec.n_query * d);
    let mut key_labels = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query_labels = Vec::with_capacity(spec.n_way * spec.n_query);
    for ci in class_picks.iter() {
        let (class_id, items) = &pool.classes[ci];
        if items.len() < need {
            return Err(Error::Data(format!(
                "class {class_id} has {} examples, task needs {need}",
                items.len()
            )));
        }
        let picks = rand::seq::index::sample(rng, items.len(), need);
        for (slot, pi) in picks.iter().enumerate() {
            let row = pool.features.row(items[pi]);
            if slot < spec.k_shot {
                key_rows.extend_from_slice(row);
                key_labels.push(*class_id);
            } else {
                query_rows.extend_from_slice(row);
                query_labels.push(*class_id);
            }
        }
    }
    Episode::from_parts(
        Tensor::new(vec![key_labels.len(), d], key_rows)?,
        Tensor::new(vec![query_labels.len(), d], query_rows)?,
        key_labels,
        query_labels,
    )
}

fn check_classifier_shapes(queries: &Tensor, keys: &Tensor) -> Result<()> {
    if queries.rank() != 2 || keys.rank() != 2 || queries.shape()[1] != keys.shape()[1] {
        return Err(Error::Shape(format!(
            "classifier: queries {:?} vs keys {:?}",
            queries.shape(),
            keys.shape()
        )));
    }
    if keys.shape()[0] == 0 {
        return Err(Error::Data("classifier: empty key set".into()));
    }
    Ok(())
}

/// Nearest-neighbor classifier: for each query, the index of the key
/// minimizing squared Euclidean distance. Ties break to the lowest index.
pub fn classify_1nn(query_features: &Tensor, key_features: &Tensor) -> Result<Vec<usize>> {
    check_classifier_shapes(query_features, key_features)?;
    let d = key_features.shape()[1];
    let nk = key_features.shape()[0];
    let mut out = Vec::with_capacity(query_features.shape()[0]);
    for qi in 0..query_features.shape()[0] {
        let q = query_features.row(qi);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for ki in 0..nk {
            let k = key_features.row(ki);
            let mut dist = 0.0f64;
            for j in 0..d {
                let diff = q[j] as f64 - k[j] as f64;
                dist += diff * diff;
            }
            if dist < best_dist {
                best = ki;
                best_dist = dist;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Softmax attention weights of one query over the key set, from cosine
/// similarities.
pub fn attn_weights(query: &[f32], key_features: &Tensor) -> Result<Vec<f64>> {
    let nk = key_features.shape()[0];
    let cos: Vec<f64> =
        (0..nk).map(|ki| cosine(query, key_features.row(ki))).collect::<Result<_>>()?;
    let max = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = cos.iter().map(|&c| (c - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / z).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Numeric("cosine classifier: zero-norm feature row".into()));
    }
    Ok(dot / (na * nb))
}

/// Attention classifier: softmax over cosine similarities, prediction is
/// the argmax weight. Softmax is strictly monotone, so the argmax is
/// taken over the cosines directly; ties break to the lowest index.
pub fn classify_attn(query_features: &Tensor, key_features: &Tensor) -> Result<Vec<usize>> {
    check_classifier_shapes(query_features, key_features)?;
    let nk = key_features.shape()[0];
    let mut out = Vec::with_capacity(query_features.shape()[0]);
    for qi in 0..query_features.shape()[0] {
        let q = query_features.row(qi);
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for ki in 0..nk {
            let c = cosine(q, key_features.row(ki))?;
            if c > best_cos {
                best = ki;
                best_cos = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Per-class arithmetic mean of the key features. Returns the centroid
/// matrix and the class order of its rows. Label access here is the
/// explicit ablation-mode grant; classification still never sees labels.
pub fn centroid_reduce(
    key_features: &Tensor,
    key_labels: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    if key_features.rank() != 2 || key_features.shape()[0] != key_labels.len() {
        return Err(Error::Shape(format!(
            "centroid_reduce: {:?} features vs {} labels",
            key_features.shape(),
            key_labels.len()
        )));
    }
    if key_labels.is_empty() {
        return Err(Error::Data("centroid_reduce: no keys".into()));
    }
    let d = key_features.shape()[1];
    let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
    for (i, &c) in key_labels.iter().enumerate() {
        let entry = sums.entry(c).or_insert_with(|| (vec![0.0; d], 0));
        for (s, &x) in entry.0.iter_mut().zip(key_features.row(i)) {
            *s += x as f64;
        }
        entry.1 += 1;
    }
    let mut class_order = Vec::with_capacity(sums.len());
    let mut data = Vec::with_capacity(sums.len() * d);
    for (c, (sum, count)) in sums {
        class_order.push(c);
        data.extend(sum.iter().map(|&s| (s / count as f64) as f32));
    }
    let n = class_order.len();
    Ok((Tensor::new(vec![n, d], data)?, class_order))
}

/// Aggregated result of one protocol run. `ci95_halfwidth` is
/// 1.96 * stddev(per_task) / sqrt(n_tasks) (normal approximation over
/// tasks, sample standard deviation).
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub spec: TaskSpec,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_task_accuracy: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn from_accuracies(acc: Vec<f64>, spec: TaskSpec, seed: u64) -> Self {
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let ci95_halfwidth = if acc.len() < 2 {
            0.0
        } else {
            // corrected two-pass variance: the second term cancels the
            // rounding of `mean`, so constant accuracies give exactly 0
            let sum_sq = acc.iter().map(|&a| (a - mean).powi(2)).sum::<f64>();
            let sum_dev = acc.iter().map(|&a| a - mean).sum::<f64>();
            let var = ((sum_sq - sum_dev * sum_dev / n) / (n - 1.0)).max(0.0);
            1.96 * var.sqrt() / n.sqrt()
        };
        EvalReport { mean, ci95_halfwidth, spec, seed, per_task_accuracy: Some(acc) }
    }

    /// One-line human summary, e.g. `0.4213 +/- 0.0031 (10000 tasks)`.
    pub fn summary(&self) -> String {
        format!(
            "{:.4} +/- {:.4} ({} tasks)",
            self.mean, self.ci95_halfwidth, self.spec.n_tasks
        )
    }
}

fn task_rng(seed: u64, task_index: u64) -> ChaCha8Rng {
    // counter-based stream per task, so results are independent of the
    // worker schedule
    StreamKey { seed, epoch: task_index, batch: u64::MAX, image: 0, transform: 0 }.rng()
}

/// Run the full protocol: `spec.n_tasks` sampled episodes, classified and
/// scored independently (fanned out across threads), aggregated in task
/// order. Deterministic given (pool, spec, classifier, seed).
pub fn run_protocol(
    pool: &FeaturePool,
    spec: &TaskSpec,
    classifier: Classifier,
    seed: u64,
) -> Result<EvalReport> {
    spec.validate()?;
    let acc: Vec<f64> = (0..spec.n_tasks as u64)
        .into_par_iter()
        .map(|t| {
            let run = || -> Result<f64> {
                let mut rng = task_rng(seed, t);
                let mut ep = sample_task(pool, spec, &mut rng)?;
                if classifier.uses_centroids() {
                    ep = ep.to_centroids()?;
                }
                let preds = match classifier {
                    Classifier::OneNn | Classifier::OneNnCentroid => {
                        classify_1nn(&ep.query_features, &ep.key_features)?
                    }
                    Classifier::Attn | Classifier::AttnCentroid => {
                        classify_attn(&ep.query_features, &ep.key_features)?
                    }
                };
                score_task(&ep, &preds)
            };
            run().map_err(|e| Error::Data(format!("task {t}: {e}")))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_accuracies(acc, *spec, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn gaussian_pool(n_classes: usize, per_class: usize, d: usize, seed: u64) -> FeaturePool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_classes * per_class;
        let data: Vec<f32> = (0..n * d)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
        FeaturePool::new(Tensor::from_shape_data(vec![n, d], data), labels).unwrap()
    }

    #[test]
    fn sample_counts_match_spec() {
        let pool = gaussian_pool(8, 20, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = TaskSpec { n_way: 5, k_shot: 1, n_query: 15, n_tasks: 1 };
        let ep = sample_task(&pool, &spec, &mut rng).unwrap();
        assert_eq!(ep.n_keys(), 5);
        assert_eq!(ep.n_queries(), 75);
        let spec5 = TaskSpec { k_shot: 5, ..spec };
        let ep5 = sample_task(&pool, &spec5, &mut rng).unwrap();
        assert_eq!(ep5.n_keys(), 25);
        assert_eq!(ep5.n_queries(), 75);
    }

    #[test]
    fn exhausting_pool_keeps_keys_and_queries_disjoint() {
        let pool = gaussian_pool(5, 6, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = TaskSpec { n_way: 5, k_shot: 2, n_query: 4, n_tasks: 1 };
        let ep = sample_task(&pool, &spec, &mut rng).unwrap();
        // K+Q == per_class, so keys and queries must jointly exhaust every
        // class: every pool row appears exactly once across the episode
        let mut seen: Vec<Vec<f32>> = Vec::new();
        for i in 0..ep.n_keys() {
            seen.push(ep.key_features.row(i).to_vec());
        }
        for i in 0..ep.n_queries() {
            seen.push(ep.query_features.row(i).to_vec());
        }
        assert_eq!(seen.len(), 30);
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 30, "episode drew some example twice");
    }

    #[test]
    fn deficient_class_is_named() {
        let features = Tensor::ones(&[3, 2]);
        let pool = FeaturePool::new(features, vec![0, 0, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = TaskSpec { n_way: 2, k_shot: 1, n_query: 1, n_tasks: 1 };
        let err = sample_task(&pool, &spec, &mut rng).unwrap_err().to_string();
        assert!(err.contains("class 7"), "{err}");
    }

    #[test]
    fn onenn_hand_cases() {
        let keys = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![3.0, 3.0]]).unwrap();
        let queries = Tensor::from_rows(&[vec![3.0, 3.0], vec![0.9, 0.1]]).unwrap();
        assert_eq!(classify_1nn(&queries, &keys).unwrap(), vec![2, 0]);
    }

    #[test]
    fn onenn_matches_bruteforce_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pool = gaussian_pool(1, 10, 6, rng.gen());
            let keys = pool.features().clone();
            let queries = gaussian_pool(1, 7, 6, rng.gen()).features().clone();
            let got = classify_1nn(&queries, &keys).unwrap();
            for (qi, &pred) in got.iter().enumerate() {
                let dist = |ki: usize| -> f64 {
                    queries
                        .row(qi)
                        .iter()
                        .zip(keys.row(ki))
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum()
                };
                for ki in 0..10 {
                    assert!(dist(pred) <= dist(ki));
                    if dist(ki) == dist(pred) {
                        assert!(pred <= ki);
                    }
                }
            }
        }
    }

    #[test]
    fn attn_hand_cases_and_tie_break() {
        let keys = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        // parallel to key 1, orthogonal to key 0
        let q = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        assert_eq!(classify_attn(&q, &keys).unwrap(), vec![1]);
        // equal cosine to both keys: weights 0.5/0.5, lowest index wins
        let tie = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = attn_weights(tie.row(0), &keys).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        assert_eq!(classify_attn(&tie, &keys).unwrap(), vec![0]);
    }

    #[test]
    fn attn_rejects_zero_norm_rows() {
        let keys = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(classify_attn(&q, &keys).is_err());
    }

    #[test]
    fn unit_norm_equivalence() {
        // ||q-k||^2 = 2 - 2 cos(q,k) on unit vectors, so both classifiers
        // rank keys identically
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let keys = gaussian_pool(1, 5, 8, rng.gen()).l2_normalized().unwrap();
            let queries = gaussian_pool(1, 15, 8, rng.gen()).l2_normalized().unwrap();
            assert_eq!(
                classify_1nn(queries.features(), keys.features()).unwrap(),
                classify_attn(queries.features(), keys.features()).unwrap()
            );
        }
    }

    #[test]
    fn onenn_invariant_to_translation_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let keys = gaussian_pool(1, 6, 2, rng.gen()).features().clone();
        let queries = gaussian_pool(1, 9, 2, rng.gen()).features().clone();
        let base = classify_1nn(&queries, &keys).unwrap();
        let theta: f64 = 0.83;
        let (s, c) = theta.sin_cos();
        let xform = |t: &Tensor| -> Tensor {
            let rows: Vec<Vec<f32>> = (0..t.shape()[0])
                .map(|i| {
                    let r = t.row(i);
                    vec![
                        (c * r[0] as f64 - s * r[1] as f64 + 5.0) as f32,
                        (s * r[0] as f64 + c * r[1] as f64 - 2.0) as f32,
                    ]
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        assert_eq!(classify_1nn(&xform(&queries), &xform(&keys)).unwrap(), base);
    }

    #[test]
    fn attn_invariant_to_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let keys = gaussian_pool(1, 6, 4, rng.gen()).features().clone();
        let queries = gaussian_pool(1, 9, 4, rng.gen()).features().clone();
        let base = classify_attn(&queries, &keys).unwrap();
        let scaled_k = keys.map(|x| 37.5 * x);
        let scaled_q = queries.map(|x| 0.004 * x);
        assert_eq!(classify_attn(&scaled_q, &scaled_k).unwrap(), base);
    }

    #[test]
    fn centroid_reduce_hand_cases() {
        let keys = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, 1.0]]).unwrap();
        let (cent, order) = centroid_reduce(&keys, &[3, 3, 9]).unwrap();
        assert_eq!(order, vec![3, 9]);
        assert_eq!(cent.row(0), &[1.0, 1.0]);
        assert_eq!(cent.row(1), &[5.0, 1.0]);
        // K = 1 is the identity
        let (cent1, order1) = centroid_reduce(&keys, &[0, 1, 2]).unwrap();
        assert_eq!(order1, vec![0, 1, 2]);
        assert_eq!(cent1, keys);
    }

    #[test]
    fn score_task_contract() {
        let ep = Episode::from_parts(
            Tensor::ones(&[2, 2]),
            Tensor::ones(&[4, 2]),
            vec![0, 1],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        assert_eq!(score_task(&ep, &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(score_task(&ep, &[1, 0, 1, 0]).unwrap(), 0.5);
        assert!(score_task(&ep, &[0, 0, 1, 9]).is_err());
        assert!(score_task(&ep, &[0]).is_err());
    }

    #[test]
    fn multi_shot_any_same_class_key_is_correct() {
        let ep = Episode::from_parts(
            Tensor::ones(&[4, 2]),
            Tensor::ones(&[2, 2]),
            vec![0, 0, 1, 1],
            vec![0, 1],
        )
        .unwrap();
        for pred0 in [0, 1] {
            for pred1 in [2, 3] {
                assert_eq!(score_task(&ep, &[pred0, pred1]).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn random_predictions_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n_way = 5;
        let ep = {
            let pool = gaussian_pool(n_way, 20, 3, 23);
            let spec = TaskSpec { n_way, k_shot: 1, n_query: 15, n_tasks: 1 };
            sample_task(&pool, &spec, &mut rng).unwrap()
        };
        let trials = 2000usize;
        let mut total = 0.0;
        for _ in 0..trials {
            let preds: Vec<usize> =
                (0..ep.n_queries()).map(|_| rng.gen_range(0..ep.n_keys())).collect();
            total += score_task(&ep, &preds).unwrap();
        }
        let mean = total / trials as f64;
        // binomial std error over trials * queries draws
        let se = (0.2 * 0.8 / (trials * ep.n_queries()) as f64).sqrt();
        assert!((mean - 0.2).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_accuracies(vec![0.5; 40], TaskSpec::default(), 0);
        assert_eq!(r.mean, 0.5);
        assert_eq!(r.ci95_halfwidth, 0.0);
        let r2 = EvalReport::from_accuracies(vec![0.0, 1.0], TaskSpec::default(), 0);
        assert!((r2.mean - 0.5).abs() < 1e-12);
        // sample std of {0,1} is sqrt(0.5); ci = 1.96*sqrt(0.5)/sqrt(2)
        assert!((r2.ci95_halfwidth - 1.96 * 0.5f64.sqrt() / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn run_protocol_is_deterministic() {
        let pool = gaussian_pool(8, 20, 4, 29);
        let spec = TaskSpec { n_way: 5, k_shot: 1, n_query: 5, n_tasks: 50 };
        let a = run_protocol(&pool, &spec, Classifier::Attn, 42).unwrap();
        let b = run_protocol(&pool, &spec, Classifier::Attn, 42).unwrap();
        assert_eq!(a.per_task_accuracy, b.per_task_accuracy);
        assert_eq!(a.mean, b.mean);
        let c = run_protocol(&pool, &spec, Classifier::Attn, 43).unwrap();
        assert_ne!(a.per_task_accuracy, c.per_task_accuracy);
    }

    #[test]
    fn separable_clusters_are_solved() {
        // classes at well-separated centers with tiny noise: every
        // classifier should be perfect
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n_classes = 6;
        let per_class = 20;
        let d = 4;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..n_classes {
            for _ in 0..per_class {
                for j in 0..d {
                    let center = if j == c % d { 10.0 * (1 + c / d) as f32 } else { 1.0 };
                    let noise: f32 =
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    data.push(center + 0.01 * noise);
                }
                labels.push(c);
            }
        }
        let pool =
            FeaturePool::new(Tensor::from_shape_data(vec![n_classes * per_class, d], data), labels)
                .unwrap();
        let spec = TaskSpec { n_way: 5, k_shot: 5, n_query: 5, n_tasks: 20 };
        for clf in
            [Classifier::OneNn, Classifier::Attn, Classifier::OneNnCentroid, Classifier::AttnCentroid]
        {
            let r = run_protocol(&pool, &spec, clf, 7).unwrap();
            assert_eq!(r.mean, 1.0, "{clf:?}");
        }
    }

    #[test]
    fn classifier_signatures_take_no_labels() {
        // static audit of the label firewall: the classifier entry points
        // accept feature matrices only
        let src = include_str!("eval.rs");
        for name in ["pub fn classify_1nn(", "pub fn classify_attn("] {
            let start = src.find(name).expect("classifier fn present");
            let sig = &src[start..start + src[start..].find(')').unwrap()];
            assert!(!sig.to_lowercase().contains("label"), "label leaked into {sig}");
        }
    }
}
