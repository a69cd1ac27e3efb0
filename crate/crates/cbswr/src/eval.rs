//! Retrieval and clustering-quality evaluation: Recall@K over an embedding
//! index and normalized mutual information against ground-truth classes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::clustering::{assign, AssignmentDistribution};
use crate::data::{center_crop, LabeledImages};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

/// Unit-norm embeddings with aligned ground-truth labels.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
}

impl EmbeddingIndex {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::Usage(format!(
                "{} embedding rows but {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        for row in embeddings.rows() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidDistribution(format!(
                    "index row norm {norm} is not 1 within 1e-6"
                )));
            }
        }
        Ok(EmbeddingIndex { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Retrieval and clustering metrics for one model/testset pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub nmi: f64,
    pub num_queries: usize,
}

/// Embed every test image from its deterministic center-cropped view.
pub fn extract_embeddings(
    model: &ModelBundle,
    test_set: &LabeledImages,
    crop_fraction: f64,
) -> Result<EmbeddingIndex> {
    if test_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let views: Vec<_> = test_set
        .images
        .iter()
        .map(|img| center_crop(img, crop_fraction))
        .collect::<Result<_>>()?;
    let reps = model.encode(&views)?;
    let mut embeddings = Array2::<f64>::zeros((reps.len(), model.config.embed_dim));
    for (i, r) in reps.iter().enumerate() {
        let f = model.embed(r)?;
        embeddings.row_mut(i).assign(f.values());
    }
    EmbeddingIndex::new(embeddings, test_set.labels.clone())
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of queries whose K nearest neighbors (Euclidean, self excluded,
/// distance ties broken by lower row index) contain at least one same-class
/// item.
pub fn recall_at_k(index: &EmbeddingIndex, k: usize) -> Result<f64> {
    let n = index.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if k == 0 || k >= n {
        return Err(Error::Usage(format!(
            "recall needs 0 < K < {n} index rows, got K = {k}"
        )));
    }
    let mut hits = 0usize;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for q in 0..n {
        order.clear();
        for j in 0..n {
            if j != q {
                order.push((squared_distance(index.embeddings.row(q), index.embeddings.row(j)), j));
            }
        }
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        if order[..k].iter().any(|&(_, j)| index.labels[j] == index.labels[q]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

fn partition_entropy(counts: &BTreeMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Normalized mutual information `I(P;T) / sqrt(H(P) H(T))` from the
/// contingency table, in [0, 1] and invariant under relabeling.
///
/// Degenerate cases: two identical single-block partitions score 1; if only
/// one side is a single block the score is 0 by convention.
pub fn nmi(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if predicted.len() != truth.len() {
        return Err(Error::Usage(format!(
            "{} predicted ids but {} ground-truth ids",
            predicted.len(),
            truth.len()
        )));
    }
    let n = predicted.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut p_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut t_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *joint.entry((p, t)).or_insert(0) += 1;
        *p_counts.entry(p).or_insert(0) += 1;
        *t_counts.entry(t).or_insert(0) += 1;
    }
    let h_p = partition_entropy(&p_counts, n);
    let h_t = partition_entropy(&t_counts, n);
    if h_p == 0.0 && h_t == 0.0 {
        // Both are single blocks: identical partitions.
        return Ok(1.0);
    }
    if h_p == 0.0 || h_t == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(p, t), &c) in &joint {
        let p_joint = c as f64 / n;
        let p_p = p_counts[&p] as f64 / n;
        let p_t = t_counts[&t] as f64 / n;
        mi += p_joint * (p_joint / (p_p * p_t)).ln();
    }
    Ok((mi / (h_p * h_t).sqrt()).clamp(0.0, 1.0))
}

/// Predicted cluster ids for test embeddings: argmax of the trained head.
pub fn predict_clusters(model: &ModelBundle, index: &EmbeddingIndex) -> Result<Vec<usize>> {
    let mut dists = Vec::with_capacity(index.len());
    for row in index.embeddings.rows() {
        let logits = model.head.w.dot(&row) + &model.head.b;
        dists.push(AssignmentDistribution::from_logits(logits.as_slice().expect("contiguous")));
    }
    Ok(assign(&dists).iter().map(|a| a.cluster_index).collect())
}

/// Full evaluation: Recall@K for each requested K plus NMI of the clustering
/// head's partition against ground truth.
pub fn evaluate(
    model: &ModelBundle,
    test_set: &LabeledImages,
    crop_fraction: f64,
    ks: &[usize],
) -> Result<EvalReport> {
    let index = extract_embeddings(model, test_set, crop_fraction)?;
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k, recall_at_k(&index, k)?);
    }
    let predicted = predict_clusters(model, &index)?;
    let nmi_value = nmi(&predicted, &index.labels)?;
    Ok(EvalReport { recall_at, nmi: nmi_value, num_queries: index.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Array2<f64> {
        let d = rows[0].len();
        let mut m = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            m.row_mut(i).assign(&Array1::from_vec(r.iter().map(|x| x / norm).collect()));
        }
        m
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> EmbeddingIndex {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0 + 1e-3).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        EmbeddingIndex::new(unit_rows(rows), labels).unwrap()
    }

    #[test]
    fn two_item_recall_edge_cases() {
        let same = EmbeddingIndex::new(unit_rows(vec![vec![1.0, 0.0], vec![0.9, 0.1]]), vec![3, 3]).unwrap();
        assert_eq!(recall_at_k(&same, 1).unwrap(), 1.0);
        let diff = EmbeddingIndex::new(unit_rows(vec![vec![1.0, 0.0], vec![0.9, 0.1]]), vec![3, 4]).unwrap();
        assert_eq!(recall_at_k(&diff, 1).unwrap(), 0.0);
    }

    #[test]
    fn recall_rejects_k_out_of_range() {
        let idx = EmbeddingIndex::new(unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]), vec![0, 1]).unwrap();
        assert!(matches!(recall_at_k(&idx, 2), Err(Error::Usage(_))));
        assert!(matches!(recall_at_k(&idx, 0), Err(Error::Usage(_))));
    }

    /// Brute-force oracle: full pairwise distance matrix, stable sort.
    fn recall_oracle(index: &EmbeddingIndex, k: usize) -> f64 {
        let n = index.len();
        let mut hits = 0;
        for q in 0..n {
            let mut pairs: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| {
                    let d: f64 = index
                        .embeddings
                        .row(q)
                        .iter()
                        .zip(index.embeddings.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, j)
                })
                .collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            if pairs.iter().take(k).any(|&(_, j)| index.labels[j] == index.labels[q]) {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn recall_matches_brute_force_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..10 {
            let idx = random_index(&mut rng, 20 + trial, 4, 3);
            for k in [1, 2, 4, 8] {
                assert_eq!(recall_at_k(&idx, k).unwrap(), recall_oracle(&idx, k));
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let idx = random_index(&mut rng, 40, 5, 4);
        let mut last = 0.0;
        for k in 1..10 {
            let r = recall_at_k(&idx, k).unwrap();
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn nmi_identity_and_relabeling() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        assert_abs_diff_eq!(nmi(&truth, &truth).unwrap(), 1.0, epsilon = 1e-12);
        // Same partition under a different labeling.
        let relabeled = vec![7, 7, 3, 3, 9, 9];
        assert_abs_diff_eq!(nmi(&relabeled, &truth).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nmi_six_point_example_matches_contingency_oracle() {
        // Blocks {1,2,3}{4,5,6} vs {1,2,4}{3,5,6}, as index sets.
        let predicted = vec![0, 0, 0, 1, 1, 1];
        let truth = vec![0, 0, 1, 0, 1, 1];
        // Direct p(i,j) summation: joint counts are 2,1,1,2 out of 6.
        let n = 6.0;
        let joint: [(f64, f64, f64); 4] =
            [(2.0, 0.5, 0.5), (1.0, 0.5, 0.5), (1.0, 0.5, 0.5), (2.0, 0.5, 0.5)];
        let mi: f64 = joint
            .iter()
            .map(|&(c, pp, pt)| (c / n) * f64::ln((c / n) / (pp * pt)))
            .sum();
        let expected = mi / (2f64.ln() * 2f64.ln()).sqrt();
        assert_abs_diff_eq!(nmi(&predicted, &truth).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn nmi_matches_entropy_route_oracle() {
        // Independent route: I = H(P) + H(T) - H(P,T).
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..25 {
            let n = rng.gen_range(5..60);
            let predicted: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let h = |labels: &[usize]| {
                let mut counts = BTreeMap::new();
                for &l in labels {
                    *counts.entry(l).or_insert(0usize) += 1;
                }
                partition_entropy(&counts, n as f64)
            };
            let joint: Vec<usize> = predicted.iter().zip(&truth).map(|(&p, &t)| p * 100 + t).collect();
            let (hp, ht, hj) = (h(&predicted), h(&truth), h(&joint));
            let expected = if hp == 0.0 && ht == 0.0 {
                1.0
            } else if hp == 0.0 || ht == 0.0 {
                0.0
            } else {
                ((hp + ht - hj) / (hp * ht).sqrt()).clamp(0.0, 1.0)
            };
            assert_abs_diff_eq!(nmi(&predicted, &truth).unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn nmi_is_symmetric_and_handles_degenerate_partitions() {
        let a = vec![0, 1, 0, 2, 1];
        let b = vec![1, 1, 0, 0, 1];
        assert_abs_diff_eq!(nmi(&a, &b).unwrap(), nmi(&b, &a).unwrap(), epsilon = 1e-15);
        // Single block vs non-single: 0 by convention.
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 1, 2], &[5, 5, 5]).unwrap(), 0.0);
        // Two single blocks are the same partition.
        assert_eq!(nmi(&[4, 4], &[9, 9]).unwrap(), 1.0);
        assert!(matches!(nmi(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn recall_is_invariant_under_orthogonal_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let idx = random_index(&mut rng, 30, 4, 3);
        // Householder reflection: I - 2vv^T for unit v.
        let v: Vec<f64> = {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            raw.iter().map(|x| x / norm).collect()
        };
        let mut rotated = idx.embeddings.clone();
        for mut row in rotated.rows_mut() {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (x, &vi) in row.iter_mut().zip(&v) {
                *x -= 2.0 * dot * vi;
            }
        }
        let rotated_idx = EmbeddingIndex::new(rotated, idx.labels.clone()).unwrap();
        for k in [1, 2, 4, 8] {
            assert_eq!(recall_at_k(&idx, k).unwrap(), recall_at_k(&rotated_idx, k).unwrap());
        }
    }

    #[test]
    fn evaluate_on_separable_synthetic_model_hits_ceiling() {
        // Hand-build an index where classes are perfectly separated and feed
        // it through the report assembly path.
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.99, 0.01, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.01, 0.99, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.01, 0.99],
        ];
        let idx = EmbeddingIndex::new(unit_rows(rows), vec![0, 0, 1, 1, 2, 2]).unwrap();
        for k in [1, 2, 4] {
            assert_eq!(recall_at_k(&idx, k).unwrap(), 1.0);
        }
    }
}
