//! Reconstruction loss, center-based softmax metric loss and the weighted
//! multi-task objective.
//!
//! The metric loss treats every image in the batch as an anchor: its
//! augmented twin is the positive, and centroid embeddings of clusters it
//! does not belong to are the negatives. Cost per batch is Theta(K * m)
//! inner products, since anchors only ever compare against the K centroids.
//!
//! Value-level functions here evaluate scalars directly; `*_graph` builders
//! assemble the same math on the autodiff tape. The two routes are kept
//! intentionally separate and tested against each other.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::clustering::{CentroidEmbedding, CentroidRepresentation, ClusterAssignment};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::EmbeddingVector;

/// Weights of the multi-task objective plus the softmax temperature.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Metric loss weight.
    pub alpha: f64,
    /// Clustering loss weight.
    pub beta: f64,
    /// Reconstruction loss weight.
    pub gamma: f64,
    /// Softmax temperature; higher values soften the distribution.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.9, beta: 0.3, gamma: 0.01, tau: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("tau", self.tau),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-batch loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_m: f64,
    pub l_rim: f64,
    pub l_rec: f64,
    pub total: f64,
}

/// Weighted sum `alpha * l_m + beta * l_rim + gamma * l_rec`. Rejects
/// non-finite components, naming the offender.
pub fn combined_loss(l_m: f64, l_rim: f64, l_rec: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_m", l_m), ("l_rim", l_rim), ("l_rec", l_rec)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: match name {
                    "l_m" => "l_m",
                    "l_rim" => "l_rim",
                    _ => "l_rec",
                },
                value: v,
            });
        }
    }
    Ok(LossBreakdown {
        l_m,
        l_rim,
        l_rec,
        total: weights.alpha * l_m + weights.beta * l_rim + weights.gamma * l_rec,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature tau must be positive, got {tau}")));
    }
    Ok(())
}

/// Positive attraction term: `exp(f . f_hat / tau) / sum_{k != q} exp(f . c_k / tau)`.
///
/// Needs at least two active centroids, otherwise the denominator is an
/// empty sum.
pub fn positive_term(
    f: &EmbeddingVector,
    f_hat: &EmbeddingVector,
    centroids: &[CentroidEmbedding],
    q: usize,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if centroids.len() < 2 {
        return Err(Error::DegenerateDenominator);
    }
    if q >= centroids.len() {
        return Err(Error::Usage(format!("q = {q} out of range for {} centroids", centroids.len())));
    }
    let numerator = (f.dot(f_hat) / tau).exp();
    let denominator: f64 = centroids
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != q)
        .map(|(_, c)| (f.values().dot(c.values()) / tau).exp())
        .sum();
    Ok(numerator / denominator)
}

/// Negative repulsion term for cluster `j != q`:
/// `1 - exp(f . c_j / tau) / sum_k exp(f . c_k / tau)`, strictly in (0, 1).
pub fn negative_term(
    f: &EmbeddingVector,
    centroids: &[CentroidEmbedding],
    j: usize,
    q: usize,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if j == q {
        return Err(Error::Usage("negative_term requires j != q".into()));
    }
    if j >= centroids.len() || q >= centroids.len() {
        return Err(Error::Usage(format!(
            "indices j = {j}, q = {q} out of range for {} centroids",
            centroids.len()
        )));
    }
    let scores: Vec<f64> = centroids
        .iter()
        .map(|c| f.values().dot(c.values()) / tau)
        .collect();
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|&s| (s - mx).exp()).sum();
    Ok(1.0 - (scores[j] - mx).exp() / z)
}

/// Batch metric loss with per-anchor diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricLossValue {
    pub value: f64,
    /// Anchors excluded because fewer than two clusters were active.
    pub skipped_samples: usize,
}

/// Negative log of the per-anchor objective, summed over anchors:
/// `-sum_i ln l(I_i, Ihat_i) - sum_i sum_{j != q_i} ln l(I_i, c_j)`.
///
/// `q[i]` indexes the anchor's own centroid within `centroids`. Anchors are
/// skipped (and counted) when fewer than two centroids are active.
pub fn metric_loss(
    f: &[EmbeddingVector],
    f_hat: &[EmbeddingVector],
    centroids: &[CentroidEmbedding],
    q: &[usize],
    tau: f64,
) -> Result<MetricLossValue> {
    check_tau(tau)?;
    if f.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if f.len() != f_hat.len() || f.len() != q.len() {
        return Err(Error::Usage(format!(
            "anchor arrays disagree: {} embeddings, {} twins, {} assignments",
            f.len(),
            f_hat.len(),
            q.len()
        )));
    }
    if centroids.len() < 2 {
        return Ok(MetricLossValue { value: 0.0, skipped_samples: f.len() });
    }
    let n_active = centroids.len();
    let mut total = 0.0;
    let mut scores = vec![0.0; n_active];
    for i in 0..f.len() {
        if q[i] >= n_active {
            return Err(Error::Usage(format!("q[{i}] = {} out of range", q[i])));
        }
        for (k, c) in centroids.iter().enumerate() {
            scores[k] = f[i].values().dot(c.values()) / tau;
        }
        let pos_score = f[i].dot(&f_hat[i]) / tau;

        // -ln positive term, computed in log space.
        let mut mx = f64::NEG_INFINITY;
        for (k, &s) in scores.iter().enumerate() {
            if k != q[i] && s > mx {
                mx = s;
            }
        }
        let excl_sum: f64 = scores
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != q[i])
            .map(|(_, &s)| (s - mx).exp())
            .sum();
        total += mx + excl_sum.ln() - pos_score;

        // -ln negative terms via a log-softmax over all centroids; ln1p and
        // expm1 keep the dominant entry away from exactly zero.
        let (arg, full_mx) = scores
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(ai, am), (k, &s)| {
                if s > am { (k, s) } else { (ai, am) }
            });
        let rest: f64 = scores
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != arg)
            .map(|(_, &s)| (s - full_mx).exp())
            .sum();
        let log_z = rest.ln_1p();
        for (k, &s) in scores.iter().enumerate() {
            if k == q[i] {
                continue;
            }
            let log_softmax = s - full_mx - log_z;
            total -= (-log_softmax.exp_m1()).ln();
        }
    }
    Ok(MetricLossValue { value: total, skipped_samples: 0 })
}

/// Mean (over the batch) of the squared pixel error between each image and
/// the decode of its cluster's centroid. Each distinct centroid is decoded
/// once.
pub fn reconstruction_loss<D>(
    images: &[ImageSample],
    assignments: &[ClusterAssignment],
    centroids: &[CentroidRepresentation],
    mut decode: D,
) -> Result<f64>
where
    D: FnMut(&CentroidRepresentation) -> Result<Array3<f64>>,
{
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if images.len() != assignments.len() {
        return Err(Error::Usage(format!(
            "{} images but {} assignments",
            images.len(),
            assignments.len()
        )));
    }
    let mut decoded: Vec<Option<Array3<f64>>> = Vec::with_capacity(centroids.len());
    for c in centroids {
        decoded.push(Some(decode(c)?));
    }
    let position_of = |cluster: usize| centroids.iter().position(|c| c.cluster_index == cluster);
    let mut total = 0.0;
    for (img, a) in images.iter().zip(assignments) {
        let pos = position_of(a.cluster_index)
            .ok_or(Error::MissingCentroid { cluster: a.cluster_index })?;
        let rec = decoded[pos].as_ref().expect("decoded");
        if rec.dim() != img.pixels.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", img.pixels.dim()),
                actual: format!("{:?}", rec.dim()),
            });
        }
        total += img
            .pixels
            .iter()
            .zip(rec.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / images.len() as f64)
}

/// Metric loss on the tape. `positions[i]` is anchor i's centroid within the
/// active list; `twin[i]` is the index of its augmented partner in the batch.
pub struct MetricLossGraph {
    pub loss: NodeId,
    pub skipped_samples: usize,
}

pub fn metric_loss_graph(
    tape: &mut Tape,
    embeddings: NodeId,
    centroid_embeddings: NodeId,
    positions: &[usize],
    twin: &[usize],
    tau: f64,
) -> MetricLossGraph {
    let m = tape.value(embeddings).shape()[0];
    let n_active = tape.value(centroid_embeddings).shape()[0];
    assert_eq!(positions.len(), m);
    assert_eq!(twin.len(), m);
    if n_active < 2 {
        return MetricLossGraph { loss: tape.scalar_leaf(0.0), skipped_samples: m };
    }
    let mut mask = Array2::<f64>::ones((m, n_active));
    for (i, &p) in positions.iter().enumerate() {
        mask[[i, p]] = 0.0;
    }

    let ct = tape.transpose(centroid_embeddings);
    let raw_scores = tape.matmul(embeddings, ct);
    let scores = tape.scalar_mul(raw_scores, 1.0 / tau);

    let twins = tape.gather_rows(embeddings, twin.to_vec());
    let prod = tape.mul(embeddings, twins);
    let raw_pos = tape.sum_axis1(prod);
    let pos = tape.scalar_mul(raw_pos, 1.0 / tau);

    let lse_excl = tape.masked_logsumexp_rows(scores, mask.clone());
    let pos_diff = tape.sub(lse_excl, pos);
    let pos_part = tape.sum_all(pos_diff);

    let log_softmax = tape.log_softmax_rows(scores);
    let neg_terms = tape.masked_neg_log1m_exp(log_softmax, mask);
    let neg_part = tape.sum_all(neg_terms);

    let loss = tape.add(pos_part, neg_part);
    MetricLossGraph { loss, skipped_samples: 0 }
}

/// Reconstruction loss on the tape: gather each sample's decoded centroid,
/// subtract its image, square, sum and normalize by the batch size.
pub fn reconstruction_loss_graph(
    tape: &mut Tape,
    decoded: NodeId,
    images_flat: NodeId,
    positions: &[usize],
) -> NodeId {
    let n_active = tape.value(decoded).shape()[0];
    let pixels: usize = tape.value(decoded).shape()[1..].iter().product();
    let m = tape.value(images_flat).shape()[0];
    assert_eq!(positions.len(), m);
    assert!(positions.iter().all(|&p| p < n_active));
    let decoded_flat = tape.reshape(decoded, &[n_active, pixels]);
    let per_sample = tape.gather_rows(decoded_flat, positions.to_vec());
    let diff = tape.sub(per_sample, images_flat);
    let sq = tape.square(diff);
    let total = tape.sum_all(sq);
    tape.scalar_mul(total, 1.0 / m as f64)
}
