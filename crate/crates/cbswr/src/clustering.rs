//! Discriminative clustering: the information-maximization objective over
//! batch softmax outputs, hard assignments, and centroid representations.
//!
//! The loss is `R(theta) - lambda * (H(Y) - H(Y|X))`: raising the marginal
//! entropy balances cluster usage, lowering the conditional entropy sharpens
//! per-sample assignments, and the l2 regularizer keeps the head small.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{ClusterHeadParams, RepresentationVector};

/// Softmax output over the K clusters for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentDistribution {
    probs: Vec<f64>,
}

impl AssignmentDistribution {
    /// Validates non-negativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidDistribution(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(AssignmentDistribution { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        AssignmentDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }
}

/// Hard cluster index chosen by argmax, ties broken toward the lowest index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub cluster_index: usize,
}

/// Mean representation of a cluster's members within one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidRepresentation {
    pub values: Array1<f64>,
    pub member_count: usize,
    pub cluster_index: usize,
}

impl CentroidRepresentation {
    pub fn representation(&self) -> RepresentationVector {
        RepresentationVector { values: self.values.clone() }
    }
}

/// Unit-norm embedding of a centroid representation.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidEmbedding {
    values: Array1<f64>,
}

impl CentroidEmbedding {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!(
                "centroid embedding norm {norm} is not 1 within 1e-6"
            )));
        }
        Ok(CentroidEmbedding { values })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }
}

/// Clustering objective parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RimConfig {
    /// Number of clusters K; bounded above by the batch size at use sites.
    pub clusters: usize,
    /// Weight on the entropy difference.
    pub lambda: f64,
    /// Coefficient of the l2 regularizer on the head weights (not biases).
    pub weight_decay: f64,
}

impl Default for RimConfig {
    fn default() -> Self {
        RimConfig { clusters: 32, lambda: 1.0, weight_decay: 1e-3 }
    }
}

impl RimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::Config("rim.clusters must be at least 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("rim.lambda must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("rim.weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Shannon entropy with the 0 ln 0 = 0 convention.
pub(crate) fn entropy(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
}

fn check_batch(dists: &[AssignmentDistribution]) -> Result<usize> {
    let first = dists.first().ok_or(Error::EmptyBatch)?;
    let k = first.k();
    if dists.iter().any(|d| d.k() != k) {
        return Err(Error::InvalidDistribution(
            "distributions in a batch must share the cluster count".into(),
        ));
    }
    Ok(k)
}

/// H(Y): entropy of the batch-mean assignment distribution.
pub fn marginal_entropy(dists: &[AssignmentDistribution]) -> Result<f64> {
    let k = check_batch(dists)?;
    let m = dists.len() as f64;
    let mut mean = vec![0.0; k];
    for d in dists {
        for (acc, &p) in mean.iter_mut().zip(d.probs()) {
            *acc += p;
        }
    }
    for p in &mut mean {
        *p /= m;
    }
    Ok(entropy(&mean))
}

/// H(Y|X): mean per-sample entropy over the batch.
pub fn conditional_entropy(dists: &[AssignmentDistribution]) -> Result<f64> {
    check_batch(dists)?;
    let m = dists.len() as f64;
    Ok(dists.iter().map(|d| entropy(d.probs())).sum::<f64>() / m)
}

/// The clustering loss `R(theta) - lambda * (H(Y) - H(Y|X))`. The regularizer
/// covers the head weights only.
pub fn rim_loss(
    dists: &[AssignmentDistribution],
    head: &ClusterHeadParams,
    cfg: &RimConfig,
) -> Result<f64> {
    cfg.validate()?;
    let k = check_batch(dists)?;
    if k != cfg.clusters {
        return Err(Error::Config(format!(
            "distributions have {k} clusters, config says {}",
            cfg.clusters
        )));
    }
    if head.w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { component: "cluster_head", value: f64::NAN });
    }
    let reg: f64 = cfg.weight_decay * head.w.iter().map(|w| w * w).sum::<f64>();
    Ok(reg - cfg.lambda * (marginal_entropy(dists)? - conditional_entropy(dists)?))
}

pub(crate) fn argmax_lowest(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Per-sample hard assignment. No gradient flows through this step.
pub fn assign(dists: &[AssignmentDistribution]) -> Vec<ClusterAssignment> {
    dists
        .iter()
        .map(|d| ClusterAssignment { cluster_index: argmax_lowest(d.probs()) })
        .collect()
}

/// Mean representation per non-empty cluster, ordered by cluster index.
/// Empty clusters simply yield no centroid.
pub fn compute_centroids(
    reps: &[RepresentationVector],
    assignments: &[ClusterAssignment],
    k: usize,
) -> Result<Vec<CentroidRepresentation>> {
    if reps.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if reps.len() != assignments.len() {
        return Err(Error::Usage(format!(
            "{} representations but {} assignments",
            reps.len(),
            assignments.len()
        )));
    }
    let dim = reps[0].values.len();
    let mut sums = vec![Array1::<f64>::zeros(dim); k];
    let mut counts = vec![0usize; k];
    for (r, a) in reps.iter().zip(assignments) {
        if a.cluster_index >= k {
            return Err(Error::Usage(format!(
                "assignment {} out of range for K = {k}",
                a.cluster_index
            )));
        }
        sums[a.cluster_index] += &r.values;
        counts[a.cluster_index] += 1;
    }
    Ok((0..k)
        .filter(|&j| counts[j] > 0)
        .map(|j| CentroidRepresentation {
            values: &sums[j] / counts[j] as f64,
            member_count: counts[j],
            cluster_index: j,
        })
        .collect())
}

/// Non-empty clusters of a batch: which cluster ids are active, each sample's
/// position within the active list, and per-active-cluster member counts.
#[derive(Debug, Clone)]
pub struct ActiveClusters {
    /// Sorted ids of clusters with at least one member.
    pub clusters: Vec<usize>,
    /// For sample i, the index of its cluster within `clusters`.
    pub positions: Vec<usize>,
    /// Member count per entry of `clusters`.
    pub counts: Vec<usize>,
}

impl ActiveClusters {
    pub fn from_assignments(assignments: &[ClusterAssignment], k: usize) -> Self {
        let mut counts_full = vec![0usize; k];
        for a in assignments {
            counts_full[a.cluster_index] += 1;
        }
        let clusters: Vec<usize> = (0..k).filter(|&j| counts_full[j] > 0).collect();
        let mut position_of = vec![usize::MAX; k];
        for (pos, &j) in clusters.iter().enumerate() {
            position_of[j] = pos;
        }
        let positions = assignments.iter().map(|a| position_of[a.cluster_index]).collect();
        let counts = clusters.iter().map(|&j| counts_full[j]).collect();
        ActiveClusters { clusters, positions, counts }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Differentiable clustering loss over a logits node. Returns the loss node
/// together with the softmax probabilities node (used downstream for
/// assignments and diagnostics).
pub struct RimGraph {
    pub loss: NodeId,
    pub probs: NodeId,
    pub marginal: NodeId,
    pub conditional: NodeId,
}

pub fn rim_graph(tape: &mut Tape, logits: NodeId, head_w: NodeId, cfg: &RimConfig) -> RimGraph {
    let m = tape.value(logits).shape()[0];
    let log_probs = tape.log_softmax_rows(logits);
    let probs = tape.exp(log_probs);
    let plogp = tape.mul(probs, log_probs);
    let neg_cond_sum = tape.sum_all(plogp);
    let conditional = tape.scalar_mul(neg_cond_sum, -1.0 / m as f64);
    let mean = tape.mean_rows(probs);
    let marginal = tape.entropy1d(mean);
    let w_sq = tape.square(head_w);
    let w_ss = tape.sum_all(w_sq);
    let reg = tape.scalar_mul(w_ss, cfg.weight_decay);
    let gap = tape.sub(marginal, conditional);
    let weighted = tape.scalar_mul(gap, cfg.lambda);
    let loss = tape.sub(reg, weighted);
    RimGraph { loss, probs, marginal, conditional }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(k: usize, i: usize) -> AssignmentDistribution {
        let mut p = vec![0.0; k];
        p[i] = 1.0;
        AssignmentDistribution::new(p).unwrap()
    }

    fn uniform(k: usize) -> AssignmentDistribution {
        AssignmentDistribution::new(vec![1.0 / k as f64; k]).unwrap()
    }

    fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> AssignmentDistribution {
        let logits: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
        AssignmentDistribution::from_logits(&logits)
    }

    #[test]
    fn marginal_entropy_of_opposing_one_hots_is_ln2() {
        let batch = vec![one_hot(2, 0), one_hot(2, 1)];
        assert_abs_diff_eq!(marginal_entropy(&batch).unwrap(), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn marginal_entropy_of_identical_one_hots_is_zero() {
        let batch = vec![one_hot(3, 0); 4];
        assert_abs_diff_eq!(marginal_entropy(&batch).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn marginal_entropy_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch: Vec<_> = (0..5).map(|_| random_dist(&mut rng, 4)).collect();
        // Independent route: average the probabilities, then -sum p log p.
        let mut mean = [0.0f64; 4];
        for d in &batch {
            for (acc, &p) in mean.iter_mut().zip(d.probs()) {
                *acc += p / 5.0;
            }
        }
        let oracle: f64 = mean.iter().map(|&p| -p * p.ln()).sum();
        assert_abs_diff_eq!(marginal_entropy(&batch).unwrap(), oracle, epsilon = 1e-10);
    }

    #[test]
    fn conditional_entropy_known_values() {
        assert_abs_diff_eq!(
            conditional_entropy(&vec![one_hot(4, 1); 3]).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            conditional_entropy(&vec![uniform(4); 3]).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );
        // Mixed batch {e1, uniform} averages the two entropies.
        let mixed = vec![one_hot(4, 0), uniform(4)];
        assert_abs_diff_eq!(
            conditional_entropy(&mixed).unwrap(),
            4f64.ln() / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(marginal_entropy(&[]), Err(Error::EmptyBatch)));
        assert!(matches!(conditional_entropy(&[]), Err(Error::EmptyBatch)));
    }

    fn zero_head(k: usize, d: usize) -> ClusterHeadParams {
        ClusterHeadParams { w: Array2::zeros((k, d)), b: Array1::zeros(k) }
    }

    #[test]
    fn rim_loss_is_zero_for_uniform_batch_and_zero_head() {
        let cfg = RimConfig { clusters: 4, lambda: 1.0, weight_decay: 1e-3 };
        let batch = vec![uniform(4); 6];
        let loss = rim_loss(&batch, &zero_head(4, 8), &cfg).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rim_loss_matches_entropy_oracle_for_one_hot_pair() {
        let cfg = RimConfig { clusters: 2, lambda: 1.0, weight_decay: 0.0 };
        let batch = vec![one_hot(2, 0), one_hot(2, 1)];
        // Oracle from the entropy estimators evaluated directly.
        let oracle = -(2f64.ln() - 0.0);
        assert_abs_diff_eq!(
            rim_loss(&batch, &zero_head(2, 8), &cfg).unwrap(),
            oracle,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rim_loss_regularizer_only() {
        let cfg = RimConfig { clusters: 4, lambda: 1.0, weight_decay: 0.5 };
        let mut head = zero_head(4, 2);
        head.w = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]; // sum of squares = 2
        let batch = vec![uniform(4); 3];
        assert_abs_diff_eq!(rim_loss(&batch, &head, &cfg).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn assign_takes_argmax_with_lowest_index_ties() {
        let d = AssignmentDistribution::new(vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(assign(&[d])[0].cluster_index, 1);
        let tie = AssignmentDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(assign(&[tie])[0].cluster_index, 0);
    }

    #[test]
    fn assign_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<_> = (0..32).map(|_| random_dist(&mut rng, 6)).collect();
        for (d, a) in batch.iter().zip(assign(&batch)) {
            let mut best = 0;
            let mut best_p = f64::NEG_INFINITY;
            for (i, &p) in d.probs().iter().enumerate() {
                if p > best_p {
                    best = i;
                    best_p = p;
                }
            }
            assert_eq!(a.cluster_index, best);
        }
    }

    #[test]
    fn centroid_of_two_members_is_their_mean() {
        let reps = vec![
            RepresentationVector { values: array![1.0, 3.0] },
            RepresentationVector { values: array![3.0, 5.0] },
        ];
        let assignments = vec![
            ClusterAssignment { cluster_index: 0 },
            ClusterAssignment { cluster_index: 0 },
        ];
        let cents = compute_centroids(&reps, &assignments, 2).unwrap();
        assert_eq!(cents.len(), 1);
        assert_eq!(cents[0].values, array![2.0, 4.0]);
        assert_eq!(cents[0].member_count, 2);
        assert_eq!(cents[0].cluster_index, 0);
    }

    #[test]
    fn singleton_centroid_equals_member() {
        let reps = vec![RepresentationVector { values: array![0.5, -1.5, 2.0] }];
        let assignments = vec![ClusterAssignment { cluster_index: 3 }];
        let cents = compute_centroids(&reps, &assignments, 5).unwrap();
        assert_eq!(cents.len(), 1);
        assert_eq!(cents[0].values, reps[0].values);
        assert_eq!(cents[0].cluster_index, 3);
    }

    #[test]
    fn centroids_match_group_by_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps: Vec<RepresentationVector> = (0..8)
            .map(|_| RepresentationVector {
                values: Array1::from_shape_fn(4, |_| rng.gen::<f64>() * 4.0 - 2.0),
            })
            .collect();
        let assignments: Vec<ClusterAssignment> = (0..8)
            .map(|_| ClusterAssignment { cluster_index: rng.gen_range(0..3) })
            .collect();
        let cents = compute_centroids(&reps, &assignments, 3).unwrap();

        // Oracle: collect each group's members, then average them.
        for j in 0..3 {
            let members: Vec<&RepresentationVector> = reps
                .iter()
                .zip(&assignments)
                .filter(|(_, a)| a.cluster_index == j)
                .map(|(r, _)| r)
                .collect();
            let found = cents.iter().find(|c| c.cluster_index == j);
            if members.is_empty() {
                assert!(found.is_none());
                continue;
            }
            let c = found.expect("centroid for non-empty cluster");
            assert_eq!(c.member_count, members.len());
            for d in 0..4 {
                let mean: f64 =
                    members.iter().map(|r| r.values[d]).sum::<f64>() / members.len() as f64;
                assert_abs_diff_eq!(c.values[d], mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rim_graph_matches_value_route_and_is_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 6;
        let k = 4;
        let logits = Array2::from_shape_fn((m, k), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let head = ClusterHeadParams {
            w: Array2::from_shape_fn((k, 5), |_| rng.gen::<f64>() - 0.5),
            b: Array1::zeros(k),
        };
        let cfg = RimConfig { clusters: k, lambda: 1.3, weight_decay: 0.01 };

        let mut tape = Tape::new();
        let lg = tape.leaf(logits.clone().into_dyn());
        let hw = tape.leaf(head.w.clone().into_dyn());
        let graph = rim_graph(&mut tape, lg, hw, &cfg);

        let dists: Vec<AssignmentDistribution> = logits
            .rows()
            .into_iter()
            .map(|row| AssignmentDistribution::from_logits(row.as_slice().unwrap()))
            .collect();
        let value_route = rim_loss(&dists, &head, &cfg).unwrap();
        assert_abs_diff_eq!(tape.scalar(graph.loss), value_route, epsilon = 1e-12);

        let grads = tape.backward(graph.loss);
        assert!(grads.get(lg).is_some());
        assert!(grads.get(hw).is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn entropy_inequalities_hold(seed in 0u64..1000, m in 1usize..12, k in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch: Vec<_> = (0..m).map(|_| random_dist(&mut rng, k)).collect();
            let cond = conditional_entropy(&batch).unwrap();
            let marg = marginal_entropy(&batch).unwrap();
            prop_assert!(cond >= -1e-9);
            prop_assert!(marg >= cond - 1e-9);
            prop_assert!(marg <= (k as f64).ln() + 1e-9);
        }

        #[test]
        fn entropies_are_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch: Vec<_> = (0..7).map(|_| random_dist(&mut rng, 5)).collect();
            let mut reversed = batch.clone();
            reversed.reverse();
            prop_assert!((marginal_entropy(&batch).unwrap() - marginal_entropy(&reversed).unwrap()).abs() < 1e-12);
            prop_assert!((conditional_entropy(&batch).unwrap() - conditional_entropy(&reversed).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn centroid_member_counts_sum_to_batch_size(seed in 0u64..1000, m in 1usize..20, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reps: Vec<RepresentationVector> = (0..m)
                .map(|_| RepresentationVector { values: Array1::from_shape_fn(3, |_| rng.gen()) })
                .collect();
            let assignments: Vec<ClusterAssignment> = (0..m)
                .map(|_| ClusterAssignment { cluster_index: rng.gen_range(0..k) })
                .collect();
            let cents = compute_centroids(&reps, &assignments, k).unwrap();
            prop_assert_eq!(cents.iter().map(|c| c.member_count).sum::<usize>(), m);

            // Permuting the (rep, assignment) pairs leaves centroids unchanged.
            let mut idx: Vec<usize> = (0..m).collect();
            idx.reverse();
            let reps_p: Vec<_> = idx.iter().map(|&i| reps[i].clone()).collect();
            let asg_p: Vec<_> = idx.iter().map(|&i| assignments[i]).collect();
            let cents_p = compute_centroids(&reps_p, &asg_p, k).unwrap();
            prop_assert_eq!(cents.len(), cents_p.len());
            for (a, b) in cents.iter().zip(&cents_p) {
                prop_assert_eq!(a.cluster_index, b.cluster_index);
                prop_assert_eq!(a.member_count, b.member_count);
                for (x, y) in a.values.iter().zip(b.values.iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn argmax_is_invariant_under_monotone_logit_maps(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let base = assign(&[AssignmentDistribution::from_logits(&logits)])[0];
            // Strictly increasing maps: affine with positive slope, and exp-like.
            let affine: Vec<f64> = logits.iter().map(|&l| 2.5 * l + 0.7).collect();
            let curved: Vec<f64> = logits.iter().map(|&l| l + 0.1 * l.tanh()).collect();
            prop_assert_eq!(assign(&[AssignmentDistribution::from_logits(&affine)])[0], base);
            prop_assert_eq!(assign(&[AssignmentDistribution::from_logits(&curved)])[0], base);
        }
    }

    #[test]
    fn active_clusters_tracks_positions_and_counts() {
        let assignments = vec![
            ClusterAssignment { cluster_index: 3 },
            ClusterAssignment { cluster_index: 1 },
            ClusterAssignment { cluster_index: 3 },
        ];
        let active = ActiveClusters::from_assignments(&assignments, 5);
        assert_eq!(active.clusters, vec![1, 3]);
        assert_eq!(active.positions, vec![1, 0, 1]);
        assert_eq!(active.counts, vec![1, 2]);
    }
}
