//! End-to-end optimization: wires encoder, embedding, clustering, centroids,
//! decoder and the three losses into one differentiable step, then applies
//! SGD with momentum to all parameter groups jointly.

pub mod checkpoint;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

use crate::autograd::{NodeId, Tape};
use crate::clustering::{assign, ActiveClusters, AssignmentDistribution, ClusterAssignment, RimConfig};
use crate::clustering::{rim_graph, RimGraph};
use crate::data::{make_batches, Batch, DatasetConfig, LabeledImages};
use crate::error::{Error, Result};
use crate::losses::{metric_loss_graph, reconstruction_loss_graph, LossBreakdown, LossWeights};
use crate::model::{GraphParams, ModelBundle, ModelConfig};

/// Which loss terms are active; the names follow the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Clustering loss only.
    OnlyRim,
    /// Clustering + metric loss (center-based softmax).
    Cbs,
    /// All three losses (center-based softmax with reconstruction).
    Cbswr,
}

impl AblationMode {
    pub fn all() -> [AblationMode; 3] {
        [AblationMode::OnlyRim, AblationMode::Cbs, AblationMode::Cbswr]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::OnlyRim => "only_rim",
            AblationMode::Cbs => "cbs",
            AblationMode::Cbswr => "cbswr",
        }
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Originals per batch; the trained batch holds m = 2 * batch_size images.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub rim: RimConfig,
    /// Master seed; model init and epoch shuffles derive from it.
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = final only).
    pub checkpoint_interval: usize,
    pub ablation_mode: AblationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            weights: LossWeights::default(),
            rim: RimConfig { clusters: 8, ..RimConfig::default() },
            seed: 1,
            checkpoint_interval: 0,
            ablation_mode: AblationMode::Cbswr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("train.learning_rate must be non-negative".into()));
        }
        self.weights.validate()?;
        self.rim.validate()?;
        if self.rim.clusters > 2 * self.batch_size {
            return Err(Error::Config(format!(
                "rim.clusters = {} exceeds the batch size m = {}",
                self.rim.clusters,
                2 * self.batch_size
            )));
        }
        Ok(())
    }
}

/// Deterministic seed derivation (splitmix64 over a salted stream).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const SEED_STREAM_MODEL: u64 = 1;
pub const SEED_STREAM_SHUFFLE: u64 = 2;

/// Mutable optimization state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelBundle,
    /// Per-parameter momentum buffers, in canonical parameter order.
    pub velocity: Vec<ArrayD<f64>>,
    pub epoch: u64,
    pub steps: u64,
    pub skipped_samples_total: u64,
}

impl TrainState {
    pub fn new(model: ModelBundle) -> Self {
        let velocity = model
            .param_views()
            .iter()
            .map(|v| ArrayD::zeros(v.raw_dim()))
            .collect();
        TrainState { model, velocity, epoch: 0, steps: 0, skipped_samples_total: 0 }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub l_m: f64,
    pub l_rim: f64,
    pub l_rec: f64,
    pub total: f64,
    pub active_clusters: usize,
    pub skipped_samples: usize,
    pub wall_ms: f64,
}

/// Everything a built step graph exposes: loss nodes, parameter leaves and
/// the assignment structure the losses were built around.
pub struct BatchGraph {
    pub params: GraphParams,
    pub input: NodeId,
    pub l_m: NodeId,
    pub l_rim: NodeId,
    pub l_rec: NodeId,
    pub total: NodeId,
    pub assignments: Vec<ClusterAssignment>,
    pub active: ActiveClusters,
    pub skipped_samples: usize,
}

/// Assemble the full forward pass and the mode-weighted total on a tape.
///
/// Hard assignments are taken from the current softmax outputs and treated
/// as constants inside the step; passing `frozen` pins them instead, which
/// the finite-difference checker uses to differentiate the same branch the
/// analytic gradient lives on.
pub fn build_batch_graph(
    tape: &mut Tape,
    model: &ModelBundle,
    batch: &Batch,
    weights: &LossWeights,
    rim_cfg: &RimConfig,
    mode: AblationMode,
    frozen: Option<&[ClusterAssignment]>,
) -> Result<BatchGraph> {
    let m = batch.m();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    if rim_cfg.clusters > m {
        return Err(Error::Config(format!(
            "rim.clusters = {} exceeds the batch size m = {m}",
            rim_cfg.clusters
        )));
    }
    let x = model.batch_array(&batch.samples)?;
    let (c, h, w) = model.config.image_shape;
    let pixels = c * h * w;

    let gp = model.graph_params(tape);
    let input = tape.leaf(x.into_dyn());
    let representations = model.encode_graph(tape, &gp, input);
    let embeddings = model.embed_graph(tape, &gp, representations)?;
    let logits = model.logits_graph(tape, &gp, embeddings);
    let RimGraph { loss: l_rim, probs, .. } = rim_graph(tape, logits, gp.head_w, rim_cfg);

    let assignments: Vec<ClusterAssignment> = match frozen {
        Some(a) => {
            if a.len() != m {
                return Err(Error::Usage("frozen assignments do not match the batch".into()));
            }
            a.to_vec()
        }
        None => {
            let prob_rows = tape.value(probs).view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
            let dists: Vec<AssignmentDistribution> = prob_rows
                .rows()
                .into_iter()
                .map(|row| AssignmentDistribution::new(row.to_vec()))
                .collect::<Result<_>>()?;
            assign(&dists)
        }
    };
    let active = ActiveClusters::from_assignments(&assignments, rim_cfg.clusters);

    let centroid_reprs = tape.segment_mean_rows(representations, active.positions.clone(), active.len());
    let centroid_embeddings = model.embed_graph(tape, &gp, centroid_reprs)?;

    let twin: Vec<usize> = (0..m).map(Batch::twin_index).collect();
    let metric = metric_loss_graph(tape, embeddings, centroid_embeddings, &active.positions, &twin, weights.tau);

    let decoded = model.decode_graph(tape, &gp, centroid_reprs);
    let images_flat = tape.reshape(input, &[m, pixels]);
    let l_rec = reconstruction_loss_graph(tape, decoded, images_flat, &active.positions);

    let weighted_m = tape.scalar_mul(metric.loss, weights.alpha);
    let weighted_rim = tape.scalar_mul(l_rim, weights.beta);
    let weighted_rec = tape.scalar_mul(l_rec, weights.gamma);
    let total = match mode {
        AblationMode::OnlyRim => weighted_rim,
        AblationMode::Cbs => tape.add(weighted_m, weighted_rim),
        AblationMode::Cbswr => {
            let partial = tape.add(weighted_m, weighted_rim);
            tape.add(partial, weighted_rec)
        }
    };

    for (component, node) in [
        ("l_m", metric.loss),
        ("l_rim", l_rim),
        ("l_rec", l_rec),
        ("total", total),
    ] {
        let v = tape.scalar(node);
        if !v.is_finite() {
            return Err(Error::NonFinite { component: match component {
                "l_m" => "l_m",
                "l_rim" => "l_rim",
                "l_rec" => "l_rec",
                _ => "total",
            }, value: v });
        }
    }

    Ok(BatchGraph {
        params: gp,
        input,
        l_m: metric.loss,
        l_rim,
        l_rec,
        total,
        assignments,
        active,
        skipped_samples: metric.skipped_samples,
    })
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub active_clusters: usize,
    pub skipped_samples: usize,
}

/// Forward, backward and SGD update: `v <- momentum v - lr g`, `p <- p + v`.
/// Returns the pre-update loss breakdown.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepOutcome> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let graph = build_batch_graph(
        &mut tape,
        &state.model,
        batch,
        &cfg.weights,
        &cfg.rim,
        cfg.ablation_mode,
        None,
    )?;
    let breakdown = LossBreakdown {
        l_m: tape.scalar(graph.l_m),
        l_rim: tape.scalar(graph.l_rim),
        l_rec: tape.scalar(graph.l_rec),
        total: tape.scalar(graph.total),
    };

    let grads = tape.backward(graph.total);
    let ordered = graph.params.ordered();
    let grad_arrays: Vec<ArrayD<f64>> = ordered
        .iter()
        .zip(state.model.param_views())
        .map(|(&id, view)| match grads.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(view.raw_dim()),
        })
        .collect();

    let lr = cfg.learning_rate;
    let momentum = cfg.momentum;
    let mut views = state.model.param_views_mut();
    for ((param, vel), grad) in views.iter_mut().zip(state.velocity.iter_mut()).zip(&grad_arrays) {
        vel.zip_mut_with(grad, |v, &g| *v = momentum * *v - lr * g);
        param.zip_mut_with(vel, |p, &v| *p += v);
    }
    drop(views);

    state.steps += 1;
    state.skipped_samples_total += graph.skipped_samples as u64;
    Ok(StepOutcome {
        breakdown,
        active_clusters: graph.active.len(),
        skipped_samples: graph.skipped_samples,
    })
}

pub struct FitOptions<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub resume: Option<TrainState>,
    /// Hash of the semantically binding config sections, stored in
    /// checkpoints so stale artifacts are refused on load.
    pub config_hash: u64,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        FitOptions { checkpoint_dir: None, resume: None, config_hash: 0 }
    }
}

pub struct FitResult {
    pub state: TrainState,
    pub history: Vec<StepRecord>,
}

/// Run `epochs x batches` of [`train_step`] over seeded epoch shuffles.
/// Epoch seeds derive from the master seed and the absolute epoch index, so
/// resuming from a checkpoint continues the exact same stream.
pub fn fit(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset_cfg: &DatasetConfig,
    data: &LabeledImages,
    opts: FitOptions,
) -> Result<FitResult> {
    cfg.validate()?;
    let mut state = match opts.resume {
        Some(s) => {
            if s.model.config != *model_cfg || s.model.clusters != cfg.rim.clusters {
                return Err(Error::Checkpoint(
                    "resumed state was trained under a different model configuration".into(),
                ));
            }
            s
        }
        None => TrainState::new(ModelBundle::init(
            model_cfg,
            cfg.rim.clusters,
            derive_seed(cfg.seed, SEED_STREAM_MODEL),
        )?),
    };
    let mut history = Vec::new();
    let shuffle_base = derive_seed(cfg.seed, SEED_STREAM_SHUFFLE);

    while state.epoch < cfg.epochs as u64 {
        let epoch = state.epoch;
        let epoch_seed = derive_seed(shuffle_base, epoch);
        let batches = make_batches(
            data,
            cfg.batch_size,
            epoch_seed,
            dataset_cfg.crop_fraction,
            dataset_cfg.flip_probability,
        )?;
        for (step, batch) in batches.iter().enumerate() {
            let started = Instant::now();
            let outcome = train_step(&mut state, batch, cfg)?;
            history.push(StepRecord {
                epoch,
                step: step as u64,
                l_m: outcome.breakdown.l_m,
                l_rim: outcome.breakdown.l_rim,
                l_rec: outcome.breakdown.l_rec,
                total: outcome.breakdown.total,
                active_clusters: outcome.active_clusters,
                skipped_samples: outcome.skipped_samples,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        state.epoch += 1;
        if let Some(dir) = opts.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && state.epoch % cfg.checkpoint_interval as u64 == 0 {
                let path = dir.join(format!("checkpoint_epoch_{:04}.bin", state.epoch));
                checkpoint::save_checkpoint(&path, &state, opts.config_hash)?;
            }
        }
    }
    if let Some(dir) = opts.checkpoint_dir {
        checkpoint::save_checkpoint(&dir.join("checkpoint_final.bin"), &state, opts.config_hash)?;
    }
    Ok(FitResult { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use approx::assert_abs_diff_eq;

    fn tiny_setup() -> (ModelConfig, TrainConfig, DatasetConfig, LabeledImages) {
        let model_cfg = ModelConfig {
            image_shape: (1, 8, 8),
            conv_channels: (4, 8),
            repr_dim: 16,
            embed_dim: 8,
        };
        let train_cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.05,
            rim: RimConfig { clusters: 4, ..RimConfig::default() },
            ..TrainConfig::default()
        };
        let data_cfg = DatasetConfig {
            num_classes: 4,
            train_classes: 2,
            samples_per_class: 8,
            image_shape: (1, 8, 8),
            noise_level: 0.2,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&data_cfg, 5).unwrap().train;
        (model_cfg, train_cfg, data_cfg, data)
    }

    fn one_batch(data: &LabeledImages, cfg: &DatasetConfig, b: usize) -> Batch {
        make_batches(data, b, 9, cfg.crop_fraction, cfg.flip_probability).unwrap()[0].clone()
    }

    #[test]
    fn identical_steps_from_identical_states_match_bitwise() {
        let (model_cfg, train_cfg, data_cfg, data) = tiny_setup();
        let batch = one_batch(&data, &data_cfg, 4);
        let model = ModelBundle::init(&model_cfg, 4, 3).unwrap();
        let mut a = TrainState::new(model.clone());
        let mut b = TrainState::new(model);
        let oa = train_step(&mut a, &batch, &train_cfg).unwrap();
        let ob = train_step(&mut b, &batch, &train_cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn zero_learning_rate_reports_losses_but_freezes_parameters() {
        let (model_cfg, mut train_cfg, data_cfg, data) = tiny_setup();
        train_cfg.learning_rate = 0.0;
        let batch = one_batch(&data, &data_cfg, 4);
        let model = ModelBundle::init(&model_cfg, 4, 3).unwrap();
        let mut state = TrainState::new(model.clone());
        let outcome = train_step(&mut state, &batch, &train_cfg).unwrap();
        assert!(outcome.breakdown.total.is_finite());
        assert_eq!(state.model, model);
    }

    #[test]
    fn only_rim_total_is_exactly_beta_times_rim() {
        let (model_cfg, mut train_cfg, data_cfg, data) = tiny_setup();
        train_cfg.ablation_mode = AblationMode::OnlyRim;
        let batch = one_batch(&data, &data_cfg, 4);
        let mut state = TrainState::new(ModelBundle::init(&model_cfg, 4, 3).unwrap());
        let outcome = train_step(&mut state, &batch, &train_cfg).unwrap();
        assert_eq!(outcome.breakdown.total, train_cfg.weights.beta * outcome.breakdown.l_rim);
    }

    #[test]
    fn cbswr_total_matches_weighted_sum() {
        let (model_cfg, train_cfg, data_cfg, data) = tiny_setup();
        let batch = one_batch(&data, &data_cfg, 4);
        let mut state = TrainState::new(ModelBundle::init(&model_cfg, 4, 3).unwrap());
        let o = train_step(&mut state, &batch, &train_cfg).unwrap();
        let w = &train_cfg.weights;
        assert_abs_diff_eq!(
            o.breakdown.total,
            w.alpha * o.breakdown.l_m + w.beta * o.breakdown.l_rim + w.gamma * o.breakdown.l_rec,
            epsilon = 1e-9
        );
    }

    #[test]
    fn fit_zero_epochs_returns_initial_state() {
        let (model_cfg, mut train_cfg, data_cfg, data) = tiny_setup();
        train_cfg.epochs = 0;
        let out = fit(&model_cfg, &train_cfg, &data_cfg, &data, FitOptions::default()).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.state.epoch, 0);
        let fresh = TrainState::new(
            ModelBundle::init(&model_cfg, 4, derive_seed(train_cfg.seed, SEED_STREAM_MODEL)).unwrap(),
        );
        assert_eq!(out.state, fresh);
    }

    #[test]
    fn fit_is_deterministic_across_runs() {
        let (model_cfg, train_cfg, data_cfg, data) = tiny_setup();
        let a = fit(&model_cfg, &train_cfg, &data_cfg, &data, FitOptions::default()).unwrap();
        let b = fit(&model_cfg, &train_cfg, &data_cfg, &data, FitOptions::default()).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_training_bitwise() {
        let (model_cfg, mut train_cfg, data_cfg, data) = tiny_setup();
        train_cfg.epochs = 4;
        let full = fit(&model_cfg, &train_cfg, &data_cfg, &data, FitOptions::default()).unwrap();

        let mut first_half = train_cfg.clone();
        first_half.epochs = 2;
        let half = fit(&model_cfg, &first_half, &data_cfg, &data, FitOptions::default()).unwrap();
        let resumed = fit(
            &model_cfg,
            &train_cfg,
            &data_cfg,
            &data,
            FitOptions { resume: Some(half.state), ..FitOptions::default() },
        )
        .unwrap();
        assert_eq!(full.state, resumed.state);
    }

    #[test]
    fn training_reduces_the_loss_on_a_small_problem() {
        let (model_cfg, mut train_cfg, data_cfg, data) = tiny_setup();
        train_cfg.epochs = 20;
        let out = fit(&model_cfg, &train_cfg, &data_cfg, &data, FitOptions::default()).unwrap();
        let per_epoch = |e: u64| {
            let steps: Vec<&StepRecord> = out.history.iter().filter(|r| r.epoch == e).collect();
            steps.iter().map(|r| r.total).sum::<f64>() / steps.len() as f64
        };
        assert!(
            per_epoch(19) < per_epoch(0),
            "epoch 19 mean {} should be below epoch 0 mean {}",
            per_epoch(19),
            per_epoch(0)
        );
    }
}
