use cbswr::clustering::RimConfig;
use cbswr::data::{generate_dataset, make_batches, DatasetConfig};
use cbswr::model::{ModelBundle, ModelConfig};
use cbswr::train::{fit, AblationMode, FitOptions, TrainConfig, TrainState, derive_seed, SEED_STREAM_MODEL};

fn main() {
    let seed = 3u64;
    let model_cfg = ModelConfig::default();
    let data_cfg = DatasetConfig { noise_level: 0.25, ..DatasetConfig::default() };
    let data = generate_dataset(&data_cfg, 1000 + seed).unwrap();
    let mut model = ModelBundle::init(&model_cfg, 8, derive_seed(seed, SEED_STREAM_MODEL)).unwrap();
    model.head.w.mapv_inplace(|v| v * 12.0);
    let mut state = TrainState::new(model);

    for chunk in 0..40 {
        let train_cfg = TrainConfig {
            epochs: (chunk + 1) * 5,
            batch_size: 16,
            learning_rate: 1e-4,
            rim: RimConfig { clusters: 8, lambda: 2.5, weight_decay: 1e-3 },
            seed,
            ablation_mode: AblationMode::Cbswr,
            ..TrainConfig::default()
        };
        let out = fit(&model_cfg, &train_cfg, &data_cfg, &data.train,
            FitOptions { resume: Some(state), ..FitOptions::default() }).unwrap();
        state = out.state;
        // Instrument: pre-normalization norms over one deterministic batch.
        let batch = &make_batches(&data.train, 16, 0, 1.0, 0.0).unwrap()[0];
        let reps = state.model.encode(&batch.samples).unwrap();
        let pre_norms: Vec<f64> = reps.iter().map(|r| {
            let pre = state.model.embedding.fc_w.dot(&r.values) + &state.model.embedding.fc_b;
            pre.iter().map(|x| x * x).sum::<f64>().sqrt()
        }).collect();
        let min_pre = pre_norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean_pre = pre_norms.iter().sum::<f64>() / pre_norms.len() as f64;
        let head_norm = state.model.head.w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let last = out.history.last().unwrap();
        println!(
            "epoch {:3}: active {} skipped {:3} l_m {:9.3} l_rim {:7.3} l_rec {:6.3} | pre-norm min {:7.4} mean {:7.4} | headW {:6.2}",
            state.epoch, last.active_clusters, last.skipped_samples, last.l_m, last.l_rim, last.l_rec,
            min_pre, mean_pre, head_norm
        );
    }
}
