use cbswr::clustering::RimConfig;
use cbswr::data::{generate_dataset, DatasetConfig};
use cbswr::model::{ModelBundle, ModelConfig};
use cbswr::train::{fit, AblationMode, FitOptions, TrainConfig, TrainState, derive_seed, SEED_STREAM_MODEL};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let gain: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4.0);
    let model_cfg = ModelConfig::default();
    let data_cfg = DatasetConfig { noise_level: 0.25, ..DatasetConfig::default() };
    let data = generate_dataset(&data_cfg, 1000 + seed).unwrap();
    let mut model = ModelBundle::init(&model_cfg, 8, derive_seed(seed, SEED_STREAM_MODEL)).unwrap();
    model.head.w.mapv_inplace(|v| v * gain);
    let state = TrainState::new(model);
    let train_cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        learning_rate: 1e-4,
        rim: RimConfig { clusters: 8, lambda: 1.0, weight_decay: 1e-3 },
        seed,
        ablation_mode: AblationMode::Cbswr,
        ..TrainConfig::default()
    };
    let out = fit(&model_cfg, &train_cfg, &data_cfg, &data.train,
        FitOptions { resume: Some(state), ..FitOptions::default() }).unwrap();
    for r in &out.history {
        println!(
            "e{} s{:2}: active {} skipped {:2} l_m {:9.3} l_rim {:7.3} l_rec {:6.2}",
            r.epoch, r.step, r.active_clusters, r.skipped_samples, r.l_m, r.l_rim, r.l_rec
        );
    }
}
