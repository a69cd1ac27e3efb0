use cbswr::clustering::RimConfig;
use cbswr::data::{generate_dataset, DatasetConfig};
use cbswr::eval::evaluate;
use cbswr::model::ModelConfig;
use cbswr::train::{fit, AblationMode, FitOptions, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let lambda: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(60);
    let noise: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.25);

    let model_cfg = ModelConfig::default();
    let data_cfg = DatasetConfig { noise_level: noise, ..DatasetConfig::default() };

    for mode in [AblationMode::OnlyRim, AblationMode::Cbs, AblationMode::Cbswr] {
        for seed in [1u64, 2, 3] {
            let train_cfg = TrainConfig {
                epochs,
                batch_size: 16,
                learning_rate: lr,
                rim: RimConfig { clusters: 8, lambda, weight_decay: 1e-3 },
                seed,
                ablation_mode: mode,
                ..TrainConfig::default()
            };
            let data = generate_dataset(&data_cfg, 1000 + seed).unwrap();
            let t0 = Instant::now();
            let out = fit(&model_cfg, &train_cfg, &data_cfg, &data.train, FitOptions::default())
                .unwrap();
            let secs = t0.elapsed().as_secs_f64();
            let report = evaluate(&out.state.model, &data.test, data_cfg.crop_fraction, &[1, 2, 4, 8])
                .unwrap();
            let last: Vec<_> = out.history.iter().rev().take(12).collect();
            let active = last.iter().map(|r| r.active_clusters as f64).sum::<f64>() / last.len() as f64;
            let skipped: u64 = out.state.skipped_samples_total;
            println!(
                "{:8} seed {seed}: R@1 {:.3} R@2 {:.3} R@4 {:.3} R@8 {:.3} NMI {:.3} | active {:4.1} skipped {skipped:5} | {:5.1}s",
                mode.name(),
                report.recall_at[&1],
                report.recall_at[&2],
                report.recall_at[&4],
                report.recall_at[&8],
                report.nmi,
                active,
                secs
            );
        }
    }
}
