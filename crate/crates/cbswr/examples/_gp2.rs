use cbswr::clustering::RimConfig;
use cbswr::data::{generate_dataset, DatasetConfig};
use cbswr::eval::evaluate;
use cbswr::model::{ModelBundle, ModelConfig};
use cbswr::train::{fit, AblationMode, FitOptions, TrainConfig, TrainState, derive_seed, SEED_STREAM_MODEL};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gain: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4.0);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let lambda: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let wd: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(200);
    let noise: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.25);
    let nseeds: u64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(5);

    let model_cfg = ModelConfig::default();
    let data_cfg = DatasetConfig { noise_level: noise, ..DatasetConfig::default() };

    for mode in [AblationMode::OnlyRim, AblationMode::Cbs, AblationMode::Cbswr] {
        let mut r1m = 0.0;
        let mut nmim = 0.0;
        for seed in 1..=nseeds {
            let train_cfg = TrainConfig {
                epochs,
                batch_size: 16,
                learning_rate: lr,
                rim: RimConfig { clusters: 8, lambda, weight_decay: wd },
                seed,
                ablation_mode: mode,
                ..TrainConfig::default()
            };
            let data = generate_dataset(&data_cfg, 1000 + seed).unwrap();
            let mut model = ModelBundle::init(&model_cfg, 8, derive_seed(seed, SEED_STREAM_MODEL)).unwrap();
            model.head.w.mapv_inplace(|v| v * gain);
            let state = TrainState::new(model);
            let out = fit(&model_cfg, &train_cfg, &data_cfg, &data.train,
                FitOptions { resume: Some(state), ..FitOptions::default() }).unwrap();
            let report = evaluate(&out.state.model, &data.test, data_cfg.crop_fraction, &[1]).unwrap();
            let last: Vec<_> = out.history.iter().rev().take(12).collect();
            let active = last.iter().map(|r| r.active_clusters as f64).sum::<f64>() / last.len() as f64;
            r1m += report.recall_at[&1];
            nmim += report.nmi;
            print!(" s{seed}[R@1 {:.2} NMI {:.2} a{:.0} sk{}]", report.recall_at[&1], report.nmi, active, out.state.skipped_samples_total);
        }
        println!("  => {:8} mean R@1 {:.3} NMI {:.3}", mode.name(), r1m / nseeds as f64, nmim / nseeds as f64);
    }
}
