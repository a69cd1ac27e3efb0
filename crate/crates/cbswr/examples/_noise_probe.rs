use cbswr::data::{generate_dataset, DatasetConfig};
use cbswr::eval::{extract_embeddings, recall_at_k};
use cbswr::model::{ModelBundle, ModelConfig};

fn main() {
    let model_cfg = ModelConfig::default();
    for noise in [0.25, 0.35, 0.45, 0.55, 0.65] {
        let mut r1s = Vec::new();
        for seed in [1u64, 2, 3] {
            let data_cfg = DatasetConfig { noise_level: noise, ..DatasetConfig::default() };
            let data = generate_dataset(&data_cfg, 1000 + seed).unwrap();
            let model = ModelBundle::init(&model_cfg, 8, seed).unwrap();
            let idx = extract_embeddings(&model, &data.test, data_cfg.crop_fraction).unwrap();
            r1s.push(recall_at_k(&idx, 1).unwrap());
        }
        println!("noise {noise}: untrained R@1 = {:?}", r1s);
    }
}
