//! Zero-shot vs. few-epoch fine-tuning on the synthetic dataset, printed as
//! a per-epoch accuracy table.
//!
//! cargo run --release --example desk_table -- [per_class] [seed] [lr]

use std::time::Instant;

use histovit::data::{gen_synthetic, split_dataset};
use histovit::pipeline::{fine_tune, zero_shot_eval, TrainConfig};
use histovit::vit::{init_params, ViTConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let per_class: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-4);

    let cfg = ViTConfig::tiny();
    let split = split_dataset(gen_synthetic(per_class, cfg.image_size, seed), seed).expect("split");
    let params = init_params(&cfg, seed + 1).expect("init");
    let start = Instant::now();
    let zs = zero_shot_eval(&params, &split).expect("zero-shot");
    println!("{:<22} {:>10} {:>10}", "model", "val acc", "test acc");
    println!("{:<22} {:>10} {:>9.2}%", "zero-shot", "-", 100.0 * zs.accuracy);
    let train = TrainConfig {
        learning_rate: lr,
        seed: seed + 2,
        ..Default::default()
    };
    let out = fine_tune(&params, &split, &train).expect("fine-tune");
    for r in &out.records {
        println!(
            "{:<22} {:>9.2}% {:>9.2}%",
            format!("few-shot (epoch = {})", r.epoch),
            100.0 * r.validation_accuracy,
            100.0 * r.test_accuracy
        );
    }
    println!("best epoch {} in {:.1?}", out.best_epoch, start.elapsed());
}
