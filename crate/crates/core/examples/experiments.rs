//! Runs the two synthetic experiments on the MonuMAI-style KG and prints
//! their metrics.
//!
//! ```text
//! cargo run --release -p kgalign --example experiments -- [det_epochs] [det_lr] [separation] [agg] [h]
//! ```

use std::time::Instant;

use kgalign::data::{generate_dataset, GeneratorConfig, Splits};
use kgalign::percept::Aggregation;
use kgalign::train::{train_shap_backprop, train_standard, TrainConfig};
use kgalign::xai::WeightScheme;
use kgalign::KnowledgeGraph;

fn main() -> kgalign::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let det_epochs: usize = arg(0, "5").parse().expect("det_epochs");
    let det_lr: f64 = arg(1, "0.05").parse().expect("det_lr");
    let separation: f64 = arg(2, "6").parse().expect("separation");
    let aggregation = match arg(3, "frcnn").as_str() {
        "retina" => Aggregation::Retina,
        _ => Aggregation::Frcnn,
    };
    let h: f64 = arg(4, "1").parse().expect("h");
    let kg = KnowledgeGraph::monumai();

    let start = Instant::now();
    let data = generate_dataset::<f64>(&kg, &GeneratorConfig::default(), 1000)?;
    let splits = Splits::from_dataset(data);
    let run = train_standard(&kg, &splits, &TrainConfig::default())?;
    println!("E1 clean: {:?} ({:.1?})", run.metrics, start.elapsed());

    let (mut wins, mut std_sum, mut sb_sum) = (0, 0.0, 0.0);
    for seed in 0..5u64 {
        let start = Instant::now();
        let gen = GeneratorConfig {
            seed: 100 + seed,
            noise_rate: 0.2,
            separation,
            ..GeneratorConfig::default()
        };
        let splits = Splits::from_dataset(generate_dataset::<f64>(&kg, &gen, 1000)?);
        let base = TrainConfig {
            seed,
            det_epochs,
            det_lr,
            aggregation,
            h,
            ..TrainConfig::default()
        };
        let standard = train_standard(&kg, &splits, &base)?;
        let backprop = train_shap_backprop(
            &kg,
            &splits,
            &TrainConfig {
                scheme: Some(WeightScheme::LinearInstance),
                ..base.clone()
            },
        )?;
        let (a, b) = (standard.metrics, backprop.metrics);
        wins += usize::from(b.mean_shap_ged < a.mean_shap_ged);
        std_sum += a.mean_shap_ged;
        sb_sum += b.mean_shap_ged;
        println!(
            "E2 seed {seed}: standard ged {:.3} acc {:.3} part {:.3} | backprop ged {:.3} acc {:.3} part {:.3} ({:.1?})",
            a.mean_shap_ged,
            a.accuracy,
            a.part_macro_accuracy,
            b.mean_shap_ged,
            b.accuracy,
            b.part_macro_accuracy,
            start.elapsed()
        );
        println!(
            "  alpha trace: {:?}",
            backprop
                .per_epoch
                .iter()
                .map(|t| (t.alpha_mean, t.alpha_max))
                .collect::<Vec<_>>()
        );
    }
    println!(
        "E2: {wins}/5 seeds lower, mean ged {:.3} -> {:.3} ({:.1}% reduction)",
        std_sum / 5.0,
        sb_sum / 5.0,
        100.0 * (1.0 - sb_sum / std_sum)
    );
    Ok(())
}
