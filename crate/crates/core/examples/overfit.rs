//! Memorization run on a zero-noise synthetic graph.
//!
//! `cargo run --release -p hynt --example overfit -- [epochs] [dim] [lr] [dropout] [f32]`

use std::time::Instant;

use hynt::eval::{evaluate, EvalOptions, FilterIndex};
use hynt::ingest::{compute_normalization, generate_synthetic, normalize_dataset, SyntheticSpec};
use hynt::model::HyntConfig;
use hynt::training::{train, TrainOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let epochs = arg(1, 200.0) as usize;
    let dim = arg(2, 64.0) as usize;
    let lr = arg(3, 1e-3);
    let dropout = arg(4, 0.1);
    let single = args.get(5).is_some_and(|s| s == "f32");

    let spec = SyntheticSpec {
        split: [1.0, 0.0, 0.0],
        ..Default::default()
    };
    let raw = generate_synthetic(&spec)?;
    let mut table = compute_normalization(&raw.train);
    let ds = normalize_dataset(&raw, &mut table)?;

    let mut config = HyntConfig::with_dim(dim);
    config.dropout = dropout;
    let options = TrainOptions {
        epochs,
        learning_rate: lr,
        validate_every: 0,
        ..Default::default()
    };
    let start = Instant::now();
    let filter = FilterIndex::build(ds.all_facts());
    let (losses, report) = if single {
        let out = train::<f32>(&ds, &table, &config, &options)?;
        let r = evaluate(&out.last, &ds.train, &filter, &table, &ds.vocab, EvalOptions::default())?;
        (out.epoch_losses, r)
    } else {
        let out = train::<f64>(&ds, &table, &config, &options)?;
        let r = evaluate(&out.last, &ds.train, &filter, &table, &ds.vocab, EvalOptions::default())?;
        (out.epoch_losses, r)
    };
    let elapsed = start.elapsed();
    let l = &losses;
    println!("loss {:.4} -> {:.4} in {:.1?}", l[0].total, l[l.len() - 1].total, elapsed);
    print!("{}", report.to_table(&[hynt::eval::Scope::Tri, hynt::eval::Scope::All]));
    Ok(())
}
