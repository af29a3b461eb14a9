//! Trains the same architecture with and without text on the event dataset
//! and compares rolling-origin RMSE over the first three horizons.

use lbs::data::{split_811, synth_generate, NormStats, Sequence, SynthConfig};
use lbs::eval::rmse_per_horizon;
use lbs::training::{fit, TrainConfig};

fn main() -> lbs::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let (obs, _) = synth_generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    let raw: Vec<f64> = obs.iter().map(|o| o.value).collect();
    let (train, val, _) = split_811(&obs)?;
    let stats = NormStats::from_observations(train);
    let seq = Sequence::new(&obs, &stats);
    let test_start = train.len() + val.len();
    for unimodal in [true, false] {
        let cfg = TrainConfig {
            d_model: 32,
            ff: 64,
            layers: 1,
            summary_tokens: 4,
            prefix_tokens: 4,
            mlp_hidden: 32,
            lr_start: 3e-3,
            lr_end: 3e-4,
            alpha_text: 5.0,
            max_epochs: 20,
            patience: 20,
            seed,
            unimodal,
            ..TrainConfig::default()
        };
        let result = fit(&seq.slice(0, train.len()), &seq.slice(train.len(), test_start), &cfg, stats, &mut |_| {})?;
        let ck = result.checkpoint;
        let rmse = rmse_per_horizon(&ck.model, &ck.registry, &seq, &raw, test_start, 3, 50, 7, &stats, !unimodal)?;
        println!("{:<10} RMSE h=1..3 {rmse:.4?}", if unimodal { "unimodal" } else { "multimodal" });
    }
    Ok(())
}
