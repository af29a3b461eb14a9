//! Trains a small model on synthetic data, saves a checkpoint, reloads it
//! and forecasts seven steps ahead with Monte-Carlo uncertainty.

use lbs::data::{split_811, synth_generate, NormStats, Sequence, SynthConfig};
use lbs::forecast::{filter, rollout_with_text};
use lbs::training::{fit, load_checkpoint, EpochLog, TrainConfig};

fn main() -> lbs::Result<()> {
    let (obs, _) = synth_generate(&SynthConfig {
        steps: 600,
        seed: 1,
        ..SynthConfig::default()
    })?;
    let (train, val, _) = split_811(&obs)?;
    let stats = NormStats::from_observations(train);
    let seq = Sequence::new(&obs, &stats);
    let cfg = TrainConfig {
        d_model: 32,
        ff: 64,
        layers: 1,
        summary_tokens: 4,
        prefix_tokens: 4,
        mlp_hidden: 32,
        lr_start: 3e-3,
        lr_end: 3e-4,
        max_epochs: 4,
        ..TrainConfig::default()
    };
    println!("{}", EpochLog::TSV_HEADER);
    let result = fit(
        &seq.slice(0, train.len()),
        &seq.slice(train.len(), train.len() + val.len()),
        &cfg,
        stats,
        &mut |log| println!("{}", log.tsv()),
    )?;

    let path = std::env::temp_dir().join("lbs-example.ckpt");
    result.checkpoint.save(&path)?;
    let ck = load_checkpoint(&path)?;
    let state = filter(&ck.model, &ck.registry, &seq, true)?;
    let last_date = &obs.last().expect("non-empty series").date;
    let fc = rollout_with_text(&ck.model, &ck.registry, &state, 7, 20, 0, &stats, last_date, 80, 0.0)?;
    println!("\nhorizon\tmean\tstd\ttext");
    for h in &fc.horizons {
        println!("{}\t{:.3}\t{:.3}\t{}", h.horizon, h.mean, h.variance.sqrt(), h.text.as_deref().unwrap_or(""));
    }
    Ok(())
}
