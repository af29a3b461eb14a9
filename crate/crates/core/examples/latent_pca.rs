//! Trains on a seasonal series, filters it, and projects the latent
//! trajectory onto its principal components.

use lbs::data::{split_811, synth_generate, NormStats, Sequence, SynthConfig};
use lbs::eval::{pca_latents, pearson};
use lbs::forecast::filter_trajectory;
use lbs::training::{fit, TrainConfig};

fn main() -> lbs::Result<()> {
    let synth = SynthConfig {
        steps: 1000,
        event_rate: 0.0,
        seed: 2,
        ..SynthConfig::default()
    };
    let (obs, _) = synth_generate(&synth)?;
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
    let result = fit(&seq.slice(0, train.len()), &seq.slice(train.len(), train.len() + val.len()), &cfg, stats, &mut |_| {})?;
    let ck = result.checkpoint;
    let states = filter_trajectory(&ck.model, &ck.registry, &seq, true)?;
    let points: Vec<Vec<f64>> = states.iter().map(|s| s.x_hat.iter().map(|&v| v as f64).collect()).collect();
    let pca = pca_latents(&points, 3)?;
    println!("explained variance ratio (3 components): {:.3}", pca.explained_ratio(3));
    let season: Vec<f64> = (0..points.len()).map(|t| synth.phase(t).sin()).collect();
    for k in 0..3 {
        let pc: Vec<f64> = pca.projections.iter().map(|p| p[k]).collect();
        println!("PC{} variance {:.4}  r(sin phase) = {:+.3}", k + 1, pca.variances[k], pearson(&pc, &season));
    }
    Ok(())
}
