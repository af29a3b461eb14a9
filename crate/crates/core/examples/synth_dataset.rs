//! Generates the synthetic multimodal series and writes it as JSONL plus a
//! ground-truth label file.

use lbs::data::{load_jsonl, synth_generate, write_jsonl, write_labels, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig {
        steps: 200,
        seed: 3,
        event_rate: 0.1,
        ..SynthConfig::default()
    };
    let (obs, labels) = synth_generate(&cfg)?;
    let dir = std::env::temp_dir().join("lbs-synth-example");
    std::fs::create_dir_all(&dir)?;
    let data = dir.join("synth.jsonl");
    write_jsonl(&data, &obs)?;
    write_labels(dir.join("synth.labels.csv"), &labels)?;

    let back = load_jsonl(&data)?;
    assert_eq!(back.len(), obs.len());
    let events = labels.iter().filter(|l| l.event_fired).count();
    let high = labels.iter().filter(|l| l.high_noise).count();
    println!("wrote {} rows to {}", obs.len(), data.display());
    println!("events: {events}, high-noise steps: {high}");
    for o in obs.iter().filter(|o| o.text.as_deref().is_some_and(lbs::data::is_forewarning)).take(3) {
        println!("t={:<4} value={:>7.3}  {}", o.t, o.value, o.text.as_deref().unwrap_or(""));
    }
    Ok(())
}
