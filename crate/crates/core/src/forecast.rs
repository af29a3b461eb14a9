//! Open-loop forecasting from a filtered state with Monte-Carlo samples from
//! the prior, plus optional text forecasts.

use std::io::Write;

use chrono::{Days, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, Sequence};
use crate::diffcore::{ParamRegistry, Tape};
use crate::error::Result;
use crate::ssm::{reparam_sample, LbsModel, StatePair, StepInput};
use crate::training::standard_normal;

/// Runs the filter over `seq` and returns the state after every step.
/// States reset to zero at series boundaries.
pub fn filter_trajectory(model: &LbsModel, reg: &ParamRegistry<f32>, seq: &Sequence, use_text: bool) -> Result<Vec<StatePair>> {
    let mut out = Vec::with_capacity(seq.len());
    let mut state = model.zero_state();
    for i in 0..seq.len() {
        if seq.reset[i] {
            state = model.zero_state();
        }
        let obs = StepInput {
            y: std::slice::from_ref(&seq.y[i]),
            tokens: seq.tokens[i].as_deref(),
        };
        state = model.filter_step(reg, &state, obs, use_text)?.0;
        out.push(state.clone());
    }
    Ok(out)
}

/// Final filtered state; an empty history gives the zero state.
pub fn filter(model: &LbsModel, reg: &ParamRegistry<f32>, seq: &Sequence, use_text: bool) -> Result<StatePair> {
    Ok(filter_trajectory(model, reg, seq, use_text)?
        .pop()
        .unwrap_or_else(|| model.zero_state()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonForecast {
    pub horizon: usize,
    pub mean: f64,
    pub variance: f64,
    pub samples: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub horizons: Vec<HorizonForecast>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent random stream for one (sample, step) cell.
pub fn step_rng(seed: u64, sample: usize, step: usize) -> ChaCha8Rng {
    let k = splitmix(splitmix(splitmix(seed) ^ sample as u64) ^ step as u64);
    ChaCha8Rng::seed_from_u64(k)
}

/// Latent sample paths: `paths[s][h]` is `x̂` at step `h + 1` of sample `s`,
/// alongside the normalized emissions.
pub fn sample_paths(
    model: &LbsModel,
    reg: &ParamRegistry<f32>,
    start: &StatePair,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<Vec<Vec<f32>>>, Vec<Vec<f64>>)> {
    let n = model.cfg.latent_dim;
    let mut paths = Vec::with_capacity(n_samples);
    let mut emitted = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let mut state = start.clone();
        let mut xs = Vec::with_capacity(horizon);
        let mut ys = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let eps = standard_normal(&mut step_rng(seed, s, h), n);
            let mut tape = Tape::new();
            let (prior, hid) = model.prior_step(&mut tape, reg, &state)?;
            let x = reparam_sample(&mut tape, &prior, &eps)?;
            let y = model.emit(&mut tape, reg, x)?;
            ys.push(tape.value(y).data()[0] as f64);
            state = StatePair {
                x_hat: tape.value(x).data().to_vec(),
                h: tape.value(hid).data().to_vec(),
            };
            xs.push(state.x_hat.clone());
        }
        paths.push(xs);
        emitted.push(ys);
    }
    Ok((paths, emitted))
}

/// Rolls the prior forward `horizon` steps for `n_samples` samples and
/// summarizes the denormalized emissions per horizon.
pub fn rollout(
    model: &LbsModel,
    reg: &ParamRegistry<f32>,
    start: &StatePair,
    horizon: usize,
    n_samples: usize,
    seed: u64,
    stats: &NormStats,
) -> Result<ForecastResult> {
    let (_, emitted) = sample_paths(model, reg, start, horizon, n_samples, seed)?;
    Ok(summarize(&emitted, horizon, stats))
}

fn summarize(emitted: &[Vec<f64>], horizon: usize, stats: &NormStats) -> ForecastResult {
    let horizons = (0..horizon)
        .map(|h| {
            let samples: Vec<f64> = emitted.iter().map(|ys| stats.denormalize(ys[h])).collect();
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let variance = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            HorizonForecast {
                horizon: h + 1,
                mean,
                variance,
                samples,
                text: None,
            }
        })
        .collect();
    ForecastResult { horizons }
}

/// Date `days` after an ISO date, or `None` if `date` does not parse.
pub fn shift_date(date: &str, days: usize) -> Option<String> {
    let d = NaiveDate::parse_from_str(date, "%Y-%m-%d").ok()?;
    Some(d.checked_add_days(Days::new(days as u64))?.format("%Y-%m-%d").to_string())
}

/// Generated text for a latent state, prompted with `DATE=<date> `.
pub fn forecast_text(
    model: &LbsModel,
    reg: &ParamRegistry<f32>,
    state_sample: &[f32],
    date: &str,
    max_len: usize,
    temperature: f32,
    seed: u64,
) -> Result<String> {
    let prompt: Vec<usize> = format!("DATE={date} ").bytes().map(usize::from).collect();
    let ids = model.text.generate(reg, state_sample, &prompt, max_len, temperature, seed)?;
    Ok(crate::textcodec::detokenize(&ids))
}

/// [`rollout`] plus one generated text per horizon from sample 0's path.
#[allow(clippy::too_many_arguments)]
pub fn rollout_with_text(
    model: &LbsModel,
    reg: &ParamRegistry<f32>,
    start: &StatePair,
    horizon: usize,
    n_samples: usize,
    seed: u64,
    stats: &NormStats,
    last_date: &str,
    max_len: usize,
    temperature: f32,
) -> Result<ForecastResult> {
    let (paths, emitted) = sample_paths(model, reg, start, horizon, n_samples, seed)?;
    let mut result = summarize(&emitted, horizon, stats);
    for (h, f) in result.horizons.iter_mut().enumerate() {
        let date = shift_date(last_date, h + 1).unwrap_or_else(|| format!("{last_date}+{}", h + 1));
        f.text = Some(forecast_text(model, reg, &paths[0][h], &date, max_len, temperature, seed.wrapping_add(h as u64))?);
    }
    Ok(result)
}

impl ForecastResult {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let n = self.horizons.first().map_or(0, |h| h.samples.len());
        let mut header = String::from("horizon,mean,variance");
        for i in 0..n {
            header.push_str(&format!(",sample_{i}"));
        }
        writeln!(w, "{header}")?;
        for h in &self.horizons {
            write!(w, "{},{},{}", h.horizon, h.mean, h.variance)?;
            for s in &h.samples {
                write!(w, ",{s}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("forecast serializes")
    }

    /// One JSON object per horizon with its generated text.
    pub fn write_text_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for h in &self.horizons {
            if let Some(t) = &h.text {
                let line = serde_json::json!({ "horizon": h.horizon, "text": t });
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }
}
