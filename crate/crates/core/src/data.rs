//! Dataset ingestion, normalization, temporal splitting and the synthetic
//! multimodal generator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcodec::tokenize;

/// One aligned record: a numeric target and optional text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: i64,
    pub date: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Mean and population standard deviation. A constant (or empty) series
    /// gets `std = 1`.
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            log::warn!("normalization stats from an empty series; using mean 0, std 1");
            return Self { mean: 0.0, std: 1.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut std = var.sqrt();
        if std.is_nan() || std <= 1e-12 {
            log::warn!("degenerate series (std {std}); forcing std to 1");
            std = 1.0;
        }
        Self { mean, std }
    }

    pub fn from_observations(obs: &[Observation]) -> Self {
        let v: Vec<f64> = obs.iter().map(|o| o.value).collect();
        Self::from_values(&v)
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Denormalizes a variance (scale only).
    pub fn denormalize_var(&self, var: f64) -> f64 {
        var * self.std * self.std
    }
}

pub fn normalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    values.iter().map(|&v| stats.normalize(v)).collect()
}

pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    values.iter().map(|&v| stats.denormalize(v)).collect()
}

/// Reads one JSON object per line. Blank lines are skipped. `t` must be
/// strictly increasing within each series.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Observation>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(f))
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Observation>> {
    let mut out: Vec<Observation> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let obs: Observation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if !obs.value.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                message: "field `value` is not finite".into(),
            });
        }
        if let Some(prev) = out.last() {
            if prev.series == obs.series && obs.t <= prev.t {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("t not strictly increasing ({} after {})", obs.t, prev.t),
                });
            }
        }
        out.push(obs);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, obs: &[Observation]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for o in obs {
        let line = serde_json::to_string(o).expect("observation serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// First `⌊0.8 T⌋` train, next `⌊0.1 T⌋` validation, remainder test.
pub fn split_811<T>(series: &[T]) -> Result<(&[T], &[T], &[T])> {
    let n = series.len();
    if n < 10 {
        return Err(Error::config("data", format!("series of length {n} is too short to split (need >= 10)")));
    }
    let train = n * 8 / 10;
    let val = n / 10;
    Ok((&series[..train], &series[train..train + val], &series[train + val..]))
}

/// Model-ready view of a series: normalized values, tokenized text and
/// series-start flags.
#[derive(Clone, Debug, Default)]
pub struct Sequence {
    pub y: Vec<f32>,
    pub tokens: Vec<Option<Vec<usize>>>,
    pub reset: Vec<bool>,
}

impl Sequence {
    pub fn new(obs: &[Observation], stats: &NormStats) -> Self {
        let mut s = Sequence::default();
        for (i, o) in obs.iter().enumerate() {
            s.y.push(stats.normalize(o.value) as f32);
            s.tokens.push(o.text.as_deref().map(tokenize));
            s.reset.push(i == 0 || obs[i - 1].series != o.series);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> Sequence {
        let mut reset = self.reset[start..end].to_vec();
        if let Some(r) = reset.first_mut() {
            *r = true;
        }
        Sequence {
            y: self.y[start..end].to_vec(),
            tokens: self.tokens[start..end].to_vec(),
            reset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub steps: usize,
    pub period: usize,
    pub amplitude: f64,
    pub slope: f64,
    pub noise_lo: f64,
    pub noise_hi: f64,
    pub event_rate: f64,
    pub event_shift: f64,
    pub event_lead: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            period: 50,
            amplitude: 1.0,
            slope: 0.0,
            noise_lo: 0.1,
            noise_hi: 0.4,
            event_rate: 0.05,
            event_shift: 0.3,
            event_lead: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config("data", m.to_string()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.period < 2 {
            return bad("period must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            return bad("event rate must lie in [0, 1]");
        }
        let finite = [self.amplitude, self.slope, self.noise_lo, self.noise_hi, self.event_shift];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("synth parameters must be finite");
        }
        if self.noise_lo < 0.0 || self.noise_hi < 0.0 {
            return bad("noise levels must be >= 0");
        }
        Ok(())
    }

    pub fn is_high_noise(&self, t: usize) -> bool {
        2 * (t % self.period) >= self.period
    }

    pub fn phase(&self, t: usize) -> f64 {
        2.0 * std::f64::consts::PI * t as f64 / self.period as f64
    }
}

/// Ground truth kept next to a synthetic dataset for evaluation only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Label {
    pub t: i64,
    pub high_noise: bool,
    pub event_fired: bool,
    pub shift_active: bool,
}

const PHASE_WORDS: [[&str; 3]; 4] = [
    ["rising", "climbing", "building"],
    ["high", "elevated", "peaking"],
    ["falling", "easing", "dropping"],
    ["low", "subdued", "bottoming"],
];
const CALM_WORDS: [&str; 3] = ["calm", "steady", "quiet"];
const ROUGH_WORDS: [&str; 3] = ["volatile", "choppy", "erratic"];
const WARNINGS: [&str; 3] = [
    " Alert: a surge is expected.",
    " Warning: levels will jump soon.",
    " Notice: a sharp rise is coming.",
];

pub fn synth_date(t: usize) -> String {
    let base = NaiveDate::from_ymd_opt(2014, 1, 1).expect("valid base date");
    base.checked_add_days(Days::new(t as u64))
        .expect("date in range")
        .format("%Y-%m-%d")
        .to_string()
}

/// `y_t = A sin(2πt/P) + slope·t + shift_t + ε_t`. Noise is `σ_hi` in the
/// second half of each period. An event at `t` adds `δ` to `t+1..=t+k` and
/// is announced only in the text at `t`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Vec<Observation>, Vec<Label>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut fired = vec![false; cfg.steps];
    let mut obs = Vec::with_capacity(cfg.steps);
    let mut labels = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        fired[t] = rng.random::<f64>() < cfg.event_rate;
        let active = (t.saturating_sub(cfg.event_lead)..t).filter(|&s| fired[s]).count();
        let high = cfg.is_high_noise(t);
        let sigma = if high { cfg.noise_hi } else { cfg.noise_lo };
        let noise = sigma * std_normal.sample(&mut rng);
        let value = cfg.amplitude * cfg.phase(t).sin() + cfg.slope * t as f64 + cfg.event_shift * active as f64 + noise;

        let quarter = (4 * (t % cfg.period) / cfg.period).min(3);
        let phase_word = PHASE_WORDS[quarter][rng.random_range(0..3)];
        let mood = if high { ROUGH_WORDS } else { CALM_WORDS }[rng.random_range(0..3)];
        let date = synth_date(t);
        let mut text = format!("DATE={date} {mood} and {phase_word}.");
        if fired[t] {
            text.push_str(WARNINGS[rng.random_range(0..3)]);
        }
        obs.push(Observation {
            t: t as i64,
            date,
            value,
            text: Some(text),
            series: None,
        });
        labels.push(Label {
            t: t as i64,
            high_noise: high,
            event_fired: fired[t],
            shift_active: active > 0,
        });
    }
    Ok((obs, labels))
}

pub fn is_forewarning(text: &str) -> bool {
    WARNINGS.iter().any(|w| text.contains(w.trim()))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[Label]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "t,regime,event_fired,shift_active").map_err(io)?;
    for l in labels {
        writeln!(
            w,
            "{},{},{},{}",
            l.t,
            if l.high_noise { "high" } else { "low" },
            u8::from(l.event_fired),
            u8::from(l.shift_active)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<Label>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let err = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 4 {
            return Err(err("expected 4 columns"));
        }
        out.push(Label {
            t: f[0].parse().map_err(|_| err("bad t"))?,
            high_noise: match f[1] {
                "high" => true,
                "low" => false,
                _ => return Err(err("bad regime")),
            },
            event_fired: f[2] == "1",
            shift_active: f[3] == "1",
        });
    }
    Ok(out)
}
