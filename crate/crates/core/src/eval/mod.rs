//! Rolling-origin evaluation, interval coverage, latent PCA and the exact
//! linear-Gaussian oracle.

mod kalman;
mod pca;

pub use kalman::{exact_posterior_conditionals, kalman_filter_oracle, scalar_elbo, KalmanResult, LgssmParams, ScalarConditional};
pub use pca::{pca_latents, pearson, Pca};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, Sequence};
use crate::diffcore::ParamRegistry;
use crate::error::{Error, Result};
use crate::forecast::{filter_trajectory, rollout, ForecastResult};
use crate::ssm::LbsModel;

/// Inclusive (type 7) empirical quantile of an ascending-sorted slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fraction of targets inside the central `nominal` interval of their
/// sample set.
pub fn interval_coverage(samples: &[Vec<f64>], targets: &[f64], nominal: f64) -> Result<f64> {
    if samples.len() != targets.len() {
        return Err(Error::config("eval", "one sample set per target required"));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let lo_p = (1.0 - nominal) / 2.0;
    let mut inside = 0usize;
    for (s, &y) in samples.iter().zip(targets) {
        if s.len() < 4 {
            return Err(Error::config("eval", format!("interval coverage needs at least 4 samples, got {}", s.len())));
        }
        let mut s = s.clone();
        s.sort_by(f64::total_cmp);
        if y >= quantile(&s, lo_p) && y <= quantile(&s, 1.0 - lo_p) {
            inside += 1;
        }
    }
    Ok(inside as f64 / targets.len() as f64)
}

/// Forecasts issued at one origin.
#[derive(Clone, Debug)]
pub struct OriginForecast {
    pub origin: usize,
    pub forecast: ForecastResult,
}

/// Filters `seq` once and rolls out `max_h` steps from every origin in
/// `[test_start, len - 1)`.
#[allow(clippy::too_many_arguments)]
pub fn rolling_forecasts(
    model: &LbsModel,
    reg: &ParamRegistry<f32>,
    seq: &Sequence,
    test_start: usize,
    max_h: usize,
    n_samples: usize,
    seed: u64,
    stats: &NormStats,
    use_text: bool,
) -> Result<Vec<OriginForecast>> {
    let states = filter_trajectory(model, reg, seq, use_text)?;
    let mut out = Vec::new();
    for origin in test_start..seq.len().saturating_sub(1) {
        let h = max_h.min(seq.len() - 1 - origin);
        let forecast = rollout(model, reg, &states[origin], h, n_samples, seed.wrapping_add(origin as u64), stats)?;
        out.push(OriginForecast { origin, forecast });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub count: usize,
    pub rmse: f64,
    pub coverage_80: Option<f64>,
    pub coverage_95: Option<f64>,
    pub mean_log_lik: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizons: Vec<HorizonMetrics>,
}

impl EvalReport {
    pub fn rmse(&self) -> Vec<f64> {
        self.horizons.iter().map(|h| h.rmse).collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        writeln!(w, "horizon,count,rmse,coverage_80,coverage_95,mean_log_lik")?;
        for h in &self.horizons {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                h.horizon,
                h.count,
                h.rmse,
                opt(h.coverage_80),
                opt(h.coverage_95),
                h.mean_log_lik
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-horizon RMSE, coverage and predictive log-likelihood on the original
/// scale. `raw_targets[t]` is the unnormalized value at index `t`. The
/// log-likelihood uses the model's predictive mixture: the sampled emissions
/// each carry the fixed unit emission variance of the normalized scale.
pub fn report_from_forecasts(forecasts: &[OriginForecast], raw_targets: &[f64], horizons: &[usize], stats: &NormStats) -> Result<EvalReport> {
    let mut out = Vec::new();
    for &h in horizons {
        let mut se = 0.0;
        let mut ll = 0.0;
        let mut samples = Vec::new();
        let mut targets = Vec::new();
        for f in forecasts {
            let Some(hf) = f.forecast.horizons.get(h - 1) else { continue };
            let y = raw_targets[f.origin + h];
            se += (hf.mean - y).powi(2);
            let var = stats.denormalize_var(1.0);
            let comps: Vec<f64> = hf
                .samples
                .iter()
                .map(|s| -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - s).powi(2) / var))
                .collect();
            let mx = comps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ll += mx + (comps.iter().map(|c| (c - mx).exp()).sum::<f64>() / comps.len() as f64).ln();
            samples.push(hf.samples.clone());
            targets.push(y);
        }
        let count = targets.len();
        if count == 0 {
            log::warn!("horizon {h} exceeds the test segment; skipped");
            continue;
        }
        let enough = samples.iter().all(|s| s.len() >= 4);
        out.push(HorizonMetrics {
            horizon: h,
            count,
            rmse: (se / count as f64).sqrt(),
            coverage_80: if enough { Some(interval_coverage(&samples, &targets, 0.8)?) } else { None },
            coverage_95: if enough { Some(interval_coverage(&samples, &targets, 0.95)?) } else { None },
            mean_log_lik: ll / count as f64,
        });
    }
    Ok(EvalReport { horizons: out })
}

/// Rolling-origin evaluation over the test segment starting at `test_start`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &LbsModel,
    reg: &ParamRegistry<f32>,
    seq: &Sequence,
    raw_targets: &[f64],
    test_start: usize,
    horizons: &[usize],
    n_samples: usize,
    seed: u64,
    stats: &NormStats,
    use_text: bool,
) -> Result<EvalReport> {
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::config("eval", "horizons must be >= 1"));
    }
    let max_h = *horizons.iter().max().unwrap();
    let test_len = seq.len().saturating_sub(test_start);
    if max_h >= test_len {
        log::warn!("max horizon {max_h} exceeds test length {test_len}; truncating");
    }
    let fc = rolling_forecasts(model, reg, seq, test_start, max_h, n_samples, seed, stats, use_text)?;
    report_from_forecasts(&fc, raw_targets, horizons, stats)
}

/// RMSE for horizons `1..=h_max`.
#[allow(clippy::too_many_arguments)]
pub fn rmse_per_horizon(
    model: &LbsModel,
    reg: &ParamRegistry<f32>,
    seq: &Sequence,
    raw_targets: &[f64],
    test_start: usize,
    h_max: usize,
    n_samples: usize,
    seed: u64,
    stats: &NormStats,
    use_text: bool,
) -> Result<Vec<f64>> {
    let hs: Vec<usize> = (1..=h_max).collect();
    Ok(evaluate(model, reg, seq, raw_targets, test_start, &hs, n_samples, seed, stats, use_text)?.rmse())
}
