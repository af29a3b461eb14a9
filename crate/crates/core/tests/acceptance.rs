//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. `ACCEPTANCE_ONLY=1,5` restricts the run.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lbs::data::{split_811, synth_date, synth_generate, NormStats, Observation, Sequence, SynthConfig};
use lbs::diffcore::{ParamRegistry, Tape, Tensor};
use lbs::eval::{
    exact_posterior_conditionals, interval_coverage, kalman_filter_oracle, pca_latents, pearson, report_from_forecasts,
    rmse_per_horizon, rolling_forecasts, scalar_elbo, LgssmParams, OriginForecast, ScalarConditional,
};
use lbs::forecast::{filter_trajectory, rollout};
use lbs::nn::init_params;
use lbs::ssm::{kl_diag_gaussian, DiagGaussian, LbsModel, LossWeights, StatePair, StepInput};
use lbs::textcodec::{tokenize, TextConfig, TextModel};
use lbs::training::{
    adamw_update, decode_checkpoint, encode_checkpoint, fit, load_checkpoint, AdamWConfig, FitResult, OptimizerState,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit_secs: u64, started: Instant, o: Outcome) -> Outcome {
    let took = started.elapsed();
    if took > Duration::from_secs(limit_secs) {
        return outcome(false, format!("{}; exceeded {limit_secs}s budget", o.detail));
    }
    o
}

fn train_split(obs: &[Observation], cfg: &TrainConfig) -> (FitResult, Sequence, NormStats, usize) {
    let (train, val, _) = split_811(obs).unwrap();
    let stats = NormStats::from_observations(train);
    let seq = Sequence::new(obs, &stats);
    let fit = fit(
        &seq.slice(0, train.len()),
        &seq.slice(train.len(), train.len() + val.len()),
        cfg,
        stats,
        &mut |_| {},
    )
    .unwrap();
    (fit, seq, stats, train.len() + val.len())
}

fn c1_gradients() -> Outcome {
    let results = common::grad_suite::run(20);
    let worst = results.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| r.worst.is_nan() || r.worst > common::REL_TOL)
        .map(|r| r.name)
        .collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} cases x 20 instances, worst rel err {:.2e} ({}){}",
            results.len(),
            worst.worst,
            worst.name,
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    )
}

fn c2_kl_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 3;
    let draws = 1_000_000;
    let mut worst = 0.0f64;
    let mut worst_self = 0.0f64;
    for _ in 0..50 {
        let mut v = |lo: f64, hi: f64| (0..dim).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (qm, ql, pm, pl) = (v(-1.0, 1.0), v(-1.0, 1.0), v(-1.0, 1.0), v(-1.0, 1.0));
        let mut tape = Tape::<f64>::new();
        let q = DiagGaussian::constant(&mut tape, qm.clone(), ql.clone()).unwrap();
        let p = DiagGaussian::constant(&mut tape, pm.clone(), pl.clone()).unwrap();
        let kl = kl_diag_gaussian(&mut tape, &q, &p).unwrap();
        let self_kl = kl_diag_gaussian(&mut tape, &p, &p).unwrap();
        worst_self = worst_self.max(tape.scalar(self_kl).abs());

        // antithetic pairs (z, -z)
        let log_ratio = |z: &[f64]| {
            (0..dim)
                .map(|d| {
                    let x = qm[d] + (0.5 * ql[d]).exp() * z[d];
                    let lq = -0.5 * (ql[d] + z[d] * z[d]);
                    let lp = -0.5 * (pl[d] + (x - pm[d]).powi(2) / pl[d].exp());
                    lq - lp
                })
                .sum::<f64>()
        };
        let mut sum = 0.0;
        for _ in 0..draws / 2 {
            let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            sum += log_ratio(&z) + log_ratio(&neg);
        }
        worst = worst.max((sum / draws as f64 - tape.scalar(kl)).abs());
    }
    outcome(
        worst <= 1e-2 && worst_self <= 1e-7,
        format!("50 pairs, 1e6 draws each: max |closed - MC| = {worst:.2e}; max |KL(p||p)| = {worst_self:.1e}"),
    )
}

/// Monte-Carlo estimate of the autoregressive ELBO for a scalar chain `q`.
fn mc_elbo(p: &LgssmParams, ys: &[f64], q: &[ScalarConditional], draws: usize, seed: u64) -> (f64, f64) {
    let (a, qv, c, r, p0) = (p.a[0][0], p.q[0], p.c[0][0], p.r[0], p.p0[0][0]);
    let ln = |x: f64, m: f64, v: f64| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z: f64 = StandardNormal.sample(&mut rng);
        let mut x = q[0].offset + q[0].var.sqrt() * z;
        let mut w = ln(x, p.m0[0], p0) - ln(x, q[0].offset, q[0].var);
        for (t, &y) in ys.iter().enumerate() {
            let qc = q[t + 1];
            let mean = qc.gain * x + qc.offset;
            let z: f64 = StandardNormal.sample(&mut rng);
            let nx = mean + qc.var.sqrt() * z;
            w += ln(nx, a * x, qv) - ln(nx, mean, qc.var) + ln(y, c * nx, r);
            x = nx;
        }
        vals.push(w);
    }
    let m = vals.iter().sum::<f64>() / draws as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
    (m, (var / draws as f64).sqrt())
}

fn c3_elbo_bound() -> Outcome {
    let p = LgssmParams::scalar(0.9, 0.3, 1.0, 0.5, 1.0);
    let (_, ys) = p.sample(200, 3);
    let ys: Vec<f64> = ys.into_iter().map(|v| v[0]).collect();
    let yv: Vec<Vec<f64>> = ys.iter().map(|v| vec![*v]).collect();
    let ll = kalman_filter_oracle(&p, &yv).unwrap().log_likelihood;
    let exact = exact_posterior_conditionals(&p, &ys).unwrap();
    let tight = scalar_elbo(&p, &ys, &exact).unwrap();
    let gap = (tight - ll).abs();

    let perturb = |f: &dyn Fn(&mut ScalarConditional), at: Option<usize>| {
        let mut q = exact.clone();
        for (t, c) in q.iter_mut().enumerate() {
            if at.is_none_or(|a| a == t) {
                f(c);
            }
        }
        q
    };
    let shift = |c: &mut ScalarConditional| c.offset += 0.5;
    let widen = |c: &mut ScalarConditional| c.var *= 0.5f64.exp();
    let mut variants = vec![perturb(&shift, None), perturb(&widen, None)];
    for t in [0, 1, 57, 200] {
        variants.push(perturb(&shift, Some(t)));
        variants.push(perturb(&widen, Some(t)));
    }
    let elbos: Vec<f64> = variants.iter().map(|q| scalar_elbo(&p, &ys, q).unwrap()).collect();
    let all_lower = elbos.iter().all(|&e| e < tight);
    let min_drop = elbos.iter().map(|e| tight - e).fold(f64::INFINITY, f64::min);

    // the closed form agrees with sampling on a perturbed chain
    let (mc, se) = mc_elbo(&p, &ys, &variants[1], 20_000, 9);
    let closed = elbos[1];
    let mc_ok = (mc - closed).abs() <= 4.0 * se;
    outcome(
        gap <= 1e-3 && all_lower && mc_ok,
        format!(
            "T=200: |ELBO(exact q) - log p(y)| = {gap:.1e}; {} perturbations all lower (min drop {min_drop:.3e}); MC check {mc:.3} vs {closed:.3} (se {se:.3})",
            elbos.len()
        ),
    )
}

fn values_to_obs(values: &[f64]) -> Vec<Observation> {
    values
        .iter()
        .enumerate()
        .map(|(t, &value)| Observation {
            t: t as i64,
            date: synth_date(t),
            value,
            text: None,
            series: None,
        })
        .collect()
}

fn c4_filtering_recovery() -> Outcome {
    let p = LgssmParams::scalar(0.9, 0.3, 1.0, 0.5, 1.0);
    let (_, ys) = p.sample(1500, 4);
    let ys: Vec<f64> = ys.into_iter().map(|v| v[0]).collect();
    let obs = values_to_obs(&ys);
    let (n_train, n_val, test_start) = (400, 100, 500);
    let stats = NormStats::from_observations(&obs[..n_train]);
    let seq = Sequence::new(&obs, &stats);
    let cfg = TrainConfig {
        latent_dim: 2,
        linear_heads: true,
        unimodal: true,
        hidden_dim: 16,
        lr_start: 1e-2,
        lr_end: 1e-3,
        alpha_val: 2.0,
        max_epochs: 5,
        patience: 5,
        seed: 1,
        ..common::small_train()
    };
    let fit = fit(&seq.slice(0, n_train), &seq.slice(n_train, n_train + n_val), &cfg, stats, &mut |_| {}).unwrap();
    let updates = fit.logs.len() * n_train;
    let ck = fit.checkpoint;
    let fc = rolling_forecasts(&ck.model, &ck.registry, &seq, test_start, 1, 100, 4, &stats, false).unwrap();
    let yv: Vec<Vec<f64>> = ys.iter().map(|v| vec![*v]).collect();
    let kf = kalman_filter_oracle(&p, &yv).unwrap();
    let (mut se_model, mut se_kalman) = (0.0, 0.0);
    for f in &fc {
        let y = ys[f.origin + 1];
        se_model += (f.forecast.horizons[0].mean - y).powi(2);
        se_kalman += (kf.pred_means[f.origin + 1][0] - y).powi(2);
    }
    let rmse_model = (se_model / fc.len() as f64).sqrt();
    let rmse_kalman = (se_kalman / fc.len() as f64).sqrt();
    let ratio = rmse_model / rmse_kalman;
    outcome(
        updates <= 2000 && ratio <= 1.10,
        format!(
            "{updates} updates; held-out one-step RMSE {rmse_model:.4} vs Kalman {rmse_kalman:.4} (ratio {ratio:.3}) over {} origins",
            fc.len()
        ),
    )
}

/// Configuration shared by the synthetic-data criteria.
fn synth_train(seed: u64, unimodal: bool) -> TrainConfig {
    TrainConfig {
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
    }
}

fn c5_multimodal_gain() -> Outcome {
    let mut lines = Vec::new();
    let mut all_lower = true;
    let mut gains = Vec::new();
    for seed in [0, 1, 2] {
        let (obs, _) = synth_generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let raw: Vec<f64> = obs.iter().map(|o| o.value).collect();
        let rmse = |unimodal: bool| {
            let (fit, seq, stats, test_start) = train_split(&obs, &synth_train(seed, unimodal));
            let ck = fit.checkpoint;
            rmse_per_horizon(&ck.model, &ck.registry, &seq, &raw, test_start, 3, 50, 7, &stats, !unimodal).unwrap()
        };
        let multi = rmse(false);
        let uni = rmse(true);
        all_lower &= multi.iter().zip(&uni).all(|(m, u)| m < u);
        let gain = multi.iter().zip(&uni).map(|(m, u)| (u - m) / u).sum::<f64>() / 3.0;
        gains.push(gain);
        lines.push(format!(
            "seed {seed}: multi [{}] uni [{}]",
            multi.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "),
            uni.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ));
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    outcome(
        all_lower && mean_gain >= 0.02,
        format!(
            "{}; multimodal lower at every horizon and seed = {all_lower}; mean relative improvement {:.2}%",
            lines.join("; "),
            100.0 * mean_gain
        ),
    )
}

struct Seasonal {
    synth: SynthConfig,
    raw: Vec<f64>,
    stats: NormStats,
    forecasts: Vec<OriginForecast>,
    states: Vec<StatePair>,
    train_secs: f64,
}

fn seasonal() -> &'static Seasonal {
    static CELL: OnceLock<Seasonal> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let synth = SynthConfig {
            event_rate: 0.0,
            seed: 6,
            ..SynthConfig::default()
        };
        let (obs, _) = synth_generate(&synth).unwrap();
        let (fit, seq, stats, test_start) = train_split(&obs, &synth_train(6, false));
        let ck = fit.checkpoint;
        let forecasts = rolling_forecasts(&ck.model, &ck.registry, &seq, test_start, 7, 50, 8, &stats, true).unwrap();
        let states = filter_trajectory(&ck.model, &ck.registry, &seq, true).unwrap();
        Seasonal {
            synth,
            raw: obs.iter().map(|o| o.value).collect(),
            stats,
            forecasts,
            states,
            train_secs: started.elapsed().as_secs_f64(),
        }
    })
}

fn c6_variable_horizon() -> Outcome {
    let s = seasonal();
    let hs: Vec<usize> = (1..=7).collect();
    let report = report_from_forecasts(&s.forecasts, &s.raw, &hs, &s.stats).unwrap();
    let rmse = report.rmse();
    let finite = rmse.len() == 7 && rmse.iter().all(|v| v.is_finite());
    outcome(
        finite && rmse[6] >= rmse[0] - 0.05,
        format!(
            "one checkpoint (trained in {:.0}s), RMSE h=1..7 [{}]",
            s.train_secs,
            rmse.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn c7_uncertainty() -> Outcome {
    let s = seasonal();
    let (mut hi, mut n_hi, mut lo, mut n_lo) = (0.0, 0, 0.0, 0);
    let mut samples = Vec::new();
    let mut targets = Vec::new();
    for f in &s.forecasts {
        let h1 = &f.forecast.horizons[0];
        if s.synth.is_high_noise(f.origin + 1) {
            hi += h1.variance;
            n_hi += 1;
        } else {
            lo += h1.variance;
            n_lo += 1;
        }
        samples.push(h1.samples.clone());
        targets.push(s.raw[f.origin + 1]);
    }
    let (hi, lo) = (hi / n_hi as f64, lo / n_lo as f64);
    let coverage = interval_coverage(&samples, &targets, 0.8).unwrap();
    outcome(
        hi >= 1.2 * lo && (0.6..=0.95).contains(&coverage),
        format!(
            "one-step variance high {hi:.4} vs low {lo:.4} (ratio {:.2}); 80% coverage {coverage:.3} over {} origins",
            hi / lo,
            targets.len()
        ),
    )
}

fn c8_latent_seasonality() -> Outcome {
    let s = seasonal();
    let points: Vec<Vec<f64>> = s.states.iter().map(|st| st.x_hat.iter().map(|&v| v as f64).collect()).collect();
    let pca = pca_latents(&points, 1).unwrap();
    let pc1: Vec<f64> = pca.projections.iter().map(|p| p[0]).collect();
    let season: Vec<f64> = (0..pc1.len()).map(|t| s.synth.phase(t).sin()).collect();
    let r = pearson(&pc1, &season);
    outcome(
        r.abs() >= 0.5,
        format!(
            "Pearson(PC1, sin phase) = {r:.3} over {} filtered states; PC1 explains {:.1}%",
            pc1.len(),
            100.0 * pca.explained_ratio(1)
        ),
    )
}

fn c9_free_nats_gate() -> Outcome {
    let cfg = common::tiny_model(false);
    let mut reg = ParamRegistry::<f32>::new();
    let model = LbsModel::declare(&mut reg, &cfg);
    init_params(&mut reg, 5);
    let last = model.posterior.layers().last().cloned().unwrap();
    let n = cfg.latent_dim;
    let kl_grads = |reg: &ParamRegistry<f32>| {
        let prev = StatePair {
            x_hat: vec![0.3, -0.2, 0.1],
            h: vec![0.1, 0.0, -0.1, 0.2],
        };
        let tokens = tokenize("calm and rising.");
        let obs = StepInput {
            y: &[0.4f32],
            tokens: Some(&tokens),
        };
        let weights = LossWeights {
            free_nats: 2.5,
            ..LossWeights::default()
        };
        let mut tape = Tape::new();
        let g = model.step(&mut tape, reg, &prev, obs, &[0.5, -0.3, 1.0], &weights, true).unwrap();
        let kl = g.losses(&tape).l_kl_raw;
        tape.backward(g.l_kl_clamped).unwrap();
        let mut r = reg.clone();
        r.zero_grads();
        tape.accumulate_param_grads(&mut r);
        let posterior: Vec<f32> = r
            .ids()
            .filter(|&id| r.param(id).name.starts_with("ssm.posterior"))
            .flat_map(|id| r.grad(id).data().to_vec())
            .collect();
        (kl, posterior)
    };
    // posterior equal to the prior up to a small mean offset
    let mut small = reg.clone();
    for id in [model.prior_mean.w, model.prior_mean.b, model.prior_log_var.w, model.prior_log_var.b, last.w, last.b] {
        small.value_mut(id).fill(0.0);
    }
    small.value_mut(last.b).data_mut()[0] = 0.5;
    let (kl_small, g_small) = kl_grads(&small);
    let mut large = small.clone();
    large.value_mut(last.b).data_mut()[..n].fill(3.0);
    let (kl_large, g_large) = kl_grads(&large);
    let zero = g_small.iter().all(|&g| g == 0.0);
    let nonzero = g_large.iter().filter(|&&g| g != 0.0).count();
    outcome(
        kl_small < 2.5 && zero && kl_large > 2.5 && nonzero > 0,
        format!(
            "KL={kl_small:.3}: all {} posterior grads exactly zero = {zero}; KL={kl_large:.3}: {nonzero} nonzero",
            g_small.len()
        ),
    )
}

fn c10_determinism() -> Outcome {
    let synth = SynthConfig {
        steps: 300,
        seed: 10,
        ..SynthConfig::default()
    };
    let (obs, _) = synth_generate(&synth).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        ..common::small_train()
    };
    let (a, seq, stats, _) = train_split(&obs, &cfg);
    let (b, _, _, _) = train_split(&obs, &cfg);
    let bits = |f: &FitResult| {
        f.logs
            .iter()
            .flat_map(|l| {
                [l.lr, l.free_nats, l.train_loss, l.train_val, l.train_text, l.train_kl, l.val_loss].map(f64::to_bits)
            })
            .collect::<Vec<_>>()
    };
    let logs_equal = bits(&a) == bits(&b) && a.logs.len() == cfg.max_epochs;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.checkpoint.save(&path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let outputs = |model: &LbsModel, reg: &ParamRegistry<f32>| {
        let states = filter_trajectory(model, reg, &seq, true).unwrap();
        let fc = rollout(model, reg, states.last().unwrap(), 5, 6, 3, &stats).unwrap();
        let mut v: Vec<u64> = states
            .iter()
            .flat_map(|s| s.x_hat.iter().chain(&s.h).map(|x| x.to_bits() as u64))
            .collect();
        v.extend(fc.horizons.iter().flat_map(|h| h.samples.iter().map(|s| s.to_bits())));
        v
    };
    let forward_equal = outputs(&a.checkpoint.model, &a.checkpoint.registry) == outputs(&back.model, &back.registry);

    let bytes = encode_checkpoint(&a.checkpoint.registry, &a.checkpoint.meta);
    let mut detected = 0;
    let probes = [20, bytes.len() / 2, bytes.len() - 10, bytes.len() - 1];
    for &i in &probes {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        detected += usize::from(decode_checkpoint(&bad).is_err());
    }
    outcome(
        logs_equal && forward_equal && detected == probes.len(),
        format!(
            "per-epoch losses bitwise equal = {logs_equal}; reloaded forward bitwise equal = {forward_equal}; corruption detected {detected}/{}",
            probes.len()
        ),
    )
}

fn c11_text_path() -> Outcome {
    let sentence = "DATE=2014-02-11 calm and rising. Alert: a surge is expected.";
    let tokens = tokenize(sentence);
    let latent = 16;
    let mut reg = ParamRegistry::<f32>::new();
    let tm = TextModel::declare(&mut reg, &TextConfig::default(), latent);
    init_params(&mut reg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f32> = (0..latent).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut opt = OptimizerState::new(&reg);
    let adam = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut reached = None;
    let mut nll = f32::INFINITY;
    for step in 1..=500 {
        let mut tape = Tape::new();
        let xn = tape.constant(Tensor::vector(x.clone()));
        let l = tm.text_loss(&mut tape, &reg, xn, &tokens).unwrap();
        nll = tape.scalar(l);
        if nll <= 0.1 {
            reached = Some(step - 1);
            break;
        }
        tape.backward(l).unwrap();
        reg.zero_grads();
        tape.accumulate_param_grads(&mut reg);
        adamw_update(&mut reg, &mut opt, 1e-3, &adam);
    }
    let generated = tm.generate(&reg, &x, &[], sentence.len() + 16, 0.0, 0).unwrap();
    let exact = generated == tokens[1..tokens.len() - 1];

    // causality and prefix invariance on the trained weights
    let per_token = |reg: &ParamRegistry<f32>, toks: &[usize], xv: &[f32]| {
        let mut tape = Tape::new();
        let xn = tape.constant(Tensor::vector(xv.to_vec()));
        let n = tm.token_nll(&mut tape, reg, xn, toks).unwrap();
        tape.value(n).data().to_vec()
    };
    let mut causal = true;
    let base = per_token(&reg, &tokens, &x);
    for cut in [5, 20, 40] {
        let mut changed = tokens.clone();
        for t in changed.iter_mut().skip(cut + 1) {
            *t = usize::from(b'#');
        }
        let after = per_token(&reg, &changed, &x);
        causal &= base[..cut].iter().zip(&after[..cut]).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let mut zeroed = reg.clone();
    zeroed.value_mut(tm.prefix.w).fill(0.0);
    let other: Vec<f32> = x.iter().map(|v| -2.0 * v + 0.5).collect();
    let prefix_invariant = per_token(&zeroed, &tokens, &x) == per_token(&zeroed, &tokens, &other);
    let state_matters = per_token(&reg, &tokens, &x) != per_token(&reg, &tokens, &other);
    outcome(
        reached.is_some() && exact && causal && prefix_invariant && state_matters,
        format!(
            "NLL {nll:.4} after {} steps; greedy reproduction exact = {exact}; causal = {causal}; zeroed-prefix invariant = {prefix_invariant}; state-dependent = {state_matters}",
            reached.map_or("500+".to_string(), |s| s.to_string())
        ),
    )
}

/// Writes past the test harness's output capture so the summary is always
/// visible.
fn report(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance_criteria() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(usize, &str, u64, fn() -> Outcome); 11] = [
        (1, "gradient integrity", 60, c1_gradients),
        (2, "KL oracle", 30, c2_kl_oracle),
        (3, "ELBO bound", 30, c3_elbo_bound),
        (4, "filtering recovery", 300, c4_filtering_recovery),
        (5, "multimodal gain", 1800, c5_multimodal_gain),
        (6, "single-model variable horizon", 600, c6_variable_horizon),
        (7, "uncertainty behavior", 600, c7_uncertainty),
        (8, "latent seasonality", 600, c8_latent_seasonality),
        (9, "free-nats gate", 30, c9_free_nats_gate),
        (10, "determinism and persistence", 300, c10_determinism),
        (11, "text-path smoke", 300, c11_text_path),
    ];
    let mut failed = Vec::new();
    report(String::new());
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            report(format!("criterion {id:>2} {name}: SKIPPED"));
            continue;
        }
        let started = Instant::now();
        let o = within(budget, started, run());
        report(format!(
            "criterion {id:>2} {name}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            o.detail
        ));
        if !o.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
