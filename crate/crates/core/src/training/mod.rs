//! Stateful single-step training with AdamW, cosine learning rate,
//! annealed free nats and early stopping on validation negative ELBO.

mod checkpoint;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, RawCheckpoint, TensorEntry, MAGIC, VERSION,
};
pub use optim::{adamw_update, clip_grad_norm, cosine_lr, free_nats_schedule, AdamWConfig, EarlyStopping, OptimizerState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, Sequence};
use crate::diffcore::{zero_grads, ParamRegistry, Tape};
use crate::error::{Error, Result};
use crate::nn::init_params;
use crate::ssm::{LbsModel, LossWeights, ModelConfig, StatePair, StepInput, StepLosses};
use crate::textcodec::TextConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub summary_tokens: usize,
    pub prefix_tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
    pub linear_heads: bool,
    pub lr_start: f64,
    pub lr_end: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub free_nats_start: f64,
    pub alpha_val: f64,
    pub alpha_kl: f64,
    pub alpha_text: f64,
    pub mc_samples_eval: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub unimodal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden_dim: 16,
            summary_tokens: 8,
            prefix_tokens: 8,
            d_model: 64,
            heads: 2,
            layers: 2,
            ff: 128,
            max_seq_len: 256,
            mlp_hidden: 64,
            linear_heads: false,
            lr_start: 5e-4,
            lr_end: 5e-5,
            max_epochs: 20,
            patience: 5,
            free_nats_start: 2.5,
            alpha_val: 1.0,
            alpha_kl: 1.0,
            alpha_text: 0.1,
            mc_samples_eval: 10,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 10.0,
            unimodal: false,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            obs_dim: 1,
            mlp_hidden: self.mlp_hidden,
            linear_heads: self.linear_heads,
            text: TextConfig {
                d_model: self.d_model,
                heads: self.heads,
                layers: self.layers,
                ff: self.ff,
                summary_tokens: self.summary_tokens,
                prefix_tokens: self.prefix_tokens,
                max_seq_len: self.max_seq_len,
                summary_hidden: self.mlp_hidden,
            },
        }
    }

    pub fn use_text(&self) -> bool {
        !self.unimodal
    }

    /// Loss weights for a given free-nats level; unimodal runs drop the text
    /// term entirely.
    pub fn weights(&self, free_nats: f64) -> LossWeights {
        LossWeights {
            alpha_val: self.alpha_val,
            alpha_text: if self.unimodal { 0.0 } else { self.alpha_text },
            alpha_kl: self.alpha_kl,
            free_nats,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config("training", m));
        let positive = [
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("summary_tokens", self.summary_tokens),
            ("prefix_tokens", self.prefix_tokens),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ff", self.ff),
            ("max_seq_len", self.max_seq_len),
            ("mlp_hidden", self.mlp_hidden),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("mc_samples_eval", self.mc_samples_eval),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return bad("need 0 < lr_end <= lr_start".into());
        }
        let nonneg = [
            ("free_nats_start", self.free_nats_start),
            ("alpha_val", self.alpha_val),
            ("alpha_kl", self.alpha_kl),
            ("alpha_text", self.alpha_text),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub free_nats: f64,
    pub train_loss: f64,
    pub train_val: f64,
    pub train_text: f64,
    pub train_kl: f64,
    pub val_loss: f64,
}

impl EpochLog {
    pub const TSV_HEADER: &'static str = "epoch\tlr\tfree_nats\ttrain_loss\tl_val\tl_text\tl_kl\tval_loss";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.lr, self.free_nats, self.train_loss, self.train_val, self.train_text, self.train_kl, self.val_loss
        )
    }
}

/// Model, parameters and optimizer for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: LbsModel,
    pub reg: ParamRegistry<f32>,
    pub opt: OptimizerState,
    pub total_steps: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let mut reg = ParamRegistry::new();
        let model = LbsModel::declare(&mut reg, &cfg.model_config());
        init_params(&mut reg, cfg.seed);
        let opt = OptimizerState::new(&reg);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            reg,
            opt,
            total_steps,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed)),
        })
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.opt.step as usize, self.total_steps, self.cfg.lr_start, self.cfg.lr_end)
    }

    /// Prior, summary, posterior, one reparameterized sample, losses,
    /// backward, clipping and an AdamW update. A non-finite loss aborts the
    /// step before any parameter changes.
    pub fn train_step(&mut self, prev: &StatePair<f32>, obs: StepInput<'_, f32>, free_nats: f64) -> Result<(StatePair<f32>, StepLosses)> {
        let eps = standard_normal(&mut self.rng, self.cfg.latent_dim);
        let weights = self.cfg.weights(free_nats);
        let mut tape = Tape::new();
        let g = self.model.step(&mut tape, &self.reg, prev, obs, &eps, &weights, self.cfg.use_text())?;
        tape.backward(g.total)?;
        zero_grads(&mut self.reg);
        tape.accumulate_param_grads(&mut self.reg);
        if !self.reg.grad_norm().is_finite() {
            return Err(Error::NumericTerm {
                module: "training",
                message: "non-finite gradient".into(),
            });
        }
        clip_grad_norm(&mut self.reg, self.cfg.grad_clip);
        let lr = self.lr();
        adamw_update(&mut self.reg, &mut self.opt, lr, &self.cfg.adamw());
        Ok((g.next_state(&tape), g.losses(&tape)))
    }

    /// One sweep over `train` in time order from a zero state.
    pub fn train_epoch(&mut self, train: &Sequence, free_nats: f64) -> Result<StepLosses> {
        let mut state = self.model.zero_state();
        let mut acc = StepLosses::default();
        for i in 0..train.len() {
            if train.reset[i] {
                state = self.model.zero_state();
            }
            let obs = StepInput {
                y: std::slice::from_ref(&train.y[i]),
                tokens: train.tokens[i].as_deref(),
            };
            let (next, l) = self.train_step(&state, obs, free_nats)?;
            state = next;
            acc.l_val += l.l_val;
            acc.l_text += l.l_text;
            acc.l_kl_raw += l.l_kl_raw;
            acc.l_kl_clamped += l.l_kl_clamped;
            acc.total += l.total;
        }
        let n = train.len().max(1) as f64;
        acc.l_val /= n;
        acc.l_text /= n;
        acc.l_kl_raw /= n;
        acc.l_kl_clamped /= n;
        acc.total /= n;
        Ok(acc)
    }
}

/// Mean per-step weighted negative ELBO (raw KL) over `val`, after filtering
/// through `warmup` without parameter updates. Sampling noise comes from a
/// fixed stream so successive epochs are compared on equal terms.
pub fn validation_loss(model: &LbsModel, reg: &ParamRegistry<f32>, cfg: &TrainConfig, warmup: &Sequence, val: &Sequence) -> Result<f64> {
    let use_text = cfg.use_text();
    let mut state = model.zero_state();
    for i in 0..warmup.len() {
        if warmup.reset[i] {
            state = model.zero_state();
        }
        let obs = StepInput {
            y: std::slice::from_ref(&warmup.y[i]),
            tokens: warmup.tokens[i].as_deref(),
        };
        state = model.filter_step(reg, &state, obs, use_text)?.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7a1));
    let weights = cfg.weights(0.0);
    let mut total = 0.0;
    for i in 0..val.len() {
        // a validation segment that starts a new series must not inherit state
        if val.reset[i] && (i > 0 || warmup.is_empty()) {
            state = model.zero_state();
        }
        let eps = standard_normal(&mut rng, cfg.latent_dim);
        let obs = StepInput {
            y: std::slice::from_ref(&val.y[i]),
            tokens: val.tokens[i].as_deref(),
        };
        let mut tape = Tape::new();
        let g = model.step(&mut tape, reg, &state, obs, &eps, &weights, use_text)?;
        let l = g.losses(&tape);
        total += weights.alpha_val * l.l_val + weights.alpha_text * l.l_text + weights.alpha_kl * l.l_kl_raw;
        state = g.next_state(&tape);
    }
    Ok(total / val.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Trains with early stopping and returns the best-validation snapshot.
/// `on_epoch` sees every epoch's log as soon as it is available.
pub fn fit(
    train: &Sequence,
    val: &Sequence,
    cfg: &TrainConfig,
    stats: NormStats,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::config("training", "empty training split"));
    }
    if val.is_empty() {
        return Err(Error::config("training", "empty validation split"));
    }
    let mut trainer = Trainer::new(cfg, cfg.max_epochs * train.len())?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_reg = trainer.reg.clone();
    let mut logs = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let free_nats = free_nats_schedule(epoch, cfg.max_epochs, cfg.free_nats_start);
        let lr = trainer.lr();
        let l = trainer.train_epoch(train, free_nats)?;
        let val_loss = validation_loss(&trainer.model, &trainer.reg, cfg, train, val)?;
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            free_nats,
            train_loss: l.total,
            train_val: l.l_val,
            train_text: l.l_text,
            train_kl: l.l_kl_raw,
            val_loss,
        };
        log::info!("{}", log.tsv());
        on_epoch(&log);
        logs.push(log);
        if !val_loss.is_finite() {
            return Err(Error::NumericTerm {
                module: "training",
                message: format!("non-finite validation loss at epoch {}", epoch + 1),
            });
        }
        if stopper.observe(epoch + 1, val_loss) {
            best_reg = trainer.reg.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let best_epoch = stopper.best_epoch.expect("at least one epoch ran");
    let meta = CheckpointMeta {
        config: cfg.clone(),
        stats,
        epoch: best_epoch,
        best_val_loss: stopper.best,
        run_config: Default::default(),
        tensors: Vec::new(),
    };
    Ok(FitResult {
        checkpoint: Checkpoint {
            model: trainer.model,
            registry: best_reg,
            meta,
        },
        logs,
        best_epoch,
    })
}
