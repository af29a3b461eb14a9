use crate::diffcore::{ParamRegistry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(reg: &ParamRegistry<f32>) -> Self {
        let zeros = || reg.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Decoupled weight decay (only on parameters flagged for decay), then a
/// bias-corrected Adam step.
pub fn adamw_update(reg: &mut ParamRegistry<f32>, opt: &mut OptimizerState, lr: f64, cfg: &AdamWConfig) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let step = lr / bc1;
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, p) in reg.params_mut().iter_mut().enumerate() {
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            let gj = g[j] as f64;
            let mut wj = w[j] as f64;
            if p.decay {
                wj *= decay;
            }
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            w[j] = (wj - step * mj / ((vj / bc2).sqrt() + cfg.eps)) as f32;
        }
    }
}

/// `lr_end + ½ (lr_start − lr_end)(1 + cos(π step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total_steps == 0 {
        return lr_start;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Linear anneal from `start` at epoch 0 to 0 at the final epoch.
pub fn free_nats_schedule(epoch: usize, max_epochs: usize, start: f64) -> f64 {
    if max_epochs <= 1 {
        return 0.0;
    }
    start * (1.0 - epoch.min(max_epochs - 1) as f64 / (max_epochs - 1) as f64)
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(reg: &mut ParamRegistry<f32>, max_norm: f64) -> f64 {
    let norm = reg.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        reg.scale_grads((max_norm / norm) as f32);
    }
    norm
}

/// Patience counter over validation losses (lower is better).
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            waited: 0,
        }
    }

    /// Records an epoch's validation loss. Returns `true` if it improved on
    /// the best so far.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.waited = 0;
            true
        } else {
            self.waited += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.waited >= self.patience
    }
}
