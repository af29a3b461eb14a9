//! Latent dynamical model: GRU prior transition, numeric emission, neural
//! Kalman posterior and the per-step multimodal loss.

use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, ParamRegistry, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Activation, GruCell, Linear, Mlp};
use crate::textcodec::{TextConfig, TextModel};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent dimension `N`.
    pub latent_dim: usize,
    /// GRU hidden width `N_h`.
    pub hidden_dim: usize,
    /// Observation dimension `M`.
    pub obs_dim: usize,
    /// Hidden width of the posterior and emission MLPs.
    pub mlp_hidden: usize,
    /// Replace the posterior and emission MLPs by single linear layers.
    pub linear_heads: bool,
    pub text: TextConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden_dim: 16,
            obs_dim: 1,
            mlp_hidden: 64,
            linear_heads: false,
            text: TextConfig::default(),
        }
    }
}

/// Mean and log-variance nodes of a diagonal Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: NodeId,
    pub log_var: NodeId,
}

impl DiagGaussian {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, mean: NodeId, log_var: NodeId) -> Result<Self> {
        let log_var = tape.clamp(log_var, T::of(LOG_VAR_MIN), T::of(LOG_VAR_MAX))?;
        Ok(Self { mean, log_var })
    }

    pub fn constant<T: Scalar>(tape: &mut Tape<T>, mean: Vec<T>, log_var: Vec<T>) -> Result<Self> {
        let m = tape.constant(Tensor::vector(mean));
        let l = tape.constant(Tensor::vector(log_var));
        Self::new(tape, m, l)
    }

    pub fn mean_values<T: Scalar>(&self, tape: &Tape<T>) -> Vec<T> {
        tape.value(self.mean).data().to_vec()
    }

    pub fn log_var_values<T: Scalar>(&self, tape: &Tape<T>) -> Vec<T> {
        tape.value(self.log_var).data().to_vec()
    }
}

/// Sampled latent state and recurrent hidden carried between steps. Holds
/// plain values, so it can never reference a previous step's tape.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePair<T = f32> {
    pub x_hat: Vec<T>,
    pub h: Vec<T>,
}

impl<T: Scalar> StatePair<T> {
    pub fn zeros(latent_dim: usize, hidden_dim: usize) -> Self {
        Self {
            x_hat: vec![T::zero(); latent_dim],
            h: vec![T::zero(); hidden_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x_hat.iter().chain(&self.h).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_val: f64,
    pub l_text: f64,
    pub l_kl_raw: f64,
    pub l_kl_clamped: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_val: f64,
    pub alpha_text: f64,
    pub alpha_kl: f64,
    pub free_nats: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_val: 1.0,
            alpha_text: 0.1,
            alpha_kl: 1.0,
            free_nats: 2.5,
        }
    }
}

/// One observation as seen by a step: normalized value and optional tokens.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a, T> {
    pub y: &'a [T],
    pub tokens: Option<&'a [usize]>,
}

/// Nodes of one Algorithm 1 step.
#[derive(Clone, Copy, Debug)]
pub struct StepGraph {
    pub prior: DiagGaussian,
    pub posterior: DiagGaussian,
    pub summary: NodeId,
    pub h: NodeId,
    pub x_hat: NodeId,
    pub l_val: NodeId,
    pub l_text: Option<NodeId>,
    pub l_kl_raw: NodeId,
    pub l_kl_clamped: NodeId,
    pub total: NodeId,
}

impl StepGraph {
    pub fn losses<T: Scalar>(&self, tape: &Tape<T>) -> StepLosses {
        StepLosses {
            l_val: tape.scalar(self.l_val).as_f64(),
            l_text: self.l_text.map_or(0.0, |n| tape.scalar(n).as_f64()),
            l_kl_raw: tape.scalar(self.l_kl_raw).as_f64(),
            l_kl_clamped: tape.scalar(self.l_kl_clamped).as_f64(),
            total: tape.scalar(self.total).as_f64(),
        }
    }

    pub fn next_state<T: Scalar>(&self, tape: &Tape<T>) -> StatePair<T> {
        StatePair {
            x_hat: tape.value(self.x_hat).data().to_vec(),
            h: tape.value(self.h).data().to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Linear(Linear),
    Mlp(Mlp),
}

impl Head {
    fn declare<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, dims: [usize; 3], linear: bool) -> Self {
        if linear {
            Head::Linear(Linear::declare(reg, name, dims[0], dims[2]))
        } else {
            Head::Mlp(Mlp::declare(reg, name, &dims, Activation::Tanh))
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Head::Linear(l) => l.forward(tape, reg, x),
            Head::Mlp(m) => m.forward(tape, reg, x),
        }
    }

    pub fn layers(&self) -> Vec<&Linear> {
        match self {
            Head::Linear(l) => vec![l],
            Head::Mlp(m) => m.layers.iter().collect(),
        }
    }
}

/// Every parameter of the model, declared into one registry.
#[derive(Clone, Debug)]
pub struct LbsModel {
    pub cfg: ModelConfig,
    pub gru: GruCell,
    pub prior_mean: Linear,
    pub prior_log_var: Linear,
    pub posterior: Head,
    pub emission: Head,
    pub text: TextModel,
}

impl LbsModel {
    pub fn declare<T: Scalar>(reg: &mut ParamRegistry<T>, cfg: &ModelConfig) -> Self {
        let (n, nh, m) = (cfg.latent_dim, cfg.hidden_dim, cfg.obs_dim);
        let gru = GruCell::declare(reg, "ssm.gru", n, nh);
        let prior_mean = Linear::declare(reg, "ssm.prior.mean", nh, n);
        let prior_log_var = Linear::declare(reg, "ssm.prior.log_var", nh, n);
        let posterior = Head::declare(reg, "ssm.posterior", [nh + m + n, cfg.mlp_hidden, 2 * n], cfg.linear_heads);
        let emission = Head::declare(reg, "ssm.emission", [n, cfg.mlp_hidden, m], cfg.linear_heads);
        let text = TextModel::declare(reg, &cfg.text, n);
        Self {
            cfg: cfg.clone(),
            gru,
            prior_mean,
            prior_log_var,
            posterior,
            emission,
            text,
        }
    }

    pub fn zero_state<T: Scalar>(&self) -> StatePair<T> {
        StatePair::zeros(self.cfg.latent_dim, self.cfg.hidden_dim)
    }

    /// `h_t = GRU(x̂_{t-1}, h_{t-1})` followed by linear mean / log-variance
    /// heads. `prev` enters the tape as constants.
    pub fn prior_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        prev: &StatePair<T>,
    ) -> Result<(DiagGaussian, NodeId)> {
        let x = tape.constant(Tensor::vector(prev.x_hat.clone()));
        let h = tape.constant(Tensor::vector(prev.h.clone()));
        let h = self.gru.step(tape, reg, x, h)?;
        let mean = self.prior_mean.forward(tape, reg, h)?;
        let log_var = self.prior_log_var.forward(tape, reg, h)?;
        Ok((DiagGaussian::new(tape, mean, log_var)?, h))
    }

    /// Posterior from `concat(h, y, s)`; a missing summary falls back to the
    /// learned null-text summary.
    pub fn posterior_infer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        h: NodeId,
        y: NodeId,
        s: Option<NodeId>,
    ) -> Result<DiagGaussian> {
        let s = match s {
            Some(s) => s,
            None => self.text.null_summary(tape, reg)?,
        };
        let n = self.cfg.latent_dim;
        let inp = tape.concat(&[h, y, s])?;
        let out = self.posterior.forward(tape, reg, inp)?;
        let mean = tape.slice(out, 0, n)?;
        let log_var = tape.slice(out, n, n)?;
        DiagGaussian::new(tape, mean, log_var)
    }

    /// `MLP_val(x̂)`.
    pub fn emit<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x_hat: NodeId) -> Result<NodeId> {
        self.emission.forward(tape, reg, x_hat)
    }

    /// `‖y − MLP_val(x̂)‖²`.
    pub fn value_loss<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x_hat: NodeId, y: NodeId) -> Result<NodeId> {
        let y_hat = self.emit(tape, reg, x_hat)?;
        let d = tape.sub(y, y_hat)?;
        let d = tape.square(d)?;
        tape.sum(d)
    }

    /// Filtering update with `eps = 0`: the next state is the posterior mean.
    /// Returns the state and the posterior log-variance.
    pub fn filter_step(
        &self,
        reg: &ParamRegistry<f32>,
        prev: &StatePair<f32>,
        obs: StepInput<'_, f32>,
        use_text: bool,
    ) -> Result<(StatePair<f32>, Vec<f32>)> {
        let mut tape = Tape::new();
        let (_, h) = self.prior_step(&mut tape, reg, prev)?;
        let s = match obs.tokens.filter(|_| use_text) {
            Some(t) => self.text.encode_summary(&mut tape, reg, t)?,
            None => self.text.null_summary(&mut tape, reg)?,
        };
        let y = tape.constant(Tensor::vector(obs.y.to_vec()));
        let q = self.posterior_infer(&mut tape, reg, h, y, Some(s))?;
        let next = StatePair {
            x_hat: q.mean_values(&tape),
            h: tape.value(h).data().to_vec(),
        };
        Ok((next, q.log_var_values(&tape)))
    }

    /// One step of the stateful training algorithm up to the weighted total
    /// loss. With `use_text == false` the summary is always the null summary
    /// and the text term is skipped.
    #[allow(clippy::too_many_arguments)]
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        prev: &StatePair<T>,
        obs: StepInput<'_, T>,
        eps: &[T],
        weights: &LossWeights,
        use_text: bool,
    ) -> Result<StepGraph> {
        let (prior, h) = self.prior_step(tape, reg, prev)?;
        let tokens = obs.tokens.filter(|_| use_text);
        let summary = match tokens {
            Some(t) => self.text.encode_summary(tape, reg, t)?,
            None => self.text.null_summary(tape, reg)?,
        };
        let y = tape.constant(Tensor::vector(obs.y.to_vec()));
        let posterior = self.posterior_infer(tape, reg, h, y, Some(summary))?;
        let x_hat = reparam_sample(tape, &posterior, eps)?;
        let l_val = self.value_loss(tape, reg, x_hat, y)?;
        check(tape, l_val, "value loss")?;
        let l_text = match tokens {
            Some(t) => {
                let l = self.text.text_loss(tape, reg, x_hat, t)?;
                check(tape, l, "text loss")?;
                Some(l)
            }
            None => None,
        };
        let l_kl_raw = kl_diag_gaussian(tape, &posterior, &prior)?;
        check(tape, l_kl_raw, "kl")?;
        let l_kl_clamped = apply_free_nats(tape, l_kl_raw, T::of(weights.free_nats));
        let mut total = tape.scale(l_val, T::of(weights.alpha_val))?;
        if let Some(l) = l_text {
            let w = tape.scale(l, T::of(weights.alpha_text))?;
            total = tape.add(total, w)?;
        }
        let w = tape.scale(l_kl_clamped, T::of(weights.alpha_kl))?;
        total = tape.add(total, w)?;
        check(tape, total, "total loss")?;
        Ok(StepGraph {
            prior,
            posterior,
            summary,
            h,
            x_hat,
            l_val,
            l_text,
            l_kl_raw,
            l_kl_clamped,
            total,
        })
    }
}

fn check<T: Scalar>(tape: &Tape<T>, node: NodeId, term: &str) -> Result<()> {
    if tape.value(node).is_finite() {
        Ok(())
    } else {
        Err(Error::NumericTerm {
            module: "training",
            message: format!("non-finite {term}"),
        })
    }
}

/// `x̂ = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparam_sample<T: Scalar>(tape: &mut Tape<T>, g: &DiagGaussian, eps: &[T]) -> Result<NodeId> {
    let e = tape.constant(Tensor::vector(eps.to_vec()));
    let half = tape.scale(g.log_var, T::of(0.5))?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, e)?;
    tape.add(g.mean, noise)
}

/// `KL(q ‖ p)` for diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussian<T: Scalar>(tape: &mut Tape<T>, q: &DiagGaussian, p: &DiagGaussian) -> Result<NodeId> {
    let dl = tape.sub(q.log_var, p.log_var)?;
    let ratio = tape.exp(dl)?;
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.square(dm)?;
    let neg_lp = tape.neg(p.log_var)?;
    let inv_p = tape.exp(neg_lp)?;
    let maha = tape.mul(dm2, inv_p)?;
    let a = tape.add(ratio, maha)?;
    let a = tape.sub(a, dl)?;
    let a = tape.add_scalar(a, -T::one())?;
    let s = tape.sum(a)?;
    tape.scale(s, T::of(0.5))
}

/// `max(kl, free_nats)`. Below the threshold the result is a fresh constant,
/// so no gradient reaches the KL inputs.
pub fn apply_free_nats<T: Scalar>(tape: &mut Tape<T>, kl: NodeId, free_nats: T) -> NodeId {
    if tape.scalar(kl) < free_nats {
        tape.constant(Tensor::scalar(free_nats))
    } else {
        kl
    }
}
