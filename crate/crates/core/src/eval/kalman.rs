//! Exact inference for linear-Gaussian state space models.
//!
//! `x_0 ~ N(m0, P0)`, `x_t = A x_{t-1} + w_t`, `y_t = C x_t + v_t` for
//! `t = 1..T`, with diagonal `Q` and `R`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgssmParams {
    pub a: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub r: Vec<f64>,
    pub m0: Vec<f64>,
    pub p0: Vec<Vec<f64>>,
}

fn mat(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

fn num(message: impl Into<String>) -> Error {
    Error::NumericTerm {
        module: "eval",
        message: message.into(),
    }
}

impl LgssmParams {
    /// Scalar model with `x_0 ~ N(0, p0)`.
    pub fn scalar(a: f64, q: f64, c: f64, r: f64, p0: f64) -> Self {
        Self {
            a: vec![vec![a]],
            q: vec![q],
            c: vec![vec![c]],
            r: vec![r],
            m0: vec![0.0],
            p0: vec![vec![p0]],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.m0.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.r.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.obs_dim();
        let bad = |s: &str| Err(Error::config("eval", s.to_string()));
        if n == 0 || m == 0 {
            return bad("empty state or observation dimension");
        }
        if self.a.len() != n || self.a.iter().any(|r| r.len() != n) {
            return bad("A must be N x N");
        }
        if self.q.len() != n || self.p0.len() != n || self.p0.iter().any(|r| r.len() != n) {
            return bad("Q and P0 must match the state dimension");
        }
        if self.c.len() != m || self.c.iter().any(|r| r.len() != n) {
            return bad("C must be M x N");
        }
        if self.q.iter().chain(&self.r).any(|v| v.is_nan() || *v <= 0.0) {
            return bad("Q and R diagonals must be positive");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("params serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Draws states `x_1..x_T` and observations `y_1..y_T`.
    pub fn sample(&self, steps: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = |n: usize| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let (a, c) = (mat(&self.a), mat(&self.c));
        let l0 = nalgebra::Cholesky::new(mat(&self.p0)).map(|ch| ch.l()).unwrap_or_else(|| DMatrix::zeros(self.state_dim(), self.state_dim()));
        let q = DVector::from_vec(self.q.iter().map(|v| v.sqrt()).collect());
        let r = DVector::from_vec(self.r.iter().map(|v| v.sqrt()).collect());
        let mut x = DVector::from_vec(self.m0.clone()) + l0 * z(self.state_dim());
        let mut xs = Vec::with_capacity(steps);
        let mut ys = Vec::with_capacity(steps);
        for _ in 0..steps {
            x = &a * &x + q.component_mul(&z(self.state_dim()));
            let y = &c * &x + r.component_mul(&z(self.obs_dim()));
            xs.push(x.iter().copied().collect());
            ys.push(y.iter().copied().collect());
        }
        (xs, ys)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanResult {
    /// Filtered means `E[x_t | y_{1:t}]`.
    pub means: Vec<Vec<f64>>,
    /// Filtered covariances.
    pub covs: Vec<Vec<Vec<f64>>>,
    /// One-step predictive means `E[y_t | y_{1:t-1}]`.
    pub pred_means: Vec<Vec<f64>>,
    /// One-step predictive covariances.
    pub pred_covs: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Predict / update recursion with the prediction-error decomposition of
/// `log p(y_{1:T})`.
pub fn kalman_filter_oracle(p: &LgssmParams, ys: &[Vec<f64>]) -> Result<KalmanResult> {
    p.validate()?;
    let (a, c) = (mat(&p.a), mat(&p.c));
    let q = DMatrix::from_diagonal(&DVector::from_vec(p.q.clone()));
    let r = DMatrix::from_diagonal(&DVector::from_vec(p.r.clone()));
    let mut m = DVector::from_vec(p.m0.clone());
    let mut cov = mat(&p.p0);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut out = KalmanResult {
        means: vec![],
        covs: vec![],
        pred_means: vec![],
        pred_covs: vec![],
        log_likelihood: 0.0,
    };
    for (t, y) in ys.iter().enumerate() {
        if y.len() != p.obs_dim() {
            return Err(Error::config("eval", format!("observation {t} has dimension {}, expected {}", y.len(), p.obs_dim())));
        }
        let y = DVector::from_vec(y.clone());
        let mp = &a * &m;
        let pp = &a * &cov * a.transpose() + &q;
        let yp = &c * &mp;
        let s = &c * &pp * c.transpose() + &r;
        let chol = nalgebra::Cholesky::new(s.clone()).ok_or_else(|| num(format!("innovation covariance not positive definite at step {}", t + 1)))?;
        let e = &y - &yp;
        let sinv_e = chol.solve(&e);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        out.log_likelihood += -0.5 * (p.obs_dim() as f64 * ln2pi + logdet + e.dot(&sinv_e));
        let k = &pp * c.transpose() * chol.inverse();
        m = &mp + &k * &e;
        let ikc = DMatrix::identity(p.state_dim(), p.state_dim()) - &k * &c;
        // Joseph form keeps the covariance symmetric positive semi-definite
        cov = &ikc * &pp * ikc.transpose() + &k * &r * k.transpose();
        out.means.push(m.iter().copied().collect());
        out.covs.push(rows(&cov));
        out.pred_means.push(yp.iter().copied().collect());
        out.pred_covs.push(rows(&s));
    }
    Ok(out)
}

/// Gaussian conditional `q(x_t | x_{t-1}) = N(gain·x_{t-1} + offset, var)`
/// for a scalar chain. For `x_0` the gain is unused.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarConditional {
    pub gain: f64,
    pub offset: f64,
    pub var: f64,
}

fn scalar_parts(p: &LgssmParams) -> Result<(f64, f64, f64, f64, f64, f64)> {
    p.validate()?;
    if p.state_dim() != 1 || p.obs_dim() != 1 {
        return Err(Error::config("eval", "scalar model required"));
    }
    Ok((p.a[0][0], p.q[0], p.c[0][0], p.r[0], p.m0[0], p.p0[0][0]))
}

/// Exact smoothing conditionals `q(x_t | x_{t-1}, y_{t:T})` for `t = 0..T`
/// from a backward information filter. Substituted into the autoregressive
/// ELBO they make the bound tight.
pub fn exact_posterior_conditionals(p: &LgssmParams, ys: &[f64]) -> Result<Vec<ScalarConditional>> {
    let (a, q, c, r, m0, p0) = scalar_parts(p)?;
    let steps = ys.len();
    let mut out = vec![
        ScalarConditional {
            gain: 0.0,
            offset: 0.0,
            var: 0.0
        };
        steps + 1
    ];
    // message from y_{t+1:T} about x_t: exp(-J x²/2 + h x)
    let (mut j, mut h) = (0.0, 0.0);
    for t in (1..=steps).rev() {
        j += c * c / r;
        h += c * ys[t - 1] / r;
        let prec = 1.0 / q + j;
        out[t] = ScalarConditional {
            gain: a / q / prec,
            offset: h / prec,
            var: 1.0 / prec,
        };
        let d = 1.0 + q * j;
        j = a * a * j / d;
        h = a * h / d;
    }
    let prec = 1.0 / p0 + j;
    out[0] = ScalarConditional {
        gain: 0.0,
        offset: (m0 / p0 + h) / prec,
        var: 1.0 / prec,
    };
    Ok(out)
}

/// Autoregressive ELBO of a scalar LGSSM for a chain of Gaussian
/// conditionals, in closed form by propagating the marginal moments of `q`.
pub fn scalar_elbo(p: &LgssmParams, ys: &[f64], q_cond: &[ScalarConditional]) -> Result<f64> {
    let (a, q, c, r, m0, p0) = scalar_parts(p)?;
    if q_cond.len() != ys.len() + 1 {
        return Err(Error::config("eval", "need one conditional per latent x_0..x_T"));
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let kl = |mean_q: f64, var_q: f64, mean_p: f64, var_p: f64| {
        0.5 * (var_q / var_p + (mean_q - mean_p).powi(2) / var_p - 1.0 + var_p.ln() - var_q.ln())
    };
    let q0 = q_cond[0];
    let (mut m, mut v) = (q0.offset, q0.var);
    let mut elbo = -kl(m, v, m0, p0);
    for (t, &y) in ys.iter().enumerate() {
        let qc = q_cond[t + 1];
        let d = qc.gain - a;
        // E_{x_{t-1}} KL(N(g x + b, s²) || N(A x, Q)) = KL at the mean + ½ d² v / Q
        elbo -= kl(qc.gain * m + qc.offset, qc.var, a * m, q) + 0.5 * d * d * v / q;
        m = qc.gain * m + qc.offset;
        v = qc.gain * qc.gain * v + qc.var;
        elbo += -0.5 * (ln2pi + r.ln()) - ((y - c * m).powi(2) + c * c * v) / (2.0 * r);
    }
    Ok(elbo)
}
