//! Finite-difference checks for every tape primitive and the model's
//! composite computations. Each case runs on `instances` random draws and
//! reports the worst relative error.

use lbs::diffcore::{NodeId, ParamRegistry, Tape, Tensor};
use lbs::nn::{init_params, GruCell};
use lbs::ssm::{kl_diag_gaussian, DiagGaussian, LbsModel, LossWeights, StatePair, StepInput};
use lbs::textcodec::{tokenize, TextModel};
use rand::Rng;

use super::{away_from_zero, check_inputs, check_params, project, rng, tiny_model, tiny_text, uniform};

pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

type Case = (&'static str, fn(u64) -> f64);

fn u(seed: u64, shape: &[usize]) -> Tensor<f64> {
    uniform(&mut rng(seed), shape, -1.5, 1.5)
}

fn unary(seed: u64, x: Tensor<f64>, op: fn(&mut Tape<f64>, NodeId) -> lbs::Result<NodeId>) -> f64 {
    check_inputs(&[x], |t, ids| {
        let y = op(t, ids[0])?;
        project(t, y, seed)
    })
}

fn binary(seed: u64, a: Tensor<f64>, b: Tensor<f64>, op: fn(&mut Tape<f64>, NodeId, NodeId) -> lbs::Result<NodeId>) -> f64 {
    check_inputs(&[a, b], |t, ids| {
        let y = op(t, ids[0], ids[1])?;
        project(t, y, seed)
    })
}

/// Random registry values, including nonzero biases.
fn jitter(reg: &mut ParamRegistry<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed ^ 0x717);
    for id in reg.ids().collect::<Vec<_>>() {
        for v in reg.value_mut(id).data_mut() {
            *v += r.random_range(-scale..scale);
        }
    }
}

fn model(seed: u64, linear_heads: bool) -> (LbsModel, ParamRegistry<f64>) {
    let mut reg = ParamRegistry::<f64>::new();
    let m = LbsModel::declare(&mut reg, &tiny_model(linear_heads));
    init_params(&mut reg, seed);
    jitter(&mut reg, seed, 0.1);
    (m, reg)
}

fn random_text(seed: u64) -> Vec<usize> {
    let mut r = rng(seed ^ 0x7e7);
    let len = r.random_range(1..6);
    let s: String = (0..len).map(|_| r.random_range(b'a'..=b'z') as char).collect();
    tokenize(&s)
}

pub const CASES: &[Case] = &[
    ("matmul", |s| binary(s, u(s, &[3, 4]), u(s + 1, &[4, 2]), |t, a, b| t.matmul(a, b))),
    ("matmul_vector", |s| binary(s, u(s, &[4]), u(s + 1, &[4, 3]), |t, a, b| t.matmul(a, b))),
    ("matmul_nt", |s| binary(s, u(s, &[3, 4]), u(s + 1, &[2, 4]), |t, a, b| t.matmul_nt(a, b))),
    ("add", |s| binary(s, u(s, &[2, 3]), u(s + 1, &[2, 3]), |t, a, b| t.add(a, b))),
    ("sub", |s| binary(s, u(s, &[2, 3]), u(s + 1, &[2, 3]), |t, a, b| t.sub(a, b))),
    ("mul", |s| binary(s, u(s, &[2, 3]), u(s + 1, &[2, 3]), |t, a, b| t.mul(a, b))),
    ("add_bias", |s| binary(s, u(s, &[3, 4]), u(s + 1, &[4]), |t, a, b| t.add_bias(a, b))),
    ("scale", |s| unary(s, u(s, &[5]), |t, a| t.scale(a, -1.7))),
    ("add_scalar", |s| unary(s, u(s, &[5]), |t, a| t.add_scalar(a, 0.3))),
    ("neg", |s| unary(s, u(s, &[5]), |t, a| t.neg(a))),
    ("concat", |s| binary(s, u(s, &[3]), u(s + 1, &[2]), |t, a, b| t.concat(&[a, b]))),
    ("concat_matrix", |s| binary(s, u(s, &[2, 3]), u(s + 1, &[2, 1]), |t, a, b| t.concat(&[a, b]))),
    ("concat_rows", |s| binary(s, u(s, &[2, 3]), u(s + 1, &[1, 3]), |t, a, b| t.concat_rows(&[a, b]))),
    ("slice", |s| unary(s, u(s, &[2, 5]), |t, a| t.slice(a, 1, 3))),
    ("slice_rows", |s| unary(s, u(s, &[4, 3]), |t, a| t.slice_rows(a, 1, 2))),
    ("reshape", |s| unary(s, u(s, &[2, 3]), |t, a| t.reshape(a, &[3, 2]))),
    ("tanh", |s| unary(s, u(s, &[6]), |t, a| t.tanh(a))),
    ("sigmoid", |s| unary(s, u(s, &[6]), |t, a| t.sigmoid(a))),
    ("exp", |s| unary(s, u(s, &[6]), |t, a| t.exp(a))),
    ("log", |s| unary(s, uniform(&mut rng(s), &[6], 0.2, 3.0), |t, a| t.log(a))),
    ("relu", |s| unary(s, away_from_zero(&mut rng(s), &[6], 0.05, 1.5), |t, a| t.relu(a))),
    ("square", |s| unary(s, u(s, &[6]), |t, a| t.square(a))),
    ("softmax", |s| unary(s, u(s, &[3, 4]), |t, a| t.softmax(a))),
    ("log_softmax", |s| unary(s, u(s, &[3, 4]), |t, a| t.log_softmax(a))),
    ("sum", |s| unary(s, u(s, &[2, 3]), |t, a| t.sum(a))),
    ("mean", |s| unary(s, u(s, &[2, 3]), |t, a| t.mean(a))),
    ("gather", |s| unary(s, u(s, &[5, 3]), |t, a| t.gather(a, &[0, 2, 2, 4]))),
    ("pick", |s| unary(s, u(s, &[3, 4]), |t, a| t.pick(a, &[3, 0, 1]))),
    ("clamp", |s| {
        let x = away_from_zero(&mut rng(s), &[8], 0.0, 2.0);
        let x = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| if (v.abs() - 0.8).abs() < 0.05 { v * 0.5 } else { v }).collect(),
        );
        unary(s, x, |t, a| t.clamp(a, -0.8, 0.8))
    }),
    ("causal_mask_softmax", |s| {
        unary(s, u(s, &[4, 4]), |t, a| {
            let m = t.causal_mask(a)?;
            t.softmax(m)
        })
    }),
    ("layer_norm", |s| {
        check_inputs(&[u(s, &[3, 5]), u(s + 1, &[5]), u(s + 2, &[5])], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2])?;
            project(t, y, s)
        })
    }),
    ("gru_step_inputs", |s| {
        let mut reg = ParamRegistry::<f64>::new();
        let gru = GruCell::declare(&mut reg, "g", 3, 4);
        init_params(&mut reg, s);
        jitter(&mut reg, s, 0.2);
        check_inputs(&[u(s, &[3]), u(s + 1, &[4])], |t, ids| {
            let h = gru.step(t, &reg, ids[0], ids[1])?;
            project(t, h, s)
        })
    }),
    ("gru_step_params", |s| {
        let mut reg = ParamRegistry::<f64>::new();
        let gru = GruCell::declare(&mut reg, "g", 3, 4);
        init_params(&mut reg, s);
        jitter(&mut reg, s, 0.2);
        let (x, h) = (u(s, &[3]), u(s + 1, &[4]));
        check_params(&reg, 6, s, |t, r| {
            let x = t.constant(x.clone());
            let h0 = t.constant(h.clone());
            let h = gru.step(t, r, x, h0)?;
            project(t, h, s)
        })
    }),
    ("posterior_mlp", |s| {
        let (m, reg) = model(s, false);
        let n = m.cfg.latent_dim;
        let inputs = [u(s, &[m.cfg.hidden_dim]), u(s + 1, &[1]), u(s + 2, &[n])];
        let a = check_inputs(&inputs, |t, ids| {
            let q = m.posterior_infer(t, &reg, ids[0], ids[1], Some(ids[2]))?;
            let both = t.concat(&[q.mean, q.log_var])?;
            project(t, both, s)
        });
        let b = check_params(&reg, 2, s, |t, r| {
            let ids: Vec<NodeId> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let q = m.posterior_infer(t, r, ids[0], ids[1], Some(ids[2]))?;
            let both = t.concat(&[q.mean, q.log_var])?;
            project(t, both, s)
        });
        a.max(b)
    }),
    ("kl_diag_gaussian", |s| {
        let inputs = [u(s, &[3]), u(s + 1, &[3]), u(s + 2, &[3]), u(s + 3, &[3])];
        check_inputs(&inputs, |t, ids| {
            let q = DiagGaussian::new(t, ids[0], ids[1])?;
            let p = DiagGaussian::new(t, ids[2], ids[3])?;
            kl_diag_gaussian(t, &q, &p)
        })
    }),
    ("text_loss_prefix", |s| {
        let mut reg = ParamRegistry::<f64>::new();
        let tm = TextModel::declare(&mut reg, &tiny_text(), 3);
        init_params(&mut reg, s);
        jitter(&mut reg, s, 0.1);
        let tokens = random_text(s);
        let x = u(s, &[3]);
        let a = check_inputs(std::slice::from_ref(&x), |t, ids| tm.text_loss(t, &reg, ids[0], &tokens));
        let b = check_params(&reg, 2, s, |t, r| {
            let x = t.constant(x.clone());
            tm.text_loss(t, r, x, &tokens)
        });
        a.max(b)
    }),
    ("text_summary", |s| {
        let mut reg = ParamRegistry::<f64>::new();
        let tm = TextModel::declare(&mut reg, &tiny_text(), 3);
        init_params(&mut reg, s);
        jitter(&mut reg, s, 0.1);
        let tokens = random_text(s);
        check_params(&reg, 2, s, |t, r| {
            let v = tm.encode_summary(t, r, &tokens)?;
            project(t, v, s)
        })
    }),
    ("full_step_loss", |s| {
        let (m, reg) = model(s, false);
        let mut r = rng(s ^ 0xf00);
        let prev = StatePair::<f64> {
            x_hat: (0..m.cfg.latent_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            h: (0..m.cfg.hidden_dim).map(|_| r.random_range(-0.9..0.9)).collect(),
        };
        let eps: Vec<f64> = (0..m.cfg.latent_dim).map(|_| r.random_range(-2.0..2.0)).collect();
        let y = [r.random_range(-2.0..2.0)];
        let tokens = random_text(s);
        let weights = LossWeights {
            alpha_val: 1.0,
            alpha_text: 0.3,
            alpha_kl: 1.0,
            free_nats: 0.0,
        };
        check_params(&reg, 2, s, |t, r| {
            let obs = StepInput {
                y: &y,
                tokens: Some(&tokens),
            };
            Ok(m.step(t, r, &prev, obs, &eps, &weights, true)?.total)
        })
    }),
    ("full_step_loss_linear_heads", |s| {
        let (m, reg) = model(s, true);
        let mut r = rng(s ^ 0xf01);
        let prev = StatePair::<f64> {
            x_hat: (0..m.cfg.latent_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            h: (0..m.cfg.hidden_dim).map(|_| r.random_range(-0.9..0.9)).collect(),
        };
        let eps: Vec<f64> = (0..m.cfg.latent_dim).map(|_| r.random_range(-2.0..2.0)).collect();
        let y = [r.random_range(-2.0..2.0)];
        check_params(&reg, 2, s, |t, r| {
            let obs = StepInput { y: &y, tokens: None };
            Ok(m.step(t, r, &prev, obs, &eps, &LossWeights { free_nats: 0.0, ..LossWeights::default() }, false)?.total)
        })
    }),
];

pub fn run(instances: usize) -> Vec<CaseResult> {
    CASES
        .iter()
        .map(|(name, f)| CaseResult {
            name,
            instances,
            worst: (0..instances as u64).map(|i| f(1000 + 97 * i)).fold(0.0, f64::max),
        })
        .collect()
}
