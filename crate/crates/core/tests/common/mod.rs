#![allow(dead_code)]
pub mod grad_suite;

use lbs::diffcore::{NodeId, ParamRegistry, Tape, Tensor};
use lbs::ssm::ModelConfig;
use lbs::textcodec::TextConfig;
use lbs::training::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Uniform values with magnitude in `[gap, hi]` and random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Reduces any node to a scalar through a fixed random weighting, so every
/// output entry contributes a distinct cotangent.
pub fn project(tape: &mut Tape<f64>, out: NodeId, seed: u64) -> lbs::Result<NodeId> {
    let shape = tape.value(out).shape().to_vec();
    let w = uniform(&mut rng(seed ^ 0xabc), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients with respect to every entry of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> lbs::Result<NodeId>,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = f(&mut tape, &ids).expect("forward");
        tape.scalar(root)
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&mut tape, &ids).expect("forward");
    tape.backward(root).expect("backward");
    let grads: Vec<Tensor<f64>> = ids.iter().map(|&i| tape.grad(i)).collect();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let num = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[k].data()[j], num));
        }
    }
    worst
}

/// Same check against registry parameters. At most `per_param` randomly
/// chosen coordinates of each parameter are perturbed.
pub fn check_params<F>(reg: &ParamRegistry<f64>, per_param: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamRegistry<f64>) -> lbs::Result<NodeId>,
{
    let mut with_grads = reg.clone();
    let mut tape = Tape::new();
    let root = f(&mut tape, reg).expect("forward");
    tape.backward(root).expect("backward");
    with_grads.zero_grads();
    tape.accumulate_param_grads(&mut with_grads);
    let eval = |r: &ParamRegistry<f64>| {
        let mut tape = Tape::new();
        let root = f(&mut tape, r).expect("forward");
        tape.scalar(root)
    };
    let mut pick = rng(seed);
    let mut worst = 0.0f64;
    let mut probe = reg.clone();
    for id in reg.ids().collect::<Vec<_>>() {
        let n = reg.value(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| pick.random_range(0..n)).collect()
        };
        for j in coords {
            let orig = probe.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe);
            probe.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe);
            probe.value_mut(id).data_mut()[j] = orig;
            let num = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(with_grads.grad(id).data()[j], num));
        }
    }
    worst
}

/// A deliberately small text model for gradient checks and fast tests.
pub fn tiny_text() -> TextConfig {
    TextConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        ff: 16,
        summary_tokens: 2,
        prefix_tokens: 2,
        max_seq_len: 32,
        summary_hidden: 8,
    }
}

pub fn tiny_model(linear_heads: bool) -> ModelConfig {
    ModelConfig {
        latent_dim: 3,
        hidden_dim: 4,
        obs_dim: 1,
        mlp_hidden: 6,
        linear_heads,
        text: tiny_text(),
    }
}

/// Small training configuration that still exercises every component.
pub fn small_train() -> TrainConfig {
    TrainConfig {
        latent_dim: 4,
        hidden_dim: 8,
        summary_tokens: 2,
        prefix_tokens: 2,
        d_model: 16,
        heads: 2,
        layers: 1,
        ff: 32,
        max_seq_len: 96,
        mlp_hidden: 16,
        max_epochs: 2,
        lr_start: 3e-3,
        lr_end: 3e-4,
        ..TrainConfig::default()
    }
}
