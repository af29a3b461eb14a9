//! Parameterized layers: linear maps, MLPs, the GRU cell and token embeddings.

use crate::diffcore::{Init, NodeId, ParamId, ParamRegistry, Scalar, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// `y = W x + b` with `W: [out, in]`. Accepts a vector or a `[rows, in]`
/// matrix (one input per row).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn declare<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = reg.declare(&format!("{name}.w"), &[out_dim, in_dim], Init::XavierUniform, true);
        let b = reg.declare(&format!("{name}.b"), &[out_dim], Init::Zeros, false);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.is_empty() || shape[shape.len() - 1] != self.in_dim {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.out_dim, self.in_dim],
            });
        }
        let w = tape.param(reg, self.w);
        let b = tape.param(reg, self.b);
        let y = tape.matmul_nt(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Stack of linear layers with an activation between consecutive layers and
/// none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn declare<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::declare(reg, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape {
                    op: "mlp",
                    lhs: vec![pair[0].out_dim],
                    rhs: vec![pair[1].in_dim],
                });
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: NodeId) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, reg, h)?;
            if i < last {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }
}

/// Single-layer GRU cell:
///
/// ```text
/// z  = sigmoid(Wz x + Uz h + bz)
/// r  = sigmoid(Wr x + Ur h + br)
/// n  = tanh(Wn x + r * (Un h) + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
}

impl GruCell {
    pub fn declare<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let mut w = |gate: &str| {
            (
                reg.declare(&format!("{name}.w_{gate}"), &[hidden_dim, input_dim], Init::XavierUniform, true),
                reg.declare(&format!("{name}.u_{gate}"), &[hidden_dim, hidden_dim], Init::XavierUniform, true),
                reg.declare(&format!("{name}.b_{gate}"), &[hidden_dim], Init::Zeros, false),
            )
        };
        let (w_z, u_z, b_z) = w("z");
        let (w_r, u_r, b_r) = w("r");
        let (w_n, u_n, b_n) = w("n");
        Self {
            input_dim,
            hidden_dim,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_n,
            u_n,
            b_n,
        }
    }

    fn affine<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        x: NodeId,
        w: ParamId,
    ) -> Result<NodeId> {
        let w = tape.param(reg, w);
        tape.matmul_nt(x, w)
    }

    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: NodeId, h: NodeId) -> Result<NodeId> {
        let (xs, hs) = (tape.value(x).shape().to_vec(), tape.value(h).shape().to_vec());
        if xs != [self.input_dim] || hs != [self.hidden_dim] {
            return Err(Error::Shape {
                op: "gru_step",
                lhs: xs,
                rhs: hs,
            });
        }
        let gate = |tape: &mut Tape<T>, w, u, b| -> Result<NodeId> {
            let wx = self.affine(tape, reg, x, w)?;
            let uh = self.affine(tape, reg, h, u)?;
            let s = tape.add(wx, uh)?;
            let b = tape.param(reg, b);
            let s = tape.add_bias(s, b)?;
            tape.sigmoid(s)
        };
        let z = gate(tape, self.w_z, self.u_z, self.b_z)?;
        let r = gate(tape, self.w_r, self.u_r, self.b_r)?;

        let wx = self.affine(tape, reg, x, self.w_n)?;
        let uh = self.affine(tape, reg, h, self.u_n)?;
        let ruh = tape.mul(r, uh)?;
        let pre = tape.add(wx, ruh)?;
        let bn = tape.param(reg, self.b_n);
        let pre = tape.add_bias(pre, bn)?;
        let n = tape.tanh(pre)?;

        // h' = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

/// Lookup table of `[vocab, dim]` rows.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn declare<T: Scalar>(reg: &mut ParamRegistry<T>, name: &str, vocab: usize, dim: usize) -> Self {
        let table = reg.declare(name, &[vocab, dim], Init::Normal(0.02), false);
        Self { table, vocab, dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, ids: &[usize]) -> Result<NodeId> {
        let t = tape.param(reg, self.table);
        tape.gather(t, ids)
    }
}

/// Initializes every declared parameter: Xavier-uniform weights, zero
/// biases, `N(0, 0.02)` embedding rows. Reproducible from `seed`.
pub fn init_params<T: Scalar>(reg: &mut ParamRegistry<T>, seed: u64) {
    reg.init(seed);
}
