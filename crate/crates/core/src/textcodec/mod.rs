//! Byte-level text model standing in for a pretrained language model.
//!
//! One set of weights serves three roles: compressing an observation's text
//! into a summary vector, scoring text given a latent state, and generating
//! text from a latent state.

mod model;
mod vocab;

pub use model::{TextConfig, TextModel};
pub use vocab::{detokenize, tokenize, Vocab, BYTE_TOKENS};

use crate::diffcore::{ParamRegistry, Tape, Tensor};
use crate::error::Result;

/// Greedy or tempered decoding from a latent state, returned as text.
pub fn generate_text(
    model: &TextModel,
    reg: &ParamRegistry<f32>,
    x_hat: &[f32],
    max_len: usize,
    temperature: f32,
    seed: u64,
) -> Result<String> {
    let ids = model.generate(reg, x_hat, &[], max_len, temperature, seed)?;
    Ok(detokenize(&ids))
}

/// Value-level convenience wrapper over [`TextModel::encode_summary`].
pub fn summary_vector(model: &TextModel, reg: &ParamRegistry<f32>, tokens: &[usize]) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let s = model.encode_summary(&mut tape, reg, tokens)?;
    Ok(tape.value(s).data().to_vec())
}

/// Value-level convenience wrapper over [`TextModel::text_loss`].
pub fn text_nll(model: &TextModel, reg: &ParamRegistry<f32>, x_hat: &[f32], tokens: &[usize]) -> Result<f32> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(x_hat.to_vec()));
    let l = model.text_loss(&mut tape, reg, x, tokens)?;
    Ok(tape.scalar(l))
}
