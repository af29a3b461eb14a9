use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::diffcore::{Init, NodeId, ParamId, ParamRegistry, Scalar, Tape, Tensor};
use crate::error::Result;
use crate::nn::{Activation, Embedding, Linear, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    /// Number of `SUM` tokens (`K`).
    pub summary_tokens: usize,
    /// Number of state-prefix tokens (`P`).
    pub prefix_tokens: usize,
    pub max_seq_len: usize,
    pub summary_hidden: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 2,
            layers: 2,
            ff: 128,
            summary_tokens: 8,
            prefix_tokens: 8,
            max_seq_len: 256,
            summary_hidden: 64,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1: Linear,
    ff2: Linear,
}

/// Decoder-only causal transformer. The same weights compress text into a
/// summary vector (via the trailing `SUM` tokens) and score / generate text
/// conditioned on a latent state (via projected prefix embeddings).
#[derive(Clone, Debug)]
pub struct TextModel {
    pub cfg: TextConfig,
    pub vocab: Vocab,
    pub latent_dim: usize,
    pub embed: Embedding,
    pub pos: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    pub prefix: Linear,
    pub summary: Mlp,
}

impl TextModel {
    pub fn declare<T: Scalar>(reg: &mut ParamRegistry<T>, cfg: &TextConfig, latent_dim: usize) -> Self {
        assert_eq!(cfg.d_model % cfg.heads, 0, "d_model must divide into heads");
        let d = cfg.d_model;
        let vocab = Vocab::new(cfg.summary_tokens);
        let embed = Embedding::declare(reg, "text.embed", vocab.size(), d);
        let pos = reg.declare("text.pos", &[Self::max_positions(cfg), d], Init::Normal(0.02), false);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let name = format!("text.block{i}");
                Block {
                    ln1_g: reg.declare(&format!("{name}.ln1.g"), &[d], Init::Ones, false),
                    ln1_b: reg.declare(&format!("{name}.ln1.b"), &[d], Init::Zeros, false),
                    q: Linear::declare(reg, &format!("{name}.q"), d, d),
                    k: Linear::declare(reg, &format!("{name}.k"), d, d),
                    v: Linear::declare(reg, &format!("{name}.v"), d, d),
                    o: Linear::declare(reg, &format!("{name}.o"), d, d),
                    ln2_g: reg.declare(&format!("{name}.ln2.g"), &[d], Init::Ones, false),
                    ln2_b: reg.declare(&format!("{name}.ln2.b"), &[d], Init::Zeros, false),
                    ff1: Linear::declare(reg, &format!("{name}.ff1"), d, cfg.ff),
                    ff2: Linear::declare(reg, &format!("{name}.ff2"), cfg.ff, d),
                }
            })
            .collect();
        let lnf_g = reg.declare("text.lnf.g", &[d], Init::Ones, false);
        let lnf_b = reg.declare("text.lnf.b", &[d], Init::Zeros, false);
        let prefix = Linear::declare(reg, "text.prefix", latent_dim, cfg.prefix_tokens * d);
        let summary = Mlp::declare(
            reg,
            "text.summary",
            &[cfg.summary_tokens * d, cfg.summary_hidden, latent_dim],
            Activation::Tanh,
        );
        Self {
            cfg: cfg.clone(),
            vocab,
            latent_dim,
            embed,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            prefix,
            summary,
        }
    }

    fn max_positions(cfg: &TextConfig) -> usize {
        cfg.max_seq_len + cfg.summary_tokens.max(cfg.prefix_tokens) + 1
    }

    /// Keeps the most recent `max_seq_len` tokens; an empty input becomes
    /// `[BOS, EOS]`.
    fn clip<'a>(&self, tokens: &'a [usize]) -> std::borrow::Cow<'a, [usize]> {
        if tokens.is_empty() {
            return vec![Vocab::BOS, Vocab::EOS].into();
        }
        let start = tokens.len().saturating_sub(self.cfg.max_seq_len);
        tokens[start..].into()
    }

    /// Runs the transformer over `[L, d]` input embeddings and returns the
    /// final normalized hidden states.
    fn hidden<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: NodeId) -> Result<NodeId> {
        let len = tape.value(x).rows();
        let d = self.cfg.d_model;
        let hd = d / self.cfg.heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let pos = tape.param(reg, self.pos);
        let pos = tape.slice_rows(pos, 0, len)?;
        let mut h = tape.add(x, pos)?;
        for b in &self.blocks {
            let g = tape.param(reg, b.ln1_g);
            let bb = tape.param(reg, b.ln1_b);
            let a = tape.layer_norm(h, g, bb)?;
            let q = b.q.forward(tape, reg, a)?;
            let k = b.k.forward(tape, reg, a)?;
            let v = b.v.forward(tape, reg, a)?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for i in 0..self.cfg.heads {
                let qh = tape.slice(q, i * hd, hd)?;
                let kh = tape.slice(k, i * hd, hd)?;
                let vh = tape.slice(v, i * hd, hd)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, scale)?;
                let s = tape.causal_mask(s)?;
                let p = tape.softmax(s)?;
                heads.push(tape.matmul(p, vh)?);
            }
            let att = if heads.len() == 1 { heads[0] } else { tape.concat(&heads)? };
            let att = b.o.forward(tape, reg, att)?;
            h = tape.add(h, att)?;

            let g = tape.param(reg, b.ln2_g);
            let bb = tape.param(reg, b.ln2_b);
            let a = tape.layer_norm(h, g, bb)?;
            let f = b.ff1.forward(tape, reg, a)?;
            let f = tape.relu(f)?;
            let f = b.ff2.forward(tape, reg, f)?;
            h = tape.add(h, f)?;
        }
        let g = tape.param(reg, self.lnf_g);
        let bb = tape.param(reg, self.lnf_b);
        tape.layer_norm(h, g, bb)
    }

    /// Compresses a token sequence into a vector of the latent dimension:
    /// append `SUM_1..SUM_K`, take their final hidden states, flatten and
    /// project through the summary MLP.
    pub fn encode_summary<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, tokens: &[usize]) -> Result<NodeId> {
        let tokens = self.clip(tokens);
        let k = self.cfg.summary_tokens;
        let mut ids = tokens.to_vec();
        ids.extend((0..k).map(|i| self.vocab.sum(i)));
        let x = self.embed.forward(tape, reg, &ids)?;
        let h = self.hidden(tape, reg, x)?;
        let s = tape.slice_rows(h, tokens.len(), k)?;
        let s = tape.reshape(s, &[k * self.cfg.d_model])?;
        self.summary.forward(tape, reg, s)
    }

    /// Summary of the missing-text marker `[BOS, NULLTEXT, EOS]`.
    pub fn null_summary<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>) -> Result<NodeId> {
        self.encode_summary(tape, reg, &[Vocab::BOS, Vocab::NULLTEXT, Vocab::EOS])
    }

    /// `[P, d]` prefix embeddings for a latent state.
    fn prefix_embeddings<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x_hat: NodeId) -> Result<NodeId> {
        let p = self.prefix.forward(tape, reg, x_hat)?;
        tape.reshape(p, &[self.cfg.prefix_tokens, self.cfg.d_model])
    }

    /// Per-token negative log-likelihood of `tokens[1..]` under teacher
    /// forcing with the state prefix prepended. Returns a `[L - 1]` node.
    pub fn token_nll<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x_hat: NodeId, tokens: &[usize]) -> Result<NodeId> {
        let tokens = self.clip(tokens);
        let tokens: Vec<usize> = if tokens.len() < 2 {
            vec![Vocab::BOS, Vocab::EOS]
        } else {
            tokens.to_vec()
        };
        let p = self.cfg.prefix_tokens;
        let n = tokens.len() - 1;
        let prefix = self.prefix_embeddings(tape, reg, x_hat)?;
        let emb = self.embed.forward(tape, reg, &tokens[..n])?;
        let seq = tape.concat_rows(&[prefix, emb])?;
        let h = self.hidden(tape, reg, seq)?;
        let h = tape.slice_rows(h, p, n)?;
        let table = tape.param(reg, self.embed.table);
        let logits = tape.matmul_nt(h, table)?;
        let logp = tape.log_softmax(logits)?;
        let picked = tape.pick(logp, &tokens[1..])?;
        tape.neg(picked)
    }

    /// Mean per-token negative log-likelihood of `tokens` given `x_hat`.
    pub fn text_loss<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x_hat: NodeId, tokens: &[usize]) -> Result<NodeId> {
        let nll = self.token_nll(tape, reg, x_hat, tokens)?;
        tape.mean(nll)
    }

    /// Autoregressive decoding after `[prefix(x_hat), BOS, prompt...]`.
    /// Temperature `0` is greedy with first-index tie-breaking. Only byte
    /// tokens and `EOS` can be emitted. Returns the prompt followed by at most
    /// `max_len` generated byte tokens.
    pub fn generate(
        &self,
        reg: &ParamRegistry<f32>,
        x_hat: &[f32],
        prompt: &[usize],
        max_len: usize,
        temperature: f32,
        seed: u64,
    ) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = vec![Vocab::BOS];
        ids.extend_from_slice(prompt);
        let room = Self::max_positions(&self.cfg) - self.cfg.prefix_tokens;
        let mut produced = 0;
        while produced < max_len && ids.len() < room {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(x_hat.to_vec()));
            let prefix = self.prefix_embeddings(&mut tape, reg, x)?;
            let emb = self.embed.forward(&mut tape, reg, &ids)?;
            let seq = tape.concat_rows(&[prefix, emb])?;
            let h = self.hidden(&mut tape, reg, seq)?;
            let last = tape.value(h).rows() - 1;
            let h = tape.slice_rows(h, last, 1)?;
            let table = tape.param(reg, self.embed.table);
            let logits = tape.matmul_nt(h, table)?;
            let logits = tape.value(logits).data();
            let allowed = |id: usize| Vocab::is_byte(id) || id == Vocab::EOS;
            let next = if temperature <= 0.0 {
                let mut best = Vocab::EOS;
                let mut best_v = f32::NEG_INFINITY;
                for (id, &v) in logits.iter().enumerate() {
                    if allowed(id) && v > best_v {
                        best = id;
                        best_v = v;
                    }
                }
                best
            } else {
                let max = logits
                    .iter()
                    .enumerate()
                    .filter(|(id, _)| allowed(*id))
                    .map(|(_, &v)| v)
                    .fold(f32::NEG_INFINITY, f32::max);
                let weights: Vec<f64> = logits
                    .iter()
                    .enumerate()
                    .map(|(id, &v)| {
                        if allowed(id) {
                            (((v - max) / temperature) as f64).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = Vocab::EOS;
                for (id, w) in weights.iter().enumerate() {
                    if *w > 0.0 {
                        pick = id;
                        if u < *w {
                            break;
                        }
                        u -= w;
                    }
                }
                pick
            };
            if next == Vocab::EOS {
                break;
            }
            ids.push(next);
            produced += 1;
        }
        Ok(ids[1..].to_vec())
    }
}
