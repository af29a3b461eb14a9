//! Overfits the text model on one (state, sentence) pair and decodes the
//! sentence back from the state.

use lbs::diffcore::{ParamRegistry, Tape, Tensor};
use lbs::nn::init_params;
use lbs::textcodec::{detokenize, generate_text, summary_vector, tokenize, TextConfig, TextModel};
use lbs::training::{adamw_update, AdamWConfig, OptimizerState};

fn main() -> lbs::Result<()> {
    let sentence = "DATE=2014-03-02 choppy and peaking. Notice: a sharp rise is coming.";
    let tokens = tokenize(sentence);
    println!("{} tokens; round trip: {:?}", tokens.len(), detokenize(&tokens));

    let latent = 16;
    let mut reg = ParamRegistry::<f32>::new();
    let tm = TextModel::declare(&mut reg, &TextConfig::default(), latent);
    init_params(&mut reg, 0);
    let state: Vec<f32> = (0..latent).map(|i| (i as f32 * 0.7).sin()).collect();
    let mut opt = OptimizerState::new(&reg);
    let adam = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    for step in 0..400 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(state.clone()));
        let loss = tm.text_loss(&mut tape, &reg, x, &tokens)?;
        if step % 50 == 0 {
            println!("step {step:>3}  nll {:.4}", tape.scalar(loss));
        }
        if tape.scalar(loss) < 0.05 {
            println!("step {step:>3}  nll {:.4}", tape.scalar(loss));
            break;
        }
        tape.backward(loss)?;
        reg.zero_grads();
        tape.accumulate_param_grads(&mut reg);
        adamw_update(&mut reg, &mut opt, 1e-3, &adam);
    }
    println!("greedy: {}", generate_text(&tm, &reg, &state, 96, 0.0, 0)?);
    println!("summary: {:?}", &summary_vector(&tm, &reg, &tokens)?[..4]);
    Ok(())
}
