//! Compares reverse-mode gradients of a GRU step against central finite
//! differences.

use lbs::diffcore::{ParamRegistry, Tape, Tensor};
use lbs::nn::{init_params, GruCell};

fn loss(reg: &ParamRegistry<f64>, cell: &GruCell, x: &[f64], h: &[f64]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let xn = tape.leaf(Tensor::vector(x.to_vec()));
    let hn = tape.constant(Tensor::vector(h.to_vec()));
    let out = cell.step(&mut tape, reg, xn, hn).unwrap();
    let sq = tape.square(out).unwrap();
    let l = tape.sum(sq).unwrap();
    tape.backward(l).unwrap();
    (tape.scalar(l), tape.grad(xn).data().to_vec())
}

fn main() {
    let mut reg = ParamRegistry::<f64>::new();
    let cell = GruCell::declare(&mut reg, "gru", 3, 5);
    init_params(&mut reg, 1);
    let x = vec![0.4, -1.2, 0.7];
    let h = vec![0.1, -0.3, 0.2, 0.0, 0.5];
    let (value, analytic) = loss(&reg, &cell, &x, &h);
    println!("loss = {value:.6}");
    println!("{:>4} {:>14} {:>14} {:>10}", "i", "analytic", "numeric", "rel err");
    let step = 1e-5;
    for i in 0..x.len() {
        let mut up = x.clone();
        up[i] += step;
        let mut down = x.clone();
        down[i] -= step;
        let numeric = (loss(&reg, &cell, &up, &h).0 - loss(&reg, &cell, &down, &h).0) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
        println!("{i:>4} {:>14.8} {numeric:>14.8} {rel:>10.2e}", analytic[i]);
    }
}
