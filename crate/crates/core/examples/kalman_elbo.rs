//! Exact inference on a scalar linear-Gaussian state space model: the
//! Kalman log-likelihood, the ELBO of the exact posterior, and how the
//! bound loosens as the variational chain is perturbed.

use lbs::eval::{exact_posterior_conditionals, kalman_filter_oracle, scalar_elbo, LgssmParams};

fn main() -> lbs::Result<()> {
    let p = LgssmParams::scalar(0.9, 0.3, 1.0, 0.5, 1.0);
    let (_, ys) = p.sample(200, 11);
    let kf = kalman_filter_oracle(&p, &ys)?;
    let ys: Vec<f64> = ys.into_iter().map(|v| v[0]).collect();
    let exact = exact_posterior_conditionals(&p, &ys)?;
    println!("log p(y)            = {:.6}", kf.log_likelihood);
    println!("ELBO(exact q)       = {:.6}", scalar_elbo(&p, &ys, &exact)?);
    for shift in [0.1, 0.5, 1.0] {
        let q: Vec<_> = exact.iter().map(|c| lbs::eval::ScalarConditional { offset: c.offset + shift, ..*c }).collect();
        println!("ELBO(mean + {shift:.1})    = {:.6}", scalar_elbo(&p, &ys, &q)?);
    }
    for widen in [0.5, 1.0] {
        let q: Vec<_> = exact.iter().map(|c| lbs::eval::ScalarConditional { var: c.var * f64::exp(widen), ..*c }).collect();
        println!("ELBO(log-var + {widen:.1}) = {:.6}", scalar_elbo(&p, &ys, &q)?);
    }
    Ok(())
}
