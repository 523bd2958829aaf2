//! Flow-matching primitives on a toy problem: the straight path between
//! noise and data, the velocity target, logit-normal timesteps and Euler
//! integration of the exact velocity field.

use avlink::flowmatch::{euler_sample, fm_loss, interpolate, sample_t, velocity_target, LogitNormalParams};
use avlink::rng::{stream, Stream};
use ndarray::array;

fn main() -> avlink::Result<()> {
    let x0 = array![[0.5, -1.0], [2.0, 0.0]];
    let x1 = array![[1.0, 1.0], [-1.0, 3.0]];
    for t in [0.0, 0.25, 1.0] {
        println!("x_{t} = {:?}", interpolate(&x0, &x1, t)?.into_raw_vec_and_offset().0);
    }
    let target = velocity_target(&x0, &x1)?;
    println!("loss of the exact velocity: {}", fm_loss(&target, &x0, &x1)?);
    println!("loss of zero velocity:      {:.4}", fm_loss(&(&target * 0.0), &x0, &x1)?);

    // Along the straight path the velocity is constant, so Euler is exact.
    let out = euler_sample(|_, _| Ok(target.clone()), &x0, 8)?;
    println!("euler(8 steps) lands on x1: {}", out == x1);

    // dx/dt = -x has x(1) = x0 / e; error shrinks linearly with the step size.
    let x = array![1.0f64];
    for steps in [8, 16, 32] {
        let e = (euler_sample(|x, _| Ok(-x), &x, steps)?[0] - (-1.0f64).exp()).abs();
        println!("dx/dt = -x, {steps:2} steps: error {e:.5}");
    }

    let mut rng = stream(0, Stream::Timestep);
    for (name, p) in [("base", LogitNormalParams::STANDARD), ("fusion", LogitNormalParams::SHIFTED)] {
        let mut ts: Vec<f64> = (0..20_000).map(|_| sample_t(&p, &mut rng)).collect();
        ts.sort_by(f64::total_cmp);
        println!("{name:>6} timesteps: median {:.3}", ts[ts.len() / 2]);
    }
    Ok(())
}
