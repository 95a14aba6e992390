//! Central finite-difference checks for analytic gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use super::param::Module;
use crate::rng;

/// Central-difference steps; smaller ones rescue entries where a ReLU input
/// lies within the larger step of zero.
pub const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];

/// Relative error. Central differences carry roundoff of order
/// `eps * |loss| / step`, so gradients that vanish analytically (a bias
/// feeding batch norm, say) are compared on an absolute scale tied to the
/// loss magnitude.
pub fn rel_err(analytic: f64, numeric: f64, loss: f64) -> f64 {
    (analytic - numeric).abs()
        / analytic
            .abs()
            .max(numeric.abs())
            .max(1e-5 * loss.abs().max(1.0))
}

/// Moves every trainable value off its initial point by `0.1 * N(0, 1)`.
/// Zero-initialized biases would otherwise leave small heads with
/// exactly-zero outputs.
pub fn jitter<M: Module + ?Sized>(m: &mut M, seed: u64) {
    let mut r = rng::seeded(seed);
    for p in m.params_mut().into_iter().filter(|p| p.trainable) {
        for v in &mut p.value {
            *v += 0.1 * r.sample::<f64, _>(StandardNormal);
        }
    }
}

fn nudge<M: Module + ?Sized>(m: &mut M, flat: usize, delta: f64) {
    let mut offset = 0;
    for p in m.params_mut() {
        if flat < offset + p.len() {
            p.value[flat - offset] += delta;
            return;
        }
        offset += p.len();
    }
    panic!("index {flat} out of range");
}

/// Largest relative error over every trainable value of `m` whose flat index
/// satisfies `select`. `analytic` is indexed like `m.flat_grads()`.
pub fn max_param_error<M: Module>(
    m: &mut M,
    analytic: &[f64],
    select: impl Fn(usize) -> bool,
    loss: impl Fn(&M) -> f64,
) -> f64 {
    let trainable: Vec<bool> = m
        .params()
        .iter()
        .flat_map(|p| std::iter::repeat(p.trainable).take(p.len()))
        .collect();
    let base = loss(m);
    let mut worst = 0.0_f64;
    for i in 0..m.num_values() {
        if !trainable[i] || !select(i) {
            continue;
        }
        let err = STEPS
            .iter()
            .map(|&h| {
                nudge(m, i, h);
                let up = loss(m);
                nudge(m, i, -2.0 * h);
                let down = loss(m);
                nudge(m, i, h);
                rel_err(analytic[i], (up - down) / (2.0 * h), base)
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(err);
    }
    worst
}

/// Largest relative error of `analytic` against differences of `loss` at `x`.
pub fn max_input_error(x: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> f64 {
    let base = loss(x);
    let mut v = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..v.len() {
        let keep = v[i];
        let err = STEPS
            .iter()
            .map(|&h| {
                v[i] = keep + h;
                let up = loss(&v);
                v[i] = keep - h;
                let down = loss(&v);
                v[i] = keep;
                rel_err(analytic[i], (up - down) / (2.0 * h), base)
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_differences() {
        let x = [1.0, -2.0, 0.5];
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = max_input_error(&x, &grad, |v| v.iter().map(|a| a * a).sum());
        assert!(err < 1e-8, "{err}");
        let wrong: Vec<f64> = grad.iter().map(|g| g * 1.01).collect();
        assert!(max_input_error(&x, &wrong, |v| v.iter().map(|a| a * a).sum()) > 1e-3);
    }
}
