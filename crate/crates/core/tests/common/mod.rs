//! Finite-difference oracle shared by the integration suites.
#![allow(dead_code)]

use vltp_core::numerics::{Real, Tape, Tensor, Var};
use vltp_core::rng::SplitMix64;
use vltp_core::Result;

/// Worst relative error between an analytic and a numeric gradient,
/// measured elementwise against `max(|a|, |n|, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`. The divisor is the step actually
/// realized after rounding `x ± eps` to the element type.
pub fn central_diff<T: Real>(f: impl Fn(&[T]) -> f64, x: &[T], eps: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let up = T::from_f64(x[i].to_f64() + eps);
            let down = T::from_f64(x[i].to_f64() - eps);
            p[i] = up;
            let hi = f(&p);
            p[i] = down;
            let lo = f(&p);
            p[i] = x[i];
            (hi - lo) / (up.to_f64() - down.to_f64())
        })
        .collect()
}

pub struct OpCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl OpCheck {
    pub fn rel_err(&self) -> f64 {
        rel_err(&self.analytic, &self.numeric, 1e-6)
    }
}

/// Gradient of `Σ c ⊙ op(inputs)` for a random probe `c`, analytically via the
/// tape and numerically via central differences over every input element.
pub fn check_op<T: Real>(
    inputs: &[Tensor<T>],
    op: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    eps: f64,
    rng: &mut SplitMix64,
) -> OpCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = op(&mut tape, &vars).unwrap();
    let probe: Tensor<T> = Tensor::uniform(tape.shape(y), -1.0, 1.0, rng);
    let c = tape.constant(probe.clone());
    let prod = tape.mul(y, c).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for v in &vars {
        analytic.extend(grads.get(*v).unwrap().data().iter().map(|g| g.to_f64()));
    }

    let eval = |ins: &[Tensor<T>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let y = op(&mut t, &vs).unwrap();
        t.value(y).data().iter().zip(probe.data()).map(|(a, b)| a.to_f64() * b.to_f64()).sum()
    };
    let mut numeric = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        numeric.extend(central_diff(
            |p| {
                let mut ins = inputs.to_vec();
                ins[i] = Tensor::new(input.shape().to_vec(), p.to_vec()).unwrap();
                eval(&ins)
            },
            input.data(),
            eps,
        ));
    }
    OpCheck { analytic, numeric }
}


use vltp_core::params::ParamStore;

/// Every parameter redrawn uniformly from `[-scale, scale]`, so no tensor
/// keeps a special initial value (zeros, ones) that could hide a bug.
pub fn scrambled(params: &ParamStore, scale: f32, seed: u64) -> ParamStore {
    let mut out = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for (i, name) in names.iter().enumerate() {
        let mut rng = SplitMix64::indexed(seed, "scramble", i as u64);
        for v in out.get_mut(name).unwrap().data_mut() {
            *v = rng.uniform(-scale, scale);
        }
    }
    out
}
