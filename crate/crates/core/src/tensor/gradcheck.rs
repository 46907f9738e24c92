//! Central finite-difference gradient checking (f64 only).
//!
//! The finite-difference side is an independent oracle: it only evaluates
//! the forward pass and never touches the recorded backward closures.

use super::{Tape, Var};
use ndarray::ArrayD;
use rand::Rng;

/// Max relative error between analytic and central-difference gradients of
/// `build` (a scalar-valued function of the given tensors), checking every
/// element of every input.
pub fn max_rel_err(
    inputs: &[ArrayD<f64>],
    step: f64,
    build: impl for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Var<'a, f64>,
) -> f64 {
    let all: Vec<Vec<usize>> = inputs
        .iter()
        .map(|a| (0..a.len()).collect())
        .collect();
    max_rel_err_at(inputs, &all, step, build)
}

/// Like [`max_rel_err`] but checking `per_input` randomly sampled elements
/// of each input tensor (all elements when a tensor is smaller than that).
pub fn max_rel_err_sampled(
    inputs: &[ArrayD<f64>],
    per_input: usize,
    step: f64,
    rng: &mut impl Rng,
    build: impl for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Var<'a, f64>,
) -> f64 {
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|a| {
            if a.len() <= per_input {
                (0..a.len()).collect()
            } else {
                (0..per_input).map(|_| rng.gen_range(0..a.len())).collect()
            }
        })
        .collect();
    max_rel_err_at(inputs, &picks, step, build)
}

fn max_rel_err_at(
    inputs: &[ArrayD<f64>],
    picks: &[Vec<usize>],
    step: f64,
    build: impl for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Var<'a, f64>,
) -> f64 {
    let analytic: Vec<ArrayD<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = build(&tape, &vars);
        let grads = tape.backward(root);
        vars.iter()
            .map(|v| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()))
            })
            .collect()
    };

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|a| tape.leaf(a.clone())).collect();
        build(&tape, &vars).scalar()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (ti, positions) in picks.iter().enumerate() {
        for &pos in positions {
            let orig = work[ti].as_slice().unwrap()[pos];
            work[ti].as_slice_mut().unwrap()[pos] = orig + step;
            let fp = eval(&work);
            work[ti].as_slice_mut().unwrap()[pos] = orig - step;
            let fm = eval(&work);
            work[ti].as_slice_mut().unwrap()[pos] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let a = analytic[ti].as_slice().unwrap()[pos];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
