//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over
    /// every element of every input.
    pub max_rel_error: f64,
    /// True when a relu input or pooling tie fell within `epsilon` of a kink.
    /// Such points are reported rather than failed.
    pub nondifferentiable: bool,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.nondifferentiable || self.max_rel_error < tol
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], kink_tol: Option<f64>) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    if let Some(tol) = kink_tol {
        tape.track_kinks(tol);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_ref(t)).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item()?, tape.kinks()))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences with step `epsilon`, perturbing each input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::<f64>::new();
        tape.track_kinks(epsilon);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param_ref(t)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    };

    let mut kinks = evaluate(&f, inputs, Some(epsilon))?.1;
    let mut worst = 0.0f64;
    let mut elements = 0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let (plus, k1) = evaluate(&f, &probe, Some(epsilon))?;
            probe[i].data_mut()[j] = orig - epsilon;
            let (minus, k2) = evaluate(&f, &probe, Some(epsilon))?;
            probe[i].data_mut()[j] = orig;
            kinks += k1 + k2;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = analytic[i].data()[j];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
            elements += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        nondifferentiable: kinks > 0,
        elements,
    })
}

/// Reduces a tensor-valued node to a scalar through a fixed projection
/// `sum_i w_i * y_i`, so tensor-valued ops can be checked with [`grad_check`].
pub fn project(tape: &mut Tape<'_, f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let n = tape.value(y).len();
    if weights.len() != n {
        return Err(Error::dim(format!(
            "projection has {} weights for {n} values",
            weights.len()
        )));
    }
    let flat = tape.reshape(y, vec![n])?;
    let w = tape.leaf(weights.clone().reshape(vec![1, n])?);
    let b = tape.leaf(Tensor::zeros([1]));
    tape.affine(flat, w, b)
}

/// Differentiable ops covered by [`op_suite`].
pub const SUITE_OPS: [&str; 7] = ["conv2d", "affine", "relu", "maxpool2x2", "reshape", "mse", "softmax_xent"];

/// Tolerance and step used by [`op_suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub points: usize,
    pub failures: usize,
    /// Points skipped as non-differentiable (a kink within epsilon).
    pub kinks: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn check_point(op: &str, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let eps = SUITE_EPSILON;
    match op {
        "conv2d" => {
            let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(3..=5), rng.gen_range(3..=5));
            let (co, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3usize));
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=1);
            let inputs = [random(rng, &[c, h, w]), random(rng, &[co, c, k, k]), random(rng, &[co])];
            let out_len = co * ((h + 2 * padding - k) / stride + 1) * ((w + 2 * padding - k) / stride + 1);
            let proj = random(rng, &[out_len]);
            grad_check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride, padding)?;
                    project(t, y, &proj)
                },
                &inputs,
                eps,
            )
        }
        "affine" => {
            let (n, din, dout) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=4));
            let inputs = [random(rng, &[n, din]), random(rng, &[dout, din]), random(rng, &[dout])];
            let proj = random(rng, &[n * dout]);
            grad_check(
                |t, v| {
                    let y = t.affine(v[0], v[1], v[2])?;
                    project(t, y, &proj)
                },
                &inputs,
                eps,
            )
        }
        "relu" => {
            let n = rng.gen_range(1..=12);
            let proj = random(rng, &[n]);
            let x = random(rng, &[n]);
            grad_check(
                |t, v| {
                    let y = t.relu(v[0])?;
                    project(t, y, &proj)
                },
                &[x],
                eps,
            )
        }
        "maxpool2x2" => {
            let (c, h, w) = (rng.gen_range(1..=2), 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3));
            let proj = random(rng, &[c * h * w / 4]);
            let x = random(rng, &[c, h, w]);
            grad_check(
                |t, v| {
                    let y = t.maxpool2x2(v[0])?;
                    project(t, y, &proj)
                },
                &[x],
                eps,
            )
        }
        "reshape" => {
            let (n, c, h) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let proj = random(rng, &[n * c * h * h]);
            let x = random(rng, &[n, c, h, h]);
            grad_check(
                |t, v| {
                    let y = t.flatten(v[0])?;
                    let y = t.reshape(y, vec![n * c * h * h])?;
                    project(t, y, &proj)
                },
                &[x],
                eps,
            )
        }
        "mse" => {
            let n = rng.gen_range(1..=10);
            let inputs = [random(rng, &[n]), random(rng, &[n])];
            grad_check(|t, v| t.mse(v[0], v[1]), &inputs, eps)
        }
        "softmax_xent" => {
            let (n, c) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let x = random(rng, &[n, c]).map(|v| 3.0 * v);
            grad_check(|t, v| t.softmax_xent(v[0], &targets), &[x], eps)
        }
        other => Err(Error::Invalid(format!("no gradient check for op `{other}`"))),
    }
}

/// Checks every differentiable tape op at `points` random instances each,
/// drawn from a stream per op so results do not depend on which ops run.
pub fn op_suite(points: usize, seed: u64) -> Result<Vec<OpCheck>> {
    SUITE_OPS
        .iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut check = OpCheck {
                op,
                points,
                failures: 0,
                kinks: 0,
                max_rel_error: 0.0,
            };
            for _ in 0..points {
                let r = check_point(op, &mut rng)?;
                if r.nondifferentiable {
                    check.kinks += 1;
                } else {
                    check.max_rel_error = check.max_rel_error.max(r.max_rel_error);
                }
                if !r.passes(SUITE_TOLERANCE) {
                    check.failures += 1;
                }
            }
            Ok(check)
        })
        .collect()
}
