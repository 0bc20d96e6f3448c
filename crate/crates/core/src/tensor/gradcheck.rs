//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes on fresh tapes, so it
//! is independent of every backward rule it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Scale floor of the relative error. Inputs the loss does not depend on
/// (a key bias under softmax, for one) have an exact zero gradient, and their
/// numeric estimate is pure rounding noise around 1e-10.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Relative error per checked input: `‖analytic − numeric‖ / (‖numeric‖ + SCALE_FLOOR)`.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `forward` with central differences of step
/// `step` for every element of every input. `forward` receives the inputs as
/// trainable leaves and must return a scalar.
pub fn check_gradients<G>(inputs: &[Tensor<f64>], step: f64, forward: G) -> Result<GradReport, TensorError>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let l = forward(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };

    let mut report = GradReport {
        relative_errors: Vec::new(),
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).to_f64();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(numeric.iter().copied());
        report.relative_errors.push(diff / (scale + SCALE_FLOOR));
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

fn norm(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

/// Reduces a tensor to a scalar through a fixed random weighting, so that
/// every output element contributes a distinct amount to the checked loss.
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let weights = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}
