//! Central-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array2, ParamStore, Tape, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2 {
    Array2::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Builds `sum(op(inputs) * w)` for a fixed projection `w`; scalar outputs are used as is.
fn projected<F>(inputs: &[Array2], w: &Array2, f: &F) -> (Tape, Vec<Var>, Var)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = f(&mut tape, &vars);
    let loss = if tape.shape(out) == (1, 1) {
        out
    } else {
        let wv = tape.leaf(w.clone());
        let m = tape.mul(out, wv).expect("projection matches output shape");
        tape.sum(m)
    };
    (tape, vars, loss)
}

/// Worst norm-wise relative error, over inputs, between the tape's gradient
/// of a random projection of `f` and its central-difference estimate.
/// `f` must succeed on inputs of the given shapes.
pub fn op_gradient_error<F>(inputs: &[Array2], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone())).collect();
        let out = f(&mut t, &vars);
        t.shape(out)
    };
    let w = random(out_shape.0, out_shape.1, &mut rng);
    let (tape, vars, loss) = projected(inputs, &w, &f);
    let grads = tape.backward(loss).expect("finite loss");
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Array2::zeros(input.rows(), input.cols()));
        let mut diff = 0.0;
        let mut scale: f64 = 0.0;
        for e in 0..input.len() {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[e] += delta;
                let (t, _, l) = projected(&moved, &w, &f);
                t.value(l).get(0, 0)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            diff += (a - numeric).powi(2);
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        worst = worst.max(diff.sqrt() / scale.max(1e-10));
    }
    worst
}

/// `store` moved by `h` along `dirs`, one direction per parameter.
pub fn perturbed(store: &ParamStore, dirs: &[Array2], h: f64) -> ParamStore {
    let mut out = store.clone();
    for (name, d) in store.names().iter().zip(dirs) {
        let id = out.id(name).expect("name from the same store");
        out.value_mut(id).axpy(h, d);
    }
    out
}

/// Relative error between the analytic directional derivative of `loss`
/// along a random direction and its central-difference estimate. `grads`
/// holds one gradient per parameter of `store`.
pub fn directional_gradient_error<L>(store: &ParamStore, grads: &[Array2], seed: u64, loss: L) -> f64
where
    L: Fn(&ParamStore) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Array2> = store.values().iter().map(|v| random(v.rows(), v.cols(), &mut rng)).collect();
    let analytic: f64 =
        grads.iter().zip(&dirs).map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
    let numeric =
        (loss(&perturbed(store, &dirs, FD_STEP)) - loss(&perturbed(store, &dirs, -FD_STEP))) / (2.0 * FD_STEP);
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-12)
}
