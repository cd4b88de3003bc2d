//! Central finite-difference gradient checking used across the crate's
//! tests. The oracle rebuilds the forward pass from scratch at perturbed
//! inputs and never touches the adjoint code paths.

use alloc::vec::Vec;

use super::{Shape, Tape, Var};

/// Checks every requested leaf gradient of `build` against central finite
/// differences with step `delta`.
///
/// `build` must construct the same graph for any input values and return
/// a scalar loss. Elements are subsampled with a deterministic stride so
/// large tensors stay affordable.
pub(crate) fn check_gradients(
    inputs: &[(Shape, Vec<f32>)],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    delta: f32,
    tol: f32,
    max_checks_per_input: usize,
) {
    let eval = |values: &[Vec<f32>]| -> f32 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values.iter())
            .map(|((shape, _), v)| tape.leaf(*shape, v.clone()))
            .collect();
        let loss = build(&mut tape, &vars);
        assert!(tape.shape(loss).is_scalar(), "loss must be scalar");
        tape.value(loss)[0]
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(shape, v)| tape.leaf(*shape, v.clone()))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("backward failed");

    let base: Vec<Vec<f32>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    for (i, (_, v)) in inputs.iter().enumerate() {
        let ad = tape
            .grad(vars[i])
            .unwrap_or_else(|| panic!("missing gradient for input {i}"))
            .to_vec();
        let stride = (v.len() / max_checks_per_input.max(1)).max(1);
        for j in (0..v.len()).step_by(stride) {
            let mut plus = base.clone();
            plus[i][j] += delta;
            let mut minus = base.clone();
            minus[i][j] -= delta;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * delta);
            let got = ad[j];
            let denom = got.abs().max(fd.abs()).max(0.05);
            assert!(
                (got - fd).abs() / denom <= tol,
                "input {i} element {j}: autodiff {got:.6e} vs finite diff {fd:.6e}"
            );
        }
    }
}

/// Deterministic pseudo-random fill in [lo, hi) for test inputs.
pub(crate) fn fill(seed: u64, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| lo + (hi - lo) * (rng.next_u32() as f32 / u32::MAX as f32))
        .collect()
}
