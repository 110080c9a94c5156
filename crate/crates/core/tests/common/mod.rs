//! Shared helpers for the integration suites.

use fedsurg::tape::{Tape, Var};
use fedsurg::tensor::Tensor;

/// Relative-error gate used by all gradient checks.
pub fn close(analytic: f64, numeric: f64, tol: f64) -> bool {
    let denom = analytic.abs().max(numeric.abs()).max(1e-2);
    (analytic - numeric).abs() / denom < tol
}

/// Central finite-difference check of a tape-built scalar function
/// against its reverse-mode gradients. `build` must register the given
/// leaf tensors in order and return their vars plus the loss node.
pub fn finite_diff_check(
    build: &dyn Fn(&mut Tape, &[Tensor]) -> (Vec<Var>, Var),
    leaves: &[Tensor],
    tol: f64,
    context: &str,
) {
    let mut tape = Tape::new();
    let (vars, loss) = build(&mut tape, leaves);
    let grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();

    for (li, leaf) in leaves.iter().enumerate() {
        for i in 0..leaf.len() {
            let x0 = leaf.data()[i];
            let h = 1e-5 * x0.abs().max(1.0);
            let eval = |v: f64| {
                let mut bumped = leaves.to_vec();
                bumped[li].data_mut()[i] = v;
                let mut t = Tape::new();
                let (_, l) = build(&mut t, &bumped);
                t.value(l).scalar_value().expect("scalar loss")
            };
            let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
            let a = analytic[li].data()[i];
            assert!(
                close(a, numeric, tol),
                "{}: leaf {} coord {}: analytic {} vs numeric {}",
                context,
                li,
                i,
                a,
                numeric
            );
        }
    }
}

/// Random tensor with standard-normal entries.
pub fn randn(shape: &[usize], rng: &mut fedsurg::rng::Xoshiro256StarStar) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}
