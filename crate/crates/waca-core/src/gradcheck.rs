//! Central finite-difference gradient checking.
//!
//! Test support: re-evaluates the forward pass at perturbed inputs, so it is
//! independent of the reverse sweep it verifies. Kept in the library (rather
//! than duplicated per test crate) because every downstream module and the
//! acceptance suite run the same check.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{Tape, Tensor, Var};

/// Checks d(loss)/d(input) for every element of every input against central
/// differences. `build` must construct the full forward pass from fresh
/// leaves and return a scalar loss.
///
/// The error criterion is |analytic - fd| <= tol * max(|analytic|, |fd|, 0.1),
/// i.e. relative where gradients are O(1) and absolute below that, which is
/// where central differences themselves run out of accuracy at h = 1e-5.
pub fn central_diff_check<F>(
    mut build: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<(), String>
where
    F: FnMut(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.values(loss).len(), 1, "gradcheck needs a scalar loss");
    tape.backward(loss).expect("backward failed in gradcheck");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let eval = |pts: &[Tensor], build: &mut F| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.values(loss)[0]
    };

    let mut worst = 0.0f64;
    let mut worst_desc = String::new();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let fp = eval(&plus, &mut build);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fm = eval(&minus, &mut build);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(fd.abs()).max(0.1);
            let rel = (a - fd).abs() / denom;
            if rel > worst {
                worst = rel;
                worst_desc = format!("input {i} element {j}: analytic {a}, fd {fd}");
            }
        }
    }
    if worst > tol {
        Err(format!("gradient check failed: rel err {worst:.3e} > {tol:.1e} at {worst_desc}"))
    } else {
        Ok(())
    }
}
