//! Central finite-difference gradient checking.
//!
//! The checker differentiates the recorded forward numerically and compares
//! against the tape's reverse pass. It never looks at any backward formula:
//! each probe rebuilds the computation from perturbed leaf values through a
//! caller-supplied closure.

use alloc::vec::Vec;

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Step for central differences; 1e-5 balances truncation and roundoff for
/// f64 at the magnitudes used here.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// (leaf index, element index) of the worst disagreement.
    pub worst: (usize, usize),
}

impl GradReport {
    pub fn within(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_err <= rel_tol || self.max_abs_err <= abs_tol
    }
}

/// Compares tape gradients of `build` against central finite differences.
///
/// `build` receives a fresh tape plus the current leaf tensors and must
/// return (leaf node ids, scalar loss node). Leaves are perturbed one
/// element at a time; relative error uses `|fd| + |ad|` in the denominator
/// so near-zero gradients fall back to absolute comparison.
pub fn check_gradients<F>(leaves: &[Tensor], mut build: F) -> GradReport
where
    F: FnMut(&mut Tape, &[Tensor]) -> (Vec<NodeId>, NodeId),
{
    let mut tape = Tape::new();
    let (ids, loss) = build(&mut tape, leaves);
    assert_eq!(ids.len(), leaves.len(), "one node id per leaf");
    tape.backward(loss).expect("loss must be scalar");

    let eval = |vals: &[Tensor], build: &mut F| -> f64 {
        let mut t = Tape::new();
        let (_, l) = build(&mut t, vals);
        t.value(l)[0]
    };

    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    for (li, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad {
            continue;
        }
        let ad: Vec<f64> = match tape.grad(ids[li]) {
            Some(g) => g.to_vec(),
            // No gradient flow reached this leaf: treat as all zeros.
            None => alloc::vec![0.0; leaf.len()],
        };
        for (e, &ad_e) in ad.iter().enumerate() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[e] += FD_STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[e] -= FD_STEP;
            let fd = (eval(&plus, &mut build) - eval(&minus, &mut build)) / (2.0 * FD_STEP);
            let abs = libm::fabs(fd - ad_e);
            let denom = libm::fabs(fd) + libm::fabs(ad_e);
            let rel = if denom > 1e-8 { abs / denom } else { 0.0 };
            if rel > report.max_rel_err || (rel == report.max_rel_err && abs > report.max_abs_err) {
                report.max_rel_err = rel;
                report.worst = (li, e);
            }
            if abs > report.max_abs_err {
                report.max_abs_err = abs;
            }
        }
    }
    report
}
