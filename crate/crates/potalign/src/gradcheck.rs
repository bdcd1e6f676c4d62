//! Finite-difference validation of reverse-mode gradients.

use crate::tape::{NodeId, Tape};
use crate::tensor::DenseTensor;
use crate::Result;

/// Compare analytic gradients against central finite differences.
///
/// `build` must deterministically construct the scalar loss from the given
/// parameter nodes; it is re-evaluated twice per parameter element with the
/// element perturbed by ±`step`. Returns the maximum over all parameter
/// elements of
///
/// ```text
/// |analytic - central| / max(1, |central|)
/// ```
pub fn finite_diff_check<F>(build: F, params: &[DenseTensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    let evaluate = |values: &[DenseTensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    // Analytic gradients from one taped pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<DenseTensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.expect(*id).clone();
        for e in 0..params[pi].numel() {
            let original = work[pi].data()[e];

            work[pi].data_mut()[e] = original + step;
            let up = evaluate(&work)?;
            work[pi].data_mut()[e] = original - step;
            let down = evaluate(&work)?;
            work[pi].data_mut()[e] = original;

            let central = (up - down) / (2.0 * step);
            let err = (analytic.data()[e] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
