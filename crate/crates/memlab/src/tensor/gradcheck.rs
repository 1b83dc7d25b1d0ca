//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError, TensorId, TensorResult};

/// Compares analytic gradients of a scalar-valued tensor function against
/// central finite differences.
///
/// `f` receives a fresh tape plus one leaf per entry of `inputs` and must
/// return a scalar loss. The result is the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> TensorResult<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorResult<TensorId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArg {
            op: "grad_check",
            msg: format!("eps must be in (0, 1e-2], got {eps}"),
        });
    }
    if inputs.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "grad_check",
            msg: "no inputs".to_string(),
        });
    }

    let eval = |points: &[Tensor], tracked: bool| -> TensorResult<(f64, Option<Tape>, Vec<TensorId>)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = points
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = tracked;
                tape.leaf(&t)
            })
            .collect();
        let loss = f(&mut tape, &ids)?;
        if tape.data(loss).len() != 1 {
            return Err(TensorError::NotAScalar {
                op: "grad_check",
                shape: tape.shape(loss).to_vec(),
            });
        }
        let value = tape.data(loss)[0];
        if tracked {
            tape.backward(loss)?;
            Ok((value, Some(tape), ids))
        } else {
            Ok((value, None, ids))
        }
    };

    let (_, tape, ids) = eval(inputs, true)?;
    let tape = tape.expect("tracked eval returns tape");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let mut max_err = 0.0_f64;
    for (t_idx, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[t_idx].data[coord] += eps;
            let (fp, _, _) = eval(&plus, false)?;

            let mut minus = inputs.to_vec();
            minus[t_idx].data[coord] -= eps;
            let (fm, _, _) = eval(&minus, false)?;

            if !(fp.is_finite() && fm.is_finite()) {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[t_idx].get(coord).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
