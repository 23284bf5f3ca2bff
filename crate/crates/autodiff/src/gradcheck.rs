//! Central finite-difference gradient checks.
//!
//! Used by the test suites of every crate that builds trainable paths. The
//! builder closure is re-run on fresh 64-bit tapes for every perturbation, so
//! the numeric side never touches the analytic backward rules.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Tensor};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all inputs.
    pub rel_error: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Checks `d loss / d inputs` for a loss built by `f` from leaves holding
/// `inputs`. `h` is the central-difference step.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        numeric.push(g);
    }

    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    let rel_error = if denom == 0.0 { diff.sqrt() } else { diff.sqrt() / denom };
    Ok(GradCheck {
        rel_error,
        analytic,
        numeric,
    })
}
