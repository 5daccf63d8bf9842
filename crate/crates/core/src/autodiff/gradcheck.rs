//! Central-difference gradient verification.

use super::tape::{Tape, ValueId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst observed relative error and where it occurred.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients of a scalar-valued graph against central
/// differences at every coordinate of every input.
///
/// `build` receives a fresh tape plus one node per input (registered as
/// params 0..n in order) and must return the scalar loss node. Relative
/// error per coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
pub fn finite_difference_check<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("gradcheck eps must be positive".into()));
    }
    let forward = |points: &[Tensor]| -> Result<(Tape, ValueId, f64)> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> =
            points.iter().enumerate().map(|(k, t)| tape.param(k, t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let v = tape.value(loss).scalar_value()?;
        Ok((tape, loss, v))
    };

    let analytic: Vec<Tensor> = {
        let (tape, loss, _) = forward(inputs)?;
        let g = tape.backward(loss)?;
        (0..inputs.len()).map(|k| g.get(k).expect("registered param").clone()).collect()
    };

    let mut report = GradcheckReport { max_rel_err: 0.0, worst: (0, 0), coords_checked: 0 };
    let mut points: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = points[ti].data()[ei];
            points[ti].data_mut()[ei] = orig + eps;
            let (_, _, lp) = forward(&points)?;
            points[ti].data_mut()[ei] = orig - eps;
            let (_, _, lm) = forward(&points)?;
            points[ti].data_mut()[ei] = orig;

            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ei);
            }
        }
    }
    Ok(report)
}
