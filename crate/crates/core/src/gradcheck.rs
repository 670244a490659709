//! Central-difference gradient checking, run in `f64`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from the bound parameters and must be
/// deterministic (any noise frozen by the caller). The error per element is
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(&tape, v)).collect::<Vec<_>>()
    };

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for p in 0..work.len() {
        for e in 0..work[p].len() {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[p].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[p].data_mut()[e] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[p].data()[e];
            if !fd.is_finite() || !an.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check at parameter {p}, element {e}"
                )));
            }
            let denom = an.abs().max(fd.abs()).max(1e-8);
            let err = (an - fd).abs() / denom;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p, e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
