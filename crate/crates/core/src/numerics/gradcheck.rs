use super::tape::{Tape, Var};
use super::tensor::ParamStore;
use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
    pub entries: usize,
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Checks the gradient of the scalar built by `f` with respect to every
/// entry of every tensor in `params`.
///
/// `f` must be deterministic. Parameters are restored on return; their
/// gradients hold the analytic values.
pub fn finite_difference_check<F>(params: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        Ok(t.scalar(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let n = params.get(id).len();
        let analytic = params
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = params.name(id).to_string();
            }
        }
    }
    Ok(report)
}
