use super::{NdError, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares tape gradients of the scalar `f` against central finite
/// differences over every entry of every parameter in `params`.
///
/// Relative error per entry is `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(params: &mut ParamStore, step: f64, f: F) -> Result<GradCheckReport, NdError>
where
    F: Fn(&mut Tape) -> Result<Var, NdError>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let eval = |params: &ParamStore| -> Result<f64, NdError> {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        Ok(tape.scalar(out))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(params);
            params.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(params);
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(NdError::NonFinite { op: "grad_check" });
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
