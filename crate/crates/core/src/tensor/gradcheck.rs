use super::{Result, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct CheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Flat coordinate where `max_rel_error` occurred.
    pub worst_index: usize,
    pub passed: bool,
    /// Set when the function could not be evaluated or produced a
    /// non-finite value; names the location.
    pub failure: Option<String>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl CheckReport {
    fn failed(msg: String) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            worst_index: 0,
            passed: false,
            failure: Some(msg),
            analytic: Vec::new(),
            numeric: Vec::new(),
        }
    }
}

fn evaluate<F>(f: &F, point: Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point);
    let y = f(&mut tape, x)?;
    Ok(tape.item(y))
}

/// Checks the gradient of scalar-valued `f` at `point` against central
/// differences with the given `step`. The relative error is floored at an
/// absolute scale of 1 so coordinates with vanishing gradients do not blow
/// up the ratio.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64, tolerance: f64) -> CheckReport
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = match f(&mut tape, x) {
        Ok(y) => y,
        Err(e) => return CheckReport::failed(format!("evaluation at point: {e}")),
    };
    if tape.value(y).len() != 1 {
        return CheckReport::failed(format!("non-scalar output {:?}", tape.shape(y)));
    }
    if !tape.item(y).is_finite() {
        return CheckReport::failed("non-finite value at point".into());
    }
    if let Err(e) = tape.backward(y) {
        return CheckReport::failed(e.to_string());
    }
    let analytic: Vec<f64> = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()]);

    let mut numeric = Vec::with_capacity(point.len());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = match (evaluate(&f, plus), evaluate(&f, minus)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                return CheckReport::failed(format!("evaluation at coordinate {i}: {e}"))
            }
        };
        if !fp.is_finite() || !fm.is_finite() {
            return CheckReport::failed(format!("non-finite value perturbing coordinate {i}"));
        }
        let fd = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        if !err.is_finite() {
            return CheckReport::failed(format!("non-finite gradient at coordinate {i}"));
        }
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
        numeric.push(fd);
    }
    CheckReport {
        max_rel_error,
        worst_index,
        passed: max_rel_error <= tolerance,
        failure: None,
        analytic,
        numeric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = Tensor::from_f64(&[4], &[0.3, -1.2, 2.5, 7.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum_all(sq))
            },
            &p,
            1e-4,
            1e-8,
        );
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn reports_non_finite_location() {
        let p = Tensor::from_f64(&[2], &[1.0, 1e-5]).unwrap();
        let r = grad_check(
            |t, x| {
                let l = t.log(x)?;
                Ok(t.sum_all(l))
            },
            &p,
            1e-4,
            1e-5,
        );
        assert!(!r.passed);
        let msg = r.failure.unwrap();
        assert!(msg.contains("coordinate 1"), "{msg}");
    }
}
