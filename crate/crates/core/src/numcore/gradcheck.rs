use super::{Graph, NumError, RngStream, Tensor, Var};

/// Central-difference step used by every check.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for relative error; keeps near-zero gradient entries from
/// dividing by rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares an analytic gradient with central differences at `coords`.
/// `eval` returns the scalar value and the analytic gradient at a point.
pub fn grad_check_with<F>(eval: F, point: &Tensor<f64>, coords: &[usize]) -> Result<GradCheckReport, NumError>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>), NumError>,
{
    let (_, grad) = eval(point)?;
    if grad.len() != point.len() {
        return Err(NumError::Shape {
            op: "grad_check",
            left: point.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        checked: 0,
    };
    for &c in coords {
        let mut plus = point.clone();
        plus.data_mut()[c] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[c] -= FD_STEP;
        let fp = eval(&plus)?.0;
        let fm = eval(&minus)?.0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumError::NonFinite { op: "grad_check" });
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let err = relative_error(grad.get(c), numeric);
        if report.checked == 0 || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_coord = c;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks a scalar function of one tensor input, built on a fresh graph.
pub fn grad_check<F>(f: F, point: &Tensor<f64>) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, NumError>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_with(|p| eval_graph(&f, p), point, &coords)
}

/// Like [`grad_check`] on `samples` coordinates drawn without replacement.
pub fn grad_check_sampled<F>(f: F, point: &Tensor<f64>, samples: usize, rng: &mut RngStream) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, NumError>,
{
    let coords = sample_coords(point.len(), samples, rng);
    grad_check_with(|p| eval_graph(&f, p), point, &coords)
}

pub fn sample_coords(len: usize, samples: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut all);
    all.truncate(samples.min(len));
    all
}

fn eval_graph<F>(f: &F, p: &Tensor<f64>) -> Result<(f64, Tensor<f64>), NumError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let x = g.input(p.clone(), true)?;
    let y = f(&mut g, x)?;
    let val = g.value(y).item();
    let grads = g.backward(y)?;
    let gx = grads.input(x).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
    Ok((val, gx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            },
            &Tensor::scalar(3.0),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_reports_the_op() {
        let r = grad_check(|g, x| g.scale(x, f64::INFINITY), &Tensor::scalar(1.0));
        assert!(matches!(r, Err(NumError::NonFinite { op: "scale" })));
    }
}
