use super::{DiffError, Tape, Tensor, Var};

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    match tape.value(out).item() {
        Some(v) if v.is_finite() => Ok(v),
        Some(_) => Err(DiffError::NonFinite { op: "grad_check" }),
        None => Err(DiffError::NonScalarLoss {
            shape: tape.shape(out).to_vec(),
        }),
    }
}

/// Compares reverse-mode gradients of `f` with central finite differences on
/// every coordinate of every parameter and returns the largest relative error,
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    check(f, params, eps, |_| 1e-8)
}

/// Like [`grad_check`], but the denominator is floored at `floor` times the
/// largest analytic gradient magnitude. Coordinates whose gradient is many
/// orders below the rest are then judged by absolute rather than relative
/// error, which keeps finite-difference roundoff on deep networks from
/// dominating the result.
pub fn grad_check_scaled<F>(f: F, params: &[Tensor], eps: f64, floor: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    check(f, params, eps, |scale| (floor * scale).max(1e-8))
}

fn check<F, G>(f: F, params: &[Tensor], eps: f64, floor: G) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
    G: Fn(f64) -> f64,
{
    if !(eps > 0.0) {
        return Err(DiffError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(DiffError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let scale = analytic
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = floor(scale);

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for c in 0..params[pi].len() {
            let orig = params[pi].data()[c];
            probe[pi].data_mut()[c] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[pi].data_mut()[c] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[c];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(&[0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::vector(&[1e200]).unwrap();
        let res = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            },
            &[x],
            1e-5,
        );
        assert!(res.is_err());
    }

    #[test]
    fn scaled_floor_ignores_negligible_coordinates() {
        // d/dx of 1e-9*x0 + x1^2: the first coordinate is far below the scale.
        let x = Tensor::vector(&[0.5, 2.0]).unwrap();
        let f = |tape: &mut Tape, v: &[Var]| {
            let w = tape.constant(Tensor::vector(&[1e-9, 0.0]).unwrap());
            let lin = tape.mul(v[0], w)?;
            let sq = tape.mul(v[0], v[0])?;
            let mask = tape.constant(Tensor::vector(&[0.0, 1.0]).unwrap());
            let sq = tape.mul(sq, mask)?;
            let s = tape.add(lin, sq)?;
            tape.sum(s)
        };
        let err = grad_check_scaled(f, &[x], 1e-5, 1e-3).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
