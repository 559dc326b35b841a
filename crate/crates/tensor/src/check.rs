use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

/// Compares tape gradients with central finite differences.
///
/// `f` records a scalar function of the parameter leaves it is handed.
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over every
/// element of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("step must be positive, got {step}"),
        });
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..params[p].len() {
            let original = params[p].data()[i];
            work[p].data_mut()[i] = original + step;
            let up = eval(&work)?;
            work[p].data_mut()[i] = original - step;
            let down = eval(&work)?;
            work[p].data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_sq_is_near_exact() {
        let p = Tensor::from_rows(&[[0.3, -1.2, 2.0], [0.5, 0.0, -0.7]]).unwrap();
        let err = grad_check(|t, v| t.sum_sq(v[0]), &[p], 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = grad_check(
            |t, _| Ok(t.leaf(Tensor::scalar(4.0))),
            &[p],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(grad_check(|t, v| t.sum(v[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
