use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Central finite-difference gradient of `loss_fn` at `params`, one scalar at a time.
pub fn finite_difference_grad<F>(mut loss_fn: F, params: &ParameterSet, h: f64) -> Result<ParameterSet>
where
    F: FnMut(&ParameterSet) -> f64,
{
    let indices: Vec<usize> = (0..params.num_scalars()).collect();
    finite_difference_subset(&mut loss_fn, params, h, &indices).map(|values| {
        let mut grad = params.zeros_like();
        for (&idx, v) in indices.iter().zip(values) {
            grad.set_scalar(idx, v);
        }
        grad
    })
}

/// Central differences for the listed flat indices only.
pub fn finite_difference_subset<F>(loss_fn: &mut F, params: &ParameterSet, h: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&ParameterSet) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let original = probe.scalar(idx);
        probe.set_scalar(idx, original + h);
        let plus = loss_fn(&probe);
        probe.set_scalar(idx, original - h);
        let minus = loss_fn(&probe);
        probe.set_scalar(idx, original);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss while perturbing parameter {idx}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Tensor;

    fn params() -> ParameterSet {
        ParameterSet::from_tensors(vec![Tensor::new("p", vec![3], vec![0.5, -1.5, 2.0]).unwrap()])
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let g = finite_difference_grad(|_| 4.2, &params(), 1e-6).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn quadratic_loss() {
        let p = params();
        let g = finite_difference_grad(|q| q.iter_scalars().map(|v| v * v).sum(), &p, 1e-6).unwrap();
        for (gv, pv) in g.iter_scalars().zip(p.iter_scalars()) {
            assert!((gv - 2.0 * pv).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_loss_names_index() {
        let err = finite_difference_grad(|q| if q.scalar(1) > -1.5 { f64::NAN } else { 0.0 }, &params(), 1e-6)
            .unwrap_err();
        assert!(err.to_string().contains("parameter 1"), "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_difference_grad(|_| 0.0, &params(), 0.0).is_err());
    }
}
