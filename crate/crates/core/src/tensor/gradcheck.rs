use super::{Real, Result, Tensor, TensorError};

/// Central finite-difference gradient of a scalar function of several
/// tensors: `(f(p + eps) - f(p - eps)) / 2 eps` per coordinate.
///
/// `f` is evaluated twice at the unperturbed point first; differing results
/// are reported as [`TensorError::NonDeterministic`].
pub fn finite_diff_grad<S, F>(mut f: F, params: &[Tensor<S>], eps: f64) -> Result<Vec<Tensor<S>>>
where
    S: Real,
    F: FnMut(&[Tensor<S>]) -> S,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidAttr { op: "finite_diff_grad", detail: format!("eps = {eps}") });
    }
    let first = f(params).as_f64();
    let second = f(params).as_f64();
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }
    let mut point = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape().to_vec());
        for i in 0..params[p].numel() {
            let orig = point[p].data()[i];
            point[p].data_mut()[i] = orig + S::of(eps);
            let up = f(&point).as_f64();
            point[p].data_mut()[i] = orig - S::of(eps);
            let down = f(&point).as_f64();
            point[p].data_mut()[i] = orig;
            grad.data_mut()[i] = S::of((up - down) / (2.0 * eps));
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Largest elementwise relative error between an analytic and a numeric
/// gradient. Magnitudes below `1e-3` are compared absolutely against that
/// floor, which keeps near-zero coordinates from dominating.
pub fn grad_rel_err<S: Real>(analytic: &Tensor<S>, numeric: &Tensor<S>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::new([1], vec![3.0f64]).unwrap();
        let g = finite_diff_grad(|p| p[0].data()[0] * p[0].data()[0], &[x], 1e-5).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_fn([2, 2], |i| i as f64);
        let g = finite_diff_grad(|_| 4.2f64, &[x], 1e-5).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detects_nondeterminism() {
        let x = Tensor::new([1], vec![1.0f64]).unwrap();
        let mut calls = 0.0;
        let err = finite_diff_grad(
            |_| {
                calls += 1.0;
                calls
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::new([1], vec![1.0f64]).unwrap();
        assert!(finite_diff_grad(|p| p[0].data()[0], &[x], 0.0).is_err());
    }
}
