//! Central finite-difference gradient checking for tape-built scalar losses.

use ndarray::ArrayD;

/// Worst relative disagreement between analytic and numerical gradients.
///
/// `build` receives the current parameter values and must return the scalar
/// loss; `analytic` is the gradient under test, laid out like `params`.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, floor).
pub fn max_relative_error(
    params: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    build: &mut dyn FnMut(&[ArrayD<f64>]) -> f64,
    step: f64,
    floor: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "params/analytic length");
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        assert_eq!(
            p.shape(),
            analytic[pi].shape(),
            "gradient shape mismatch at param {pi}"
        );
        let n = p.len();
        for i in 0..n {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[pi].as_slice_mut().unwrap()[i] += step;
            minus[pi].as_slice_mut().unwrap()[i] -= step;
            let numeric = (build(&plus) - build(&minus)) / (2.0 * step);
            let a = analytic[pi].as_slice().unwrap()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Like [`max_relative_error`] but only probing `indices[pi]` coordinates of
/// each parameter; keeps checks on large parameter tensors tractable.
pub fn max_relative_error_sampled(
    params: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    indices: &[Vec<usize>],
    build: &mut dyn FnMut(&[ArrayD<f64>]) -> f64,
    step: f64,
    floor: f64,
) -> f64 {
    assert_eq!(params.len(), indices.len(), "params/indices length");
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for &i in &indices[pi] {
            assert!(i < p.len(), "sample index out of range");
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[pi].as_slice_mut().unwrap()[i] += step;
            minus[pi].as_slice_mut().unwrap()[i] -= step;
            let numeric = (build(&plus) - build(&minus)) / (2.0 * step);
            let a = analytic[pi].as_slice().unwrap()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::array;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum(x*x), df/dx = 2x
        let x0 = array![[1.5, -2.0], [0.5, 3.0]].into_dyn();
        let mut build = |ps: &[ndarray::ArrayD<f64>]| {
            let mut t = Tape::new();
            let x = t.leaf(ps[0].clone());
            let y = t.mul(x, x).unwrap();
            let s = t.sum_all(y);
            t.scalar(s)
        };
        let analytic = vec![x0.mapv(|v| 2.0 * v)];
        let err = max_relative_error(&[x0], &analytic, &mut build, 1e-6, 1e-8);
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x0 = array![[1.0, 2.0]].into_dyn();
        let mut build = |ps: &[ndarray::ArrayD<f64>]| {
            let mut t = Tape::new();
            let x = t.leaf(ps[0].clone());
            let y = t.mul(x, x).unwrap();
            let s = t.sum_all(y);
            t.scalar(s)
        };
        let wrong = vec![x0.mapv(|v| 3.0 * v)];
        let err = max_relative_error(&[x0], &wrong, &mut build, 1e-6, 1e-8);
        assert!(err > 0.1);
    }
}
