//! Central finite differences, the independent oracle the gradient tests
//! compare against.

use super::Tensor;

/// Central-difference gradient estimate of a tensor-to-scalar function:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
///
/// The caller owns interpretation of numerical noise; `h` must be positive.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "step size must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

/// Symmetric relative error used by every gradient check in the test suite.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::new(vec![2, 2], vec![0.4, -1.2, 3.3, 0.0]).unwrap();
        let g = finite_difference_gradient(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_of_square_at_two() {
        let x = Tensor::scalar(2.0);
        let g = finite_difference_gradient(|t| t.value() * t.value(), &x, 1e-5);
        assert!((g.value() - 4.0).abs() < 1e-8, "{}", g.value());
    }
}
