//! Pixelwise binary cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn validate<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<()> {
    prediction.expect_same_shape("bce_loss", target)?;
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::invalid(
            "bce_loss",
            format!("clamp epsilon {eps} outside (0, 0.5)"),
        ));
    }
    if let Some(i) = target.data().iter().position(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::invalid(
            "bce_loss",
            format!("target must be binary, found {} at index {i}", target.data()[i]),
        ));
    }
    Ok(())
}

/// Mean of `-[y ln D + (1 - y) ln(1 - D)]` with `D` clamped to `[eps, 1 - eps]`.
pub fn bce<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<T> {
    validate(prediction, target, eps)?;
    let lo = T::lit(eps);
    let hi = T::one() - lo;
    let mut acc = T::zero();
    for (&d, &y) in prediction.data().iter().zip(target.data()) {
        let d = d.max(lo).min(hi);
        acc += if y == T::one() { -d.ln() } else { -(T::one() - d).ln() };
    }
    Ok(acc / T::lit(prediction.len() as f64))
}

/// Derivative of [`bce`] in the prediction; zero where the clamp is active.
pub fn bce_backward<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>, eps: f64, grad_out: T) -> Tensor<T> {
    let lo = T::lit(eps);
    let hi = T::one() - lo;
    let scale = grad_out / T::lit(prediction.len() as f64);
    prediction
        .zip_map(target, |d, y| {
            if d < lo || d > hi {
                T::zero()
            } else if y == T::one() {
                -scale / d
            } else {
                scale / (T::one() - d)
            }
        })
        .expect("bce grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-7;

    #[test]
    fn perfect_and_uninformative_predictions() {
        let s = Shape::new(1, 1, 4, 4);
        let y = Tensor::full(s, 1.0);
        assert!(bce(&Tensor::full(s, 1.0 - EPS), &y, EPS).unwrap() < 1e-6);
        let half = bce(&Tensor::full(s, 0.5), &y, EPS).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matches_per_pixel_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = Shape::new(2, 1, 5, 6);
        let d: Tensor = Tensor::from_fn(s, |_, _, _, _| rng.random_range(0.001..0.999));
        let y = Tensor::from_fn(s, |_, _, _, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let mut total = 0.0;
        for i in 0..s.numel() {
            let (p, t) = (d.data()[i], y.data()[i]);
            total += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        let oracle = total / s.numel() as f64;
        assert!((bce(&d, &y, EPS).unwrap() - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn rejects_non_binary_target_and_shape_mismatch() {
        let s = Shape::new(1, 1, 2, 2);
        let d = Tensor::full(s, 0.5);
        assert!(bce(&d, &Tensor::full(s, 0.3), EPS).is_err());
        assert!(bce(&d, &Tensor::full(Shape::new(1, 1, 2, 3), 1.0), EPS).is_err());
    }
}
