//! Activations, channel arithmetic and the dense layer.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    input
        .zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
        .expect("relu grad shape")
}

/// Logistic function, kept strictly inside `(0, 1)` even where the
/// floating-point result would round to an endpoint.
pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let upper = T::one() - T::epsilon() / T::lit(2.0);
    let lower = T::min_positive_value();
    input.map(|x| {
        let s = if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        };
        s.max(lower).min(upper)
    })
}

/// Uses the cached forward output: `dσ = σ (1 - σ)`.
pub fn sigmoid_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    output
        .zip_map(grad_out, |s, g| g * s * (T::one() - s))
        .expect("sigmoid grad shape")
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_same_shape("add", b)?;
    a.zip_map(b, |x, y| x + y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_same_shape("mul", b)?;
    a.zip_map(b, |x, y| x * y)
}

/// Stacks tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let first = parts.first().ok_or_else(|| Error::invalid(OP, "no operands"))?.shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        for (dim, e, a) in [("n", first.n, s.n), ("h", first.h, s.h), ("w", first.w, s.w)] {
            if e != a {
                return Err(Error::shape(OP, dim, e, a));
            }
        }
        channels += s.c;
    }
    let os = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(os.numel());
    let plane = first.plane();
    for n in 0..first.n {
        for p in parts {
            let c = p.shape().c;
            let start = n * c * plane;
            data.extend_from_slice(&p.data()[start..start + c * plane]);
        }
    }
    Tensor::from_vec(os, data)
}

/// Multiplies every spatial position of channel `c` by `scale[n, c]`.
/// `scale` has shape `n x c x 1 x 1`.
pub fn scale_channels<T: Real>(input: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "scale_channels";
    let s = input.shape();
    let ss = scale.shape();
    if ss.n != s.n {
        return Err(Error::shape(OP, "n", s.n, ss.n));
    }
    if ss.c != s.c {
        return Err(Error::shape(OP, "c", s.c, ss.c));
    }
    if ss.h != 1 || ss.w != 1 {
        return Err(Error::shape(OP, "scale spatial size", 1, ss.plane()));
    }
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let k = scale.data()[n * s.c + c];
            for v in out.plane_mut(n, c) {
                *v *= k;
            }
        }
    }
    Ok(out)
}

pub fn scale_channels_backward<T: Real>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let mut gx = Tensor::zeros(s);
    let mut gs = Tensor::zeros(scale.shape());
    for n in 0..s.n {
        for c in 0..s.c {
            let k = scale.data()[n * s.c + c];
            let go = grad_out.plane(n, c);
            let mut acc = T::zero();
            for ((d, &g), &x) in gx.plane_mut(n, c).iter_mut().zip(go).zip(input.plane(n, c)) {
                *d = g * k;
                acc += g * x;
            }
            gs.data_mut()[n * s.c + c] = acc;
        }
    }
    (gx, gs)
}

/// Dense layer on `n x in x 1 x 1` vectors. `weights` is `(out, in, 1, 1)`,
/// `bias` holds `out` values.
pub fn linear<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    let s = input.shape();
    let ws = weights.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(OP, "input spatial size", 1, s.plane()));
    }
    if ws.c != s.c || ws.h != 1 || ws.w != 1 {
        return Err(Error::shape(OP, "weight input dim", s.c, ws.c));
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::shape(OP, "bias length", ws.n, b.len()));
        }
    }
    let (inp, outp) = (s.c, ws.n);
    let mut out = Vec::with_capacity(s.n * outp);
    for n in 0..s.n {
        let x = &input.data()[n * inp..(n + 1) * inp];
        for o in 0..outp {
            let row = &weights.data()[o * inp..(o + 1) * inp];
            let mut acc = T::zero();
            for (&wv, &xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            out.push(acc + bias.map_or(T::zero(), |b| b.data()[o]));
        }
    }
    Tensor::from_vec(Shape::new(s.n, outp, 1, 1), out)
}

pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let ws = weights.shape();
    let (inp, outp) = (s.c, ws.n);
    let mut gx = Tensor::zeros(s);
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::new(outp, 1, 1, 1));
    for n in 0..s.n {
        let x = &input.data()[n * inp..(n + 1) * inp];
        for o in 0..outp {
            let g = grad_out.data()[n * outp + o];
            gb.data_mut()[o] += g;
            let row = &weights.data()[o * inp..(o + 1) * inp];
            let gxr = &mut gx.data_mut()[n * inp..(n + 1) * inp];
            for (d, &wv) in gxr.iter_mut().zip(row) {
                *d += g * wv;
            }
            let gwr = &mut gw.data_mut()[o * inp..(o + 1) * inp];
            for (d, &xv) in gwr.iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_at_zero_and_extremes() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 800.0, -800.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert!(y.data()[1] < 1.0 && y.data()[2] > 0.0);
    }

    #[test]
    fn unit_scale_is_identity() {
        let x = Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| {
            (n + c * 2 + h * 3 + w) as f64 - 4.0
        });
        let s = Tensor::full(Shape::new(2, 3, 1, 1), 1.0);
        assert_eq!(scale_channels(&x, &s).unwrap(), x);
    }

    #[test]
    fn concat_then_slice_recovers_operands() {
        let a = Tensor::from_fn(Shape::new(2, 2, 3, 3), |n, c, h, w| {
            (n * 100 + c * 10 + h * 3 + w) as f64 * 0.37
        });
        let b = Tensor::from_fn(Shape::new(2, 1, 3, 3), |n, _, h, w| {
            -((n * 9 + h * 3 + w) as f64).sqrt()
        });
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 3, 3, 3));
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 1).unwrap(), b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 4));
        assert!(matches!(concat_channels(&[&a, &b]), Err(Error::Shape { dim: "w", .. })));
    }

    #[test]
    fn linear_small_case() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(Shape::new(3, 2, 1, 1), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(Shape::new(3, 1, 1, 1), vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[1.5, 2.5, 3.5]);
    }

    proptest! {
        #[test]
        fn sigmoid_stays_in_open_unit_interval(v in -1e4f64..1e4) {
            let y = sigmoid(&Tensor::scalar(v)).data()[0];
            prop_assert!(y > 0.0 && y < 1.0);
        }

        #[test]
        fn contraction_by_attention_scale(
            vals in proptest::collection::vec(-10.0f64..10.0, 8),
            s in proptest::collection::vec(0.0001f64..0.9999, 2),
        ) {
            let x = Tensor::from_vec(Shape::new(1, 2, 2, 2), vals).unwrap();
            let sc = Tensor::from_vec(Shape::new(1, 2, 1, 1), s).unwrap();
            let y = scale_channels(&x, &sc).unwrap();
            for (&a, &b) in y.data().iter().zip(x.data()) {
                prop_assert!(a.abs() <= b.abs());
                if b != 0.0 {
                    prop_assert!(a.abs() < b.abs());
                }
            }
            // Doubling the features doubles the output exactly.
            let y2 = scale_channels(&x.map(|v| 2.0 * v), &sc).unwrap();
            for (&a, &b) in y2.data().iter().zip(y.data()) {
                prop_assert_eq!(a, 2.0 * b);
            }
        }
    }
}
