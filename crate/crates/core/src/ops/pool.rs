//! Pooling and spatial resampling.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Max pooling without padding. Returns the pooled tensor and, for every
/// output element, the flat input index it was taken from. Ties resolve to
/// the first element in row-major window order.
pub fn maxpool2d<T: Real>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "maxpool2d";
    let s = input.shape();
    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::invalid(OP, "window and stride must be at least 1"));
    }
    if window.0 > s.h || window.1 > s.w {
        return Err(Error::invalid(
            OP,
            format!("window {}x{} larger than input {}x{}", window.0, window.1, s.h, s.w),
        ));
    }
    let oh = (s.h - window.0) / stride.0 + 1;
    let ow = (s.w - window.1) / stride.1 + 1;
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(os.numel());
    let mut argmax = Vec::with_capacity(os.numel());
    let data = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for r in 0..oh {
                for q in 0..ow {
                    let mut best_idx = base + r * stride.0 * s.w + q * stride.1;
                    let mut best = data[best_idx];
                    for i in 0..window.0 {
                        let row = base + (r * stride.0 + i) * s.w + q * stride.1;
                        for j in 0..window.1 {
                            let v = data[row + j];
                            if v > best {
                                best = v;
                                best_idx = row + j;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::from_vec(os, out)?, argmax))
}

pub fn maxpool2d_backward<T: Real>(input_shape: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    g
}

/// Per-channel spatial mean, shape `n x c x 1 x 1`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let area = T::lit(s.plane() as f64);
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = T::zero();
            for &v in input.plane(n, c) {
                acc += v;
            }
            out.push(acc / area);
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let area = T::lit(input_shape.plane() as f64);
    let mut g = Tensor::zeros(input_shape);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let v = grad_out.data()[n * input_shape.c + c] / area;
            g.plane_mut(n, c).fill(v);
        }
    }
    g
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Debug, Clone, Copy)]
struct Lerp {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn lerp_table(in_len: usize, out_len: usize) -> Vec<Lerp> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Lerp { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resampling to `(out_h, out_w)` with half-pixel centres
/// (`align_corners = false`). Written in lerp form so constant maps stay
/// exactly constant and same-size resampling is the identity.
pub fn bilinear_resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "target size must be at least 1x1"));
    }
    let s = input.shape();
    let rows = lerp_table(s.h, out_h);
    let cols = lerp_table(s.w, out_w);
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (y, ry) in rows.iter().enumerate() {
                let fy = T::lit(ry.frac);
                let top = &src[ry.lo * s.w..(ry.lo + 1) * s.w];
                let bot = &src[ry.hi * s.w..(ry.hi + 1) * s.w];
                for (x, cx) in cols.iter().enumerate() {
                    let fx = T::lit(cx.frac);
                    let t = top[cx.lo] + fx * (top[cx.hi] - top[cx.lo]);
                    let b = bot[cx.lo] + fx * (bot[cx.hi] - bot[cx.lo]);
                    dst[y * out_w + x] = t + fy * (b - t);
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let gs = grad_out.shape();
    let rows = lerp_table(input_shape.h, gs.h);
    let cols = lerp_table(input_shape.w, gs.w);
    let mut g = Tensor::zeros(input_shape);
    let w_in = input_shape.w;
    for n in 0..gs.n {
        for c in 0..gs.c {
            let go = grad_out.plane(n, c);
            let gi = g.plane_mut(n, c);
            for (y, ry) in rows.iter().enumerate() {
                let fy = T::lit(ry.frac);
                for (x, cx) in cols.iter().enumerate() {
                    let fx = T::lit(cx.frac);
                    let v = go[y * gs.w + x];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    gi[ry.lo * w_in + cx.lo] += top * (T::one() - fx);
                    gi[ry.lo * w_in + cx.hi] += top * fx;
                    gi[ry.hi * w_in + cx.lo] += bot * (T::one() - fx);
                    gi[ry.hi * w_in + cx.hi] += bot * fx;
                }
            }
        }
    }
    g
}

/// Nearest-neighbour resampling using the same half-pixel convention.
pub fn nearest_resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("nearest_resize", "target size must be at least 1x1"));
    }
    let s = input.shape();
    let pick = |o: usize, in_len: usize, out_len: usize| -> usize {
        let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
        src.min(in_len - 1)
    };
    let rows: Vec<usize> = (0..out_h).map(|y| pick(y, s.h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|x| pick(x, s.w, out_w)).collect();
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, y, x| {
        input.get(n, c, rows[y], cols[x])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxpool_constant_and_small_case() {
        let x = Tensor::full(Shape::new(1, 2, 6, 6), 3.0);
        let (y, _) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 3, 3));
        assert!(y.data().iter().all(|&v| v == 3.0));

        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(Shape::new(1, 1, 6, 6), |_, _, _, _| rng.random_range(-1.0..1.0));
        let (y, _) = maxpool2d(&x, (3, 3), (3, 3)).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for i in 0..3 {
                    for j in 0..3 {
                        m = m.max(x.get(0, 0, 3 * r + i, 3 * c + j));
                    }
                }
                assert_eq!(y.get(0, 0, r, c), m);
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_first_index() {
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let (_, idx) = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        assert!(maxpool2d(&x, (5, 5), (5, 5)).is_err());
    }

    #[test]
    fn global_mean() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let k = Tensor::full(Shape::new(2, 3, 5, 7), -1.25);
        assert!(global_avg_pool(&k).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn global_mean_per_channel_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor = Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, _, _, _| rng.random_range(-5.0..5.0));
        let z = global_avg_pool(&x);
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..4 {
                for q in 0..4 {
                    s += x.get(0, c, r, q);
                }
            }
            assert!((z.data()[c] - s / 16.0).abs() < 1e-14);
        }
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let k = Tensor::full(Shape::new(1, 2, 3, 5), 0.7);
        for (h, w) in [(1, 1), (4, 9), (17, 3), (3, 5)] {
            let y = bilinear_resize(&k, h, w).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.7));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(Shape::new(1, 1, 6, 5), |_, _, _, _| rng.random_range(0.0..1.0));
        assert_eq!(bilinear_resize(&x, 6, 5).unwrap(), x);
        assert_eq!(nearest_resize(&x, 6, 5).unwrap(), x);
    }

    #[test]
    fn bilinear_upsample_of_two_pixels() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        // Half-pixel centres: src = (x + 0.5) / 2 - 0.5 -> 0 (clamped), 0.25, 0.75, 1.
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }
}
