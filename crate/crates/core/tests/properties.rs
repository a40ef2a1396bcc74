mod common;

use cacenet::ops::{conv2d, transposed_conv2d, ConvSpec};
use cacenet::postproc::{boundary_of, mae, remove_small_components, BoundaryCurve, Mask};
use cacenet::synth::SynthSpec;
use cacenet::{Shape, Tensor};
use common::{cleanup_oracle, random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_spec(r: &mut ChaCha8Rng) -> ConvSpec {
    ConvSpec {
        kernel: (r.random_range(1..=4), r.random_range(1..=4)),
        stride: (r.random_range(1..=3), r.random_range(1..=3)),
        padding: (r.random_range(0..=3), r.random_range(0..=3)),
        dilation: (r.random_range(1..=3), r.random_range(1..=3)),
        output_padding: (r.random_range(0..=1), r.random_range(0..=1)),
        ..ConvSpec::new(r.random_range(1..=3), r.random_range(1..=3), 1)
    }
}

fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>, s: &ConvSpec, oh: usize, ow: usize) -> Tensor<f64> {
    let xs = x.shape();
    let mut out = Tensor::zeros(Shape::new(xs.n, s.out_channels, oh, ow));
    for n in 0..xs.n {
        for o in 0..s.out_channels {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..s.in_channels {
                        for ky in 0..s.kernel.0 {
                            for kx in 0..s.kernel.1 {
                                let iy = (y * s.stride.0 + ky * s.dilation.0) as isize - s.padding.0 as isize;
                                let ix = (xo * s.stride.1 + kx * s.dilation.1) as isize - s.padding.1 as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    acc += wt.get(o, c, ky, kx) * x.get(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(n, o, y, xo, acc);
                }
            }
        }
    }
    out
}

fn transposed_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, s: &ConvSpec, oh: usize, ow: usize) -> Tensor<f64> {
    let xs = x.shape();
    let mut out = Tensor::zeros(Shape::new(xs.n, s.out_channels, oh, ow));
    for n in 0..xs.n {
        for i in 0..s.in_channels {
            for a in 0..xs.h {
                for bb in 0..xs.w {
                    for o in 0..s.out_channels {
                        for ky in 0..s.kernel.0 {
                            for kx in 0..s.kernel.1 {
                                let y = (a * s.stride.0 + ky * s.dilation.0) as isize - s.padding.0 as isize;
                                let xo = (bb * s.stride.1 + kx * s.dilation.1) as isize - s.padding.1 as isize;
                                if y >= 0 && xo >= 0 && (y as usize) < oh && (xo as usize) < ow {
                                    let v = out.get(n, o, y as usize, xo as usize)
                                        + wt.get(i, o, ky, kx) * x.get(n, i, a, bb);
                                    out.set(n, o, y as usize, xo as usize, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_output_sizes_follow_the_closed_form_and_match_direct_loops() {
    let mut r = rng(10);
    let (mut valid, mut empty) = (0, 0);
    for _ in 0..1500 {
        let s = random_spec(&mut r);
        let (h, w) = (r.random_range(1..=10), r.random_range(1..=10));
        let expect = |len: usize, k: usize, st: usize, p: usize, d: usize| {
            let num = len as isize + 2 * p as isize - (d * (k - 1)) as isize - 1;
            (num >= 0).then(|| num as usize / st + 1)
        };
        let want = expect(h, s.kernel.0, s.stride.0, s.padding.0, s.dilation.0).zip(expect(
            w,
            s.kernel.1,
            s.stride.1,
            s.padding.1,
            s.dilation.1,
        ));
        assert_eq!(s.conv_output_hw(h, w), want, "{s:?} on {h}x{w}");

        let n = r.random_range(1..=2);
        let x = random_tensor(&mut r, Shape::new(n, s.in_channels, h, w), -1.0, 1.0);
        let wt = random_tensor(
            &mut r,
            Shape::new(s.out_channels, s.in_channels, s.kernel.0, s.kernel.1),
            -1.0,
            1.0,
        );
        let b = random_tensor(&mut r, Shape::new(s.out_channels, 1, 1, 1), -1.0, 1.0);
        match want {
            Some((oh, ow)) => {
                valid += 1;
                let got = conv2d(&x, &wt, Some(&b), &s).unwrap();
                assert_eq!(got.shape().dims(), [n, s.out_channels, oh, ow]);
                assert!(
                    max_abs_diff(&got, &conv_oracle(&x, &wt, &b, &s, oh, ow)) < 1e-12,
                    "{s:?} on {h}x{w}"
                );
            }
            None => {
                empty += 1;
                assert!(conv2d(&x, &wt, Some(&b), &s).is_err());
            }
        }
    }
    assert!(valid >= 1000 && empty > 0, "{valid} valid, {empty} empty");
}

#[test]
fn transposed_conv_matches_scatter_loops() {
    let mut r = rng(11);
    let mut checked = 0;
    for _ in 0..400 {
        let s = random_spec(&mut r);
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let full = |len: usize, k: usize, st: usize, d: usize, op: usize| (len - 1) * st + d * (k - 1) + 1 + op;
        let (fh, fw) = (
            full(h, s.kernel.0, s.stride.0, s.dilation.0, s.output_padding.0),
            full(w, s.kernel.1, s.stride.1, s.dilation.1, s.output_padding.1),
        );
        let want = (fh > 2 * s.padding.0 && fw > 2 * s.padding.1).then(|| (fh - 2 * s.padding.0, fw - 2 * s.padding.1));
        assert_eq!(s.transposed_output_hw(h, w), want, "{s:?} on {h}x{w}");
        let op_ok = |op: usize, st: usize, d: usize| op < st || op < d;
        let want = want.filter(|_| {
            op_ok(s.output_padding.0, s.stride.0, s.dilation.0) && op_ok(s.output_padding.1, s.stride.1, s.dilation.1)
        });
        let x = random_tensor(&mut r, Shape::new(1, s.in_channels, h, w), -1.0, 1.0);
        let wt = random_tensor(
            &mut r,
            Shape::new(s.in_channels, s.out_channels, s.kernel.0, s.kernel.1),
            -1.0,
            1.0,
        );
        if let Some((oh, ow)) = want {
            checked += 1;
            let got = transposed_conv2d(&x, &wt, None, &s).unwrap();
            assert!(
                max_abs_diff(&got, &transposed_oracle(&x, &wt, &s, oh, ow)) < 1e-12,
                "{s:?}"
            );
        } else {
            assert!(transposed_conv2d(&x, &wt, None, &s).is_err());
        }
    }
    assert!(checked > 250, "{checked}");
}

#[test]
fn small_component_removal_matches_flood_fill() {
    let mut r = rng(12);
    for _ in 0..100 {
        let (h, w) = (r.random_range(4..=24), r.random_range(4..=24));
        let density = r.random_range(0.05..0.95);
        let rows: Vec<Vec<bool>> = (0..h)
            .map(|_| (0..w).map(|_| r.random_bool(density)).collect())
            .collect();
        let min_area = r.random_range(1..=12);
        let mask = Mask::from_fn(h, w, |y, x| rows[y][x]);
        let got = remove_small_components(&mask, min_area).mask;
        let want = cleanup_oracle(&rows, min_area);
        for (y, row) in want.iter().enumerate() {
            for (x, &expected) in row.iter().enumerate() {
                assert_eq!(
                    got.get(y, x),
                    expected,
                    "pixel ({y}, {x}) of a {h}x{w} mask, min_area {min_area}"
                );
            }
        }
    }
}

#[test]
fn empty_mask_is_left_alone() {
    let mask = Mask::new(5, 7);
    let c = remove_small_components(&mask, 4);
    assert!(c.empty);
    assert_eq!(c.mask, mask);
    assert_eq!(boundary_of(&mask).invalid_count(), 7);
}

#[test]
fn generated_masks_trace_back_to_their_boundaries() {
    let mut r = rng(13);
    for i in 0..60 {
        let spec = SynthSpec {
            height: 16 * r.random_range(1..=6),
            width: 16 * r.random_range(1..=6),
            dip_depth: r.random_range(0.0..0.3),
            smoothness: r.random_range(0.0..0.2),
            noise: 0.0,
            seed: r.random(),
            ..SynthSpec::default()
        };
        let s = spec.sample(i).unwrap();
        let traced = boundary_of(&Mask::from_tensor(&s.mask, 0, 0));
        assert_eq!(traced, s.boundary);
        assert_eq!(traced.invalid_count(), 0);
        assert_eq!(mae(&traced, &s.boundary).unwrap(), 0.0);
    }
}

fn curve() -> impl Strategy<Value = Vec<Option<f64>>> {
    prop::collection::vec(prop::option::weighted(0.9, 0.0f64..100.0), 1..40)
}

proptest! {
    #[test]
    fn mae_is_zero_on_itself_and_symmetric(a in curve(), b in curve()) {
        let n = a.len().min(b.len());
        let ca = BoundaryCurve { rows: a[..n].to_vec() };
        let cb = BoundaryCurve { rows: b[..n].to_vec() };
        if ca.invalid_count() < n {
            prop_assert_eq!(mae(&ca, &ca).unwrap(), 0.0);
        }
        match (mae(&ca, &cb), mae(&cb, &ca)) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x, y);
                prop_assert!(x >= 0.0);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }

    #[test]
    fn mae_of_a_constant_shift_is_the_shift(rows in prop::collection::vec(0.0f64..50.0, 1..40), k in -20.0f64..20.0) {
        let a = BoundaryCurve::from_rows(rows.iter().copied());
        let b = BoundaryCurve::from_rows(rows.iter().map(|v| v + k));
        prop_assert!((mae(&a, &b).unwrap() - k.abs()).abs() < 1e-12);
    }

    #[test]
    fn mae_obeys_the_triangle_inequality(
        rows in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0), 1..40)
    ) {
        let a = BoundaryCurve::from_rows(rows.iter().map(|t| t.0));
        let b = BoundaryCurve::from_rows(rows.iter().map(|t| t.1));
        let c = BoundaryCurve::from_rows(rows.iter().map(|t| t.2));
        let (ab, bc, ac) = (mae(&a, &b).unwrap(), mae(&b, &c).unwrap(), mae(&a, &c).unwrap());
        prop_assert!(ac <= ab + bc + 1e-12);
    }
}

#[test]
fn mae_skips_invalid_columns_and_checks_lengths() {
    let a = BoundaryCurve {
        rows: vec![Some(1.0), None, Some(5.0)],
    };
    let b = BoundaryCurve {
        rows: vec![Some(2.0), Some(9.0), None],
    };
    assert_eq!(mae(&a, &b).unwrap(), 1.0);
    let none = BoundaryCurve {
        rows: vec![None, None, None],
    };
    assert!(mae(&a, &none).is_err());
    assert!(mae(&a, &BoundaryCurve::from_rows([1.0, 2.0])).is_err());
}
