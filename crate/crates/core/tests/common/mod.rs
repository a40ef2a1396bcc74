#![allow(dead_code)]

use std::collections::VecDeque;

use cacenet::autodiff::Tape;
use cacenet::model::layers::ChannelAttention;
use cacenet::model::{CaceNet, Ctx, Mode, ModelConfig};
use cacenet::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// A valid configuration with random widths, ratio, context layout and
/// input size (multiples of 16 up to `max_side`).
pub fn random_config(rng: &mut ChaCha8Rng, max_side: usize) -> ModelConfig {
    let base_width = rng.random_range(1..=4);
    let c = 8 * base_width;
    let divisors: Vec<usize> = (1..=c).filter(|r| c % r == 0).collect();
    let h = 16 * rng.random_range(1..=max_side / 16);
    let w = 16 * rng.random_range(1..=max_side / 16);
    let bottleneck = (h / 16).min(w / 16);
    let branches = rng.random_range(1..=4);
    let dac_dilations = (0..branches)
        .map(|_| (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=5)).collect())
        .collect();
    let rmp_windows = (0..rng.random_range(1..=4))
        .map(|_| rng.random_range(1..=bottleneck))
        .collect();
    ModelConfig {
        base_width,
        reduction_ratio: divisors[rng.random_range(0..divisors.len())],
        dac_dilations,
        dac_final_pointwise: rng.random_bool(0.5),
        rmp_windows,
        attention_enabled: rng.random_bool(0.5),
        input_size: (h, w),
        ..ModelConfig::desk()
    }
}

/// Straight-line channel attention:
/// `z_c = mean(F_c)`, `h = max(0, W1 z + b1)`, `s = 1 / (1 + exp(-(W2 h + b2)))`,
/// `out_c = s_c F_c`.
pub fn attention_oracle(
    f: &Tensor<f64>,
    w1: &Tensor<f64>,
    b1: &Tensor<f64>,
    w2: &Tensor<f64>,
    b2: &Tensor<f64>,
) -> Tensor<f64> {
    let s = f.shape();
    let hidden = w1.shape().n;
    let mut out = f.clone();
    for n in 0..s.n {
        let mut z = vec![0.0; s.c];
        for (c, zc) in z.iter_mut().enumerate() {
            let mut acc = 0.0;
            for y in 0..s.h {
                for x in 0..s.w {
                    acc += f.get(n, c, y, x);
                }
            }
            *zc = acc / (s.h * s.w) as f64;
        }
        let mut hid = vec![0.0; hidden];
        for (j, hj) in hid.iter_mut().enumerate() {
            let mut acc = b1.data()[j];
            for (c, zc) in z.iter().enumerate() {
                acc += w1.get(j, c, 0, 0) * zc;
            }
            *hj = acc.max(0.0);
        }
        for c in 0..s.c {
            let mut e = b2.data()[c];
            for (j, hj) in hid.iter().enumerate() {
                e += w2.get(c, j, 0, 0) * hj;
            }
            let gate = 1.0 / (1.0 + (-e).exp());
            for y in 0..s.h {
                for x in 0..s.w {
                    out.set(n, c, y, x, gate * f.get(n, c, y, x));
                }
            }
        }
    }
    out
}

/// Runs one attention block of `net` on `f` through the tape.
pub fn attention_forward(net: &CaceNet<f64>, block: &ChannelAttention, f: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars = net.store().bind(&mut tape);
    let x = tape.constant(f.clone());
    let mut ctx = Ctx {
        tape: &mut tape,
        vars: &vars,
        store: net.store(),
        mode: Mode::Eval,
        bn_eps: 1e-5,
        updates: Vec::new(),
    };
    let y = block.forward(&mut ctx, x).unwrap();
    tape.value(y).clone()
}

/// Largest `|a - b| / max(|a|, |b|, 1e-300)` over all elements.
pub fn max_rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            if x == y {
                0.0
            } else {
                (x - y).abs() / x.abs().max(y.abs()).max(1e-300)
            }
        })
        .fold(0.0, f64::max)
}

/// Overwrites every parameter of `net`, biases included, with U(-1, 1).
pub fn randomise(net: &mut CaceNet<f64>, rng: &mut ChaCha8Rng) {
    for p in net.store_mut().params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// BFS labelling with 4-neighbours, components in raster order of their
/// first pixel.
fn flood_components(m: &[Vec<bool>], value: bool) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (m.len(), m[0].len());
    let mut seen = vec![vec![false; w]; h];
    let mut comps = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if m[r][c] != value || seen[r][c] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            seen[r][c] = true;
            while let Some((y, x)) = queue.pop_front() {
                comp.push((y, x));
                let nbrs = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                for (ny, nx) in nbrs {
                    if ny < h && nx < w && m[ny][nx] == value && !seen[ny][nx] {
                        seen[ny][nx] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            comps.push(comp);
        }
    }
    comps
}

pub fn cleanup_oracle(m: &[Vec<bool>], min_area: usize) -> Vec<Vec<bool>> {
    let mut out = m.to_vec();
    let fg = flood_components(m, true);
    let mut largest = 0;
    for (i, comp) in fg.iter().enumerate() {
        if comp.len() > fg[largest].len() {
            largest = i;
        }
    }
    for (i, comp) in fg.iter().enumerate() {
        if i != largest && comp.len() < min_area {
            for &(y, x) in comp {
                out[y][x] = false;
            }
        }
    }
    if fg.is_empty() {
        return out;
    }
    for comp in flood_components(&out.clone(), false) {
        if comp.len() < min_area {
            for &(y, x) in &comp {
                out[y][x] = true;
            }
        }
    }
    out
}
