//! Synthetic OCT-like B-scans with a known inner limiting membrane.
//!
//! Each sample has a dark vitreous above a bright retina. The boundary
//! between them is a smooth random curve plus a Gaussian dip standing in
//! for the optic-disc cup, and the image carries multiplicative speckle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{bilinear_resize, nearest_resize};
use crate::postproc::BoundaryCurve;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Mean boundary depth as a fraction of the height.
    pub base_depth: f64,
    /// Dip centre as a fraction of the width.
    pub dip_center: f64,
    /// Uniform jitter of the dip centre, fraction of the width.
    pub dip_jitter: f64,
    /// Gaussian standard deviation of the dip, fraction of the width.
    pub dip_width: f64,
    /// Dip depth, fraction of the height.
    pub dip_depth: f64,
    /// Peak amplitude of the low-frequency undulation, fraction of the height.
    pub smoothness: f64,
    /// Standard deviation of the multiplicative speckle.
    pub noise: f64,
    pub vitreous_mean: f64,
    pub retina_mean: f64,
    /// Width in rows of the linear intensity ramp across the boundary;
    /// 0 gives a hard step.
    pub blur: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            base_depth: 0.4,
            dip_center: 0.5,
            dip_jitter: 0.15,
            dip_width: 0.08,
            dip_depth: 0.15,
            smoothness: 0.08,
            noise: 0.2,
            vitreous_mean: 0.15,
            retina_mean: 0.65,
            blur: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    /// `1 x 1 x h x w`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    /// `1 x 1 x h x w`; 1 at and below the boundary.
    pub mask: Tensor<f64>,
    pub boundary: BoundaryCurve,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height < 4 || self.width < 1 {
            return fail(format!(
                "synth size {}x{} is too small (need h >= 4)",
                self.height, self.width
            ));
        }
        let fractions = [
            ("synth.base_depth", self.base_depth),
            ("synth.dip_center", self.dip_center),
            ("synth.dip_jitter", self.dip_jitter),
            ("synth.dip_width", self.dip_width),
            ("synth.dip_depth", self.dip_depth),
            ("synth.smoothness", self.smoothness),
        ];
        for (k, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{k} = {v} must lie in [0, 1]"));
            }
        }
        if self.dip_width <= 0.0 {
            return fail("synth.dip_width must be positive".into());
        }
        let h = self.height as f64;
        let top = (self.base_depth - self.smoothness) * h;
        let bottom = (self.base_depth + self.smoothness + self.dip_depth) * h;
        if top < 1.0 || bottom > h - 2.0 {
            return fail(format!(
                "boundary may leave rows [1, {}]: base_depth +/- smoothness and dip_depth span rows {top:.1}..{bottom:.1}",
                self.height - 2
            ));
        }
        if !(self.noise >= 0.0) {
            return fail(format!("synth.noise = {} must be non-negative", self.noise));
        }
        if !(self.retina_mean > self.vitreous_mean) {
            return fail(format!(
                "synth.retina_mean = {} must exceed synth.vitreous_mean = {}",
                self.retina_mean, self.vitreous_mean
            ));
        }
        if !(0.0..=1.0).contains(&self.vitreous_mean) || !(0.0..=1.0).contains(&self.retina_mean) {
            return fail("synth intensity means must lie in [0, 1]".into());
        }
        if !(self.blur >= 0.0) {
            return fail("synth.blur must be non-negative".into());
        }
        Ok(())
    }

    fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Real-valued boundary of sample `index` before rounding.
    pub fn boundary_profile(&self, index: usize) -> Vec<f64> {
        let mut rng = self.rng(index);
        let (h, w) = (self.height as f64, self.width as f64);
        let waves: Vec<(f64, f64, f64)> = (1..=3)
            .map(|k| {
                (
                    k as f64,
                    rng.random::<f64>(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let norm: f64 = waves.iter().map(|&(_, a, _)| a).sum::<f64>().max(1e-12);
        let center = (self.dip_center + rng.random_range(-1.0..=1.0) * self.dip_jitter).clamp(0.0, 1.0) * w;
        let sigma = self.dip_width * w;
        (0..self.width)
            .map(|c| {
                let x = c as f64 + 0.5;
                let wave: f64 = waves
                    .iter()
                    .map(|&(k, a, phase)| a * (std::f64::consts::TAU * k * x / w + phase).sin())
                    .sum::<f64>()
                    / norm;
                let dip = (-0.5 * ((x - center) / sigma).powi(2)).exp();
                self.base_depth * h + self.smoothness * h * wave + self.dip_depth * h * dip
            })
            .collect()
    }

    pub fn sample(&self, index: usize) -> Result<SegmentationSample> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let rows: Vec<usize> = self
            .boundary_profile(index)
            .into_iter()
            .map(|b| (b.round() as usize).clamp(1, h - 2))
            .collect();
        let mut rng = self.rng(index);
        // Skip past the draws used by the boundary so speckle is independent.
        rng.set_word_pos(1 << 20);
        let speckle = Normal::new(0.0, 1.0).expect("unit normal");
        let shape = Shape::new(1, 1, h, w);
        let mask = Tensor::from_fn(shape, |_, _, r, c| if r >= rows[c] { 1.0 } else { 0.0 });
        let (v, t) = (self.vitreous_mean, self.retina_mean);
        let mut image = Tensor::from_fn(shape, |_, _, r, c| {
            let d = r as f64 + 0.5 - rows[c] as f64;
            let s = if self.blur > 0.0 {
                (0.5 + d / (2.0 * self.blur)).clamp(0.0, 1.0)
            } else if d > 0.0 {
                1.0
            } else {
                0.0
            };
            v + (t - v) * s
        });
        if self.noise > 0.0 {
            for p in image.data_mut() {
                let n: f64 = speckle.sample(&mut rng);
                *p = (*p * (1.0 + self.noise * n)).clamp(0.0, 1.0);
            }
        }
        Ok(SegmentationSample {
            image,
            mask,
            boundary: BoundaryCurve::from_rows(rows.iter().map(|&r| r as f64)),
        })
    }
}

/// Samples `0..count` of `spec`. Sample `i` depends only on `(spec, i)`.
pub fn generate(spec: &SynthSpec, count: usize) -> Result<Vec<SegmentationSample>> {
    spec.validate()?;
    (0..count).map(|i| spec.sample(i)).collect()
}

/// Seeded partition of `0..n` into ascending train and test index lists.
/// The train share is `round(n * train_fraction)`, kept within `[1, n - 1]`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} sample(s); need at least 2")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split<S: Clone>(samples: &[S], train_fraction: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    let (a, b) = split_indices(samples.len(), train_fraction, seed)?;
    Ok((
        a.iter().map(|&i| samples[i].clone()).collect(),
        b.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

fn check_target(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(op, format!("target size {h}x{w} must be positive")));
    }
    Ok(())
}

/// Bilinear image resize.
pub fn resize(image: &Tensor<f64>, h: usize, w: usize) -> Result<Tensor<f64>> {
    check_target("resize", h, w)?;
    bilinear_resize(image, h, w)
}

/// Nearest-neighbour resize, which keeps masks binary.
pub fn resize_mask(mask: &Tensor<f64>, h: usize, w: usize) -> Result<Tensor<f64>> {
    check_target("resize_mask", h, w)?;
    nearest_resize(mask, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_flat_boundary_is_a_clean_step() {
        let spec = SynthSpec {
            height: 16,
            width: 8,
            smoothness: 0.0,
            dip_depth: 0.0,
            noise: 0.0,
            blur: 0.0,
            base_depth: 0.375,
            ..SynthSpec::default()
        };
        let s = spec.sample(0).unwrap();
        for r in 0..16 {
            for c in 0..8 {
                let below = r >= 6;
                assert_eq!(s.mask.get(0, 0, r, c), below as u8 as f64);
                let want = if below { spec.retina_mean } else { spec.vitreous_mean };
                assert_eq!(s.image.get(0, 0, r, c), want);
            }
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let spec = SynthSpec::default();
        assert_eq!(generate(&spec, 3).unwrap(), generate(&spec, 3).unwrap());
        let other = SynthSpec {
            seed: 1,
            ..spec.clone()
        };
        assert_ne!(generate(&spec, 1).unwrap(), generate(&other, 1).unwrap());
    }

    #[test]
    fn rejects_invalid_specs() {
        let bad = SynthSpec {
            retina_mean: 0.1,
            ..SynthSpec::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("retina_mean"));
        let bad = SynthSpec {
            base_depth: 0.9,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            noise: -0.1,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_sizes() {
        let (a, b) = split_indices(20, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (10, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(split_indices(2, 0.5, 0).unwrap().0.len(), 1);
        assert!(split_indices(1, 0.5, 0).is_err());
    }
}
