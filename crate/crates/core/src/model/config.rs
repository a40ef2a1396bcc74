use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Number of 2x downsamplings between the input and the bottleneck.
pub const DOWNSAMPLINGS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Encoder widths are `base_width * {1, 2, 4, 8}`.
    pub base_width: usize,
    /// Squeeze ratio `r` of the channel attention bottleneck.
    pub reduction_ratio: usize,
    /// One dilation cascade of 3x3 convolutions per context branch.
    pub dac_dilations: Vec<Vec<usize>>,
    /// Append a 1x1 convolution to the last context branch.
    pub dac_final_pointwise: bool,
    pub rmp_windows: Vec<usize>,
    /// `false` gives the CE-Net style context module without channel attention.
    pub attention_enabled: bool,
    pub input_size: (usize, usize),
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64x64 inputs, base width 16. The 4x4 bottleneck only admits pooling
    /// windows up to 4.
    pub fn desk() -> Self {
        ModelConfig {
            input_channels: 1,
            base_width: 16,
            reduction_ratio: 16,
            dac_dilations: vec![vec![1], vec![1, 3], vec![1, 3, 5], vec![1, 3, 5]],
            dac_final_pointwise: true,
            rmp_windows: vec![1, 2, 3, 4],
            attention_enabled: true,
            input_size: (64, 64),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// 448x448 inputs, base width 64, pooling windows {2, 3, 5, 6}.
    pub fn paper() -> Self {
        ModelConfig {
            base_width: 64,
            rmp_windows: vec![2, 3, 5, 6],
            input_size: (448, 448),
            ..Self::desk()
        }
    }

    /// The smallest useful network: 16x16 inputs, base width 4, `r = 2`.
    /// The bottleneck is 1x1 so every pooling window is 1.
    pub fn tiny() -> Self {
        ModelConfig {
            base_width: 4,
            reduction_ratio: 2,
            rmp_windows: vec![1, 1, 1, 1],
            input_size: (16, 16),
            ..Self::desk()
        }
    }

    pub fn encoder_widths(&self) -> [usize; 4] {
        let b = self.base_width;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn bottleneck_channels(&self) -> usize {
        8 * self.base_width
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        let f = 1 << DOWNSAMPLINGS;
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    /// Units in the squeeze layer, `C / r`.
    pub fn attention_hidden(&self) -> usize {
        self.bottleneck_channels() / self.reduction_ratio
    }

    pub fn context_out_channels(&self) -> usize {
        self.bottleneck_channels() + self.rmp_windows.len()
    }

    pub fn method_name(&self) -> &'static str {
        if self.attention_enabled {
            "CACE-Net"
        } else {
            "CE-Net"
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 {
            return fail("model.input_channels must be at least 1".into());
        }
        if self.base_width == 0 {
            return fail("model.base_width must be at least 1".into());
        }
        if self.reduction_ratio == 0 {
            return fail("model.reduction_ratio must be at least 1".into());
        }
        if self.bottleneck_channels() < self.reduction_ratio {
            return fail(format!(
                "model.base_width * 8 = {} must be at least model.reduction_ratio = {}",
                self.bottleneck_channels(),
                self.reduction_ratio
            ));
        }
        let f = 1 << DOWNSAMPLINGS;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return fail(format!("model.input_size {h}x{w} must be positive multiples of {f}"));
        }
        if self.dac_dilations.is_empty() || self.dac_dilations.iter().any(Vec::is_empty) {
            return fail("model.dac_dilations needs at least one non-empty branch".into());
        }
        if self.dac_dilations.iter().flatten().any(|&d| d == 0) {
            return fail("model.dac_dilations entries must be at least 1".into());
        }
        if self.rmp_windows.is_empty() {
            return fail("model.rmp_windows must not be empty".into());
        }
        let (bh, bw) = self.bottleneck_size();
        for &k in &self.rmp_windows {
            if k == 0 || k > bh.min(bw) {
                return fail(format!(
                    "model.rmp_windows entry {k} does not fit the {bh}x{bw} bottleneck"
                ));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return fail("model.bn_momentum must lie in (0, 1]".into());
        }
        if !(self.bn_eps > 0.0) {
            return fail("model.bn_eps must be positive".into());
        }
        Ok(())
    }

    /// `(key, value)` pairs without the `model.` prefix.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let dil = self
            .dac_dilations
            .iter()
            .map(|b| b.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join(";");
        vec![
            ("input_channels", self.input_channels.to_string()),
            ("base_width", self.base_width.to_string()),
            ("reduction_ratio", self.reduction_ratio.to_string()),
            ("dac_dilations", dil),
            ("dac_final_pointwise", self.dac_final_pointwise.to_string()),
            ("rmp_windows", join_list(&self.rmp_windows)),
            (
                "attention",
                if self.attention_enabled { "on" } else { "off" }.to_string(),
            ),
            ("input_size", format!("{}x{}", self.input_size.0, self.input_size.1)),
            ("bn_momentum", format!("{:?}", self.bn_momentum)),
            ("bn_eps", format!("{:?}", self.bn_eps)),
        ]
    }

    /// Applies one `key = value` setting (key without the `model.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input_channels" => self.input_channels = parse_usize(key, value)?,
            "base_width" => self.base_width = parse_usize(key, value)?,
            "reduction_ratio" => self.reduction_ratio = parse_usize(key, value)?,
            "dac_dilations" => {
                self.dac_dilations = value
                    .split(';')
                    .map(|b| parse_list(key, b))
                    .collect::<Result<Vec<_>>>()?;
            }
            "dac_final_pointwise" => self.dac_final_pointwise = parse_bool(key, value)?,
            "rmp_windows" => self.rmp_windows = parse_list(key, value)?,
            "attention" => self.attention_enabled = parse_bool(key, value)?,
            "input_size" => self.input_size = parse_size(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_f64(key, value)?,
            "bn_eps" => self.bn_eps = parse_f64(key, value)?,
            "preset" => {
                let preset = match value {
                    "desk" => Self::desk(),
                    "paper" => Self::paper(),
                    "tiny" => Self::tiny(),
                    other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
                };
                *self = preset;
            }
            other => return Err(Error::Config(format!("unknown key model.{other}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "model.{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed model config line `{line}`")))?;
            let k = k.trim().strip_prefix("model.").unwrap_or(k.trim());
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }
}

pub(crate) fn join_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a non-negative integer")))
}

pub(crate) fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a non-negative integer")))
}

pub(crate) fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a number")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{v}` is not a boolean (on/off)"))),
    }
}

pub(crate) fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_usize(key, x)).collect()
}

pub(crate) fn parse_size(key: &str, v: &str) -> Result<(usize, usize)> {
    let (h, w) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("{key}: expected HxW, got `{v}`")))?;
    Ok((parse_usize(key, h)?, parse_usize(key, w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::desk(), ModelConfig::paper(), ModelConfig::tiny()] {
            cfg.validate().unwrap();
        }
        assert_eq!(ModelConfig::paper().bottleneck_size(), (28, 28));
    }

    #[test]
    fn rejects_invariant_violations() {
        let mut c = ModelConfig::desk();
        c.input_size = (60, 64);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.rmp_windows = vec![2, 3, 5, 6];
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("rmp_windows entry 5"), "{msg}");
        let mut c = ModelConfig::tiny();
        c.reduction_ratio = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::paper();
        c.attention_enabled = false;
        c.dac_dilations = vec![vec![1, 2], vec![4]];
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
