use std::fmt;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::flows::MultiScaleSpec;
use crate::numerics::Dtype;
use crate::prior::PriorSpec;

/// Where the decoder receives the global code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// `z` enters every coupling layer.
    Couplings,
    /// Couplings are unconditional; `z` only sets the mean and scale of
    /// the Gaussian over `upsilon`.
    Base,
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::Couplings => "couplings",
            Conditioning::Base => "base",
        })
    }
}

impl FromStr for Conditioning {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "couplings" => Ok(Conditioning::Couplings),
            "base" => Ok(Conditioning::Base),
            _ => Err(format!("expected couplings or base, got {s:?}")),
        }
    }
}

struct DtypeArg(Dtype);

impl FromStr for DtypeArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Dtype::parse(s)
            .map(DtypeArg)
            .ok_or_else(|| format!("expected f32 or f64, got {s:?}"))
    }
}

/// Architecture of the whole model. Everything here is covered by the
/// checkpoint digest.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bits: u32,
    pub dz: usize,
    pub flow_levels: usize,
    pub flow_steps: usize,
    pub flow_hidden: usize,
    pub flow_alpha: f64,
    pub flow_additive: bool,
    pub flow_condition: Conditioning,
    pub encoder_base_width: usize,
    pub encoder_max_width: usize,
    /// Require `dz <= h*w*c / 8`.
    pub strict_compression: bool,
    pub prior_depth: usize,
    /// Prior MLP width; 0 means `2 * dz`.
    pub prior_hidden: usize,
    pub prior_alpha: f64,
    pub precision: Dtype,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 8,
            width: 8,
            channels: 3,
            bits: 8,
            dz: 16,
            flow_levels: 2,
            flow_steps: 1,
            flow_hidden: 64,
            flow_alpha: 1.0,
            flow_additive: false,
            flow_condition: Conditioning::Couplings,
            encoder_base_width: 32,
            encoder_max_width: 256,
            strict_compression: true,
            prior_depth: 4,
            prior_hidden: 0,
            prior_alpha: 1.0,
            precision: Dtype::F32,
        }
    }
}

impl ModelConfig {
    /// Consumes the model keys of `kv`, filling defaults.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            height: kv.take("image.height", d.height)?,
            width: kv.take("image.width", d.width)?,
            channels: kv.take("image.channels", d.channels)?,
            bits: kv.take("image.bits", d.bits)?,
            dz: kv.take("latent.dz", d.dz)?,
            flow_levels: kv.take("flow.levels", d.flow_levels)?,
            flow_steps: kv.take("flow.steps", d.flow_steps)?,
            flow_hidden: kv.take("flow.hidden", d.flow_hidden)?,
            flow_alpha: kv.take("flow.alpha", d.flow_alpha)?,
            flow_additive: kv.take("flow.additive", d.flow_additive)?,
            flow_condition: kv.take("flow.condition", d.flow_condition)?,
            encoder_base_width: kv.take("encoder.base_width", d.encoder_base_width)?,
            encoder_max_width: kv.take("encoder.max_width", d.encoder_max_width)?,
            strict_compression: kv.take("encoder.strict_compression", d.strict_compression)?,
            prior_depth: kv.take("prior.depth", d.prior_depth)?,
            prior_hidden: kv.take("prior.hidden", d.prior_hidden)?,
            prior_alpha: kv.take("prior.alpha", d.prior_alpha)?,
            precision: kv.take("precision", DtypeArg(d.precision))?.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    /// Canonical `key = value` lines, in a fixed order.
    pub fn to_text(&self) -> String {
        let lines: [(&str, String); 18] = [
            ("image.height", self.height.to_string()),
            ("image.width", self.width.to_string()),
            ("image.channels", self.channels.to_string()),
            ("image.bits", self.bits.to_string()),
            ("latent.dz", self.dz.to_string()),
            ("flow.levels", self.flow_levels.to_string()),
            ("flow.steps", self.flow_steps.to_string()),
            ("flow.hidden", self.flow_hidden.to_string()),
            ("flow.alpha", self.flow_alpha.to_string()),
            ("flow.additive", self.flow_additive.to_string()),
            ("flow.condition", self.flow_condition.to_string()),
            ("encoder.base_width", self.encoder_base_width.to_string()),
            ("encoder.max_width", self.encoder_max_width.to_string()),
            ("encoder.strict_compression", self.strict_compression.to_string()),
            ("prior.depth", self.prior_depth.to_string()),
            ("prior.hidden", self.prior_hidden.to_string()),
            ("prior.alpha", self.prior_alpha.to_string()),
            ("precision", self.precision.name().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::config(format!("image.bits must be in 1..=8, got {}", self.bits)));
        }
        if self.dz < 2 || !self.dz.is_multiple_of(2) {
            return Err(Error::config(format!(
                "latent.dz must be even and at least 2, got {}",
                self.dz
            )));
        }
        if self.strict_compression && self.dz * 8 > self.dim() {
            return Err(Error::config(format!(
                "latent.dz = {} exceeds h*w*c/8 = {}; set encoder.strict_compression = false to allow it",
                self.dz,
                self.dim() / 8
            )));
        }
        self.flow_spec().validate()?;
        self.encoder_spec().validate()?;
        self.prior_spec().validate()
    }

    pub fn image(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Pixel-channel count `h*w*c`.
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn flow_spec(&self) -> MultiScaleSpec {
        MultiScaleSpec {
            image: self.image(),
            levels: self.flow_levels,
            steps: self.flow_steps,
            hidden: self.flow_hidden,
            alpha: self.flow_alpha,
            additive: self.flow_additive,
            cond_dim: match self.flow_condition {
                Conditioning::Couplings => Some(self.dz),
                Conditioning::Base => None,
            },
        }
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            image: self.image(),
            dz: self.dz,
            base_width: self.encoder_base_width,
            max_width: self.encoder_max_width,
        }
    }

    pub fn prior_spec(&self) -> PriorSpec {
        PriorSpec {
            dz: self.dz,
            depth: self.prior_depth,
            hidden: if self.prior_hidden == 0 {
                2 * self.dz
            } else {
                self.prior_hidden
            },
            alpha: self.prior_alpha,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = ModelConfig::default();
        cfg.flow_condition = Conditioning::Base;
        cfg.precision = Dtype::F64;
        cfg.flow_alpha = 0.5;
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::parse("latent.dz = 3").is_err());
        assert!(ModelConfig::parse("latent.dz = 64").is_err());
        assert!(ModelConfig::parse("image.height = 10").is_err());
        assert!(ModelConfig::parse("flow.alpha = 1.5").is_err());
        assert!(ModelConfig::parse("precision = f16").is_err());
        let toy = "image.height = 2\nimage.width = 2\nimage.channels = 1\nlatent.dz = 2\nflow.levels = 1\n";
        assert!(ModelConfig::parse(toy).is_err());
        let toy = format!("{toy}encoder.strict_compression = false\n");
        assert!(ModelConfig::parse(&toy).is_ok());
    }
}
