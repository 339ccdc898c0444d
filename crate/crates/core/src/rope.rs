//! Rotary position embedding arithmetic for context-window extension.
//!
//! Frequencies follow `f_i = base^(-2i/d)` for `i in 0..d/2`; the wavelength
//! of pair `i` is `2π / f_i`. A window is considered supported when it does
//! not exceed the longest wavelength. That criterion is a heuristic used to
//! sanity-check base choices, not a guarantee about model quality.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LLAMA3_ROPE_BASE: f64 = 500_000.0;
pub const EXTENDED_ROPE_BASE: f64 = 150_000_000.0;
pub const NATIVE_CONTEXT: usize = 8192;
pub const TARGET_CONTEXT: usize = 131_072;
pub const DEFAULT_HEAD_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim must be a positive even integer, got {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::Config(format!(
                "RoPE base must exceed 1, got {base}"
            )));
        }
        Ok(Self { head_dim, base })
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            head_dim: DEFAULT_HEAD_DIM,
            base: EXTENDED_ROPE_BASE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScalingMethod {
    /// Replace the base outright.
    ExplicitBase { base: f64 },
    /// NTK-aware base rescaling by the context ratio.
    NtkAware,
    /// Compress positions by the context ratio; base unchanged.
    PositionInterpolation,
}

impl fmt::Display for ScalingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalingMethod::ExplicitBase { base } => write!(f, "explicit-base({base})"),
            ScalingMethod::NtkAware => f.write_str("ntk-aware"),
            ScalingMethod::PositionInterpolation => f.write_str("position-interpolation"),
        }
    }
}

pub fn dim_frequencies(cfg: &RopeConfig) -> Vec<f64> {
    let d = cfg.head_dim as f64;
    (0..cfg.pairs())
        .map(|i| cfg.base.powf(-2.0 * i as f64 / d))
        .collect()
}

pub fn wavelengths(cfg: &RopeConfig) -> Vec<f64> {
    dim_frequencies(cfg)
        .into_iter()
        .map(|f| 2.0 * PI / f)
        .collect()
}

/// Longest wavelength, `2π · base^((d-2)/d)`.
pub fn max_supported_context(cfg: &RopeConfig) -> f64 {
    let d = cfg.head_dim as f64;
    2.0 * PI * cfg.base.powf((d - 2.0) / d)
}

pub fn supports_context(cfg: &RopeConfig, window: usize) -> bool {
    window as f64 <= max_supported_context(cfg)
}

/// Result of rescaling a config for a longer window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledRope {
    pub config: RopeConfig,
    /// Factor positions are divided by (1 unless interpolating).
    pub position_scale: f64,
    pub context_ratio: f64,
}

impl ScaledRope {
    /// Frequencies as seen by positions, folding in interpolation.
    pub fn effective_frequencies(&self) -> Vec<f64> {
        dim_frequencies(&self.config)
            .into_iter()
            .map(|f| f / self.position_scale)
            .collect()
    }
}

pub fn scale_base_for_context(
    cfg: &RopeConfig,
    old_ctx: usize,
    new_ctx: usize,
    method: ScalingMethod,
) -> Result<ScaledRope> {
    if old_ctx == 0 {
        return Err(Error::Argument("old context must be positive".into()));
    }
    if new_ctx < old_ctx {
        return Err(Error::Argument(format!(
            "new context {new_ctx} is shorter than old context {old_ctx}"
        )));
    }
    let s = new_ctx as f64 / old_ctx as f64;
    let d = cfg.head_dim as f64;
    let (config, position_scale) = match method {
        ScalingMethod::ExplicitBase { base } => {
            if s == 1.0 {
                (*cfg, 1.0)
            } else {
                (RopeConfig::new(cfg.head_dim, base)?, 1.0)
            }
        }
        ScalingMethod::NtkAware => {
            if cfg.head_dim <= 2 {
                return Err(Error::Config("NTK-aware scaling needs head_dim > 2".into()));
            }
            let base = cfg.base * s.powf(d / (d - 2.0));
            (RopeConfig::new(cfg.head_dim, base)?, 1.0)
        }
        ScalingMethod::PositionInterpolation => (*cfg, s),
    };
    Ok(ScaledRope {
        config,
        position_scale,
        context_ratio: s,
    })
}

/// Human-readable summary used by `rope info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeSummary {
    pub head_dim: usize,
    pub base: f64,
    pub min_frequency: f64,
    pub max_wavelength: f64,
    pub target_context: Option<usize>,
    pub supports_target: Option<bool>,
}

pub fn summarize(cfg: &RopeConfig, target: Option<usize>) -> RopeSummary {
    let freqs = dim_frequencies(cfg);
    RopeSummary {
        head_dim: cfg.head_dim,
        base: cfg.base,
        min_frequency: freqs.last().copied().unwrap_or(1.0),
        max_wavelength: max_supported_context(cfg),
        target_context: target,
        supports_target: target.map(|t| supports_context(cfg, t)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn small_config_frequencies_and_wavelengths() {
        let cfg = RopeConfig::new(4, 10_000.0).unwrap();
        let f = dim_frequencies(&cfg);
        assert_eq!(f[0], 1.0);
        assert!(rel(f[1], 0.01) < 1e-12);
        let w = wavelengths(&cfg);
        assert!(rel(w[0], 2.0 * PI) < 1e-12);
        assert!(rel(w[1], 628.318_530_717_958_6) < 1e-12);
    }

    #[test]
    fn invalid_configs() {
        assert!(RopeConfig::new(3, 10_000.0).is_err());
        assert!(RopeConfig::new(0, 10_000.0).is_err());
        assert!(RopeConfig::new(4, 1.0).is_err());
        assert!(RopeConfig::new(4, f64::NAN).is_err());
    }

    #[test]
    fn longest_wavelength_values() {
        let extended = RopeConfig::new(128, 150e6).unwrap();
        let base = RopeConfig::new(128, 500e3).unwrap();
        // 2π·θ^(126/128), evaluated independently in f64
        assert!(rel(max_supported_context(&extended), 702_295_202.185_239_8) < 1e-9);
        assert!(rel(max_supported_context(&base), 2_559_195.517_371_359) < 1e-9);
        assert!(supports_context(&extended, TARGET_CONTEXT));
        let tiny = RopeConfig::new(2, 1e9).unwrap();
        assert!(rel(max_supported_context(&tiny), 2.0 * PI) < 1e-15);
    }

    #[test]
    fn doubling_base_lengthens_wavelengths() {
        let a = wavelengths(&RopeConfig::new(64, 10_000.0).unwrap());
        let b = wavelengths(&RopeConfig::new(64, 20_000.0).unwrap());
        assert_eq!(a[0], b[0]);
        assert!(a.iter().zip(&b).skip(1).all(|(x, y)| y > x));
    }

    #[test]
    fn ntk_scaling_value() {
        let cfg = RopeConfig::new(128, 10_000.0).unwrap();
        let scaled = scale_base_for_context(&cfg, 1000, 4000, ScalingMethod::NtkAware).unwrap();
        // 10000 · 4^(128/126)
        assert!(rel(scaled.config.base, 40_889.942_432_486_22) < 1e-9);
        assert_eq!(scaled.position_scale, 1.0);
    }

    #[test]
    fn explicit_base_for_extension() {
        let cfg = RopeConfig::new(128, LLAMA3_ROPE_BASE).unwrap();
        let scaled = scale_base_for_context(
            &cfg,
            NATIVE_CONTEXT,
            TARGET_CONTEXT,
            ScalingMethod::ExplicitBase {
                base: EXTENDED_ROPE_BASE,
            },
        )
        .unwrap();
        assert_eq!(scaled.config.base, 150_000_000.0);
        assert_eq!(scaled.context_ratio, 16.0);
    }

    #[test]
    fn position_interpolation_keeps_base() {
        let cfg = RopeConfig::new(128, LLAMA3_ROPE_BASE).unwrap();
        let scaled =
            scale_base_for_context(&cfg, 8192, 32768, ScalingMethod::PositionInterpolation)
                .unwrap();
        assert_eq!(scaled.config, cfg);
        assert_eq!(scaled.position_scale, 4.0);
        assert_eq!(scaled.effective_frequencies()[0], 0.25);
    }

    #[test]
    fn unit_scale_is_identity_for_every_method() {
        let cfg = RopeConfig::new(128, LLAMA3_ROPE_BASE).unwrap();
        for method in [
            ScalingMethod::NtkAware,
            ScalingMethod::PositionInterpolation,
            ScalingMethod::ExplicitBase { base: 1e7 },
        ] {
            let scaled = scale_base_for_context(&cfg, 8192, 8192, method).unwrap();
            assert_eq!(
                scaled.effective_frequencies(),
                dim_frequencies(&cfg),
                "{method}"
            );
        }
    }

    #[test]
    fn shrinking_is_rejected() {
        let cfg = RopeConfig::default();
        assert!(matches!(
            scale_base_for_context(&cfg, 8192, 4096, ScalingMethod::NtkAware),
            Err(Error::Argument(_))
        ));
    }
}
