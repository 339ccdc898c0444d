//! How far can a RoPE base reach, and what base do the common scaling
//! rules suggest for 8K -> 128K?

use lcl::rope::{self, RopeConfig, ScalingMethod};

fn main() -> lcl::Result<()> {
    for base in [rope::LLAMA3_ROPE_BASE, rope::EXTENDED_ROPE_BASE] {
        let cfg = RopeConfig::new(128, base)?;
        let s = rope::summarize(&cfg, Some(rope::TARGET_CONTEXT));
        println!(
            "base {:>12}: max wavelength {:>14.1}, 128K supported: {}",
            base,
            s.max_wavelength,
            s.supports_target.unwrap_or(false)
        );
    }

    let cfg = RopeConfig::new(128, rope::LLAMA3_ROPE_BASE)?;
    for method in [
        ScalingMethod::NtkAware,
        ScalingMethod::PositionInterpolation,
        ScalingMethod::ExplicitBase {
            base: rope::EXTENDED_ROPE_BASE,
        },
    ] {
        let scaled =
            rope::scale_base_for_context(&cfg, rope::NATIVE_CONTEXT, rope::TARGET_CONTEXT, method)?;
        println!(
            "{method}: base {:.1}, position scale {}",
            scaled.config.base, scaled.position_scale
        );
    }
    Ok(())
}
