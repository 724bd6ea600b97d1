//! Rotary position embedding with optional context-extension scaling.
//!
//! Pairs `(2d, 2d+1)` of a head vector are rotated by `position * omega_d`
//! with `omega_d = theta_base^(-2d / head_dim)`. Two extension modes are
//! provided: `Linear` divides the position by the scaling factor, and
//! `YarnLike` interpolates per frequency (NTK-by-parts) between the scaled
//! and unscaled rates based on how many full rotations the frequency
//! completes over the original context window.

use crate::error::{Error, Result};

/// Largest position accepted by `rope_apply`.
pub const MAX_POSITION: usize = 1 << 20;

/// Default rotation-count cutoffs for the yarn-like ramp.
pub const YARN_BETA_SLOW: f32 = 1.0;
pub const YARN_BETA_FAST: f32 = 32.0;
/// Context window the ramp is measured against.
pub const YARN_ORIGINAL_CONTEXT: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeScaling {
    None,
    Linear,
    YarnLike,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub theta_base: f32,
    pub scaling_mode: RopeScaling,
    pub scaling_factor: f32,
    pub yarn_beta_slow: f32,
    pub yarn_beta_fast: f32,
    pub yarn_original_context: usize,
}

impl RopeConfig {
    /// Unscaled RoPE with the conventional theta base of 10000.
    pub fn standard(head_dim: usize) -> Result<Self> {
        RopeConfig::new(head_dim, 10_000.0, RopeScaling::None, 1.0)
    }

    pub fn new(
        head_dim: usize,
        theta_base: f32,
        scaling_mode: RopeScaling,
        scaling_factor: f32,
    ) -> Result<Self> {
        let cfg = RopeConfig {
            head_dim,
            theta_base,
            scaling_mode,
            scaling_factor,
            yarn_beta_slow: YARN_BETA_SLOW,
            yarn_beta_fast: YARN_BETA_FAST,
            yarn_original_context: YARN_ORIGINAL_CONTEXT,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.theta_base > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "theta_base must be positive, got {}",
                self.theta_base
            )));
        }
        if !(self.scaling_factor >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "scaling_factor must be >= 1.0, got {}",
                self.scaling_factor
            )));
        }
        if self.scaling_mode == RopeScaling::None && self.scaling_factor != 1.0 {
            return Err(Error::InvalidConfig(
                "scaling_factor must be 1.0 when scaling is disabled".into(),
            ));
        }
        if self.scaling_mode == RopeScaling::YarnLike {
            if !(self.yarn_beta_fast > self.yarn_beta_slow) || !(self.yarn_beta_slow > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "yarn cutoffs must satisfy 0 < slow < fast, got {} / {}",
                    self.yarn_beta_slow, self.yarn_beta_fast
                )));
            }
            if self.yarn_original_context == 0 {
                return Err(Error::InvalidConfig(
                    "yarn_original_context must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Effective angular rate for frequency pair `d`, after scaling.
    fn effective_omega(&self, d: usize) -> f64 {
        let exponent = -2.0 * d as f64 / self.head_dim as f64;
        let omega = (self.theta_base as f64).powf(exponent);
        match self.scaling_mode {
            RopeScaling::None | RopeScaling::Linear => omega,
            RopeScaling::YarnLike => {
                let s = self.scaling_factor as f64;
                // rotations this frequency completes over the original window
                let rotations =
                    self.yarn_original_context as f64 * omega / (2.0 * std::f64::consts::PI);
                let gamma = ((rotations - self.yarn_beta_slow as f64)
                    / (self.yarn_beta_fast as f64 - self.yarn_beta_slow as f64))
                    .clamp(0.0, 1.0);
                (1.0 - gamma) * omega / s + gamma * omega
            }
        }
    }
}

/// Precomputed sin/cos table for one position; heads and layers share it.
#[derive(Debug, Clone)]
pub struct RopeRotation {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeConfig {
    pub fn rotation(&self, position: usize) -> Result<RopeRotation> {
        if position > MAX_POSITION {
            return Err(Error::PositionOverflow {
                position,
                limit: MAX_POSITION,
            });
        }
        let pos = match self.scaling_mode {
            RopeScaling::Linear => position as f64 / self.scaling_factor as f64,
            _ => position as f64,
        };
        let pairs = self.head_dim / 2;
        let mut cos = Vec::with_capacity(pairs);
        let mut sin = Vec::with_capacity(pairs);
        for d in 0..pairs {
            let (s, c) = (pos * self.effective_omega(d)).sin_cos();
            cos.push(c);
            sin.push(s);
        }
        Ok(RopeRotation { cos, sin })
    }
}

impl RopeRotation {
    /// Rotate a head vector in place.
    pub fn apply_in_place(&self, vec: &mut [f32]) {
        debug_assert_eq!(vec.len(), 2 * self.cos.len());
        for d in 0..self.cos.len() {
            let x0 = vec[2 * d] as f64;
            let x1 = vec[2 * d + 1] as f64;
            vec[2 * d] = (x0 * self.cos[d] - x1 * self.sin[d]) as f32;
            vec[2 * d + 1] = (x0 * self.sin[d] + x1 * self.cos[d]) as f32;
        }
    }
}

/// Rotate a head vector to encode `position`. Preserves the L2 norm.
pub fn rope_apply(vec: &[f32], position: usize, cfg: &RopeConfig) -> Result<Vec<f32>> {
    if vec.len() != cfg.head_dim {
        return Err(Error::ShapeMismatch {
            context: "rope_apply",
            expected: format!("{} dims", cfg.head_dim),
            actual: format!("{}", vec.len()),
        });
    }
    let rotation = cfg.rotation(position)?;
    let mut out = vec.to_vec();
    rotation.apply_in_place(&mut out);
    Ok(out)
}
