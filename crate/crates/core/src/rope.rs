//! Rotary embeddings over 1, 2, 3 and 6 position axes, and depth-anchor
//! schedules.
//!
//! Channel layout: a vector of dimension `C` rotated over `n` axes is split
//! into `n` contiguous blocks of `C / n` channels (first axis first). Inside
//! a block, adjacent channels `(2m, 2m + 1)` form rotation plane `m` with
//! frequency `base^(-2m / block_dim)`. This layout is part of the tensor
//! file contract.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BASE: f64 = 100.0;

/// Rotary configuration shared by every mode.
///
/// Positions are multiplied by `position_scale` before use; the default of
/// 1.0 keeps raw pixel (or scene-unit) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub per_head_dim: usize,
    #[serde(default = "default_base")]
    pub base: f64,
    #[serde(default = "default_scale")]
    pub position_scale: f64,
}

fn default_base() -> f64 {
    DEFAULT_BASE
}

fn default_scale() -> f64 {
    1.0
}

impl RopeConfig {
    pub fn new(per_head_dim: usize) -> Result<Self> {
        let cfg = Self { per_head_dim, base: DEFAULT_BASE, position_scale: 1.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_base(mut self, base: f64) -> Result<Self> {
        self.base = base;
        self.validate()?;
        Ok(self)
    }

    pub fn with_position_scale(mut self, scale: f64) -> Result<Self> {
        self.position_scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_head_dim == 0 || !self.per_head_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "per-head dim must be a positive even integer, got {}",
                self.per_head_dim
            )));
        }
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(Error::InvalidArgument(format!("rope base must be > 1, got {}", self.base)));
        }
        if !(self.position_scale.is_finite() && self.position_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "position scale must be positive, got {}",
                self.position_scale
            )));
        }
        Ok(())
    }

    /// Checks that `per_head_dim` splits into `axes` blocks of even width.
    pub fn check_axes(&self, axes: usize) -> Result<usize> {
        if axes == 0 || !self.per_head_dim.is_multiple_of(2 * axes) {
            return Err(Error::InvalidArgument(format!(
                "per-head dim {} is not divisible by {} ({} axes of even width)",
                self.per_head_dim,
                2 * axes,
                axes
            )));
        }
        Ok(self.per_head_dim / axes)
    }
}

/// Geometric frequency ladder `base^(-2m / block_dim)`.
pub fn rope_frequencies(cfg: &RopeConfig, block_dim: usize) -> Result<Vec<f64>> {
    if block_dim == 0 || !block_dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("block dim must be even, got {block_dim}")));
    }
    if block_dim > cfg.per_head_dim {
        return Err(Error::InvalidArgument(format!(
            "block dim {block_dim} exceeds per-head dim {}",
            cfg.per_head_dim
        )));
    }
    Ok((0..block_dim / 2)
        .map(|m| cfg.base.powf(-2.0 * m as f64 / block_dim as f64))
        .collect())
}

/// Rotates channel pairs of `x` in place by `position * freqs[m]`.
pub fn rotate_pairs_in_place(x: &mut [f64], position: f64, freqs: &[f64]) -> Result<()> {
    if x.len() != 2 * freqs.len() {
        return Err(Error::ShapeMismatch(format!(
            "vector of dim {} needs {} frequencies, got {}",
            x.len(),
            x.len() / 2,
            freqs.len()
        )));
    }
    for (pair, &w) in x.chunks_exact_mut(2).zip(freqs) {
        let (s, c) = (position * w).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
    Ok(())
}

pub fn rope_rotate_1d(x: &[f64], position: f64, freqs: &[f64]) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    rotate_pairs_in_place(&mut out, position, freqs)?;
    Ok(out)
}

/// Precomputed ladders for an `axes`-block rotation of a `dim`-channel
/// segment. Reused across tokens by the attention kernels.
#[derive(Debug, Clone)]
pub struct BlockRotator {
    freqs: Vec<f64>,
    block_dim: usize,
    axes: usize,
    scale: f64,
}

impl BlockRotator {
    pub fn new(cfg: &RopeConfig, axes: usize) -> Result<Self> {
        cfg.validate()?;
        let block_dim = cfg.check_axes(axes)?;
        Ok(Self {
            freqs: rope_frequencies(cfg, block_dim)?,
            block_dim,
            axes,
            scale: cfg.position_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.block_dim * self.axes
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    /// Rotates `x` by `positions` (one per axis); `sign = -1.0` applies the
    /// inverse (transpose) rotation.
    pub fn apply(&self, x: &mut [f64], positions: &[f64], sign: f64) {
        debug_assert_eq!(x.len(), self.dim());
        debug_assert_eq!(positions.len(), self.axes);
        for (block, &p) in x.chunks_exact_mut(self.block_dim).zip(positions) {
            for (pair, &w) in block.chunks_exact_mut(2).zip(&self.freqs) {
                let (s, c) = (sign * self.scale * p * w).sin_cos();
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }

    pub fn rotate(&self, x: &[f64], positions: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "expected vector of dim {}, got {}",
                self.dim(),
                x.len()
            )));
        }
        if positions.len() != self.axes {
            return Err(Error::ShapeMismatch(format!(
                "expected {} positions, got {}",
                self.axes,
                positions.len()
            )));
        }
        let mut out = x.to_vec();
        self.apply(&mut out, positions, 1.0);
        Ok(out)
    }
}

fn rotate_nd(x: &[f64], positions: &[f64], cfg: &RopeConfig) -> Result<Vec<f64>> {
    if x.len() != cfg.per_head_dim {
        return Err(Error::ShapeMismatch(format!(
            "vector dim {} does not match per-head dim {}",
            x.len(),
            cfg.per_head_dim
        )));
    }
    BlockRotator::new(cfg, positions.len())?.rotate(x, positions)
}

/// Image-plane rotation: first half of the channels at `u`, second at `v`.
pub fn rope_rotate_2d(x: &[f64], u: f64, v: f64, cfg: &RopeConfig) -> Result<Vec<f64>> {
    rotate_nd(x, &[u, v], cfg)
}

pub fn rope_rotate_3d(x: &[f64], p: [f64; 3], cfg: &RopeConfig) -> Result<Vec<f64>> {
    rotate_nd(x, &p, cfg)
}

/// Ray baseline: six blocks at `(o_x, o_y, o_z, r_x, r_y, r_z)`.
pub fn rope_rotate_6d(x: &[f64], ray: [f64; 6], cfg: &RopeConfig) -> Result<Vec<f64>> {
    rotate_nd(x, &ray, cfg)
}

/// How anchor depths are spaced between `d_min` and `d_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    Uniform,
    LogUniform,
    /// Linear-increasing discretization: gaps grow linearly with index.
    Lid,
}

impl std::str::FromStr for SamplingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "log_uniform" | "log-uniform" => Ok(Self::LogUniform),
            "lid" => Ok(Self::Lid),
            other => Err(Error::InvalidArgument(format!("unknown sampling kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for SamplingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::LogUniform => "log_uniform",
            Self::Lid => "lid",
        })
    }
}

/// Ordered, strictly increasing depth anchors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorSchedule {
    kind: SamplingKind,
    d_min: f64,
    d_max: f64,
    depths: Vec<f64>,
}

impl AnchorSchedule {
    pub fn kind(&self) -> SamplingKind {
        self.kind
    }

    pub fn range(&self) -> (f64, f64) {
        (self.d_min, self.d_max)
    }

    pub fn count(&self) -> usize {
        self.depths.len()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }
}

/// Builds `count` anchors in `[d_min, d_max]`.
///
/// * uniform: `d_min + (d_max - d_min) * h / (K - 1)`
/// * log-uniform: the same spacing applied to `ln d`
/// * lid: `d_min + (d_max - d_min) * h (h + 1) / (K (K - 1))`, whose gaps
///   grow as `2h`
///
/// All kinds hit both endpoints exactly for `K >= 2`; `K = 1` gives the
/// midpoint `(d_min + d_max) / 2`.
pub fn make_anchor_schedule(
    kind: SamplingKind,
    d_min: f64,
    d_max: f64,
    count: usize,
) -> Result<AnchorSchedule> {
    if !(d_min.is_finite() && d_max.is_finite() && d_min > 0.0 && d_max > d_min) {
        return Err(Error::InvalidArgument(format!(
            "anchor range must satisfy 0 < d_min < d_max, got [{d_min}, {d_max}]"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("anchor count must be at least 1".into()));
    }
    let depths = if count == 1 {
        vec![0.5 * (d_min + d_max)]
    } else {
        let last = (count - 1) as f64;
        let mut depths: Vec<f64> = (0..count)
            .map(|h| {
                let h = h as f64;
                match kind {
                    SamplingKind::Uniform => d_min + (d_max - d_min) * h / last,
                    SamplingKind::LogUniform => {
                        let (a, b) = (d_min.ln(), d_max.ln());
                        (a + (b - a) * h / last).exp()
                    }
                    SamplingKind::Lid => {
                        d_min + (d_max - d_min) * (h * (h + 1.0)) / (count as f64 * last)
                    }
                }
            })
            .collect();
        depths[0] = d_min;
        depths[count - 1] = d_max;
        depths
    };
    if depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "anchor range [{d_min}, {d_max}] too narrow for {count} distinct anchors"
        )));
    }
    Ok(AnchorSchedule { kind, d_min, d_max, depths })
}
