//! Run configuration shared by the command-line tools.

use serde::{Deserialize, Serialize};

use crate::attention::{
    assign_anchors, assign_anchors_channelwise, AttentionOptions, HeadAnchorAssignment, Splitting,
};
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_PROJ_EPS;
use crate::rope::{make_anchor_schedule, AnchorSchedule, RopeConfig, SamplingKind, DEFAULT_BASE};

/// Element type of tensor files written by the tools. Arithmetic is always
/// carried out in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::InvalidArgument(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub kind: SamplingKind,
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
    pub splitting: Splitting,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { kind: SamplingKind::Uniform, d_min: 2.0, d_max: 20.0, count: 4, splitting: Splitting::HeadWise }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rope_base: f64,
    pub per_head_dim: usize,
    pub heads: usize,
    pub position_scale: f64,
    pub anchor: AnchorConfig,
    pub proj_eps: f64,
    pub mask_invalid: bool,
    pub rotate_vo: bool,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rope_base: DEFAULT_BASE,
            per_head_dim: 16,
            heads: 8,
            position_scale: 1.0,
            anchor: AnchorConfig::default(),
            proj_eps: DEFAULT_PROJ_EPS,
            mask_invalid: false,
            rotate_vo: false,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Rebuilds every derived object so that any broken invariant surfaces.
    pub fn validate(&self) -> Result<()> {
        let rope = self.rope_config()?;
        self.assignment()?;
        if !(self.proj_eps.is_finite() && self.proj_eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "projection epsilon must be positive, got {}",
                self.proj_eps
            )));
        }
        let segments = match self.anchor.splitting {
            Splitting::HeadWise => 1,
            Splitting::ChannelWise => self.anchor.count,
        };
        if rope.per_head_dim % (4 * segments) != 0 {
            return Err(Error::InvalidArgument(format!(
                "per-head dim {} must be divisible by {} for {segments} 2D segment(s)",
                rope.per_head_dim,
                4 * segments
            )));
        }
        Ok(())
    }

    pub fn rope_config(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.per_head_dim)?
            .with_base(self.rope_base)?
            .with_position_scale(self.position_scale)
    }

    pub fn schedule(&self) -> Result<AnchorSchedule> {
        make_anchor_schedule(self.anchor.kind, self.anchor.d_min, self.anchor.d_max, self.anchor.count)
    }

    pub fn assignment(&self) -> Result<HeadAnchorAssignment> {
        let schedule = self.schedule()?;
        match self.anchor.splitting {
            Splitting::HeadWise => assign_anchors(&schedule, self.heads),
            Splitting::ChannelWise => assign_anchors_channelwise(&schedule, self.heads),
        }
    }

    pub fn attention_options(&self) -> AttentionOptions {
        AttentionOptions {
            proj_eps: self.proj_eps,
            mask_invalid: self.mask_invalid,
            rotate_vo: self.rotate_vo,
            scale: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.assignment().unwrap().per_head_depth().unwrap()[7], 20.0);
    }

    #[test]
    fn json_partial_and_unknown() {
        let cfg = RunConfig::from_json(r#"{"heads": 4, "anchor": {"kind": "lid"}}"#).unwrap();
        assert_eq!(cfg.heads, 4);
        assert_eq!(cfg.anchor.kind, SamplingKind::Lid);
        assert_eq!(cfg.anchor.count, 4);
        assert!(RunConfig::from_json(r#"{"headz": 4}"#).is_err());
        assert!(RunConfig::from_json(r#"{"heads": 6}"#).is_err());
        assert!(RunConfig::from_json(r#"{"per_head_dim": 6}"#).is_err());
        assert!(RunConfig::from_json(r#"{"proj_eps": 0}"#).is_err());
        let round = RunConfig::from_json(&cfg.to_json_value().to_string()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn channelwise_needs_divisible_dim() {
        let mut cfg = RunConfig::default();
        cfg.anchor.splitting = Splitting::ChannelWise;
        cfg.anchor.count = 2;
        cfg.validate().unwrap();
        assert_eq!(cfg.assignment().unwrap().segments(), 2);
        cfg.anchor.count = 8;
        assert!(cfg.validate().is_err());
    }
}
