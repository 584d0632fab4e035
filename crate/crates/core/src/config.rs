//! Architecture configuration and the built-in profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture schedule shared by the generator, discriminator and encoder.
///
/// Spatial sizes are derived from `output_resolution` by repeated ceiling
/// halving (300×400 → 150×200 → 75×100 → 38×50 → 19×25 → 10×13 → 5×7), and
/// `base_resolution` must equal the coarsest level of that pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub subvector_dims: Vec<usize>,
    pub base_resolution: (usize, usize),
    pub output_resolution: (usize, usize),
    /// Channels of the feature map entering each generator stage, coarsest first.
    pub channel_schedule: Vec<usize>,
    pub stages: usize,
    pub output_channels: usize,
    pub norm_epsilon: f32,
    pub weight_init_stddev: f32,
    pub leaky_slope: f32,
}

/// Named configuration presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper256,
    Paper512,
    Paper400x300,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper256" => Ok(Profile::Paper256),
            "paper512" => Ok(Profile::Paper512),
            "paper400x300" => Ok(Profile::Paper400x300),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::InvalidConfig(format!("unknown profile '{other}'"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Profile::Paper256 => "paper256",
            Profile::Paper512 => "paper512",
            Profile::Paper400x300 => "paper400x300",
            Profile::Desk => "desk",
        };
        f.write_str(s)
    }
}

impl Profile {
    pub fn net_config(self) -> NetConfig {
        match self {
            Profile::Paper256 => NetConfig {
                subvector_dims: vec![30; 5],
                base_resolution: (8, 8),
                output_resolution: (256, 256),
                channel_schedule: vec![512, 256, 128, 64, 64],
                stages: 5,
                ..NetConfig::defaults()
            },
            Profile::Paper512 => NetConfig {
                subvector_dims: vec![30; 6],
                base_resolution: (8, 8),
                output_resolution: (512, 512),
                channel_schedule: vec![512, 256, 128, 64, 64, 64],
                stages: 6,
                ..NetConfig::defaults()
            },
            Profile::Paper400x300 => NetConfig {
                subvector_dims: vec![30; 6],
                base_resolution: (5, 7),
                output_resolution: (300, 400),
                channel_schedule: vec![512, 256, 128, 64, 64, 64],
                stages: 6,
                ..NetConfig::defaults()
            },
            Profile::Desk => NetConfig::desk(),
        }
    }

    /// Epochs per scale.
    pub fn epochs_per_stage(self) -> usize {
        match self {
            Profile::Paper256 => 20,
            Profile::Paper512 | Profile::Paper400x300 => 12,
            Profile::Desk => 4,
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Profile::Paper256 => 20,
            Profile::Paper512 | Profile::Paper400x300 => 12,
            Profile::Desk => 16,
        }
    }
}

impl NetConfig {
    fn defaults() -> NetConfig {
        NetConfig {
            subvector_dims: Vec::new(),
            base_resolution: (0, 0),
            output_resolution: (0, 0),
            channel_schedule: Vec::new(),
            stages: 0,
            output_channels: 3,
            norm_epsilon: 1e-5,
            weight_init_stddev: 0.02,
            leaky_slope: 0.2,
        }
    }

    /// Three branches of eight dimensions, 4×4 base map, 8/16/32 px stages.
    pub fn desk() -> NetConfig {
        NetConfig {
            subvector_dims: vec![8; 3],
            base_resolution: (4, 4),
            output_resolution: (32, 32),
            channel_schedule: vec![64, 32, 16],
            stages: 3,
            ..NetConfig::defaults()
        }
    }

    pub fn branch_count(&self) -> usize {
        self.subvector_dims.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.subvector_dims.iter().sum()
    }

    /// Offset of each sub-vector inside the concatenated latent.
    pub fn subvector_offsets(&self) -> Vec<usize> {
        self.subvector_dims
            .iter()
            .scan(0, |acc, &d| {
                let start = *acc;
                *acc += d;
                Some(start)
            })
            .collect()
    }

    /// Spatial sizes of every level, index 0 = base map, index `stages` = output.
    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        let mut levels = vec![self.output_resolution];
        let mut cur = self.output_resolution;
        for _ in 0..self.stages {
            cur = (cur.0.div_ceil(2), cur.1.div_ceil(2));
            levels.push(cur);
        }
        levels.reverse();
        levels
    }

    /// Output resolution of the generator at `stage` (1-based).
    pub fn stage_resolution(&self, stage: usize) -> Result<(usize, usize)> {
        self.check_stage(stage)?;
        Ok(self.resolutions()[stage])
    }

    pub fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.stages {
            return Err(Error::InvalidStage {
                stage,
                stages: self.stages,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.subvector_dims.is_empty() || self.subvector_dims.contains(&0) {
            return bad("subvector_dims must be non-empty and positive".into());
        }
        if self.channel_schedule.len() != self.stages {
            return bad(format!(
                "channel_schedule has {} entries, expected one per stage ({})",
                self.channel_schedule.len(),
                self.stages
            ));
        }
        if self.channel_schedule.contains(&0) || self.output_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.output_resolution.0 == 0 || self.output_resolution.1 == 0 {
            return bad("output resolution must be positive".into());
        }
        let base = self.resolutions()[0];
        if base != self.base_resolution {
            return bad(format!(
                "base_resolution {:?} does not match the halving pyramid of {:?} ({:?})",
                self.base_resolution, self.output_resolution, base
            ));
        }
        if !(self.norm_epsilon > 0.0) || !(self.weight_init_stddev > 0.0) {
            return bad("norm_epsilon and weight_init_stddev must be positive".into());
        }
        Ok(())
    }
}
