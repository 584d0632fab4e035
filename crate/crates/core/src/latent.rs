//! The branched latent code and the pure manipulations defined on it.
//!
//! A [`BranchedLatent`] holds one sub-vector per scale. Sub-vector 0 drives
//! the coarsest structures; later sub-vectors were de-frozen at finer
//! resolutions during training.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchedLatent {
    pub subvectors: Vec<Vec<f32>>,
}

impl BranchedLatent {
    pub fn zeros(config: &NetConfig) -> Self {
        BranchedLatent {
            subvectors: config.subvector_dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    /// Splits a flat vector according to the configured sub-vector lengths.
    pub fn from_flat(config: &NetConfig, flat: &[f32]) -> Result<Self> {
        if flat.len() != config.latent_dim() {
            return Err(Error::DimensionMismatch(format!(
                "flat latent has {} entries, config expects {}",
                flat.len(),
                config.latent_dim()
            )));
        }
        let mut rest = flat;
        let subvectors = config
            .subvector_dims
            .iter()
            .map(|&d| {
                let (head, tail) = rest.split_at(d);
                rest = tail;
                head.to_vec()
            })
            .collect();
        Ok(BranchedLatent { subvectors })
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.subvectors.iter().flatten().copied().collect()
    }

    pub fn branch_count(&self) -> usize {
        self.subvectors.len()
    }

    /// Checks branch count, lengths and the [-1, 1] box.
    pub fn validate(&self, config: &NetConfig) -> Result<()> {
        if self.subvectors.len() != config.branch_count() {
            return Err(Error::DimensionMismatch(format!(
                "latent has {} sub-vectors, config expects {}",
                self.subvectors.len(),
                config.branch_count()
            )));
        }
        for (t, (sv, &d)) in self.subvectors.iter().zip(&config.subvector_dims).enumerate() {
            if sv.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "sub-vector {t} has length {}, expected {d}",
                    sv.len()
                )));
            }
            if let Some(v) = sv.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
                return Err(Error::DimensionMismatch(format!(
                    "sub-vector {t} has coordinate {v} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &BranchedLatent) -> bool {
        self.subvectors.len() == other.subvectors.len()
            && self
                .subvectors
                .iter()
                .zip(&other.subvectors)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn clamp_unit(&mut self) {
        for v in self.subvectors.iter_mut().flatten() {
            *v = v.clamp(-1.0, 1.0);
        }
    }
}

/// Where one sub-vector's values come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubvectorSource {
    /// Zero vector; the branch receives no gradient.
    Frozen,
    /// Independent draws from U(-alpha, alpha).
    Uniform { alpha: f32 },
    Constant { values: Vec<f32> },
    /// `p` times the all-ones vector.
    Fill { p: f32 },
}

impl SubvectorSource {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            SubvectorSource::Frozen => Ok(()),
            SubvectorSource::Uniform { alpha } => {
                if (0.0..=1.0).contains(alpha) {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!("uniform alpha {alpha} outside [0, 1]")))
                }
            }
            SubvectorSource::Constant { values } => {
                if values.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "constant sub-vector has length {}, expected {dim}",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
                    return Err(Error::InvalidConfig(
                        "constant sub-vector leaves the [-1, 1] box".into(),
                    ));
                }
                Ok(())
            }
            SubvectorSource::Fill { p } => {
                if p.is_finite() && p.abs() <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!("fill value {p} outside [-1, 1]")))
                }
            }
        }
    }

    fn draw<R: Rng>(&self, dim: usize, rng: &mut R) -> Vec<f32> {
        match self {
            SubvectorSource::Frozen => vec![0.0; dim],
            SubvectorSource::Uniform { alpha } => {
                (0..dim).map(|_| uniform_sym(rng, *alpha)).collect()
            }
            SubvectorSource::Constant { values } => values.clone(),
            SubvectorSource::Fill { p } => vec![*p; dim],
        }
    }
}

/// Draws from U(-alpha, alpha); alpha = 0 yields exact zeros.
pub fn uniform_sym<R: Rng>(rng: &mut R, alpha: f32) -> f32 {
    if alpha == 0.0 {
        return 0.0;
    }
    (rng.random::<f32>() * 2.0 - 1.0) * alpha
}

/// Per-sub-vector sampling plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePolicy {
    pub sources: Vec<SubvectorSource>,
}

impl SamplePolicy {
    pub fn uniform(branches: usize) -> Self {
        SamplePolicy {
            sources: vec![SubvectorSource::Uniform { alpha: 1.0 }; branches],
        }
    }

    /// Sub-vectors in `active` drawn from U(-1, 1), all others frozen.
    pub fn active(branches: usize, active: &[usize]) -> Self {
        let sources = (0..branches)
            .map(|t| {
                if active.contains(&t) {
                    SubvectorSource::Uniform { alpha: 1.0 }
                } else {
                    SubvectorSource::Frozen
                }
            })
            .collect();
        SamplePolicy { sources }
    }

    pub fn validate(&self, config: &NetConfig) -> Result<()> {
        if self.sources.len() != config.branch_count() {
            return Err(Error::DimensionMismatch(format!(
                "policy covers {} sub-vectors, config has {}",
                self.sources.len(),
                config.branch_count()
            )));
        }
        for (src, &d) in self.sources.iter().zip(&config.subvector_dims) {
            src.validate(d)?;
        }
        Ok(())
    }

    /// Indices of sub-vectors that are fed exact zeros.
    pub fn frozen(&self) -> Vec<usize> {
        self.sources
            .iter()
            .enumerate()
            .filter(|(_, s)| match s {
                SubvectorSource::Frozen => true,
                SubvectorSource::Uniform { alpha } => *alpha == 0.0,
                SubvectorSource::Fill { p } => *p == 0.0,
                SubvectorSource::Constant { values } => values.iter().all(|v| *v == 0.0),
            })
            .map(|(t, _)| t)
            .collect()
    }

    /// Samples using a caller-provided stream (used for batched training draws).
    pub fn sample_with<R: Rng>(&self, config: &NetConfig, rng: &mut R) -> BranchedLatent {
        BranchedLatent {
            subvectors: self
                .sources
                .iter()
                .zip(&config.subvector_dims)
                .map(|(src, &d)| src.draw(d, rng))
                .collect(),
        }
    }
}

/// Draws one latent; a pure function of `(config, policy, seed)`.
pub fn sample_latent(config: &NetConfig, policy: &SamplePolicy, seed: u64) -> Result<BranchedLatent> {
    policy.validate(config)?;
    let mut rng = rng::rng(seed, &[0x5a4d]);
    Ok(policy.sample_with(config, &mut rng))
}

/// Sub-vector `t` comes from `a` when `t` is in `take_from_a`, otherwise from `b`.
pub fn fuse(a: &BranchedLatent, b: &BranchedLatent, take_from_a: &BTreeSet<usize>) -> Result<BranchedLatent> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(
            "fuse operands have different branch shapes".into(),
        ));
    }
    if let Some(&bad) = take_from_a.iter().find(|&&t| t >= a.branch_count()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: a.branch_count(),
        });
    }
    let subvectors = a
        .subvectors
        .iter()
        .zip(&b.subvectors)
        .enumerate()
        .map(|(t, (sa, sb))| if take_from_a.contains(&t) { sa.clone() } else { sb.clone() })
        .collect();
    Ok(BranchedLatent { subvectors })
}

/// One latent per `p`: `base` with sub-vector `t` replaced by `p` times the all-ones vector.
pub fn constant_sweep(base: &BranchedLatent, t: usize, p_values: &[f32]) -> Result<Vec<BranchedLatent>> {
    if t >= base.branch_count() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: base.branch_count(),
        });
    }
    if let Some(p) = p_values.iter().find(|p| !p.is_finite() || p.abs() > 1.0) {
        return Err(Error::InvalidConfig(format!("sweep value {p} outside [-1, 1]")));
    }
    let dim = base.subvectors[t].len();
    Ok(p_values
        .iter()
        .map(|&p| {
            let mut z = base.clone();
            z.subvectors[t] = vec![p; dim];
            z
        })
        .collect())
}
