//! Hidden-unit masks and the capacity plan for a reduced-width rerun.

mod experiment;

pub use experiment::{
    capacity_rerun, load_round1, mask_step, run_mask_experiment, run_masked_training, ArmResult,
    CapacityRerunResult, MaskControl, MaskExperimentResult, ACTIVITY_TOLERANCE, CAPACITY_BAND_PP,
    RANDOM_MIN_DEGRADATION,
};

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::batch_active;
use crate::model::ActivationTap;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("capacity plan: {0}")]
    Plan(String),
    #[error("mask file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, InterventionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    Activity,
    Random,
    AllOnes,
}

impl MaskOrigin {
    fn code(self) -> u8 {
        match self {
            Self::Activity => 0,
            Self::Random => 1,
            Self::AllOnes => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Self::Activity, Self::Random, Self::AllOnes].get(c as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// `layers[l][u]` keeps unit `u` of layer `l`.
    pub layers: Vec<Vec<bool>>,
    pub origin: MaskOrigin,
    pub created_at_step: u64,
    /// Seed of a random mask; 0 otherwise.
    pub seed: u64,
}

impl MaskSpec {
    pub fn all_ones(dims: &[usize], step: u64) -> Self {
        Self {
            layers: dims.iter().map(|&h| vec![true; h]).collect(),
            origin: MaskOrigin::AllOnes,
            created_at_step: step,
            seed: 0,
        }
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.iter().filter(|&&k| k).count()).collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Fails unless the mask has one vector per layer of the given widths.
    pub fn check_dims(&self, dims: &[usize]) -> Result<()> {
        if self.dims() != dims {
            return Err(InterventionError::Argument(format!(
                "mask widths {:?} do not match hidden widths {:?}",
                self.dims(),
                dims
            )));
        }
        Ok(())
    }

    /// True when every active unit in `active` is kept by the mask.
    pub fn supports(&self, layer: usize, active: &[bool]) -> bool {
        self.layers[layer].iter().zip(active).all(|(&keep, &on)| keep || !on)
    }
}

/// Keeps exactly the units that are batch-active in the given taps.
pub fn activity_mask(taps: &[ActivationTap], step: u64) -> MaskSpec {
    MaskSpec {
        layers: taps.iter().map(batch_active).collect(),
        origin: MaskOrigin::Activity,
        created_at_step: step,
        seed: 0,
    }
}

/// Unit-wise union of several activity masks of the same shape.
pub fn union_masks(masks: &[MaskSpec]) -> Result<MaskSpec> {
    let (first, rest) = masks
        .split_last()
        .ok_or_else(|| InterventionError::Argument("no masks to union".into()))?;
    let mut out = first.clone();
    for m in rest {
        m.check_dims(&first.dims())?;
        for (a, b) in out.layers.iter_mut().zip(&m.layers) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x |= y;
            }
        }
    }
    Ok(out)
}

/// Uniformly random subset of exactly `cardinalities[l]` units per layer.
pub fn random_mask(cardinalities: &[usize], dims: &[usize], seed: u64, step: u64) -> Result<MaskSpec> {
    if cardinalities.len() != dims.len() {
        return Err(InterventionError::Argument(format!(
            "{} cardinalities for {} layers",
            cardinalities.len(),
            dims.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len());
    for (l, (&k, &h)) in cardinalities.iter().zip(dims).enumerate() {
        if k > h {
            return Err(InterventionError::Argument(format!(
                "layer {}: cardinality {} exceeds width {}",
                l, k, h
            )));
        }
        let mut keep = vec![false; h];
        for u in sample(&mut rng, h, k) {
            keep[u] = true;
        }
        layers.push(keep);
    }
    Ok(MaskSpec {
        layers,
        origin: MaskOrigin::Random,
        created_at_step: step,
        seed,
    })
}

pub const MASK_MAGIC: &[u8; 8] = b"RSPMASK\0";
pub const MASK_VERSION: u32 = 1;

/// Binary layout, little-endian:
/// magic, version u32, origin u8, created_at_step u64, seed u64,
/// config hash (u32 length + UTF-8), n_layers u32, then per layer the width
/// u32 followed by `ceil(width / 8)` bytes of LSB-first bits.
pub fn write_mask<W: Write>(w: &mut W, mask: &MaskSpec, config_hash: &str) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    w.write_all(&MASK_VERSION.to_le_bytes())?;
    w.write_all(&[mask.origin.code()])?;
    w.write_all(&mask.created_at_step.to_le_bytes())?;
    w.write_all(&mask.seed.to_le_bytes())?;
    w.write_all(&(config_hash.len() as u32).to_le_bytes())?;
    w.write_all(config_hash.as_bytes())?;
    w.write_all(&(mask.layers.len() as u32).to_le_bytes())?;
    for layer in &mask.layers {
        w.write_all(&(layer.len() as u32).to_le_bytes())?;
        let mut bytes = vec![0u8; layer.len().div_ceil(8)];
        for (u, &keep) in layer.iter().enumerate() {
            bytes[u / 8] |= (keep as u8) << (u % 8);
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Returns the mask and the config hash stored with it.
pub fn read_mask<R: Read>(r: &mut R) -> Result<(MaskSpec, String)> {
    if &read_array::<8, _>(r)? != MASK_MAGIC {
        return Err(InterventionError::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != MASK_VERSION {
        return Err(InterventionError::Format(format!("unsupported version {}", version)));
    }
    let origin = MaskOrigin::from_code(read_array::<1, _>(r)?[0])
        .ok_or_else(|| InterventionError::Format("unknown origin tag".into()))?;
    let created_at_step = u64::from_le_bytes(read_array(r)?);
    let seed = u64::from_le_bytes(read_array(r)?);
    let hash_len = u32::from_le_bytes(read_array(r)?) as usize;
    if hash_len > 1024 {
        return Err(InterventionError::Format("implausible hash length".into()));
    }
    let mut hash = vec![0u8; hash_len];
    r.read_exact(&mut hash)?;
    let hash = String::from_utf8(hash).map_err(|e| InterventionError::Format(e.to_string()))?;
    let n_layers = u32::from_le_bytes(read_array(r)?) as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let width = u32::from_le_bytes(read_array(r)?) as usize;
        let mut bytes = vec![0u8; width.div_ceil(8)];
        r.read_exact(&mut bytes)?;
        layers.push((0..width).map(|u| bytes[u / 8] >> (u % 8) & 1 == 1).collect());
    }
    Ok((
        MaskSpec {
            layers,
            origin,
            created_at_step,
            seed,
        },
        hash,
    ))
}

/// Per-layer widths for a rerun, one per round-1 layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityPlan {
    pub d_hidden: Vec<usize>,
    pub round1_d_hidden: Vec<usize>,
}

/// Sets each layer's width to its converged round-1 batch-use count,
/// `round(batch_use * width)`.
pub fn capacity_plan_from_usage(batch_use: &[f64], round1_d_hidden: &[usize]) -> Result<CapacityPlan> {
    if batch_use.len() != round1_d_hidden.len() {
        return Err(InterventionError::Plan(format!(
            "{} usage values for {} layers",
            batch_use.len(),
            round1_d_hidden.len()
        )));
    }
    let d_hidden = batch_use
        .iter()
        .zip(round1_d_hidden)
        .enumerate()
        .map(|(l, (&f, &h))| {
            if !(0.0..=1.0).contains(&f) {
                return Err(InterventionError::Plan(format!("layer {}: usage {} outside [0, 1]", l, f)));
            }
            let used = (f * h as f64).round() as usize;
            if used == 0 {
                return Err(InterventionError::Plan(format!("layer {} used no hidden units", l)));
            }
            Ok(used.min(h))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CapacityPlan {
        d_hidden,
        round1_d_hidden: round1_d_hidden.to_vec(),
    })
}
