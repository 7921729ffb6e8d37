//! Staged residual networks built from architecture configs.

pub mod layers;
mod network;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayD;

use crate::error::{Error, Result};

pub use network::{argmax_rows, layout, StagedNetwork, Trace};

/// Where a tensor lives in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Stem,
    Block { stage: usize, layer: usize },
    Head,
}

/// Which convolution inside a site a normalization or weight belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Unit {
    Conv1,
    Conv2,
    Shortcut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    ConvWeight(Unit),
    NormScale(Unit),
    NormShift(Unit),
    NormMean(Unit),
    NormVar(Unit),
    LinearWeight,
    LinearBias,
}

impl Role {
    /// Running moments are buffers; everything else is trained.
    pub fn is_trainable(self) -> bool {
        !matches!(self, Role::NormMean(_) | Role::NormVar(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub site: Site,
    pub role: Role,
}

impl ParamKey {
    pub const fn new(site: Site, role: Role) -> Self {
        Self { site, role }
    }
}

fn unit_name(u: Unit) -> &'static str {
    match u {
        Unit::Conv1 => "conv1",
        Unit::Conv2 => "conv2",
        Unit::Shortcut => "shortcut",
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.site {
            Site::Stem => write!(f, "stem.")?,
            Site::Block { stage, layer } => write!(f, "s{stage}.b{layer}.")?,
            Site::Head => write!(f, "head.")?,
        }
        match self.role {
            Role::ConvWeight(u) => write!(f, "{}.weight", unit_name(u)),
            Role::NormScale(u) => write!(f, "{}.norm.scale", unit_name(u)),
            Role::NormShift(u) => write!(f, "{}.norm.shift", unit_name(u)),
            Role::NormMean(u) => write!(f, "{}.norm.mean", unit_name(u)),
            Role::NormVar(u) => write!(f, "{}.norm.var", unit_name(u)),
            Role::LinearWeight => write!(f, "linear.weight"),
            Role::LinearBias => write!(f, "linear.bias"),
        }
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad parameter name {s:?}"));
        let parts: Vec<&str> = s.split('.').collect();
        let (site, rest) = match parts.first() {
            Some(&"stem") => (Site::Stem, &parts[1..]),
            Some(&"head") => (Site::Head, &parts[1..]),
            Some(p) if p.starts_with('s') && parts.len() > 1 && parts[1].starts_with('b') => {
                let stage = p[1..].parse().map_err(|_| bad())?;
                let layer = parts[1][1..].parse().map_err(|_| bad())?;
                (Site::Block { stage, layer }, &parts[2..])
            }
            _ => return Err(bad()),
        };
        let unit = |u: &str| match u {
            "conv1" => Ok(Unit::Conv1),
            "conv2" => Ok(Unit::Conv2),
            "shortcut" => Ok(Unit::Shortcut),
            _ => Err(bad()),
        };
        let role = match rest {
            ["linear", "weight"] => Role::LinearWeight,
            ["linear", "bias"] => Role::LinearBias,
            [u, "weight"] => Role::ConvWeight(unit(u)?),
            [u, "norm", "scale"] => Role::NormScale(unit(u)?),
            [u, "norm", "shift"] => Role::NormShift(unit(u)?),
            [u, "norm", "mean"] => Role::NormMean(unit(u)?),
            [u, "norm", "var"] => Role::NormVar(unit(u)?),
            _ => return Err(bad()),
        };
        Ok(ParamKey { site, role })
    }
}

/// Named tensors keyed by network position. Holds parameters, running moments, or gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTable(pub BTreeMap<ParamKey, ArrayD<f32>>);

impl ParamTable {
    pub fn get(&self, key: &ParamKey) -> Result<&ArrayD<f32>> {
        self.0
            .get(key)
            .ok_or_else(|| Error::Shape(format!("missing tensor {key}")))
    }

    pub fn insert(&mut self, key: ParamKey, t: ArrayD<f32>) {
        self.0.insert(key, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &ArrayD<f32>)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total element count of trainable tensors.
    pub fn trainable_count(&self) -> u64 {
        self.0
            .iter()
            .filter(|(k, _)| k.role.is_trainable())
            .map(|(_, t)| t.len() as u64)
            .sum()
    }
}
