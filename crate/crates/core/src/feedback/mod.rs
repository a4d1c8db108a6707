//! The top-down path: a projector `g` that summarizes the output into a
//! context vector `z`, and feedback adapters `ψ^(l)` that fuse `z` into
//! hidden states.
//!
//! Matrices use the row-vector convention throughout (`out = in · W`), so a
//! weight that maps width `a` to width `b` is stored as `a × b`.

mod adapter;
mod count;
mod projector;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::graph::Activation;

pub use adapter::{AdapterBank, BankParams, FilmParams, Modulation};
pub use count::{closed_form_adapter_params, per_layer_full_params, AdapterCount};
pub use projector::{Projector, ProjectorParams};

pub const DEFAULT_RANK: usize = 8;

fn default_rank() -> usize {
    DEFAULT_RANK
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProjectorSpec {
    Full {
        d_z: usize,
    },
    LowRank {
        d_z: usize,
        #[serde(default = "default_rank")]
        rank: usize,
    },
}

impl ProjectorSpec {
    pub fn d_z(&self) -> usize {
        match self {
            ProjectorSpec::Full { d_z } | ProjectorSpec::LowRank { d_z, .. } => *d_z,
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            ProjectorSpec::Full { .. } => None,
            ProjectorSpec::LowRank { rank, .. } => Some(*rank),
        }
    }

    pub fn validate(&self, d_y: usize) -> Result<()> {
        if self.d_z() == 0 {
            return Err(CflError::Config("d_z must be at least 1".into()));
        }
        if let Some(r) = self.rank() {
            if r == 0 || r > d_y.min(self.d_z()) {
                return Err(CflError::Config(format!(
                    "projector rank {r} must lie in 1..={}",
                    d_y.min(self.d_z())
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    PerLayerFilm,
    TiedFilm,
    MergedCore,
    LowRankMerged,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 4] = [
        AdapterVariant::PerLayerFilm,
        AdapterVariant::TiedFilm,
        AdapterVariant::MergedCore,
        AdapterVariant::LowRankMerged,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterVariant::PerLayerFilm => "per_layer_film",
            AdapterVariant::TiedFilm => "tied_film",
            AdapterVariant::MergedCore => "merged_core",
            AdapterVariant::LowRankMerged => "low_rank_merged",
        }
    }

    pub fn is_film(self) -> bool {
        matches!(self, AdapterVariant::PerLayerFilm | AdapterVariant::TiedFilm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPreset {
    All,
    None,
    /// The first and last `⌊L/3⌋` layers (at least one each).
    FirstLastThird,
}

/// The set `F` of layers that receive feedback.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Placement {
    Preset(PlacementPreset),
    Layers(Vec<usize>),
}

impl Default for Placement {
    fn default() -> Self {
        Placement::Preset(PlacementPreset::All)
    }
}

impl Placement {
    pub fn resolve(&self, layers: usize) -> Result<BTreeSet<usize>> {
        match self {
            Placement::Preset(PlacementPreset::All) => Ok((1..=layers).collect()),
            Placement::Preset(PlacementPreset::None) => Ok(BTreeSet::new()),
            Placement::Preset(PlacementPreset::FirstLastThird) => {
                let k = (layers / 3).max(1);
                Ok((1..=k).chain(layers.saturating_sub(k) + 1..=layers).collect())
            }
            Placement::Layers(list) => {
                let set: BTreeSet<usize> = list.iter().copied().collect();
                if let Some(&bad) = set.iter().find(|&&l| l == 0 || l > layers) {
                    return Err(CflError::LayerIndex { index: bad, layers });
                }
                Ok(set)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterInit {
    /// FiLM at γ = 1, β = 0; merged variants with closed gates.
    #[default]
    Identity,
    /// Gaussian weights with standard deviation `scale / √fan_in`.
    Random { scale: f64 },
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub variant: AdapterVariant,
    #[serde(default)]
    pub placement: Placement,
    /// Per-layer convex gate on the merged variants.
    #[serde(default = "default_true")]
    pub gate: bool,
    #[serde(default)]
    pub init: AdapterInit,
    /// Rank of the low-rank merged core.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// `φ` of the merged variants.
    #[serde(default)]
    pub activation: Activation,
}

impl AdapterSpec {
    pub fn new(variant: AdapterVariant) -> Self {
        Self {
            variant,
            placement: Placement::default(),
            gate: true,
            init: AdapterInit::Identity,
            rank: DEFAULT_RANK,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self, layers: usize, d_h: usize, d_z: usize) -> Result<()> {
        self.placement.resolve(layers)?;
        let merged = !self.variant.is_film();
        if merged && !self.gate && self.init == AdapterInit::Identity {
            return Err(CflError::Config(
                "identity initialization of a merged adapter needs gate = true".into(),
            ));
        }
        if self.variant == AdapterVariant::LowRankMerged && (self.rank == 0 || self.rank > d_h.min(d_h + d_z)) {
            return Err(CflError::Config(format!("merged rank {} must lie in 1..={d_h}", self.rank)));
        }
        if let AdapterInit::Random { scale } = self.init {
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(CflError::Config(format!("init scale {scale} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}
