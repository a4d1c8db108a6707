use serde::{Deserialize, Serialize};

use crate::params::{ParamGroup, ParamStore};

use super::AdapterVariant;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterCount {
    pub trainable: usize,
    pub frozen: usize,
}

impl AdapterCount {
    /// Enumerates every adapter tensor in the store.
    pub fn enumerate(params: &ParamStore) -> Self {
        let mut c = AdapterCount::default();
        for (_, e) in params.iter().filter(|(_, e)| e.group == ParamGroup::Adapter) {
            if e.trainable() {
                c.trainable += e.value.len();
            } else {
                c.frozen += e.value.len();
            }
        }
        c
    }
}

/// Closed-form adapter counts for `|F| = placed` adapted layers.
pub fn closed_form_adapter_params(
    variant: AdapterVariant,
    d_h: usize,
    d_z: usize,
    placed: usize,
    gate: bool,
    rank: usize,
) -> AdapterCount {
    let gates = if gate { placed } else { 0 };
    match variant {
        AdapterVariant::PerLayerFilm => AdapterCount {
            trainable: placed * (2 * d_z * d_h + 2 * d_h),
            frozen: 0,
        },
        AdapterVariant::TiedFilm => AdapterCount {
            trainable: 2 * d_z * d_h + 2 * d_h + placed,
            frozen: 0,
        },
        AdapterVariant::MergedCore => AdapterCount {
            trainable: d_h * (d_h + d_z) + placed * d_h + gates,
            frozen: 0,
        },
        AdapterVariant::LowRankMerged => AdapterCount {
            trainable: rank * (d_h + d_z) + rank * d_h + placed * d_h + gates,
            frozen: d_h * (d_h + d_z),
        },
    }
}

/// Unshared per-layer fusion matrices: `L · d_h · (d_h + d_z)`.
pub fn per_layer_full_params(layers: usize, d_h: usize, d_z: usize) -> usize {
    layers * d_h * (d_h + d_z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_counts() {
        let film = closed_form_adapter_params(AdapterVariant::PerLayerFilm, 256, 64, 12, false, 8);
        assert_eq!(film.trainable, 399_360);
        let merged = closed_form_adapter_params(AdapterVariant::MergedCore, 256, 64, 12, false, 8);
        assert_eq!(merged.trainable, 84_992);
        let full = per_layer_full_params(12, 256, 64);
        assert_eq!(full, 983_040);
        let ratio = full as f64 / merged.trainable as f64;
        assert!((ratio - 11.566).abs() < 1e-3 && ratio >= 10.0);
    }
}
