//! A complete feedback model: backbone, projector and adapter bank sharing
//! one parameter store.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::error::{CflError, Result};
use crate::feedback::{AdapterBank, AdapterSpec, Placement, PlacementPreset, Projector, ProjectorSpec};
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Seed streams per component.
pub const STREAM_BACKBONE: u64 = 0;
pub const STREAM_PROJECTOR: u64 = 1;
pub const STREAM_ADAPTER: u64 = 2;

/// Network input: a dense `batch × d_x` matrix or one token sequence.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Dense(&'a Tensor<f64>),
    Tokens(&'a [usize]),
}

/// A graph plus the parameter bindings made into it. Each parameter is bound
/// at most once per graph so its gradient collects every use.
pub struct Session<'a, T: Real = f64> {
    pub graph: Graph<T>,
    params: &'a ParamStore,
    bound: HashMap<ParamId, NodeId>,
    trainable: Vec<bool>,
}

impl<'a, T: Real> Session<'a, T> {
    /// Trainability follows each parameter's role.
    pub fn new(params: &'a ParamStore, graph: Graph<T>) -> Self {
        let trainable = params.iter().map(|(_, e)| e.trainable()).collect();
        Self::with_mask(params, graph, trainable)
    }

    pub fn inference(params: &'a ParamStore) -> Self {
        Self::new(params, Graph::inference())
    }

    pub fn with_mask(params: &'a ParamStore, graph: Graph<T>, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), params.len(), "mask length");
        Self {
            graph,
            params,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.bound.get(&id) {
            return Ok(n);
        }
        let n = self.graph.param(id, self.params.get(id), self.trainable[id.index()])?;
        self.bound.insert(id, n);
        Ok(n)
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn reset(&mut self) {
        self.graph.reset();
        self.bound.clear();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub projector: ProjectorSpec,
    pub adapter: AdapterSpec,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let d = self.backbone.dims();
        self.projector.validate(d.d_y)?;
        self.adapter.validate(d.layers, d.d_h, self.projector.d_z())
    }

    /// Same model with feedback switched off (`F = ∅`).
    pub fn without_feedback(&self) -> Self {
        let mut s = self.clone();
        s.adapter.placement = Placement::Preset(PlacementPreset::None);
        s
    }
}

#[derive(Clone, Debug)]
pub struct CflModel {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub projector: Projector,
    pub adapters: AdapterBank,
}

impl CflModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::build(&spec.backbone, &mut params, &mut Init::new(spec.seed, STREAM_BACKBONE))?;
        let dims = backbone.dims();
        let projector = Projector::build(
            &spec.projector,
            dims.d_y,
            &mut params,
            &mut Init::new(spec.seed, STREAM_PROJECTOR),
        )?;
        let adapters = AdapterBank::build(
            &spec.adapter,
            dims,
            projector.d_z(),
            &mut params,
            &mut Init::new(spec.seed, STREAM_ADAPTER),
        )?;
        Ok(Self {
            spec,
            params,
            backbone,
            projector,
            adapters,
        })
    }

    pub fn session<T: Real>(&self) -> Session<'_, T> {
        Session::new(&self.params, Graph::new())
    }

    pub fn inference_session<T: Real>(&self) -> Session<'_, T> {
        Session::inference(&self.params)
    }

    /// Replaces parameter values, keeping the structure.
    pub fn load_values(&mut self, values: Vec<Tensor<f64>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(CflError::Format(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (id, v) in self.params.ids().collect::<Vec<_>>().into_iter().zip(values) {
            let cur = self.params.get(id);
            if cur.shape() != v.shape() {
                return Err(CflError::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    self.params.entry(id).name,
                    v.shape(),
                    cur.shape()
                )));
            }
            *self.params.get_mut(id) = v;
        }
        Ok(())
    }
}
