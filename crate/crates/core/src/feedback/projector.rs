use crate::error::Result;
use crate::graph::{FlopTag, NodeId};
use crate::model::Session;
use crate::params::{Init, ParamGroup, ParamId, ParamRole, ParamStore};
use crate::tensor::{Real, Tensor};

use super::ProjectorSpec;

#[derive(Clone, Debug)]
pub enum ProjectorParams {
    /// `z = y·W + b`, `W: d_y × d_z`.
    Full { weight: ParamId, bias: ParamId },
    /// `z = (y·A)·B` with frozen orthonormal `A: d_y × r` and trainable
    /// `B: r × d_z`.
    LowRank { basis: ParamId, coef: ParamId, rank: usize },
}

/// The projector `g`: output logits to context vector.
#[derive(Clone, Debug)]
pub struct Projector {
    pub spec: ProjectorSpec,
    pub d_y: usize,
    pub params: ProjectorParams,
}

impl Projector {
    pub fn build(spec: &ProjectorSpec, d_y: usize, params: &mut ParamStore, init: &mut Init) -> Result<Self> {
        spec.validate(d_y)?;
        let d_z = spec.d_z();
        let p = match *spec {
            ProjectorSpec::Full { .. } => ProjectorParams::Full {
                weight: params.add("projector.weight", init.glorot(d_y, d_z), ParamGroup::Projector),
                bias: params.add("projector.bias", Tensor::zeros(&[d_z]), ParamGroup::Projector),
            },
            ProjectorSpec::LowRank { rank, .. } => ProjectorParams::LowRank {
                basis: params.add_with_role(
                    "projector.basis",
                    init.orthonormal_columns(d_y, rank),
                    ParamGroup::Projector,
                    ParamRole::ProjectorBasis,
                ),
                coef: params.add("projector.coef", init.glorot(rank, d_z), ParamGroup::Projector),
                rank,
            },
        };
        Ok(Self {
            spec: spec.clone(),
            d_y,
            params: p,
        })
    }

    pub fn d_z(&self) -> usize {
        self.spec.d_z()
    }

    pub fn project<T: Real>(&self, s: &mut Session<'_, T>, y: NodeId) -> Result<NodeId> {
        let width = s.graph.value(y).dims2()?.1;
        if width != self.d_y {
            return Err(crate::error::CflError::Shape(format!(
                "projector expects width {}, got {width}",
                self.d_y
            )));
        }
        let prev = s.graph.set_tag(FlopTag::Projector);
        let out = match self.params {
            ProjectorParams::Full { weight, bias } => {
                let w = s.param(weight)?;
                let b = s.param(bias)?;
                let yw = s.graph.matmul(y, w);
                yw.and_then(|yw| s.graph.add(yw, b))
            }
            ProjectorParams::LowRank { basis, coef, .. } => {
                let a = s.param(basis)?;
                let b = s.param(coef)?;
                s.graph.matmul(y, a).and_then(|ya| s.graph.matmul(ya, b))
            }
        };
        s.graph.set_tag(prev);
        out
    }

    /// The linear map as a dense `d_y × d_z` matrix (bias excluded).
    pub fn matrix(&self, params: &ParamStore) -> Result<Tensor<f64>> {
        match self.params {
            ProjectorParams::Full { weight, .. } => Ok(params.get(weight).clone()),
            ProjectorParams::LowRank { basis, coef, .. } => params.get(basis).matmul(params.get(coef)),
        }
    }
}
