use std::collections::{BTreeMap, BTreeSet};

use crate::backbone::Dims;
use crate::error::{CflError, Result};
use crate::graph::{Activation, FlopTag, NodeId};
use crate::model::Session;
use crate::params::{Init, ParamGroup, ParamId, ParamRole, ParamStore};
use crate::tensor::{Real, Tensor};

use super::{AdapterInit, AdapterSpec, AdapterVariant};

/// `γ(z) = z·W_γ + b_γ`, `β(z) = z·W_β + b_β`.
#[derive(Clone, Debug)]
pub struct FilmParams {
    pub w_gamma: ParamId,
    pub b_gamma: ParamId,
    pub w_beta: ParamId,
    pub b_beta: ParamId,
}

#[derive(Clone, Debug)]
pub enum BankParams {
    PerLayerFilm {
        layers: BTreeMap<usize, FilmParams>,
    },
    TiedFilm {
        shared: FilmParams,
        alpha: BTreeMap<usize, ParamId>,
    },
    MergedCore {
        /// `(d_h + d_z) × d_h`
        core: ParamId,
        bias: BTreeMap<usize, ParamId>,
        gate: BTreeMap<usize, ParamId>,
    },
    LowRankMerged {
        /// Frozen `W_0`, `(d_h + d_z) × d_h`.
        base: ParamId,
        /// `(d_h + d_z) × r`
        down: ParamId,
        /// `r × d_h`
        up: ParamId,
        bias: BTreeMap<usize, ParamId>,
        gate: BTreeMap<usize, ParamId>,
    },
}

#[derive(Clone, Debug)]
pub struct AdapterBank {
    pub spec: AdapterSpec,
    pub placement: BTreeSet<usize>,
    pub layers: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub params: BankParams,
}

/// Per-iteration work shared by every layer: the context itself, the tied
/// FiLM modulation, and the materialized merged core.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub z: NodeId,
    shared: Option<(NodeId, NodeId)>,
    core: Option<NodeId>,
}

struct Sampler<'a> {
    init: &'a mut Init,
    scale: Option<f64>,
}

impl Sampler<'_> {
    /// Weight matrix: zero under identity init.
    fn weight(&mut self, rows: usize, cols: usize) -> Tensor<f64> {
        match self.scale {
            None => Tensor::zeros(&[rows, cols]),
            Some(s) => self.init.normal(&[rows, cols], s / (rows as f64).sqrt()),
        }
    }

    /// Vector centred on `centre` under random init, exactly `centre`
    /// otherwise.
    fn around(&mut self, shape: &[usize], centre: f64) -> Tensor<f64> {
        match self.scale {
            None => Tensor::full(shape, centre),
            Some(s) => self.init.normal(shape, s).map(|v| v + centre),
        }
    }
}

impl AdapterBank {
    pub fn build(spec: &AdapterSpec, dims: Dims, d_z: usize, params: &mut ParamStore, init: &mut Init) -> Result<Self> {
        spec.validate(dims.layers, dims.d_h, d_z)?;
        let placement = spec.placement.resolve(dims.layers)?;
        let d_h = dims.d_h;
        let mut sm = Sampler {
            init,
            scale: match spec.init {
                AdapterInit::Identity => None,
                AdapterInit::Random { scale } => Some(scale),
            },
        };
        let g = ParamGroup::Adapter;
        let film = |params: &mut ParamStore, sm: &mut Sampler<'_>, name: &str| FilmParams {
            w_gamma: params.add(format!("{name}.w_gamma"), sm.weight(d_z, d_h), g),
            b_gamma: params.add(format!("{name}.b_gamma"), sm.around(&[d_h], 1.0), g),
            w_beta: params.add(format!("{name}.w_beta"), sm.weight(d_z, d_h), g),
            b_beta: params.add(format!("{name}.b_beta"), sm.around(&[d_h], 0.0), g),
        };
        let gates = |params: &mut ParamStore, sm: &mut Sampler<'_>| -> BTreeMap<usize, ParamId> {
            if !spec.gate {
                return BTreeMap::new();
            }
            placement
                .iter()
                .map(|&l| {
                    let v = match sm.scale {
                        None => Tensor::scalar(0.0),
                        Some(_) => sm.around(&[1], 0.5),
                    };
                    (l, params.add(format!("adapter.gate{l}"), v, g))
                })
                .collect()
        };
        let biases = |params: &mut ParamStore, sm: &mut Sampler<'_>| -> BTreeMap<usize, ParamId> {
            placement
                .iter()
                .map(|&l| (l, params.add(format!("adapter.bias{l}"), sm.around(&[d_h], 0.0), g)))
                .collect()
        };
        let bank = match spec.variant {
            AdapterVariant::PerLayerFilm => BankParams::PerLayerFilm {
                layers: placement
                    .iter()
                    .map(|&l| (l, film(params, &mut sm, &format!("adapter.film{l}"))))
                    .collect(),
            },
            AdapterVariant::TiedFilm => {
                let shared = film(params, &mut sm, "adapter.film_shared");
                let alpha = placement
                    .iter()
                    .map(|&l| (l, params.add(format!("adapter.alpha{l}"), sm.around(&[1], 1.0), g)))
                    .collect();
                BankParams::TiedFilm { shared, alpha }
            }
            AdapterVariant::MergedCore => {
                let core = params.add("adapter.core", sm.init.glorot(d_h + d_z, d_h), g);
                let bias = biases(params, &mut sm);
                let gate = gates(params, &mut sm);
                BankParams::MergedCore { core, bias, gate }
            }
            AdapterVariant::LowRankMerged => {
                let r = spec.rank;
                let base = params.add_with_role("adapter.base", sm.init.glorot(d_h + d_z, d_h), g, ParamRole::MergedBase);
                let down = params.add("adapter.down", sm.init.glorot(d_h + d_z, r), g);
                let up = params.add("adapter.up", sm.weight(r, d_h), g);
                let bias = biases(params, &mut sm);
                let gate = gates(params, &mut sm);
                BankParams::LowRankMerged {
                    base,
                    down,
                    up,
                    bias,
                    gate,
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            placement,
            layers: dims.layers,
            d_h,
            d_z,
            params: bank,
        })
    }

    pub fn variant(&self) -> AdapterVariant {
        self.spec.variant
    }

    pub fn activation(&self) -> Activation {
        self.spec.activation
    }

    pub fn contains(&self, l: usize) -> bool {
        self.placement.contains(&l)
    }

    /// Per-iteration shared computation for context `z`.
    pub fn modulation<T: Real>(&self, s: &mut Session<'_, T>, z: NodeId) -> Result<Modulation> {
        let width = s.graph.value(z).dims2()?.1;
        if width != self.d_z {
            return Err(CflError::Shape(format!("context width {width}, expected {}", self.d_z)));
        }
        let prev = s.graph.set_tag(FlopTag::Generator);
        let out = (|| {
            Ok(match &self.params {
                BankParams::TiedFilm { shared, .. } if !self.placement.is_empty() => Modulation {
                    z,
                    shared: Some(film_generate(s, shared, z)?),
                    core: None,
                },
                BankParams::LowRankMerged { base, down, up, .. } if !self.placement.is_empty() => {
                    let w0 = s.param(*base)?;
                    let a = s.param(*down)?;
                    let b = s.param(*up)?;
                    let ab = s.graph.matmul(a, b)?;
                    let prev = s.graph.set_tag(FlopTag::Fusion);
                    let core = s.graph.add(w0, ab);
                    s.graph.set_tag(prev);
                    Modulation {
                        z,
                        shared: None,
                        core: Some(core?),
                    }
                }
                _ => Modulation {
                    z,
                    shared: None,
                    core: None,
                },
            })
        })();
        s.graph.set_tag(prev);
        out
    }

    /// `ψ^(l)(h, z)` when `l ∈ F`, `h` unchanged otherwise.
    pub fn apply<T: Real>(&self, s: &mut Session<'_, T>, m: &Modulation, l: usize, h: NodeId) -> Result<NodeId> {
        if l == 0 || l > self.layers {
            return Err(CflError::LayerIndex {
                index: l,
                layers: self.layers,
            });
        }
        if !self.contains(l) {
            return Ok(h);
        }
        if self.spec.variant.is_film() {
            self.film_with(s, m, l, h)
        } else {
            self.merged_with(s, m, l, h)
        }
    }

    /// FiLM adapter at layer `l`: `γ^(l)(z) ⊙ h + β^(l)(z)`.
    pub fn film<T: Real>(&self, s: &mut Session<'_, T>, l: usize, h: NodeId, z: NodeId) -> Result<NodeId> {
        self.require(l, true)?;
        let m = self.modulation(s, z)?;
        self.film_with(s, &m, l, h)
    }

    /// Merged adapter at layer `l`: `φ([h; z]·W_core) + b^(l)`, gated.
    pub fn merged<T: Real>(&self, s: &mut Session<'_, T>, l: usize, h: NodeId, z: NodeId) -> Result<NodeId> {
        self.require(l, false)?;
        let m = self.modulation(s, z)?;
        self.merged_with(s, &m, l, h)
    }

    fn require(&self, l: usize, film: bool) -> Result<()> {
        if !self.contains(l) {
            return Err(CflError::Config(format!("layer {l} is not in the feedback placement")));
        }
        if self.spec.variant.is_film() != film {
            return Err(CflError::Config(format!(
                "adapter bank is {}, not a {} adapter",
                self.spec.variant.name(),
                if film { "FiLM" } else { "merged" }
            )));
        }
        Ok(())
    }

    fn film_with<T: Real>(&self, s: &mut Session<'_, T>, m: &Modulation, l: usize, h: NodeId) -> Result<NodeId> {
        check_width(s, h, self.d_h)?;
        let (gamma, beta) = match &self.params {
            BankParams::PerLayerFilm { layers } => {
                let prev = s.graph.set_tag(FlopTag::Generator);
                let r = film_generate(s, &layers[&l], m.z);
                s.graph.set_tag(prev);
                r?
            }
            BankParams::TiedFilm { alpha, .. } => {
                let (gs, bs) = m.shared.expect("tied modulation prepared");
                let a = s.param(alpha[&l])?;
                let prev = s.graph.set_tag(FlopTag::Fusion);
                let r = s
                    .graph
                    .scale_by(gs, a)
                    .and_then(|g| Ok((g, s.graph.scale_by(bs, a)?)));
                s.graph.set_tag(prev);
                r?
            }
            _ => unreachable!("film_with on a merged bank"),
        };
        let prev = s.graph.set_tag(FlopTag::Fusion);
        let out = s.graph.mul(gamma, h).and_then(|gh| s.graph.add(gh, beta));
        s.graph.set_tag(prev);
        out
    }

    fn merged_with<T: Real>(&self, s: &mut Session<'_, T>, m: &Modulation, l: usize, h: NodeId) -> Result<NodeId> {
        check_width(s, h, self.d_h)?;
        let (core, bias, gate) = match &self.params {
            BankParams::MergedCore { core, bias, gate } => (s.param(*core)?, bias[&l], gate.get(&l).copied()),
            BankParams::LowRankMerged { bias, gate, .. } => {
                (m.core.expect("merged core prepared"), bias[&l], gate.get(&l).copied())
            }
            _ => unreachable!("merged_with on a FiLM bank"),
        };
        let b = s.param(bias)?;
        let alpha = gate.map(|g| s.param(g)).transpose()?;
        let prev = s.graph.set_tag(FlopTag::Fusion);
        let out = (|| {
            let rows_h = s.graph.value(h).dims2()?.0;
            let rows_z = s.graph.value(m.z).dims2()?.0;
            let z = if rows_z == rows_h {
                m.z
            } else {
                s.graph.repeat_rows(m.z, rows_h)?
            };
            let stacked = s.graph.concat(h, z, 1)?;
            s.graph.set_tag(FlopTag::Generator);
            let pre = s.graph.matmul(stacked, core)?;
            s.graph.set_tag(FlopTag::Fusion);
            let act = s.graph.activation(self.spec.activation, pre)?;
            let psi = s.graph.add(act, b)?;
            match alpha {
                None => Ok(psi),
                Some(a) => {
                    // α·ψ + (1 − α)·h
                    let diff = s.graph.sub(psi, h)?;
                    let scaled = s.graph.scale_by(diff, a)?;
                    s.graph.add(h, scaled)
                }
            }
        })();
        s.graph.set_tag(prev);
        out
    }
}

fn film_generate<T: Real>(s: &mut Session<'_, T>, p: &FilmParams, z: NodeId) -> Result<(NodeId, NodeId)> {
    let wg = s.param(p.w_gamma)?;
    let bg = s.param(p.b_gamma)?;
    let wb = s.param(p.w_beta)?;
    let bb = s.param(p.b_beta)?;
    let zg = s.graph.matmul(z, wg)?;
    let zb = s.graph.matmul(z, wb)?;
    let prev = s.graph.set_tag(FlopTag::Fusion);
    let out = s
        .graph
        .add(zg, bg)
        .and_then(|gamma| Ok((gamma, s.graph.add(zb, bb)?)));
    s.graph.set_tag(prev);
    out
}

fn check_width<T: Real>(s: &Session<'_, T>, h: NodeId, d_h: usize) -> Result<()> {
    let w = s.graph.value(h).dims2()?.1;
    if w != d_h {
        return Err(CflError::Shape(format!("hidden width {w}, expected {d_h}")));
    }
    Ok(())
}
