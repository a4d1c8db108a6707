//! Parameter and FLOP overhead of the feedback path.
//!
//! The closed forms are stated per example: extra parameters
//! `2·d_z·d_h + r·(d_y + d_z)` plus `O(|F|)` small terms, and per-refinement
//! work `2·d_z·d_h + d_x` multiply-accumulates. The instrumented counts come
//! from one refinement of a single example, split by [`FlopTag`].

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::feedback::{closed_form_adapter_params, AdapterCount};
use crate::graph::FlopTag;
use crate::model::{CflModel, Input, ModelSpec};
use crate::params::{ParamGroup, ParamRole};
use crate::refine::{refine, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub d_x: usize,
    pub d_h: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub rank: Option<usize>,
    pub layers: usize,
    pub placed: usize,
    pub t_avg: f64,

    /// `2·d_z·d_h + r·(d_y + d_z)` (a full projector contributes `d_y·d_z`).
    pub formula_params: usize,
    /// Enumerated counterpart of `formula_params`: the modulation weight
    /// matrices and the projector matrices.
    pub enumerated_core_params: usize,
    /// Biases, gates and per-layer scalars.
    pub small_params: usize,
    pub adapter_closed_form: AdapterCount,
    pub adapter_enumerated: AdapterCount,
    pub projector_trainable: usize,
    pub projector_frozen: usize,
    pub backbone_params: usize,
    /// All added parameters, trainable and frozen.
    pub extra_params: usize,
    pub overhead_ratio: f64,
    pub within_ten_percent: bool,

    /// `2·d_z·d_h + d_x`, in multiply-accumulates.
    pub formula_macs_per_refinement: u64,
    pub formula_macs_total: f64,
    /// Generator FLOPs / 2 for one refinement.
    pub measured_generator_macs: u64,
    pub measured_projector_flops: u64,
    pub measured_fusion_flops: u64,
    /// Projector + generator + fusion FLOPs of one refinement.
    pub measured_feedback_flops: u64,
    /// Everything one refinement executes, backbone recompute included.
    pub measured_refinement_flops: u64,
    pub base_forward_flops: u64,
    pub feedback_flops_total: f64,
    pub measured_flops_total: f64,
}

fn probe_input(model: &CflModel) -> (Option<Tensor<f64>>, Vec<usize>) {
    match &model.backbone {
        crate::backbone::Backbone::Mlp(m) => (Some(Tensor::zeros(&[1, m.spec.d_x])), Vec::new()),
        crate::backbone::Backbone::Transformer(_) => (None, vec![0]),
    }
}

pub fn cost_report(spec: &ModelSpec, t_avg: f64) -> Result<CostReport> {
    let model = CflModel::new(spec.clone())?;
    let dims = model.backbone.dims();
    let d_z = model.projector.d_z();
    let bank = &model.adapters;
    let p = &model.params;

    let is_matrix = |name: &str| {
        name.ends_with(".w_gamma")
            || name.ends_with(".w_beta")
            || name == "adapter.core"
            || name == "adapter.base"
            || name == "adapter.down"
            || name == "adapter.up"
    };
    let mut core = 0;
    let mut small = 0;
    for (_, e) in p.iter() {
        match e.group {
            ParamGroup::Adapter if is_matrix(&e.name) => core += e.value.len(),
            ParamGroup::Adapter => small += e.value.len(),
            ParamGroup::Projector if e.name == "projector.bias" => small += e.value.len(),
            ParamGroup::Projector => core += e.value.len(),
            ParamGroup::Backbone => {}
        }
    }
    let rank = model.projector.spec.rank();
    let formula_params = 2 * d_z * dims.d_h + rank.map_or(dims.d_y * d_z, |r| r * (dims.d_y + d_z));
    let projector_frozen: usize = p
        .iter()
        .filter(|(_, e)| e.group == ParamGroup::Projector && e.role == ParamRole::ProjectorBasis)
        .map(|(_, e)| e.value.len())
        .sum();
    let projector_total = p.count(ParamGroup::Projector, false);
    let adapter_enumerated = AdapterCount::enumerate(p);
    let backbone_params = p.count(ParamGroup::Backbone, false);
    let extra = projector_total + adapter_enumerated.trainable + adapter_enumerated.frozen;
    let overhead = extra as f64 / backbone_params as f64;

    let (dense, tokens) = probe_input(&model);
    let x = match &dense {
        Some(t) => Input::Dense(t),
        None => Input::Tokens(&tokens),
    };
    let trace = refine(&model, x, 1, Mode::Composed)?;
    let tags = &trace.flops_by_tag[1];
    let tag = |t: FlopTag| tags.get(&t).copied().unwrap_or(0);
    let generator = tag(FlopTag::Generator);
    let feedback = tag(FlopTag::Projector) + generator + tag(FlopTag::Fusion);
    let formula_macs = (2 * d_z * dims.d_h + dims.d_in) as u64;

    Ok(CostReport {
        variant: bank.variant().name().to_string(),
        d_x: dims.d_in,
        d_h: dims.d_h,
        d_y: dims.d_y,
        d_z,
        rank,
        layers: dims.layers,
        placed: bank.placement.len(),
        t_avg,
        formula_params,
        enumerated_core_params: core,
        small_params: small,
        adapter_closed_form: closed_form_adapter_params(
            bank.variant(),
            dims.d_h,
            d_z,
            bank.placement.len(),
            bank.spec.gate,
            bank.spec.rank,
        ),
        adapter_enumerated,
        projector_trainable: projector_total - projector_frozen,
        projector_frozen,
        backbone_params,
        extra_params: extra,
        overhead_ratio: overhead,
        within_ten_percent: overhead <= 0.10,
        formula_macs_per_refinement: formula_macs,
        formula_macs_total: t_avg * formula_macs as f64,
        measured_generator_macs: generator / 2,
        measured_projector_flops: tag(FlopTag::Projector),
        measured_fusion_flops: tag(FlopTag::Fusion),
        measured_feedback_flops: feedback,
        measured_refinement_flops: trace.flops[1],
        base_forward_flops: trace.flops[0],
        feedback_flops_total: t_avg * feedback as f64,
        measured_flops_total: trace.flops[0] as f64 + t_avg * trace.flops[1] as f64,
    })
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cost report ({}, |F| = {}, T_avg = {})", self.variant, self.placed, self.t_avg);
        let _ = writeln!(s, "  parameters");
        let _ = writeln!(s, "    formula 2·d_z·d_h + r·(d_y+d_z)  {}", self.formula_params);
        let _ = writeln!(s, "    enumerated matrices              {}", self.enumerated_core_params);
        let _ = writeln!(s, "    biases, gates, scalars           {}", self.small_params);
        let _ = writeln!(
            s,
            "    adapters closed form / enumerated {} / {} trainable, {} / {} frozen",
            self.adapter_closed_form.trainable,
            self.adapter_enumerated.trainable,
            self.adapter_closed_form.frozen,
            self.adapter_enumerated.frozen
        );
        let _ = writeln!(
            s,
            "    projector                        {} trainable, {} frozen",
            self.projector_trainable, self.projector_frozen
        );
        let _ = writeln!(s, "    backbone                         {}", self.backbone_params);
        let _ = writeln!(
            s,
            "    overhead                         {:.4} ({})",
            self.overhead_ratio,
            if self.within_ten_percent { "within 10%" } else { "above 10%" }
        );
        let _ = writeln!(s, "  per refinement");
        let _ = writeln!(s, "    formula MACs 2·d_z·d_h + d_x     {}", self.formula_macs_per_refinement);
        let _ = writeln!(s, "    measured generator MACs          {}", self.measured_generator_macs);
        let _ = writeln!(s, "    measured feedback FLOPs          {}", self.measured_feedback_flops);
        let _ = writeln!(s, "    measured total FLOPs             {}", self.measured_refinement_flops);
        let _ = writeln!(s, "  base forward FLOPs                 {}", self.base_forward_flops);
        let _ = writeln!(s, "  feedback FLOPs at T_avg            {}", self.feedback_flops_total);
        let _ = writeln!(s, "  total FLOPs at T_avg               {}", self.measured_flops_total);
        s
    }

    pub fn to_csv(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut s = String::from("field,value\n");
        if let serde_json::Value::Object(map) = v {
            for (k, v) in map {
                let _ = writeln!(s, "{k},{}", v.to_string().replace(',', ";"));
            }
        }
        s
    }
}
