//! Lipschitz bounds of one composed refinement step `S_τ → S_{τ+1}`.
//!
//! With `a_l`, `b_l` the Lipschitz constants of `ψ^(l)` in `h` and `z`,
//! `L_f^(l)` those of the backbone layers and `L_g` that of the projector,
//! perturbations `u = ‖δh^(1)‖`, `v = ‖δy‖` of the current state propagate as
//!
//! ```text
//! ‖δh^(l)'‖ ≤ p_l·u + q_l·v      p_1 = a_1            q_1 = b_1·L_g
//!                                p_l = a_l·L_f·p_{l-1}  q_l = a_l·L_f·q_{l-1} + b_l·L_g
//! ‖δy'‖     ≤ p_y·u + q_y·v      p_y = L_head·p_L     q_y = L_head·q_L
//! ```
//!
//! so `‖δS'‖ ≤ σ_max(M)·‖δS‖` where `M` stacks the rows `(p, q)`. That
//! largest singular value is `l_total`. `feedback_gain = q_y` bounds the
//! output-to-output map alone.

use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::{Backbone, Dense};
use crate::error::{CflError, Result};
use crate::feedback::{BankParams, ProjectorParams};
use crate::model::CflModel;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::spectral::spectral_norm;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdapterBound {
    pub layer: usize,
    pub in_placement: bool,
    pub wrt_h: f64,
    pub wrt_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzReport {
    /// `L_f^(l)` for `l = 2..=L`, as `(l, bound)`.
    pub backbone: Vec<(usize, f64)>,
    pub head: f64,
    pub projector: f64,
    pub adapters: Vec<AdapterBound>,
    /// `(p_l, q_l)` for each hidden layer, then `(p_y, q_y)`.
    pub gains: Vec<(f64, f64)>,
    pub l_total: f64,
    pub feedback_gain: f64,
    pub contractive: bool,
    /// False when some adapter is bilinear in `(h, z)` (FiLM).
    pub globally_lipschitz: bool,
    /// True for transformer backbones: attention and layer norm bounds are
    /// not certified.
    pub heuristic: bool,
}

/// Spectral norms the bound is built from, before any rescaling.
struct Parts {
    act: f64,
    adapter_act: f64,
    /// `‖W_l‖` for `l = 2..=L`.
    layers: Vec<f64>,
    head: f64,
    projector: f64,
    /// `(‖W_h‖, ‖W_z‖)` of the merged core.
    core: Option<(f64, f64)>,
    gates: Vec<Option<f64>>,
    placed: Vec<bool>,
    film: bool,
    heuristic: bool,
}

fn split_core(core: &Tensor<f64>, d_h: usize) -> Result<(f64, f64)> {
    let (rows, cols) = core.dims2()?;
    let d = core.data();
    let wh = Tensor::matrix(d_h, cols, d[..d_h * cols].to_vec())?;
    let wz = Tensor::matrix(rows - d_h, cols, d[d_h * cols..].to_vec())?;
    Ok((spectral_norm(&wh)?, spectral_norm(&wz)?))
}

fn merged_core(model: &CflModel) -> Result<Option<Tensor<f64>>> {
    let p = &model.params;
    Ok(match &model.adapters.params {
        BankParams::MergedCore { core, .. } => Some(p.get(*core).clone()),
        BankParams::LowRankMerged { base, down, up, .. } => {
            let ab = p.get(*down).matmul(p.get(*up))?;
            let w0 = p.get(*base);
            Some(Tensor::new(
                w0.shape().to_vec(),
                w0.data().iter().zip(ab.data()).map(|(a, b)| a + b).collect(),
            )?)
        }
        _ => None,
    })
}

fn heuristic_block(p: &ParamStore, b: &crate::backbone::Block) -> Result<f64> {
    let values: f64 = b
        .heads
        .iter()
        .map(|h| spectral_norm(p.get(h.value)).map(|s| s * s))
        .sum::<Result<f64>>()?;
    let attn = 1.0 + spectral_norm(p.get(b.out.weight))? * values.sqrt();
    let mlp = 1.0 + crate::graph::Activation::Gelu.lipschitz() * spectral_norm(p.get(b.up.weight))? * spectral_norm(p.get(b.down.weight))?;
    Ok(attn * mlp)
}

fn parts(model: &CflModel) -> Result<Parts> {
    let p = &model.params;
    let bank = &model.adapters;
    let (act, layers, head, heuristic) = match &model.backbone {
        Backbone::Mlp(m) => (
            m.spec.activation.lipschitz(),
            m.layers[1..].iter().map(|d| spectral_norm(p.get(d.weight))).collect::<Result<Vec<_>>>()?,
            spectral_norm(p.get(m.head.weight))?,
            false,
        ),
        Backbone::Transformer(t) => (
            1.0,
            t.blocks[1..].iter().map(|b| heuristic_block(p, b)).collect::<Result<Vec<_>>>()?,
            // mean pooling over n tokens has norm 1/√n ≤ 1
            spectral_norm(p.get(t.head.weight))?,
            true,
        ),
    };
    let core = merged_core(model)?.map(|c| split_core(&c, bank.d_h)).transpose()?;
    let gate_map = match &bank.params {
        BankParams::MergedCore { gate, .. } | BankParams::LowRankMerged { gate, .. } => Some(gate),
        _ => None,
    };
    let gates = (1..=bank.layers)
        .map(|l| gate_map.and_then(|g| g.get(&l)).map(|id| p.get(*id).data()[0]))
        .collect();
    Ok(Parts {
        act,
        adapter_act: bank.activation().lipschitz(),
        layers,
        head,
        projector: spectral_norm(&model.projector.matrix(p)?)?,
        core,
        gates,
        placed: (1..=bank.layers).map(|l| bank.contains(l)).collect(),
        film: bank.variant().is_film(),
        heuristic,
    })
}

fn sigma_max(rows: &[(f64, f64)]) -> f64 {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for &(p, q) in rows {
        a += p * p;
        b += p * q;
        c += q * q;
    }
    let half = (a + c) / 2.0;
    let disc = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    (half + disc).max(0.0).sqrt()
}

/// Builds the report with every loop matrix multiplied by `s`.
fn assemble(parts: &Parts, s: f64) -> LipschitzReport {
    let film_active = parts.film && parts.placed.iter().any(|&b| b);
    let layers = parts.placed.len();
    let l_g = s * parts.projector;
    let adapters: Vec<AdapterBound> = (1..=layers)
        .map(|l| {
            let placed = parts.placed[l - 1];
            let (a, b) = if !placed {
                (1.0, 0.0)
            } else if parts.film {
                (f64::INFINITY, f64::INFINITY)
            } else {
                let (wh, wz) = parts.core.expect("merged core");
                let (wh, wz) = (s * parts.adapter_act * wh, s * parts.adapter_act * wz);
                match parts.gates[l - 1] {
                    None => (wh, wz),
                    Some(alpha) => (alpha.abs() * wh + (1.0 - alpha).abs(), alpha.abs() * wz),
                }
            };
            AdapterBound {
                layer: l,
                in_placement: placed,
                wrt_h: a,
                wrt_z: b,
            }
        })
        .collect();
    let backbone: Vec<(usize, f64)> = parts
        .layers
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let f = if parts.heuristic {
                // residual blocks: the identity path is not scaled
                1.0 + s * (w - 1.0).max(0.0)
            } else {
                parts.act * s * w
            };
            (i + 2, f)
        })
        .collect();
    let head = s * parts.head;
    let mut gains = Vec::with_capacity(layers + 1);
    let (mut p, mut q) = (0.0, 0.0);
    for (l, ad) in adapters.iter().enumerate() {
        if l == 0 {
            p = ad.wrt_h;
            q = mul0(ad.wrt_z, l_g);
        } else {
            let k = ad.wrt_h * backbone[l - 1].1;
            p = mul0(k, p);
            q = mul0(k, q) + mul0(ad.wrt_z, l_g);
        }
        gains.push((p, q));
    }
    let (py, qy) = (mul0(head, p), mul0(head, q));
    gains.push((py, qy));
    let l_total = if film_active { f64::INFINITY } else { sigma_max(&gains) };
    LipschitzReport {
        backbone,
        head,
        projector: l_g,
        adapters,
        gains,
        l_total,
        feedback_gain: qy,
        contractive: !parts.heuristic && !film_active && l_total < 1.0,
        globally_lipschitz: !film_active,
        heuristic: parts.heuristic,
    }
}

/// `0 · ∞ = 0`: a zero factor cuts the path.
fn mul0(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        a * b
    }
}

pub fn lipschitz_report(model: &CflModel) -> Result<LipschitzReport> {
    Ok(assemble(&parts(model)?, 1.0))
}

impl LipschitzReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lipschitz report{}", if self.heuristic { " (heuristic)" } else { "" });
        for (l, f) in &self.backbone {
            let _ = writeln!(s, "  f{l:<3} {f:.6}");
        }
        let _ = writeln!(s, "  head {:.6}", self.head);
        let _ = writeln!(s, "  g    {:.6}", self.projector);
        for a in &self.adapters {
            let _ = writeln!(
                s,
                "  psi{:<2} wrt h {:.6}  wrt z {:.6}{}",
                a.layer,
                a.wrt_h,
                a.wrt_z,
                if a.in_placement { "" } else { "  (identity)" }
            );
        }
        let _ = writeln!(s, "  L_total       {:.6}", self.l_total);
        let _ = writeln!(s, "  feedback gain {:.6}", self.feedback_gain);
        let _ = writeln!(s, "  contractive   {}", self.contractive);
        if !self.globally_lipschitz {
            let _ = writeln!(s, "  FiLM adapters are bilinear in (h, z): no global bound");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,layer,value\n");
        for (l, f) in &self.backbone {
            let _ = writeln!(s, "backbone,{l},{f}");
        }
        let _ = writeln!(s, "head,,{}", self.head);
        let _ = writeln!(s, "projector,,{}", self.projector);
        for a in &self.adapters {
            let _ = writeln!(s, "adapter_h,{},{}", a.layer, a.wrt_h);
            let _ = writeln!(s, "adapter_z,{},{}", a.layer, a.wrt_z);
        }
        let _ = writeln!(s, "l_total,,{}", self.l_total);
        let _ = writeln!(s, "feedback_gain,,{}", self.feedback_gain);
        let _ = writeln!(s, "contractive,,{}", self.contractive);
        s
    }
}

#[derive(Clone, Debug)]
pub struct Rescaled {
    pub model: CflModel,
    /// Uniform factor applied to every loop matrix.
    pub scale: f64,
    pub before: LipschitzReport,
    pub after: LipschitzReport,
}

fn loop_matrices(model: &CflModel) -> Vec<ParamId> {
    let mut ids = Vec::new();
    match &model.backbone {
        Backbone::Mlp(m) => {
            ids.extend(m.layers[1..].iter().map(|d: &Dense| d.weight));
            ids.push(m.head.weight);
        }
        Backbone::Transformer(_) => {}
    }
    match model.projector.params {
        ProjectorParams::Full { weight, .. } => ids.push(weight),
        ProjectorParams::LowRank { coef, .. } => ids.push(coef),
    }
    match &model.adapters.params {
        BankParams::MergedCore { core, .. } => ids.push(*core),
        BankParams::LowRankMerged { base, up, .. } => ids.extend([*base, *up]),
        _ => {}
    }
    ids
}

/// Multiplies every weight matrix on the feedback loop by one factor
/// `s ∈ (0, 1]` chosen so that `l_total ≤ c`.
pub fn spectral_rescale(model: &CflModel, c: f64) -> Result<Rescaled> {
    if !(c > 0.0 && c < 1.0) {
        return Err(CflError::Config(format!("target {c} must lie in (0, 1)")));
    }
    let parts = parts(model)?;
    let before = assemble(&parts, 1.0);
    if !before.globally_lipschitz {
        return Err(CflError::NotGloballyLipschitz("a FiLM adapter bank"));
    }
    if parts.heuristic {
        return Err(CflError::Config("transformer bounds are heuristic; rescaling needs an MLP backbone".into()));
    }
    if before.l_total <= c {
        return Ok(Rescaled {
            model: model.clone(),
            scale: 1.0,
            after: before.clone(),
            before,
        });
    }
    // margin for the re-estimated norms after scaling
    let target = c * (1.0 - 1e-9);
    let floor = assemble(&parts, 0.0).l_total;
    if floor >= target {
        return Err(CflError::Config(format!(
            "bound cannot drop below {floor:.6}: the first layer keeps an unscaled identity path"
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if assemble(&parts, mid).l_total <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut out = model.clone();
    for id in loop_matrices(model) {
        out.params.get_mut(id).data_mut().iter_mut().for_each(|w| *w *= lo);
    }
    let after = lipschitz_report(&out)?;
    Ok(Rescaled {
        model: out,
        scale: lo,
        before,
        after,
    })
}
