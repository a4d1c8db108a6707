use serde::Serialize;

use crate::error::{CflError, Result};
use crate::model::{CflModel, Input};
use crate::refine::{refine_with, Mode, ModelState, UnrollOptions};

/// Ratios whose denominator falls below this are left out of `c_hat`.
pub const C_HAT_FLOOR: f64 = 1e-12;
/// Growth of the state delta beyond this factor counts as divergence.
pub const DIVERGENCE_GROWTH: f64 = 1e6;
const CONVERGED: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct FixedPointProbe {
    /// `‖S_{τ+1} − S_τ‖` for `τ = 0..tau_max`.
    pub deltas: Vec<f64>,
    /// Successive ratios `Δ_{τ+1}/Δ_τ` that entered `c_hat`.
    pub ratios: Vec<f64>,
    /// Geometric mean of `ratios`; 0 when there are none.
    pub c_hat: f64,
    pub diverged: bool,
    #[serde(skip)]
    pub fixed_point: Option<ModelState>,
    #[serde(skip)]
    pub last_state: Option<ModelState>,
}

pub fn fixed_point_probe(model: &CflModel, x: Input<'_>, tau_max: usize) -> Result<FixedPointProbe> {
    fixed_point_probe_from(model, x, None, tau_max)
}

/// Probe starting from `start` instead of the forward pass.
pub fn fixed_point_probe_from(
    model: &CflModel,
    x: Input<'_>,
    start: Option<&ModelState>,
    tau_max: usize,
) -> Result<FixedPointProbe> {
    if tau_max < 3 {
        return Err(CflError::Config("fixed-point probe needs tau_max >= 3".into()));
    }
    let opts = UnrollOptions {
        t_max: tau_max,
        mode: Mode::Composed,
        eps: None,
        start,
    };
    let trace = match refine_with::<f64>(model, x, &opts) {
        Ok(t) => t,
        Err(CflError::NonFinite(_)) => {
            return Ok(FixedPointProbe {
                deltas: Vec::new(),
                ratios: Vec::new(),
                c_hat: f64::INFINITY,
                diverged: true,
                fixed_point: None,
                last_state: None,
            })
        }
        Err(e) => return Err(e),
    };
    let deltas = trace.state_deltas.clone();
    let ratios: Vec<f64> = deltas
        .windows(2)
        .filter(|w| w[0] >= C_HAT_FLOOR)
        .map(|w| w[1] / w[0])
        .collect();
    let c_hat = if ratios.is_empty() {
        0.0
    } else if ratios.iter().any(|&r| r == 0.0) {
        0.0
    } else {
        (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp()
    };
    let first = deltas[0];
    let diverged = deltas.iter().any(|&d| !d.is_finite() || (first > 0.0 && d > DIVERGENCE_GROWTH * first));
    let converged = deltas.last().is_some_and(|&d| d < CONVERGED);
    Ok(FixedPointProbe {
        deltas,
        ratios,
        c_hat,
        diverged,
        fixed_point: converged.then(|| trace.final_state.clone()),
        last_state: Some(trace.final_state),
    })
}
