//! Convergence, cost and latency diagnostics.

mod cost;
mod latency;
mod lipschitz;
mod probe;
mod spectral;

pub use cost::{cost_report, CostReport};
pub use latency::{latency_sweep, LatencyRow, LatencyTable};
pub use lipschitz::{lipschitz_report, spectral_rescale, AdapterBound, LipschitzReport, Rescaled};
pub use probe::{fixed_point_probe, fixed_point_probe_from, FixedPointProbe, C_HAT_FLOOR, DIVERGENCE_GROWTH};
pub use spectral::{spectral_norm, spectral_norm_estimate};
