//! Wall-clock latency of refinement as a function of `T`.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{CflError, Result};
use crate::model::{CflModel, Input};
use crate::refine::{refine, Mode};

#[derive(Clone, Debug, Serialize)]
pub struct LatencyRow {
    pub t: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub cv: f64,
    pub median_s: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyTable {
    pub rows: Vec<LatencyRow>,
    /// Least-squares fit of mean latency against `T`.
    pub slope_s: f64,
    pub intercept_s: f64,
    pub r_squared: f64,
}

/// Times `reps` refinements at every `T` in `t_list`. Repetitions are
/// interleaved across `T` so drift in machine load spreads evenly; the
/// first `warmup` rounds are discarded.
pub fn latency_sweep(model: &CflModel, x: Input<'_>, t_list: &[usize], reps: usize, warmup: usize) -> Result<LatencyTable> {
    if reps < 30 {
        return Err(CflError::Config("latency sweep needs at least 30 repetitions".into()));
    }
    if t_list.is_empty() {
        return Err(CflError::Config("latency sweep needs at least one T".into()));
    }
    let mut samples = vec![Vec::with_capacity(reps); t_list.len()];
    for round in 0..warmup + reps {
        for (i, &t) in t_list.iter().enumerate() {
            let start = Instant::now();
            let trace = refine(model, x, t, Mode::Composed)?;
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(trace);
            if round >= warmup {
                samples[i].push(elapsed);
            }
        }
    }
    let rows: Vec<LatencyRow> = t_list
        .iter()
        .zip(samples)
        .map(|(&t, mut v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            v.sort_by(f64::total_cmp);
            let median = if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
            };
            LatencyRow {
                t,
                mean_s: mean,
                std_s: var.sqrt(),
                cv: var.sqrt() / mean,
                median_s: median,
                reps,
            }
        })
        .collect();
    let (slope, intercept, r2) = linear_fit(
        &rows.iter().map(|r| r.t as f64).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.mean_s).collect::<Vec<_>>(),
    );
    Ok(LatencyTable {
        rows,
        slope_s: slope,
        intercept_s: intercept,
        r_squared: r2,
    })
}

/// Ordinary least squares `y ≈ slope·x + intercept` and its `R²`.
pub(crate) fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, my, 0.0);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

impl LatencyTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("T,mean_s,std_s,cv,median_s,reps\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.9},{:.9},{:.6},{:.9},{}", r.t, r.mean_s, r.std_s, r.cv, r.median_s, r.reps);
        }
        let _ = writeln!(
            s,
            "# fit slope_s={:.9} intercept_s={:.9} r2={:.6}",
            self.slope_s, self.intercept_s, self.r_squared
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::linear_fit;

    #[test]
    fn exact_line() {
        let (m, b, r2) = linear_fit(&[0.0, 1.0, 2.0, 4.0], &[1.0, 3.0, 5.0, 9.0]);
        assert!((m - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
