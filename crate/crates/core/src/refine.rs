//! The refinement loop.
//!
//! Iteration 0 is the plain forward pass. Each later iteration projects the
//! current output to `z^(τ) = g(y^(τ))`, rewrites the hidden states through
//! the adapters and recomputes the output.
//!
//! [`Mode::Composed`] feeds every adapted state forward before adapting the
//! next layer:
//!
//! ```text
//! h1' = ψ1(h1, z)
//! hl' = ψl(fl(h(l-1)'), z)        l = 2..L
//! y'  = head(hL')
//! ```
//!
//! [`Mode::Literal`] adapts each stored state in place, `hl' = ψl(hl, z)`,
//! and still executes the forward writes `f(l+1)(hl')` that the next step
//! overwrites, so its operation count reflects that schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::graph::{FlopTag, NodeId};
use crate::model::{CflModel, Input, Session};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Composed,
    Literal,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Composed => "composed",
            Mode::Literal => "literal",
        })
    }
}

impl FromStr for Mode {
    type Err = CflError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "composed" => Ok(Mode::Composed),
            "literal" => Ok(Mode::Literal),
            other => Err(CflError::Config(format!("unknown mode {other:?} (composed|literal)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxT,
    DeltaBelowEps,
}

/// `S_τ = (h^(1) … h^(L), y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub hiddens: Vec<Tensor<f64>>,
    pub y: Tensor<f64>,
    pub tau: usize,
}

impl ModelState {
    /// Euclidean distance over the concatenation of all components.
    pub fn distance(&self, other: &ModelState) -> Result<f64> {
        if self.hiddens.len() != other.hiddens.len() {
            return Err(CflError::Shape("states have different depth".into()));
        }
        let mut sq = sq_diff(&self.y, &other.y)?;
        for (a, b) in self.hiddens.iter().zip(&other.hiddens) {
            sq += sq_diff(a, b)?;
        }
        Ok(sq.sqrt())
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self.hiddens.iter().map(|h| h.norm().powi(2)).sum::<f64>() + self.y.norm().powi(2);
        sq.sqrt()
    }
}

fn sq_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CflError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `‖a − b‖₂` over all entries.
pub fn diff_norm(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    Ok(sq_diff(a, b)?.sqrt())
}

#[derive(Clone, Debug)]
pub struct RefinementTrace {
    pub mode: Mode,
    /// `y^(0) … y^(T)`.
    pub outputs: Vec<Tensor<f64>>,
    /// `‖S_{τ+1} − S_τ‖`, one per refinement iteration.
    pub state_deltas: Vec<f64>,
    /// `‖y^(τ+1) − y^(τ)‖`.
    pub output_deltas: Vec<f64>,
    /// FLOPs per iteration; entry 0 is the forward pass.
    pub flops: Vec<u64>,
    pub flops_by_tag: Vec<BTreeMap<FlopTag, u64>>,
    /// Seconds per iteration.
    pub wall_times: Vec<f64>,
    pub stop: StopReason,
    pub initial_state: ModelState,
    pub final_state: ModelState,
}

#[derive(Serialize)]
struct TraceRecord {
    tau: usize,
    output_delta: Option<f64>,
    state_delta: Option<f64>,
    flops: u64,
    wall_time: f64,
}

impl RefinementTrace {
    /// Number of refinement iterations executed.
    pub fn iterations(&self) -> usize {
        self.outputs.len() - 1
    }

    pub fn final_output(&self) -> &Tensor<f64> {
        self.outputs.last().expect("trace holds y^(0)")
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.iter().sum()
    }

    /// One JSON object per line, one line per iteration.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for tau in 0..self.outputs.len() {
            let rec = TraceRecord {
                tau,
                output_delta: tau.checked_sub(1).map(|i| self.output_deltas[i]),
                state_delta: tau.checked_sub(1).map(|i| self.state_deltas[i]),
                flops: self.flops[tau],
                wall_time: self.wall_times[tau],
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| CflError::Format(e.to_string()))?;
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct UnrollOptions<'s> {
    pub t_max: usize,
    pub mode: Mode,
    /// Stop after the first iteration whose output delta is below this.
    pub eps: Option<f64>,
    /// Replaces the forward pass as `S_0`.
    pub start: Option<&'s ModelState>,
}

/// Node ids of an unrolled refinement inside a session's graph.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub outputs: Vec<NodeId>,
    pub initial_hiddens: Vec<NodeId>,
    pub final_hiddens: Vec<NodeId>,
    pub state_deltas: Vec<f64>,
    pub output_deltas: Vec<f64>,
    pub flops: Vec<u64>,
    pub flops_by_tag: Vec<BTreeMap<FlopTag, u64>>,
    pub wall: Vec<Duration>,
    pub stop: StopReason,
}

fn values<T: Real>(s: &Session<'_, T>, ids: &[NodeId]) -> Vec<Tensor<f64>> {
    ids.iter().map(|&n| s.graph.value(n).cast()).collect()
}

/// Records `S_0 … S_T` into the session graph.
pub fn unroll<T: Real>(model: &CflModel, s: &mut Session<'_, T>, x: Input<'_>, opts: &UnrollOptions<'_>) -> Result<Unrolled> {
    let layers = model.backbone.layers();
    let prev_tag = s.graph.set_tag(FlopTag::Backbone);
    let mut mark = s.graph.len();
    let mut clock = Instant::now();
    let (mut hiddens, mut y) = match opts.start {
        None => model.backbone.forward_full(s, x)?,
        Some(st) => {
            if st.hiddens.len() != layers {
                return Err(CflError::Shape(format!("start state has {} layers, model has {layers}", st.hiddens.len())));
            }
            let hs = st
                .hiddens
                .iter()
                .map(|h| s.graph.constant(h.cast()))
                .collect::<Result<Vec<_>>>()?;
            (hs, s.graph.constant(st.y.cast())?)
        }
    };
    let mut out = Unrolled {
        outputs: vec![y],
        initial_hiddens: hiddens.clone(),
        final_hiddens: Vec::new(),
        state_deltas: Vec::new(),
        output_deltas: Vec::new(),
        flops: Vec::new(),
        flops_by_tag: Vec::new(),
        wall: Vec::new(),
        stop: StopReason::MaxT,
    };
    let close = |s: &Session<'_, T>, out: &mut Unrolled, mark: &mut usize, clock: &mut Instant| {
        out.wall.push(clock.elapsed());
        let end = s.graph.len();
        out.flops.push(s.graph.flops_in(*mark, end));
        out.flops_by_tag.push(s.graph.flops_by_tag(*mark, end));
        *mark = end;
        *clock = Instant::now();
    };
    close(s, &mut out, &mut mark, &mut clock);

    for _ in 0..opts.t_max {
        let z = model.projector.project(s, y)?;
        let m = model.adapters.modulation(s, z)?;
        let mut next = Vec::with_capacity(layers);
        match opts.mode {
            Mode::Composed => {
                let mut h = model.adapters.apply(s, &m, 1, hiddens[0])?;
                next.push(h);
                for l in 2..=layers {
                    let f = model.backbone.layer(s, l, h)?;
                    h = model.adapters.apply(s, &m, l, f)?;
                    next.push(h);
                }
            }
            Mode::Literal => {
                for l in 1..=layers {
                    let h = model.adapters.apply(s, &m, l, hiddens[l - 1])?;
                    next.push(h);
                    if l < layers {
                        // overwritten by the next step
                        model.backbone.layer(s, l + 1, h)?;
                    }
                }
            }
        }
        let y_next = model.backbone.head(s, next[layers - 1])?;
        close(s, &mut out, &mut mark, &mut clock);

        let y_old = s.graph.value(y).cast();
        let y_new = s.graph.value(y_next).cast();
        let dy = sq_diff(&y_new, &y_old)?;
        let mut ds = dy;
        for (a, b) in next.iter().zip(&hiddens) {
            ds += sq_diff(&s.graph.value(*a).cast(), &s.graph.value(*b).cast())?;
        }
        out.output_deltas.push(dy.sqrt());
        out.state_deltas.push(ds.sqrt());
        out.outputs.push(y_next);
        hiddens = next;
        y = y_next;
        if opts.eps.is_some_and(|eps| dy.sqrt() < eps) {
            out.stop = StopReason::DeltaBelowEps;
            break;
        }
        clock = Instant::now();
    }
    out.final_hiddens = hiddens;
    s.graph.set_tag(prev_tag);
    Ok(out)
}

/// Runs refinement without recording gradients.
pub fn refine_with<T: Real>(model: &CflModel, x: Input<'_>, opts: &UnrollOptions<'_>) -> Result<RefinementTrace> {
    let mut s = model.inference_session::<T>();
    let u = unroll(model, &mut s, x, opts)?;
    let t = u.outputs.len() - 1;
    Ok(RefinementTrace {
        mode: opts.mode,
        outputs: values(&s, &u.outputs),
        state_deltas: u.state_deltas,
        output_deltas: u.output_deltas,
        flops: u.flops,
        flops_by_tag: u.flops_by_tag,
        wall_times: u.wall.iter().map(Duration::as_secs_f64).collect(),
        stop: u.stop,
        initial_state: ModelState {
            hiddens: values(&s, &u.initial_hiddens),
            y: s.graph.value(u.outputs[0]).cast(),
            tau: 0,
        },
        final_state: ModelState {
            hiddens: values(&s, &u.final_hiddens),
            y: s.graph.value(u.outputs[t]).cast(),
            tau: t,
        },
    })
}

/// `T` refinement iterations in double precision.
pub fn refine(model: &CflModel, x: Input<'_>, t: usize, mode: Mode) -> Result<RefinementTrace> {
    refine_with::<f64>(
        model,
        x,
        &UnrollOptions {
            t_max: t,
            mode,
            ..Default::default()
        },
    )
}

/// Stops after the first iteration with `‖y^(τ+1) − y^(τ)‖ < eps`.
pub fn refine_early_exit(model: &CflModel, x: Input<'_>, t_max: usize, eps: f64, mode: Mode) -> Result<RefinementTrace> {
    if t_max == 0 {
        return Err(CflError::Config("early exit needs T_max >= 1".into()));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(CflError::Config(format!("eps must be nonnegative, got {eps}")));
    }
    refine_with::<f64>(
        model,
        x,
        &UnrollOptions {
            t_max,
            mode,
            eps: Some(eps),
            start: None,
        },
    )
}
