//! Trains the `T = 0` baseline and every configured CFL variant from the
//! same seed, then tabulates accuracy, parameters and FLOPs per `(variant, T)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::Dataset;
use crate::diagnostics::{cost_report, latency_sweep, lipschitz_report};
use crate::error::{Result, ResultExt};
use crate::model::CflModel;
use crate::params::ParamGroup;
use crate::refine::refine;
use crate::training::{evaluate, train, TrainLog};

use super::checkpoint;
use super::config::RunConfig;

pub const BASELINE: &str = "baseline";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub variant: String,
    pub t: usize,
    pub params: usize,
    /// Forward FLOPs for one evaluation example at depth `t`.
    pub flops: u64,
    /// Evaluation accuracy.
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,T,params,flops,metric\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.6}", r.variant, r.t, r.params, r.flops, r.metric);
        }
        s
    }

    pub fn get(&self, variant: &str, t: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.variant == variant && r.t == t)
    }

    pub fn variants(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.variant.as_str()) {
                seen.push(&r.variant);
            }
        }
        seen
    }
}

#[derive(Debug)]
pub struct Experiment {
    pub table: ResultTable,
    pub logs: Vec<(String, TrainLog)>,
    pub out_dir: PathBuf,
}

struct Sink {
    root: PathBuf,
    table: ResultTable,
}

impl Sink {
    fn new(root: &Path) -> Result<Self> {
        for d in ["logs", "cost", "lipschitz", "latency", "traces", "checkpoints"] {
            fs::create_dir_all(root.join(d))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            table: ResultTable::default(),
        })
    }

    fn write(&self, rel: impl AsRef<Path>, text: &str) -> Result<()> {
        fs::write(self.root.join(rel), text)?;
        Ok(())
    }

    /// Rows are flushed as they arrive so a failure keeps what finished.
    fn push(&mut self, row: ResultRow) -> Result<()> {
        self.table.rows.push(row);
        self.write("results.csv", &self.table.to_csv())
    }
}

fn flops_at(model: &CflModel, example: &Dataset, t: usize, mode: crate::refine::Mode) -> Result<u64> {
    let batch = example.batch(&[0])?;
    Ok(refine(model, batch.inputs()[0], t, mode)?.total_flops())
}

fn variant_names(cfg: &RunConfig) -> Vec<String> {
    let mut names: Vec<String> = cfg.adapters.iter().map(|a| a.variant.name().to_string()).collect();
    let dup: BTreeSet<String> = names
        .iter()
        .filter(|n| names.iter().filter(|m| m == n).count() > 1)
        .cloned()
        .collect();
    for (i, n) in names.iter_mut().enumerate() {
        if dup.contains(n) {
            *n = format!("{n}-{i}");
        }
    }
    names
}

pub fn run_experiment(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    let mut sink = Sink::new(&cfg.out_dir)?;
    sink.write("config.toml", &cfg.to_toml()?)?;
    let (train_set, eval_set) = cfg.datasets().context(|| "building datasets".into())?;
    let example = eval_set.split_at(1)?.0;
    let mut logs = Vec::new();

    let mut base = CflModel::new(cfg.model_spec(None))?;
    let log = train(&mut base, &train_set, Some(&eval_set), &cfg.train_config(0))
        .context(|| "training baseline".into())?;
    let mut text = Vec::new();
    log.write_csv(&mut text)?;
    sink.write(format!("logs/{BASELINE}.csv"), &String::from_utf8_lossy(&text))?;
    checkpoint::save(&base, &sink.root.join(format!("checkpoints/{BASELINE}.ckpt")))?;
    logs.push((BASELINE.to_string(), log));
    let acc = evaluate(&base, &eval_set, 0, cfg.mode, cfg.train.loss)?.accuracy;
    sink.push(ResultRow {
        variant: BASELINE.into(),
        t: 0,
        params: base.params.count(ParamGroup::Backbone, false),
        flops: flops_at(&base, &example, 0, cfg.mode)?,
        metric: acc,
    })?;

    let t_max = cfg.t_eval.iter().copied().max().unwrap_or(0);
    for (adapter, name) in cfg.adapters.iter().zip(variant_names(cfg)) {
        let spec = cfg.model_spec(Some(adapter));
        let mut model = CflModel::new(spec.clone())?;
        let tc = cfg.train_config(cfg.train.t_unroll);
        let log = train(&mut model, &train_set, Some(&eval_set), &tc).context(|| format!("training {name}"))?;
        let mut text = Vec::new();
        log.write_csv(&mut text)?;
        sink.write(format!("logs/{name}.csv"), &String::from_utf8_lossy(&text))?;
        checkpoint::save(&model, &sink.root.join(format!("checkpoints/{name}.ckpt")))?;
        logs.push((name.clone(), log));

        let params = model.params.total();
        for &t in &cfg.t_eval {
            let ev = evaluate(&model, &eval_set, t, cfg.mode, cfg.train.loss).context(|| format!("evaluating {name} at T={t}"))?;
            sink.push(ResultRow {
                variant: name.clone(),
                t,
                params,
                flops: flops_at(&model, &example, t, cfg.mode)?,
                metric: ev.accuracy,
            })?;
        }

        let cost = cost_report(&spec, cfg.train.t_unroll as f64)?;
        sink.write(format!("cost/{name}.txt"), &cost.to_text())?;
        sink.write(format!("cost/{name}.csv"), &cost.to_csv())?;
        let lip = lipschitz_report(&model)?;
        sink.write(format!("lipschitz/{name}.txt"), &lip.to_text())?;
        let batch = example.batch(&[0])?;
        let x = batch.inputs()[0];
        let trace = refine(&model, x, t_max, cfg.mode)?;
        let mut jsonl = Vec::new();
        trace.write_jsonl(&mut jsonl)?;
        sink.write(format!("traces/{name}_T{t_max}.jsonl"), &String::from_utf8_lossy(&jsonl))?;
        if cfg.latency.enabled {
            let lat = latency_sweep(&model, x, &cfg.latency.t_list, cfg.latency.reps, cfg.latency.warmup)?;
            sink.write(format!("latency/{name}.csv"), &lat.to_csv())?;
        }
    }
    Ok(Experiment {
        table: sink.table,
        logs,
        out_dir: cfg.out_dir.clone(),
    })
}
