use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cfl_core::data::{self, context, listops, Dataset, Inputs};
use cfl_core::diagnostics::{cost_report, fixed_point_probe, latency_sweep, lipschitz_report, spectral_rescale};
use cfl_core::harness::{checkpoint, run_experiment, RunConfig};
use cfl_core::training::{evaluate_with, train};
use cfl_core::{CflModel, Mode};

#[derive(Parser)]
#[command(name = "cfl", version, about = "Contextual feedback loops on small feed-forward networks")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Arithmetic of evaluation forward passes.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Listops,
    Context,
    Blobs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model (the first configured adapter, or the baseline).
    Train {
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "t", value_delimiter = ',', default_value = "0,1")]
        t: Vec<usize>,
    },
    /// Lipschitz report and fixed-point probe.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        tau_max: usize,
        /// Rescale to this contraction target before probing.
        #[arg(long)]
        rescale: Option<f64>,
    },
    /// Parameter and FLOP overhead of every configured adapter.
    Cost {
        #[arg(long, default_value_t = 1.0)]
        t_avg: f64,
    },
    /// Wall-clock latency against T.
    Latency {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        t_list: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Write a synthetic dataset as text.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        len: usize,
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
    },
    /// Train the baseline and every CFL variant and emit the result table.
    RunExperiment,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().context("--config is required for this command")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_from(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<CflModel> {
    Ok(match ckpt {
        Some(p) => checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => CflModel::new(cfg.model_spec(cfg.adapters.first()))?,
    })
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text).with_context(|| format!("writing {}", dir.join(name).display()))?;
    Ok(())
}

fn first_example(eval: &Dataset) -> Result<Dataset> {
    Ok(eval.split_at(1)?.0)
}

fn gen_data(kind: DataKind, seed: u64, n: usize, len: usize, depth: usize, max_len: usize, dim: usize) -> Result<String> {
    let mut s = String::new();
    match kind {
        DataKind::Listops => {
            s.push_str("label\texpression\n");
            for e in listops::generate(seed, n, depth, max_len)? {
                let _ = writeln!(s, "{}\t{}", e.label, listops::to_text(&e.tokens));
            }
        }
        DataKind::Context => {
            let d = context::gen_context_task(seed, n, len)?;
            let Inputs::Tokens(seqs) = &d.inputs else { unreachable!() };
            s.push_str("label\ttokens\n");
            for (seq, l) in seqs.iter().zip(&d.labels) {
                let toks: Vec<String> = seq.iter().map(usize::to_string).collect();
                let _ = writeln!(s, "{l}\t{}", toks.join(" "));
            }
        }
        DataKind::Blobs => {
            let d = data::gen_blobs(seed, n, dim, 4.0)?;
            let Inputs::Dense(x) = &d.inputs else { unreachable!() };
            s.push_str("label");
            for j in 0..dim {
                let _ = write!(s, ",x{j}");
            }
            s.push('\n');
            for (row, l) in x.data().chunks(dim).zip(&d.labels) {
                let _ = write!(s, "{l}");
                for v in row {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
    }
    Ok(s)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train { baseline } => {
            let cfg = load_config(&cli)?;
            let (tr, ev) = cfg.datasets()?;
            let adapter = if *baseline { None } else { cfg.adapters.first() };
            let t = if adapter.is_some() { cfg.train.t_unroll } else { 0 };
            let mut model = CflModel::new(cfg.model_spec(adapter))?;
            let log = train(&mut model, &tr, Some(&ev), &cfg.train_config(t))?;
            let name = if adapter.is_some() { model.adapters.variant().name() } else { "baseline" };
            fs::create_dir_all(&cfg.out_dir)?;
            let mut csv = Vec::new();
            log.write_csv(&mut csv)?;
            write(&cfg.out_dir, &format!("{name}.log.csv"), &String::from_utf8(csv)?)?;
            let ckpt = cfg.out_dir.join(format!("{name}.ckpt"));
            checkpoint::save(&model, &ckpt)?;
            if let Some(last) = log.rows.last() {
                println!("{name}: epoch {} {} loss {:.4} accuracy {:.4}", last.epoch, last.split, last.loss, last.accuracy);
            }
            println!("checkpoint written to {}", ckpt.display());
        }
        Cmd::Eval { checkpoint: ckpt, t } => {
            let cfg = load_config(&cli)?;
            let model = model_from(&cfg, Some(ckpt))?;
            let (_, ev) = cfg.datasets()?;
            println!("T,loss,accuracy");
            for &t in t {
                let r = match cli.precision {
                    Precision::F64 => evaluate_with::<f64>(&model, &ev, t, cfg.mode, cfg.train.loss)?,
                    Precision::F32 => evaluate_with::<f32>(&model, &ev, t, cfg.mode, cfg.train.loss)?,
                };
                println!("{t},{:.6},{:.6}", r.loss, r.accuracy);
            }
        }
        Cmd::Diagnose {
            checkpoint: ckpt,
            tau_max,
            rescale,
        } => {
            let cfg = load_config(&cli)?;
            let mut model = model_from(&cfg, ckpt.as_deref())?;
            if let Some(c) = rescale {
                let r = spectral_rescale(&model, *c)?;
                println!("rescaled by {:.6}: l_total {:.6} -> {:.6}", r.scale, r.before.l_total, r.after.l_total);
                model = r.model;
            }
            let lip = lipschitz_report(&model)?;
            print!("{}", lip.to_text());
            let ex = first_example(&cfg.datasets()?.1)?;
            let b = ex.batch(&[0])?;
            let p = fixed_point_probe(&model, b.inputs()[0], *tau_max)?;
            println!("fixed-point probe: c_hat {:.6} diverged {} converged {}", p.c_hat, p.diverged, p.fixed_point.is_some());
            let mut csv = String::from("tau,delta\n");
            for (i, d) in p.deltas.iter().enumerate() {
                let _ = writeln!(csv, "{i},{d:e}");
            }
            write(&cfg.out_dir, "lipschitz.csv", &lip.to_csv())?;
            write(&cfg.out_dir, "probe.csv", &csv)?;
        }
        Cmd::Cost { t_avg } => {
            let cfg = load_config(&cli)?;
            if cfg.adapters.is_empty() {
                bail!("no adapters configured");
            }
            for a in &cfg.adapters {
                let r = cost_report(&cfg.model_spec(Some(a)), *t_avg)?;
                print!("{}", r.to_text());
                write(&cfg.out_dir, &format!("cost_{}.csv", r.variant), &r.to_csv())?;
            }
        }
        Cmd::Latency {
            checkpoint: ckpt,
            t_list,
            reps,
            warmup,
        } => {
            let cfg = load_config(&cli)?;
            let model = model_from(&cfg, ckpt.as_deref())?;
            let ex = first_example(&cfg.datasets()?.1)?;
            let b = ex.batch(&[0])?;
            let table = latency_sweep(&model, b.inputs()[0], t_list, *reps, *warmup)?;
            let csv = table.to_csv();
            print!("{csv}");
            write(&cfg.out_dir, "latency.csv", &csv)?;
        }
        Cmd::GenData {
            kind,
            n,
            len,
            max_depth,
            max_len,
            dim,
        } => {
            let text = gen_data(*kind, cli.seed.unwrap_or(0), *n, *len, *max_depth, *max_len, *dim)?;
            match &cli.out {
                Some(dir) => {
                    let name = match kind {
                        DataKind::Listops => "listops.tsv",
                        DataKind::Context => "context.tsv",
                        DataKind::Blobs => "blobs.csv",
                    };
                    write(dir, name, &text)?;
                }
                None => print!("{text}"),
            }
        }
        Cmd::RunExperiment => {
            let cfg = load_config(&cli)?;
            let e = run_experiment(&cfg)?;
            print!("{}", e.table.to_csv());
            println!("artifacts in {}", e.out_dir.display());
        }
    }
    Ok(())
}
