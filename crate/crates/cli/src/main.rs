//! `mavqa` command-line front end.
//!
//! Exit codes: 0 success, 1 bad input (arguments, config, files), 2 a
//! runtime or numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mavqa_core::checkpoint::Checkpoint;
use mavqa_core::config::RunConfig;
use mavqa_core::experiment::{
    self, epoch_metrics, eval_rng, render_metrics, render_report, render_timings, Axis, ExperimentSpec, Format, Report, METRIC_SCENARIOS,
};
use mavqa_core::train::{evaluate, grad_check, grad_check_probe, Arm, Trainer};
use mavqa_core::world::{make_dataset, Dataset, Split};
use mavqa_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mavqa", version, about = "Missing-modality AVQA experiments on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key = value config file; unset keys keep built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config with this one
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Report format
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
    /// Extra key=value overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and log per-epoch validation metrics
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint instead of starting fresh
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Four-way component ablation
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Slot-count sweep
    SweepSlots {
        #[command(flatten)]
        common: Common,
        /// Comma-separated slot counts
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Diffusion step-count sweep
    SweepTimesteps {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Missing-ratio sweep
    SweepRatio {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Finite-difference check of the full training loss on a small probe
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic dataset to a binary file
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn format_of(c: &Common) -> Result<Format> {
    c.format.parse()
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out)?;
    Ok(&c.out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    make_dataset(cfg.samples, &cfg.world)
}

fn run_id(cfg: &RunConfig) -> String {
    format!("{}-s{}", cfg.hash(), cfg.train.seed)
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let (cfg, mut trainer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let cfg = ck.config.clone();
            (cfg, ck.into_trainer()?)
        }
        None => {
            let cfg = load_config(common)?;
            let trainer = Trainer::new(cfg.train.clone(), cfg.world.dims)?;
            (cfg, trainer)
        }
    };
    let format = format_of(common)?;
    let dir = out_dir(common)?.to_path_buf();
    let data = dataset(&cfg)?;
    let id = run_id(&cfg);
    let mut rows = Vec::new();
    trainer.fit(data.split(Split::Train), |t, losses| {
        println!(
            "epoch {}: l_avqa {:.6} l_rmmr {:.6} l_ave {:.6} total {:.6}",
            losses.epoch, losses.l_avqa, losses.l_rmmr, losses.l_ave, losses.total
        );
        rows.extend(epoch_metrics(&id, t, losses, &data, cfg.eval_ratio)?);
        Checkpoint::from_trainer(t, &cfg).save(&dir.join(format!("epoch-{}.ckpt", losses.epoch)))
    })?;
    Checkpoint::from_trainer(&trainer, &cfg).save(&dir.join("final.ckpt"))?;
    println!("wrote {}", dir.join("final.ckpt").display());
    if rows.is_empty() {
        println!("nothing to do: checkpoint already has {} epochs", trainer.epoch);
        return Ok(());
    }
    write(&dir.join(format!("metrics.{}", format.extension())), &render_metrics(&rows, format)?)
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    // Evaluation settings may be overridden; the model is taken as saved.
    for kv in &common.set {
        if let Some(("eval_ratio", v)) = kv.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            cfg.set("eval_ratio", v)?;
        } else {
            return Err(Error::Config(format!("eval only accepts --set eval_ratio=..., got '{kv}'")));
        }
    }
    cfg.validate()?;
    let format = format_of(common)?;
    let dir = out_dir(common)?.to_path_buf();
    let trainer = ck.into_trainer()?;
    let data = dataset(&cfg)?;
    let losses = mavqa_core::train::EpochLosses {
        epoch: trainer.epoch,
        l_avqa: f64::NAN,
        l_rmmr: f64::NAN,
        l_ave: f64::NAN,
        total: f64::NAN,
    };
    let mut rows = Vec::new();
    for sc in METRIC_SCENARIOS {
        let m = evaluate(&trainer.models, &trainer.config, data.split(Split::Test), sc, cfg.eval_ratio, &mut eval_rng(trainer.config.seed, sc))?;
        println!("{sc}: accuracy {:.4} pseudo_mse_a {:.4} pseudo_mse_v {:.4}", m.accuracy, m.pseudo_mse_a, m.pseudo_mse_v);
        rows.push(experiment::MetricsRow {
            run_id: run_id(&cfg),
            epoch: losses.epoch,
            scenario: sc.as_str().to_string(),
            ratio: cfg.eval_ratio,
            accuracy: m.accuracy,
            l_avqa: losses.l_avqa,
            l_rmmr: losses.l_rmmr,
            l_ave: losses.l_ave,
            pseudo_mse_a: m.pseudo_mse_a,
            pseudo_mse_v: m.pseudo_mse_v,
        });
    }
    write(&dir.join(format!("eval.{}", format.extension())), &render_metrics(&rows, format)?)
}

const ARM_NOTE: &str = "\
# arms: neither = zero-fill substitute; rmm = recalled pseudo feature fed to the head;
# avr = zero-fill substitute enhanced by the reverse diffusion chain;
# rmm+avr = recalled pseudo feature enhanced by the reverse diffusion chain.
";

fn write_report(common: &Common, spec: &ExperimentSpec, report: &Report) -> Result<()> {
    let format = format_of(common)?;
    let dir = out_dir(common)?;
    write(&dir.join(format!("{}.{}", spec.name, format.extension())), &render_report(&report.rows, format)?)?;
    let meta = format!(
        "# experiment {} axis {} config_hash {}\n{ARM_NOTE}{}",
        spec.name,
        spec.axis.name(),
        spec.base.hash(),
        spec.base.to_text()
    );
    write(&dir.join(format!("{}.config.txt", spec.name)), meta.as_bytes())?;
    write(&dir.join(format!("{}.timing.csv", spec.name)), &render_timings(&report.timings)?)
}

fn cmd_experiment(common: &Common, build: impl FnOnce(RunConfig) -> ExperimentSpec) -> Result<()> {
    let spec = build(load_config(common)?);
    let report = match spec.axis {
        Axis::Components(_) => experiment::run_ablation(&spec)?,
        Axis::Slots(_) => experiment::run_slot_sweep(&spec)?,
        Axis::Timesteps(_) => experiment::run_timestep_sweep(&spec)?,
        Axis::MissingRatio(_) => experiment::run_missing_ratio_sweep(&spec)?,
    };
    for r in &report.rows {
        println!("{}={} seed={} {} {}: accuracy {:.4}", r.axis, r.axis_value, r.seed, r.arm, r.scenario, r.accuracy);
    }
    write_report(common, &spec, &report)
}

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let dir = out_dir(common)?;
    let mut csv = String::from("arm,group,checked,max_rel_err,max_abs_err,analytic_norm,numeric_norm\n");
    let mut worst: f64 = 0.0;
    for arm in Arm::ALL {
        let (models, mut cfg, x, draw) = grad_check_probe(seed)?;
        cfg.arm = arm;
        let report = grad_check(&models, &cfg, &x, Some(&draw))?;
        for g in &report.groups {
            println!("{:8} {:10} max rel err {:.3e} (abs {:.3e}, {} entries)", arm.as_str(), g.group.as_str(), g.max_rel_err, g.max_abs_err, g.checked);
            csv += &format!(
                "{},{},{},{:e},{:e},{:e},{:e}\n",
                arm.as_str(),
                g.group.as_str(),
                g.checked,
                g.max_rel_err,
                g.max_abs_err,
                g.analytic_norm,
                g.numeric_norm
            );
        }
        worst = worst.max(report.max_rel_err());
    }
    write(&dir.join("gradcheck.csv"), csv.as_bytes())?;
    if worst >= 1e-6 {
        return Err(Error::Diverged {
            term: "gradient check",
            value: worst,
        });
    }
    Ok(())
}

fn cmd_gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let data = dataset(&cfg)?;
    let mut bytes = Vec::new();
    data.write_to(&mut bytes)?;
    let path = dir.join(format!("world-s{}.tmw", cfg.world.seed));
    write(&path, &bytes)?;
    let counts = data.samples.iter().fold(vec![0usize; cfg.world.dims.k], |mut acc, s| {
        acc[s.label] += 1;
        acc
    });
    println!("{} samples, label counts {:?}", data.samples.len(), counts);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { common, resume } => cmd_train(common, resume.as_deref()),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Ablate { common } => cmd_experiment(common, ExperimentSpec::ablation),
        Command::SweepSlots { common, values } => cmd_experiment(common, |base| {
            let mut spec = ExperimentSpec::slot_sweep(base);
            if let Some(v) = values {
                spec.axis = Axis::Slots(v.clone());
            }
            spec
        }),
        Command::SweepTimesteps { common, values } => cmd_experiment(common, |base| {
            let mut spec = ExperimentSpec::timestep_sweep(base);
            if let Some(v) = values {
                spec.axis = Axis::Timesteps(v.clone());
            }
            spec
        }),
        Command::SweepRatio { common, values } => cmd_experiment(common, |base| {
            let mut spec = ExperimentSpec::ratio_sweep(base);
            if let Some(v) = values {
                spec.axis = Axis::MissingRatio(v.clone());
            }
            spec
        }),
        Command::Gradcheck { common } => cmd_gradcheck(common),
        Command::GenData { common } => cmd_gen_data(common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
