//! Experiment grids and their reports.
//!
//! A grid is a set of cells, one per (axis value, seed, arm). Each cell
//! trains from scratch on the seed's dataset and is scored on the test
//! split. Cells are independent and run through [`crate::par`]; rows are
//! assembled afterwards in (axis value, seed, scenario, arm) order, so the
//! report bytes do not depend on scheduling. Wall times go to a separate
//! timing list because they are not reproducible.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::feature::Rng;
use crate::par;
use crate::train::{evaluate, Arm, EpochLosses, EvalMetrics, TrainConfig, Trainer};
use crate::world::{make_dataset, Dataset, Scenario, Split};

/// The two scenarios every grid reports.
pub const MISSING_SCENARIOS: [Scenario; 2] = [Scenario::AudioMissing, Scenario::VisualMissing];

pub const DEFAULT_SLOTS: [usize; 4] = [25, 50, 75, 100];
pub const DEFAULT_TIMESTEPS: [usize; 3] = [5, 10, 20];
pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// What varies across a grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    Components(Vec<Arm>),
    Slots(Vec<usize>),
    Timesteps(Vec<usize>),
    MissingRatio(Vec<f64>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Components(_) => "components",
            Axis::Slots(_) => "slots",
            Axis::Timesteps(_) => "timesteps",
            Axis::MissingRatio(_) => "missing_ratio",
        }
    }

    fn len(&self) -> usize {
        match self {
            Axis::Components(v) => v.len(),
            Axis::Slots(v) => v.len(),
            Axis::Timesteps(v) => v.len(),
            Axis::MissingRatio(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: RunConfig,
    pub axis: Axis,
}

impl ExperimentSpec {
    pub fn ablation(base: RunConfig) -> Self {
        Self {
            name: "ablation".into(),
            base,
            axis: Axis::Components(Arm::ALL.to_vec()),
        }
    }

    pub fn slot_sweep(base: RunConfig) -> Self {
        Self {
            name: "sweep-slots".into(),
            base,
            axis: Axis::Slots(DEFAULT_SLOTS.to_vec()),
        }
    }

    pub fn timestep_sweep(base: RunConfig) -> Self {
        Self {
            name: "sweep-timesteps".into(),
            base,
            axis: Axis::Timesteps(DEFAULT_TIMESTEPS.to_vec()),
        }
    }

    pub fn ratio_sweep(base: RunConfig) -> Self {
        Self {
            name: "sweep-ratio".into(),
            base,
            axis: Axis::MissingRatio(DEFAULT_RATIOS.to_vec()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.axis.len() == 0 {
            return Err(Error::Config("axis values must not be empty".into()));
        }
        match &self.axis {
            Axis::Components(arms) => {
                let mut sorted = arms.clone();
                sorted.sort();
                if sorted != Arm::ALL {
                    return Err(Error::Config("ablation must run all four component configurations exactly once".into()));
                }
            }
            Axis::Slots(v) if v.contains(&0) => return Err(Error::Config("slot counts must be positive".into())),
            Axis::Timesteps(v) if v.contains(&0) => return Err(Error::Config("timestep counts must be positive".into())),
            Axis::MissingRatio(v) if v.iter().any(|r| !(0.0..=1.0).contains(r)) => {
                return Err(Error::Config("missing ratios must lie in [0, 1]".into()))
            }
            _ => {}
        }
        for (i, a) in self.axis_labels().iter().enumerate() {
            if self.axis_labels()[..i].contains(a) {
                return Err(Error::Config(format!("duplicate axis value {a}")));
            }
        }
        Ok(())
    }

    fn axis_labels(&self) -> Vec<String> {
        match &self.axis {
            Axis::Components(v) => v.iter().map(|a| a.as_str().to_string()).collect(),
            Axis::Slots(v) | Axis::Timesteps(v) => v.iter().map(|x| x.to_string()).collect(),
            Axis::MissingRatio(v) => v.iter().map(|x| x.to_string()).collect(),
        }
    }
}

/// One line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub axis: String,
    pub axis_value: String,
    pub arm: String,
    pub seed: u64,
    pub scenario: String,
    pub ratio: f64,
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated split.
    pub per_class: Vec<Option<f64>>,
    pub pseudo_mse_a: f64,
    pub pseudo_mse_v: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub cell: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub timings: Vec<Timing>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::InvalidArgument(format!("unknown format '{s}'"))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Rng for the evaluation masks of one (seed, scenario). Shared by every
/// arm and ratio so that comparisons see the same draws.
pub fn eval_rng(seed: u64, scenario: Scenario) -> Rng {
    let tag = match scenario {
        Scenario::AudioMissing => 1,
        Scenario::VisualMissing => 2,
        Scenario::Complete => 3,
    };
    Rng::new(seed ^ (0x6576_616c_0000_0000 | tag))
}

/// Trains one arm to completion.
pub fn train_cell(train: &TrainConfig, data: &Dataset) -> Result<(Trainer, Vec<EpochLosses>)> {
    let mut trainer = Trainer::new(train.clone(), data.dims)?;
    let losses = trainer.fit(data.split(Split::Train), |_, _| Ok(()))?;
    Ok((trainer, losses))
}

/// Per-epoch metrics line written by the `train` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub scenario: String,
    pub ratio: f64,
    pub accuracy: f64,
    pub l_avqa: f64,
    pub l_rmmr: f64,
    pub l_ave: f64,
    pub pseudo_mse_a: f64,
    pub pseudo_mse_v: f64,
}

/// Scenarios logged after every training epoch.
pub const METRIC_SCENARIOS: [Scenario; 3] = [Scenario::AudioMissing, Scenario::VisualMissing, Scenario::Complete];

/// Metrics rows for one finished epoch, scored on the validation split.
pub fn epoch_metrics(run_id: &str, trainer: &Trainer, losses: &EpochLosses, data: &Dataset, ratio: f64) -> Result<Vec<MetricsRow>> {
    METRIC_SCENARIOS
        .iter()
        .map(|&sc| {
            let m = evaluate(&trainer.models, &trainer.config, data.split(Split::Val), sc, ratio, &mut eval_rng(trainer.config.seed, sc))?;
            Ok(MetricsRow {
                run_id: run_id.to_string(),
                epoch: losses.epoch,
                scenario: sc.as_str().to_string(),
                ratio,
                accuracy: m.accuracy,
                l_avqa: losses.l_avqa,
                l_rmmr: losses.l_rmmr,
                l_ave: losses.l_ave,
                pseudo_mse_a: m.pseudo_mse_a,
                pseudo_mse_v: m.pseudo_mse_v,
            })
        })
        .collect()
}

fn row(spec: &ExperimentSpec, hash: &str, axis_value: String, arm: Arm, seed: u64, scenario: Scenario, ratio: f64, m: &EvalMetrics) -> ReportRow {
    ReportRow {
        experiment: spec.name.clone(),
        axis: spec.axis.name().to_string(),
        axis_value,
        arm: arm.as_str().to_string(),
        seed,
        scenario: scenario.as_str().to_string(),
        ratio,
        accuracy: m.accuracy,
        per_class: m.per_class.iter().map(|a| (!a.is_nan()).then_some(*a)).collect(),
        pseudo_mse_a: m.pseudo_mse_a,
        pseudo_mse_v: m.pseudo_mse_v,
        config_hash: hash.to_string(),
    }
}

struct Cell {
    axis_index: usize,
    axis_value: String,
    seed_index: usize,
    seed: u64,
    arm: Arm,
    train: TrainConfig,
}

struct CellOutput {
    rows: Vec<ReportRow>,
    seconds: f64,
}

/// Runs every cell of `spec` and assembles the report.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let hash = spec.base.hash();
    let seeds = &spec.base.seeds;
    let datasets = par::map(seeds, |&s| make_dataset(spec.base.samples, &spec.base.with_seed(s).world))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    // Arms trained per axis value; sweeps add the zero-fill baseline.
    let labels = spec.axis_labels();
    let mut cells = Vec::new();
    for (ai, label) in labels.iter().enumerate() {
        for (si, &seed) in seeds.iter().enumerate() {
            let base = spec.base.with_seed(seed).train;
            let variants: Vec<(Arm, TrainConfig)> = match &spec.axis {
                Axis::Components(arms) => vec![(arms[ai], TrainConfig { arm: arms[ai], ..base })],
                Axis::Slots(v) => {
                    let mut t = base;
                    t.shape.slots = v[ai];
                    [Arm::Neither, Arm::Both].map(|arm| (arm, TrainConfig { arm, ..t.clone() })).to_vec()
                }
                Axis::Timesteps(v) => {
                    let t = TrainConfig {
                        timesteps: v[ai],
                        enhance_entry_t: v[ai],
                        ..base
                    };
                    [Arm::Neither, Arm::Both].map(|arm| (arm, TrainConfig { arm, ..t.clone() })).to_vec()
                }
                // Training does not depend on the ratio; cells are shared below.
                Axis::MissingRatio(_) if ai == 0 => [Arm::Neither, Arm::Both].map(|arm| (arm, TrainConfig { arm, ..base.clone() })).to_vec(),
                Axis::MissingRatio(_) => Vec::new(),
            };
            for (arm, train) in variants {
                train.validate()?;
                cells.push(Cell {
                    axis_index: ai,
                    axis_value: label.clone(),
                    seed_index: si,
                    seed,
                    arm,
                    train,
                });
            }
        }
    }

    let ratios: Vec<(String, f64)> = match &spec.axis {
        Axis::MissingRatio(v) => labels.iter().cloned().zip(v.iter().copied()).collect(),
        _ => Vec::new(),
    };
    let outputs = par::map(&cells, |cell| -> Result<CellOutput> {
        let start = Instant::now();
        let data = &datasets[cell.seed_index];
        let (trainer, _) = train_cell(&cell.train, data)?;
        let test = data.split(Split::Test);
        let mut rows = Vec::new();
        let grid: Vec<(String, f64)> = if ratios.is_empty() {
            vec![(cell.axis_value.clone(), spec.base.eval_ratio)]
        } else {
            ratios.clone()
        };
        for (label, ratio) in grid {
            for sc in MISSING_SCENARIOS {
                let m = evaluate(&trainer.models, &trainer.config, test, sc, ratio, &mut eval_rng(cell.seed, sc))?;
                rows.push(row(spec, &hash, label.clone(), cell.arm, cell.seed, sc, ratio, &m));
            }
        }
        Ok(CellOutput {
            rows,
            seconds: start.elapsed().as_secs_f64(),
        })
    });

    let mut keyed = Vec::new();
    let mut timings = Vec::new();
    for (cell, out) in cells.iter().zip(outputs) {
        let out = out?;
        timings.push(Timing {
            cell: format!("{}={} seed={} arm={}", spec.axis.name(), cell.axis_value, cell.seed, cell.arm.as_str()),
            seconds: out.seconds,
        });
        for r in out.rows {
            let ai = if ratios.is_empty() {
                cell.axis_index
            } else {
                labels.iter().position(|l| *l == r.axis_value).expect("known ratio label")
            };
            let sc = MISSING_SCENARIOS.iter().position(|s| s.as_str() == r.scenario).expect("known scenario");
            keyed.push(((ai, cell.seed_index, sc, cell.arm), r));
        }
    }
    keyed.sort_by_key(|k| k.0);
    Ok(Report {
        rows: keyed.into_iter().map(|(_, r)| r).collect(),
        timings,
    })
}

pub fn run_ablation(spec: &ExperimentSpec) -> Result<Report> {
    expect_axis(spec, matches!(spec.axis, Axis::Components(_)))?;
    run_experiment(spec)
}

pub fn run_slot_sweep(spec: &ExperimentSpec) -> Result<Report> {
    expect_axis(spec, matches!(spec.axis, Axis::Slots(_)))?;
    run_experiment(spec)
}

pub fn run_timestep_sweep(spec: &ExperimentSpec) -> Result<Report> {
    expect_axis(spec, matches!(spec.axis, Axis::Timesteps(_)))?;
    run_experiment(spec)
}

pub fn run_missing_ratio_sweep(spec: &ExperimentSpec) -> Result<Report> {
    expect_axis(spec, matches!(spec.axis, Axis::MissingRatio(_)))?;
    run_experiment(spec)
}

fn expect_axis(spec: &ExperimentSpec, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("experiment '{}' has the wrong axis ({})", spec.name, spec.axis.name())))
    }
}

fn csv_header(classes: usize) -> Vec<String> {
    let mut h: Vec<String> = ["experiment", "axis", "axis_value", "arm", "seed", "scenario", "ratio", "accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..classes).map(|k| format!("acc_class_{k}")));
    h.extend(["pseudo_mse_a", "pseudo_mse_v", "config_hash"].iter().map(|s| s.to_string()));
    h
}

/// Serializes rows. Column order is fixed; per-class accuracies expand to
/// `acc_class_<k>` columns in CSV.
pub fn render_report(rows: &[ReportRow], format: Format) -> Result<Vec<u8>> {
    let first = rows.first().ok_or(Error::EmptyReport)?;
    let classes = first.per_class.len();
    if rows.iter().any(|r| r.per_class.len() != classes) {
        return Err(Error::InvalidArgument("rows disagree on class count".into()));
    }
    if let Some(r) = rows.iter().find(|r| !(0.0..=1.0).contains(&r.accuracy)) {
        return Err(Error::InvalidArgument(format!("accuracy {} outside [0, 1]", r.accuracy)));
    }
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(csv_header(classes))?;
            for r in rows {
                let mut rec = vec![
                    r.experiment.clone(),
                    r.axis.clone(),
                    r.axis_value.clone(),
                    r.arm.clone(),
                    r.seed.to_string(),
                    r.scenario.clone(),
                    r.ratio.to_string(),
                    r.accuracy.to_string(),
                ];
                rec.extend(r.per_class.iter().map(|a| a.map(|v| v.to_string()).unwrap_or_default()));
                rec.extend([r.pseudo_mse_a.to_string(), r.pseudo_mse_v.to_string(), r.config_hash.clone()]);
                w.write_record(rec)?;
            }
            w.into_inner().map_err(|e| Error::Io(e.into_error()))
        }
        Format::Json => {
            let mut out = serde_json::to_vec_pretty(rows)?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

/// Parses a CSV report produced by [`render_report`].
pub fn parse_csv_report(bytes: &[u8]) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    let classes = header.iter().filter(|h| h.starts_with("acc_class_")).count();
    if header.iter().collect::<Vec<_>>() != csv_header(classes) {
        return Err(Error::Format("unexpected report header".into()));
    }
    let f = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number '{s}'")));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        rows.push(ReportRow {
            experiment: get(0).into(),
            axis: get(1).into(),
            axis_value: get(2).into(),
            arm: get(3).into(),
            seed: get(4).parse().map_err(|_| Error::Format("bad seed".into()))?,
            scenario: get(5).into(),
            ratio: f(get(6))?,
            accuracy: f(get(7))?,
            per_class: (0..classes)
                .map(|k| match get(8 + k) {
                    "" => Ok(None),
                    v => f(v).map(Some),
                })
                .collect::<Result<_>>()?,
            pseudo_mse_a: f(get(8 + classes))?,
            pseudo_mse_v: f(get(9 + classes))?,
            config_hash: get(10 + classes).into(),
        });
    }
    Ok(rows)
}

/// Writes rows to `path`.
pub fn emit_report(rows: &[ReportRow], format: Format, path: &Path) -> Result<()> {
    let bytes = render_report(rows, format)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// CSV bytes for per-epoch metrics.
pub fn render_metrics(rows: &[MetricsRow], format: Format) -> Result<Vec<u8>> {
    if rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r)?;
            }
            w.into_inner().map_err(|e| Error::Io(e.into_error()))
        }
        Format::Json => {
            let mut out = serde_json::to_vec_pretty(rows)?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

pub fn render_timings(timings: &[Timing]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cell", "seconds"])?;
    for t in timings {
        w.write_record([t.cell.clone(), t.seconds.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row(acc: f64) -> ReportRow {
        ReportRow {
            experiment: "ablation".into(),
            axis: "components".into(),
            axis_value: "rmm+avr".into(),
            arm: "rmm+avr".into(),
            seed: 3,
            scenario: "audio-missing".into(),
            ratio: 1.0,
            accuracy: acc,
            per_class: vec![Some(0.5), None, Some(1.0)],
            pseudo_mse_a: 0.125,
            pseudo_mse_v: 1.0 / 3.0,
            config_hash: "0123456789ab".into(),
        }
    }

    #[test]
    fn one_row_is_two_lines() {
        let bytes = render_report(&[sample_row(0.5)], Format::Csv).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("experiment,axis,axis_value,arm,seed,scenario,ratio,accuracy,acc_class_0"));
    }

    #[test]
    fn csv_round_trip_and_json_agree() {
        let rows = vec![sample_row(0.5), sample_row(0.75)];
        let csv = render_report(&rows, Format::Csv).unwrap();
        let parsed = parse_csv_report(&csv).unwrap();
        assert_eq!(parsed, rows);
        assert_eq!(render_report(&parsed, Format::Csv).unwrap(), csv);
        let json: Vec<ReportRow> = serde_json::from_slice(&render_report(&rows, Format::Json).unwrap()).unwrap();
        assert_eq!(json, parsed);
    }

    #[test]
    fn empty_and_invalid_rows() {
        assert!(matches!(render_report(&[], Format::Csv), Err(Error::EmptyReport)));
        assert!(render_report(&[sample_row(1.5)], Format::Json).is_err());
    }

    #[test]
    fn partial_ablation_rejected() {
        let mut spec = ExperimentSpec::ablation(RunConfig::default());
        assert!(spec.validate().is_ok());
        spec.axis = Axis::Components(vec![Arm::Both, Arm::Neither]);
        assert!(spec.validate().is_err());
        spec.axis = Axis::Components(vec![Arm::Both, Arm::Neither, Arm::RmmOnly, Arm::RmmOnly]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn default_axes() {
        let base = RunConfig::default();
        assert_eq!(ExperimentSpec::slot_sweep(base.clone()).axis, Axis::Slots(vec![25, 50, 75, 100]));
        assert_eq!(ExperimentSpec::timestep_sweep(base.clone()).axis, Axis::Timesteps(vec![5, 10, 20]));
        assert_eq!(ExperimentSpec::ratio_sweep(base).axis, Axis::MissingRatio(vec![0.0, 0.25, 0.5, 0.75, 1.0]));
    }

    #[test]
    fn wrong_axis_is_rejected() {
        let spec = ExperimentSpec::slot_sweep(RunConfig::default());
        assert!(run_ablation(&spec).is_err());
    }
}
