//! Experiment grids on a tiny world.

use mavqa_core::config::RunConfig;
use mavqa_core::experiment::{
    eval_rng, parse_csv_report, render_report, run_ablation, run_missing_ratio_sweep, run_slot_sweep, run_timestep_sweep, train_cell,
    ExperimentSpec, Format,
};
use mavqa_core::model::ModelShape;
use mavqa_core::train::{evaluate, Arm, TrainConfig};
use mavqa_core::world::{make_dataset, Scenario, Split};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.samples = 120;
    cfg.seeds = vec![0, 1];
    cfg.train.epochs = 1;
    cfg.train.shape = ModelShape {
        slots: 4,
        eps_hidden: 16,
        head_hidden: 8,
    };
    cfg
}

#[test]
fn ablation_covers_the_grid_and_is_reproducible() {
    let spec = ExperimentSpec::ablation(tiny());
    let a = run_ablation(&spec).unwrap();
    assert_eq!(a.rows.len(), 4 * 2 * 2);
    let arms: Vec<&str> = a.rows.iter().map(|r| r.arm.as_str()).collect();
    for arm in Arm::ALL {
        assert_eq!(arms.iter().filter(|x| **x == arm.as_str()).count(), 4);
    }
    assert!(a.rows.iter().all(|r| r.axis_value == r.arm && r.config_hash == spec.base.hash()));
    let b = run_ablation(&spec).unwrap();
    for fmt in [Format::Csv, Format::Json] {
        assert_eq!(render_report(&a.rows, fmt).unwrap(), render_report(&b.rows, fmt).unwrap());
    }
    let csv = render_report(&a.rows, Format::Csv).unwrap();
    assert_eq!(parse_csv_report(&csv).unwrap(), a.rows);
}

#[test]
fn slot_sweep_rows_are_ordered() {
    let mut base = tiny();
    base.seeds = vec![3];
    let spec = ExperimentSpec::slot_sweep(base);
    let r = run_slot_sweep(&spec).unwrap();
    // (L, seed, scenario, arm) with two arms per cell.
    assert_eq!(r.rows.len(), 4 * 2 * 2);
    let keys: Vec<(String, String, String)> = r.rows.iter().map(|x| (x.axis_value.clone(), x.scenario.clone(), x.arm.clone())).collect();
    assert_eq!(keys[0], ("25".into(), "audio-missing".into(), "neither".into()));
    assert_eq!(keys[1], ("25".into(), "audio-missing".into(), "rmm+avr".into()));
    assert_eq!(keys[15], ("100".into(), "visual-missing".into(), "rmm+avr".into()));
}

#[test]
fn ratio_sweep_zero_matches_complete_accuracy() {
    let mut base = tiny();
    base.seeds = vec![5];
    let spec = ExperimentSpec::ratio_sweep(base.clone());
    let r = run_missing_ratio_sweep(&spec).unwrap();
    assert_eq!(r.rows.len(), 5 * 2 * 2);
    let ratios: Vec<f64> = r.rows.iter().map(|x| x.ratio).collect();
    assert!(ratios.windows(2).all(|w| w[0] <= w[1]));

    let run = base.with_seed(5);
    let data = make_dataset(run.samples, &run.world).unwrap();
    let (trainer, _) = train_cell(&TrainConfig { arm: Arm::Both, ..run.train.clone() }, &data).unwrap();
    let complete = evaluate(&trainer.models, &trainer.config, data.split(Split::Test), Scenario::Complete, 1.0, &mut eval_rng(5, Scenario::Complete)).unwrap();
    for row in r.rows.iter().filter(|x| x.ratio == 0.0 && x.arm == "rmm+avr") {
        assert_eq!(row.accuracy, complete.accuracy);
    }
}

#[test]
fn longer_chains_take_longer() {
    let mut base = tiny();
    base.samples = 300;
    base.seeds = vec![0];
    base.train.shape.eps_hidden = 96;
    let spec = ExperimentSpec::timestep_sweep(base);
    let r = run_timestep_sweep(&spec).unwrap();
    assert_eq!(r.rows.len(), 3 * 2 * 2);
    let secs: Vec<f64> = r.timings.iter().filter(|t| t.cell.ends_with("arm=rmm+avr")).map(|t| t.seconds).collect();
    assert_eq!(secs.len(), 3);
    assert!(secs[0] < secs[1] && secs[1] < secs[2], "{secs:?}");
}
