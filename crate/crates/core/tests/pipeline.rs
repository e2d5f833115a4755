//! Window fitting, rendering, training and scoring wired together on a
//! small synthetic series.

use std::collections::BTreeSet;

use cgf::causal::pcmci;
use cgf::harness::{
    load_series, run_experiment, run_job, DataSource, ExperimentConfig, ModelShape, TrainShape, WindowFit,
};
use cgf::metrics::nrmse;
use cgf::model::SequenceRegressor;
use cgf::series::{make_windows, WindowSpec};
use cgf::synth::{generate_var, strong_signal};
use cgf::textgen::{build_corpus, full_grid, Mode, RenderMode, Slot};
use cgf::tokenizer::BpeVocab;

fn config() -> ExperimentConfig {
    ExperimentConfig {
        data: Some(DataSource::Var(strong_signal(1200, 4))),
        tau_max: 3,
        partitions: 12,
        windows: WindowSpec {
            count: 3,
            fraction: 0.3,
            overlap: 0.3,
            test_fraction: 0.2,
        },
        model: ModelShape {
            embed_dim: 16,
            num_heads: 2,
            num_blocks: 1,
            mlp_hidden: 16,
            max_sequence_length: 96,
        },
        train: TrainShape {
            epochs: 4,
            ..TrainShape::default()
        },
        seed: 5,
        ..ExperimentConfig::default()
    }
}

#[test]
fn planted_drivers_are_found() {
    let (series, _) = generate_var(&strong_signal(3000, 1)).unwrap();
    let graph = pcmci(
        &series,
        &cgf::causal::PcmciConfig {
            tau_max: 3,
            alpha_pc: 0.05,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(graph.contains(1, 1, 0), "drive_a at lag 1");
    assert!(graph.contains(2, 2, 0), "drive_b at lag 2");
    assert!(graph.contains(1, 1, 1) && graph.contains(2, 1, 2));
}

#[test]
fn corpora_share_records_and_respect_slots() {
    let cfg = config();
    let series = load_series(&cfg).unwrap();
    for w in make_windows(&series, &cfg.windows).unwrap() {
        let fit = WindowFit::fit(&w, &cfg).unwrap();
        let parents: BTreeSet<Slot> = fit
            .graph
            .parents_of(0)
            .iter()
            .map(|l| Slot {
                lag: l.lag,
                variable: l.source,
            })
            .collect();
        let grid: BTreeSet<Slot> = full_grid(series.num_columns(), cfg.tau_max).into_iter().collect();
        let render = |mode| build_corpus(&w, RenderMode::new(mode, 3), &fit.inputs(cfg.tau_max)).unwrap();
        let (cgf_train, cgf_test) = render(Mode::Cgf);
        let (cg_train, cg_test) = render(Mode::Cg);
        let (raw_train, raw_test) = render(Mode::Raw);
        assert_eq!(cgf_train.len(), raw_train.len());
        assert_eq!(cg_test.len(), w.test.len());
        assert_eq!(cgf_test.len(), raw_test.len());

        for (cg, raw) in cg_train.records.iter().zip(&raw_train.records) {
            assert_eq!(cg.t, raw.t);
            assert_eq!(cg.target, raw.target);
            assert!(cg.text.chars().count() <= raw.text.chars().count());
            assert!(raw.slots.iter().all(|s| grid.contains(s)));
            assert!(cg.slots.iter().all(|s| s.lag >= 1 && s.lag <= cfg.tau_max));
            if !parents.is_empty() {
                assert!(cg.slots.iter().all(|s| parents.contains(s)));
            }
        }
        for r in &cgf_train.records {
            assert!(r.text.ends_with(" ->"));
            assert!(!r.text.contains('\t'));
        }
    }
}

#[test]
fn trained_job_scores_and_checkpoints() {
    let cfg = config();
    let series = load_series(&cfg).unwrap();
    let windows = make_windows(&series, &cfg.windows).unwrap();
    let fit = WindowFit::fit(&windows[0], &cfg).unwrap();
    let job = run_job(&windows[0], &fit, Mode::Cgf, false, &cfg, &BpeVocab::tiny()).unwrap();
    assert!(job.trace.final_loss < job.trace.initial_loss);
    assert_eq!(job.predictions.len(), windows[0].test.len());
    let (actual, predicted): (Vec<f64>, Vec<f64>) = job.predictions.iter().map(|&(_, a, p)| (a, p)).unzip();
    assert_eq!(nrmse(&actual, &predicted).unwrap(), job.nrmse);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cgfm");
    job.model.save(&path).unwrap();
    let back = SequenceRegressor::load(&path).unwrap();
    assert_eq!(back.checksum(), job.model_checksum);
}

#[test]
fn experiment_writes_reproducible_outputs() {
    let mut cfg = config();
    cfg.modes = vec![Mode::Cgf, Mode::Cg];
    cfg.freezing = vec![true];
    cfg.train.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(report.reports.len(), 2);
    assert!(!report.any_failed());
    assert_eq!(report.windows.len(), 3);

    let csv = std::fs::read_to_string(dir.path().join("cgf-freeze/predictions.csv")).unwrap();
    let test_rows: usize = report.windows.iter().map(|w| w.test_len).sum();
    assert_eq!(csv.lines().count(), test_rows + 1);
    let seeds = std::fs::read_to_string(dir.path().join("cg-freeze/seed.txt")).unwrap();
    assert!(seeds.starts_with("root\t5\n"));

    let again = tempfile::tempdir().unwrap();
    run_experiment(&cfg, again.path()).unwrap();
    for f in ["report.json", "report.csv", "summary.md", "cgf-freeze/predictions.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}
