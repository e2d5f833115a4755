use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgf::causal::pcmci;
use cgf::fuzzy::{fit_partitions, fuzzify, RuleMidpoint};
use cgf::harness::{self, load_series, resolve_vocab, run_job, DataSource, ExperimentConfig, HarnessError, WindowFit};
use cgf::metrics::NrmseForm;
use cgf::series::{make_windows, max_window_fraction, SeriesError};
use cgf::textgen::{build_corpus, Mode, RenderMode};
use cgf::tokenizer::count_metrics;

#[derive(Parser)]
#[command(name = "cgf", version, about = "Fuzzy-causal text forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Discover a lagged causal graph over the whole series.
    Discover(Opts),
    /// Fit fuzzy partitions and write the label sequences.
    Fuzzify(Opts),
    /// Render and tokenize the per-window text corpora of one mode.
    Render(Opts),
    /// Train one configuration on one window and save the model.
    Train(Opts),
    /// Run one configuration over all windows.
    Evaluate(Opts),
    /// Run every mode with and without freezing over all windows.
    Ablate(Opts),
}

#[derive(Args, Clone, Default)]
struct Opts {
    /// TOML or JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV file with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Name of the column to forecast.
    #[arg(long)]
    target: Option<String>,
    /// Columns to ignore (repeatable).
    #[arg(long = "skip-column")]
    skip_columns: Vec<String>,
    /// cgf, cg or raw; `ablate` runs all unless given
    #[arg(long)]
    mode: Option<Mode>,
    /// Train only the pooling query and the head.
    #[arg(long)]
    freeze: bool,
    /// [default: 20]
    #[arg(long)]
    tau_max: Option<usize>,
    /// [default: 0.1]
    #[arg(long)]
    alpha_pc: Option<f64>,
    /// Fuzzy sets per variable [default: 30]
    #[arg(long)]
    partitions: Option<usize>,
    /// [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    windows: Option<usize>,
    /// Window length as a fraction of the series [default: 0.3]
    #[arg(long)]
    window_fraction: Option<f64>,
    /// Fraction of each window shared with the next [default: 0.3]
    #[arg(long)]
    overlap: Option<f64>,
    /// Window used by `train`
    #[arg(long, default_value_t = 0)]
    window: usize,
    /// Root seed of every stochastic step [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "cgf-out")]
    out: PathBuf,
    /// GPT-2 vocab.json
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// GPT-2 merges.txt
    #[arg(long)]
    merges: Option<PathBuf>,
    /// Sum consequent centers instead of averaging them in the fuzzy rule baseline.
    #[arg(long)]
    eq1_literal: bool,
    /// Divide the squared error sum by the number of test points.
    #[arg(long)]
    nrmse_mean: bool,
}

impl Opts {
    fn experiment(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        match (&self.data, &self.target) {
            (Some(path), Some(target)) => {
                c.data = Some(DataSource::Csv {
                    path: path.clone(),
                    target: target.clone(),
                    skip_columns: self.skip_columns.clone(),
                })
            }
            (Some(path), None) => match &c.data {
                Some(DataSource::Csv { target, .. }) => {
                    c.data = Some(DataSource::Csv {
                        path: path.clone(),
                        target: target.clone(),
                        skip_columns: self.skip_columns.clone(),
                    })
                }
                _ => return Err(HarnessError::Config("--data needs --target".into())),
            },
            (None, Some(target)) => match &mut c.data {
                Some(DataSource::Csv { target: t, .. }) => *t = target.clone(),
                _ => return Err(HarnessError::Config("--target needs --data".into())),
            },
            (None, None) => {}
        }
        if let Some(v) = self.tau_max {
            c.tau_max = v;
        }
        if let Some(v) = self.alpha_pc {
            c.alpha_pc = v;
        }
        if let Some(v) = self.partitions {
            c.partitions = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.windows {
            c.windows.count = v;
        }
        if let Some(v) = self.window_fraction {
            c.windows.fraction = v;
        }
        if let Some(v) = self.overlap {
            c.windows.overlap = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.vocab.is_some() || self.merges.is_some() {
            c.vocab = self.vocab.clone();
            c.merges = self.merges.clone();
        }
        if self.eq1_literal {
            c.rule_midpoint = RuleMidpoint::Sum;
        }
        if self.nrmse_mean {
            c.nrmse = NrmseForm::Mean;
        }
        Ok(c)
    }

    /// Mode of single-configuration commands.
    fn single_mode(&self, c: &ExperimentConfig) -> Mode {
        self.mode.or_else(|| c.modes.first().copied()).unwrap_or(Mode::Cgf)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_out(out: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out).map_err(|source| HarnessError::Io {
        path: out.to_path_buf(),
        source,
    })
}

fn discover(o: &Opts) -> Result<ExitCode, HarnessError> {
    let c = o.experiment()?;
    let series = load_series(&c)?;
    let graph = pcmci(&series, &c.pcmci())?;
    create_out(&o.out)?;
    write(&o.out.join("graph.json"), graph.to_json())?;
    write(&o.out.join("graph.dot"), graph.to_dot(Some(series.names())))?;
    let names = series.names();
    for l in &graph.links {
        println!(
            "{}(t-{}) -> {}  stat={:.4} p={:.3e}",
            names[l.source], l.lag, names[l.target], l.statistic, l.p_value
        );
    }
    println!("{} links", graph.links.len());
    Ok(ExitCode::SUCCESS)
}

fn fuzzify_cmd(o: &Opts) -> Result<ExitCode, HarnessError> {
    let c = o.experiment()?;
    let series = load_series(&c)?;
    let parts = fit_partitions(&series, c.partitions, c.universe_margin)?;
    let fuzzy = fuzzify(&series, &parts)?;
    create_out(&o.out)?;
    write(
        &o.out.join("partitions.json"),
        serde_json::to_string_pretty(&parts).expect("partitions serialize"),
    )?;
    let mut csv = series.names().join(",");
    csv.push('\n');
    for t in 0..series.len() {
        let row: Vec<String> = fuzzy.iter().map(|f| f.label(t)).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write(&o.out.join("labels.csv"), csv)?;
    println!(
        "{} variables x {} sets, {} rows",
        parts.len(),
        c.partitions,
        series.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn render(o: &Opts) -> Result<ExitCode, HarnessError> {
    let c = o.experiment()?;
    let mode = o.single_mode(&c);
    let series = load_series(&c)?;
    let vocab = resolve_vocab(&c)?;
    create_out(&o.out)?;
    for w in make_windows(&series, &c.windows)? {
        let fit = WindowFit::fit(&w, &c)?;
        let (train, test) = build_corpus(&w, RenderMode::new(mode, c.precision), &fit.inputs(c.tau_max))?;
        let m = count_metrics(&train, &test, &vocab);
        for (name, corpus) in [("train", &train), ("test", &test)] {
            let mut buf = Vec::new();
            corpus.write_tsv(&mut buf).expect("writing to memory");
            write(&o.out.join(format!("w{}_{name}.tsv", w.window_id)), buf)?;
        }
        println!(
            "window {}: {} train / {} test records, {} tokens",
            w.window_id,
            train.len(),
            test.len(),
            m.total_tokens
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn train(o: &Opts) -> Result<ExitCode, HarnessError> {
    let c = o.experiment()?;
    let mode = o.single_mode(&c);
    let series = load_series(&c)?;
    let vocab = resolve_vocab(&c)?;
    let windows = make_windows(&series, &c.windows)?;
    let w = windows
        .get(o.window)
        .ok_or_else(|| HarnessError::Config(format!("window {} out of range", o.window)))?;
    let fit = WindowFit::fit(w, &c)?;
    let job = run_job(w, &fit, mode, o.freeze, &c, &vocab)?;
    create_out(&o.out)?;
    job.model.save(o.out.join("model.cgfm"))?;
    write(
        &o.out.join("trace.json"),
        serde_json::to_string_pretty(&job.trace).expect("trace serializes"),
    )?;
    let mut csv = String::from("t,actual,predicted\n");
    for (t, a, p) in &job.predictions {
        csv.push_str(&format!("{t},{a},{p}\n"));
    }
    write(&o.out.join("predictions.csv"), csv)?;
    println!(
        "{} window {}: loss {:.4} -> {:.4}, test NRMSE {:.4}",
        harness::config_name(mode, o.freeze),
        o.window,
        job.trace.initial_loss,
        job.trace.final_loss,
        job.nrmse
    );
    Ok(ExitCode::SUCCESS)
}

fn experiment(o: &Opts, full_grid: bool) -> Result<ExitCode, HarnessError> {
    let mut c = o.experiment()?;
    if full_grid {
        if let Some(m) = o.mode {
            c.modes = vec![m];
        }
        if o.freeze {
            c.freezing = vec![true];
        }
    } else {
        c.modes = vec![o.single_mode(&c)];
        c.freezing = vec![o.freeze];
    }
    let report = harness::run_experiment(&c, &o.out)?;
    print!("{}", harness::summary_markdown(&report));
    for r in report.reports.iter().filter(|r| r.error.is_some()) {
        eprintln!("{} failed: {}", r.name(), r.error.as_deref().unwrap_or_default());
    }
    Ok(if report.any_failed() {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (o, result) = match &cli.command {
        Command::Discover(o) => (o, discover(o)),
        Command::Fuzzify(o) => (o, fuzzify_cmd(o)),
        Command::Render(o) => (o, render(o)),
        Command::Train(o) => (o, train(o)),
        Command::Evaluate(o) => (o, experiment(o, false)),
        Command::Ablate(o) => (o, experiment(o, true)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            if let HarnessError::Series(SeriesError::InfeasibleWindowing { count, .. }) = e {
                if let Ok(c) = o.experiment() {
                    eprintln!(
                        "hint: {count} windows with overlap {} fit only with --window-fraction <= {:.4}",
                        c.windows.overlap,
                        max_window_fraction(count, c.windows.overlap)
                    );
                }
            }
            ExitCode::from(1)
        }
    }
}
