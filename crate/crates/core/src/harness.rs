//! Windowed ablation runs over {CGF, CG, RAW} x {freezing, no freezing}.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::causal::{pcmci, CausalError, CausalGraph, PcmciConfig};
use crate::fuzzy::{fit_partitions, ChenModel, FuzzyError, LinguisticVariable, RuleMidpoint};
use crate::metrics::{mean_std, nrmse_with, MetricError, NrmseForm};
use crate::model::{ModelConfig, ModelError, SequenceRegressor, TrainConfig, TrainTrace};
use crate::series::{
    load_csv, make_windows, CsvOptions, MultivariateSeries, SeriesError, Standardizer, WindowSpec, WindowSplit,
};
use crate::synth::{generate_var, SynthError, VarSpec};
use crate::textgen::{build_corpus, CorpusInputs, Mode, PatternCorpus, RenderMode, TextError};
use crate::tokenizer::{count_metrics, BpeVocab, TokenMetrics, TokenizerError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Fuzzy(#[from] FuzzyError),
    #[error(transparent)]
    Causal(#[from] CausalError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default)]
        skip_columns: Vec<String>,
    },
    Var(VarSpec),
}

/// Transformer shape shared by every configuration. The vocabulary size
/// comes from the training corpus of each job.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_hidden: usize,
    pub max_sequence_length: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            embed_dim: d.embed_dim,
            num_heads: d.num_heads,
            num_blocks: d.num_blocks,
            mlp_hidden: d.mlp_hidden,
            max_sequence_length: d.max_sequence_length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainShape {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainShape {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: Option<DataSource>,
    pub modes: Vec<Mode>,
    pub freezing: Vec<bool>,
    pub tau_max: usize,
    pub alpha_pc: f64,
    pub alpha_mci: Option<f64>,
    pub partitions: usize,
    /// Universe padding on each side, as a fraction of the training range.
    pub universe_margin: f64,
    /// Significant digits of numeric slots.
    pub precision: usize,
    pub windows: WindowSpec,
    pub model: ModelShape,
    pub train: TrainShape,
    pub seed: u64,
    pub nrmse: NrmseForm,
    /// Rule center used by the fuzzy baseline forecaster.
    pub rule_midpoint: RuleMidpoint,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: None,
            modes: Mode::ALL.to_vec(),
            freezing: vec![false, true],
            tau_max: 20,
            alpha_pc: 0.1,
            alpha_mci: None,
            partitions: 30,
            universe_margin: 0.1,
            precision: 3,
            windows: WindowSpec::default(),
            model: ModelShape::default(),
            train: TrainShape::default(),
            seed: 0,
            nrmse: NrmseForm::Summed,
            rule_midpoint: RuleMidpoint::Mean,
            vocab: None,
            merges: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn pcmci(&self) -> PcmciConfig {
        PcmciConfig {
            tau_max: self.tau_max,
            alpha_pc: self.alpha_pc,
            alpha_mci: self.alpha_mci,
            target_only: None,
        }
    }

    pub fn configurations(&self) -> Vec<(Mode, bool)> {
        let mut out = Vec::new();
        for &m in &self.modes {
            for &f in &self.freezing {
                if !out.contains(&(m, f)) {
                    out.push((m, f));
                }
            }
        }
        out
    }
}

/// Loads or generates the series named by `config.data`.
pub fn load_series(config: &ExperimentConfig) -> Result<MultivariateSeries> {
    match &config.data {
        Some(DataSource::Csv {
            path,
            target,
            skip_columns,
        }) => {
            let load = load_csv(
                path,
                &CsvOptions {
                    target: target.clone(),
                    skip_columns: skip_columns.clone(),
                    tau_max: config.tau_max,
                },
            )?;
            if load.dropped_rows > 0 {
                log::warn!("dropped {} rows with missing or unparseable values", load.dropped_rows);
            }
            Ok(load.series)
        }
        Some(DataSource::Var(spec)) => Ok(generate_var(spec)?.0),
        None => Err(HarnessError::Config("no data source configured".into())),
    }
}

/// Directory holding `vocab.json` and `merges.txt` when no explicit paths
/// are configured: `$CGF_GPT2_DIR`, else `fixtures/gpt2` under the current
/// directory or any ancestor.
pub fn default_vocab_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("CGF_GPT2_DIR") {
        return Some(PathBuf::from(dir));
    }
    let mut here = std::env::current_dir().ok()?;
    loop {
        let candidate = here.join("fixtures").join("gpt2");
        if candidate.join("vocab.json").is_file() {
            return Some(candidate);
        }
        if !here.pop() {
            return None;
        }
    }
}

/// Explicit files, then the default GPT-2 location, then the bundled
/// 300-merge vocabulary.
pub fn resolve_vocab(config: &ExperimentConfig) -> Result<BpeVocab> {
    match (&config.vocab, &config.merges) {
        (Some(v), Some(m)) => return Ok(BpeVocab::load(v, m)?),
        (None, None) => {}
        _ => {
            return Err(HarnessError::Config(
                "--vocab and --merges must be given together".into(),
            ))
        }
    }
    if let Some(dir) = default_vocab_dir() {
        let (v, m) = (dir.join("vocab.json"), dir.join("merges.txt"));
        if v.is_file() && m.is_file() {
            return Ok(BpeVocab::load(v, m)?);
        }
    }
    log::warn!("GPT-2 vocabulary not found; using the bundled 300-merge vocabulary");
    Ok(BpeVocab::tiny())
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed of one (window, configuration) job. Each configuration owns a
/// stream keyed by its mode and freezing flag, so adding configurations
/// leaves existing streams alone.
pub fn job_seed(root: u64, window: usize, mode: Mode, freezing: bool) -> u64 {
    let code = (mode as u64) * 2 + freezing as u64;
    splitmix64(splitmix64(splitmix64(root) ^ window as u64) ^ code)
}

/// Everything fitted on one window's training segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFit {
    pub window_id: usize,
    pub standardizer: Standardizer,
    pub partitions: Vec<LinguisticVariable>,
    pub graph: CausalGraph,
}

impl WindowFit {
    pub fn fit(window: &WindowSplit, config: &ExperimentConfig) -> Result<Self> {
        let standardizer = Standardizer::fit(&window.train);
        let partitions = fit_partitions(&window.train, config.partitions, config.universe_margin)?;
        let graph = pcmci(&window.train, &config.pcmci())?;
        Ok(Self {
            window_id: window.window_id,
            standardizer,
            partitions,
            graph,
        })
    }

    pub fn partitions_checksum(&self) -> String {
        sha256_json(&self.partitions)
    }

    pub fn graph_checksum(&self) -> String {
        sha256_json(&self.graph)
    }

    pub fn standardizer_checksum(&self) -> String {
        sha256_json(&self.standardizer)
    }

    pub fn inputs(&self, tau_max: usize) -> CorpusInputs<'_> {
        CorpusInputs {
            graph: &self.graph,
            partitions: &self.partitions,
            standardizer: &self.standardizer,
            tau_max,
        }
    }
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Dense ids for the tokens of a training corpus plus one id for tokens
/// first seen at test time.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRemap {
    map: BTreeMap<u32, u32>,
}

impl TokenRemap {
    pub fn fit(train: &PatternCorpus) -> Self {
        let seen: BTreeSet<u32> = train.records.iter().flat_map(|r| r.tokens.iter().copied()).collect();
        Self {
            map: seen.into_iter().enumerate().map(|(i, t)| (t, i as u32)).collect(),
        }
    }

    pub fn oov(&self) -> u32 {
        self.map.len() as u32
    }

    pub fn vocab_size(&self) -> usize {
        self.map.len() + 1
    }

    pub fn apply(&self, corpus: &PatternCorpus) -> PatternCorpus {
        let mut out = corpus.clone();
        for r in &mut out.records {
            for t in &mut r.tokens {
                *t = self.map.get(t).copied().unwrap_or(self.oov());
            }
        }
        out
    }
}

/// Output of one (window, configuration) job.
#[derive(Debug, Clone)]
pub struct JobOutput {
    pub window_id: usize,
    pub seed: u64,
    pub nrmse: f64,
    pub token_metrics: TokenMetrics,
    /// `(t within window, actual, predicted)` in original units.
    pub predictions: Vec<(usize, f64, f64)>,
    pub trace: TrainTrace,
    pub model_checksum: String,
    pub model: SequenceRegressor,
}

/// A model trained on one window's training corpus, before any scoring.
#[derive(Debug, Clone)]
pub struct TrainedJob {
    pub seed: u64,
    pub train: PatternCorpus,
    pub test: PatternCorpus,
    pub token_metrics: TokenMetrics,
    pub remap: TokenRemap,
    pub trace: TrainTrace,
    pub model: SequenceRegressor,
}

/// Renders, tokenizes and trains one configuration on one window. Nothing
/// here reads the test targets; the test corpus is only rendered.
pub fn train_job(
    window: &WindowSplit,
    fit: &WindowFit,
    mode: Mode,
    freezing: bool,
    config: &ExperimentConfig,
    vocab: &BpeVocab,
) -> Result<TrainedJob> {
    let seed = job_seed(config.seed, window.window_id, mode, freezing);
    let (mut train, mut test) = build_corpus(
        window,
        RenderMode::new(mode, config.precision),
        &fit.inputs(config.tau_max),
    )?;
    train.tokenize(vocab);
    test.tokenize(vocab);
    let token_metrics = count_metrics(&train, &test, vocab);
    let remap = TokenRemap::fit(&train);

    let shape = config.model;
    let mut model = SequenceRegressor::new(ModelConfig {
        vocab_size: remap.vocab_size(),
        embed_dim: shape.embed_dim,
        num_heads: shape.num_heads,
        num_blocks: shape.num_blocks,
        mlp_hidden: shape.mlp_hidden,
        max_sequence_length: shape.max_sequence_length,
        seed,
    })?;
    let trace = model.train(
        &remap.apply(&train),
        &TrainConfig {
            epochs: config.train.epochs,
            batch_size: config.train.batch_size,
            learning_rate: config.train.learning_rate,
            freezing,
            seed: splitmix64(seed),
        },
    )?;
    Ok(TrainedJob {
        seed,
        train,
        test,
        token_metrics,
        remap,
        trace,
        model,
    })
}

/// Trains one configuration on one window and scores it on the test part.
pub fn run_job(
    window: &WindowSplit,
    fit: &WindowFit,
    mode: Mode,
    freezing: bool,
    config: &ExperimentConfig,
    vocab: &BpeVocab,
) -> Result<JobOutput> {
    let job = train_job(window, fit, mode, freezing, config, vocab)?;
    let target = window.train.target_index();
    let predicted = job.model.predict(&job.remap.apply(&job.test), |z| {
        fit.standardizer.inverse_value(target, z)
    })?;
    let joined = window.joined();
    let actual: Vec<f64> = job.test.records.iter().map(|r| joined.get(r.t, target)).collect();
    let nrmse = nrmse_with(&actual, &predicted, config.nrmse)?;
    let predictions = job
        .test
        .records
        .iter()
        .zip(actual.iter().zip(&predicted))
        .map(|(r, (&a, &p))| (r.t, a, p))
        .collect();
    Ok(JobOutput {
        window_id: window.window_id,
        seed: job.seed,
        nrmse,
        token_metrics: job.token_metrics,
        predictions,
        trace: job.trace,
        model_checksum: job.model.checksum(),
        model: job.model,
    })
}

/// NRMSE of the last-value and fuzzy rule baselines on a window's test part.
pub fn baseline_scores(window: &WindowSplit, config: &ExperimentConfig) -> Result<(f64, f64)> {
    let joined = window.joined();
    let y = joined.target();
    let start = window.train.len();
    let actual = &y[start..];
    let persistence: Vec<f64> = (start..y.len()).map(|t| y[t - 1]).collect();
    let chen = ChenModel::fit(
        &window.train.target(),
        config.partitions,
        config.universe_margin,
        config.rule_midpoint,
    )?;
    let chen_pred = (start..y.len())
        .map(|t| chen.forecast(y[t - 1]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((
        nrmse_with(actual, &persistence, config.nrmse)?,
        nrmse_with(actual, &chen_pred, config.nrmse)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Aggregated result of one configuration over all windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub mode: Mode,
    pub freezing: bool,
    pub status: RunStatus,
    pub error: Option<String>,
    pub per_window_nrmse: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_window_nrmse`.
    pub std: f64,
    /// Summed over windows.
    pub token_metrics: TokenMetrics,
    pub seeds: Vec<u64>,
    pub model_checksums: Vec<String>,
}

impl ForecastReport {
    pub fn name(&self) -> String {
        config_name(self.mode, self.freezing)
    }
}

pub fn config_name(mode: Mode, freezing: bool) -> String {
    format!("{}-{}", mode, if freezing { "freeze" } else { "nofreeze" })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub window_id: usize,
    pub bounds: (usize, usize),
    pub train_len: usize,
    pub test_len: usize,
    pub target_parents: usize,
    pub graph_links: usize,
    pub persistence_nrmse: f64,
    pub fuzzy_rule_nrmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub series_rows: usize,
    pub series_columns: Vec<String>,
    pub windows: Vec<WindowSummary>,
    pub reports: Vec<ForecastReport>,
}

impl ExperimentReport {
    pub fn any_failed(&self) -> bool {
        self.reports.iter().any(|r| r.status == RunStatus::Failed)
    }

    pub fn report(&self, mode: Mode, freezing: bool) -> Option<&ForecastReport> {
        self.reports.iter().find(|r| r.mode == mode && r.freezing == freezing)
    }
}

/// Everything produced by a run, including per-window artifacts.
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub fits: Vec<WindowFit>,
    /// Keyed by configuration name; `Err` holds the failure message.
    pub jobs: BTreeMap<String, std::result::Result<Vec<JobOutput>, String>>,
}

/// Runs every configuration on every window of `series`. Errors inside a
/// configuration are recorded in its report; only setup errors abort.
pub fn run_on_series(
    series: &MultivariateSeries,
    config: &ExperimentConfig,
    vocab: &BpeVocab,
) -> Result<ExperimentRun> {
    let windows = make_windows(series, &config.windows)?;
    let fits: Vec<Result<WindowFit>> = windows.par_iter().map(|w| WindowFit::fit(w, config)).collect();
    let configurations = config.configurations();

    let fit_error = fits.iter().find_map(|f| f.as_ref().err().map(|e| e.to_string()));
    let fits: Vec<WindowFit> = fits.into_iter().filter_map(|f| f.ok()).collect();

    let tasks: Vec<(usize, Mode, bool)> = configurations
        .iter()
        .flat_map(|&(m, f)| (0..windows.len()).map(move |w| (w, m, f)))
        .collect();
    let outputs: Vec<Result<JobOutput>> = if fit_error.is_some() {
        Vec::new()
    } else {
        tasks
            .par_iter()
            .map(|&(w, m, f)| run_job(&windows[w], &fits[w], m, f, config, vocab))
            .collect()
    };

    let mut jobs = BTreeMap::new();
    let mut reports = Vec::new();
    for (ci, &(mode, freezing)) in configurations.iter().enumerate() {
        let result: std::result::Result<Vec<JobOutput>, String> = match &fit_error {
            Some(e) => Err(e.clone()),
            None => outputs[ci * windows.len()..(ci + 1) * windows.len()]
                .iter()
                .map(|r| r.as_ref().cloned().map_err(|e| e.to_string()))
                .collect(),
        };
        let report = match &result {
            Ok(outs) => {
                let per_window: Vec<f64> = outs.iter().map(|o| o.nrmse).collect();
                let (mean, std) = mean_std(&per_window);
                let mut metrics = TokenMetrics::default();
                for o in outs {
                    add_metrics(&mut metrics, &o.token_metrics);
                }
                ForecastReport {
                    mode,
                    freezing,
                    status: RunStatus::Ok,
                    error: None,
                    per_window_nrmse: per_window,
                    mean,
                    std,
                    token_metrics: metrics,
                    seeds: outs.iter().map(|o| o.seed).collect(),
                    model_checksums: outs.iter().map(|o| o.model_checksum.clone()).collect(),
                }
            }
            Err(e) => {
                log::error!("{} failed: {e}", config_name(mode, freezing));
                ForecastReport {
                    mode,
                    freezing,
                    status: RunStatus::Failed,
                    error: Some(e.clone()),
                    per_window_nrmse: Vec::new(),
                    mean: f64::NAN,
                    std: f64::NAN,
                    token_metrics: TokenMetrics::default(),
                    seeds: (0..windows.len())
                        .map(|w| job_seed(config.seed, w, mode, freezing))
                        .collect(),
                    model_checksums: Vec::new(),
                }
            }
        };
        reports.push(report);
        jobs.insert(config_name(mode, freezing), result);
    }

    let summaries = windows
        .iter()
        .zip(&fits)
        .map(|(w, f)| {
            let (persistence, fuzzy) = baseline_scores(w, config).unwrap_or((f64::NAN, f64::NAN));
            WindowSummary {
                window_id: w.window_id,
                bounds: w.bounds,
                train_len: w.train.len(),
                test_len: w.test.len(),
                target_parents: f.graph.parents_of(series.target_index()).len(),
                graph_links: f.graph.links.len(),
                persistence_nrmse: persistence,
                fuzzy_rule_nrmse: fuzzy,
            }
        })
        .collect();
    Ok(ExperimentRun {
        report: ExperimentReport {
            config: config.clone(),
            series_rows: series.len(),
            series_columns: series.names().to_vec(),
            windows: summaries,
            reports,
        },
        fits,
        jobs,
    })
}

fn add_metrics(total: &mut TokenMetrics, m: &TokenMetrics) {
    total.total_text_size += m.total_text_size;
    total.train_text_size += m.train_text_size;
    total.test_text_size += m.test_text_size;
    total.total_text_bytes += m.total_text_bytes;
    total.train_text_bytes += m.train_text_bytes;
    total.test_text_bytes += m.test_text_bytes;
    total.total_tokens += m.total_tokens;
    total.train_tokens += m.train_tokens;
    total.test_tokens += m.test_tokens;
}

/// Loads data and vocabulary, runs, and writes reports under `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let series = load_series(config)?;
    let vocab = resolve_vocab(config)?;
    let run = run_on_series(&series, config, &vocab)?;
    write_outputs(&run, &series, out)?;
    Ok(run.report)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// `report.json`, `report.csv`, `summary.md` and one directory per
/// configuration with its config, seeds, graphs, token counts and
/// predictions.
pub fn write_outputs(run: &ExperimentRun, series: &MultivariateSeries, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let report = &run.report;
    write(
        &out.join("report.json"),
        serde_json::to_string_pretty(report).expect("report serializes"),
    )?;
    write(&out.join("report.csv"), report_csv(report))?;
    write(&out.join("summary.md"), summary_markdown(report))?;

    for r in &report.reports {
        let dir = out.join(r.name());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write(
            &dir.join("config.json"),
            serde_json::to_string_pretty(&report.config).expect("config serializes"),
        )?;
        let seeds: String = r.seeds.iter().enumerate().map(|(w, s)| format!("{w}\t{s}\n")).collect();
        write(&dir.join("seed.txt"), format!("root\t{}\n{seeds}", report.config.seed))?;
        write(
            &dir.join("token_metrics.json"),
            serde_json::to_string_pretty(&r.token_metrics).expect("metrics serialize"),
        )?;
        for fit in &run.fits {
            write(&dir.join(format!("graph_w{}.json", fit.window_id)), fit.graph.to_json())?;
            write(
                &dir.join(format!("graph_w{}.dot", fit.window_id)),
                fit.graph.to_dot(Some(series.names())),
            )?;
        }
        let mut csv = String::from("window,t,actual,predicted\n");
        if let Some(Ok(outs)) = run.jobs.get(&r.name()) {
            for o in outs {
                for &(t, a, p) in &o.predictions {
                    let _ = writeln!(csv, "{},{t},{a},{p}", o.window_id);
                }
            }
        }
        write(&dir.join("predictions.csv"), csv)?;
    }
    Ok(())
}

pub fn report_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("configuration,mode,freezing,status,window,nrmse\n");
    for r in &report.reports {
        let status = if r.status == RunStatus::Ok { "ok" } else { "failed" };
        for (w, v) in r.per_window_nrmse.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{status},{w},{v}", r.name(), r.mode, r.freezing);
        }
        let _ = writeln!(s, "{},{},{},{status},mean,{}", r.name(), r.mode, r.freezing, r.mean);
        let _ = writeln!(s, "{},{},{},{status},std,{}", r.name(), r.mode, r.freezing, r.std);
    }
    s
}

pub fn summary_markdown(report: &ExperimentReport) -> String {
    let cell = |mode: Mode, freezing: bool| match report.report(mode, freezing) {
        Some(r) if r.status == RunStatus::Ok => format!("{:.3} ± {:.3}", r.mean, r.std),
        Some(_) => "failed".to_string(),
        None => "-".to_string(),
    };
    let mut s = String::from("# NRMSE over windows\n\n| mode | no freezing | freezing |\n|---|---|---|\n");
    for mode in Mode::ALL {
        if report.config.modes.contains(&mode) {
            let _ = writeln!(s, "| {} | {} | {} |", mode, cell(mode, false), cell(mode, true));
        }
    }
    s.push_str("\n# Text and tokens (summed over windows)\n\n");
    s.push_str("| mode | characters | train tokens | test tokens | total tokens |\n|---|---|---|---|---|\n");
    for mode in Mode::ALL {
        if let Some(r) = report
            .reports
            .iter()
            .find(|r| r.mode == mode && r.status == RunStatus::Ok)
        {
            let m = &r.token_metrics;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                mode, m.total_text_size, m.train_tokens, m.test_tokens, m.total_tokens
            );
        }
    }
    if !report.windows.is_empty() {
        let mean =
            |f: fn(&WindowSummary) -> f64| report.windows.iter().map(f).sum::<f64>() / report.windows.len() as f64;
        let _ = write!(
            s,
            "\n# Baselines\n\nlast value: {:.3}, fuzzy rules: {:.3}\n",
            mean(|w| w.persistence_nrmse),
            mean(|w| w.fuzzy_rule_nrmse)
        );
    }
    s
}

/// Copy of `window` whose test segment is overwritten with `sentinel`.
pub fn poison_test_segment(window: &WindowSplit, sentinel: f64) -> WindowSplit {
    WindowSplit {
        test: window.test.map_values(|_, _, _| sentinel),
        ..window.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::strong_signal;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            data: Some(DataSource::Var(strong_signal(700, 1))),
            modes: vec![Mode::Cgf, Mode::Raw],
            freezing: vec![false, true],
            tau_max: 2,
            partitions: 10,
            windows: WindowSpec {
                count: 2,
                ..WindowSpec::default()
            },
            model: ModelShape {
                embed_dim: 8,
                num_heads: 2,
                num_blocks: 1,
                mlp_hidden: 8,
                max_sequence_length: 64,
            },
            train: TrainShape {
                epochs: 2,
                ..TrainShape::default()
            },
            seed: 42,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = job_seed(7, 0, Mode::Cgf, false);
        assert_eq!(a, job_seed(7, 0, Mode::Cgf, false));
        let all: BTreeSet<u64> = (0..10)
            .flat_map(|w| {
                Mode::ALL
                    .into_iter()
                    .flat_map(move |m| [false, true].map(|f| job_seed(7, w, m, f)))
            })
            .collect();
        assert_eq!(all.len(), 60);
        // reference value of the splitmix64 finalizer
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn remap_is_dense_with_oov() {
        let mut c = PatternCorpus::default();
        c.records.push(crate::textgen::PatternRecord {
            t: 0,
            text: String::new(),
            target: 0.0,
            slots: vec![],
            tokens: vec![900, 5, 900, 77],
        });
        let r = TokenRemap::fit(&c);
        assert_eq!(r.vocab_size(), 4);
        assert_eq!(r.apply(&c).records[0].tokens, vec![2, 0, 2, 1]);
        let mut unseen = c.clone();
        unseen.records[0].tokens = vec![6];
        assert_eq!(r.apply(&unseen).records[0].tokens, vec![3]);
    }

    #[test]
    fn small_ablation_runs_and_aggregates() {
        let cfg = tiny_config();
        let series = load_series(&cfg).unwrap();
        let run = run_on_series(&series, &cfg, &BpeVocab::tiny()).unwrap();
        let rep = &run.report;
        assert_eq!(rep.reports.len(), 4);
        assert!(!rep.any_failed());
        for r in &rep.reports {
            assert_eq!(r.per_window_nrmse.len(), 2);
            let (m, s) = mean_std(&r.per_window_nrmse);
            assert!((m - r.mean).abs() < 1e-12 && (s - r.std).abs() < 1e-12);
            assert!(r.per_window_nrmse.iter().all(|&v| v >= 0.0));
            let t = &r.token_metrics;
            assert_eq!(t.total_tokens, t.train_tokens + t.test_tokens);
        }
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&run, &series, dir.path()).unwrap();
        for f in ["report.json", "report.csv", "summary.md"] {
            assert!(dir.path().join(f).is_file());
        }
        for name in ["cgf-nofreeze", "raw-freeze"] {
            for f in [
                "config.json",
                "seed.txt",
                "token_metrics.json",
                "predictions.csv",
                "graph_w0.json",
                "graph_w1.dot",
            ] {
                assert!(dir.path().join(name).join(f).is_file(), "{name}/{f}");
            }
        }
    }

    #[test]
    fn configuration_failure_is_local() {
        let mut cfg = tiny_config();
        // a zero-length context is rejected when each job builds its model
        cfg.model.max_sequence_length = 0;
        let series = load_series(&cfg).unwrap();
        let run = run_on_series(&series, &cfg, &BpeVocab::tiny()).unwrap();
        assert!(run.report.any_failed());
        assert!(run.report.reports.iter().all(|r| r.error.is_some()));
    }

    #[test]
    fn window_fit_ignores_test_values() {
        let cfg = tiny_config();
        let series = load_series(&cfg).unwrap();
        let w = &make_windows(&series, &cfg.windows).unwrap()[1];
        let clean = WindowFit::fit(w, &cfg).unwrap();
        let dirty = WindowFit::fit(&poison_test_segment(w, 1e6), &cfg).unwrap();
        assert_eq!(clean, dirty);
    }

    #[test]
    fn config_files_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "tau_max = 5\nmodes = [\"cgf\"]\nseed = 3\n[data.csv]\npath = \"x.csv\"\ntarget = \"y\"\n[train]\nepochs = 4\n",
        )
        .unwrap();
        let c = ExperimentConfig::from_file(&p).unwrap();
        assert_eq!(c.tau_max, 5);
        assert_eq!(c.modes, vec![Mode::Cgf]);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.partitions, 30);
        let j = dir.path().join("c.json");
        std::fs::write(&j, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::from_file(&j).unwrap(), c);
    }
}
