//! Experiment orchestration: layered configuration, the three run
//! protocols, per-episode metrics export, checkpoints, and run summaries.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{
    AnnotatorBackend, AnnotatorError, FailureInjectingBackend, HttpBackend, MockBackend,
};
use crate::constraint::{build_limitation_set, LimitationSet};
use crate::env::{load_map, office_world_a, office_world_b, EntityRegistry, GridMap, Task};
use crate::meta::{EpisodeTrace, Learner, LearnerConfig};
use crate::skills::{load_library, save_library, LibraryError, SkillLibrary};

pub const SUCCESS_CRITERION_WINDOW: usize = 50;
pub const SUCCESS_CRITERION_RATE: f64 = 0.95;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Scratch,
    Sequential,
    Transfer,
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scratch" => Ok(Protocol::Scratch),
            "sequential" => Ok(Protocol::Sequential),
            "transfer" => Ok(Protocol::Transfer),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Protocol::Scratch => "scratch",
            Protocol::Sequential => "sequential",
            Protocol::Transfer => "transfer",
        };
        f.write_str(name)
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnnotatorChoice {
    Mock,
    /// Mock backend with a deterministic fraction of injected parse
    /// failures, for robustness runs.
    MockFailing { rate_percent: u8 },
    Http { endpoint: String, model: String },
}

impl Default for AnnotatorChoice {
    fn default() -> Self {
        AnnotatorChoice::Mock
    }
}

/// Everything one `run` invocation needs. Defaults cover every field; file,
/// environment, and CLI layers override in that order.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// "A", "B", or a path to a map file.
    pub map: String,
    pub task: u8,
    pub protocol: Protocol,
    pub constraint: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub library_in: Option<PathBuf>,
    pub library_out: Option<PathBuf>,
    pub annotator: AnnotatorChoice,
    pub learner: LearnerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            map: "A".to_string(),
            task: 1,
            protocol: Protocol::Scratch,
            constraint: String::new(),
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            library_in: None,
            library_out: None,
            annotator: AnnotatorChoice::Mock,
            learner: LearnerConfig::default(),
        }
    }
}

#[derive(Error, Debug)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config file error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("skill library error: {0}")]
    Library(#[from] LibraryError),
    #[error("annotator error: {0}")]
    Annotator(#[from] AnnotatorError),
    #[error("map error: {0}")]
    Map(String),
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    /// Environment layer: SOARL_* variables override file values.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("SOARL_MAP") {
            self.map = v;
        }
        if let Ok(v) = std::env::var("SOARL_TASK") {
            if let Ok(t) = v.parse() {
                self.task = t;
            }
        }
        if let Ok(v) = std::env::var("SOARL_PROTOCOL") {
            if let Ok(p) = v.parse() {
                self.protocol = p;
            }
        }
        if let Ok(v) = std::env::var("SOARL_CONSTRAINT") {
            self.constraint = v;
        }
        if let Ok(v) = std::env::var("SOARL_SEEDS") {
            if let Some(seeds) = parse_seed_list(&v) {
                self.seeds = seeds;
            }
        }
        if let Ok(v) = std::env::var("SOARL_EPISODE_BUDGET") {
            if let Ok(n) = v.parse() {
                self.learner.episode_budget = n;
            }
        }
        if let Ok(v) = std::env::var("SOARL_OUT_DIR") {
            self.out_dir = PathBuf::from(v);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if Task::from_id(self.task).is_none() {
            return Err(HarnessError::Validation(format!("task id {} (expect 1-3)", self.task)));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Validation("seed list is empty".into()));
        }
        if self.protocol == Protocol::Transfer && self.library_in.is_none() {
            return Err(HarnessError::Validation(
                "transfer protocol needs --library-in".into(),
            ));
        }
        if let Some(lib) = &self.library_in {
            if !lib.exists() {
                return Err(HarnessError::Validation(format!(
                    "library file {} does not exist",
                    lib.display()
                )));
            }
        }
        Ok(())
    }

    fn grid_map(&self) -> Result<GridMap, HarnessError> {
        match self.map.as_str() {
            "A" => Ok(office_world_a()),
            "B" => Ok(office_world_b()),
            path => {
                let text = fs::read_to_string(path)?;
                load_map(&text).map_err(|e| HarnessError::Map(e.to_string()))
            }
        }
    }

    fn backend(&self) -> Box<dyn AnnotatorBackend> {
        match &self.annotator {
            AnnotatorChoice::Mock => Box::new(MockBackend::new()),
            AnnotatorChoice::MockFailing { rate_percent } => {
                Box::new(FailureInjectingBackend::new(MockBackend::new(), *rate_percent))
            }
            AnnotatorChoice::Http { endpoint, model } => Box::new(HttpBackend::new(
                endpoint,
                model,
                std::time::Duration::from_secs(30),
                2,
            )),
        }
    }

    fn tasks(&self) -> Vec<Task> {
        match self.protocol {
            Protocol::Sequential => vec![Task::DeliverCoffee, Task::DeliverMail, Task::DeliverBoth],
            _ => vec![Task::from_id(self.task).expect("validated")],
        }
    }
}

pub fn parse_seed_list(text: &str) -> Option<Vec<u64>> {
    let seeds: Result<Vec<u64>, _> =
        text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect();
    seeds.ok().filter(|s| !s.is_empty())
}

/// Per-seed, per-task RNG stream; identical across protocols so paired
/// seed comparisons stay paired.
fn derive_seed(seed: u64, task: Task) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(task.id() as u64)
}

/// One exported CSV row. Column order is the field order.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: u64,
    pub cumulative_samples: u64,
    pub episode_return: f64,
    pub success: bool,
    pub cumulative_violations: u64,
    pub plan_length: usize,
    pub library_size: usize,
    pub option_sr: String,
}

fn option_sr_snapshot(trace: &EpisodeTrace) -> String {
    trace
        .option_sr
        .iter()
        .map(|(name, sr)| format!("{name}={sr}"))
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Clone, Debug)]
pub struct TaskOutput {
    pub task: Task,
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub samples_to_criterion: Option<u64>,
    pub total_violations: u64,
    pub reuse_labels: Vec<String>,
    /// (option id, final success rate) for every reused option.
    pub reused_options: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct SeedOutput {
    pub seed: u64,
    pub dir: PathBuf,
    pub tasks: Vec<TaskOutput>,
    pub library_path: PathBuf,
    pub library_len: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedOutput>,
}

/// First cumulative-sample count at which the trailing-window success rate
/// reaches the criterion.
pub fn samples_to_criterion(rows: &[MetricsRow]) -> Option<u64> {
    if rows.len() < SUCCESS_CRITERION_WINDOW {
        return None;
    }
    for i in (SUCCESS_CRITERION_WINDOW - 1)..rows.len() {
        let window = &rows[i + 1 - SUCCESS_CRITERION_WINDOW..=i];
        let rate =
            window.iter().filter(|r| r.success).count() as f64 / SUCCESS_CRITERION_WINDOW as f64;
        if rate >= SUCCESS_CRITERION_RATE {
            return Some(rows[i].cumulative_samples);
        }
    }
    None
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn run_task(
    config: &ExperimentConfig,
    map: &GridMap,
    lim: &LimitationSet,
    backend: &dyn AnnotatorBackend,
    library: &mut SkillLibrary,
    seed: u64,
    task: Task,
    dir: &Path,
) -> Result<TaskOutput, HarnessError> {
    fs::create_dir_all(dir)?;
    let world = if map.has_kind(crate::env::EntityKind::Printer) { "B" } else { "A" };
    let mut learner = Learner::new(
        config.learner.clone(),
        map.clone(),
        world,
        task,
        lim.clone(),
        backend,
        derive_seed(seed, task),
    );
    let mut rows = Vec::with_capacity(config.learner.episode_budget as usize);
    let mut reuse_labels = Vec::new();
    for episode in 0..config.learner.episode_budget {
        let trace = learner.run_episode(episode, library);
        for label in &trace.reuse_events {
            reuse_labels.push(label.to_string());
        }
        rows.push(MetricsRow {
            episode,
            cumulative_samples: learner.cumulative_samples,
            episode_return: trace.extrinsic_return,
            success: trace.success,
            cumulative_violations: learner.cumulative_violations,
            plan_length: trace.plan.len(),
            library_size: library.len(),
            option_sr: option_sr_snapshot(&trace),
        });
    }
    write_metrics(&dir.join("metrics.csv"), &rows)?;
    let checkpoint = serde_json::to_string_pretty(&learner.checkpoint())
        .expect("checkpoint always serializes");
    fs::write(dir.join("checkpoint.json"), checkpoint)?;

    let reused_options = learner
        .options()
        .iter()
        .filter(|(_, opt)| opt.reused)
        .map(|(name, opt)| (name.clone(), opt.success_rate()))
        .collect();
    Ok(TaskOutput {
        task,
        dir: dir.to_path_buf(),
        samples_to_criterion: samples_to_criterion(&rows),
        total_violations: learner.cumulative_violations,
        rows,
        reuse_labels,
        reused_options,
    })
}

/// Executes the configured protocol for every seed. Fully deterministic
/// under the mock annotator.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let map = config.grid_map()?;
    fs::create_dir_all(&config.out_dir)?;
    let echo = toml::to_string_pretty(config).expect("config always serializes");
    fs::write(config.out_dir.join("config.toml"), echo)?;

    let backend = config.backend();
    let registry = EntityRegistry::from_map(&map);
    let lim = build_limitation_set(&config.constraint, backend.as_ref(), &registry)?;

    let mut seeds = Vec::new();
    for &seed in &config.seeds {
        let seed_dir = config.out_dir.join(format!("seed{seed}"));
        fs::create_dir_all(&seed_dir)?;
        let mut library = match (&config.protocol, &config.library_in) {
            (Protocol::Transfer, Some(path)) => load_library(path)?,
            _ => SkillLibrary::new(config.learner.tau),
        };
        let mut tasks = Vec::new();
        for task in config.tasks() {
            let task_dir = seed_dir.join(format!("task{}", task.id()));
            tasks.push(run_task(
                config,
                &map,
                &lim,
                backend.as_ref(),
                &mut library,
                seed,
                task,
                &task_dir,
            )?);
        }
        let library_path = seed_dir.join("library.json");
        save_library(&library, &library_path)?;
        if let Some(out) = &config.library_out {
            save_library(&library, out)?;
        }
        seeds.push(SeedOutput {
            seed,
            dir: seed_dir,
            tasks,
            library_path,
            library_len: library.len(),
        });
    }
    Ok(RunOutput { out_dir: config.out_dir.clone(), seeds })
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

fn metrics_files(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        for entry in fs::read_dir(&current)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "metrics.csv") {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub text: String,
    pub csv: String,
}

/// Aggregates one or more run directories: per directory, mean ± stddev
/// over metrics files of samples-to-criterion, total violations, and final
/// return. Also validates that cumulative columns never decrease.
pub fn summarize(dirs: &[PathBuf]) -> Result<Summary, HarnessError> {
    if dirs.is_empty() {
        return Err(HarnessError::Validation("no run directories given".into()));
    }
    let mut text = String::new();
    let mut csv_out = String::from("run,files,samples_to_criterion_mean,samples_to_criterion_std,total_violations_mean,total_violations_std,final_return_mean,final_return_std\n");
    text.push_str(&format!(
        "{:<24} {:>6} {:>24} {:>20} {:>18}\n",
        "run", "files", "samples-to-criterion", "total violations", "final return"
    ));
    for dir in dirs {
        let files = metrics_files(dir)?;
        if files.is_empty() {
            return Err(HarnessError::Validation(format!(
                "no metrics.csv under {}",
                dir.display()
            )));
        }
        let mut criterion = Vec::new();
        let mut violations = Vec::new();
        let mut final_return = Vec::new();
        for file in &files {
            let rows = read_metrics(file)?;
            for pair in rows.windows(2) {
                if pair[1].cumulative_samples < pair[0].cumulative_samples
                    || pair[1].cumulative_violations < pair[0].cumulative_violations
                {
                    return Err(HarnessError::Validation(format!(
                        "cumulative column decreases in {}",
                        file.display()
                    )));
                }
            }
            if let Some(s) = samples_to_criterion(&rows) {
                criterion.push(s as f64);
            }
            if let Some(last) = rows.last() {
                violations.push(last.cumulative_violations as f64);
            }
            let tail = rows.len().saturating_sub(SUCCESS_CRITERION_WINDOW);
            let tail_rows = &rows[tail..];
            if !tail_rows.is_empty() {
                final_return.push(
                    tail_rows.iter().map(|r| r.episode_return).sum::<f64>()
                        / tail_rows.len() as f64,
                );
            }
        }
        let fmt_pair = |values: &[f64]| -> (String, f64, f64) {
            if values.is_empty() {
                return ("n/a".to_string(), f64::NAN, f64::NAN);
            }
            let (m, s) = mean_std(values);
            (format!("{m:.1} ± {s:.1}"), m, s)
        };
        let (c_text, c_mean, c_std) = fmt_pair(&criterion);
        let (v_text, v_mean, v_std) = fmt_pair(&violations);
        let (r_text, r_mean, r_std) = fmt_pair(&final_return);
        text.push_str(&format!(
            "{:<24} {:>6} {:>24} {:>20} {:>18}\n",
            dir.display(),
            files.len(),
            c_text,
            v_text,
            r_text
        ));
        csv_out.push_str(&format!(
            "{},{},{c_mean},{c_std},{v_mean},{v_std},{r_mean},{r_std}\n",
            dir.display(),
            files.len()
        ));
    }
    Ok(Summary { text, csv: csv_out })
}
