// Copyright 2026 The sdplab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! INI-style experiment configuration.
//!
//! Sections are `[name]` lines; entries are `key = value`. `#` and `;` start
//! comments. Every key is checked against a fixed schema and every value is
//! validated before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sdplab_core::analysis::MiEstimatorConfig;
use sdplab_core::losses::{KldCoefficient, LossMode, LossWeights};
use sdplab_core::pruning::PruneMethod;
use sdplab_core::trainer::{L0Config, OptimConfig, ScheduleConfig, ScheduleKind, StudentConfig, TeacherConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed but not yet interpreted `section -> key -> value`.
#[derive(Debug, Clone, Default)]
pub struct IniDocument {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
    source: String,
}

fn config_error(source: &str, line: usize, msg: impl Into<String>) -> CliError {
    CliError::Config(format!("{source}:{line}: {}", msg.into()))
}

impl IniDocument {
    pub fn parse(text: &str, source: &str, schema: Schema) -> Result<Self, CliError> {
        let mut doc = IniDocument {
            source: source.to_string(),
            ..Default::default()
        };
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split(['#', ';']).next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| config_error(source, line, "unterminated section header"))?
                    .trim();
                if !schema.iter().any(|(s, _)| *s == name) {
                    return Err(config_error(source, line, format!("unknown section [{name}]")));
                }
                if doc.sections.contains_key(name) {
                    return Err(config_error(source, line, format!("duplicate section [{name}]")));
                }
                doc.sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| config_error(source, line, format!("expected 'key = value', found '{body}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let section = current
                .as_ref()
                .ok_or_else(|| config_error(source, line, format!("key '{key}' outside any section")))?;
            let allowed = schema.iter().find(|(s, _)| s == section).map(|(_, k)| *k).unwrap_or(&[]);
            if !allowed.contains(&key) {
                return Err(config_error(source, line, format!("unknown key '{key}' in [{section}]")));
            }
            let map = doc.sections.get_mut(section).expect("section inserted above");
            if map.contains_key(key) {
                return Err(config_error(source, line, format!("duplicate key '{key}' in [{section}]")));
            }
            map.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line,
                },
            );
        }
        Ok(doc)
    }

    fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section)?.get(key)
    }

    pub fn value(&self, section: &str, key: &str) -> Option<&str> {
        self.get(section, key).map(|e| e.value.as_str())
    }

    pub fn parse_or<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, CliError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse()
                .map_err(|_| config_error(&self.source, e.line, format!("invalid value '{}' for {section}.{key}", e.value))),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| config_error(&self.source, e.line, format!("invalid value '{}' for {section}.{key}", e.value))),
        }
    }

    fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool, CliError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(e) => match e.value.as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                v => Err(config_error(&self.source, e.line, format!("expected a boolean for {section}.{key}, found '{v}'"))),
            },
        }
    }

    fn list_or<T: std::str::FromStr>(&self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(e) => e
                .value
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| config_error(&self.source, e.line, format!("invalid list item '{}' in {section}.{key}", v.trim())))
                })
                .collect(),
        }
    }

    fn named<T>(&self, section: &str, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T, CliError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(e) => parse(&e.value).ok_or_else(|| config_error(&self.source, e.line, format!("unknown {section}.{key} '{}'", e.value))),
        }
    }

    fn named_list<T>(&self, section: &str, key: &str, default: Vec<T>, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(e) => e
                .value
                .split(',')
                .map(|v| parse(v.trim()).ok_or_else(|| config_error(&self.source, e.line, format!("unknown {section}.{key} item '{}'", v.trim()))))
                .collect(),
        }
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.get(section, key).map_or(0, |e| e.line)
    }
}

/// Allowed `(section, keys)` pairs.
pub type Schema = &'static [(&'static str, &'static [&'static str])];

const SCHEMA: Schema = &[
    (
        "dataset",
        &[
            "kind",
            "classes",
            "samples_per_class",
            "dim",
            "center_spread",
            "cluster_std",
            "noise",
            "path",
            "label_column",
            "train_fraction",
            "dev_fraction",
            "test_fraction",
        ],
    ),
    ("network", &["hidden", "activation"]),
    (
        "teacher",
        &[
            "epochs",
            "learning_rate",
            "momentum",
            "clip_norm",
            "batch_size",
            "patience",
            "min_delta",
            "label_smoothing",
        ],
    ),
    (
        "student",
        &[
            "learning_rate",
            "momentum",
            "clip_norm",
            "batch_size",
            "regularizer",
            "fdm_lambda",
            "l0_lambda",
            "l0_gate_learning_rate",
            "l0_init_log_alpha",
            "cache_teacher",
        ],
    ),
    ("prune", &["method", "steps", "fraction", "epochs_per_step", "schedule", "final_density"]),
    ("loss", &["mode", "alpha", "beta", "lambda", "temperature", "kld_coefficient"]),
    ("analysis", &["k", "bins", "smoothing", "kde_sigma2", "signed_sqrt", "binned"]),
    ("sweep", &["methods", "modes"]),
    ("run", &["seeds", "output"]),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Blobs {
        classes: usize,
        samples_per_class: usize,
        dim: usize,
        center_spread: f64,
        cluster_std: f64,
    },
    Spirals {
        samples_per_class: usize,
        noise: f64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub mi: MiEstimatorConfig,
    pub kde_sigma2: f64,
    pub signed_sqrt: bool,
    /// Whether to compute the (slower) binned MI column.
    pub binned: bool,
}

/// Loss keys set explicitly in the file; everything else follows the
/// defaults of whichever mode a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossOverrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lambda_offdiag: Option<f64>,
    pub temperature: Option<f64>,
    pub kld_coefficient: Option<KldCoefficient>,
}

impl LossOverrides {
    pub fn weights_for(&self, mode: LossMode) -> LossWeights {
        let d = if mode == LossMode::SdpCos {
            LossWeights::cosine_defaults()
        } else {
            LossWeights::default()
        };
        LossWeights {
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            lambda_offdiag: self.lambda_offdiag.unwrap_or(d.lambda_offdiag),
            temperature: self.temperature.unwrap_or(d.temperature),
            label_smoothing: 0.0,
            kld_coefficient: self.kld_coefficient.unwrap_or(d.kld_coefficient),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub loss_overrides: LossOverrides,
    pub dataset: DatasetConfig,
    pub hidden: Vec<usize>,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub analysis: AnalysisConfig,
    pub sweep_methods: Vec<PruneMethod>,
    pub sweep_modes: Vec<LossMode>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_str_with_source(&text, &path.display().to_string())?;
        if let DatasetSource::Csv { path: p, .. } = &mut cfg.dataset.source {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_str_with_source(text: &str, source: &str) -> Result<Self, CliError> {
        let doc = IniDocument::parse(text, source, SCHEMA)?;
        let d = &doc;
        let kind = d.get("dataset", "kind").map_or("blobs", |e| e.value.as_str());
        let source_cfg = match kind {
            "blobs" => DatasetSource::Blobs {
                classes: d.parse_or("dataset", "classes", 4)?,
                samples_per_class: d.parse_or("dataset", "samples_per_class", 500)?,
                dim: d.parse_or("dataset", "dim", 16)?,
                center_spread: d.parse_or("dataset", "center_spread", 1.2)?,
                cluster_std: d.parse_or("dataset", "cluster_std", 1.0)?,
            },
            "spirals" => DatasetSource::Spirals {
                samples_per_class: d.parse_or("dataset", "samples_per_class", 500)?,
                noise: d.parse_or("dataset", "noise", 0.1)?,
            },
            "csv" => DatasetSource::Csv {
                path: PathBuf::from(
                    d.get("dataset", "path")
                        .ok_or_else(|| config_error(source, d.line_of("dataset", "kind"), "dataset.kind = csv needs dataset.path"))?
                        .value
                        .clone(),
                ),
                label_column: d.get("dataset", "label_column").map_or("label".to_string(), |e| e.value.clone()),
            },
            other => {
                return Err(config_error(source, d.line_of("dataset", "kind"), format!("unknown dataset.kind '{other}'")));
            }
        };
        let dataset = DatasetConfig {
            source: source_cfg,
            train_fraction: d.parse_or("dataset", "train_fraction", 0.6)?,
            dev_fraction: d.parse_or("dataset", "dev_fraction", 0.2)?,
            test_fraction: d.parse_or("dataset", "test_fraction", 0.2)?,
        };
        let hidden = d.list_or("network", "hidden", vec![64usize, 64])?;
        if let Some(e) = d.get("network", "activation") {
            if e.value != "relu" {
                return Err(config_error(source, e.line, format!("unsupported activation '{}'", e.value)));
            }
        }
        let td = TeacherConfig::default();
        let teacher = TeacherConfig {
            optim: OptimConfig {
                learning_rate: d.parse_or("teacher", "learning_rate", td.optim.learning_rate)?,
                momentum: d.parse_or("teacher", "momentum", td.optim.momentum)?,
                clip_norm: d.parse_or("teacher", "clip_norm", td.optim.clip_norm)?,
                batch_size: d.parse_or("teacher", "batch_size", td.optim.batch_size)?,
            },
            max_epochs: d.parse_or("teacher", "epochs", td.max_epochs)?,
            patience: d.parse_or("teacher", "patience", td.patience)?,
            min_delta: d.parse_or("teacher", "min_delta", td.min_delta)?,
            label_smoothing: d.parse_or("teacher", "label_smoothing", td.label_smoothing)?,
        };
        let sd = StudentConfig::default();
        let mode = d.named("loss", "mode", sd.loss_mode, LossMode::parse)?;
        let loss_overrides = LossOverrides {
            alpha: d.parse_opt("loss", "alpha")?,
            beta: d.parse_opt("loss", "beta")?,
            lambda_offdiag: d.parse_opt("loss", "lambda")?,
            temperature: d.parse_opt("loss", "temperature")?,
            kld_coefficient: match d.get("loss", "kld_coefficient") {
                None => None,
                Some(_) => Some(d.named("loss", "kld_coefficient", KldCoefficient::AlphaTauSquared, |s| match s {
                    "alpha-tau2" => Some(KldCoefficient::AlphaTauSquared),
                    "alpha2" => Some(KldCoefficient::AlphaSquared),
                    _ => None,
                })?),
            },
        };
        let weights = loss_overrides.weights_for(mode);
        let schedule_kind = match d.get("prune", "schedule").map_or("uniform", |e| e.value.as_str()) {
            "uniform" => ScheduleKind::Uniform,
            "cubic" => ScheduleKind::Cubic {
                final_density: d.parse_or("prune", "final_density", 0.1)?,
            },
            other => return Err(config_error(source, d.line_of("prune", "schedule"), format!("unknown schedule '{other}'"))),
        };
        let student = StudentConfig {
            optim: OptimConfig {
                learning_rate: d.parse_or("student", "learning_rate", sd.optim.learning_rate)?,
                momentum: d.parse_or("student", "momentum", sd.optim.momentum)?,
                clip_norm: d.parse_or("student", "clip_norm", sd.optim.clip_norm)?,
                batch_size: d.parse_or("student", "batch_size", sd.optim.batch_size)?,
            },
            loss_mode: mode,
            weights,
            method: d.named("prune", "method", sd.method, PruneMethod::parse)?,
            schedule: ScheduleConfig {
                num_prune_steps: d.parse_or("prune", "steps", sd.schedule.num_prune_steps)?,
                fraction_per_step: d.parse_or("prune", "fraction", sd.schedule.fraction_per_step)?,
                epochs_per_step: d.parse_or("prune", "epochs_per_step", sd.schedule.epochs_per_step)?,
                kind: schedule_kind,
            },
            regularizer_coeff: d.parse_or("student", "regularizer", sd.regularizer_coeff)?,
            l0: L0Config {
                lambda: d.parse_or("student", "l0_lambda", sd.l0.lambda)?,
                gate_learning_rate: d.parse_or("student", "l0_gate_learning_rate", sd.l0.gate_learning_rate)?,
                init_log_alpha: d.parse_or("student", "l0_init_log_alpha", sd.l0.init_log_alpha)?,
            },
            fdm_lambda: d.parse_or("student", "fdm_lambda", sd.fdm_lambda)?,
            cache_teacher: d.bool_or("student", "cache_teacher", sd.cache_teacher)?,
        };
        let md = MiEstimatorConfig::default();
        let analysis = AnalysisConfig {
            mi: MiEstimatorConfig {
                k: d.parse_or("analysis", "k", md.k)?,
                bins: d.parse_or("analysis", "bins", md.bins)?,
                smoothing: d.parse_or("analysis", "smoothing", md.smoothing)?,
            },
            kde_sigma2: d.parse_or("analysis", "kde_sigma2", 1.0)?,
            signed_sqrt: d.bool_or("analysis", "signed_sqrt", true)?,
            binned: d.bool_or("analysis", "binned", true)?,
        };
        let cfg = ExperimentConfig {
            loss_overrides,
            dataset,
            hidden,
            teacher,
            student,
            analysis,
            sweep_methods: d.named_list("sweep", "methods", vec![student.method], PruneMethod::parse)?,
            sweep_modes: d.named_list("sweep", "modes", vec![mode], LossMode::parse)?,
            seeds: d.list_or("run", "seeds", vec![0u64])?,
            output: PathBuf::from(d.get("run", "output").map_or("out", |e| e.value.as_str())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field against the owning module's invariants.
    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |what: &str, e: sdplab_core::Error| CliError::Config(format!("{what}: {e}"));
        match &self.dataset.source {
            DatasetSource::Blobs {
                classes,
                samples_per_class,
                dim,
                center_spread,
                cluster_std,
            } => {
                if *classes < 2 || *samples_per_class < 1 || *dim < 1 {
                    return Err(CliError::Config("dataset: blobs need classes >= 2, samples_per_class >= 1, dim >= 1".into()));
                }
                if !(*cluster_std > 0.0) || !(*center_spread >= 0.0) {
                    return Err(CliError::Config("dataset: cluster_std must be > 0 and center_spread >= 0".into()));
                }
            }
            DatasetSource::Spirals { samples_per_class, noise } => {
                if *samples_per_class < 1 || !(*noise >= 0.0) {
                    return Err(CliError::Config("dataset: spirals need samples_per_class >= 1 and noise >= 0".into()));
                }
            }
            DatasetSource::Csv { label_column, .. } => {
                if label_column.is_empty() {
                    return Err(CliError::Config("dataset: empty label_column".into()));
                }
            }
        }
        self.split_spec(0).validate().map_err(|e| wrap("dataset", e))?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(CliError::Config("network: hidden widths must be a nonempty list of positive integers".into()));
        }
        self.teacher.validate().map_err(|e| wrap("teacher", e))?;
        self.student.validate().map_err(|e| wrap("student/prune/loss", e))?;
        self.analysis.mi.validate().map_err(|e| wrap("analysis", e))?;
        if !(self.analysis.kde_sigma2 > 0.0) {
            return Err(CliError::Config("analysis: kde_sigma2 must be > 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("run: seeds must not be empty".into()));
        }
        if self.sweep_methods.is_empty() || self.sweep_modes.is_empty() {
            return Err(CliError::Config("sweep: methods and modes must not be empty".into()));
        }
        Ok(())
    }

    pub fn split_spec(&self, seed: u64) -> sdplab_core::data::SplitSpec {
        sdplab_core::data::SplitSpec {
            train_fraction: self.dataset.train_fraction,
            dev_fraction: self.dataset.dev_fraction,
            test_fraction: self.dataset.test_fraction,
            seed,
        }
    }

    /// The student config for one sweep cell.
    pub fn student_for(&self, method: PruneMethod, mode: LossMode) -> StudentConfig {
        StudentConfig {
            method,
            loss_mode: mode,
            weights: self.loss_overrides.weights_for(mode),
            ..self.student
        }
    }

    /// Layer widths including input and output.
    pub fn widths(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.hidden);
        w.push(classes);
        w
    }
}
