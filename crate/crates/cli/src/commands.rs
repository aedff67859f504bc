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

//! Subcommand implementations. Every command takes an already validated
//! config, so nothing here runs before validation has passed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sdplab_core::analysis::{
    kde_mi_input_bound, kde_mi_label_bound, mi_binned_avg, mi_knn, representation_distance, snr, ClassGroupedEmbeddings,
};
use sdplab_core::data::{gen_gaussian_blobs, gen_two_spirals, load_csv, split, write_csv, LabeledDataset, Splits};
use sdplab_core::losses::LossMode;
use sdplab_core::network::{load_checkpoint, save_checkpoint, Network};
use sdplab_core::pruning::{total_frobenius_distortion, PruneMethod};
use sdplab_core::trainer::{iterative_prune, train_teacher, Boundary, RunRecord, StudentConfig, TeacherOutcome};
use sdplab_core::{Matrix, Rng};

use crate::config::{DatasetSource, ExperimentConfig, IniDocument, Schema};
use crate::error::{CliError, CliResult};
use crate::metrics::{fmt_float, split as kind, MetricsRow, MetricsWriter, Recovery};

pub const DATA_FILE: &str = "data.csv";
pub const MANIFEST_FILE: &str = "manifest.ini";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const TEACHER_LOG_FILE: &str = "teacher_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const SUMMARY_FILE: &str = "run_summary.txt";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

const MANIFEST_SCHEMA: Schema = &[
    (
        "generator",
        &[
            "kind",
            "seed",
            "classes",
            "samples_per_class",
            "dim",
            "center_spread",
            "cluster_std",
            "noise",
            "rows",
            "class_counts",
        ],
    ),
    ("dataset", &["path", "label_column"]),
];

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub force: bool,
    /// Replaces the config's seed list.
    pub seed: Option<u64>,
    pub jobs: usize,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        RunOptions {
            out: out.into(),
            force: false,
            seed: None,
            jobs: 1,
        }
    }

    pub fn seeds(&self, cfg: &ExperimentConfig) -> Vec<u64> {
        self.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
    }

    /// Single-run commands use the first seed.
    pub fn primary_seed(&self, cfg: &ExperimentConfig) -> u64 {
        self.seeds(cfg)[0]
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn dir_is_nonempty(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn refuse_existing(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

/// Draws the configured synthetic dataset; the stream depends only on `seed`.
pub fn generate_dataset(cfg: &ExperimentConfig, seed: u64) -> CliResult<LabeledDataset> {
    let mut rng = Rng::new(seed).split_named("data");
    Ok(match &cfg.dataset.source {
        DatasetSource::Blobs {
            classes,
            samples_per_class,
            dim,
            center_spread,
            cluster_std,
        } => gen_gaussian_blobs(&mut rng, *classes, *samples_per_class, *dim, *center_spread, *cluster_std)?,
        DatasetSource::Spirals { samples_per_class, noise } => gen_two_spirals(&mut rng, *samples_per_class, *noise)?,
        DatasetSource::Csv { .. } => return Err(CliError::Config("dataset: kind = csv has no generator".into())),
    })
}

/// The dataset a run trains on: the configured CSV, or whatever `gen-data`
/// left in the output directory.
pub fn load_dataset(cfg: &ExperimentConfig, out: &Path) -> CliResult<LabeledDataset> {
    if let DatasetSource::Csv { path, label_column } = &cfg.dataset.source {
        return Ok(load_csv(path, label_column)?);
    }
    let manifest = out.join(MANIFEST_FILE);
    let (path, label) = if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| CliError::io(&manifest, e))?;
        let doc = IniDocument::parse(&text, &manifest.display().to_string(), MANIFEST_SCHEMA)?;
        (
            out.join(doc.value("dataset", "path").unwrap_or(DATA_FILE)),
            doc.value("dataset", "label_column").unwrap_or("label").to_string(),
        )
    } else {
        (out.join(DATA_FILE), "label".to_string())
    };
    Ok(load_csv(&path, &label)?)
}

pub fn manifest_text(cfg: &ExperimentConfig, seed: u64, data: &LabeledDataset) -> String {
    let mut s = String::from("# sdplab dataset manifest\n[generator]\n");
    match &cfg.dataset.source {
        DatasetSource::Blobs {
            classes,
            samples_per_class,
            dim,
            center_spread,
            cluster_std,
        } => {
            let _ = write!(
                s,
                "kind = blobs\nseed = {seed}\nclasses = {classes}\nsamples_per_class = {samples_per_class}\ndim = {dim}\ncenter_spread = {center_spread}\ncluster_std = {cluster_std}\n"
            );
        }
        DatasetSource::Spirals { samples_per_class, noise } => {
            let _ = write!(s, "kind = spirals\nseed = {seed}\nsamples_per_class = {samples_per_class}\nnoise = {noise}\n");
        }
        DatasetSource::Csv { .. } => {}
    }
    let counts: Vec<String> = data.class_counts().iter().map(usize::to_string).collect();
    let _ = write!(
        s,
        "rows = {}\nclass_counts = {}\n[dataset]\npath = {DATA_FILE}\nlabel_column = label\n",
        data.len(),
        counts.join(",")
    );
    s
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<PathBuf> {
    if dir_is_nonempty(&opts.out) && !opts.force {
        return Err(CliError::OutputExists(opts.out.clone()));
    }
    let seed = opts.primary_seed(cfg);
    let data = generate_dataset(cfg, seed)?;
    create_dir(&opts.out)?;
    let path = opts.out.join(DATA_FILE);
    write_csv(&data, &path)?;
    write_file(&opts.out.join(MANIFEST_FILE), &manifest_text(cfg, seed, &data))?;
    log::info!("wrote {} rows to {}", data.len(), path.display());
    Ok(path)
}

pub fn split_for(cfg: &ExperimentConfig, data: &LabeledDataset, seed: u64) -> CliResult<Splits> {
    Ok(split(data, &cfg.split_spec(seed))?)
}

/// Fresh network from the `init` stream, trained on the `teacher` stream.
pub fn fit_teacher(cfg: &ExperimentConfig, splits: &Splits, seed: u64) -> CliResult<TeacherOutcome> {
    let rng = Rng::new(seed);
    let widths = cfg.widths(splits.train.dim(), splits.train.num_classes());
    let net = Network::new(&widths, &mut rng.split_named("init"))?;
    Ok(train_teacher(&splits.train, &splits.dev, net, &cfg.teacher, &rng.split_named("teacher"))?)
}

fn teacher_log(outcome: &TeacherOutcome) -> String {
    let mut s = String::from("epoch,loss_total,loss_ce,dev_accuracy,dev_loss,best\n");
    for e in &outcome.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch,
            fmt_float(e.train.total),
            fmt_float(e.train.ce),
            fmt_float(e.dev.accuracy),
            fmt_float(e.dev.loss),
            u8::from(e.epoch == outcome.best_epoch)
        );
    }
    s
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<TeacherOutcome> {
    let ckpt = opts.out.join(TEACHER_FILE);
    refuse_existing(&ckpt, opts.force)?;
    let seed = opts.primary_seed(cfg);
    let data = load_dataset(cfg, &opts.out)?;
    let splits = split_for(cfg, &data, seed)?;
    let outcome = fit_teacher(cfg, &splits, seed)?;
    create_dir(&opts.out)?;
    save_checkpoint(&outcome.teacher, &ckpt)?;
    write_file(&opts.out.join(TEACHER_LOG_FILE), &teacher_log(&outcome))?;
    let best = &outcome.epochs[outcome.best_epoch - 1];
    log::info!("teacher: best epoch {} dev accuracy {:.4}", outcome.best_epoch, best.dev.accuracy);
    Ok(outcome)
}

/// Analysis columns for one boundary row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundaryAnalysis {
    pub snr: f64,
    pub mi_knn: f64,
    pub mi_binned_avg: Option<f64>,
    pub kde_mi_input: f64,
    pub kde_mi_label: f64,
    pub frob_distortion_total: f64,
    pub repr_distance: f64,
}

pub fn analyse_boundary(
    cfg: &ExperimentConfig,
    teacher: &Network,
    teacher_z: &Matrix,
    student: &Network,
    dev: &LabeledDataset,
) -> CliResult<BoundaryAnalysis> {
    let a = &cfg.analysis;
    let trace = student.forward(dev.inputs())?;
    let zs = trace.penultimate();
    let groups = ClassGroupedEmbeddings::from_labeled(zs, dev.labels(), dev.num_classes())?.balanced();
    Ok(BoundaryAnalysis {
        snr: snr(&groups, a.signed_sqrt)?,
        mi_knn: mi_knn(zs, teacher_z, &a.mi)?,
        mi_binned_avg: if a.binned { Some(mi_binned_avg(zs, teacher_z, &a.mi)?) } else { None },
        kde_mi_input: kde_mi_input_bound(zs, a.kde_sigma2)?,
        kde_mi_label: kde_mi_label_bound(zs, dev.labels(), dev.num_classes(), a.kde_sigma2)?,
        frob_distortion_total: total_frobenius_distortion(teacher, student)?,
        repr_distance: representation_distance(teacher_z, zs)?,
    })
}

/// What a finished prune run hands back to sweeps and tests.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub method: PruneMethod,
    pub loss_mode: LossMode,
    pub record: RunRecord,
    /// One entry per boundary, index = step.
    pub analyses: Vec<BoundaryAnalysis>,
    pub final_remaining: f64,
    pub final_accuracy: f64,
}

impl RunSummary {
    pub fn final_analysis(&self) -> &BoundaryAnalysis {
        self.analyses.last().expect("step 0 boundary always present")
    }

    /// Median over steps `>= from_step`; an unrecovered step counts as one
    /// epoch more than the retraining budget.
    pub fn median_recovery(&self, from_step: usize, epochs_per_step: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .record
            .steps
            .iter()
            .filter(|s| s.step >= from_step)
            .map(|s| s.recovery_epochs.unwrap_or(epochs_per_step + 1) as f64)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }
}

pub fn run_id(method: PruneMethod, mode: LossMode, seed: u64) -> String {
    format!("{}_{}_seed{}", method.name(), mode.name(), seed)
}

struct RowWriter<'a> {
    writer: MetricsWriter,
    base: MetricsRow,
    cfg: &'a ExperimentConfig,
    teacher: &'a Network,
    teacher_z: Matrix,
    dev: &'a LabeledDataset,
    remaining: f64,
    analyses: Vec<BoundaryAnalysis>,
}

impl RowWriter<'_> {
    fn row(&self, step: usize, remaining_fraction: f64, epoch: usize, split: &'static str) -> MetricsRow {
        MetricsRow {
            step,
            remaining_fraction,
            epoch,
            split,
            ..self.base.clone()
        }
    }

    fn boundary(&mut self, b: &Boundary<'_>) -> CliResult<()> {
        if let Some(st) = b.step_record {
            let after = st.remaining.fraction;
            self.writer.write(&MetricsRow {
                accuracy: Some(st.pre_prune.accuracy),
                loss_total: Some(st.pre_prune.loss),
                loss_ce: Some(st.pre_prune.loss),
                ..self.row(b.step, self.remaining, 0, kind::PRE_PRUNE)
            })?;
            self.writer.write(&MetricsRow {
                accuracy: Some(st.post_prune.accuracy),
                loss_total: Some(st.post_prune.loss),
                loss_ce: Some(st.post_prune.loss),
                ..self.row(b.step, after, 0, kind::POST_PRUNE)
            })?;
            for e in b.epochs {
                self.writer.write(&MetricsRow {
                    accuracy: Some(e.dev.accuracy),
                    loss_total: Some(e.train.total),
                    loss_ce: Some(e.train.ce),
                    loss_kld: Some(e.train.kld),
                    loss_cc: Some(e.train.cc),
                    ..self.row(b.step, after, e.epoch, kind::EPOCH)
                })?;
            }
            self.remaining = after;
        }
        let a = analyse_boundary(self.cfg, self.teacher, &self.teacher_z, b.student, self.dev)?;
        let dev_eval = match b.step_record {
            Some(st) => st.post_retrain,
            None => sdplab_core::trainer::evaluate(b.student, self.dev)?,
        };
        self.writer.write(&MetricsRow {
            accuracy: Some(dev_eval.accuracy),
            loss_total: Some(dev_eval.loss),
            loss_ce: Some(dev_eval.loss),
            snr: Some(a.snr),
            mi_knn: Some(a.mi_knn),
            mi_binned_avg: a.mi_binned_avg,
            kde_mi_input: Some(a.kde_mi_input),
            kde_mi_label: Some(a.kde_mi_label),
            overlap_vs_mbp: b.step_record.map(|s| s.overlap_vs_mbp),
            frob_distortion_total: Some(a.frob_distortion_total),
            repr_distance: Some(a.repr_distance),
            recovery_epochs: b
                .step_record
                .map(|s| s.recovery_epochs.map_or(Recovery::Unrecovered, Recovery::Epochs)),
            ..self.row(b.step, self.remaining, b.epochs.len(), kind::BOUNDARY)
        })?;
        self.analyses.push(a);
        self.writer.flush()
    }
}

/// One prune run into `run_dir`: metrics CSV, student checkpoint, summary.
pub fn execute_prune_run(
    cfg: &ExperimentConfig,
    student_cfg: &StudentConfig,
    teacher: &Network,
    splits: &Splits,
    seed: u64,
    run_dir: &Path,
) -> CliResult<RunSummary> {
    create_dir(run_dir)?;
    let id = run_id(student_cfg.method, student_cfg.loss_mode, seed);
    let mut rows = RowWriter {
        writer: MetricsWriter::create(&run_dir.join(METRICS_FILE))?,
        base: MetricsRow {
            run_id: id.clone(),
            seed,
            method: student_cfg.method.name().to_string(),
            loss_mode: student_cfg.loss_mode.name().to_string(),
            ..Default::default()
        },
        cfg,
        teacher,
        teacher_z: teacher.forward(splits.dev.inputs())?.penultimate().clone(),
        dev: &splits.dev,
        remaining: 1.0,
        analyses: Vec::new(),
    };
    let rng = Rng::new(seed).split_named("student");
    let mut observer_error = None;
    let outcome = iterative_prune(teacher, &splits.train, &splits.dev, student_cfg, &rng, |b| {
        rows.boundary(b).map_err(|e| {
            let msg = e.to_string();
            observer_error = Some(e);
            sdplab_core::Error::Io(std::io::Error::other(msg))
        })
    });
    let outcome = match (outcome, observer_error) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    save_checkpoint(&outcome.student, &run_dir.join(STUDENT_FILE))?;
    let last = outcome.record.steps.last();
    let summary = RunSummary {
        run_id: id,
        seed,
        method: student_cfg.method,
        loss_mode: student_cfg.loss_mode,
        final_remaining: last.map_or(1.0, |s| s.remaining.fraction),
        final_accuracy: last.map_or(outcome.record.initial.accuracy, |s| s.post_retrain.accuracy),
        record: outcome.record,
        analyses: rows.analyses,
    };
    write_file(&run_dir.join(SUMMARY_FILE), &summary_text(&summary))?;
    Ok(summary)
}

fn summary_text(s: &RunSummary) -> String {
    let a = s.final_analysis();
    let mut t = format!(
        "run_id {}\nseed {}\nfinal_remaining {:e}\nfinal_accuracy {:e}\nfinal_snr {:e}\nfinal_mi_knn {:e}\nfinal_kde_mi_label {:e}\n",
        s.run_id, s.seed, s.final_remaining, s.final_accuracy, a.snr, a.mi_knn, a.kde_mi_label
    );
    t += &s.record.summary_text();
    t
}

pub fn cmd_prune_run(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<RunSummary> {
    refuse_existing(&opts.out.join(METRICS_FILE), opts.force)?;
    let seed = opts.primary_seed(cfg);
    let data = load_dataset(cfg, &opts.out)?;
    let teacher = load_checkpoint(&opts.out.join(TEACHER_FILE))?;
    let splits = split_for(cfg, &data, seed)?;
    execute_prune_run(cfg, &cfg.student, &teacher, &splits, seed, &opts.out)
}

/// One grid cell of a sweep.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub method: PruneMethod,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: Result<RunSummary, String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellOutcome>,
    /// Final dev accuracy of each seed's teacher, in seed order.
    pub teacher_accuracy: Vec<(u64, Result<f64, String>)>,
}

impl SweepOutcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

fn describe(e: &CliError) -> String {
    format!("{}: {e}", e.class_name())
}

/// Runs `cells × seeds` under a pool of `jobs` workers. Results come back in
/// grid order whatever the schedule was.
pub fn run_grid(cfg: &ExperimentConfig, cells: &[(PruneMethod, LossMode)], seeds: &[u64], out: &Path, jobs: usize) -> CliResult<SweepOutcome> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))?;
    let prepare = |seed: u64| -> CliResult<(Splits, TeacherOutcome)> {
        let data = match &cfg.dataset.source {
            DatasetSource::Csv { path, label_column } => load_csv(path, label_column)?,
            _ => generate_dataset(cfg, seed)?,
        };
        let splits = split_for(cfg, &data, seed)?;
        let teacher = fit_teacher(cfg, &splits, seed)?;
        Ok((splits, teacher))
    };
    pool.install(|| {
        let prepared: Vec<Result<(Splits, TeacherOutcome), String>> =
            seeds.par_iter().map(|&s| prepare(s).map_err(|e| describe(&e))).collect();
        let teacher_accuracy = seeds
            .iter()
            .zip(&prepared)
            .map(|(&s, p)| {
                (
                    s,
                    p.as_ref()
                        .map(|(_, t)| t.epochs[t.best_epoch - 1].dev.accuracy)
                        .map_err(Clone::clone),
                )
            })
            .collect();
        let grid: Vec<(usize, PruneMethod, LossMode)> = (0..seeds.len())
            .flat_map(|i| cells.iter().map(move |&(m, l)| (i, m, l)))
            .collect();
        let cells = grid
            .par_iter()
            .map(|&(i, method, loss_mode)| {
                let seed = seeds[i];
                let dir = out.join(run_id(method, loss_mode, seed));
                let result = match &prepared[i] {
                    Err(e) => Err(format!("teacher: {e}")),
                    Ok((splits, teacher)) => {
                        let student = cfg.student_for(method, loss_mode);
                        execute_prune_run(cfg, &student, &teacher.teacher, splits, seed, &dir).map_err(|e| describe(&e))
                    }
                };
                if let Err(e) = &result {
                    log::error!("cell {} failed: {e}", dir.display());
                }
                CellOutcome {
                    method,
                    loss_mode,
                    seed,
                    dir,
                    result,
                }
            })
            .collect();
        Ok(SweepOutcome { cells, teacher_accuracy })
    })
}

pub const AGGREGATE_COLUMNS: [&str; 13] = [
    "kind",
    "method",
    "loss_mode",
    "seed",
    "n",
    "status",
    "message",
    "final_remaining_fraction",
    "final_accuracy",
    "final_snr",
    "final_mi_knn",
    "final_kde_mi_label",
    "median_recovery_epochs",
];

fn final_metrics(s: &RunSummary, epochs_per_step: usize) -> [f64; 6] {
    let a = s.final_analysis();
    [
        s.final_remaining,
        s.final_accuracy,
        a.snr,
        a.mi_knn,
        a.kde_mi_label,
        s.median_recovery(1, epochs_per_step).unwrap_or(0.0),
    ]
}

/// Sample mean and (n−1) standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-cell rows in grid order, then a `mean` and a `std` row per
/// (method, loss_mode) over its successful seeds.
pub fn aggregate_csv(outcome: &SweepOutcome, epochs_per_step: usize) -> String {
    let mut s = AGGREGATE_COLUMNS.join(",") + "\n";
    let line = |cells: Vec<String>| cells.join(",") + "\n";
    let clean = |m: &str| m.replace([',', '\n', '\r', '"'], " ");
    let mut groups: Vec<(PruneMethod, LossMode, Vec<[f64; 6]>)> = Vec::new();
    for c in &outcome.cells {
        if !groups.iter().any(|(m, l, _)| *m == c.method && *l == c.loss_mode) {
            groups.push((c.method, c.loss_mode, Vec::new()));
        }
        let (status, message, values) = match &c.result {
            Ok(r) => {
                let v = final_metrics(r, epochs_per_step);
                groups
                    .iter_mut()
                    .find(|(m, l, _)| *m == c.method && *l == c.loss_mode)
                    .expect("inserted above")
                    .2
                    .push(v);
                ("ok", String::new(), v.iter().map(|&x| fmt_float(x)).collect())
            }
            Err(e) => ("failed", clean(e), vec![String::new(); 6]),
        };
        let mut cells = vec![
            "cell".to_string(),
            c.method.name().to_string(),
            c.loss_mode.name().to_string(),
            c.seed.to_string(),
            "1".to_string(),
            status.to_string(),
            message,
        ];
        cells.extend(values);
        s += &line(cells);
    }
    for (method, mode, vals) in &groups {
        for (which, pick) in [("mean", 0usize), ("std", 1)] {
            let mut cells = vec![
                which.to_string(),
                method.name().to_string(),
                mode.name().to_string(),
                String::new(),
                vals.len().to_string(),
                if vals.is_empty() { "failed" } else { "ok" }.to_string(),
                String::new(),
            ];
            for k in 0..6 {
                cells.push(if vals.is_empty() {
                    String::new()
                } else {
                    let col: Vec<f64> = vals.iter().map(|v| v[k]).collect();
                    let (m, sd) = mean_std(&col);
                    fmt_float([m, sd][pick])
                });
            }
            s += &line(cells);
        }
    }
    s
}

/// method × loss_mode × seed; the aggregate is written even when cells fail.
pub fn cmd_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<SweepOutcome> {
    if dir_is_nonempty(&opts.out) && !opts.force {
        return Err(CliError::OutputExists(opts.out.clone()));
    }
    create_dir(&opts.out)?;
    let cells: Vec<(PruneMethod, LossMode)> = cfg
        .sweep_methods
        .iter()
        .flat_map(|&m| cfg.sweep_modes.iter().map(move |&l| (m, l)))
        .collect();
    let outcome = run_grid(cfg, &cells, &opts.seeds(cfg), &opts.out, opts.jobs)?;
    write_file(
        &opts.out.join(AGGREGATE_FILE),
        &aggregate_csv(&outcome, cfg.student.schedule.epochs_per_step),
    )?;
    Ok(outcome)
}
