//! End-to-end class-incremental runs.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use crate::backbone::{save_checkpoint, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::memory::PrototypeStore;
use crate::numeric::Tensor;
use crate::pruning::El2nRecord;
use crate::train::{
    accuracy, build_prototypes, train_incremental_phase, train_initial, write_log_csv, EpochLog,
    IdentityProbe, PhaseState, TrainData,
};

use super::config::{DatasetKind, ExperimentConfig};
use super::data::{load_idx_dataset, split_class_incremental, synthetic_dataset, Dataset, PhasePlan};

pub const METRICS_HEADER: &str =
    "phase,classes_seen,top1_acc,avg_inc_acc,retained_samples,params,flops,seconds";

/// Train and test sets of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

impl ExperimentData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let (train, test) = match config.dataset {
            DatasetKind::Synthetic => synthetic_dataset(&config.synthetic)?,
            DatasetKind::Idx => {
                let p = &config.idx;
                let need = |o: &Option<PathBuf>, key: &str| {
                    o.clone()
                        .ok_or_else(|| Error::Config(format!("dataset = idx needs {key}")))
                };
                (
                    load_idx_dataset(
                        need(&p.train_images, "idx.train_images")?,
                        need(&p.train_labels, "idx.train_labels")?,
                    )?,
                    load_idx_dataset(
                        need(&p.test_images, "idx.test_images")?,
                        need(&p.test_labels, "idx.test_labels")?,
                    )?,
                )
            }
        };
        if train.shape() != test.shape() {
            return Err(Error::Data(format!(
                "train images are {:?} but test images are {:?}",
                train.shape(),
                test.shape()
            )));
        }
        Ok(Self { train, test })
    }

    /// Number of classes covered by the run.
    pub fn class_count(&self) -> usize {
        self.train.class_count().max(self.test.class_count())
    }
}

/// Model architecture for this data.
pub fn model_config(config: &ExperimentConfig, data: &ExperimentData) -> ModelConfig {
    ModelConfig {
        input_shape: data.train.shape(),
        ..config.model.clone()
    }
}

/// Outcome of the initial stage.
#[derive(Debug, Clone)]
pub struct InitialStage {
    pub model: Model,
    pub store: PrototypeStore,
    pub steps: usize,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMetrics {
    pub phase: usize,
    pub classes_seen: usize,
    pub top1_acc: f64,
    pub avg_inc_acc: f64,
    /// Accuracy over the initial classes only (all heads competing).
    pub initial_class_acc: f64,
    pub retained_samples: usize,
    pub params: usize,
    pub flops: usize,
    pub steps: usize,
    pub seconds: f64,
    /// Zero-adapter identity at phase start (incremental phases only).
    pub identity: Option<IdentityProbe>,
    pub records: Vec<El2nRecord>,
    pub retained: Vec<usize>,
    /// Backbone parameter count before adapters and after fusion.
    pub backbone_params: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub plan: PhasePlan,
    pub phases: Vec<PhaseMetrics>,
    pub final_model: Model,
    pub store: PrototypeStore,
    pub log: Vec<EpochLog>,
    pub metrics_csv: String,
}

impl ExperimentReport {
    pub fn final_accuracy(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.top1_acc)
    }

    pub fn average_incremental_accuracy(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.avg_inc_acc)
    }

    /// Optimizer steps over the incremental phases.
    pub fn incremental_steps(&self) -> usize {
        self.phases.iter().skip(1).map(|p| p.steps).sum()
    }
}

fn backbone_params(model: &Model) -> usize {
    model.param_count() - model.classifier.weight.numel() - model.classifier.bias.numel()
}

fn evaluate(model: &Model, data: &TrainData) -> Result<f64> {
    accuracy(model, data.images(), data.labels())
}

/// Trains the initial classes and stores their prototypes.
pub fn run_initial_stage(
    config: &ExperimentConfig,
    data: &ExperimentData,
    plan: &PhasePlan,
) -> Result<InitialStage> {
    let start = Instant::now();
    let cfg = model_config(config, data);
    let mut model = Model::build(&cfg, plan.initial_classes.len(), config.seed)?;
    let train = data.train.select(&plan.initial_classes, &plan.head_of())?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.seed;
    let mut log = Vec::new();
    let steps = train_initial(&mut model, &train, &train_cfg, &mut log)?;
    let mut store = PrototypeStore::new(model.feature_dim())?;
    let all: Vec<usize> = (0..train.len()).collect();
    build_prototypes(&model, &train, &all, &mut store)?;
    Ok(InitialStage {
        model,
        store,
        steps,
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn fmt_metrics(rows: &[PhaseMetrics], wall_clock: bool) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let seconds = if wall_clock {
            format!("{:.3}", r.seconds)
        } else {
            "NA".to_string()
        };
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{},{}",
            r.phase,
            r.classes_seen,
            r.top1_acc,
            r.avg_inc_acc,
            r.retained_samples,
            r.params,
            r.flops,
            seconds
        )
        .expect("writing to a String cannot fail");
    }
    out
}

fn probe_images(data: &TrainData, size: usize) -> Vec<Tensor> {
    let n = data.len();
    if n == 0 || size == 0 {
        return Vec::new();
    }
    // evenly spread so every seen class is represented
    (0..size.min(n))
        .map(|i| data.images()[i * n / size.min(n)].clone())
        .collect()
}

/// Runs the incremental phases from a finished initial stage and writes
/// `metrics.csv`, `timing.csv`, `train_log.csv`, `config.txt`,
/// `final.ckpt` and `prototypes.lpro` into `config.out_dir`.
pub fn run_incremental(
    config: &ExperimentConfig,
    data: &ExperimentData,
    plan: &PhasePlan,
    initial: InitialStage,
) -> Result<ExperimentReport> {
    let head_of = plan.head_of();
    let initial_test = data.test.select(&plan.initial_classes, &head_of)?;
    let seen = plan.seen_after(0);
    let test0 = data.test.select(&seen, &head_of)?;
    let InitialStage {
        mut model,
        mut store,
        steps,
        mut log,
        seconds,
    } = initial;

    let acc0 = evaluate(&model, &test0)?;
    let mut rows = vec![PhaseMetrics {
        phase: 0,
        classes_seen: seen.len(),
        top1_acc: acc0,
        avg_inc_acc: acc0,
        initial_class_acc: evaluate(&model, &initial_test)?,
        retained_samples: data.train.select(&seen, &head_of)?.len(),
        params: model.param_count(),
        flops: model.mac_count(),
        steps,
        seconds,
        identity: None,
        records: Vec::new(),
        retained: Vec::new(),
        backbone_params: (backbone_params(&model), backbone_params(&model)),
    }];

    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.seed;
    for (i, new_classes) in plan.phases.iter().enumerate() {
        let phase = i + 1;
        let mut run = || -> Result<(Model, PrototypeStore, PhaseMetrics)> {
            let start = Instant::now();
            let before = backbone_params(&model);
            let phase_data = data.train.select(new_classes, &head_of)?;
            let seen = plan.seen_after(phase);
            let test = data.test.select(&seen, &head_of)?;
            let mut state = PhaseState::begin(phase, model.clone(), store.clone(), new_classes.len())?;
            let identity = state.identity_probe(&probe_images(&test, config.probe_size))?;
            let report = train_incremental_phase(&mut state, &phase_data, &train_cfg, &mut log)?;
            let (model, store) = state.into_parts();
            let acc = evaluate(&model, &test)?;
            let prev: f64 = rows.iter().map(|r| r.top1_acc).sum();
            Ok((
                model.clone(),
                store,
                PhaseMetrics {
                    phase,
                    classes_seen: seen.len(),
                    top1_acc: acc,
                    avg_inc_acc: (prev + acc) / (rows.len() + 1) as f64,
                    initial_class_acc: evaluate(&model, &initial_test)?,
                    retained_samples: report.retained.len(),
                    params: model.param_count(),
                    flops: model.mac_count(),
                    steps: report.steps,
                    seconds: start.elapsed().as_secs_f64(),
                    identity: Some(identity),
                    records: report.records,
                    retained: report.retained,
                    backbone_params: (before, backbone_params(&model)),
                },
            ))
        };
        let (m, s, metrics) = run().map_err(|e| e.in_phase(phase))?;
        model = m;
        store = s;
        rows.push(metrics);
    }

    let metrics_csv = fmt_metrics(&rows, config.wall_clock);
    let out = &config.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), &metrics_csv)?;
    let mut timing = String::from("phase,steps,seconds\n");
    for r in &rows {
        writeln!(timing, "{},{},{:.3}", r.phase, r.steps, r.seconds).expect("String write");
    }
    fs::write(out.join("timing.csv"), timing)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    write_log_csv(&log, out.join("train_log.csv"))?;
    save_checkpoint(&model, out.join("final.ckpt"))?;
    store.save(out.join("prototypes.lpro"))?;

    Ok(ExperimentReport {
        plan: plan.clone(),
        phases: rows,
        final_model: model,
        store,
        log,
        metrics_csv,
    })
}

/// Initial training followed by every incremental phase.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let data = ExperimentData::load(config)?;
    let plan = split_class_incremental(data.class_count(), config.phases, config.seed)?;
    let initial = run_initial_stage(config, &data, &plan).map_err(|e| e.in_phase(0))?;
    run_incremental(config, &data, &plan, initial)
}
