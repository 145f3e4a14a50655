//! Command-line front end. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data, file or runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::backbone::{load_checkpoint, plain_network_counts, save_checkpoint, Model};
use crate::error::{Error, Result};
use crate::memory::PrototypeStore;
use crate::pruning::{score_dataset, write_score_csv};
use crate::train::{accuracy, write_log_csv};

use super::config::{DatasetKind, ExperimentConfig};
use super::data::split_class_incremental;
use super::experiment::{
    model_config, run_experiment, run_incremental, run_initial_stage, ExperimentData, InitialStage,
};

#[derive(Debug, Parser)]
#[command(
    name = "eimcil",
    version,
    about = "Class-incremental learning with fuseable adapters"
)]
struct Cli {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the initial classes; writes initial.ckpt and initial.lpro.
    InitTrain,
    /// Run all incremental phases and write metrics.csv.
    IncrRun {
        /// Directory holding initial.ckpt / initial.lpro from init-train.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Test accuracy of a checkpoint over the classes it knows.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fold live adapters into a checkpoint.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to overwriting the input.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write EL2N scores of the training samples a checkpoint knows.
    ScoreDump {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Parameter and MAC counts against the dense-convolution baseline.
    Count,
}

fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    for line in cfg.to_text().lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

/// Training samples and class count a trained model covers.
fn known_classes(cfg: &ExperimentConfig, data: &ExperimentData, model: &Model) -> Result<Vec<usize>> {
    let plan = split_class_incremental(data.class_count(), cfg.phases, cfg.seed)?;
    let order = plan.order();
    let k = model.num_classes();
    if k > order.len() {
        return Err(Error::Data(format!(
            "checkpoint has {k} classes but the dataset only {}",
            order.len()
        )));
    }
    Ok(order[..k].to_vec())
}

fn head_map(classes: &[usize]) -> std::collections::BTreeMap<usize, usize> {
    classes.iter().enumerate().map(|(h, &c)| (c, h)).collect()
}

fn load_initial(dir: &Path) -> Result<InitialStage> {
    Ok(InitialStage {
        model: load_checkpoint(dir.join("initial.ckpt"))?,
        store: PrototypeStore::load(dir.join("initial.lpro"))?,
        steps: 0,
        log: Vec::new(),
        seconds: 0.0,
    })
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Count => {
            let mut model_cfg = cfg.model.clone();
            let classes = match cfg.dataset {
                DatasetKind::Synthetic => {
                    let n = cfg.synthetic.size;
                    model_cfg.input_shape = [3, n, n];
                    cfg.synthetic.classes
                }
                DatasetKind::Idx => {
                    let data = ExperimentData::load(&cfg)?;
                    model_cfg = model_config(&cfg, &data);
                    data.class_count()
                }
            };
            let model = Model::build(&model_cfg, classes, cfg.seed)?;
            let (pp, pm) = plain_network_counts(&model_cfg, classes)?;
            let (ep, em) = (model.param_count(), model.mac_count());
            writeln!(
                out,
                "params eim={ep} plain={pp} ratio={:.4}",
                ep as f64 / pp as f64
            )?;
            writeln!(out, "macs eim={em} plain={pm} ratio={:.4}", em as f64 / pm as f64)?;
        }
        Command::InitTrain => {
            let data = ExperimentData::load(&cfg)?;
            let plan = split_class_incremental(data.class_count(), cfg.phases, cfg.seed)?;
            let stage = run_initial_stage(&cfg, &data, &plan)?;
            let test = data.test.select(&plan.initial_classes, &plan.head_of())?;
            let acc = accuracy(&stage.model, test.images(), test.labels())?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            save_checkpoint(&stage.model, cfg.out_dir.join("initial.ckpt"))?;
            stage.store.save(cfg.out_dir.join("initial.lpro"))?;
            write_log_csv(&stage.log, cfg.out_dir.join("train_log.csv"))?;
            echo_config(&cfg, out)?;
            writeln!(
                out,
                "initial classes {:?}: test accuracy {acc:.4} after {} steps",
                plan.initial_classes, stage.steps
            )?;
        }
        Command::IncrRun { init } => {
            let report = match init {
                None => run_experiment(&cfg)?,
                Some(dir) => {
                    let data = ExperimentData::load(&cfg)?;
                    let plan = split_class_incremental(data.class_count(), cfg.phases, cfg.seed)?;
                    let stage = load_initial(dir)?;
                    if stage.model.num_classes() != plan.initial_classes.len() {
                        return Err(Error::Data(format!(
                            "initial checkpoint has {} classes, plan expects {}",
                            stage.model.num_classes(),
                            plan.initial_classes.len()
                        )));
                    }
                    run_incremental(&cfg, &data, &plan, stage)?
                }
            };
            echo_config(&cfg, out)?;
            write!(out, "{}", report.metrics_csv)?;
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("final.ckpt"));
            let model = load_checkpoint(&path)?;
            let data = ExperimentData::load(&cfg)?;
            let classes = known_classes(&cfg, &data, &model)?;
            let test = data.test.select(&classes, &head_map(&classes))?;
            let acc = accuracy(&model, test.images(), test.labels())?;
            writeln!(
                out,
                "classes {}: top1 {acc:.4} on {} test images",
                classes.len(),
                test.len()
            )?;
        }
        Command::Fuse { checkpoint, output } => {
            let mut model = load_checkpoint(checkpoint)?;
            let data = ExperimentData::load(&cfg)?;
            let probe: Vec<_> = (0..data.test.len().min(16)).map(|i| data.test.image(i)).collect();
            let before = probe
                .iter()
                .map(|x| model.classify(x))
                .collect::<Result<Vec<_>>>()?;
            model.fuse_adapters()?;
            let mut worst: f64 = 0.0;
            for (x, b) in probe.iter().zip(&before) {
                worst = worst.max(model.classify(x)?.max_abs_diff(b));
            }
            let target = output.as_ref().unwrap_or(checkpoint);
            save_checkpoint(&model, target)?;
            writeln!(
                out,
                "fused into {} (max logit change {worst:.3e})",
                target.display()
            )?;
        }
        Command::ScoreDump { checkpoint } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("final.ckpt"));
            let model = load_checkpoint(&path)?;
            let data = ExperimentData::load(&cfg)?;
            let classes = known_classes(&cfg, &data, &model)?;
            let train = data.train.select(&classes, &head_map(&classes))?;
            let records = score_dataset(&model, train.images(), train.labels(), 0)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let target = cfg.out_dir.join("scores.csv");
            write_score_csv(&records, &target)?;
            writeln!(out, "{} scores written to {}", records.len(), target.display())?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match execute(&parsed, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let Error::Phase { .. } = e {
                let _ = writeln!(err, "caused by: {}", e.root());
            }
            exit_code(&e)
        }
    }
}
