//! Command-line front end. Every subcommand reads the same JSON config and
//! writes under its `output_dir`:
//!
//! ```text
//! synth    data/manifest.json, data/tensors/
//! train    checkpoints/
//! cam      cams/<record>_c<class>.{lta,pgm}
//! augment  augment/{smote,ours0,ours<s>}/
//! eval     reports/eval.{json,csv}
//! report   report.{json,csv}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::cam::{class_cam, write_pgm};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{downstream_eval, EvalReport, EvalRow};
use crate::fusion::{augment_tailset, smote_augment, DenoiseConfig, DenoiserRegistry};
use crate::store::{partition_head_tail, synth_longtail, Dataset, PartitionSpec, Split};
use crate::tensor::write_tensor;
use crate::trainer::{run_il, CheckpointSet};

#[derive(Debug, Parser)]
#[command(
    name = "ltaug",
    version,
    about = "Long-tail latent augmentation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic long-tailed dataset.
    Synth(Common),
    /// Iterated training of student, decoder and classifier.
    Train(Common),
    /// Export class activation maps for a manifest.
    Cam {
        #[command(flatten)]
        common: Common,
        /// Manifest to export for; defaults to the generated dataset.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Build the SMOTE and fused tail-class datasets.
    Augment(Common),
    /// Downstream evaluation of every augmented dataset.
    Eval(Common),
    /// Merge evaluation reports into one table.
    Report(Common),
}

/// Parses `argv` (program name first) and runs one subcommand. Returns 0 on
/// success, 1 on a runtime or config error and 2 on a usage error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    let load = |c: &Common| RunConfig::load(&c.config);
    match cmd {
        Command::Synth(c) => cmd_synth(&load(&c)?).map(|_| ()),
        Command::Train(c) => cmd_train(&load(&c)?).map(|_| ()),
        Command::Cam { common, manifest } => {
            cmd_cam(&load(&common)?, manifest.as_deref()).map(|_| ())
        }
        Command::Augment(c) => cmd_augment(&load(&c)?),
        Command::Eval(c) => cmd_eval(&load(&c)?).map(|_| ()),
        Command::Report(c) => cmd_report(&load(&c)?).map(|_| ()),
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, PartitionSpec)> {
    let data = Dataset::load(cfg.data_dir())?;
    let partition = partition_head_tail(&data.manifest, &cfg.partition)?;
    Ok((data, partition))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let synth = synth_longtail(&cfg.synth, cfg.stage_seed("synth"))?;
    let path = synth.dataset.save(cfg.data_dir())?;
    log::info!(
        "wrote {} records to {}",
        synth.dataset.manifest.records.len(),
        path.display()
    );
    Ok(path)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<CheckpointSet> {
    let (data, partition) = load_data(cfg)?;
    let set = run_il(&cfg.il_config(), &data, &partition)?;
    set.save(cfg.checkpoint_dir())?;
    log::info!("wrote checkpoints to {}", cfg.checkpoint_dir().display());
    Ok(set)
}

/// One CAM per (train record, positive class) pair, computed on the
/// record's sparse encoding. Returns the number of maps written.
pub fn cmd_cam(cfg: &RunConfig, manifest: Option<&Path>) -> Result<usize> {
    let data = match manifest {
        Some(p) => Dataset::load(p)?,
        None => Dataset::load(cfg.data_dir())?,
    };
    let models = CheckpointSet::load(cfg.checkpoint_dir())?.final_models()?;
    let dir = cfg.cam_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = 0;
    for i in data.indices(Split::Train) {
        let r = &data.manifest.records[i];
        let zs = models.student.forward(&data.tensors[i])?;
        for c in r.labels.classes() {
            let cam = class_cam(&models.classifier, zs.tensor(), c, cfg.cam.mode)?;
            let stem = format!("{}_c{c:02}", r.id);
            write_tensor(&cam.map.to_stored(), dir.join(format!("{stem}.lta")))?;
            write_pgm(&cam.map, dir.join(format!("{stem}.pgm")))?;
            written += 1;
        }
    }
    log::info!("wrote {written} maps to {}", dir.display());
    Ok(written)
}

pub fn denoised_dir_name(d: &DenoiseConfig) -> String {
    format!("ours{}", d.effective_steps())
}

pub fn cmd_augment(cfg: &RunConfig) -> Result<()> {
    let (data, partition) = load_data(cfg)?;
    let models = CheckpointSet::load(cfg.checkpoint_dir())?.final_models()?;
    let root = cfg.augment_dir();
    let seed = cfg.stage_seed("augment");

    let smote = smote_augment(
        &data,
        &partition,
        cfg.fusion.target_per_tail,
        cfg.fusion.smote_k,
        cfg.stage_seed("smote"),
    )?;
    smote.save(root.join("smote"))?;

    let registry = DenoiserRegistry::default();
    let acfg = cfg.augment_config();
    for (name, dcfg) in [
        ("ours0".to_string(), DenoiseConfig::zero_steps()),
        (denoised_dir_name(&cfg.denoise), cfg.denoise.clone()),
    ] {
        let out = augment_tailset(&data, &partition, &models, &acfg, &dcfg, &registry, seed)?;
        out.dataset.save(root.join(&name))?;
        log::info!("{name}: {} fused records", out.fusions.len());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let (data, partition) = load_data(cfg)?;
    let root = cfg.augment_dir();
    let seed = cfg.stage_seed("eval");
    let steps = cfg.denoise.effective_steps();

    let baseline = downstream_eval("baseline", &data, &data, &partition, &cfg.eval, seed, None)?;
    let mut rows = vec![baseline.row];
    for (method, dir) in [
        ("smote".to_string(), "smote".to_string()),
        ("ours@0".to_string(), "ours0".to_string()),
        (format!("ours@{steps}"), denoised_dir_name(&cfg.denoise)),
    ] {
        let train = Dataset::load(root.join(dir))?;
        let r = downstream_eval(
            &method,
            &train,
            &data,
            &partition,
            &cfg.eval,
            seed,
            Some(&baseline.classifier),
        )?;
        rows.push(r.row);
    }
    let report = EvalReport {
        rows,
        config: serde_json::to_value(cfg).map_err(|e| Error::Json {
            path: PathBuf::from("<config>"),
            source: e,
        })?,
        seed: cfg.seed,
    };
    let dir = cfg.reports_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    report.save(dir.join("eval.json"), dir.join("eval.csv"))?;
    Ok(report)
}

/// Concatenates every report under `reports/` (sorted by file name). A
/// method seen twice keeps its last row.
pub fn cmd_report(cfg: &RunConfig) -> Result<EvalReport> {
    let dir = cfg.reports_dir();
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("no reports in {}", dir.display())));
    }
    let mut rows: Vec<EvalRow> = Vec::new();
    let mut last = None;
    for f in &files {
        let r = EvalReport::load(f)?;
        for row in r.rows.iter().cloned() {
            match rows.iter_mut().find(|x| x.method == row.method) {
                Some(x) => *x = row,
                None => rows.push(row),
            }
        }
        last = Some(r);
    }
    let last = last.expect("at least one report");
    let merged = EvalReport {
        rows,
        config: last.config,
        seed: last.seed,
    };
    merged.save(
        cfg.output_dir.join("report.json"),
        cfg.output_dir.join("report.csv"),
    )?;
    eprint!("{}", merged.to_table());
    Ok(merged)
}
