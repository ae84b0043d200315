//! The `mbr` command-line tool: synth, train, embed, eval and audit.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::auditor::audit_all;
use crate::dataset::{load_manifest, synth_dataset, DatasetManifest, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluator::{extract_embeddings, rank_and_score, read_embeddings, write_embeddings, Protocol, RetrievalReport};
use crate::model::{build_model, Model};
use crate::trainer::{run_training, timestamped_dir, TrainJob, TrainState};

pub use config::{resolve, RunConfig, DATA_ROOT_ENV};

/// Name of the resolved configuration inside every run directory.
pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_FILE: &str = "eval.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mbr", version, about = "Multi-branch vehicle re-identification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set trainer.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Query,
    Gallery,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Query => Split::Query,
            SplitArg::Gallery => Split::Gallery,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset in the csv layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a preset; outputs go to a timestamped run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a training checkpoint inside an existing run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Score the final model on the query and gallery splits.
        #[arg(long)]
        evaluate: bool,
    },
    /// Write descriptors of one split to an embedding file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Retrieval metrics from a checkpoint or from two embedding files.
    Eval {
        #[arg(long, conflicts_with_all = ["query", "gallery"], required_unless_present_all = ["query", "gallery"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "gallery")]
        query: Option<PathBuf>,
        #[arg(long, requires = "query")]
        gallery: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "query")]
        query_split: SplitArg,
        #[arg(long, value_enum, default_value = "gallery")]
        gallery_split: SplitArg,
        /// Keep same-vehicle same-camera gallery entries.
        #[arg(long)]
        no_filter: bool,
        /// Where to store the JSON result (defaults next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare built presets with the published sizes.
    Audit {
        /// Preset names, or `all`.
        #[arg(default_value = "all")]
        presets: Vec<String>,
        /// Also check the side-embedding size claim.
        #[arg(long)]
        lai: bool,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth { out, cfg } => {
            let sc: SynthConfig = resolve(cfg.config.as_deref(), &cfg.overrides)?;
            let ds = synth_dataset(&out, &sc)?;
            println!(
                "wrote {} train, {} query and {} gallery images to {}",
                ds.train.len(),
                ds.query.len(),
                ds.gallery.len(),
                out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Train { cfg, resume, evaluate } => {
            let dir = cmd_train(&cfg, resume.as_deref(), evaluate)?;
            println!("{}", dir.display());
            Ok(EXIT_OK)
        }
        Command::Embed { checkpoint, split, out, cfg } => {
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            let (model, _, _) = Model::load(&checkpoint)?;
            let manifest = load_split(&rc, split.into())?;
            let m = extract_embeddings(&model, &manifest, rc.eval.use_side_info, rc.eval.batch_size)?;
            write_embeddings(&out, &m)?;
            println!("{} embeddings of dim {} written to {}", m.rows(), m.dim, out.display());
            Ok(EXIT_OK)
        }
        Command::Eval { checkpoint, query, gallery, query_split, gallery_split, no_filter, out, cfg } => {
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.overrides)?;
            let protocol = Protocol { filter_same_camera: rc.eval.protocol.filter_same_camera && !no_filter };
            let (q, g, default_out) = match (checkpoint, query, gallery) {
                (Some(ckpt), _, _) => {
                    let (model, _, _) = Model::load(&ckpt)?;
                    let embed = |s: SplitArg| -> Result<_> {
                        let manifest = load_split(&rc, s.into())?;
                        extract_embeddings(&model, &manifest, rc.eval.use_side_info, rc.eval.batch_size)
                    };
                    let dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
                    (embed(query_split)?, embed(gallery_split)?, Some(dir.join(EVAL_FILE)))
                }
                (None, Some(qp), Some(gp)) => (read_embeddings(&qp)?, read_embeddings(&gp)?, None),
                _ => return Err(Error::Config("eval needs --checkpoint or both --query and --gallery".into())),
            };
            let report = rank_and_score(&q, &g, protocol)?.report();
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(path) = out.or(default_out) {
                write_json(&path, &report)?;
            }
            Ok(EXIT_OK)
        }
        Command::Audit { presets, lai, json } => {
            let report = audit_all(&presets, lai)?;
            print!("{}", report.to_table());
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
            Ok(if report.pass { EXIT_OK } else { EXIT_VALIDATION })
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn load_split(rc: &RunConfig, split: Split) -> Result<DatasetManifest> {
    load_manifest(&rc.data_root()?, rc.dataset.layout, split)
}

/// Trains as configured and returns the run directory. With `resume`, the
/// run continues in the checkpoint's directory, reading its stored config
/// unless another one is given.
pub fn cmd_train(cfg: &ConfigArgs, resume: Option<&Path>, evaluate: bool) -> Result<PathBuf> {
    let resume_dir = resume.map(|p| p.parent().map(Path::to_path_buf).unwrap_or_default());
    let config_path = match (&cfg.config, &resume_dir) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(dir)) => Some(dir.join(CONFIG_FILE)).filter(|p| p.exists()),
        (None, None) => None,
    };
    let rc = RunConfig::load(config_path.as_deref(), &cfg.overrides)?;
    rc.architecture(None)?;
    let train = load_split(&rc, Split::Train)?;
    let spec = rc.architecture(Some(train.n_classes))?;
    let plan = rc.resolved_plan(&spec);
    let resolved = RunConfig { trainer: plan.clone(), ..rc.clone() };
    let (mut state, dir) = match (resume, resume_dir) {
        (Some(ckpt), Some(dir)) => {
            let state = TrainState::load(ckpt, &plan)?;
            if state.model.spec != spec {
                return Err(Error::Config(format!(
                    "checkpoint {} was built as {} and does not match the configured architecture",
                    ckpt.display(),
                    state.model.spec.name
                )));
            }
            (state, dir)
        }
        _ => {
            let model = build_model(&spec, rc.seed, rc.pretrained.as_deref())?;
            (TrainState::new(model, &plan, rc.seed), timestamped_dir(&rc.output_dir, &spec.name)?)
        }
    };
    write_json(&dir.join(CONFIG_FILE), &resolved)?;
    let augment = rc.augmentation_for(&spec);
    let job = TrainJob {
        manifest: &train,
        plan: &plan,
        weights: &rc.loss,
        pk: rc.pk(),
        augment: &augment,
        out_dir: &dir,
    };
    let outcome = run_training(&mut state, &job, |_, _| {})?;
    log::info!("final checkpoint {}", outcome.final_checkpoint.display());
    if evaluate {
        let report = evaluate_model(&state.model, &rc)?;
        write_json(&dir.join(EVAL_FILE), &report)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(dir)
}

/// Query/gallery retrieval metrics of a model under the configured protocol.
pub fn evaluate_model(model: &Model, rc: &RunConfig) -> Result<RetrievalReport> {
    let q = extract_embeddings(model, &load_split(rc, Split::Query)?, rc.eval.use_side_info, rc.eval.batch_size)?;
    let g = extract_embeddings(model, &load_split(rc, Split::Gallery)?, rc.eval.use_side_info, rc.eval.batch_size)?;
    Ok(rank_and_score(&q, &g, rc.eval.protocol)?.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_are_validation_failures() {
        assert_eq!(run(["mbr", "frobnicate"]), EXIT_VALIDATION);
        assert_eq!(run(["mbr", "eval", "--query", "q.emb"]), EXIT_VALIDATION);
        assert_eq!(run(["mbr", "--help"]), EXIT_OK);
    }

    #[test]
    fn unknown_preset_exits_with_validation_code() {
        assert_eq!(run(["mbr", "audit", "R51"]), EXIT_VALIDATION);
    }

    #[test]
    fn missing_files_are_runtime_failures() {
        let dir = tempfile::tempdir().unwrap();
        let q = dir.path().join("q.emb");
        let code = run(["mbr", "eval", "--query", q.to_str().unwrap(), "--gallery", q.to_str().unwrap()]);
        assert_eq!(code, EXIT_RUNTIME);
    }
}
