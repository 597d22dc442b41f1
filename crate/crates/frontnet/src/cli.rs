//! Argument parsing and dispatch for the `frontnet` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use frontnet_core::hooks::HookType;
use frontnet_core::losses::Supervision;
use log::info;

use crate::commands::{self, GenOptions};
use crate::config::{parse_kv, parse_overrides, RunConfig, DATA_ROOT_ENV};
use crate::io::load_scene;

#[derive(Parser, Debug)]
#[command(name = "frontnet", version, about = "Calving front segmentation and delineation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset (`train/` and `val/`).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 448)]
        size: usize,
        #[arg(long, default_value_t = 20.0)]
        meters_per_pixel: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 112)]
        patch: usize,
    },
    /// Train a model; writes a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on a scene directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory; defaults to `$FRONTNET_DATA_ROOT/val`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict zones and fronts for scenes.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scene names; all scenes in the directory when omitted.
        #[arg(long, value_delimiter = ',')]
        scenes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a grid of hook/supervision arms over seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Test scenes; defaults to `<data>/../val`.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "none,sa,senet,cbam,esca")]
        hooks: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "none,ds,cds")]
        supervision: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Draw figures from the CSVs of a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Training scenes; defaults to `$FRONTNET_DATA_ROOT/train`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `key = value` config file; `--key value` overrides apply on top.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Config overrides such as `--epochs 5 --hook cbam`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub overrides: Vec<String>,
}

impl RunArgs {
    pub fn config(&self) -> Result<RunConfig> {
        let mut pairs = match &self.config {
            Some(p) => parse_kv(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => Vec::new(),
        };
        pairs.extend(parse_overrides(&self.overrides)?);
        RunConfig::from_pairs(&pairs)
    }
}

/// `dir`, or `$FRONTNET_DATA_ROOT/<sub>`.
pub fn data_dir(dir: &Option<PathBuf>, sub: &str) -> Result<PathBuf> {
    if let Some(d) = dir {
        return Ok(d.clone());
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => Ok(Path::new(&root).join(sub)),
        None => bail!("no data directory given and {DATA_ROOT_ENV} is unset"),
    }
}

fn parse_hooks(names: &[String]) -> Result<Vec<Option<HookType>>> {
    names
        .iter()
        .map(|n| match n.as_str() {
            "none" => Ok(None),
            s => HookType::parse(s).map(Some).with_context(|| format!("unknown hook `{s}`")),
        })
        .collect()
}

fn parse_sups(names: &[String]) -> Result<Vec<Supervision>> {
    names
        .iter()
        .map(|n| Supervision::parse(n).with_context(|| format!("unknown supervision `{n}`")))
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            train,
            val,
            size,
            meters_per_pixel,
            seed,
            patch,
        } => commands::gen_data(
            &out,
            &GenOptions {
                train,
                val,
                size,
                meters_per_pixel,
                seed,
                patch,
            },
        ),
        Command::Train { run } => {
            let cfg = run.config()?;
            let scenes = commands::load_dataset(&data_dir(&run.data, "train")?)?;
            let dir = commands::new_run_dir(&run.runs, cfg.train.seed)?;
            info!("run directory {}", dir.display());
            let r = commands::train_into(&dir, &cfg, &scenes)?;
            info!("best epoch {} after {:.1}s", r.outcome.best_epoch, r.seconds);
            Ok(())
        }
        Command::Evaluate { checkpoint, data, out } => {
            let scenes = commands::load_dataset(&data_dir(&data, "val")?)?;
            let (_, report) = commands::evaluate_into(&out, &checkpoint, &scenes)?;
            print!("{}", crate::report::text_report(&report));
            Ok(())
        }
        Command::Predict {
            checkpoint,
            data,
            scenes,
            out,
        } => {
            let dir = data_dir(&data, "val")?;
            let all = if scenes.is_empty() {
                commands::load_dataset(&dir)?
            } else {
                scenes
                    .iter()
                    .map(|n| Ok((n.clone(), load_scene(&dir, n)?)))
                    .collect::<Result<Vec<_>>>()?
            };
            for (name, scene) in &all {
                commands::predict_into(&out, &checkpoint, name, scene)?;
                info!("predicted {name}");
            }
            Ok(())
        }
        Command::Ablate {
            run,
            test,
            hooks,
            supervision,
            seeds,
        } => {
            let cfg = run.config()?;
            let train_dir = data_dir(&run.data, "train")?;
            let test_dir = match test {
                Some(t) => t,
                None => train_dir.parent().map(|p| p.join("val")).context("no test directory")?,
            };
            let train = commands::load_dataset(&train_dir)?;
            let test = commands::load_dataset(&test_dir)?;
            let dir = commands::new_run_dir(&run.runs, cfg.train.seed)?;
            let arms = commands::ablate_into(&dir, &cfg, &parse_hooks(&hooks)?, &parse_sups(&supervision)?, &seeds, &train, &test)?;
            print!("{}", crate::report::ablation_table(&arms));
            Ok(())
        }
        Command::Plot { run } => {
            for p in commands::plot_run(&run)? {
                info!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_overrides_reach_the_config() {
        let cli = Cli::try_parse_from(["frontnet", "train", "--data", "d", "--epochs", "3", "--hook=cbam"]).unwrap();
        let Command::Train { run } = cli.command else { panic!() };
        let cfg = run.config().unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.model.hook, Some(HookType::Cbam));
    }

    #[test]
    fn hook_names_include_baseline() {
        let h = parse_hooks(&["none".into(), "esca".into()]).unwrap();
        assert_eq!(h, vec![None, Some(HookType::Esca)]);
        assert!(parse_hooks(&["nope".into()]).is_err());
    }
}
