//! Operator surface. Each subcommand reads an optional JSON config (unknown
//! keys rejected), applies flag overrides and writes its artifacts to files;
//! progress goes to standard error.

mod edit;
mod eval;
mod gendata;
mod maskgen;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub use edit::{edit, load_model, EditArgs, EditConfig, EditManifest, LoadedModel, EDIT_GRID, EDIT_MANIFEST, EDIT_SPARSE};
pub use eval::{eval, EvalArgs, EvalConfig, REPORT_FILE};
pub use gendata::{gendata, GendataArgs, GendataConfig};
pub use maskgen::{maskgen, MaskgenArgs, MaskgenConfig, MaskgenSummary, MASKGEN_SUMMARY};
pub use train::{checkpoint_path, loss_path, manifest_path, optimizer_path, train, TrainArgs, TrainOutcome, TrainRunConfig};

#[derive(Debug, Parser)]
#[command(name = "bve", version, about = "Voxel asset editing: data generation, training, masks, inference and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON config file; absent keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural paired-edit corpus.
    Gendata(GendataArgs),
    /// Train the structure (`ss`) or latent (`slat`) flow network.
    Train(TrainArgs),
    /// Register two assets and write preservation masks.
    Maskgen(MaskgenArgs),
    /// Run the two-stage edit on an asset.
    Edit(EditArgs),
    /// Compute metrics into a JSON report.
    Eval(EvalArgs),
}

/// Reads a JSON config, or the defaults when no path is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = g.config.as_deref();
    match cli.command {
        Command::Gendata(a) => {
            let c = a.apply(load_config(cfg)?, g);
            let m = gendata(&c)?;
            eprintln!("wrote {} pairs to {}", m.count, c.out.display());
        }
        Command::Train(a) => {
            let c = a.apply(load_config(cfg)?, g)?;
            let o = train(&c)?;
            eprintln!("{} steps, smoothed loss {:.4} -> {:.4}", o.losses.len(), o.initial, o.last);
        }
        Command::Maskgen(a) => {
            let c = a.apply(load_config(cfg)?, g);
            let s = maskgen(&c)?;
            eprintln!("{} icp inliers, rmse {:.3e}, preserved {:.3}", s.icp_inliers, s.rmse, s.preserved_fraction);
        }
        Command::Edit(a) => {
            let c = a.apply(load_config(cfg)?, g);
            let m = edit(&c)?;
            eprintln!("{} occupied voxels, {} latent sites", m.occupied, m.sites);
        }
        Command::Eval(a) => {
            let c = a.apply(load_config(cfg)?, g);
            let r = eval(&c)?;
            eprintln!("{}", r.to_json()?.trim_end());
        }
    }
    Ok(())
}
