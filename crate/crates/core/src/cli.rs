//! Command line front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{self, Layout, Stage};
use crate::io::{sha256_hex, write_atomic};
use crate::models::ModelKind;

#[derive(Debug, Parser)]
#[command(
    name = "cgkn",
    version,
    about = "Conditional-Gaussian latent surrogates: simulate, train, filter, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the configured system and store the train/test split.
    Simulate(Common),
    /// Train every configured model (or one with --model).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Train only this model kind.
        #[arg(long, value_parser = parse_kind)]
        model: Option<ModelKind>,
    },
    /// Filter the observed test series through the trained CG models.
    Assimilate(Common),
    /// Forecast from every test origin at the configured lead.
    Forecast(Common),
    /// Print and store the forecast/DA error table.
    Evaluate(Common),
    /// Write the CSV series behind trajectory, posterior and skill plots.
    ExportPlots(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `runs/<config name>`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    /// SHA-256 over `blob <len>\0<content>`, as git object ids are formed.
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    pub outputs: Vec<OutputEntry>,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Git-style content hash of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn output_entries(root: &Path, paths: &[PathBuf]) -> Result<Vec<OutputEntry>> {
    let mut out: Vec<OutputEntry> = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = std::fs::read(p)?;
        let rel = p
            .strip_prefix(root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/");
        out.push(OutputEntry {
            path: rel,
            bytes: bytes.len() as u64,
            hash: content_hash(&bytes),
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    out.dedup_by(|a, b| a.path == b.path);
    Ok(out)
}

struct Context {
    cfg: ExperimentConfig,
    layout: Layout,
    config_path: PathBuf,
    config_sha256: String,
}

fn context(c: &Common) -> Result<Context> {
    let text = std::fs::read(&c.config).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("config file {} not found", c.config.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let text_str = String::from_utf8(text.clone())
        .map_err(|_| Error::Config(format!("{}: not valid UTF-8", c.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text_str, &c.config.display().to_string())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let root = c
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    Ok(Context {
        cfg,
        layout: Layout::new(root),
        config_path: c.config.clone(),
        config_sha256: sha256_hex(&text),
    })
}

fn write_manifest(
    ctx: &Context,
    command: &str,
    outputs: &[PathBuf],
    started: Instant,
    error: Option<&Error>,
) -> Result<()> {
    let m = Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_path: ctx.config_path.display().to_string(),
        config_sha256: ctx.config_sha256.clone(),
        seed: ctx.cfg.seed,
        outputs: output_entries(&ctx.layout.root, outputs)?,
        wall_time_s: started.elapsed().as_secs_f64(),
        error: error.map(|e| e.to_string()),
    };
    write_atomic(
        &ctx.layout.manifest(command),
        serde_json::to_string_pretty(&m)?.as_bytes(),
    )
}

/// Runs one parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let started = Instant::now();
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Train { common, .. } => ("train", common),
        Command::Assimilate(c) => ("assimilate", c),
        Command::Forecast(c) => ("forecast", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::ExportPlots(c) => ("export-plots", c),
    };
    let ctx = match context(common) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let mut code = 0;
    let result: Result<Vec<PathBuf>> = match &cli.command {
        Command::Simulate(_) => experiment::simulate(&ctx.cfg, &ctx.layout),
        Command::Train { stage, model, .. } => {
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Two => Stage::Two,
                StageArg::All => Stage::All,
            };
            let kinds = match model {
                Some(k) => vec![*k],
                None => ctx.cfg.model.kinds.clone(),
            };
            let mut outputs = Vec::new();
            let mut first_err = None;
            for k in kinds {
                eprintln!("training {}", k.label());
                match experiment::train(&ctx.cfg, k, stage, &ctx.layout) {
                    Ok(o) => outputs.extend(o),
                    Err(e) => {
                        eprintln!("{}: {e}", k.label());
                        first_err.get_or_insert(e);
                    }
                }
            }
            match first_err {
                Some(e) => {
                    let _ = write_manifest(&ctx, name, &outputs, started, Some(&e));
                    return report(&e);
                }
                None => Ok(outputs),
            }
        }
        Command::Assimilate(_) => experiment::assimilate(&ctx.cfg, &ctx.layout),
        Command::Forecast(_) => experiment::forecast(&ctx.cfg, &ctx.layout),
        Command::Evaluate(_) => {
            experiment::evaluate(&ctx.cfg, &ctx.layout).map(|(table, outputs)| {
                print!("{}", table.to_text());
                if table.has_missing() {
                    eprintln!("error: some checkpoints are missing");
                    code = 4;
                }
                outputs
            })
        }
        Command::ExportPlots(_) => experiment::export_plots(&ctx.cfg, &ctx.layout),
    };
    match result {
        Ok(outputs) => match write_manifest(&ctx, name, &outputs, started, None) {
            Ok(()) => code,
            Err(e) => report(&e),
        },
        Err(e) => {
            let _ = write_manifest(&ctx, name, &[], started, Some(&e));
            report(&e)
        }
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

pub fn main() -> i32 {
    run(Cli::parse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn stage_and_model_flags_parse() {
        let cli = Cli::try_parse_from([
            "cgkn", "train", "--config", "a.toml", "--stage", "1", "--model", "cg_reg",
        ])
        .unwrap();
        match cli.command {
            Command::Train { stage, model, .. } => {
                assert_eq!(stage, StageArg::One);
                assert_eq!(model, Some(ModelKind::CgReg));
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["cgkn", "evaluate"]).is_err());
    }

    #[test]
    fn content_hash_matches_git_object_format() {
        // `printf 'blob 6\0hello\n' | sha256sum`
        assert_eq!(
            content_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
