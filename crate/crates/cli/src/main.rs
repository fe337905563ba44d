//! `eseg` command-line tool: cost analysis, gradient checks, training,
//! evaluation, pseudo-labelling and graph rewrites.

mod analysis;
mod jobs;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "eseg", version, about = "Multi-scale segmentation network lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP report for one model.
    Summarize(analysis::SummarizeArgs),
    /// Cost of the model as its highest pyramid level varies.
    AblateLevels(analysis::AblateLevelsArgs),
    /// Cost of FPN against BiFPN decoders at matched compute.
    AblateFusion(analysis::AblateFusionArgs),
    /// Finite-difference checks of every kernel and of random graphs.
    Gradcheck(analysis::GradcheckArgs),
    /// Write the model graph as JSON.
    Export(analysis::ExportArgs),
    /// Generate a synthetic dataset.
    GenData(jobs::GenDataArgs),
    /// Train a model from a job file.
    Train(jobs::TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(jobs::EvalArgs),
    /// Produce pseudo-labels for a directory of images.
    Pseudolabel(jobs::PseudolabelArgs),
    /// Apply a deployment rewrite to a graph.
    Rewrite(jobs::RewriteArgs),
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ESEG_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("ESEG_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Summarize(a) => analysis::summarize(a),
        Command::AblateLevels(a) => analysis::ablate_levels(a),
        Command::AblateFusion(a) => analysis::ablate_fusion(a),
        Command::Gradcheck(a) => analysis::gradcheck(a),
        Command::Export(a) => analysis::export(a),
        Command::GenData(a) => jobs::gen_data(a),
        Command::Train(a) => jobs::train(a),
        Command::Eval(a) => jobs::eval(a),
        Command::Pseudolabel(a) => jobs::pseudolabel(a),
        Command::Rewrite(a) => jobs::rewrite(a),
    }
}

/// Failure tag for the JSON error line: the library's error kind when there is one.
fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<eseg::Error>() {
        return e.kind();
    }
    if let Some(e) = err.downcast_ref::<analysis::CheckFailed>() {
        return e.kind();
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return "json";
    }
    "cli"
}

fn report(kind: &str, message: String) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            report("usage", e.to_string().trim_end().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

/// `HxW`, e.g. `1024x2048`.
pub fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad size `{v}` in `{s}`: {e}"))
    };
    let (h, w) = (p(h)?, p(w)?);
    if h == 0 || w == 0 {
        return Err(format!("sizes must be positive, got `{s}`"));
    }
    Ok((h, w))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_file(path: &PathBuf, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
