use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use eseg::fusion::Topology;
use eseg::gradcheck::{check_kernels, check_random_graphs, DEFAULT_TOLERANCE};
use eseg::graph::{cost_report, count_flops, count_params, Graph};
use eseg::model::{build_model, match_fpn_channels, ModelConfig};
use eseg::Shape;

use crate::{parse_hw, write_file};

/// Some checks of a check command failed.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl CheckFailed {
    pub fn kind(&self) -> &'static str {
        "check_failed"
    }
}

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// A zoo name, `desk-toy`, or a path to a model config JSON file.
pub fn load_model_config(spec: &str) -> Result<ModelConfig> {
    if spec == "desk-toy" {
        return Ok(ModelConfig::desk_toy(4));
    }
    let path = Path::new(spec);
    if spec.ends_with(".json") || path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        let cfg = ModelConfig::from_json(&text)?;
        cfg.validate()?;
        return Ok(cfg);
    }
    Ok(ModelConfig::zoo(spec)?)
}

fn billions(v: u64) -> String {
    format!("{:.2}B", v as f64 / 1e9)
}

fn millions(v: u64) -> String {
    format!("{:.3}M", v as f64 / 1e6)
}

fn input_shape(cfg: &ModelConfig, hw: (usize, usize)) -> Shape {
    cfg.input_shape(1, hw.0, hw.1)
}

#[derive(Args)]
pub struct SummarizeArgs {
    /// Zoo name, `desk-toy`, or model config JSON path.
    #[arg(long, default_value = "eseg-s")]
    model: String,
    #[arg(long, value_parser = parse_hw, default_value = "1024x2048")]
    input_hw: (usize, usize),
    /// Also write the full per-node cost report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn summarize(a: SummarizeArgs) -> Result<()> {
    let cfg = load_model_config(&a.model)?;
    let g = build_model(&cfg)?;
    let r = cost_report(&g, input_shape(&cfg, a.input_hw))?;
    let mut scopes: Vec<&str> = Vec::new();
    for n in &r.per_node {
        let top = n.scope.split('/').next().unwrap_or("");
        if !top.is_empty() && !scopes.contains(&top) {
            scopes.push(top);
        }
    }
    println!("model {}  input {}x{}", cfg.name, a.input_hw.0, a.input_hw.1);
    println!("{:<16} {:>14} {:>18}", "scope", "params", "flops");
    for s in scopes {
        let (p, f) = r.scope_totals(s);
        println!("{s:<16} {p:>14} {f:>18}");
    }
    println!("{:<16} {:>14} {:>18}", "total", r.total_params, r.total_flops);
    println!(
        "params {}  flops {} (MAC)",
        millions(r.total_params),
        billions(r.total_flops)
    );
    if let Some(path) = a.json {
        write_file(&path, &serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct AblateLevelsArgs {
    #[arg(long, default_value = "eseg-s")]
    model: String,
    /// Highest pyramid levels to compare; deltas are relative to the first.
    #[arg(long, value_delimiter = ',', default_value = "5,7,9")]
    max_levels: Vec<usize>,
    #[arg(long, value_parser = parse_hw, default_value = "1024x2048")]
    input_hw: (usize, usize),
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn ablate_levels(a: AblateLevelsArgs) -> Result<()> {
    let base = load_model_config(&a.model)?;
    let mut csv = String::from("model,levels,params,flops,params_delta,flops_delta_pct\n");
    let mut first: Option<(u64, u64)> = None;
    for &m in &a.max_levels {
        let cfg = ModelConfig {
            max_level: m,
            ..base.clone()
        };
        let g = build_model(&cfg).with_context(|| format!("building {} with max level {m}", cfg.name))?;
        let (p, f) = (count_params(&g)?, count_flops(&g, input_shape(&cfg, a.input_hw))?);
        let (p0, f0) = *first.get_or_insert((p, f));
        csv += &format!(
            "{},P{}-P{},{},{},{},{:.4}\n",
            cfg.name,
            cfg.min_level,
            m,
            p,
            f,
            p as i64 - p0 as i64,
            100.0 * (f as f64 - f0 as f64) / f0 as f64
        );
    }
    emit(&csv, a.out.as_ref())
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Args)]
pub struct AblateFusionArgs {
    #[arg(long, default_value = "eseg-s")]
    model: String,
    #[arg(long, value_delimiter = ',', default_value = "fpn,bifpn")]
    topology: Vec<String>,
    /// FPN width; by default the multiple of 8 whose FLOPs best match BiFPN.
    #[arg(long)]
    fpn_channels: Option<usize>,
    #[arg(long, value_parser = parse_hw, default_value = "1024x2048")]
    input_hw: (usize, usize),
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn ablate_fusion(a: AblateFusionArgs) -> Result<()> {
    let base = load_model_config(&a.model)?;
    let mut rows = Vec::new();
    for t in &a.topology {
        let cfg = match t.as_str() {
            "bifpn" => ModelConfig {
                topology: Topology::Bifpn,
                ..base.clone()
            },
            "fpn" => {
                let ch = match a.fpn_channels {
                    Some(c) => c,
                    None => match_fpn_channels(&base, a.input_hw.0, a.input_hw.1)?,
                };
                ModelConfig {
                    topology: Topology::Fpn,
                    fpn_channels: ch,
                    ..base.clone()
                }
            }
            other => {
                return Err(eseg::Error::Config(format!("unknown topology `{other}`, expected fpn or bifpn")).into())
            }
        };
        let g = build_model(&cfg)?;
        rows.push((
            t.clone(),
            cfg.fpn_channels,
            count_params(&g)?,
            count_flops(&g, input_shape(&cfg, a.input_hw))?,
        ));
    }
    let mut csv = String::from("model,topology,levels,channels,params,flops,flops_ratio\n");
    let f0 = rows.first().map(|r| r.3).unwrap_or(1) as f64;
    for (t, ch, p, f) in rows {
        csv += &format!(
            "{},{},P{}-P{},{},{},{},{:.4}\n",
            base.name,
            t,
            base.min_level,
            base.max_level,
            ch,
            p,
            f,
            f as f64 / f0
        );
    }
    emit(&csv, a.out.as_ref())
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random composite graphs.
    #[arg(long, default_value_t = 25)]
    random_graphs: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Also write all results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut results = check_kernels(a.seed, a.tolerance)?;
    results.extend(check_random_graphs(a.seed, a.random_graphs, a.tolerance)?);
    for r in &results {
        println!(
            "{} {:<26} rel_err={:.3e} checked={}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.rel_err,
            r.checked
        );
    }
    if let Some(path) = a.json {
        write_file(&path, &serde_json::to_string_pretty(&results)?)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CheckFailed(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    out: PathBuf,
}

pub fn export(a: ExportArgs) -> Result<()> {
    let g: Graph = build_model(&load_model_config(&a.model)?)?;
    write_file(&a.out, &g.to_json()?)
}
