use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use eseg::deploy::{
    lite_pipeline, rewrite_fuse_mbconv, rewrite_remove_se, rewrite_shift_base_level, rewrite_swap_activation,
    RewriteReport,
};
use eseg::graph::Params;
use eseg::io::{
    checkpoint_elem, generate_synthetic, load_checkpoint, load_dataset, read_ppm, save_checkpoint, write_dataset,
    write_pgm, Checkpoint, Image, Sample, SyntheticSpec, TrainState,
};
use eseg::metrics::ConfusionMatrix;
use eseg::model::{build_model, ModelConfig};
use eseg::selftrain::{multiscale_infer, pseudolabel as label_pixels, GraphModel, PseudoLabelConfig};
use eseg::tensor::ActKind;
use eseg::train::{evaluate, image_to_tensor, train_loop, write_trace_csv, TrainConfig};
use eseg::{ElemType, Graph, Scalar};
use serde::{Deserialize, Serialize};

use crate::analysis::load_model_config;
use crate::write_file;

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    shapes: usize,
    #[arg(long, default_value_t = 24)]
    noise: u8,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        height: a.height,
        width: a.width,
        num_classes: a.classes,
        shapes_per_image: a.shapes,
        count: a.count,
        seed: a.seed,
        noise: a.noise,
    };
    spec.validate()?;
    let m = write_dataset(&a.out, &spec)?;
    println!("wrote {} items to {}", m.items.len(), a.out.display());
    Ok(())
}

/// Where samples come from in a training job.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Dir(PathBuf),
    Synthetic { synthetic: SyntheticSpec },
}

impl DataSource {
    /// Samples, class count and ignore index. Relative paths resolve against `base`.
    fn load(&self, base: &Path) -> Result<(Vec<Sample>, usize, u8)> {
        match self {
            DataSource::Dir(d) => {
                let dir = base.join(d);
                let (m, s) = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
                Ok((s, m.num_classes, m.ignore_index))
            }
            DataSource::Synthetic { synthetic } => Ok((generate_synthetic(synthetic)?, synthetic.num_classes, 255)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Name(String),
    Config(Box<ModelConfig>),
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Contents of a `train --config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub model: ModelRef,
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub eval_data: Option<DataSource>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    /// Parameter initialization seed; defaults to the training seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seed in the job file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the job file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_classes: usize,
    pub pixels: u64,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub iou: Vec<Option<f64>>,
}

impl MetricReport {
    fn from_matrix(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(MetricReport {
            num_classes: cm.num_classes(),
            pixels: cm.total(),
            miou: cm.miou()?,
            pixel_accuracy: cm.pixel_accuracy()?,
            iou: cm.iou(),
        })
    }

    fn csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s += &format!("miou,{:.6}\npixel_accuracy,{:.6}\n", self.miou, self.pixel_accuracy);
        for (c, v) in self.iou.iter().enumerate() {
            s += &format!("iou_{c},{}\n", v.map(|v| format!("{v:.6}")).unwrap_or_default());
        }
        s
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut job: TrainJob = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    if let Some(s) = a.seed {
        job.train.seed = s;
    }
    if let Some(o) = a.out {
        job.out_dir = o;
    }
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    match job.precision {
        Precision::F32 => run_training::<f32>(&job, &base),
        Precision::F64 => run_training::<f64>(&job, &base),
    }
}

fn run_training<T: Scalar>(job: &TrainJob, base: &Path) -> Result<()> {
    let (train_set, k, ignore) = job.data.load(base)?;
    let eval_set = match &job.eval_data {
        Some(d) => d.load(base)?.0,
        None => Vec::new(),
    };
    let cfg = match &job.model {
        ModelRef::Name(n) => {
            let mut c = load_model_config(n)?;
            c.num_classes = k;
            c
        }
        ModelRef::Config(c) => {
            if c.num_classes != k {
                return Err(eseg::Error::Config(format!(
                    "model predicts {} classes but the data has {k}",
                    c.num_classes
                ))
                .into());
            }
            (**c).clone()
        }
    };
    let mut tc = job.train.clone();
    tc.ohem.ignore_index = ignore;
    let g = build_model(&cfg)?;
    let init = Params::<T>::init(&g, job.init_seed.unwrap_or(tc.seed));
    let out = train_loop(&g, init, &train_set, &eval_set, k, &tc)?;

    let dir = &job.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut csv = Vec::new();
    write_trace_csv(&mut csv, &out.trace)?;
    std::fs::write(dir.join("trace.csv"), csv)?;
    let last = out.trace.last();
    save_checkpoint(
        dir.join("checkpoint.eseg"),
        &Checkpoint {
            state: TrainState {
                step: out.trace.len() as u64,
                lr: last.map_or(tc.lr0, |r| r.lr),
                ema_decay: tc.ema_decay,
                seed: tc.seed,
            },
            model: Some(cfg.clone()),
            params: out.params.clone(),
            ema: Some(out.ema.shadow.clone()),
        },
    )?;
    if !eval_set.is_empty() {
        let raw = evaluate(&g, &out.params, &eval_set, k, ignore, tc.batch)?;
        let ema = evaluate(&g, &out.ema.shadow, &eval_set, k, ignore, tc.batch)?;
        let report = serde_json::json!({
            "raw": MetricReport::from_matrix(&raw)?,
            "ema": MetricReport::from_matrix(&ema)?,
        });
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
        println!(
            "trained {} steps: final loss {:.4}, mIoU {:.4} (EMA {:.4})",
            out.trace.len(),
            last.map_or(f64::NAN, |r| r.loss),
            raw.miou()?,
            ema.miou()?
        );
    } else {
        println!(
            "trained {} steps: final loss {:.4}",
            out.trace.len(),
            last.map_or(f64::NAN, |r| r.loss)
        );
    }
    Ok(())
}

struct Loaded<T: Scalar> {
    cfg: ModelConfig,
    graph: Graph,
    params: Params<T>,
}

fn load_model<T: Scalar>(path: &Path, use_ema: bool) -> Result<Loaded<T>> {
    let ckpt = load_checkpoint::<T>(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = ckpt
        .model
        .ok_or_else(|| eseg::Error::Format("checkpoint does not record its model config".into()))?;
    let graph = build_model(&cfg)?;
    let params = if use_ema {
        ckpt.ema
            .ok_or_else(|| eseg::Error::Format("checkpoint has no EMA weights".into()))?
    } else {
        ckpt.params
    };
    params.check_bound(&graph)?;
    Ok(Loaded { cfg, graph, params })
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory with a manifest.
    #[arg(long)]
    data: PathBuf,
    /// Evaluate the EMA weights instead of the raw ones.
    #[arg(long)]
    ema: bool,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Also write `metrics.json` and `metrics.csv` here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let report = match checkpoint_elem(&a.ckpt).with_context(|| format!("reading {}", a.ckpt.display()))? {
        ElemType::F32 => eval_with::<f32>(&a)?,
        ElemType::F64 => eval_with::<f64>(&a)?,
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(dir) = &a.out_dir {
        write_file(&dir.join("metrics.json"), &text)?;
        write_file(&dir.join("metrics.csv"), &report.csv())?;
    }
    Ok(())
}

fn eval_with<T: Scalar>(a: &EvalArgs) -> Result<MetricReport> {
    let m = load_model::<T>(&a.ckpt, a.ema)?;
    let (manifest, samples) = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    if manifest.num_classes != m.cfg.num_classes {
        return Err(eseg::Error::Config(format!(
            "model predicts {} classes but the data has {}",
            m.cfg.num_classes, manifest.num_classes
        ))
        .into());
    }
    let cm = evaluate(
        &m.graph,
        &m.params,
        &samples,
        manifest.num_classes,
        manifest.ignore_index,
        a.batch,
    )?;
    MetricReport::from_matrix(&cm)
}

#[derive(Args)]
pub struct PseudolabelArgs {
    /// Checkpoint of the teacher model.
    #[arg(long)]
    model: PathBuf,
    /// Directory of `.ppm` images.
    #[arg(long)]
    images: PathBuf,
    /// Output directory for `.pgm` label rasters.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    scales: Vec<f64>,
    #[arg(long)]
    no_flip: bool,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    ema: bool,
}

pub fn pseudolabel(a: PseudolabelArgs) -> Result<()> {
    let cfg = PseudoLabelConfig {
        scales: a.scales.clone(),
        use_flip: !a.no_flip,
        threshold: a.threshold,
        ignore_index: 255,
    };
    cfg.validate()?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.images)
        .with_context(|| format!("listing {}", a.images.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    files.sort();
    let (labeled, total) = match checkpoint_elem(&a.model).with_context(|| format!("reading {}", a.model.display()))? {
        ElemType::F32 => label_dir::<f32>(&a, &cfg, &files)?,
        ElemType::F64 => label_dir::<f64>(&a, &cfg, &files)?,
    };
    let frac = if total == 0 { 0.0 } else { labeled as f64 / total as f64 };
    println!("labeled {} images, {:.4} of pixels above threshold", files.len(), frac);
    Ok(())
}

fn label_dir<T: Scalar>(a: &PseudolabelArgs, cfg: &PseudoLabelConfig, files: &[PathBuf]) -> Result<(usize, usize)> {
    let m = load_model::<T>(&a.model, a.ema)?;
    let model = GraphModel {
        graph: &m.graph,
        params: &m.params,
        num_classes: m.cfg.num_classes,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (mut labeled, mut total) = (0, 0);
    for f in files {
        let img = read_ppm(f).with_context(|| format!("reading {}", f.display()))?;
        let probs = multiscale_infer(&model, &image_to_tensor::<T>(&img), cfg)?;
        let labels = label_pixels(&probs, cfg)?;
        labeled += labels.iter().filter(|&&v| v != cfg.ignore_index).count();
        total += labels.len();
        let stem = f.file_stem().expect("file has a name").to_string_lossy();
        write_pgm(
            a.out.join(format!("{stem}.pgm")),
            &Image::new(img.width, img.height, 1, labels)?,
        )?;
    }
    Ok((labeled, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Pass {
    FuseMbconv,
    RemoveSe,
    SwapActivation,
    /// Fuse, remove SE, then SiLU to ReLU.
    LitePipeline,
    /// Operates on a model config JSON rather than a graph.
    ShiftBaseLevel,
}

fn parse_act(s: &str) -> Result<ActKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown activation `{s}`, expected relu, silu or sigmoid"))
}

#[derive(Args)]
pub struct RewriteArgs {
    #[arg(long, value_enum)]
    pass: Pass,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_parser = parse_act, default_value = "silu")]
    from: ActKind,
    #[arg(long, value_parser = parse_act, default_value = "relu")]
    to: ActKind,
}

pub fn rewrite(a: RewriteArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if a.pass == Pass::ShiftBaseLevel {
        let cfg = rewrite_shift_base_level(&ModelConfig::from_json(&text)?)?;
        return write_file(&a.out, &cfg.to_json()?);
    }
    let g = Graph::from_json(&text)?;
    let (out, reports): (Graph, Vec<RewriteReport>) = match a.pass {
        Pass::FuseMbconv => one(rewrite_fuse_mbconv(&g)?),
        Pass::RemoveSe => one(rewrite_remove_se(&g)?),
        Pass::SwapActivation => one(rewrite_swap_activation(&g, a.from, a.to)?),
        Pass::LitePipeline => lite_pipeline(&g)?,
        Pass::ShiftBaseLevel => unreachable!("handled above"),
    };
    write_file(&a.out, &out.to_json()?)?;
    for r in &reports {
        println!(
            "{}: {} matches, params {} -> {}, shapes preserved: {}",
            r.pass, r.matches, r.params_before, r.params_after, r.shapes_preserved
        );
    }
    if let Some(p) = &a.report {
        write_file(p, &serde_json::to_string_pretty(&reports)?)?;
    }
    Ok(())
}

fn one(x: (Graph, RewriteReport)) -> (Graph, Vec<RewriteReport>) {
    (x.0, vec![x.1])
}
