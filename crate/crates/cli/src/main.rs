//! `tinyalign`: train, evaluate, run and profile landmark models.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tinyalign::data::{synthetic_dataset, write_manifest, write_pts, ManifestRecord, SynthConfig};
use tinyalign::imaging::{crop_to_tensor, PixelBox};
use tinyalign::model::{load, save, serialized_size, ModelConfig, ModelWeights, TRACK_MARGIN};
use tinyalign::render::{draw_landmarks, render, ProductSpec};
use tinyalign::train::{bench, evaluate, load_checkpoint, load_datasets, EpochMetrics, TrainConfig, Trainer};
use tinyalign::{Error, FacePart, LayoutName};

#[derive(Parser)]
#[command(name = "tinyalign", version, about = "Facial landmark alignment with a compact two-stage heatmap network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl, best.taln and checkpoint.tckp
    Train(TrainArgs),
    /// Score a model on an annotated manifest
    Eval(EvalArgs),
    /// Predict landmarks for images, one JSON line per image
    Infer(InferArgs),
    /// Report parameters, MAdd, file size and latency
    Bench(BenchArgs),
    /// Write deployable weights from a training checkpoint
    Export(ExportArgs),
    /// Generate a synthetic annotated dataset
    Synth(SynthArgs),
}

#[derive(Args)]
struct Overrides {
    /// Config file of `key=value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=10` or `--set model.width_multiplier=0.5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn train_config(&self) -> tinyalign::Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&fs::read_to_string(path)?)?;
        }
        for kv in &self.set {
            cfg.apply_text(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from a checkpoint; its stored config is used
    #[arg(long, conflicts_with_all = ["config", "set"])]
    resume: Option<PathBuf>,
    /// Print the effective config and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    /// JSON-lines manifest of annotated images
    #[arg(long)]
    data: PathBuf,
    /// Face box growth around the annotated landmarks
    #[arg(long, default_value_t = TRACK_MARGIN)]
    margin: f64,
    /// Include the per-landmark table
    #[arg(long)]
    per_landmark: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Image files or directories
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Face box `x0,y0,x1,y1` in pixels; the whole frame when absent
    #[arg(long = "box", value_parser = parse_box)]
    face_box: Option<PixelBox>,
    /// Write predictions here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for PNG overlays
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Makeup for overlays: `part:rrggbb:opacity:feather`, e.g. `upper_lip:c02040:0.6:2`
    #[arg(long = "product", value_parser = parse_product)]
    products: Vec<ProductSpec>,
}

#[derive(Args)]
struct BenchArgs {
    /// Serialized model; without it a zero model of the configured shape is timed
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value_t = 100)]
    runs: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Export the latest weights instead of the best validated ones
    #[arg(long)]
    last: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 160)]
    canvas: u32,
    #[arg(long, default_value = "synthetic65")]
    layout: LayoutName,
}

fn parse_box(s: &str) -> Result<PixelBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x0, y0, x1, y1] if x1 > x0 && y1 > y0 => Ok(PixelBox::new(x0, y0, x1, y1)),
        _ => Err("expected x0,y0,x1,y1 with x1 > x0 and y1 > y0".into()),
    }
}

fn parse_product(s: &str) -> Result<ProductSpec, String> {
    let f: Vec<&str> = s.split(':').collect();
    let [part, color, opacity, feather] = f[..] else {
        return Err("expected part:rrggbb:opacity:feather".into());
    };
    let part = FacePart::ALL
        .into_iter()
        .find(|p| serde_json::to_value(p).ok().and_then(|v| v.as_str().map(|n| n == part)) == Some(true))
        .ok_or_else(|| format!("unknown part `{part}`"))?;
    let rgb = u32::from_str_radix(color.trim_start_matches('#'), 16).map_err(|e| format!("color `{color}`: {e}"))?;
    if color.trim_start_matches('#').len() != 6 {
        return Err(format!("color `{color}` is not rrggbb"));
    }
    let p = ProductSpec {
        part,
        color: [(rgb >> 16) as u8, (rgb >> 8) as u8, rgb as u8],
        opacity: opacity.parse().map_err(|e| format!("opacity `{opacity}`: {e}"))?,
        feather_radius: feather.parse().map_err(|e| format!("feather `{feather}`: {e}"))?,
    };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

/// Process exit status by error category.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Json(_) | Error::Degenerate(_) => 4,
        Error::Format(_) | Error::Checksum { .. } => 5,
        Error::NonFinite(_) | Error::Diverged { .. } => 6,
        Error::TrackingLost(_) => 7,
        Error::Shape(_) | Error::InvalidAxis { .. } | Error::NonScalarLoss(_) | Error::MissingGrad(_) => 1,
    }
}

fn print_json(v: &impl Serialize) -> tinyalign::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn log_epoch(m: &EpochMetrics) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "epoch {:>3}  lr {:.4}  loss {}  val nme {}  ({:.1}s)",
        m.epoch,
        m.lr,
        opt(m.train_loss),
        opt(m.val_nme),
        m.seconds
    );
}

fn cmd_train(a: TrainArgs) -> tinyalign::Result<()> {
    let trainer = match &a.resume {
        Some(path) => load_checkpoint(path)?,
        None => Trainer::new(a.overrides.train_config()?)?,
    };
    if a.print_config {
        print!("{}", trainer.config.to_canonical());
        return Ok(());
    }
    let (train, val) = load_datasets(&trainer.config)?;
    eprintln!("{} training and {} validation samples", train.len(), val.len());
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), trainer.config.to_canonical())?;
    let out = trainer.fit(&train, &val, Some(&a.out), &mut |m| log_epoch(m))?;
    save(&out.model.export()?, a.out.join("last.taln"))?;
    #[derive(Serialize)]
    struct Summary {
        best_val_nme: Option<f64>,
        epochs: usize,
        best: PathBuf,
        last: PathBuf,
    }
    print_json(&Summary {
        best_val_nme: out.best_val_nme,
        epochs: out.log.last().map_or(0, |m| m.epoch),
        best: a.out.join("best.taln"),
        last: a.out.join("last.taln"),
    })
}

fn cmd_eval(a: EvalArgs) -> tinyalign::Result<()> {
    let weights = load(&a.weights)?;
    let samples = tinyalign::data::load_samples(&a.data, &weights.config.layout.layout())?;
    let mut report = evaluate(&weights, &samples, a.margin)?;
    if !a.per_landmark {
        report.per_landmark.clear();
    }
    print_json(&report)
}

fn image_files(inputs: &[PathBuf]) -> tinyalign::Result<Vec<PathBuf>> {
    const EXT: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)?
                .map(|e| e.map(|e| e.path()))
                .collect::<io::Result<_>>()?;
            found.retain(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXT.contains(&e.to_ascii_lowercase().as_str()))
            });
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

#[derive(Serialize)]
struct Prediction<'a> {
    image: &'a str,
    width: u32,
    height: u32,
    face_box: [f64; 4],
    landmarks: &'a [[f64; 2]],
}

fn cmd_infer(a: InferArgs) -> tinyalign::Result<()> {
    let weights = load(&a.weights)?;
    let layout = weights.config.layout.layout();
    if let Some(dir) = &a.overlay {
        fs::create_dir_all(dir)?;
    }
    let mut sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    for path in image_files(&a.inputs)? {
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let b = a.face_box.unwrap_or_else(|| PixelBox::full(w, h)).clamp_to(w, h);
        let input = crop_to_tensor(&img, &b, weights.config.input_size)?;
        let landmarks = weights.predict(&input)?.map(|u| b.from_normalized(u));
        let name = path.display().to_string();
        let line = Prediction {
            image: &name,
            width: w,
            height: h,
            face_box: [b.x0, b.y0, b.x1, b.y1],
            landmarks: &landmarks.points,
        };
        writeln!(sink, "{}", serde_json::to_string(&line)?)?;
        if let Some(dir) = &a.overlay {
            let mut out = render(&img, &landmarks, &layout, &a.products)?;
            draw_landmarks(&mut out, &landmarks, [0, 255, 0]);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            out.save(dir.join(format!("{stem}.png")))?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> tinyalign::Result<()> {
    let weights = match &a.weights {
        Some(p) => load(p)?,
        None => {
            let cfg: ModelConfig = a.overrides.train_config()?.effective_model();
            ModelWeights::zeros(cfg)?
        }
    };
    let report = bench(&weights, a.runs.max(1))?;
    if let Some(p) = &a.weights {
        let actual = fs::metadata(p)?.len();
        if actual != report.model_bytes {
            eprintln!("warning: file is {actual} bytes, layout predicts {}", serialized_size(&weights.config));
        }
    }
    print_json(&report)
}

fn cmd_export(a: ExportArgs) -> tinyalign::Result<()> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let weights = match (&trainer.best, a.last) {
        (Some((_, best)), false) => best.clone(),
        _ => trainer.model.export()?,
    };
    save(&weights, &a.out)?;
    eprintln!("wrote {} ({} bytes)", a.out.display(), fs::metadata(&a.out)?.len());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> tinyalign::Result<()> {
    let cfg = SynthConfig {
        canvas: a.canvas,
        scale: (a.canvas as f64 / 4.0, a.canvas as f64 * 5.0 / 16.0),
        layout: a.layout,
        ..SynthConfig::default()
    };
    let samples = synthetic_dataset(a.count, a.seed, &cfg)?;
    let images = a.out.join("images");
    fs::create_dir_all(&images)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        s.image.save(a.out.join(&rel))?;
        fs::write(images.join(format!("{i:05}.pts")), write_pts(&s.landmarks.points))?;
        records.push(ManifestRecord {
            image_path: rel,
            points: s.landmarks.points.clone(),
            tags: s.tags.clone(),
        });
    }
    write_manifest(a.out.join("manifest.jsonl"), &records)?;
    eprintln!("wrote {} samples to {}", records.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> tinyalign::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Export(a) => cmd_export(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
