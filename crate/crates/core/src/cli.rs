//! Command-line front end.
//!
//! Every failure prints one line `error[<class>]: <message>` to stderr and
//! maps to an exit code: 1 usage/config, 2 data, 3 numerical.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    load_dataset, read_gray, read_image_tensor, read_mask, read_rgb, split_dir, tile_rasters, write_mask, write_synth_dataset,
    write_tile, Split,
};
use crate::decoder::ChangeProbabilityMap;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{assemble_model, Variant};
use crate::profile::profile;
use crate::train::{evaluate, predict, train};

#[derive(Debug, Parser)]
#[command(name = "stnet", version, about = "Bi-temporal change detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut co-registered rasters into tiles under OUT/{A,B,label}.
    Tile(TileArgs),
    /// Write a synthetic dataset with train/val/test splits.
    Synth(SynthArgs),
    /// Train a model; writes checkpoints, a JSONL log and the effective config.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Change map for one image pair.
    Predict(PredictArgs),
    /// Parameter and FLOP counts.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub label: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 256)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.15)]
    pub change_rate: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; overrides `data.root`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also write the report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Binary mask, 0 or 255.
    #[arg(long)]
    pub out_mask: PathBuf,
    /// P(changed) as a 16-bit grayscale PNG.
    #[arg(long)]
    pub out_prob: Option<PathBuf>,
    /// Ground truth for the TP/TN/FP/FN overlay.
    #[arg(long, requires = "out_overlay")]
    pub label: Option<PathBuf>,
    #[arg(long, requires = "label")]
    pub out_overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Side of the square 3×S×S input.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Resolution(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = write!(out, "{e}");
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(err, "error[usage]: {}", first.trim_start_matches("error: "));
            return 1;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error[{}]: {msg}", e.class());
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Tile(a) => cmd_tile(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Predict(a) => cmd_predict(&a),
        Command::Profile(a) => cmd_profile(&a, out),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_tile(args: &TileArgs, out: &mut dyn Write) -> Result<()> {
    for p in [&args.a, &args.b, &args.label] {
        if !p.is_file() {
            return Err(Error::Ingestion(format!("missing raster {}", p.display())));
        }
    }
    let a = read_rgb(&args.a)?;
    let b = read_rgb(&args.b)?;
    let label = read_gray(&args.label)?;
    let tiles = tile_rasters(&a, &b, &label, args.size, args.stride)?;
    for t in &tiles {
        write_tile(&args.out, &format!("{}.png", t.stem()), &t.to_tile()?)?;
    }
    say(out, &tiles.len().to_string())
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let [tr, va, te] = write_synth_dataset(&args.out, args.seed, args.n, args.size, args.change_rate)?;
    say(out, &format!("train {tr} val {va} test {te}"))
}

/// Defaults < `--config` file < flags.
pub fn effective_train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data.root = d.clone();
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = args.variant {
        cfg.train.variant = v;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = args.max_steps {
        cfg.train.max_steps = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = effective_train_config(args)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let echo = args.out.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
    let train_set = load_dataset(&cfg.data.root, Split::Train)?;
    let val_set = match load_dataset(&cfg.data.root, Split::Val) {
        Ok(v) => v,
        Err(Error::Ingestion(_)) if !split_dir(&cfg.data.root, Split::Val).exists() => Vec::new(),
        Err(e) => return Err(e),
    };
    let outcome = train(&cfg.train, &cfg.model(), &cfg.focal, &cfg.dice, &train_set, &val_set, Some(&args.out))?;
    say(
        out,
        &format!(
            "steps {} epochs {} final_loss {:.6}",
            outcome.last.step,
            outcome.last.epoch,
            outcome.losses.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let tiles = load_dataset(&args.data, args.split)?;
    let scores = evaluate(&ck.model, &tiles)?;
    if let Some(p) = &args.report {
        scores.write_report(p)?;
    }
    write!(out, "{}", scores.to_report()).map_err(|e| Error::io("<stdout>", e))
}

/// P(changed) scaled to the full 16-bit range.
pub fn probability_image(prob: &ChangeProbabilityMap) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let (h, w) = prob.dims();
    let data = prob.changed().iter().map(|p| (p * 65535.0).round() as u16).collect();
    ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized buffer")
}

/// White TP, black TN, red FP, green FN.
pub fn overlay_image(pred: &BinaryMask, gt: &BinaryMask) -> Result<RgbImage> {
    gt.expect_dims(pred.dims())?;
    let (h, w) = pred.dims();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        match (pred.get(y as usize, x as usize), gt.get(y as usize, x as usize)) {
            (true, true) => Rgb([255, 255, 255]),
            (false, false) => Rgb([0, 0, 0]),
            (true, false) => Rgb([255, 0, 0]),
            (false, true) => Rgb([0, 255, 0]),
        }
    }))
}

fn save_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let t1 = read_image_tensor(&args.a)?;
    let t2 = read_image_tensor(&args.b)?;
    let (prob, mask) = predict(&ck.model, &t1, &t2)?;
    write_mask(&args.out_mask, &mask)?;
    if let Some(p) = &args.out_prob {
        save_png(p, &probability_image(&prob))?;
    }
    if let (Some(l), Some(o)) = (&args.label, &args.out_overlay) {
        let gt = read_mask(l)?;
        save_png(o, &overlay_image(&mask, &gt)?)?;
    }
    Ok(())
}

pub fn cmd_profile(args: &ProfileArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let variant = args.variant.unwrap_or(cfg.train.variant);
    let model = assemble_model(variant, &cfg.model(), cfg.train.seed)?;
    let report = profile(&model, &[3, args.size, args.size])?;
    write!(out, "{}", report.to_text()).map_err(|e| Error::io("<stdout>", e))
}
