use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use image::{ImageFormat, RgbImage};

use spectex::network::{canonical_layer_name, NetworkSpec, DEFAULT_CAPTURE};
use spectex::pipeline::{
    self, build_network, dominant_radius, log_magnitude_image, radial_spectrum_profile, write_loss_csv,
    write_profile_csv, SynthesisConfig, SynthesisResult, DEFAULT_BETA, DEFAULT_ITERATIONS, DEFAULT_LAYER_WEIGHT,
    DEFAULT_SCALE,
};
use spectex::spectrum::PhaseRule;
use spectex::weights::load_weights;
use spectex::{Error, Real, Result, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "spectex",
    version,
    about = "Texture synthesis with CNN and spectrum constraints",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a texture from an exemplar image.
    Synth(SynthArgs),
    /// Write the log-magnitude DFT of an image and its radial power profile.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    exemplar: PathBuf,
    /// VGGW weight file.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Weight of the spectrum term.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// One weight for all capture layers, or a comma-separated list with one per layer.
    #[arg(long, action = clap::ArgAction::Set, value_delimiter = ',', default_values_t = [DEFAULT_LAYER_WEIGHT])]
    layer_weight: Vec<f64>,
    /// Comma-separated capture layers.
    #[arg(long, action = clap::ArgAction::Set, value_delimiter = ',', default_values_t = DEFAULT_CAPTURE.map(String::from))]
    layers: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Longest side after rescaling; 0 keeps the exemplar size.
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    scale: u32,
    /// Drop the spectrum term.
    #[arg(long)]
    no_spectrum: bool,
    /// Per-evaluation loss CSV.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Write OUT.iterK.png every N iterations.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    save_every: Option<u64>,
    /// Worker threads (falls back to SPECTEX_THREADS).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Compute in double precision.
    #[arg(long = "f64")]
    double: bool,
    #[arg(long, default_value = "joint")]
    phase_rule: PhaseRule,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    image: PathBuf,
    /// Output PNG of the centred log-magnitude spectrum.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    radial_csv: Option<PathBuf>,
    /// Longest side after rescaling; 0 (default) keeps the image size.
    #[arg(long, default_value_t = 0)]
    scale: u32,
}

fn scale_opt(scale: u32) -> Option<u32> {
    (scale > 0).then_some(scale)
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, buf.get_ref())
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

fn iteration_path(out: &Path, k: usize) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.iter{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}.iter{k}"),
    };
    out.with_file_name(name)
}

fn configure_threads(flag: Option<u64>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n as usize),
        None => match std::env::var("SPECTEX_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::Config(format!("SPECTEX_THREADS={v:?} is not a positive integer")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn synth_config(args: &SynthArgs) -> Result<SynthesisConfig> {
    let layers: Vec<String> = args.layers.iter().map(|l| canonical_layer_name(l.trim())).collect();
    let layer_weights = match args.layer_weight.as_slice() {
        [w] => vec![*w; layers.len()],
        ws => ws.to_vec(),
    };
    let config = SynthesisConfig {
        capture_layers: layers,
        layer_weights,
        beta: args.beta,
        spectrum: !args.no_spectrum,
        phase_rule: args.phase_rule,
        iterations: args.iterations,
        seed: args.seed,
        scale: scale_opt(args.scale),
        ..SynthesisConfig::default()
    };
    config.validate()?;
    Ok(config)
}

fn run_with<T: Real>(
    args: &SynthArgs,
    config: &SynthesisConfig,
    exemplar: &RgbImage,
    net: &NetworkSpec<T>,
    means: [f32; 3],
) -> Result<SynthesisResult> {
    let mut save_error = None;
    let result = pipeline::synthesize_with(exemplar, config, net, means, |k, t: &Tensor<T>| {
        let Some(every) = args.save_every else { return };
        if k % every as usize != 0 || save_error.is_some() {
            return;
        }
        if let Err(e) = pipeline::postprocess(t, means).and_then(|img| save_png(&iteration_path(&args.out, k), &img)) {
            save_error = Some(e);
        }
    })?;
    match save_error {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let start = Instant::now();
    let config = synth_config(&args)?;
    configure_threads(args.threads)?;
    let exemplar = load_rgb(&args.exemplar)?;
    let weights = load_weights(&args.weights)?;

    let result = if args.double {
        let net = build_network::<f64>(&weights, &config)?;
        run_with(&args, &config, &exemplar, &net, weights.means)?
    } else {
        let net = build_network::<f32>(&weights, &config)?;
        run_with(&args, &config, &exemplar, &net, weights.means)?
    };

    save_png(&args.out, &result.image)?;
    if let Some(path) = &args.loss_log {
        let mut buf = Vec::new();
        write_loss_csv(&result.history, &mut buf)?;
        write_atomic(path, &buf)?;
    }

    let last = result.final_loss().unwrap_or(pipeline::LossRecord {
        iter: 0,
        eval: 0,
        total: f64::NAN,
        cnn: f64::NAN,
        spectrum: f64::NAN,
        accepted: true,
    });
    let (w, h) = result.image.dimensions();
    println!("output      {} ({w}x{h})", args.out.display());
    println!("iterations  {} ({})", result.report.iterations, result.report.termination);
    println!("evaluations {}", result.history.len());
    println!("loss        total {:.6e}  cnn {:.6e}  spectrum {:.6e}", last.total, last.cnn, last.spectrum);
    println!("wall time   {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let img = load_rgb(&args.image)?;
    let t: Tensor<f64> = pipeline::preprocess(&img, [0.0; 3], scale_opt(args.scale))?;
    save_png(&args.out, &log_magnitude_image(&t))?;
    let profile = radial_spectrum_profile(&t);
    if let Some(path) = &args.radial_csv {
        let mut buf = Vec::new();
        write_profile_csv(&profile, &mut buf)?;
        write_atomic(path, &buf)?;
    }
    println!("output      {} ({}x{})", args.out.display(), t.width(), t.height());
    match dominant_radius(&profile) {
        Some(r) => println!("peak radius {r}"),
        None => println!("peak radius none"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Analyze(args) => run_analyze(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
