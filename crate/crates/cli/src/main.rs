use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use skylos_cli::commands::{self, SppFilter};
use skylos_cli::{CliError, RunConfig, Segmenter};

#[derive(Parser)]
#[command(
    name = "skylos",
    about = "Sky-segmentation aided GNSS NLOS mitigation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigFlags {
    /// Mean-blur kernel size in pixels (odd).
    #[arg(long, default_value_t = 5)]
    blur_kernel: u32,
    /// Segmentation method.
    #[arg(long, value_enum, default_value_t = SegmenterArg::Otsu)]
    segmenter: SegmenterArg,
    /// Local-threshold window in pixels (odd).
    #[arg(long, default_value_t = 31)]
    local_window: u32,
    /// Local-threshold offset in intensity levels.
    #[arg(long, default_value_t = 5.0)]
    local_offset: f64,
    /// Elevation fallback cutoff in degrees.
    #[arg(long, default_value_t = 15.0)]
    elevation_cutoff_deg: f64,
    /// Image-to-epoch association tolerance in seconds.
    #[arg(long, default_value_t = 0.5)]
    timestamp_tolerance: f64,
    /// Monte Carlo trials for the pipeline.
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Seed for every stochastic stage.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmenterArg {
    Otsu,
    Local,
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    None,
    Sky,
    Elevation,
}

impl ConfigFlags {
    fn to_config(&self) -> RunConfig {
        RunConfig {
            blur_kernel: self.blur_kernel,
            segmenter: match self.segmenter {
                SegmenterArg::Otsu => Segmenter::Otsu,
                SegmenterArg::Local => Segmenter::Local,
            },
            local_window: self.local_window,
            local_offset: self.local_offset,
            elevation_cutoff: self.elevation_cutoff_deg.to_radians(),
            timestamp_tolerance: self.timestamp_tolerance,
            monte_carlo_trials: self.trials,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Segment sky vs non-sky in one image or a directory of images.
    Segment {
        /// Input image or directory of .png images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Back-project satellites into a sky image and classify LOS/NLOS.
    Classify {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        /// Image timestamp; defaults to the first epoch in the CSV.
        #[arg(long)]
        image_time: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Weighted single-point positioning per epoch.
    Spp {
        #[arg(long)]
        observations: PathBuf,
        #[arg(long, value_enum, default_value_t = FilterArg::None)]
        filter: FilterArg,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        anchor: Option<PathBuf>,
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long)]
        image_time: Option<f64>,
        /// Optional report file (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Benchmark Otsu vs local thresholding on an image/mask dataset.
    BenchSeg {
        /// Directory of <name>.png images paired with <name>.mask.png truths.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// End-to-end run: init (SPP, yaw, anchor) then per-epoch filtering.
    Pipeline {
        /// Scene description file; a built-in desk scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Recorded dataset directory (as written by `synth`).
        #[arg(long, conflicts_with = "scene")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Render synthetic scenes: a full dataset, or image/mask pairs.
    Synth {
        /// Scene description file; a built-in desk scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Generate this many randomized image/mask pairs instead of a
        /// full dataset.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        config: ConfigFlags,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Segment {
            input,
            out_dir,
            config,
        } => {
            let degenerate = commands::run_segment(&input, &out_dir, &config.to_config())?;
            Ok(if degenerate { 3 } else { 0 })
        }
        Command::Classify {
            image,
            observations,
            calibration,
            anchor,
            pose,
            image_time,
            out_dir,
            config,
        } => {
            commands::run_classify(
                &image,
                &observations,
                &calibration,
                &anchor,
                &pose,
                image_time,
                &out_dir,
                &config.to_config(),
            )?;
            Ok(0)
        }
        Command::Spp {
            observations,
            filter,
            image,
            calibration,
            anchor,
            pose,
            image_time,
            out,
            config,
        } => {
            commands::run_spp(
                &observations,
                match filter {
                    FilterArg::None => SppFilter::None,
                    FilterArg::Sky => SppFilter::Sky,
                    FilterArg::Elevation => SppFilter::Elevation,
                },
                image.as_deref(),
                calibration.as_deref(),
                anchor.as_deref(),
                pose.as_deref(),
                image_time,
                out.as_deref(),
                &config.to_config(),
            )?;
            Ok(0)
        }
        Command::BenchSeg {
            dataset,
            out,
            config,
        } => {
            commands::run_bench_seg(&dataset, out.as_deref(), &config.to_config())?;
            Ok(0)
        }
        Command::Pipeline {
            scene,
            dataset,
            out_dir,
            config,
        } => {
            commands::run_pipeline(
                scene.as_deref(),
                dataset.as_deref(),
                &out_dir,
                &config.to_config(),
            )?;
            Ok(0)
        }
        Command::Synth {
            scene,
            out_dir,
            count,
            config,
        } => {
            commands::run_synth(scene.as_deref(), &out_dir, count, &config.to_config())?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
