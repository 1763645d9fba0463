//! `facevis`: model and dataset generation, rendering, gradient checks,
//! landmark fitting, toy training and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facevis::model::MaskKind;
use facevis::nn::InputVariant;

#[derive(Parser)]
#[command(name = "facevis", version, about = "Differentiable face-shape visualization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face model file.
    GenModel(GenModelArgs),
    /// Render a synthetic dataset of annotated faces.
    GenData(GenDataArgs),
    /// Render the visualization image for one set of parameters.
    Render(RenderArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Fit camera and shape parameters to annotated landmarks.
    Fit(FitArgs),
    /// Train the visualization-block network on synthetic faces.
    Train(TrainArgs),
    /// Report landmark errors of stored parameters or of a trained network.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model file; a default synthetic model is generated when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum vertex count (the surface grid is rounded up).
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u32).range(50..))]
    vertices: u32,
    /// Number of identity bases.
    #[arg(long, default_value_t = 8)]
    id_bases: usize,
    /// Number of expression bases.
    #[arg(long, default_value_t = 4)]
    exp_bases: usize,
    /// Output model file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Image format of the rendered faces.
    #[arg(long, default_value = "pgm", value_parser = ["pgm", "png"])]
    format: String,
    /// Largest yaw in degrees.
    #[arg(long, default_value_t = 90.0)]
    max_yaw: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Annotation file holding the parameters to render.
    #[arg(long, conflicts_with_all = ["params", "random"])]
    annotation: Option<PathBuf>,
    /// Comma-separated parameters: m1..m8, identity, expression.
    #[arg(long, conflicts_with = "random")]
    params: Option<String>,
    /// Random pose and shape drawn from --seed instead of the frontal
    /// default.
    #[arg(long)]
    random: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Chebyshev splat radius in pixels.
    #[arg(long, default_value_t = 2)]
    radius: usize,
    /// 1 (nose), 2 (five-point) or none.
    #[arg(long, default_value = "1")]
    mask: MaskKind,
    /// Output image, .pgm or .png; a .range.txt sidecar is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations per smooth or rasterizer category.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Sampled weights for the network check.
    #[arg(long, default_value_t = 50)]
    network_weights: usize,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Annotation file or directory of `.json` annotations.
    #[arg(long)]
    input: PathBuf,
    /// Where fitted annotations are written.
    #[arg(long)]
    out_dir: PathBuf,
    /// Per-face CSV report.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Extra annotations per face with jittered boxes.
    #[arg(long, default_value_t = 0)]
    jitter: usize,
    /// Seed of the box jitter.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Weight of the shape prior; 0 disables it.
    #[arg(long)]
    tikhonov: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Visualization and feature map side; images are twice this.
    #[arg(long)]
    vis_size: Option<usize>,
    /// 1 (nose), 2 (five-point) or none.
    #[arg(long)]
    mask: Option<MaskKind>,
    /// ifv, fv or iv.
    #[arg(long)]
    variant: Option<InputVariant>,
    /// Training faces.
    #[arg(long)]
    count: Option<usize>,
    /// Validation faces.
    #[arg(long)]
    validation: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Cut the gradient along the parameter path between blocks.
    #[arg(long)]
    detach_param_path: bool,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch, per-block metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory for per-block visualizations of the first validation face.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// TOML experiment file (model and dataset sections).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Directory or file of annotations with parameters to score.
    #[arg(long, conflicts_with = "checkpoint")]
    data: Option<PathBuf>,
    /// Trained network to evaluate on freshly generated faces.
    #[arg(long, required_unless_present = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generated faces for checkpoint evaluation.
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn run(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::Render(a) => commands::render(a),
        Command::Gradcheck(a) => return commands::gradcheck(a),
        Command::Fit(a) => commands::fit(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
    }?;
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
