//! Command-line entry point: dataset generation, training, and the analysis
//! commands (traversals, heatmaps, curves, alignment scores).
//!
//! Exit codes: 0 on success, 2 on configuration/argument errors, 3 on
//! I/O or runtime errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use capvae::diagnostics::{self, DiagError, GridImage};
use capvae::rng::{domain, stream};
use capvae::synthdata::{
    self, enumerate_dataset, read_dataset, write_dataset, DataError, Dataset, RendererKind,
};
use capvae::trainer::{self, LoadedRun, TrainConfig, TrainError};
use rand::seq::SliceRandom;

#[derive(Parser)]
#[command(name = "capvae", version, about = "Capacity-annealed VAE toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural dataset file.
    GenData(GenDataArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Render a latent traversal grid from a checkpoint.
    Traverse(CkptDataArgs),
    /// Render per-latent position tuning heatmaps (blob datasets).
    Heatmap(CkptDataArgs),
    /// Emit plot data from a metrics CSV.
    Curves(CurvesArgs),
    /// Score latent/factor alignment and emit the correlation matrix.
    Score(CkptDataArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Blob,
    Dsprites,
    Coloured,
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset family to generate.
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Canvas resolution (square).
    #[arg(long, default_value_t = 32)]
    res: usize,
    /// Output file path.
    #[arg(long)]
    out: PathBuf,
    /// Position grid density per axis (blob datasets).
    #[arg(long, default_value_t = 32)]
    positions: usize,
    /// Blob width in canvas fractions.
    #[arg(long, default_value_t = synthdata::DEFAULT_BLOB_SIGMA)]
    blob_sigma: f64,
    /// Shape count (sprite datasets).
    #[arg(long, default_value_t = 3)]
    shapes: usize,
    /// Scale grid size (sprite datasets).
    #[arg(long, default_value_t = 6)]
    scales: usize,
    /// Rotation grid size (sprite datasets).
    #[arg(long, default_value_t = 8)]
    rotations: usize,
    /// X position grid size (sprite datasets).
    #[arg(long, default_value_t = 16)]
    xs: usize,
    /// Y position grid size (sprite datasets).
    #[arg(long, default_value_t = 16)]
    ys: usize,
    /// Hue count (coloured datasets).
    #[arg(long, default_value_t = 6)]
    hues: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (TOML, or JSON by extension).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config file's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config file's iteration count.
    #[arg(long)]
    iterations: Option<u64>,
    /// Resume from a checkpoint written by this configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct CkptDataArgs {
    /// Model checkpoint (.capk with its .json sidecar).
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for sample selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CurvesArgs {
    /// Metrics CSV produced by a training run.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Data(DataError::InvalidArgument(_)) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DiagError> for CliError {
    fn from(e: DiagError) -> Self {
        match e {
            DiagError::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::Train(args) => train(args),
        Cmd::Traverse(args) => traverse(args),
        Cmd::Heatmap(args) => heatmap(args),
        Cmd::Curves(args) => curves(args),
        Cmd::Score(args) => score(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Records the resolved invocation next to a command's outputs.
fn record_args(path: &Path, lines: &[(&str, String)]) -> Result<(), CliError> {
    let mut text = String::new();
    for (k, v) in lines {
        let _ = writeln!(text, "{k} = {v:?}");
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let (spec, kind) = match args.kind {
        DataKind::Blob => (synthdata::blob_spec(args.positions)?, RendererKind::Blob),
        DataKind::Dsprites => (
            synthdata::sprite_spec(args.shapes, args.scales, args.rotations, args.xs, args.ys)?,
            RendererKind::Sprite,
        ),
        DataKind::Coloured => (
            synthdata::coloured_sprite_spec(
                args.shapes,
                args.scales,
                args.rotations,
                args.xs,
                args.ys,
                args.hues,
            )?,
            RendererKind::ColouredSprite,
        ),
    };
    let dataset = enumerate_dataset(&spec, kind, args.res, args.blob_sigma)?;
    write_dataset(&dataset, &args.out)?;
    record_args(
        &args.out.with_extension("capd.toml"),
        &[
            ("kind", format!("{:?}", args.kind).to_lowercase()),
            ("res", args.res.to_string()),
            ("images", dataset.len().to_string()),
            ("factors", format!("{:?}", spec.names())),
            (
                "cardinalities",
                format!("{:?}", spec.grids().iter().map(Vec::len).collect::<Vec<_>>()),
            ),
            ("blob_sigma", args.blob_sigma.to_string()),
        ],
    )?;
    println!(
        "wrote {} images ({}x{}x{}) to {}",
        dataset.len(),
        dataset.channels,
        dataset.height,
        dataset.width,
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(iters) = args.iterations {
        cfg.iterations = Some(iters);
    }
    let dataset = read_dataset(&cfg.dataset)?;
    let resolved = trainer::ResolvedConfig::resolve(&cfg, &dataset)?;
    drop(dataset);
    let out = trainer::run_with_progress(&resolved, args.resume.as_deref(), |r| {
        println!(
            "iter {:>7}  loss {:>12.3}  loglik {:>10.3}  kl {:>8.4}  C {:>7.4}  {:>7.1}s",
            r.iteration, r.loss, r.loglik, r.kl_total, r.c, r.seconds
        );
    })?;
    println!(
        "done: metrics {}, checkpoint {}",
        out.metrics_path.display(),
        out.checkpoint_path.display()
    );
    Ok(())
}

fn load_vae_with_data(ckpt: &Path, data: &Path) -> Result<(LoadedRun, Dataset), CliError> {
    let run = trainer::load_run(ckpt)?;
    let dataset = read_dataset(data)?;
    if run.sidecar.model.channels != dataset.channels
        || run.sidecar.model.height != dataset.height
        || run.sidecar.model.width != dataset.width
    {
        return Err(CliError::Config(format!(
            "checkpoint expects {}x{}x{} images, dataset holds {}x{}x{}",
            run.sidecar.model.channels,
            run.sidecar.model.height,
            run.sidecar.model.width,
            dataset.channels,
            dataset.height,
            dataset.width
        )));
    }
    Ok((run, dataset))
}

fn grid_image(dataset: &Dataset, pixels: Vec<f32>) -> GridImage {
    GridImage {
        channels: dataset.channels,
        height: dataset.height,
        width: dataset.width,
        pixels,
    }
}

const TRAVERSAL_COLS: usize = 11;

fn traverse(args: CkptDataArgs) -> Result<(), CliError> {
    let (run, dataset) = load_vae_with_data(&args.ckpt, &args.data)?;
    let model = run
        .vae()
        .ok_or_else(|| CliError::Config("traverse needs a VAE checkpoint".into()))?;
    std::fs::create_dir_all(&args.out)?;

    // sample images for the two header rows; the first is the traversal seed
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = stream(args.seed, domain::DIAG, 0);
    indices.shuffle(&mut rng);
    indices.truncate(TRAVERSAL_COLS);
    let seed_index = indices[0];

    let sample_count = dataset.len().min(1024);
    let sample: Vec<usize> = (0..sample_count).collect();
    let kls = diagnostics::average_kl(model, &run.store, &dataset, &sample)?;
    let order = diagnostics::kl_ordering(&kls)?;

    let mut cells: Vec<GridImage> = Vec::new();
    for &i in &indices {
        cells.push(grid_image(&dataset, dataset.image(i).to_vec()));
    }
    for &i in &indices {
        let recon = diagnostics::reconstruct_mean(model, &run.store, &dataset, i)?;
        cells.push(grid_image(&dataset, recon));
    }
    let values = diagnostics::traversal_values(TRAVERSAL_COLS);
    for &latent in &order {
        let row = diagnostics::latent_traversal(
            model,
            &run.store,
            &dataset,
            seed_index,
            latent,
            &values,
        )?;
        for pixels in row {
            cells.push(grid_image(&dataset, pixels));
        }
    }
    let rows = 2 + order.len();
    let png = args.out.join("traversal.png");
    diagnostics::image_grid_png(&cells, rows, TRAVERSAL_COLS, &png)?;
    record_args(
        &args.out.join("traverse_config.toml"),
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("data", args.data.display().to_string()),
            ("seed", args.seed.to_string()),
            ("seed_index", seed_index.to_string()),
            ("latent_order", format!("{order:?}")),
            ("avg_kl", format!("{kls:?}")),
        ],
    )?;
    println!("wrote {}", png.display());
    Ok(())
}

fn heatmap(args: CkptDataArgs) -> Result<(), CliError> {
    let (run, dataset) = load_vae_with_data(&args.ckpt, &args.data)?;
    let model = run
        .vae()
        .ok_or_else(|| CliError::Config("heatmap needs a VAE checkpoint".into()))?;
    std::fs::create_dir_all(&args.out)?;
    let maps = diagnostics::position_tuning_heatmap(model, &run.store, &dataset)?;
    let sample: Vec<usize> = (0..dataset.len()).collect();
    let kls = diagnostics::average_kl(model, &run.store, &dataset, &sample)?;
    let order = diagnostics::kl_ordering(&kls)?;
    let ordered: Vec<_> = order.iter().map(|&k| maps[k].clone()).collect();
    let png = args.out.join("tuning_heatmaps.png");
    diagnostics::heatmap_grid_png(&ordered, 8, &png)?;
    record_args(
        &args.out.join("heatmap_config.toml"),
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("data", args.data.display().to_string()),
            ("latent_order", format!("{order:?}")),
        ],
    )?;
    println!("wrote {}", png.display());
    Ok(())
}

fn curves(args: CurvesArgs) -> Result<(), CliError> {
    let data = diagnostics::capacity_curves(&args.data)?;
    diagnostics::write_curves(&data, &args.out)?;
    record_args(
        &args.out.join("curves_config.toml"),
        &[("data", args.data.display().to_string())],
    )?;
    println!("wrote plot data to {}", args.out.display());
    Ok(())
}

fn score(args: CkptDataArgs) -> Result<(), CliError> {
    let (run, dataset) = load_vae_with_data(&args.ckpt, &args.data)?;
    let model = run
        .vae()
        .ok_or_else(|| CliError::Config("score needs a VAE checkpoint".into()))?;
    std::fs::create_dir_all(&args.out)?;
    let score = diagnostics::factor_alignment_score(model, &run.store, &dataset, 4096)?;
    let mut matrix = format!("latent,{}\n", score.factor_names.join(","));
    for (k, row) in score.matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(matrix, "{k},{}", cells.join(","));
    }
    std::fs::write(args.out.join("alignment.csv"), matrix)?;
    let mut matching = String::from("latent,factor,abs_spearman\n");
    for (latent, factor, rho) in &score.matching {
        let _ = writeln!(matching, "{latent},{},{rho}", score.factor_names[*factor]);
    }
    std::fs::write(args.out.join("matching.csv"), matching)?;
    record_args(
        &args.out.join("score_config.toml"),
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("data", args.data.display().to_string()),
        ],
    )?;
    println!("wrote alignment scores to {}", args.out.display());
    Ok(())
}
