mod commands;
mod config;
mod imageio;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(name = "facecap", version, about = "Personalized facial capture pipeline")]
struct Cli {
    /// Pipeline config (JSON). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config and reseeds every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Also write PNG previews.
    #[arg(long, global = true)]
    preview: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Landmark-based curation features.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Hierarchical retrieval index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Blendshape rig evaluation.
    #[command(subcommand)]
    Rig(RigCmd),
    /// Rendering.
    #[command(subcommand)]
    Render(RenderCmd),
    /// Texture reconstruction.
    #[command(subcommand)]
    Texture(TextureCmd),
    /// Synthetic dataset sampling and curation.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Inverse-rendering solves.
    #[command(subcommand)]
    Solve(SolveCmd),
    /// Combine two parameter tracks by control mask.
    Blend {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Motion-capture regressor.
    #[command(subcommand)]
    Regress(RegressCmd),
    /// Procedural head assets and datasets for trying the pipeline.
    #[command(subcommand)]
    Fixtures(FixturesCmd),
}

#[derive(Subcommand, Debug)]
enum FeaturesCmd {
    /// Features of every image listed in the landmark file.
    Extract {
        /// Image directory (default: `paths.images`).
        #[arg(long)]
        images: Option<PathBuf>,
        /// Landmark file (default: `paths.landmarks`).
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long, default_value = "features.json")]
        output: String,
    },
}

#[derive(Subcommand, Debug)]
enum IndexCmd {
    Build {
        /// Features file (default: `<out-dir>/features.json`).
        #[arg(long)]
        features: Option<PathBuf>,
    },
    Query {
        /// Index file (default: `<out-dir>/index.json`).
        #[arg(long)]
        index: Option<PathBuf>,
        /// Features file holding the query image (default: `<out-dir>/features.json`).
        #[arg(long)]
        features: Option<PathBuf>,
        /// Query image id (default: the first in the features file).
        #[arg(long)]
        source: Option<String>,
        /// Matches per level, e.g. `2,3,1` (default: `match_counts`).
        #[arg(long, value_delimiter = ',')]
        q: Option<Vec<usize>>,
    },
}

#[derive(Subcommand, Debug)]
enum RigCmd {
    /// Pose the rig and write the mesh as OBJ.
    Eval {
        /// Parameters file (default: neutral).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value = "posed.obj")]
        output: String,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TextureChoice {
    Skin,
    Segmented,
}

#[derive(Subcommand, Debug)]
enum RenderCmd {
    /// Pitch/yaw sweep of the textured rig.
    Turntable {
        #[arg(long, value_enum, default_value = "skin")]
        texture: TextureChoice,
    },
    /// Single render of a parameter file.
    Frame {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "segmented")]
        texture: TextureChoice,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
}

#[derive(Subcommand, Debug)]
enum TextureCmd {
    /// Splat the turntable views (or their translations) and gather.
    Face {
        /// Turntable directory (default: `<out-dir>/turntable`).
        #[arg(long)]
        turntable: Option<PathBuf>,
        /// Directory of images replacing the turntable renders, same file names.
        #[arg(long)]
        views: Option<PathBuf>,
    },
    /// Pick in-the-wild matches for the turntable renders.
    Curate {
        /// Features of the turntable renders.
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Splat matched photographs through the fitted pose and gather.
    Head {
        /// Matches file (default: all images with landmarks).
        #[arg(long)]
        matches: Option<PathBuf>,
    },
    /// Confidence-weighted merge of the face and head textures.
    Merge {
        #[arg(long)]
        face: Option<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Draw region-capped parameter samples.
    Sample {
        /// Also render each sample with the segmented texture.
        #[arg(long)]
        render: bool,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Drop synthetic samples far from the real data; report real gaps.
    Contract {
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        real: Option<PathBuf>,
    },
    /// Grow bootstrap parameters by jitter and interpolation.
    Expand {
        /// Parameters list, e.g. from `solve sequence` (default: `<out-dir>/sequence_params.json`).
        #[arg(long)]
        bootstrap: Option<PathBuf>,
        /// Sample count (default: `curation.expand_target`).
        #[arg(long)]
        target: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum SolveCmd {
    Frame {
        /// Target image (default: first file of `paths.targets`).
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    Sequence {
        /// Target directory (default: `paths.targets`).
        #[arg(long)]
        targets: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum RegressCmd {
    /// Three-stage training on `paths.regression_data`.
    Train,
    /// Regress parameters for every image of a directory.
    Infer {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        images: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum FixturesCmd {
    /// Write head assets, frames, targets and regression data plus a pipeline config.
    Generate,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::load(cli.config.as_deref()).context("config: load")?;
    let seed = cli.seed.unwrap_or(config.seed);
    config.propagate_seed(seed);
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("config: worker pool")?;
    }
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = commands::Ctx {
        config,
        out: cli.out_dir,
        preview: cli.preview,
    };
    ctx.echo_config()?;
    use commands as c;
    match cli.command {
        Command::Features(FeaturesCmd::Extract { images, landmarks, output }) => {
            c::features_extract(&ctx, images, landmarks, &output).context("features extract")
        }
        Command::Index(IndexCmd::Build { features }) => c::index_build(&ctx, features).context("index build"),
        Command::Index(IndexCmd::Query { index, features, source, q }) => {
            c::index_query(&ctx, index, features, source, q).context("index query")
        }
        Command::Rig(RigCmd::Eval { params, output }) => c::rig_eval(&ctx, params, &output).context("rig eval"),
        Command::Render(RenderCmd::Turntable { texture }) => c::render_turntable(&ctx, texture).context("render turntable"),
        Command::Render(RenderCmd::Frame { params, texture, size }) => {
            c::render_frame(&ctx, params, texture, size).context("render frame")
        }
        Command::Texture(TextureCmd::Face { turntable, views }) => c::texture_face(&ctx, turntable, views).context("texture face"),
        Command::Texture(TextureCmd::Curate { renders, index }) => c::texture_curate(&ctx, renders, index).context("texture curate"),
        Command::Texture(TextureCmd::Head { matches }) => c::texture_head(&ctx, matches).context("texture head"),
        Command::Texture(TextureCmd::Merge { face, head }) => c::texture_merge(&ctx, face, head).context("texture merge"),
        Command::Dataset(DatasetCmd::Sample { render, size }) => c::dataset_sample(&ctx, render, size).context("dataset sample"),
        Command::Dataset(DatasetCmd::Contract { synthetic, real }) => {
            c::dataset_contract(&ctx, synthetic, real).context("dataset contract")
        }
        Command::Dataset(DatasetCmd::Expand { bootstrap, target }) => {
            c::dataset_expand(&ctx, bootstrap, target).context("dataset expand")
        }
        Command::Solve(SolveCmd::Frame { target, init }) => c::solve_frame(&ctx, target, init).context("solve frame"),
        Command::Solve(SolveCmd::Sequence { targets }) => c::solve_sequence(&ctx, targets).context("solve sequence"),
        Command::Blend { a, b } => c::blend(&ctx, &a, &b).context("blend"),
        Command::Regress(RegressCmd::Train) => c::regress_train(&ctx).context("regress train"),
        Command::Regress(RegressCmd::Infer { bundle, images }) => c::regress_infer(&ctx, bundle, &images).context("regress infer"),
        Command::Fixtures(FixturesCmd::Generate) => c::fixtures_generate(&ctx).context("fixtures generate"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
