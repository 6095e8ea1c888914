mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use settings::{put, Preset};

/// Predict where people belong in a photo, find fitting person segments, and composite them.
///
/// Every command prints one JSON document on stdout; logs go to stderr.
#[derive(Parser, Debug)]
#[command(name = "compose", version)]
struct Cli {
    /// JSON or TOML file with settings; dedicated flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Network dimensions to start from, applied before the config file.
    #[arg(long, global = true, value_enum)]
    network: Option<Preset>,
    /// Override any setting by dotted key, e.g. `--set pipeline.filter.min_area=900`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output; repeat for debug logs.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Prepare training data.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train the placement network or run it on one image.
    #[command(subcommand)]
    Net(NetCommand),
    /// Build or query a segment pool.
    #[command(subcommand)]
    Pool(PoolCommand),
    /// Composite people into a background automatically.
    Run(RunArgs),
    /// Re-render a composite from its provenance record.
    Render(RenderArgs),
    /// Correlate predicted and ground-truth placement histograms.
    Eval(EvalArgs),
    /// Serve the REST API.
    Serve(ServeArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Erase annotated people and write network inputs with their targets.
    Build(DataBuildArgs),
    /// Generate synthetic street scenes with COCO-style annotations.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct DataBuildArgs {
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines detection cache; annotated objects are used when absent.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Category id of the instances to erase.
    #[arg(long)]
    category: Option<u32>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    first_id: u64,
    #[arg(long, default_value_t = 320)]
    width: u32,
    #[arg(long, default_value_t = 240)]
    height: u32,
    /// Also write each scene without its person under `backgrounds/`.
    #[arg(long)]
    backgrounds: bool,
}

#[derive(Subcommand, Debug)]
enum NetCommand {
    Train(TrainArgs),
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by `data build`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    /// JSON array of detections `{"category", "bbox": [x, y, w, h], "score"}`.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Number of location cells.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Number of sizes per location.
    #[arg(long, default_value_t = 1)]
    k_size: usize,
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PoolCommand {
    Build(PoolBuildArgs),
    Query(PoolQueryArgs),
}

#[derive(Args, Debug)]
struct PoolBuildArgs {
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep only the first N segments.
    #[arg(long)]
    max_segments: Option<usize>,
}

#[derive(Args, Debug)]
struct PoolQueryArgs {
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    /// Query box `x,y,w,h` in image pixels.
    #[arg(long = "box", value_name = "X,Y,W,H")]
    bbox: String,
    #[arg(long, default_value_t = 9)]
    k: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    /// Detections of the background, as for `net predict`.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Number of people to add.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    provenance: Option<PathBuf>,
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    provenance: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Paint people as white silhouettes.
    #[arg(long)]
    silhouette: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory written by `data build`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate a uniformly random predictor instead of the network.
    #[arg(long)]
    uniform: bool,
    /// Write histogram renderings into this directory.
    #[arg(long)]
    histograms: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Keep one folder per session here.
    #[arg(long)]
    persist: Option<PathBuf>,
    #[arg(long)]
    max_pixels: Option<u64>,
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| json!(p))
}

/// Settings given by dedicated flags, as a config layer.
fn flag_layer(cli: &Cli) -> Value {
    let mut layer = json!({});
    let mut set = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            put(&mut layer, key, v);
        }
    };
    set("seed", cli.seed.map(|s| json!(s)));
    set("train.seed", cli.seed.map(|s| json!(s)));
    match &cli.command {
        Command::Data(DataCommand::Build(a)) => {
            set("paths.annotations", path_value(&a.annotations));
            set("paths.images", path_value(&a.images));
            set("pipeline.category", a.category.map(|c| json!(c)));
        }
        Command::Net(NetCommand::Train(a)) => {
            set("paths.data", path_value(&a.data));
            set("paths.checkpoint", path_value(&a.out));
            set("train.epochs", a.epochs.map(|v| json!(v)));
            set("train.learning_rate", a.lr.map(|v| json!(v)));
            set("train.batch_size", a.batch_size.map(|v| json!(v)));
        }
        Command::Net(NetCommand::Predict(a)) => set("paths.checkpoint", path_value(&a.ckpt)),
        Command::Pool(PoolCommand::Build(a)) => {
            set("paths.annotations", path_value(&a.annotations));
            set("paths.images", path_value(&a.images));
            set("paths.pool", path_value(&a.out));
        }
        Command::Pool(PoolCommand::Query(a)) => set("paths.pool", path_value(&a.pool)),
        Command::Run(a) => {
            set("paths.checkpoint", path_value(&a.ckpt));
            set("paths.pool", path_value(&a.pool));
        }
        Command::Render(a) => set("paths.pool", path_value(&a.pool)),
        Command::Eval(a) => {
            set("paths.checkpoint", path_value(&a.ckpt));
            set("paths.data", path_value(&a.data));
        }
        Command::Serve(a) => {
            set("paths.checkpoint", path_value(&a.ckpt));
            set("paths.pool", path_value(&a.pool));
        }
        Command::Data(DataCommand::Synth(_)) | Command::Config => {}
    }
    layer
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    let cfg = match settings::resolve(cli.network, cli.config.as_deref(), &cli.set, flag_layer(&cli)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    log::debug!("configuration: {}", serde_json::to_string(&cfg).unwrap_or_default());
    match commands::dispatch(cli.command, &cfg) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("JSON output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
