//! Command-line tools and the frame server.

pub mod commands;
pub mod manifest;
pub mod model;
pub mod server;
pub mod setup;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trajfield::FrameFormat;

use commands::{BenchArgs, EvalArgs, GenSceneArgs, RenderPathArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "trajfield", version = manifest::VERSION, about = "Trajectory-guided neural field rendering")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural posed-image dataset.
    GenScene(GenSceneArgs),
    /// Pre-train the field, then train field and renderer jointly.
    Train(TrainArgs),
    /// Render a trajectory through one pipeline.
    RenderPath(RenderPathArgs),
    /// Score trajectory renders against reference images.
    Eval(EvalArgs),
    /// Time a trajectory with and without guidance.
    Bench(BenchArgs),
    /// Stream frames over a WebSocket.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WireFormat {
    Rgb8,
    Png,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = 512)]
    pub max_res: u32,
    #[arg(long, value_enum, default_value_t = WireFormat::Rgb8)]
    pub format: WireFormat,
    /// Directory of viewer assets served at `/`.
    #[arg(long)]
    pub assets: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match cli.command {
        Command::GenScene(a) => commands::gen_scene(&a),
        Command::Train(a) => commands::train(&a),
        Command::RenderPath(a) => commands::render_path(&a),
        Command::Eval(a) => {
            let r = commands::eval(&a)?;
            println!("mean PSNR {:.3} dB, mean SSIM {:.4} over {} frames", r.mean_psnr, r.mean_ssim, r.frames.len());
            Ok(())
        }
        Command::Bench(a) => {
            let (g, u) = commands::bench(&a)?;
            commands::print_bench(&g, &u);
            Ok(())
        }
        Command::Serve(a) => serve(a),
    }
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let model = Arc::new(model::Model::load(&a.ckpt)?);
    let config = server::ServerConfig {
        max_res: a.max_res,
        format: match a.format {
            WireFormat::Rgb8 => FrameFormat::Rgb8,
            WireFormat::Png => FrameFormat::Png,
        },
        assets: a.assets,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = server::bind(a.bind).await?;
        log::info!("listening on {}", listener.local_addr()?);
        tokio::select! {
            r = server::serve(listener, model, config) => r?,
            _ = tokio::signal::ctrl_c() => log::info!("shutting down"),
        }
        Ok(())
    })
}
