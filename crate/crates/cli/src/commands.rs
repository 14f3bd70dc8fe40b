//! Implementations of the subcommands.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use trajfield::scene::frame_name;
use trajfield::trainer::metrics;
use trajfield::{
    load_posed_image_dataset, load_trajectory, make_dataset, orbit_trajectory, oracle_render, save_checkpoint,
    save_dataset, save_trajectory, train_checkpoint, AnalyticScene, Dataset, FrameStats, ImageRGB, ModelSpec,
    OrbitSampler, PipelineConfig, Pose, Preset, Split, TrainConfig, View, ViewingZone,
};

use crate::manifest::{self, RunManifest};
use crate::model::Model;
use crate::setup;

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| format!("unknown preset '{s}' (expected spheres, boxes, mixed or opaque-sphere)"))
}

#[derive(Args, Debug, Clone)]
pub struct GenSceneArgs {
    #[arg(long, value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long)]
    pub views: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Square image side.
    #[arg(long, default_value_t = 96)]
    pub res: u32,
}

/// Writes the training views, a held-out orbit trajectory (`orbit.json`) and its
/// oracle renders (`test/`).
pub fn gen_scene(args: &GenSceneArgs) -> anyhow::Result<()> {
    let sampler = OrbitSampler::default();
    let config = json!({
        "preset": args.preset.name(),
        "views": args.views,
        "res": args.res,
        "orbit": sampler,
        "fov_y_deg": setup::FOV_Y_DEG,
        "oracle_step": setup::ORACLE_STEP,
        "held_out_frames": setup::ORBIT_FRAMES,
    });
    let man = RunManifest::start("gen-scene", Some(args.seed), config);
    let scene = AnalyticScene::preset(args.preset);
    let intr = setup::intrinsics(args.res)?;
    let center = scene.bounds.center();
    let orbit = orbit_trajectory(
        center,
        sampler.radius,
        setup::ORBIT_ELEVATION_DEG,
        0.0,
        setup::ORBIT_STEP_DEG,
        setup::ORBIT_FRAMES,
    );
    let range = setup::depth_range(&orbit)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let train = make_dataset(&scene, args.views, &sampler, &intr, setup::ORACLE_STEP, &range, &mut rng);
    save_dataset(&args.out, &train)?;

    let test = Dataset {
        split: Split::Test,
        views: orbit
            .iter()
            .map(|pose| View {
                image: oracle_render(&scene, pose, &intr, setup::ORACLE_STEP, &range).image,
                pose: *pose,
                intrinsics: intr,
                pseudo: false,
            })
            .collect(),
    };
    save_dataset(&args.out.join("test"), &test)?;
    save_trajectory(&args.out.join("orbit.json"), &orbit)?;
    man.finish(&manifest::in_dir(&args.out))
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub pretrain_iters: usize,
    #[arg(long, default_value_t = 2000)]
    pub joint_iters: usize,
    /// Feature channels.
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    /// Preceding frames fed to the renderer.
    #[arg(long, default_value_t = 2)]
    pub l: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
    /// Guidance half-width in world units; defaults to 5% of the depth range.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub distill: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Pipeline settings for a dataset: depth range from the camera centers, march step
/// a fixed fraction of it.
pub fn pipeline_config(views: &[View], k: usize, l: usize, scale: u32, epsilon: Option<f64>) -> anyhow::Result<PipelineConfig> {
    let range = setup::depth_range(views.iter().map(|v| &v.pose))?;
    let mut pcfg = PipelineConfig::with_range(range);
    pcfg.channels = k;
    pcfg.buffer_len = l;
    pcfg.scale = scale;
    pcfg.march.step = range.len() / setup::STEPS_PER_RANGE;
    if let Some(e) = epsilon {
        pcfg.guidance.epsilon = e;
    }
    pcfg.validate()?;
    Ok(pcfg)
}

pub fn model_spec() -> ModelSpec {
    ModelSpec {
        resolution: [setup::GRID; 3],
        bounds: setup::bounds(),
        occupancy_resolution: [setup::OCCUPANCY_GRID; 3],
        occupancy_threshold: setup::OCCUPANCY_THRESHOLD,
    }
}

/// Checkpoint at `--out`, JSON-lines log at `OUT.log.jsonl`.
pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let data = load_posed_image_dataset(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    if data.is_empty() {
        bail!("dataset {} has no frames", args.data.display());
    }
    let pcfg = pipeline_config(&data.views, args.k, args.l, args.scale, args.epsilon)?;
    let cfg = TrainConfig {
        iters_pretrain: args.pretrain_iters,
        iters_joint: args.joint_iters,
        distill_count: args.distill,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let spec = model_spec();
    let man = RunManifest::start(
        "train",
        Some(args.seed),
        json!({ "args": args, "train": cfg, "pipeline": pcfg, "model": spec }),
    );
    let poses: Vec<Pose> = data.views.iter().map(|v| v.pose).collect();
    let zone = ViewingZone::enclosing(spec.bounds.center(), &poses);

    let log_path = manifest::with_suffix(&args.out, ".log.jsonl");
    let mut lines = String::new();
    let mut log = |r: trajfield::LogRecord| {
        log::info!("{:?} iter {} loss {:.6} psnr {:.2}", r.stage, r.iter, r.loss, r.psnr);
        lines.push_str(&serde_json::to_string(&r).expect("serializable"));
        lines.push('\n');
    };
    let ck = train_checkpoint(&data, &spec, &cfg, &pcfg, zone.as_ref(), &mut log)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&args.out, &ck)?;
    fs::write(&log_path, lines)?;
    man.finish(&manifest::beside(&args.out))
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RenderPathArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_guidance: bool,
    #[arg(long)]
    pub no_nn: bool,
    /// Per-frame stats as a JSON list.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FrameRecord {
    pub frame: usize,
    #[serde(flatten)]
    pub stats: FrameStats,
}

/// Renders `poses` in order through one pipeline.
pub fn render_sequence(
    model: &Model,
    poses: &[Pose],
    use_guidance: bool,
    use_nn: bool,
    mut each: impl FnMut(usize, ImageRGB, &FrameStats) -> anyhow::Result<()>,
) -> anyhow::Result<Vec<FrameRecord>> {
    let mut pipeline = model.pipeline(use_guidance, use_nn)?;
    let mut records = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let (img, stats) = pipeline.render_next(&model.field, &model.occ, &model.renderer, pose, &model.intrinsics)?;
        each(i, img, &stats)?;
        records.push(FrameRecord { frame: i, stats });
    }
    Ok(records)
}

pub fn render_path(args: &RenderPathArgs) -> anyhow::Result<()> {
    let man = RunManifest::start("render-path", None, json!({ "args": args }));
    let model = Model::load(&args.ckpt)?;
    let poses = load_trajectory(&args.path)?;
    fs::create_dir_all(&args.out)?;
    let records = render_sequence(&model, &poses, !args.no_guidance, !args.no_nn, |i, img, _| {
        Ok(img.save_png(&args.out.join(frame_name(i)))?)
    })?;
    if let Some(p) = &args.stats {
        fs::write(p, serde_json::to_string_pretty(&records)?)?;
    }
    man.finish(&manifest::in_dir(&args.out))
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Ground-truth images, one per trajectory pose.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub traj: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameScore {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

pub fn score(predicted: &[ImageRGB], truth: &[ImageRGB]) -> anyhow::Result<EvalReport> {
    if predicted.len() != truth.len() {
        bail!("{} rendered frames but {} reference images", predicted.len(), truth.len());
    }
    if predicted.is_empty() {
        bail!("nothing to evaluate");
    }
    let frames = predicted
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(frame, (p, t))| {
            Ok(FrameScore {
                frame,
                psnr: metrics::psnr(p, t)?,
                ssim: metrics::ssim(p, t)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    Ok(EvalReport {
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
    })
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<EvalReport> {
    let man = RunManifest::start("eval", None, json!({ "args": args }));
    let model = Model::load(&args.ckpt)?;
    let data = load_posed_image_dataset(&args.data)?;
    let poses = load_trajectory(&args.traj)?;
    if data.len() != poses.len() {
        bail!("trajectory has {} poses but dataset has {} frames", poses.len(), data.len());
    }
    if let Some(v) = data.views.first() {
        if (v.intrinsics.width, v.intrinsics.height) != (model.intrinsics.width, model.intrinsics.height) {
            bail!(
                "dataset images are {}x{}, model renders {}x{}",
                v.intrinsics.width,
                v.intrinsics.height,
                model.intrinsics.width,
                model.intrinsics.height
            );
        }
    }
    let mut rendered = Vec::with_capacity(poses.len());
    render_sequence(&model, &poses, true, true, |_, img, _| {
        rendered.push(img);
        Ok(())
    })?;
    let truth: Vec<ImageRGB> = data.views.into_iter().map(|v| v.image).collect();
    let report = score(&rendered, &truth)?;
    fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    man.finish(&manifest::beside(&args.out))?;
    Ok(report)
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub traj: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchSummary {
    pub frames: usize,
    pub ms_volume: f64,
    pub ms_warp: f64,
    pub ms_nn: f64,
    pub ms_total: f64,
    pub samples_per_ray: f64,
    /// Frames after the first.
    pub warm_samples_per_ray: f64,
    pub cold_guided_fraction: f64,
}

impl BenchSummary {
    pub fn from_records(records: &[FrameRecord]) -> Self {
        let mean = |xs: &mut dyn Iterator<Item = f64>| {
            let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            if n == 0 {
                0.0
            } else {
                s / n as f64
            }
        };
        BenchSummary {
            frames: records.len(),
            ms_volume: mean(&mut records.iter().map(|r| r.stats.ms_volume)),
            ms_warp: mean(&mut records.iter().map(|r| r.stats.ms_warp)),
            ms_nn: mean(&mut records.iter().map(|r| r.stats.ms_neural)),
            ms_total: mean(&mut records.iter().map(|r| r.stats.ms_total)),
            samples_per_ray: mean(&mut records.iter().map(|r| r.stats.samples_per_ray_mean)),
            warm_samples_per_ray: mean(&mut records.iter().skip(1).map(|r| r.stats.samples_per_ray_mean)),
            cold_guided_fraction: records.first().map_or(0.0, |r| r.stats.guided_pixel_fraction),
        }
    }
}

/// Renders the trajectory with and without guidance; returns `(guided, unguided)`.
pub fn bench(args: &BenchArgs) -> anyhow::Result<(BenchSummary, BenchSummary)> {
    let model = Model::load(&args.ckpt)?;
    let poses = load_trajectory(&args.traj)?;
    let guided = BenchSummary::from_records(&render_sequence(&model, &poses, true, true, |_, _, _| Ok(()))?);
    let unguided = BenchSummary::from_records(&render_sequence(&model, &poses, false, true, |_, _, _| Ok(()))?);
    Ok((guided, unguided))
}

pub fn print_bench(guided: &BenchSummary, unguided: &BenchSummary) {
    println!("{:<10} {:>10} {:>10} {:>10} {:>10} {:>12} {:>12}", "mode", "volume_ms", "warp_ms", "nn_ms", "total_ms", "samples/ray", "warm s/ray");
    for (name, s) in [("guided", guided), ("unguided", unguided)] {
        println!(
            "{:<10} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>12.2} {:>12.2}",
            name, s.ms_volume, s.ms_warp, s.ms_nn, s.ms_total, s.samples_per_ray, s.warm_samples_per_ray
        );
    }
    if unguided.warm_samples_per_ray > 0.0 {
        println!(
            "warm sample ratio guided/unguided: {:.3}",
            guided.warm_samples_per_ray / unguided.warm_samples_per_ray
        );
    }
}
