//! Command-line workflows: dataset synthesis, training, rendering,
//! evaluation, and ray-grid hit analysis.
//!
//! Flag precedence is defaults < `--config` JSON file < explicit flags. The
//! fully resolved configuration is printed at startup and embedded next to
//! every artifact (inside the dataset manifest for `synth`, as a
//! `*_config.json` sidecar elsewhere).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use spherad::field::RadianceField;
use spherad::geom::GridConfig;
use spherad::img::Image;
use spherad::io::{load_checkpoint, load_dataset, save_png, Split};
use spherad::metrics::{
    hit_histogram_cartesian, hit_histogram_spherical, matched_cartesian_side, psnr, ssim,
    ws_psnr, ws_ssim,
};
use spherad::render::{render_image, RenderConfig};
use spherad::scene::{make_synthetic_dataset, SyntheticScene};
use spherad::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "spherad", version, about = "Spherical-grid radiance fields for panoramic captures")]
struct Cli {
    /// JSON file with default values for the subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset (PNG frames + JSON manifest).
    Synth(SynthArgs),
    /// Train a radiance field on a dataset's train split.
    Train(TrainArgs),
    /// Render dataset views from a checkpoint.
    Render(RenderArgs),
    /// Compare rendered views against dataset ground truth (CSV metrics).
    Eval(EvalArgs),
    /// Ray-grid hit histograms for the spherical and Cartesian grids.
    Hitmap(HitmapArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenePreset {
    /// Checkered box room with two interior balls.
    Room,
    /// Single soft ball, quick smoke-test scene.
    Ball,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for frames and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    scene: Option<ScenePreset>,
    /// Total views; even indices become the train split, odd the test split.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    circle_radius: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Ray-march steps per pixel of the ground-truth renderer.
    #[arg(long)]
    steps_per_ray: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest path.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory (checkpoints, training log, config sidecar).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_r: Option<usize>,
    #[arg(long)]
    n_theta: Option<usize>,
    #[arg(long)]
    n_phi: Option<usize>,
    #[arg(long)]
    r0: Option<f64>,
    /// Bounding radius; defaults to the dataset's hint.
    #[arg(long)]
    r_max: Option<f64>,
    #[arg(long)]
    n_density: Option<usize>,
    #[arg(long)]
    n_appearance: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    env_height: Option<usize>,
    #[arg(long)]
    env_width: Option<usize>,
    /// Train without an environment map (black background).
    #[arg(long)]
    no_env: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tv_weight: Option<f64>,
    #[arg(long)]
    n_coarse: Option<usize>,
    #[arg(long)]
    n_fine: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decay the learning rate exponentially to 0.1x over the run.
    #[arg(long)]
    lr_decay: bool,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    log_interval: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest providing poses and image dimensions.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_coarse: Option<usize>,
    #[arg(long)]
    n_fine: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest with the ground-truth images.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory of rendered frames named like the dataset images.
    #[arg(long)]
    renders: PathBuf,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HitmapArgs {
    /// Dataset manifest to take camera poses from; omitted means a single
    /// pose at the scene center.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    n_r: Option<usize>,
    #[arg(long)]
    n_theta: Option<usize>,
    #[arg(long)]
    n_phi: Option<usize>,
    #[arg(long)]
    r0: Option<f64>,
    #[arg(long)]
    r_max: Option<f64>,
    /// Per-cell counts CSV (non-empty cells).
    #[arg(long)]
    out_csv: PathBuf,
    /// Heat image of one radial shell (Yin and Yang side by side).
    #[arg(long)]
    out_png: PathBuf,
    /// Shell index for the heat image; defaults to the middle shell.
    #[arg(long)]
    shell: Option<usize>,
}

/// Values from the optional --config JSON file.
struct FileConfig(Value);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self(Value::Null)),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let v: Value = serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", p.display()))?;
                if !v.is_object() {
                    bail!("config {} must be a JSON object", p.display());
                }
                Ok(Self(v))
            }
        }
    }

    fn usize(&self, key: &str) -> Option<usize> {
        self.0.get(key).and_then(|v| v.as_u64()).map(|v| v as usize)
    }

    fn u64(&self, key: &str) -> Option<u64> {
        self.0.get(key).and_then(|v| v.as_u64())
    }

    fn f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(|v| v.as_f64())
    }

    fn bool(&self, key: &str) -> Option<bool> {
        self.0.get(key).and_then(|v| v.as_bool())
    }
}

fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let threads = resolve(cli.threads, file.usize("threads"), available);
    // One pool serves the data-parallel passes; training builds its own of
    // the same size. Results do not depend on the worker count.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.clamp(1, available))
        .build()
        .context("building thread pool")?;
    pool.install(|| match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args, &file, threads),
        Cmd::Train(args) => cmd_train(args, &file, threads),
        Cmd::Render(args) => cmd_render(args, &file, threads),
        Cmd::Eval(args) => cmd_eval(args, &file, threads),
        Cmd::Hitmap(args) => cmd_hitmap(args, &file, threads),
    })
}

/// The thread count is printed but never embedded in artifacts: outputs
/// are identical for any worker count, and their provenance must be too.
fn print_config(cmd: &str, threads: usize, cfg: &Value) {
    println!(
        "resolved config: {}",
        serde_json::to_string(&json!({ "command": cmd, "threads": threads, "config": cfg }))
            .unwrap()
    );
}

fn write_sidecar(dir_or_file: &Path, name: &str, cfg: &Value) -> Result<()> {
    let dir = if dir_or_file.is_dir() {
        dir_or_file.to_path_buf()
    } else {
        dir_or_file.parent().unwrap_or(Path::new(".")).to_path_buf()
    };
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_synth(args: SynthArgs, file: &FileConfig, threads: usize) -> Result<()> {
    let scene_kind = args.scene.unwrap_or(ScenePreset::Room);
    let views = resolve(args.views, file.usize("views"), 16);
    let circle_radius = resolve(args.circle_radius, file.f64("circle_radius"), 0.15);
    let width = resolve(args.width, file.usize("width"), 200);
    let height = resolve(args.height, file.usize("height"), 100);
    let steps = resolve(args.steps_per_ray, file.usize("steps_per_ray"), 512);
    let seed = resolve(args.seed, file.u64("seed"), 0);
    let resolved = json!({
        "scene": format!("{scene_kind:?}"),
        "views": views,
        "circle_radius": circle_radius,
        "width": width,
        "height": height,
        "steps_per_ray": steps,
        "seed": seed,
        "out": args.out,
    });
    print_config("synth", threads, &resolved);
    let scene = match scene_kind {
        ScenePreset::Room => SyntheticScene::room_with_balls(),
        ScenePreset::Ball => smoke_ball_scene(),
    };
    let manifest = make_synthetic_dataset(
        &scene,
        views,
        circle_radius,
        width,
        height,
        seed,
        steps,
        &args.out,
        Some(resolved),
    )?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn smoke_ball_scene() -> SyntheticScene {
    use nalgebra::Vector3;
    use spherad::scene::{ColorField, EnvFunction, Primitive, Shape};
    SyntheticScene {
        primitives: vec![Primitive {
            shape: Shape::Ball {
                center: Vector3::new(1.5, 0.3, 0.0),
                radius: 0.8,
            },
            density: 8.0,
            soft_width: 0.15,
            color: ColorField::AngularGradient {
                axis: Vector3::new(0.0, 0.0, 1.0),
                a: [0.9, 0.3, 0.2],
                b: [0.2, 0.4, 0.9],
            },
        }],
        env: EnvFunction::VerticalGradient {
            top: [0.4, 0.55, 0.85],
            bottom: [0.1, 0.1, 0.12],
        },
        bound: 8.0,
    }
}

fn cmd_train(args: TrainArgs, file: &FileConfig, threads: usize) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let defaults = TrainConfig::default();
    let n_r = resolve(args.n_r, file.usize("n_r"), 48);
    let n_theta = resolve(args.n_theta, file.usize("n_theta"), 56);
    let n_phi = resolve(args.n_phi, file.usize("n_phi"), 166);
    let r0 = resolve(args.r0, file.f64("r0"), 0.1);
    let r_max = resolve(args.r_max, file.f64("r_max"), dataset.r_max_hint);
    let n_density = resolve(args.n_density, file.usize("n_density"), 4);
    let n_appearance = resolve(args.n_appearance, file.usize("n_appearance"), 8);
    let channels = resolve(args.channels, file.usize("channels"), 12);
    let use_env = !args.no_env && !file.bool("no_env").unwrap_or(false);
    let env_height = resolve(args.env_height, file.usize("env_height"), 32);
    let env_width = resolve(args.env_width, file.usize("env_width"), 64);
    let tc = TrainConfig {
        lr: resolve(args.lr, file.f64("lr"), defaults.lr),
        batch_rays: resolve(args.batch, file.usize("batch"), defaults.batch_rays),
        steps: resolve(args.steps, file.usize("steps"), defaults.steps),
        tv_weight: resolve(args.tv_weight, file.f64("tv_weight"), defaults.tv_weight),
        n_coarse: resolve(args.n_coarse, file.usize("n_coarse"), 24),
        n_fine: resolve(args.n_fine, file.usize("n_fine"), 8),
        kernel: resolve(args.kernel, file.usize("kernel"), defaults.kernel),
        seed: resolve(args.seed, file.u64("seed"), defaults.seed),
        lr_decay: args.lr_decay || file.bool("lr_decay").unwrap_or(false),
        threads,
        checkpoint_interval: resolve(
            args.checkpoint_interval,
            file.usize("checkpoint_interval"),
            defaults.checkpoint_interval,
        ),
        log_interval: resolve(
            args.log_interval,
            file.usize("log_interval"),
            defaults.log_interval,
        ),
        ..defaults
    };
    let resolved = json!({
        "dataset": args.dataset,
        "out": args.out,
        "grid": { "n_r": n_r, "n_theta": n_theta, "n_phi": n_phi, "r0": r0, "r_max": r_max },
        "field": {
            "n_density": n_density, "n_appearance": n_appearance, "channels": channels,
            "env": if use_env { json!({ "height": env_height, "width": env_width }) } else { Value::Null },
        },
        "lr": tc.lr, "batch": tc.batch_rays, "steps": tc.steps, "tv_weight": tc.tv_weight,
        "n_coarse": tc.n_coarse, "n_fine": tc.n_fine, "kernel": tc.kernel, "seed": tc.seed,
        "lr_decay": tc.lr_decay,
        "checkpoint_interval": tc.checkpoint_interval, "log_interval": tc.log_interval,
    });
    print_config("train", threads, &resolved);
    std::fs::create_dir_all(&args.out)?;
    write_sidecar(&args.out, "train_config.json", &resolved)?;

    let grid_cfg = GridConfig::new(n_r, n_theta, n_phi, r0, r_max)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(tc.seed);
    let env_dims = use_env.then_some((env_height, env_width));
    let mut field =
        RadianceField::new(grid_cfg, n_density, n_appearance, channels, env_dims, &mut rng);
    let log = train(&dataset, &mut field, &tc, Some(&args.out))?;
    if let Some(row) = log.rows.last() {
        println!(
            "final: step {} loss {:.6e} batch_psnr {:.2} dB",
            row.step, row.loss, row.batch_psnr
        );
    }
    println!("wrote {}", args.out.join("checkpoint.bin").display());
    Ok(())
}

fn split_matches(arg: SplitArg, s: Split) -> bool {
    matches!(
        (arg, s),
        (SplitArg::All, _) | (SplitArg::Train, Split::Train) | (SplitArg::Test, Split::Test)
    )
}

fn frame_file_name(image: &str) -> String {
    Path::new(image)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image.to_owned())
}

fn cmd_render(args: RenderArgs, file: &FileConfig, threads: usize) -> Result<()> {
    let split = args.split.unwrap_or(SplitArg::Test);
    let rc = RenderConfig {
        n_coarse: resolve(args.n_coarse, file.usize("n_coarse"), 24),
        n_fine: resolve(args.n_fine, file.usize("n_fine"), 8),
        kernel: resolve(args.kernel, file.usize("kernel"), 2),
        stochastic: false,
        transmittance_cutoff: 1e-4,
    };
    let resolved = json!({
        "checkpoint": args.checkpoint,
        "dataset": args.dataset,
        "split": format!("{split:?}"),
        "out": args.out,
        "n_coarse": rc.n_coarse, "n_fine": rc.n_fine, "kernel": rc.kernel,
    });
    print_config("render", threads, &resolved);
    let field = load_checkpoint(&args.checkpoint)?;
    let manifest = spherad::io::load_manifest(&args.dataset)?;
    std::fs::create_dir_all(&args.out)?;
    write_sidecar(&args.out, "render_config.json", &resolved)?;
    let mut n = 0;
    for frame in &manifest.frames {
        if !split_matches(split, frame.split) {
            continue;
        }
        let pose = spherad::io::pose_from_matrix4(&frame.pose, &args.dataset)?;
        let img = render_image(&field, &pose, manifest.width, manifest.height, &rc)?;
        save_png(&img, &args.out.join(frame_file_name(&frame.image)))?;
        n += 1;
    }
    println!("rendered {n} views into {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs, file: &FileConfig, threads: usize) -> Result<()> {
    let _ = file;
    let split = args.split.unwrap_or(SplitArg::Test);
    let resolved = json!({
        "dataset": args.dataset,
        "renders": args.renders,
        "split": format!("{split:?}"),
        "out": args.out,
    });
    print_config("eval", threads, &resolved);
    let dataset = load_dataset(&args.dataset)?;
    let manifest = spherad::io::load_manifest(&args.dataset)?;
    let mut rows = Vec::new();
    for (frame, mf) in dataset.frames.iter().zip(manifest.frames.iter()) {
        if !split_matches(split, frame.split) {
            continue;
        }
        let name = frame_file_name(&mf.image);
        let rendered = spherad::io::load_png(&args.renders.join(&name))?;
        rows.push((
            name,
            psnr(&rendered, &frame.image)?,
            ws_psnr(&rendered, &frame.image)?,
            ssim(&rendered, &frame.image)?,
            ws_ssim(&rendered, &frame.image)?,
        ));
    }
    if rows.is_empty() {
        bail!("no frames matched split {split:?}");
    }
    let mut out = String::from("image,psnr,ws_psnr,ssim,ws_ssim\n");
    let mut means = [0.0f64; 4];
    for (name, p, wp, s, wss) in &rows {
        out.push_str(&format!("{name},{p:.6},{wp:.6},{s:.6},{wss:.6}\n"));
        for (m, v) in means.iter_mut().zip([p, wp, s, wss]) {
            *m += *v;
        }
    }
    let n = rows.len() as f64;
    out.push_str(&format!(
        "mean,{:.6},{:.6},{:.6},{:.6}\n",
        means[0] / n,
        means[1] / n,
        means[2] / n,
        means[3] / n
    ));
    std::fs::write(&args.out, &out).with_context(|| format!("writing {}", args.out.display()))?;
    write_sidecar(&args.out, "eval_config.json", &resolved)?;
    println!(
        "mean psnr {:.2} ws_psnr {:.2} ssim {:.4} ws_ssim {:.4} over {} views",
        means[0] / n,
        means[1] / n,
        means[2] / n,
        means[3] / n,
        rows.len()
    );
    Ok(())
}

fn cmd_hitmap(args: HitmapArgs, file: &FileConfig, threads: usize) -> Result<()> {
    let width = resolve(args.width, file.usize("width"), 400);
    let height = resolve(args.height, file.usize("height"), 200);
    let n_r = resolve(args.n_r, file.usize("n_r"), 48);
    let n_theta = resolve(args.n_theta, file.usize("n_theta"), 56);
    let n_phi = resolve(args.n_phi, file.usize("n_phi"), 166);
    let r0 = resolve(args.r0, file.f64("r0"), 0.1);
    let r_max = resolve(args.r_max, file.f64("r_max"), 15.0);
    let cfg = GridConfig::new(n_r, n_theta, n_phi, r0, r_max)?;
    let shell = resolve(args.shell, file.usize("shell"), n_r / 2).min(n_r - 1);
    let resolved = json!({
        "dataset": args.dataset,
        "width": width, "height": height,
        "grid": { "n_r": n_r, "n_theta": n_theta, "n_phi": n_phi, "r0": r0, "r_max": r_max },
        "shell": shell,
        "out_csv": args.out_csv, "out_png": args.out_png,
    });
    print_config("hitmap", threads, &resolved);

    let poses = match &args.dataset {
        Some(path) => {
            let manifest = spherad::io::load_manifest(path)?;
            manifest
                .frames
                .iter()
                .map(|f| spherad::io::pose_from_matrix4(&f.pose, path))
                .collect::<spherad::Result<Vec<_>>>()?
        }
        None => vec![spherad::geom::CameraPose::identity()],
    };
    let sph = hit_histogram_spherical(&poses, &cfg, width, height);
    let cart = hit_histogram_cartesian(&poses, &cfg, width, height);
    println!(
        "spherical: cells {} non-empty {} total {} mean {:.2} cv {:.4}",
        sph.n_cells, sph.non_empty, sph.total, sph.mean_non_empty, sph.cv
    );
    println!(
        "cartesian (side {}): cells {} non-empty {} total {} mean {:.2} cv {:.4}",
        matched_cartesian_side(&cfg),
        cart.n_cells,
        cart.non_empty,
        cart.total,
        cart.mean_non_empty,
        cart.cv
    );

    // Non-empty spherical cells as CSV.
    let mut out = String::from("grid,i_r,i_theta,i_phi,count\n");
    let per_grid = n_r * n_theta * n_phi;
    for (i, &c) in sph.counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let (g, rest) = (i / per_grid, i % per_grid);
        let ir = rest / (n_theta * n_phi);
        let it = (rest / n_phi) % n_theta;
        let ip = rest % n_phi;
        let gname = if g == 0 { "yin" } else { "yang" };
        out.push_str(&format!("{gname},{ir},{it},{ip},{c}\n"));
    }
    std::fs::write(&args.out_csv, &out)
        .with_context(|| format!("writing {}", args.out_csv.display()))?;

    // Heat image of one shell: Yin left, Yang right, rows are theta.
    let max = sph
        .counts
        .iter()
        .enumerate()
        .filter(|(i, _)| (i % per_grid) / (n_theta * n_phi) == shell)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let mut img = Image::new(2 * n_phi, n_theta);
    for g in 0..2 {
        for it in 0..n_theta {
            for ip in 0..n_phi {
                let c = sph.counts[g * per_grid + (shell * n_theta + it) * n_phi + ip];
                let v = (c as f64 / max).min(1.0);
                img.set_pixel(g * n_phi + ip, it, [v, v, v]);
            }
        }
    }
    save_png(&img, &args.out_png)?;
    write_sidecar(&args.out_csv, "hitmap_config.json", &resolved)?;
    println!("wrote {} and {}", args.out_csv.display(), args.out_png.display());
    Ok(())
}
