//! Pipeline driver: scene setup with the synthetic oracle, generation,
//! trajectory QA, directive planning, reconstruction, rendering, and
//! export, all from one binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splatforge_core::losses::random_scene_gradcheck;
use splatforge_core::manifest::SceneManifest;
use splatforge_core::optim::OptimizerConfig;
use splatforge_core::oracle::{OracleConfig, SyntheticOracle};
use splatforge_core::pipeline::{
    run_export, run_generate, run_qa_loop, run_reconstruct, save_png, ExportTarget,
    GeneratorAdapter, OracleAdapter, PoseSource, ReconstructConfig,
};
use splatforge_core::plan::{build_layout, format_directive, parse_plan};
use splatforge_core::splat::{load_ply_file, render, RenderOptions};

#[derive(Parser)]
#[command(
    name = "splatforge",
    about = "Geometry-aware Gaussian-splat scene pipeline",
    version
)]
struct Cli {
    /// Path to the scene manifest JSON.
    #[arg(long, global = true, default_value = "manifest.json")]
    manifest: PathBuf,
    /// Base random seed for commands that create manifests or scenes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread count (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Oracle/scene configuration JSON (defaults to oracle.json next to
    /// the manifest).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a synthetic-oracle scene: manifest plus oracle config.
    Oracle(OracleArgs),
    /// Generate frames for all pending segments.
    Generate,
    /// Run the regenerate-on-abnormal trajectory QA loop.
    Qa,
    /// Parse and validate an extension-plan answer.
    Plan(PlanArgs),
    /// Optimize a Gaussian scene against the accepted segments.
    Reconstruct(ReconstructArgs),
    /// Render stored views of an optimized scene to PNG images.
    Render(RenderArgs),
    /// Export posed images or the scene PLY.
    Export(ExportArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct OracleArgs {
    /// Root directory for the scene's files.
    #[arg(long)]
    root: PathBuf,
    /// Extension iterations per side (sequence has 2n+1 segments).
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Frames in the initial segment.
    #[arg(long, default_value_t = 8)]
    init_frames: usize,
    /// Frames per extension segment.
    #[arg(long, default_value_t = 6)]
    ext_frames: usize,
    /// Extension directives, one per extension segment (2n total,
    /// leftmost first), separated by ';'.
    #[arg(long)]
    directives: String,
    #[arg(long, default_value_t = 50)]
    gaussians: usize,
    #[arg(long, default_value_t = 32)]
    image_size: u32,
    /// Per-trial probability of an injected trajectory fault.
    #[arg(long, default_value_t = 0.0)]
    fault_probability: f64,
    /// Scene name recorded in the manifest.
    #[arg(long, default_value = "oracle-scene")]
    name: String,
}

#[derive(Args)]
struct PlanArgs {
    /// The plan text ("up 10, left 20, forward 1; ..." clauses).
    answer: String,
    /// Expected number of directives.
    #[arg(long)]
    expected: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long, default_value = "reconstruction")]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    iterations: usize,
    /// Back-projection stride of the initializer.
    #[arg(long, default_value_t = 2)]
    stride: usize,
}

#[derive(Args)]
struct RenderArgs {
    /// Optimized scene PLY.
    #[arg(long)]
    ply: PathBuf,
    #[arg(long, default_value = "renders")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Export target: posed-images or ply.
    #[arg(long)]
    target: String,
    #[arg(long, default_value = "export")]
    out: PathBuf,
    /// Reconstruction directory holding scene.ply (for --target ply).
    #[arg(long)]
    reconstruction: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 10)]
    gaussians: usize,
    #[arg(long, default_value_t = 16)]
    image_size: u32,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 2e-3)]
    tolerance: f64,
}

fn config_path(cli: &Cli) -> PathBuf {
    cli.config.clone().unwrap_or_else(|| {
        cli.manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join("oracle.json")
    })
}

fn load_adapter(cli: &Cli) -> Result<GeneratorAdapter> {
    let path = config_path(cli);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading oracle config {}", path.display()))?;
    let config: OracleConfig = serde_json::from_str(&text)?;
    Ok(GeneratorAdapter::SyntheticOracle(OracleAdapter::new(
        SyntheticOracle::new(config),
    )))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring thread pool")?;
    }
    match &cli.command {
        Command::Oracle(args) => cmd_oracle(&cli, args),
        Command::Generate => cmd_generate(&cli),
        Command::Qa => cmd_qa(&cli),
        Command::Plan(args) => cmd_plan(args),
        Command::Reconstruct(args) => cmd_reconstruct(&cli, args),
        Command::Render(args) => cmd_render(&cli, args),
        Command::Export(args) => cmd_export(&cli, args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn cmd_oracle(cli: &Cli, args: &OracleArgs) -> Result<()> {
    let directives = parse_plan(&args.directives, 2 * args.n)?;
    let layout = build_layout(args.n, args.init_frames, args.ext_frames);
    let named: Vec<(String, _)> = layout
        .segment_ids
        .iter()
        .filter(|id| *id != "init")
        .cloned()
        .zip(directives)
        .collect();
    std::fs::create_dir_all(&args.root)?;
    let manifest = SceneManifest::from_layout(&args.name, &layout, &named, &args.root, cli.seed)?;
    manifest.save(&cli.manifest)?;
    let config = OracleConfig {
        gaussian_count: args.gaussians,
        image_size: args.image_size,
        fault_probability: args.fault_probability,
        scene_seed: cli.seed,
        ..OracleConfig::default()
    };
    std::fs::write(config_path(cli), serde_json::to_string_pretty(&config)?)?;
    println!(
        "initialized scene '{}': {} segments, {} total frames",
        args.name,
        manifest.segments.len(),
        layout.total_length
    );
    Ok(())
}

fn cmd_generate(cli: &Cli) -> Result<()> {
    let mut manifest = SceneManifest::load(&cli.manifest)?;
    let adapter = load_adapter(cli)?;
    run_generate(&mut manifest, &adapter)?;
    manifest.save(&cli.manifest)?;
    println!("generated {} segments", manifest.segments.len());
    Ok(())
}

fn cmd_qa(cli: &Cli) -> Result<()> {
    let mut manifest = SceneManifest::load(&cli.manifest)?;
    let adapter = load_adapter(cli)?;
    let stats = run_qa_loop(&mut manifest, &adapter, &PoseSource::SyntheticOracle)?;
    manifest.save(&cli.manifest)?;
    println!(
        "qa complete: {} segments accepted, {} regenerations (mean extra trials {:.3})",
        stats.segments_total, stats.regenerations_total, stats.mean_extra_trials
    );
    Ok(())
}

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let directives = parse_plan(&args.answer, args.expected)?;
    for (i, d) in directives.iter().enumerate() {
        println!("{}: {}", i + 1, format_directive(d));
    }
    Ok(())
}

fn cmd_reconstruct(cli: &Cli, args: &ReconstructArgs) -> Result<()> {
    let manifest = SceneManifest::load(&cli.manifest)?;
    let adapter = load_adapter(cli)?;
    let config = ReconstructConfig {
        optimizer: OptimizerConfig {
            iterations: args.iterations,
            weights: manifest.weights,
            ..OptimizerConfig::default()
        },
        render_opts: RenderOptions::default(),
        init_stride: args.stride,
        initial_scene: None,
        output_dir: args.out.clone(),
    };
    let out = run_reconstruct(&manifest, &adapter, &config)?;
    println!(
        "reconstructed {} gaussians; final loss {:.6}; wrote {} and {}",
        out.scene.len(),
        out.final_loss,
        out.ply_path.display(),
        out.trace_path.display()
    );
    Ok(())
}

fn cmd_render(cli: &Cli, args: &RenderArgs) -> Result<()> {
    let manifest = SceneManifest::load(&cli.manifest)?;
    let adapter = load_adapter(cli)?;
    let oracle = match &adapter {
        GeneratorAdapter::SyntheticOracle(o) => o,
        GeneratorAdapter::ExternalCommand(_) => bail!("render requires the oracle adapter"),
    };
    let scene = load_ply_file(&args.ply)?;
    let cameras = oracle.plan_cameras(&manifest)?;
    std::fs::create_dir_all(&args.out)?;
    let mut index = 0usize;
    for seg in &manifest.segments {
        for cam in &cameras[&seg.segment_id] {
            let frame = render(&scene, cam, &RenderOptions::default());
            save_png(
                &frame.color,
                &args.out.join(format!("frame_{:06}.png", index)),
            )?;
            index += 1;
        }
    }
    println!("rendered {} views to {}", index, args.out.display());
    Ok(())
}

fn cmd_export(cli: &Cli, args: &ExportArgs) -> Result<()> {
    let manifest = SceneManifest::load(&cli.manifest)?;
    let adapter = load_adapter(cli)?;
    let target = match args.target.as_str() {
        "posed-images" => ExportTarget::PosedImages,
        "ply" => ExportTarget::Ply,
        other => bail!("unknown export target {:?} (posed-images or ply)", other),
    };
    run_export(
        &manifest,
        &adapter,
        target,
        args.reconstruction.as_deref(),
        &args.out,
    )?;
    println!("exported {} to {}", args.target, args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut worst = 0.0f64;
    for seed in 0..args.scenes as u64 {
        let report = random_scene_gradcheck(seed, args.gaussians, args.image_size, args.step)?;
        for g in &report.groups {
            println!(
                "scene {:>3} {:<12} max rel error {:.3e}",
                seed, g.name, g.max_rel_error
            );
        }
        worst = worst.max(report.max_rel_error);
    }
    println!("worst relative error over all scenes: {:.3e}", worst);
    if worst >= args.tolerance {
        bail!(
            "gradient check failed: {:.3e} >= tolerance {:.3e}",
            worst,
            args.tolerance
        );
    }
    println!("gradient check passed (tolerance {:.1e})", args.tolerance);
    Ok(())
}
