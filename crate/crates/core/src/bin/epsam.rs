use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epsam_core::config::{PipelineConfig, Preset};
use epsam_core::pipeline::{self, RunLayout};
use epsam_core::postproc::PostprocConfig;
use epsam_core::syndata::Split;
use epsam_core::Error;

#[derive(Parser)]
#[command(name = "epsam", version, about = "Weakly supervised segmentation from image-level labels")]
struct Cli {
    /// Pipeline config JSON. Defaults to the preset below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Overrides the global seed and re-derives the per-stage seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Train the patch classifier.
    TrainCam,
    /// Write fused and single-orientation CAMs plus classifier scores.
    ExtractCam,
    /// Threshold and clean the CAMs into initial masks.
    Initmask {
        /// Try every (q, radius) pair on the validation split and print the scores.
        #[arg(long)]
        grid_search: bool,
    },
    /// Sample point prompts from the CAMs.
    Prompts,
    /// Fine-tune the preliminary decoder on initial masks.
    PretrainDecoder,
    /// Run the self-training iterations.
    Selftrain,
    /// Predict masks for the validation and test splits.
    Infer,
    /// Score predictions and write the report.
    Eval,
    /// Run every stage, skipping the ones already done.
    Run,
}

fn load_config(cli: &Cli) -> epsam_core::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::preset(cli.preset.parse::<Preset>()?),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn grid_search(layout: &RunLayout) -> epsam_core::Result<()> {
    use epsam_core::eval::dice;
    use epsam_core::grid::{load_map_png16, BinaryMask};
    use epsam_core::postproc::initial_mask_from_fused;

    let dataset = epsam_core::syndata::Dataset::open(&layout.manifest())?;
    let entries: Vec<_> = dataset
        .manifest
        .split(Split::Valid)
        .filter(|e| e.label.is_positive())
        .collect();
    let mut cams = Vec::new();
    for e in &entries {
        let values = load_map_png16(&pipeline::cam_path(&layout.cams(), &e.id))?;
        let gt = BinaryMask::load_png(&dataset.root.join(&e.mask))?;
        cams.push((epsam_core::cam::EnhancedCam { patch_id: e.id.clone(), values }, gt));
    }
    println!("{:>6} {:>6} {:>8}", "q", "radius", "Dice %");
    for q in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6] {
        for radius in 0..=3 {
            let pc = PostprocConfig { quantile_q: q, se_radius: radius };
            pc.validate()?;
            let mean = cams
                .iter()
                .map(|(cam, gt)| dice(&initial_mask_from_fused(cam, &pc).mask, gt))
                .sum::<f64>()
                / cams.len().max(1) as f64;
            println!("{q:>6.2} {radius:>6} {:>8.2}", 100.0 * mean);
        }
    }
    Ok(())
}

fn execute(cli: &Cli) -> epsam_core::Result<()> {
    let cfg = load_config(cli)?;
    let layout = RunLayout::new(&cli.out_dir);
    let stage = |name: &str, r: epsam_core::Result<()>| {
        r.map_err(|e| Error::Stage { stage: name.to_string(), source: Box::new(e) })
    };
    match &cli.command {
        Command::Synth => stage("synth", pipeline::synth(&cfg, &layout.data()).map(drop)),
        Command::TrainCam => stage(
            "train-cam",
            pipeline::train_cam(&cfg, &layout.manifest(), &layout.classifier()).map(drop),
        ),
        Command::ExtractCam => stage(
            "extract-cam",
            pipeline::extract_cams(&layout.manifest(), &layout.classifier(), &layout.cams()).map(drop),
        ),
        Command::Initmask { grid_search: true } => stage("initmask", grid_search(&layout)),
        Command::Initmask { grid_search: false } => stage(
            "initmask",
            pipeline::initmasks(&layout.manifest(), &layout.cams(), &cfg.postproc, &layout.initmask()),
        ),
        Command::Prompts => stage(
            "prompts",
            pipeline::prompts(&layout.manifest(), &layout.cams(), cfg.pepm.k, cfg.pepm.seed, &layout.prompts())
                .map(drop),
        ),
        Command::PretrainDecoder => stage(
            "pretrain-decoder",
            pipeline::pretrain_decoder(
                &cfg,
                &layout.manifest(),
                &layout.initmask(),
                &layout.prompts(),
                &layout.encoder(),
                &layout.preliminary_decoder(),
            )
            .map(drop),
        ),
        Command::Selftrain => stage(
            "selftrain",
            pipeline::selftrain(
                &cfg,
                &layout.manifest(),
                &layout.initmask(),
                &layout.prompts(),
                &layout.encoder(),
                &layout.preliminary_decoder(),
                &layout.selftrain(),
            )
            .map(drop),
        ),
        Command::Infer => stage(
            "infer",
            pipeline::infer(
                &layout.manifest(),
                &layout.cams(),
                &layout.prompts(),
                &layout.encoder(),
                &layout.final_decoder(),
                &[Split::Valid, Split::Test],
                &layout.infer(),
            ),
        ),
        Command::Eval => {
            let report = stage("eval", pipeline::evaluate(&cfg, &layout).map(drop));
            if report.is_ok() {
                let text = layout.report().join("report.txt");
                print!("{}", std::fs::read_to_string(&text).map_err(|e| Error::io(&text, e))?);
            }
            report
        }
        Command::Run => {
            let (_, summary) = pipeline::run_pipeline(&cfg, &cli.out_dir)?;
            for s in &summary.skipped {
                println!("skipped  {s}");
            }
            for s in &summary.executed {
                println!("ran      {s}");
            }
            let text = layout.report().join("report.txt");
            print!("{}", std::fs::read_to_string(&text).map_err(|e| Error::io(&text, e))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
