//! bera: drive the erasure pipeline end to end on the synthetic testbed.
//!
//! Commands build on each other through the artifact directory: `gen` lays
//! down episodes, `calibrate`/`train` fit the reference and decoder, and
//! `detect`/`evaluate`/`ablate`/`sweep` consume them. Everything is keyed by
//! the master seed, so re-running any command reproduces its artifact bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bera_core::config::PipelineConfig;
use bera_core::fbl::ReferenceDistribution;
use bera_core::mae::MaeParams;
use bera_core::pipeline::{self, StoredEpisode, World};
use bera_core::testbed::encoder_forward;
use bera_core::{BeraError, Result};

#[derive(Parser)]
#[command(
    name = "bera",
    version,
    about = "Test-time backdoor erasure for vision-token pipelines, on a deterministic synthetic testbed"
)]
struct Cli {
    /// Flat key = value config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the episode dataset for every configured task.
    Gen,
    /// Fit the clean token reference from the generated dataset.
    Calibrate,
    /// Train the reconstruction decoder on the clean split.
    Train,
    /// Detect trigger tokens on one stored episode and dump heatmaps.
    Detect {
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long)]
        episode: usize,
    },
    /// Full defense pass: detect, purify, re-infer, judge, report.
    Evaluate,
    /// Evaluate the ablation switch combinations.
    Ablate,
    /// Evaluate over the trigger-fraction / poison-rate / trigger-type grids.
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Encoder construction is the priciest stage, so it is cached per seed;
/// anything unreadable or mismatched is silently rebuilt.
fn load_world(cfg: &PipelineConfig, out: &Path) -> Result<World> {
    let path = out.join(format!("encoder_{:016x}.btfa", cfg.seed));
    if path.exists() {
        if let Ok(world) = World::from_saved(cfg, &path) {
            return Ok(world);
        }
    }
    let world = World::build(cfg)?;
    fs::create_dir_all(out)?;
    world.encoder.save(&path)?;
    Ok(world)
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(BeraError::Config(format!(
            "missing {} — {}",
            path.display(),
            hint
        )))
    }
}

fn episodes_for(out: &Path, task: usize) -> Result<Vec<StoredEpisode>> {
    let dir = require(
        pipeline::task_dir(out, task).join("episodes"),
        "run `bera gen` first",
    )?;
    pipeline::load_episodes(dir.parent().unwrap())
}

fn reference_for(out: &Path, task: usize) -> Result<ReferenceDistribution> {
    let path = require(
        pipeline::task_dir(out, task).join("reference.btfa"),
        "run `bera calibrate` first",
    )?;
    ReferenceDistribution::load(&path)
}

fn decoder_for(out: &Path, task: usize) -> Result<MaeParams> {
    let path = require(
        pipeline::task_dir(out, task).join("decoder.btfa"),
        "run `bera train` first",
    )?;
    MaeParams::load(&path)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.cmd {
        Cmd::Gen => {
            let world = load_world(&cfg, out)?;
            cfg.save(&out.join("config.txt"))?;
            for &task in &cfg.tasks {
                let episodes = pipeline::generate_task(&world, task)?;
                let dir = pipeline::task_dir(out, task);
                pipeline::write_episodes(&dir, &episodes)?;
                let poisoned = episodes.iter().filter(|e| e.poisoned).count();
                println!(
                    "task {}: {} episodes ({} poisoned) -> {}",
                    task,
                    episodes.len(),
                    poisoned,
                    dir.display()
                );
            }
        }
        Cmd::Calibrate => {
            let world = load_world(&cfg, out)?;
            let mut per_task = BTreeMap::new();
            for &task in &cfg.tasks {
                per_task.insert(task, episodes_for(out, task)?);
            }
            let references = pipeline::calibrate_all(&world, &per_task)?;
            for (&task, reference) in &references {
                let path = pipeline::task_dir(out, task).join("reference.btfa");
                reference.save(&path)?;
                println!(
                    "task {}: reference over {} tokens, tau {:.4} -> {}",
                    task,
                    reference.n_tokens(),
                    reference.tau(),
                    path.display()
                );
            }
        }
        Cmd::Train => {
            let world = load_world(&cfg, out)?;
            for &task in &cfg.tasks {
                let episodes = episodes_for(out, task)?;
                let state = pipeline::train_task(&world, &episodes, task)?;
                let dir = pipeline::task_dir(out, task);
                state.params.save(&dir.join("decoder.btfa"))?;
                fs::write(dir.join("loss.csv"), pipeline::loss_csv(&state))?;
                let last = state.loss_history.last().map(|r| r.loss).unwrap_or(0.0);
                println!(
                    "task {}: {} steps, final loss {:.6} -> {}",
                    task,
                    state.loss_history.len(),
                    last,
                    dir.join("decoder.btfa").display()
                );
            }
        }
        Cmd::Detect { task, episode } => {
            let (task, episode) = (*task, *episode);
            let world = load_world(&cfg, out)?;
            let dir = pipeline::task_dir(out, task);
            let ep_path = require(
                dir.join("episodes").join(pipeline::episode_filename(episode)),
                "run `bera gen` first",
            )?;
            let ep = StoredEpisode::load(&ep_path)?;
            let reference = reference_for(out, task)?;
            let frame = encoder_forward(&world.encoder, &ep.image)?;
            let rng = world.detect_stream(task, episode);
            let det = pipeline::detect_frame(&cfg, &reference, &frame, &rng)?;
            let report = pipeline::DetectionReport {
                episode_id: episode,
                tau: reference.tau(),
                anomalies: det.anomalies.indices.clone(),
                scores: det.anomalies.scores.clone(),
                per_layer: det.per_layer.clone(),
                filter: det.filter.clone(),
                backdoor: det.backdoor.clone(),
            };
            let det_dir = dir.join("detect");
            pipeline::write_detection(
                &det_dir,
                &report,
                &det.per_layer_saliency,
                world.token_grid(),
            )?;
            println!(
                "task {} episode {}: {} anomalous, {} in filter, backdoor {:?} -> {}",
                task,
                episode,
                det.anomalies.indices.len(),
                det.filter.len(),
                det.backdoor,
                det_dir.display()
            );
        }
        Cmd::Evaluate => {
            let world = load_world(&cfg, out)?;
            for &task in &cfg.tasks {
                let episodes = episodes_for(out, task)?;
                let reference = reference_for(out, task)?;
                let decoder = decoder_for(out, task)?;
                let ev = pipeline::evaluate_task(&world, &episodes, &reference, &decoder, task)?;
                let dir = pipeline::task_dir(out, task);
                pipeline::write_evaluation(&dir, &world, &ev)?;
                println!("task {}: {}", task, ev.artifact.report.render_headline());
            }
        }
        Cmd::Ablate => {
            let world = load_world(&cfg, out)?;
            for &task in &cfg.tasks {
                let episodes = episodes_for(out, task)?;
                let reference = reference_for(out, task)?;
                let decoder = decoder_for(out, task)?;
                let rows = pipeline::ablate_task(&world, &episodes, &reference, &decoder, task)?;
                let dir = pipeline::task_dir(out, task);
                fs::write(dir.join("ablation.csv"), pipeline::ablation_csv(task, &rows))?;
                for (name, report) in &rows {
                    println!(
                        "task {} {:<18} tp {:6.2}  (cp {:6.2}, asr {:6.2}, rp {:6.2})",
                        task, name, report.tp, report.cp, report.asr, report.rp
                    );
                }
            }
        }
        Cmd::Sweep => {
            let world = load_world(&cfg, out)?;
            for &task in &cfg.tasks {
                let decoder = decoder_for(out, task)?;
                let cells = pipeline::sweep(&world, &decoder, task)?;
                let dir = pipeline::task_dir(out, task);
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("sweep.csv"), pipeline::sweep_csv(&cells))?;
                println!(
                    "task {}: {} sweep cells -> {}",
                    task,
                    cells.len(),
                    dir.join("sweep.csv").display()
                );
            }
        }
    }
    Ok(())
}
