//! Command-line entry points.
//!
//! Five subcommands cover the pipeline end to end: `generate` draws
//! synthetic scenes, `solve` estimates a pose per scene pair, `train` fits
//! the parameter-table backbone, `eval` scores an estimates file against
//! ground truth, and `gradcheck` compares the analytic gradients against
//! finite differences.
//!
//! Every command is deterministic given its inputs, the configuration, and
//! the seed (`--seed` beats the config file, which beats `RELPOSE_SEED`),
//! and every output file embeds the effective configuration as comments.
//! Exit codes: 0 on success, 2 for validation problems, 3 for IO problems,
//! 4 for numerical failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{pair_errors, precision_curve, report, PairResult};
use crate::formats::{
    parse_checkpoint, parse_estimates, parse_scenes, serialize_checkpoint, serialize_curve,
    serialize_estimates, serialize_history, serialize_report, serialize_scenes, EstimateRecord,
};
use crate::gradcheck::{all_passed, render_table, run_checks, CheckConfig};
use crate::objective::benchmark_virtual_grid;
use crate::ransac::estimate_from_maps;
use crate::streams::{substream, tags};
use crate::toy::scene::{generate_scene, render_ground_truth_maps, SceneView};
use crate::toy::train::{toy_run, train, Checkpoint};

#[derive(Parser)]
#[command(name = "relpose", version, about = "Metric relative-pose pipeline on synthetic scenes")]
struct Cli {
    /// TOML run configuration; omitted sections use built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed override; beats the config file and the RELPOSE_SEED variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw synthetic scenes and write them as one manifest file.
    Generate {
        /// Scene count; defaults to the configured generation count.
        #[arg(long)]
        count: Option<usize>,
        /// Manifest file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a relative pose for every scene in a manifest.
    Solve {
        /// Scene manifest to solve.
        #[arg(long)]
        scenes: PathBuf,
        /// Estimates file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the backbone on freshly generated scenes and save its progress.
    Train {
        /// Directory for the history, checkpoint, and diagnostic files.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a checkpoint file written by an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Score an estimates file against its scene manifest.
    Eval {
        /// Estimates file produced by `solve`.
        #[arg(long)]
        estimates: PathBuf,
        /// The manifest those estimates were solved from.
        #[arg(long)]
        scenes: PathBuf,
        /// Summary report file to write.
        #[arg(long)]
        report: PathBuf,
        /// Precision-versus-ranking-ratio curve file to write.
        #[arg(long)]
        curve: PathBuf,
    },
    /// Compare every analytic gradient against finite differences.
    Gradcheck {
        /// Random instances per check.
        #[arg(long)]
        instances: Option<usize>,
        /// Tolerance applied to every check (default: per-check).
        #[arg(long)]
        tolerance: Option<f64>,
        /// Deliberately bias the fixture check; proves failures are caught.
        #[arg(long)]
        inject_bug: bool,
    },
}

/// Parse the command line, run it, and return the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are validation failures; --help and --version
            // land here too and exit cleanly.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Generate { count, out } => cmd_generate(&cfg, count, &out),
        Command::Solve { scenes, out } => cmd_solve(&cfg, &scenes, &out),
        Command::Train { out_dir, iterations, resume } => {
            cmd_train(&cfg, &out_dir, iterations, resume.as_deref())
        }
        Command::Eval { estimates, scenes, report, curve } => {
            cmd_eval(&cfg, &estimates, &scenes, &report, &curve)
        }
        Command::Gradcheck { instances, tolerance, inject_bug } => {
            cmd_gradcheck(&cfg, instances, tolerance, inject_bug)
        }
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::from)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::from)
}

fn cmd_generate(cfg: &RunConfig, count: Option<usize>, out: &Path) -> Result<()> {
    let scene_config = cfg.generation.scene_config();
    let seed = cfg.seed();
    let count = count.unwrap_or(cfg.generation.scenes);
    let mut scenes = Vec::with_capacity(count);
    for s in 0..count {
        scenes.push(generate_scene(&scene_config, &mut substream(seed, &[tags::SCENE, s as u64]))?);
    }
    write_file(out, &serialize_scenes(&scenes, &cfg.echo()))?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn cmd_solve(cfg: &RunConfig, scenes_path: &Path, out: &Path) -> Result<()> {
    let scenes = parse_scenes(&read_file(scenes_path)?)?;
    let seed = cfg.seed();
    let solver = &cfg.solver;
    let ransac = solver.ransac();

    let mut records = Vec::with_capacity(scenes.len());
    for (s, scene) in scenes.iter().enumerate() {
        let maps_a = render_ground_truth_maps(
            scene,
            SceneView::A,
            &mut substream(seed, &[tags::RENDER, s as u64, 0]),
        )?;
        let maps_b = render_ground_truth_maps(
            scene,
            SceneView::B,
            &mut substream(seed, &[tags::RENDER, s as u64, 1]),
        )?;
        let record = match estimate_from_maps(
            &maps_a,
            &scene.intrinsics,
            &maps_b,
            &scene.intrinsics,
            solver.theta,
            solver.dustbin,
            solver.set_size,
            solver.samplings,
            solver.sampling_mode(),
            &ransac,
            seed,
            &[tags::HYPOTHESIS, s as u64],
        ) {
            Ok(est) => {
                EstimateRecord { id: s as u64, confidence: est.confidence, pose: Some(est.pose) }
            }
            Err(Error::NoHypothesis) => {
                EstimateRecord { id: s as u64, confidence: 0.0, pose: None }
            }
            Err(e) => return Err(e),
        };
        records.push(record);
    }
    let solved = records.iter().filter(|r| r.pose.is_some()).count();
    write_file(out, &serialize_estimates(&records, &cfg.echo()))?;
    println!("solved {solved} of {} pairs into {}", records.len(), out.display());
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    out_dir: &Path,
    iterations: Option<usize>,
    resume: Option<&Path>,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(Error::from)?;
    let seed = cfg.seed();
    let (scenes, mut backbone) = toy_run(&cfg.generation.scene_config(), seed, cfg.generation.scenes)?;
    let mut train_cfg = cfg.train_config(scenes.len());
    if let Some(n) = iterations {
        train_cfg.iterations = n;
    }
    if let Some(path) = resume {
        let checkpoint = parse_checkpoint(&read_file(path)?)?;
        // Parameters come from the snapshot; the iteration counter picks up
        // right after it. Optimizer moments restart, so early set draws
        // repeat those of the original run — harmless, the parameters moved.
        backbone = checkpoint.backbone;
        train_cfg.start_iteration = checkpoint.iteration + 1;
    }

    let echo = cfg.echo();
    let history = match train(&mut backbone, &scenes, &train_cfg) {
        Ok(history) => history,
        Err(e) if e.exit_code() == 4 => {
            // Divergence diagnostics: leave the reason and settings where
            // the aborted run's artifacts were expected.
            let diagnostic = format!(
                "training aborted by a numerical failure\n\n{e}\n\neffective configuration:\n{echo}",
            );
            let _ = fs::write(out_dir.join("diagnostic.txt"), diagnostic);
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    write_file(&out_dir.join("history.txt"), &serialize_history(&history, &echo))?;
    for snapshot in &history.checkpoints {
        let name = format!("checkpoint_{:06}.txt", snapshot.iteration);
        write_file(&out_dir.join(name), &serialize_checkpoint(snapshot, &echo))?;
    }
    let last = history.checkpoints.last().cloned().unwrap_or_else(|| Checkpoint {
        iteration: train_cfg.start_iteration.saturating_sub(1),
        backbone,
    });
    write_file(&out_dir.join("checkpoint.txt"), &serialize_checkpoint(&last, &echo))?;
    println!(
        "trained iterations {}..{} into {}",
        train_cfg.start_iteration,
        train_cfg.iterations,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    estimates_path: &Path,
    scenes_path: &Path,
    report_path: &Path,
    curve_path: &Path,
) -> Result<()> {
    let scenes = parse_scenes(&read_file(scenes_path)?)?;
    let estimates = parse_estimates(&read_file(estimates_path)?)?;
    let grid = benchmark_virtual_grid();
    let threshold = cfg.evaluation.threshold;

    // An empty estimates file scores every pair as unanswered; anything else
    // must cover the manifest exactly.
    let results: Vec<PairResult> = if estimates.is_empty() {
        (0..scenes.len())
            .map(|s| PairResult { id: s as u64, confidence: 0.0, errors: None })
            .collect()
    } else {
        let mut ids: Vec<u64> = estimates.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        if ids != (0..scenes.len() as u64).collect::<Vec<_>>() {
            return Err(Error::Validation(format!(
                "estimate ids do not match the manifest: {} estimates for {} scenes",
                estimates.len(),
                scenes.len()
            )));
        }
        let mut results = Vec::with_capacity(estimates.len());
        for record in &estimates {
            let scene = &scenes[record.id as usize];
            let errors = match &record.pose {
                Some(pose) => {
                    Some(pair_errors(pose, &scene.gt_relative(), &scene.intrinsics, &grid)?)
                }
                None => None,
            };
            results.push(PairResult { id: record.id, confidence: record.confidence, errors });
        }
        results
    };

    let summary = report(&results, threshold)?;
    let curve = precision_curve(&results, threshold)?;
    let echo = cfg.echo();
    write_file(report_path, &serialize_report(&summary, &echo))?;
    write_file(curve_path, &serialize_curve(&curve, &echo))?;
    println!(
        "evaluated {} pairs: precision {:.3}, area under the curve {:.3}",
        summary.pairs, summary.precision, summary.auc
    );
    Ok(())
}

fn cmd_gradcheck(
    cfg: &RunConfig,
    instances: Option<usize>,
    tolerance: Option<f64>,
    inject_bug: bool,
) -> Result<()> {
    let mut check = CheckConfig { seed: cfg.seed(), inject_bug, ..CheckConfig::default() };
    if let Some(n) = instances {
        check.instances = n;
    }
    if let Some(t) = tolerance {
        check.tolerance_unit = t;
        check.tolerance_chain = t;
    }
    let rows = run_checks(&check)?;
    print!("{}", render_table(&rows));
    if all_passed(&rows) {
        Ok(())
    } else {
        let failed = rows.iter().filter(|r| !r.passed).count();
        Err(Error::Domain(format!("{failed} of {} gradient checks failed", rows.len())))
    }
}
