use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reorient_diff::diffusion::{make_schedule, ScheduleKind};
use reorient_diff::geometry::DEFAULT_EDGE_THRESHOLD;
use reorient_diff::harness::{
    self, prepare_task, snapshots_csv, ExperimentConfig, Pipeline, PosesFile, SamplerModels, Split, StageName,
};
use reorient_diff::scene::{self, TaskDescriptor};
use reorient_diff::Error;

#[derive(Parser)]
#[command(name = "reorient-diff", version, about = "Guided diffusion for object reorientation poses")]
struct Cli {
    /// JSON experiment config; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, or the output file for `grasps` and `sample`.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the noise schedule as CSV.
    Schedule(ScheduleArgs),
    /// Generate scene splits, or `--n` standalone scene files.
    GenScenes(GenScenesArgs),
    /// Train the condition encoder.
    TrainEncoder,
    /// Label candidate poses with the oracle.
    GenReorientData,
    /// Train both feasibility models.
    TrainFeasibility,
    /// Train the score network.
    TrainScore,
    /// Sample pick and place grasps for a scene from ground truth.
    Grasps(GraspArgs),
    /// Sample reorientation poses for one scene.
    Sample(SampleArgs),
    /// Success rates of all methods on the evaluation tasks.
    Evaluate,
    /// Sampler wall times per method.
    Timing,
    /// Run every stage.
    Pipeline,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long = "K", alias = "steps")]
    k: Option<usize>,
    /// `cosine` or `linear`.
    #[arg(long)]
    kind: Option<String>,
}

#[derive(Args)]
struct GenScenesArgs {
    /// Write this many scene files into `--out` instead of running the stage.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct GraspArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_pick: usize,
    #[arg(long, default_value_t = 8)]
    n_place: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Task descriptor JSON replacing the scene's own task.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Sample without feasibility guidance.
    #[arg(long)]
    no_guidance: bool,
    /// Reverse steps at which to record the chain latents.
    #[arg(long, value_delimiter = ',')]
    snapshot_at: Vec<usize>,
    /// Artifact root holding the trained models; trained on demand.
    #[arg(long, default_value = "runs")]
    models: PathBuf,
}

fn load_config(cli: &Cli) -> reorient_diff::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<S: serde::Serialize>(path: &Path, v: &S) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `out` itself when it names a JSON file, else `out/name`.
fn out_file(out: &Path, name: &str) -> PathBuf {
    if out.extension().is_some_and(|e| e == "json") {
        out.to_path_buf()
    } else {
        out.join(name)
    }
}

fn run_until(cfg: ExperimentConfig, out: &Path, st: StageName) -> anyhow::Result<()> {
    let run = Pipeline::new(cfg, out)?.run(st)?;
    for s in &run.stages {
        println!(
            "{:<18} {} {}",
            s.stage.name(),
            if s.cached { "cached" } else { "done  " },
            s.dir.display()
        );
    }
    if let Some(m) = &run.metrics {
        print!("{}", m.to_csv());
    }
    Ok(())
}

fn run(cli: &Cli, cfg: ExperimentConfig) -> anyhow::Result<()> {
    let out = &cli.out;
    match &cli.cmd {
        Cmd::Schedule(a) => {
            let kind = match &a.kind {
                Some(k) => ScheduleKind::from_name(k).map_err(|e| Error::Config(e.to_string()))?,
                None => cfg.schedule.kind,
            };
            let steps = a.k.unwrap_or(cfg.schedule.steps);
            if steps < 2 {
                return Err(Error::Config("K must be >= 2".into()).into());
            }
            let s = make_schedule::<f64>(steps, kind)?;
            fs::create_dir_all(out)?;
            let path = out.join("schedule.csv");
            fs::write(&path, s.to_csv())?;
            println!("{}", path.display());
        }
        Cmd::GenScenes(GenScenesArgs { n: Some(n) }) => {
            let mut cfg = cfg;
            cfg.sizes.eval_tasks = *n;
            fs::create_dir_all(out)?;
            let set = harness::generate_split(&cfg, Split::Eval)?;
            for (i, (s, o)) in set.iter().enumerate() {
                scene::save_scene(out.join(format!("scene_{i:04}.json")), s, o)?;
            }
            println!("{} scenes in {}", set.len(), out.display());
        }
        Cmd::GenScenes(_) => run_until(cfg, out, StageName::GenScenes)?,
        Cmd::TrainEncoder => run_until(cfg, out, StageName::TrainEncoder)?,
        Cmd::GenReorientData => run_until(cfg, out, StageName::GenReorientData)?,
        Cmd::TrainFeasibility => run_until(cfg, out, StageName::TrainFeasibility)?,
        Cmd::TrainScore => run_until(cfg, out, StageName::TrainScore)?,
        Cmd::Evaluate | Cmd::Pipeline => run_until(cfg, out, StageName::Evaluate)?,
        Cmd::Grasps(a) => {
            let (sc, _) = scene::load_scene(&a.scene)?;
            let mut rng = ChaCha8Rng::seed_from_u64(harness::derive_seed(cfg.seed ^ sc.seed, "grasps"));
            let g = scene::true_grasps(&sc, a.n_pick, a.n_place, DEFAULT_EDGE_THRESHOLD, &mut rng)?;
            let doc = serde_json::json!({
                "version": harness::ARTIFACT_VERSION,
                "config_hash": cfg.hash(),
                "pick": g.pick,
                "place": g.place,
            });
            let path = out_file(out, "grasps.json");
            write_json(&path, &doc)?;
            println!("{}", path.display());
        }
        Cmd::Timing => {
            let p = Pipeline::new(cfg.clone(), out)?;
            p.run(StageName::TrainScore)?;
            let models = p.load_models()?;
            let tasks = harness::prepare_tasks(&models, &p.load_scene_set(Split::Eval)?, &cfg)?;
            let t = harness::timing_report(&models, &tasks, &cfg)?;
            let path = out.join("timing.json");
            write_json(&path, &t)?;
            for r in &t.rows {
                println!("{:<22} K={:<4} mean {:.4}s p95 {:.4}s", r.method, r.k_sample, r.mean_s, r.p95_s);
            }
        }
        Cmd::Sample(a) => {
            let (mut sc, oracle) = scene::load_scene(&a.scene)?;
            if let Some(tp) = &a.task {
                let text = fs::read_to_string(tp).map_err(|_| Error::MissingFile(tp.clone()))?;
                sc.task = serde_json::from_str::<TaskDescriptor>(&text)
                    .map_err(|e| Error::Config(format!("task descriptor: {e}")))?;
            }
            let mut cfg = cfg;
            let p = Pipeline::new(cfg.clone(), &a.models)?;
            p.run(StageName::TrainScore)?;
            let models = p.load_models()?;
            let task = prepare_task(&models, &sc, &oracle, &cfg)?;
            if let Some(reason) = &task.failure {
                return Err(Error::InfeasibleTask(reason.clone()).into());
            }
            cfg.guidance.snapshot_at = a.snapshot_at.clone();
            if a.no_guidance {
                cfg.guidance.w1 = 0.0;
                cfg.guidance.w2 = 0.0;
            }
            cfg.guidance.validate(cfg.schedule.steps)?;
            let output = if cfg.eval.single_precision {
                SamplerModels::<f32>::from_models(&models)?.sample(&task, &cfg.workspace, &cfg.guidance)?
            } else {
                SamplerModels::<f64>::from_models(&models)?.sample(&task, &cfg.workspace, &cfg.guidance)?
            };
            let path = out_file(out, "poses.json");
            write_json(&path, &PosesFile::new(&cfg, &output))?;
            if !a.snapshot_at.is_empty() {
                let snap = path.with_file_name("snapshots.csv");
                fs::write(&snap, snapshots_csv(&output))?;
                println!("{}", snap.display());
            }
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
