//! Experiment configuration, staged pipeline with content-addressed caching,
//! evaluation and timing reports.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind, ScoreNet, Workspace};
use crate::error::{Error, Result};
use crate::feasibility::{train_feasibility, FeasibilityModel, FeasibilityTrainConfig, FeasibilityTrainReport, GraspPose, ModelRole};
use crate::geometry::{sample_pick_grasps, sample_place_grasps, PlaceGrasp, DEFAULT_EDGE_THRESHOLD};
use crate::nn::{self, Activation, TrainReport, TrainerConfig};
use crate::sampler::{sample, GuidanceConfig, SampleInputs, SamplerOutput};
use crate::scalar::Scalar;
use crate::scene::{
    self, generate_reorient_dataset, generate_scene, ConditionEncoder, DatasetConfig, EncoderConfig,
    EncoderEvaluation, OracleConfig, OracleSpec, ReorientDataset, SceneConfig, SceneTask, Stage, TaskPrediction,
};

/// Version string embedded in every artifact.
pub const ARTIFACT_VERSION: &str = concat!("reorient-diff ", env!("CARGO_PKG_VERSION"));

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "REORIENT_DIFF_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(alias = "K")]
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            kind: ScheduleKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub activation: Activation,
    /// Probability of replacing the condition with the null token in training.
    pub p_drop: f64,
    pub trainer: TrainerConfig,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            time_dim: 32,
            activation: Activation::Silu,
            p_drop: 0.1,
            trainer: TrainerConfig {
                learning_rate: 1e-3,
                batch_size: 256,
                epochs: 600,
                final_lr_factor: 0.05,
                ..TrainerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizesConfig {
    pub encoder_train_scenes: usize,
    pub encoder_holdout_scenes: usize,
    pub reorient_scenes: usize,
    pub eval_tasks: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SizesConfig {
    fn default() -> Self {
        Self {
            encoder_train_scenes: 3000,
            encoder_holdout_scenes: 200,
            reorient_scenes: 1500,
            eval_tasks: 300,
            min_objects: 2,
            max_objects: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds_per_task: usize,
    /// Reverse-step counts of the guided ablation.
    pub k_sweep: Vec<usize>,
    pub n_pick_grasps: usize,
    pub n_place_grasps: usize,
    /// Tasks used by the timing report.
    pub timing_tasks: usize,
    /// Sample in single precision.
    pub single_precision: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds_per_task: 4,
            k_sweep: vec![256, 100, 50],
            n_pick_grasps: 8,
            n_place_grasps: 8,
            timing_tasks: 20,
            single_precision: true,
        }
    }
}

/// All experiment settings. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub workspace: Workspace,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub scene: SceneConfig,
    pub oracle: OracleConfig,
    pub encoder: EncoderConfig,
    pub dataset: DatasetConfig,
    pub reorient_model: FeasibilityTrainConfig,
    pub place_model: FeasibilityTrainConfig,
    pub score: ScoreConfig,
    pub sizes: SizesConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            workspace: Workspace::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            scene: SceneConfig::default(),
            oracle: OracleConfig::default(),
            encoder: EncoderConfig::default(),
            dataset: DatasetConfig::default(),
            reorient_model: FeasibilityTrainConfig::default(),
            place_model: FeasibilityTrainConfig::default(),
            score: ScoreConfig::default(),
            sizes: SizesConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.workspace.validate()?;
        if self.schedule.steps < 2 {
            return Err(cfg_err("schedule steps must be >= 2"));
        }
        self.guidance.validate(self.schedule.steps)?;
        self.scene.validate()?;
        self.oracle.validate()?;
        for t in [
            &self.encoder.trainer,
            &self.reorient_model.trainer,
            &self.place_model.trainer,
            &self.score.trainer,
        ] {
            t.validate()?;
        }
        if self.encoder.phi_dim == 0 {
            return Err(cfg_err("encoder phi_dim must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.score.p_drop) {
            return Err(cfg_err("score p_drop must lie in [0, 1]"));
        }
        let s = &self.sizes;
        if s.min_objects == 0 || s.min_objects > s.max_objects || s.max_objects > scene::N_OBJECT_TYPES {
            return Err(cfg_err(format!(
                "object counts need 1 <= min_objects <= max_objects <= {}",
                scene::N_OBJECT_TYPES
            )));
        }
        if s.eval_tasks == 0 || s.reorient_scenes == 0 {
            return Err(cfg_err("eval_tasks and reorient_scenes must be >= 1"));
        }
        if self.eval.seeds_per_task == 0 || self.eval.n_pick_grasps == 0 || self.eval.n_place_grasps == 0 {
            return Err(cfg_err("eval seeds and grasp counts must be >= 1"));
        }
        if self.eval.k_sweep.iter().any(|&k| k == 0 || k > self.schedule.steps) {
            return Err(cfg_err("k_sweep entries must lie in 1..=schedule steps"));
        }
        if self.dataset.candidates_per_scene == 0 {
            return Err(cfg_err("candidates_per_scene must be >= 1"));
        }
        Ok(())
    }

    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| cfg_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(&[serde_json::to_vec(self).expect("config serializes").as_slice()])
    }

    /// Deterministic seed for a named purpose.
    pub fn derive_seed(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, purpose)
    }
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Seed derived from a master seed and a label.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Rayon pool capped by [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| cfg_err(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| cfg_err(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------------------
// Stage implementations

/// Scene splits used by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    EncoderTrain,
    EncoderHoldout,
    Reorient,
    Eval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::EncoderTrain, Split::EncoderHoldout, Split::Reorient, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::EncoderTrain => "encoder_train",
            Split::EncoderHoldout => "encoder_holdout",
            Split::Reorient => "reorient",
            Split::Eval => "eval",
        }
    }

    fn size(self, s: &SizesConfig) -> usize {
        match self {
            Split::EncoderTrain => s.encoder_train_scenes,
            Split::EncoderHoldout => s.encoder_holdout_scenes,
            Split::Reorient => s.reorient_scenes,
            Split::Eval => s.eval_tasks,
        }
    }
}

pub type SceneSet = Vec<(SceneTask, OracleSpec)>;

/// Generates a scene split. Seeds whose generation fails are logged and
/// skipped; the split is filled from further seeds.
pub fn generate_split(cfg: &ExperimentConfig, split: Split) -> Result<SceneSet> {
    let want = split.size(&cfg.sizes);
    let base = cfg.derive_seed(split.name());
    let mut out = Vec::with_capacity(want);
    let mut i = 0u64;
    while out.len() < want {
        if i >= 4 * want as u64 + 100 {
            return Err(Error::SceneGeneration {
                seed: base.wrapping_add(i),
                reason: format!("only {} of {want} {} scenes generated", out.len(), split.name()),
            });
        }
        let seed = base.wrapping_add(i);
        i += 1;
        let span = (cfg.sizes.max_objects - cfg.sizes.min_objects + 1) as u64;
        let n = cfg.sizes.min_objects + (derive_seed(seed, "n_objects") % span) as usize;
        match generate_scene(seed, n, &cfg.scene, &cfg.oracle, &cfg.workspace) {
            Ok(s) => out.push(s),
            Err(e @ Error::SceneGeneration { .. }) => log::warn!("{e}; skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderStageReport {
    pub train: TrainReport,
    pub holdout: EncoderEvaluation,
}

pub fn train_encoder_stage(
    cfg: &ExperimentConfig,
    train: &SceneSet,
    holdout: &SceneSet,
) -> Result<(ConditionEncoder<f64>, EncoderStageReport)> {
    let scenes: Vec<SceneTask> = train.iter().map(|(s, _)| s.clone()).collect();
    let mut ecfg = cfg.encoder.clone();
    ecfg.trainer.seed = ecfg.trainer.seed ^ cfg.derive_seed("encoder");
    let (enc, report) = scene::train_condition_encoder::<f64>(&scenes, &cfg.scene, &ecfg, &cfg.workspace)?;
    let hold: Vec<SceneTask> = holdout.iter().map(|(s, _)| s.clone()).collect();
    let holdout = if hold.is_empty() {
        enc.evaluate(&scenes, &cfg.scene, &cfg.workspace)?
    } else {
        enc.evaluate(&hold, &cfg.scene, &cfg.workspace)?
    };
    Ok((enc, EncoderStageReport { train: report, holdout }))
}

pub fn reorient_data_stage(cfg: &ExperimentConfig, encoder: &ConditionEncoder<f64>, scenes: &SceneSet) -> Result<ReorientDataset> {
    let phis = scenes
        .iter()
        .map(|(s, _)| encoder.phi(s, &cfg.scene))
        .collect::<Result<Vec<_>>>()?;
    generate_reorient_dataset(scenes, &phis, &cfg.dataset, &cfg.workspace, cfg.derive_seed("reorient-data"))
}

pub fn train_feasibility_stage(
    cfg: &ExperimentConfig,
    data: &ReorientDataset,
) -> Result<(FeasibilityModel<f64>, FeasibilityModel<f64>, [FeasibilityTrainReport; 2])> {
    let mut c1 = cfg.reorient_model.clone();
    c1.trainer.seed ^= cfg.derive_seed("m1");
    let mut c2 = cfg.place_model.clone();
    c2.trainer.seed ^= cfg.derive_seed("m2");
    let (m1, r1) = train_feasibility::<f64>(ModelRole::Reorient, &data.records(Stage::Reorient), &cfg.workspace, &c1)?;
    let (m2, r2) = train_feasibility::<f64>(ModelRole::Place, &data.records(Stage::Place), &cfg.workspace, &c2)?;
    Ok((m1, m2, [r1, r2]))
}

pub fn train_score_stage(cfg: &ExperimentConfig, data: &ReorientDataset) -> Result<(ScoreNet<f64>, TrainReport)> {
    let examples = data.score_examples::<f64>(&cfg.workspace);
    if examples.is_empty() {
        return Err(Error::Dataset("no successful poses to train the score network".into()));
    }
    let sched = make_schedule::<f64>(cfg.schedule.steps, cfg.schedule.kind)?;
    let cond_dim = data.phis.first().map(Vec::len).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derive_seed("score-init"));
    let mut net = ScoreNet::init(&cfg.score.hidden, cfg.score.time_dim, cond_dim, cfg.score.activation, &mut rng)?;
    let mut tcfg = cfg.score.trainer.clone();
    tcfg.seed ^= cfg.derive_seed("score");
    let report = crate::diffusion::train_score_net(&mut net, &sched, &examples, cfg.score.p_drop, &tcfg)?;
    Ok((net, report))
}

/// All trained models of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub encoder: ConditionEncoder<f64>,
    pub m1: FeasibilityModel<f64>,
    pub m2: FeasibilityModel<f64>,
    pub score: ScoreNet<f64>,
    pub sched: NoiseSchedule<f64>,
}

/// Encoder output and grasp sets for one evaluation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedTask {
    pub seed: u64,
    pub oracle: OracleSpec,
    pub prediction: TaskPrediction,
    /// World-frame pick grasps on the predicted object.
    pub pick: Vec<GraspPose>,
    /// Place grasps of the predicted object at the predicted placement.
    pub place: Vec<PlaceGrasp>,
    /// Reason the task cannot be attempted, if any.
    pub failure: Option<String>,
}

/// Predicted object, placement and condition, and grasps from the predicted mask.
pub fn prepare_task(models: &Models, scene: &SceneTask, oracle: &OracleSpec, cfg: &ExperimentConfig) -> Result<PreparedTask> {
    let prediction = models.encoder.predict_task(scene, &cfg.scene, &cfg.workspace)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, "grasps"));
    let n = cfg.scene.coarse_cells;
    let f = cfg.scene.coarse_factor;
    let coarse = prediction.mask_array(n);
    let fine = Array2::from_shape_fn((n * f, n * f), |(r, c)| coarse[[r / f, c / f]]);
    let mut failure = None;
    let pick = match sample_pick_grasps(&scene.heightmap, &fine, cfg.eval.n_pick_grasps, DEFAULT_EDGE_THRESHOLD, &mut rng) {
        Ok(p) => p,
        Err(e @ Error::NoPickGrasps) => {
            failure = Some(e.to_string());
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    let prim = cfg.scene.catalog[prediction.object_id].primitive;
    let place = match sample_place_grasps(
        &prim,
        prediction.placement.position,
        prediction.placement.quaternion,
        cfg.eval.n_place_grasps,
        &mut rng,
    ) {
        Ok(p) => p,
        Err(e @ Error::InfeasibleTask(_)) => {
            failure.get_or_insert(e.to_string());
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    Ok(PreparedTask {
        seed: scene.seed,
        oracle: oracle.clone(),
        prediction,
        pick,
        place,
        failure,
    })
}

/// A sampler variant under evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub guided: bool,
    pub k_sample: usize,
}

/// Guided and unguided at the configured step count, then the guided
/// step-count sweep.
pub fn methods(cfg: &ExperimentConfig) -> Vec<Method> {
    let k = cfg.guidance.k_sample;
    let mut m = vec![
        Method {
            name: "reorientdiff".into(),
            guided: true,
            k_sample: k,
        },
        Method {
            name: "reorientdiff-noguide".into(),
            guided: false,
            k_sample: k,
        },
    ];
    for &ks in &cfg.eval.k_sweep {
        if ks != k {
            m.push(Method {
                name: format!("reorientdiff-k{ks}"),
                guided: true,
                k_sample: ks,
            });
        }
    }
    m
}

pub fn method_guidance(cfg: &ExperimentConfig, method: &Method, seed: u64) -> GuidanceConfig {
    let mut g = cfg.guidance.clone();
    g.k_sample = method.k_sample;
    g.seed = seed;
    g.snapshot_at.clear();
    if !method.guided {
        g.w1 = 0.0;
        g.w2 = 0.0;
    }
    g
}

/// Seed of the `attempt`-th try at a task; shared by all methods so runs are paired.
pub fn attempt_seed(cfg: &ExperimentConfig, task_seed: u64, attempt: usize) -> u64 {
    derive_seed(cfg.seed ^ task_seed, &format!("attempt-{attempt}"))
}

/// Oracle outcome of a sampler output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub reorient: bool,
    pub place: bool,
    pub overall: bool,
}

/// Reorientation succeeds if any pose passes stage 1 with its chosen pick
/// grasp; placement if any stage-1 success also passes stage 2 with its
/// chosen place grasp. Overall is the same-pose conjunction.
pub fn judge(task: &PreparedTask, out: &SamplerOutput) -> Outcome {
    let mut o = Outcome {
        reorient: false,
        place: false,
        overall: false,
    };
    for p in &out.poses {
        let r = task.oracle.evaluate(&task.pick[p.pick_grasp], &p.pose, Stage::Reorient);
        let pl = task.oracle.evaluate(&task.place[p.place_grasp].object, &p.pose, Stage::Place);
        o.reorient |= r;
        o.place |= r && pl;
        o.overall |= r && pl;
    }
    o
}

/// Sampling models in the working precision.
pub struct SamplerModels<T> {
    pub score: ScoreNet<T>,
    pub sched: NoiseSchedule<T>,
    pub m1: FeasibilityModel<T>,
    pub m2: FeasibilityModel<T>,
}

impl<T: Scalar> SamplerModels<T> {
    pub fn from_models(m: &Models) -> Result<Self> {
        Ok(Self {
            score: m.score.cast(),
            sched: make_schedule(m.sched.steps(), m.sched.kind())?,
            m1: m.m1.cast(),
            m2: m.m2.cast(),
        })
    }

    pub fn sample(&self, task: &PreparedTask, ws: &Workspace, g: &GuidanceConfig) -> Result<SamplerOutput> {
        let phi: Vec<T> = task.prediction.phi.iter().map(|&v| T::lit(v)).collect();
        let place: Vec<GraspPose> = task.place.iter().map(|p| p.object).collect();
        let inputs = SampleInputs {
            score: &self.score,
            sched: &self.sched,
            m1: &self.m1,
            m2: &self.m2,
            pick: &task.pick,
            place: &place,
            phi: &phi,
            ws,
        };
        sample(&inputs, g)
    }
}

/// Per-task result of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub outcome: Outcome,
    pub attempts: usize,
    pub times: Vec<f64>,
    /// Mean combined score of the first attempt's output poses.
    pub first_combined: f64,
}

fn run_task<T: Scalar>(
    sm: &SamplerModels<T>,
    task: &PreparedTask,
    method: &Method,
    cfg: &ExperimentConfig,
    max_attempts: usize,
) -> Result<TaskResult> {
    let mut res = TaskResult {
        outcome: Outcome {
            reorient: false,
            place: false,
            overall: false,
        },
        attempts: 0,
        times: Vec::new(),
        first_combined: 0.0,
    };
    if task.failure.is_some() {
        return Ok(res);
    }
    for a in 0..max_attempts {
        let g = method_guidance(cfg, method, attempt_seed(cfg, task.seed, a));
        let out = sm.sample(task, &cfg.workspace, &g)?;
        if a == 0 && !out.poses.is_empty() {
            res.first_combined = out.poses.iter().map(|p| p.combined).sum::<f64>() / out.poses.len() as f64;
        }
        res.times.push(out.wall_time);
        res.attempts += 1;
        let o = judge(task, &out);
        res.outcome.reorient |= o.reorient;
        res.outcome.place |= o.place;
        res.outcome.overall |= o.overall;
        // later attempts cannot change any of the three rates
        if res.outcome.overall {
            break;
        }
    }
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub guided: bool,
    pub k_sample: usize,
    pub n_tasks: usize,
    pub success_reorient: f64,
    pub success_place: f64,
    pub success_overall: f64,
}

/// Success rates per method. Contains no timings, so equal configs give
/// byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub config_hash: String,
    pub n_tasks: usize,
    pub seeds_per_task: usize,
    pub task_seeds: Vec<u64>,
    /// Tasks the encoder output made unattemptable.
    pub unattempted: usize,
    pub rows: Vec<MethodRow>,
    /// Guided rows ordered by decreasing step count.
    pub k_ablation: Vec<MethodRow>,
}

/// Fixed CSV column order of [`MetricsReport::to_csv`].
pub const METRICS_CSV_HEADER: &str =
    "method,guided,k_sample,n_tasks,success_reorient,success_place,success_overall,config_hash";

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.4},{:.4},{}",
                r.method,
                r.guided,
                r.k_sample,
                r.n_tasks,
                r.success_reorient,
                r.success_place,
                r.success_overall,
                self.config_hash
            );
        }
        s
    }

    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub guided: bool,
    pub k_sample: usize,
    pub n_calls: usize,
    pub mean_s: f64,
    pub p95_s: f64,
}

/// Wall time of sampler calls per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub version: String,
    pub config_hash: String,
    pub rows: Vec<TimingRow>,
    /// Guided mean time strictly increases with the step count.
    pub monotone_in_k: bool,
    /// Guided mean time exceeds unguided at equal step count.
    pub guidance_slower: bool,
}

fn timing_row(method: &Method, times: &[f64]) -> TimingRow {
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    let mean = if t.is_empty() { 0.0 } else { t.iter().sum::<f64>() / t.len() as f64 };
    let p95 = if t.is_empty() {
        0.0
    } else {
        t[((0.95 * t.len() as f64).ceil() as usize).clamp(1, t.len()) - 1]
    };
    TimingRow {
        method: method.name.clone(),
        guided: method.guided,
        k_sample: method.k_sample,
        n_calls: t.len(),
        mean_s: mean,
        p95_s: p95,
    }
}

fn timing_summary(cfg: &ExperimentConfig, rows: Vec<TimingRow>) -> TimingReport {
    let mut guided: Vec<&TimingRow> = rows.iter().filter(|r| r.guided).collect();
    guided.sort_by_key(|r| r.k_sample);
    let monotone_in_k = guided.windows(2).all(|w| w[0].mean_s < w[1].mean_s);
    let k = cfg.guidance.k_sample;
    let on = rows.iter().find(|r| r.guided && r.k_sample == k);
    let off = rows.iter().find(|r| !r.guided && r.k_sample == k);
    let guidance_slower = matches!((on, off), (Some(a), Some(b)) if a.mean_s > b.mean_s);
    TimingReport {
        version: ARTIFACT_VERSION.into(),
        config_hash: cfg.hash(),
        rows,
        monotone_in_k,
        guidance_slower,
    }
}

pub fn prepare_tasks(models: &Models, tasks: &SceneSet, cfg: &ExperimentConfig) -> Result<Vec<PreparedTask>> {
    tasks.iter().map(|(s, o)| prepare_task(models, s, o, cfg)).collect()
}

fn eval_impl<T: Scalar>(
    models: &Models,
    tasks: &[PreparedTask],
    cfg: &ExperimentConfig,
) -> Result<(MetricsReport, TimingReport)> {
    let sm = SamplerModels::<T>::from_models(models)?;
    let pool = thread_pool()?;
    let mut rows = Vec::new();
    let mut trows = Vec::new();
    for method in methods(cfg) {
        let results: Vec<TaskResult> = pool.install(|| {
            tasks
                .par_iter()
                .map(|t| run_task(&sm, t, &method, cfg, cfg.eval.seeds_per_task))
                .collect::<Result<Vec<_>>>()
        })?;
        let n = results.len().max(1) as f64;
        let pct = |f: fn(&Outcome) -> bool| 100.0 * results.iter().filter(|r| f(&r.outcome)).count() as f64 / n;
        rows.push(MethodRow {
            method: method.name.clone(),
            guided: method.guided,
            k_sample: method.k_sample,
            n_tasks: results.len(),
            success_reorient: pct(|o| o.reorient),
            success_place: pct(|o| o.place),
            success_overall: pct(|o| o.overall),
        });
        let times: Vec<f64> = results.iter().flat_map(|r| r.times.iter().copied()).collect();
        trows.push(timing_row(&method, &times));
        log::info!(
            "{}: overall {:.1}% reorient {:.1}%",
            method.name,
            rows.last().unwrap().success_overall,
            rows.last().unwrap().success_reorient
        );
    }
    let mut k_ablation: Vec<MethodRow> = rows.iter().filter(|r| r.guided).cloned().collect();
    k_ablation.sort_by(|a, b| b.k_sample.cmp(&a.k_sample));
    let metrics = MetricsReport {
        version: ARTIFACT_VERSION.into(),
        config_hash: cfg.hash(),
        n_tasks: tasks.len(),
        seeds_per_task: cfg.eval.seeds_per_task,
        task_seeds: tasks.iter().map(|t| t.seed).collect(),
        unattempted: tasks.iter().filter(|t| t.failure.is_some()).count(),
        rows,
        k_ablation,
    };
    Ok((metrics, timing_summary(cfg, trows)))
}

/// Success rates of every method under the any-of-`seeds_per_task` rule,
/// plus the wall times of all sampler calls made.
pub fn evaluate(models: &Models, tasks: &[PreparedTask], cfg: &ExperimentConfig) -> Result<(MetricsReport, TimingReport)> {
    if tasks.is_empty() {
        return Err(Error::Dataset("evaluation needs at least one task".into()));
    }
    if cfg.eval.single_precision {
        eval_impl::<f32>(models, tasks, cfg)
    } else {
        eval_impl::<f64>(models, tasks, cfg)
    }
}

fn timing_impl<T: Scalar>(models: &Models, tasks: &[PreparedTask], cfg: &ExperimentConfig) -> Result<TimingReport> {
    let sm = SamplerModels::<T>::from_models(models)?;
    let mut trows = Vec::new();
    let usable: Vec<&PreparedTask> = tasks
        .iter()
        .filter(|t| t.failure.is_none())
        .take(cfg.eval.timing_tasks.max(1))
        .collect();
    for method in methods(cfg) {
        let mut times = Vec::new();
        // sequential for timing fidelity
        for t in &usable {
            let g = method_guidance(cfg, &method, attempt_seed(cfg, t.seed, 0));
            times.push(sm.sample(t, &cfg.workspace, &g)?.wall_time);
        }
        trows.push(timing_row(&method, &times));
    }
    Ok(timing_summary(cfg, trows))
}

/// Single-attempt sampler wall times per method, one call per task.
pub fn timing_report(models: &Models, tasks: &[PreparedTask], cfg: &ExperimentConfig) -> Result<TimingReport> {
    if cfg.eval.single_precision {
        timing_impl::<f32>(models, tasks, cfg)
    } else {
        timing_impl::<f64>(models, tasks, cfg)
    }
}

/// Paired first-attempt mean combined scores, guided then unguided, at the
/// configured step count. Run `i` uses task `i % tasks.len()` and attempt
/// `i / tasks.len()`.
pub fn paired_guidance_scores(
    models: &Models,
    tasks: &[PreparedTask],
    cfg: &ExperimentConfig,
    runs: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let usable: Vec<&PreparedTask> = tasks.iter().filter(|t| t.failure.is_none()).collect();
    if usable.is_empty() {
        return Err(Error::Dataset("no attemptable tasks".into()));
    }
    let sm = SamplerModels::<f32>::from_models(models)?;
    let ms = methods(cfg);
    let pool = thread_pool()?;
    let pairs: Vec<(f64, f64)> = pool.install(|| {
        (0..runs)
            .into_par_iter()
            .map(|i| {
                let t = usable[i % usable.len()];
                let seed = attempt_seed(cfg, t.seed, i / usable.len());
                let mean = |o: SamplerOutput| o.poses.iter().map(|p| p.combined).sum::<f64>() / o.poses.len().max(1) as f64;
                let a = mean(sm.sample(t, &cfg.workspace, &method_guidance(cfg, &ms[0], seed))?);
                let b = mean(sm.sample(t, &cfg.workspace, &method_guidance(cfg, &ms[1], seed))?);
                Ok((a, b))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(pairs.into_iter().unzip())
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    GenScenes,
    TrainEncoder,
    GenReorientData,
    TrainFeasibility,
    TrainScore,
    Evaluate,
}

impl StageName {
    pub const ALL: [StageName; 6] = [
        StageName::GenScenes,
        StageName::TrainEncoder,
        StageName::GenReorientData,
        StageName::TrainFeasibility,
        StageName::TrainScore,
        StageName::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageName::GenScenes => "gen-scenes",
            StageName::TrainEncoder => "train-encoder",
            StageName::GenReorientData => "gen-reorient-data",
            StageName::TrainFeasibility => "train-feasibility",
            StageName::TrainScore => "train-score",
            StageName::Evaluate => "evaluate",
        }
    }

    fn deps(self) -> &'static [StageName] {
        match self {
            StageName::GenScenes => &[],
            StageName::TrainEncoder => &[StageName::GenScenes],
            StageName::GenReorientData => &[StageName::GenScenes, StageName::TrainEncoder],
            StageName::TrainFeasibility => &[StageName::GenReorientData],
            StageName::TrainScore => &[StageName::GenReorientData],
            StageName::Evaluate => &[
                StageName::GenScenes,
                StageName::TrainEncoder,
                StageName::TrainFeasibility,
                StageName::TrainScore,
            ],
        }
    }

    /// Config sections the stage reads.
    fn inputs(self, cfg: &ExperimentConfig) -> serde_json::Value {
        use serde_json::json;
        match self {
            StageName::GenScenes => json!([cfg.seed, cfg.workspace, cfg.scene, cfg.oracle, cfg.sizes]),
            StageName::TrainEncoder => json!([cfg.seed, cfg.encoder]),
            StageName::GenReorientData => json!([cfg.seed, cfg.dataset]),
            StageName::TrainFeasibility => json!([cfg.seed, cfg.reorient_model, cfg.place_model]),
            StageName::TrainScore => json!([cfg.seed, cfg.schedule, cfg.score]),
            StageName::Evaluate => json!([cfg.seed, cfg.guidance, cfg.eval, cfg.schedule]),
        }
    }
}

/// Cache key per stage: its config inputs and the keys of its dependencies.
pub fn stage_keys(cfg: &ExperimentConfig) -> Vec<(StageName, String)> {
    let mut keys: Vec<(StageName, String)> = Vec::new();
    for st in StageName::ALL {
        let inputs = serde_json::to_vec(&st.inputs(cfg)).expect("serializes");
        let mut parts: Vec<Vec<u8>> = vec![st.name().as_bytes().to_vec(), ARTIFACT_VERSION.as_bytes().to_vec(), inputs];
        for d in st.deps() {
            let k = &keys.iter().find(|(s, _)| s == d).expect("deps precede").1;
            parts.push(k.as_bytes().to_vec());
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        keys.push((st, sha256_hex(&refs)));
    }
    keys
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub version: String,
    pub stage: StageName,
    pub key: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub files: Vec<String>,
    /// Seconds the stage took when it ran.
    #[serde(default)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: StageName,
    pub key: String,
    pub cached: bool,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub stages: Vec<StageStatus>,
    pub metrics: Option<MetricsReport>,
    pub timing: Option<TimingReport>,
}

/// Artifact directories and loaders for one config.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    keys: Vec<(StageName, String)>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Serialized artifact wrapper carrying provenance fields.
#[derive(Serialize, Deserialize)]
struct Stamped<D> {
    version: String,
    config_hash: String,
    data: D,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let keys = stage_keys(&cfg);
        Ok(Self {
            cfg,
            root: root.into(),
            keys,
        })
    }

    pub fn key(&self, st: StageName) -> &str {
        &self.keys.iter().find(|(s, _)| *s == st).expect("all stages keyed").1
    }

    pub fn stage_dir(&self, st: StageName) -> PathBuf {
        self.root.join(format!("{}-{}", st.name(), &self.key(st)[..16]))
    }

    pub fn is_cached(&self, st: StageName) -> bool {
        read_json::<StageManifest>(&self.stage_dir(st).join("manifest.json"))
            .map(|m| m.key == self.key(st) && m.version == ARTIFACT_VERSION)
            .unwrap_or(false)
    }

    fn stamp<D: Serialize>(&self, data: D) -> Stamped<D> {
        Stamped {
            version: ARTIFACT_VERSION.into(),
            config_hash: self.cfg.hash(),
            data,
        }
    }

    fn model_extra(&self) -> std::collections::BTreeMap<String, serde_json::Value> {
        let mut m = std::collections::BTreeMap::new();
        m.insert("config_hash".into(), serde_json::json!(self.cfg.hash()));
        m.insert("version".into(), serde_json::json!(ARTIFACT_VERSION));
        m
    }

    fn finish(&self, st: StageName, start: Instant, files: Vec<String>) -> Result<()> {
        let manifest = StageManifest {
            version: ARTIFACT_VERSION.into(),
            stage: st,
            key: self.key(st).into(),
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            files,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        write_json(&self.stage_dir(st).join("manifest.json"), &manifest)
    }

    fn write_scene_set(&self, path: &Path, set: &SceneSet) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (s, o) in set {
            let line = scene::scene_to_json(s, o)?;
            let v: serde_json::Value = serde_json::from_str(&line)?;
            serde_json::to_writer(&mut w, &v)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_scene_set(&self, split: Split) -> Result<SceneSet> {
        let path = self.stage_dir(StageName::GenScenes).join(format!("{}.jsonl", split.name()));
        let f = fs::File::open(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(scene::scene_from_json(&line)?);
            }
        }
        Ok(out)
    }

    fn run_stage(&self, st: StageName) -> Result<()> {
        let start = Instant::now();
        let dir = self.stage_dir(st);
        fs::create_dir_all(&dir)?;
        let cfg = &self.cfg;
        match st {
            StageName::GenScenes => {
                let mut files = Vec::new();
                for split in Split::ALL {
                    let set = generate_split(cfg, split)?;
                    let name = format!("{}.jsonl", split.name());
                    self.write_scene_set(&dir.join(&name), &set)?;
                    files.push(name);
                    if split == Split::Eval {
                        let sub = dir.join("eval");
                        fs::create_dir_all(&sub)?;
                        for (i, (s, o)) in set.iter().enumerate() {
                            scene::save_scene(sub.join(format!("scene_{i:04}.json")), s, o)?;
                        }
                        files.push("eval/".into());
                    }
                }
                self.finish(st, start, files)
            }
            StageName::TrainEncoder => {
                let train = self.load_scene_set(Split::EncoderTrain)?;
                let hold = self.load_scene_set(Split::EncoderHoldout)?;
                let (enc, report) = train_encoder_stage(cfg, &train, &hold)?;
                enc.save(dir.join("encoder.bin"))?;
                write_json(&dir.join("encoder_report.json"), &self.stamp(&report))?;
                self.finish(st, start, vec!["encoder.bin".into(), "encoder_report.json".into()])
            }
            StageName::GenReorientData => {
                let enc = self.load_encoder()?;
                let scenes = self.load_scene_set(Split::Reorient)?;
                let data = reorient_data_stage(cfg, &enc, &scenes)?;
                write_json(&dir.join("dataset.json"), &self.stamp(&data))?;
                self.finish(st, start, vec!["dataset.json".into()])
            }
            StageName::TrainFeasibility => {
                let data = self.load_dataset()?;
                let (m1, m2, reports) = train_feasibility_stage(cfg, &data)?;
                m1.save(dir.join("m1.bin"))?;
                m2.save(dir.join("m2.bin"))?;
                write_json(&dir.join("feasibility_report.json"), &self.stamp(&reports))?;
                self.finish(st, start, vec!["m1.bin".into(), "m2.bin".into(), "feasibility_report.json".into()])
            }
            StageName::TrainScore => {
                let data = self.load_dataset()?;
                let (net, report) = train_score_stage(cfg, &data)?;
                let mut extra = self.model_extra();
                extra.insert("role".into(), serde_json::json!("score"));
                extra.insert("time_dim".into(), serde_json::json!(net.time_dim()));
                extra.insert("cond_dim".into(), serde_json::json!(net.cond_dim()));
                extra.insert("schedule_steps".into(), serde_json::json!(cfg.schedule.steps));
                extra.insert("schedule_kind".into(), serde_json::json!(cfg.schedule.kind.name()));
                nn::save_model(dir.join("score.bin"), net.net(), extra)?;
                write_json(&dir.join("score_report.json"), &self.stamp(&report))?;
                self.finish(st, start, vec!["score.bin".into(), "score_report.json".into()])
            }
            StageName::Evaluate => {
                let models = self.load_models()?;
                let tasks = prepare_tasks(&models, &self.load_scene_set(Split::Eval)?, cfg)?;
                let (metrics, timing) = evaluate(&models, &tasks, cfg)?;
                write_json(&dir.join("metrics.json"), &metrics)?;
                fs::write(dir.join("metrics.csv"), metrics.to_csv())?;
                write_json(&dir.join("timing.json"), &timing)?;
                self.finish(st, start, vec!["metrics.json".into(), "metrics.csv".into(), "timing.json".into()])
            }
        }
    }

    pub fn load_encoder(&self) -> Result<ConditionEncoder<f64>> {
        ConditionEncoder::load(self.stage_dir(StageName::TrainEncoder).join("encoder.bin"))
    }

    pub fn load_dataset(&self) -> Result<ReorientDataset> {
        let s: Stamped<ReorientDataset> = read_json(&self.stage_dir(StageName::GenReorientData).join("dataset.json"))?;
        Ok(s.data)
    }

    pub fn load_models(&self) -> Result<Models> {
        let fdir = self.stage_dir(StageName::TrainFeasibility);
        let score_file = nn::load_model(self.stage_dir(StageName::TrainScore).join("score.bin"))?;
        Ok(Models {
            encoder: self.load_encoder()?,
            m1: FeasibilityModel::load(fdir.join("m1.bin"))?,
            m2: FeasibilityModel::load(fdir.join("m2.bin"))?,
            score: ScoreNet::from_file(&score_file)?,
            sched: make_schedule(self.cfg.schedule.steps, self.cfg.schedule.kind)?,
        })
    }

    pub fn manifest(&self, st: StageName) -> Result<StageManifest> {
        read_json(&self.stage_dir(st).join("manifest.json"))
    }

    pub fn load_metrics(&self) -> Result<MetricsReport> {
        read_json(&self.stage_dir(StageName::Evaluate).join("metrics.json"))
    }

    pub fn load_timing(&self) -> Result<TimingReport> {
        read_json(&self.stage_dir(StageName::Evaluate).join("timing.json"))
    }

    /// Runs every stage up to and including `until`, skipping stages whose
    /// artifacts already exist for the current key. A failing stage is named
    /// in the returned error; artifacts of earlier stages stay on disk.
    pub fn run(&self, until: StageName) -> Result<PipelineRun> {
        fs::create_dir_all(&self.root)?;
        let mut stages = Vec::new();
        for st in StageName::ALL.into_iter().filter(|&s| s <= until) {
            let cached = self.is_cached(st);
            if cached {
                log::info!("stage {} cached", st.name());
            } else {
                log::info!("stage {} running", st.name());
                self.run_stage(st).map_err(|e| Error::Stage {
                    stage: st.name(),
                    source: Box::new(e),
                })?;
            }
            stages.push(StageStatus {
                stage: st,
                key: self.key(st).into(),
                cached,
                dir: self.stage_dir(st),
            });
        }
        let (metrics, timing) = if until == StageName::Evaluate {
            (Some(self.load_metrics()?), Some(self.load_timing()?))
        } else {
            (None, None)
        };
        Ok(PipelineRun { stages, metrics, timing })
    }
}

/// Runs the full pipeline for `cfg` under `root`.
pub fn run_pipeline(cfg: &ExperimentConfig, root: impl Into<PathBuf>) -> Result<PipelineRun> {
    Pipeline::new(cfg.clone(), root)?.run(StageName::Evaluate)
}

/// `poses.json` document of a sampling query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosesFile {
    pub version: String,
    pub config_hash: String,
    pub poses: Vec<PoseEntry>,
    pub wall_time_s: f64,
    pub config_echo: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub position: [f64; 3],
    pub quaternion: [f64; 4],
    pub m1: f64,
    pub m2: f64,
    pub combined: f64,
}

impl PosesFile {
    pub fn new(cfg: &ExperimentConfig, out: &SamplerOutput) -> Self {
        Self {
            version: ARTIFACT_VERSION.into(),
            config_hash: cfg.hash(),
            poses: out
                .poses
                .iter()
                .map(|p| PoseEntry {
                    position: p.pose.position,
                    quaternion: p.pose.quaternion,
                    m1: p.m1,
                    m2: p.m2,
                    combined: p.combined,
                })
                .collect(),
            wall_time_s: out.wall_time,
            config_echo: cfg.clone(),
        }
    }
}

/// Snapshot latents as CSV: `k,chain,x0..x6`.
pub fn snapshots_csv(out: &SamplerOutput) -> String {
    let mut s = String::from("k,chain,x0,x1,x2,x3,x4,x5,x6\n");
    for snap in &out.trajectory {
        for (chain, v) in &snap.latents {
            let _ = write!(s, "{},{}", snap.k, chain);
            for x in v {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
    }
    s
}

/// Random scene-level seed helper for CLI one-offs.
pub fn random_seed() -> u64 {
    rand::rng().random()
}
