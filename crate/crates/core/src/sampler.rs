//! Reverse diffusion with classifier-free guidance and feasibility-gradient
//! refinement, stepped with DDIM.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{LatentPose, NoiseSchedule, ReorientPose, ScoreNet, Workspace, POSE_DIM};
use crate::error::{check_dim, Error, Result};
use crate::feasibility::{FeasibilityModel, GraspPose, GRASP_DIM};
use crate::nn::FixedInput;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Classifier-free guidance weight.
    pub w_c: f64,
    /// Reorientation-model guidance weight.
    pub w1: f64,
    /// Placement-model guidance weight.
    pub w2: f64,
    pub inject_noise: bool,
    #[serde(alias = "K_sample")]
    pub k_sample: usize,
    pub n_candidates: usize,
    pub top_n: usize,
    pub seed: u64,
    /// Feasibility guidance is skipped at steps with a smaller `alpha_bar`.
    pub min_alpha_bar: f64,
    /// Upper bound on the guidance vector norm.
    pub max_guidance_norm: Option<f64>,
    /// Bound on each component of the clean-sample estimate inside the chain
    /// update; `eps` is re-derived from the clipped estimate.
    pub clip_x0: Option<f64>,
    /// Steps at which chain latents are recorded; 0 records the final state.
    pub snapshot_at: Vec<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w_c: 1.0,
            w1: 1000.0,
            w2: 20.0,
            inject_noise: false,
            k_sample: 256,
            n_candidates: 50,
            top_n: 10,
            seed: 0,
            min_alpha_bar: 0.3,
            max_guidance_norm: Some(50.0),
            clip_x0: None,
            snapshot_at: Vec::new(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        for (name, v) in [("w_c", self.w_c), ("w1", self.w1), ("w2", self.w2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.k_sample == 0 || self.k_sample > schedule_steps {
            return Err(Error::Config(format!(
                "K_sample must lie in 1..={schedule_steps}, got {}",
                self.k_sample
            )));
        }
        if self.n_candidates == 0 || self.top_n == 0 || self.top_n > self.n_candidates {
            return Err(Error::Config("need 1 <= top_n <= n_candidates".into()));
        }
        if !(0.0..=1.0).contains(&self.min_alpha_bar) {
            return Err(Error::Config("min_alpha_bar must lie in [0, 1]".into()));
        }
        if let Some(c) = self.max_guidance_norm {
            if !(c > 0.0) {
                return Err(Error::Config("max_guidance_norm must be positive".into()));
            }
        }
        if let Some(c) = self.clip_x0 {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config("clip_x0 must be finite and positive".into()));
            }
        }
        Ok(())
    }

    pub fn guided(&self) -> bool {
        self.w1 > 0.0 || self.w2 > 0.0
    }
}

/// `eps(x, phi) + w_c * (eps(x, phi) - eps(x, null))`.
pub fn cf_guided_eps<T: Scalar>(
    net: &ScoreNet<T>,
    x: &LatentPose<T>,
    k: usize,
    phi: &[T],
    w_c: T,
) -> Result<[T; POSE_DIM]> {
    let c = net.eps(x, k, Some(phi))?;
    let u = net.eps(x, k, None)?;
    Ok(std::array::from_fn(|i| c[i] + w_c * (c[i] - u[i])))
}

/// Batched [`cf_guided_eps`].
pub fn cf_guided_eps_batch<T: Scalar>(
    net: &ScoreNet<T>,
    x: ArrayView2<T>,
    k: usize,
    phi: &[T],
    w_c: T,
) -> Result<Array2<T>> {
    let c = net.eps_batch(x, k, Some(phi))?;
    let u = net.eps_batch(x, k, None)?;
    Ok(ndarray::Zip::from(&c).and(&u).map_collect(|&a, &b| a + w_c * (a - b)))
}

/// Clean-sample estimate `(x_k - sqrt(1 - abar_k) eps) / sqrt(abar_k)`.
pub fn estimate_x0<T: Scalar>(
    x: &LatentPose<T>,
    eps: &[T; POSE_DIM],
    k: usize,
    sched: &NoiseSchedule<T>,
) -> Result<LatentPose<T>> {
    if k == 0 || k > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "estimate_x0 needs 1 <= k <= {}, got {k}",
            sched.steps()
        )));
    }
    let ab = sched.alpha_bar(k);
    let (s, n) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(LatentPose(std::array::from_fn(|i| (x.0[i] - n * eps[i]) / s)))
}

/// `sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * eps`.
pub fn ddim_step<T: Scalar>(
    x: &LatentPose<T>,
    eps: &[T; POSE_DIM],
    k: usize,
    k_prev: usize,
    sched: &NoiseSchedule<T>,
) -> Result<LatentPose<T>> {
    if k_prev >= k {
        return Err(Error::InvalidArgument(format!(
            "ddim_step needs k_prev < k, got {k_prev} >= {k}"
        )));
    }
    let x0 = estimate_x0(x, eps, k, sched)?;
    let ab = sched.alpha_bar(k_prev);
    let (s, n) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(LatentPose(std::array::from_fn(|i| s * x0.0[i] + n * eps[i])))
}

/// `exp(-(1 - m)^2)`.
pub fn heuristic<T: Scalar>(m: T) -> T {
    let d = T::one() - m;
    (-(d * d)).exp()
}

/// Heuristic of one model at one grasp and latent pose.
pub fn heuristic_score<T: Scalar>(
    model: &FeasibilityModel<T>,
    grasp: &[T],
    pose: &LatentPose<T>,
    phi: &[T],
) -> Result<T> {
    Ok(heuristic(model.predict_latent(grasp, &pose.0, phi)?))
}

/// Evenly spaced, strictly decreasing steps from `k_total` down to 0.
pub fn stride_steps(k_total: usize, k_sample: usize) -> Result<Vec<usize>> {
    if k_sample == 0 || k_sample > k_total {
        return Err(Error::InvalidArgument(format!(
            "K_sample must lie in 1..={k_total}, got {k_sample}"
        )));
    }
    Ok((0..=k_sample)
        .map(|i| ((k_total * (k_sample - i)) as f64 / k_sample as f64).round() as usize)
        .collect())
}

/// Noise increment between two retained steps: `beta_k` for adjacent steps,
/// `1 - abar_k / abar_prev` across a stride.
pub fn effective_beta<T: Scalar>(sched: &NoiseSchedule<T>, k: usize, k_prev: usize) -> T {
    if k_prev + 1 == k {
        sched.beta(k)
    } else {
        T::one() - sched.alpha_bar(k) / sched.alpha_bar(k_prev)
    }
}

/// Feasibility models, grasp sets and condition prepared for guidance.
pub struct GuidanceContext<'a, T> {
    m1: &'a FeasibilityModel<T>,
    m2: &'a FeasibilityModel<T>,
    eta1: Array2<T>,
    eta2: Array2<T>,
    fixed1: FixedInput<T>,
    fixed2: FixedInput<T>,
}

/// Max-score grasp per row and the model value and pose gradient there.
struct BestGrasp<T> {
    index: Vec<usize>,
    value: Vec<T>,
    grad: Array2<T>,
}

fn grasp_features<T: Scalar>(grasps: &[GraspPose], ws: &Workspace) -> Array2<T> {
    let mut a = Array2::zeros((grasps.len(), GRASP_DIM));
    for (i, g) in grasps.iter().enumerate() {
        for (j, v) in g.features::<T>(ws).into_iter().enumerate() {
            a[[i, j]] = v;
        }
    }
    a
}

impl<'a, T: Scalar> GuidanceContext<'a, T> {
    /// `eta1` are world-frame pick grasps, `eta2` object-frame place grasps.
    pub fn new(
        m1: &'a FeasibilityModel<T>,
        m2: &'a FeasibilityModel<T>,
        eta1: &[GraspPose],
        eta2: &[GraspPose],
        phi: &[T],
        ws: &Workspace,
    ) -> Result<Self> {
        if eta1.is_empty() || eta2.is_empty() {
            return Err(Error::InvalidArgument("guidance needs non-empty grasp sets".into()));
        }
        Ok(Self {
            m1,
            m2,
            eta1: grasp_features(eta1, ws),
            eta2: grasp_features(eta2, ws),
            fixed1: m1.fixed_condition(phi)?,
            fixed2: m2.fixed_condition(phi)?,
        })
    }

    fn best(&self, model: usize, poses: ArrayView2<T>, with_grad: bool) -> Result<BestGrasp<T>> {
        let (m, eta, fixed) = if model == 0 {
            (self.m1, &self.eta1, &self.fixed1)
        } else {
            (self.m2, &self.eta2, &self.fixed2)
        };
        let n = poses.nrows();
        let g = eta.nrows();
        let mut gr = Array2::zeros((n * g, GRASP_DIM));
        let mut pr = Array2::zeros((n * g, POSE_DIM));
        for i in 0..n {
            for j in 0..g {
                gr.row_mut(i * g + j).assign(&eta.row(j));
                pr.row_mut(i * g + j).assign(&poses.row(i));
            }
        }
        let all = m.predict_batch_fixed(gr.view(), pr.view(), fixed)?;
        let mut index = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = 0;
            for j in 1..g {
                if all[i * g + j] > all[i * g + b] {
                    b = j;
                }
            }
            index.push(b);
        }
        let sel = Array2::from_shape_fn((n, GRASP_DIM), |(i, c)| eta[[index[i], c]]);
        if with_grad {
            let (value, grad) = m.pose_gradient_batch_fixed(sel.view(), poses, fixed)?;
            Ok(BestGrasp {
                index,
                value: value.to_vec(),
                grad,
            })
        } else {
            let value = (0..n).map(|i| all[i * g + index[i]]).collect();
            Ok(BestGrasp {
                index,
                value,
                grad: Array2::zeros((0, POSE_DIM)),
            })
        }
    }
}

/// Guidance vectors for a batch of chains. Rows that come out non-finite are
/// reported in the second return value.
fn guidance_batch<T: Scalar>(
    ctx: &GuidanceContext<T>,
    x: ArrayView2<T>,
    eps: ArrayView2<T>,
    k: usize,
    k_prev: usize,
    sched: &NoiseSchedule<T>,
    cfg: &GuidanceConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<(Array2<T>, Vec<usize>)> {
    let n = x.nrows();
    let mut g = Array2::zeros((n, POSE_DIM));
    let ab = sched.alpha_bar(k);
    if !cfg.guided() || ab.to_f64_lossy() < cfg.min_alpha_bar {
        return Ok((g, Vec::new()));
    }
    let (s, sn) = (ab.sqrt(), (T::one() - ab).sqrt());
    let x0 = ndarray::Zip::from(&x).and(&eps).map_collect(|&xv, &ev| (xv - sn * ev) / s);
    let beta = effective_beta(sched, k, k_prev);
    let two = T::lit(2.0);
    for (model, w) in [(0, cfg.w1), (1, cfg.w2)] {
        if w == 0.0 {
            continue;
        }
        let best = ctx.best(model, x0.view(), true)?;
        let w = T::lit(w);
        for i in 0..n {
            let c = two * w * beta * (T::one() - best.value[i]) / s;
            for j in 0..POSE_DIM {
                g[[i, j]] += c * best.grad[[i, j]];
            }
        }
    }
    let mut failed = Vec::new();
    for i in 0..n {
        let mut row = g.row_mut(i);
        let mut norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !norm.is_finite() {
            failed.push(i);
            continue;
        }
        if let Some(c) = cfg.max_guidance_norm {
            let c = T::lit(c);
            if norm > c {
                row.mapv_inplace(|v| v * c / norm);
                norm = c;
            }
        }
        if cfg.inject_noise {
            let sigma = T::lit(0.1) * norm;
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rngs[i]);
                *v += sigma * T::lit(z);
            }
        }
    }
    Ok((g, failed))
}

/// `g_k = -beta_k sum_i w_i grad_{x_k} [1 - M_i(q0_hat)]^2` for one chain,
/// differentiating through the clean-sample estimate with `eps_tilde` held
/// constant.
#[allow(clippy::too_many_arguments)]
pub fn feasibility_guidance_term<T: Scalar>(
    ctx: &GuidanceContext<T>,
    x: &LatentPose<T>,
    eps_tilde: &[T; POSE_DIM],
    k: usize,
    k_prev: usize,
    sched: &NoiseSchedule<T>,
    cfg: &GuidanceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<[T; POSE_DIM]> {
    if k == 0 || k_prev >= k || k > sched.steps() {
        return Err(Error::InvalidArgument(format!("invalid step pair ({k}, {k_prev})")));
    }
    let xv = ArrayView2::from_shape((1, POSE_DIM), &x.0[..]).expect("row");
    let ev = ArrayView2::from_shape((1, POSE_DIM), &eps_tilde[..]).expect("row");
    let (g, failed) = guidance_batch(ctx, xv, ev, k, k_prev, sched, cfg, std::slice::from_mut(rng))?;
    if !failed.is_empty() {
        return Err(Error::NonFiniteGuidance { chain: 0, step: k });
    }
    Ok(std::array::from_fn(|j| g[[0, j]]))
}

/// Recorded chain latents at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub k: usize,
    /// `(chain, latent)` for chains alive at that step.
    pub latents: Vec<(usize, [f64; POSE_DIM])>,
}

/// Final latents of a batch of chains.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult<T> {
    /// Final latent per chain; `None` for dropped chains.
    pub latents: Vec<Option<LatentPose<T>>>,
    pub trajectory: Vec<Snapshot>,
}

/// Runs `cfg.n_candidates` reverse chains in lockstep. Chain `i` draws from
/// its own stream of the seeded generator, so results do not depend on batch
/// composition.
pub fn run_chains<T: Scalar>(
    score: &ScoreNet<T>,
    sched: &NoiseSchedule<T>,
    phi: &[T],
    guidance: Option<&GuidanceContext<T>>,
    cfg: &GuidanceConfig,
) -> Result<ChainResult<T>> {
    cfg.validate(sched.steps())?;
    check_dim("condition embedding", score.cond_dim(), phi.len())?;
    let n = cfg.n_candidates;
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut x = Array2::<T>::zeros((n, POSE_DIM));
    for (i, r) in rngs.iter_mut().enumerate() {
        for j in 0..POSE_DIM {
            let z: f64 = StandardNormal.sample(r);
            x[[i, j]] = T::lit(z);
        }
    }
    let mut alive = vec![true; n];
    let mut trajectory = Vec::new();
    let snap = |k: usize, x: &Array2<T>, alive: &[bool], out: &mut Vec<Snapshot>| {
        if cfg.snapshot_at.contains(&k) {
            out.push(Snapshot {
                k,
                latents: (0..x.nrows())
                    .filter(|&i| alive[i])
                    .map(|i| (i, std::array::from_fn(|j| x[[i, j]].to_f64_lossy())))
                    .collect(),
            });
        }
    };
    let steps = stride_steps(sched.steps(), cfg.k_sample)?;
    let w_c = T::lit(cfg.w_c);
    let clip = cfg.clip_x0.map(T::lit);
    for pair in steps.windows(2) {
        let (k, k_prev) = (pair[0], pair[1]);
        snap(k, &x, &alive, &mut trajectory);
        let eps_t = cf_guided_eps_batch(score, x.view(), k, phi, w_c)?;
        let ab = sched.alpha_bar(k);
        let sn = (T::one() - ab).sqrt();
        let eps = match guidance {
            Some(ctx) => {
                let (g, failed) = guidance_batch(ctx, x.view(), eps_t.view(), k, k_prev, sched, cfg, &mut rngs)?;
                for i in failed {
                    if alive[i] {
                        log::warn!("{}; chain dropped", Error::NonFiniteGuidance { chain: i, step: k });
                        alive[i] = false;
                    }
                }
                ndarray::Zip::from(&eps_t).and(&g).map_collect(|&e, &gv| e - sn * gv)
            }
            None => eps_t,
        };
        let s = ab.sqrt();
        let abp = sched.alpha_bar(k_prev);
        let (sp, snp) = (abp.sqrt(), (T::one() - abp).sqrt());
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            let mut ok = true;
            for j in 0..POSE_DIM {
                let mut x0 = (x[[i, j]] - sn * eps[[i, j]]) / s;
                let mut e = eps[[i, j]];
                if let Some(c) = clip {
                    if x0.abs() > c {
                        x0 = if x0 > T::zero() { c } else { -c };
                        e = (x[[i, j]] - s * x0) / sn;
                    }
                }
                let v = sp * x0 + snp * e;
                ok &= v.is_finite();
                x[[i, j]] = v;
            }
            if !ok {
                log::warn!("chain {i} produced a non-finite latent at step {k}; chain dropped");
                alive[i] = false;
            }
        }
    }
    snap(0, &x, &alive, &mut trajectory);
    let latents = (0..n)
        .map(|i| alive[i].then(|| LatentPose(std::array::from_fn(|j| x[[i, j]]))))
        .collect();
    Ok(ChainResult { latents, trajectory })
}

/// A returned pose with its feasibility scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPose {
    pub pose: ReorientPose,
    pub m1: f64,
    pub m2: f64,
    /// `h(m1) * h(m2)` with `h(m) = exp(-(1 - m)^2)`.
    pub combined: f64,
    /// Index of the best pick grasp under `m1`.
    pub pick_grasp: usize,
    /// Index of the best place grasp under `m2`.
    pub place_grasp: usize,
    pub chain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerOutput {
    pub poses: Vec<ScoredPose>,
    pub trajectory: Vec<Snapshot>,
    pub dropped_chains: Vec<usize>,
    pub wall_time: f64,
}

/// Everything a sampling query needs besides the guidance settings.
pub struct SampleInputs<'a, T> {
    pub score: &'a ScoreNet<T>,
    pub sched: &'a NoiseSchedule<T>,
    pub m1: &'a FeasibilityModel<T>,
    pub m2: &'a FeasibilityModel<T>,
    /// World-frame pick grasps.
    pub pick: &'a [GraspPose],
    /// Object-frame place grasps.
    pub place: &'a [GraspPose],
    pub phi: &'a [T],
    pub ws: &'a Workspace,
}

/// Full query: chains, scoring, ranking and truncation to `top_n`.
pub fn sample<T: Scalar>(inputs: &SampleInputs<T>, cfg: &GuidanceConfig) -> Result<SamplerOutput> {
    let start = Instant::now();
    let ctx = GuidanceContext::new(inputs.m1, inputs.m2, inputs.pick, inputs.place, inputs.phi, inputs.ws)?;
    let chains = run_chains(inputs.score, inputs.sched, inputs.phi, cfg.guided().then_some(&ctx), cfg)?;
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    for (i, lat) in chains.latents.iter().enumerate() {
        let Some(lat) = lat else {
            dropped.push(i);
            continue;
        };
        match ReorientPose::from_latent(lat, inputs.ws) {
            Ok(p) => {
                kept.push((i, p));
                rows.push(p.to_latent::<T>(inputs.ws));
            }
            Err(e) => {
                log::warn!("chain {i} dropped at output: {e}");
                dropped.push(i);
            }
        }
    }
    let mut poses = Vec::with_capacity(kept.len());
    if !kept.is_empty() {
        let lat = Array2::from_shape_fn((rows.len(), POSE_DIM), |(i, j)| rows[i].0[j]);
        let b1 = ctx.best(0, lat.view(), false)?;
        let b2 = ctx.best(1, lat.view(), false)?;
        for (r, (chain, pose)) in kept.into_iter().enumerate() {
            let m1 = b1.value[r].to_f64_lossy();
            let m2 = b2.value[r].to_f64_lossy();
            poses.push(ScoredPose {
                pose,
                m1,
                m2,
                combined: heuristic(m1) * heuristic(m2),
                pick_grasp: b1.index[r],
                place_grasp: b2.index[r],
                chain,
            });
        }
    }
    poses.sort_by(|a, b| b.combined.total_cmp(&a.combined).then(a.chain.cmp(&b.chain)));
    poses.truncate(cfg.top_n);
    Ok(SamplerOutput {
        poses,
        trajectory: chains.trajectory,
        dropped_chains: dropped,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
