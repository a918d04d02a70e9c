//! Noise schedules, the forward noising process and the score-matching
//! objective.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{self, Activation, Cotangent, FeedForwardNet, FixedInput, Gradients, OutputHead, TrainReport, TrainerConfig};
use crate::scalar::Scalar;

/// Dimension of the diffusing pose: 3 position + 4 orientation components.
pub const POSE_DIM: usize = 7;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::InvalidArgument(format!("unknown schedule family `{other}`"))),
        }
    }
}

/// Variance schedule indexed by `k = 1..=K`, with `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    kind: ScheduleKind,
    /// Index 0 holds the `k = 0` convention values (beta 0, alpha 1).
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

pub fn make_schedule<T: Scalar>(k_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::new(k_steps, kind)
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(k_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if k_steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs K >= 2, got {k_steps}")));
        }
        let kf = k_steps as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |k: f64| {
                    let t = (k / kf + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    t.cos().powi(2)
                };
                (1..=k_steps)
                    .map(|k| (1.0 - f(k as f64) / f(k as f64 - 1.0)).clamp(1e-12, MAX_BETA))
                    .collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / kf;
                let lo = (1e-4 * scale).min(MAX_BETA);
                let hi = (0.02 * scale).min(MAX_BETA);
                (0..k_steps)
                    .map(|i| lo + (hi - lo) * i as f64 / (kf - 1.0))
                    .collect()
            }
        };
        let mut b = vec![T::zero()];
        let mut a = vec![T::one()];
        let mut ab = vec![T::one()];
        let mut prod = 1.0f64;
        for beta in betas {
            prod *= 1.0 - beta;
            b.push(T::lit(beta));
            a.push(T::lit(1.0 - beta));
            ab.push(T::lit(prod));
        }
        Ok(Self {
            kind,
            betas: b,
            alphas: a,
            alpha_bars: ab,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k > self.steps() {
            Err(Error::InvalidArgument(format!("step {k} outside 0..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    /// `beta_k`; zero at `k = 0`.
    pub fn beta(&self, k: usize) -> T {
        self.betas[k]
    }

    pub fn alpha(&self, k: usize) -> T {
        self.alphas[k]
    }

    pub fn alpha_bar(&self, k: usize) -> T {
        self.alpha_bars[k]
    }

    /// `beta_1..beta_K`.
    pub fn betas(&self) -> &[T] {
        &self.betas[1..]
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas[1..]
    }

    /// `alpha_bar_1..alpha_bar_K`.
    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars[1..]
    }

    /// CSV with columns `k,beta,alpha,alpha_bar` for `k = 1..=K`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,beta,alpha,alpha_bar\n");
        for k in 1..=self.steps() {
            let _ = writeln!(
                out,
                "{k},{:e},{:e},{:e}",
                self.betas[k].to_f64_lossy(),
                self.alphas[k].to_f64_lossy(),
                self.alpha_bars[k].to_f64_lossy()
            );
        }
        out
    }
}

/// Axis-aligned workspace box used to normalize positions to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            lo: [-0.8, -0.8, 0.0],
            hi: [0.8, 0.8, 0.8],
        }
    }
}

impl Workspace {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.hi[i] > self.lo[i]) || !self.lo[i].is_finite() || !self.hi[i].is_finite() {
                return Err(Error::Config(format!("workspace axis {i} has empty or invalid extent")));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| 2.0 * (p[i] - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0)
    }

    pub fn denormalize(&self, u: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| self.lo[i] + (u[i] + 1.0) * 0.5 * (self.hi[i] - self.lo[i]))
    }

    /// Per-axis derivative of the normalized coordinate w.r.t. meters.
    pub fn scale(&self) -> [f64; 3] {
        std::array::from_fn(|i| 2.0 / (self.hi[i] - self.lo[i]))
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    pub fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| p[i].clamp(self.lo[i], self.hi[i]))
    }
}

/// Unconstrained diffusion state: normalized position then raw quaternion
/// components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentPose<T>(pub [T; POSE_DIM]);

impl<T: Scalar> LatentPose<T> {
    pub fn zeros() -> Self {
        Self([T::zero(); POSE_DIM])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn from_slice(v: &[T]) -> Result<Self> {
        check_dim("latent pose", POSE_DIM, v.len())?;
        Ok(Self(std::array::from_fn(|i| v[i])))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Position in meters plus a unit quaternion `[w, x, y, z]` with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReorientPose {
    pub position: [f64; 3],
    pub quaternion: [f64; 4],
}

impl ReorientPose {
    /// Normalizes and sign-canonicalizes the quaternion.
    pub fn new(position: [f64; 3], quaternion: [f64; 4]) -> Result<Self> {
        Ok(Self {
            position,
            quaternion: canonical_quaternion(quaternion)?,
        })
    }

    pub fn identity_at(position: [f64; 3]) -> Self {
        Self {
            position,
            quaternion: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Decodes a latent: denormalizes and clamps the position into the
    /// workspace, then canonicalizes the quaternion.
    pub fn from_latent<T: Scalar>(latent: &LatentPose<T>, ws: &Workspace) -> Result<Self> {
        let v: [f64; POSE_DIM] = std::array::from_fn(|i| latent.0[i].to_f64_lossy());
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite latent pose".into()));
        }
        let position = ws.clamp(ws.denormalize([v[0], v[1], v[2]]));
        Self::new(position, [v[3], v[4], v[5], v[6]])
    }

    pub fn to_latent<T: Scalar>(&self, ws: &Workspace) -> LatentPose<T> {
        let p = ws.normalize(self.position);
        let q = self.quaternion;
        LatentPose([p[0], p[1], p[2], q[0], q[1], q[2], q[3]].map(T::lit))
    }

    pub fn is_valid(&self) -> bool {
        let n: f64 = self.quaternion.iter().map(|c| c * c).sum::<f64>().sqrt();
        (n - 1.0).abs() <= 1e-6 && self.quaternion[0] >= 0.0 && self.position.iter().all(|p| p.is_finite())
    }
}

/// Unit quaternion with non-negative `w`; rejects near-zero input.
pub fn canonical_quaternion(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(n > 1e-9) || !n.is_finite() {
        return Err(Error::InvalidArgument("quaternion has zero or non-finite norm".into()));
    }
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    Ok(q.map(|c| sign * c / n))
}

/// Closed-form marginal sample `sqrt(ab_k) x0 + sqrt(1 - ab_k) eps`.
pub fn forward_sample<T: Scalar>(
    x0: &LatentPose<T>,
    k: usize,
    eps: &[T; POSE_DIM],
    sched: &NoiseSchedule<T>,
) -> Result<LatentPose<T>> {
    sched.check_k(k)?;
    let ab = sched.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(LatentPose(std::array::from_fn(|i| a * x0.0[i] + b * eps[i])))
}

/// One transition of the forward chain, `q(x_k | x_{k-1})`.
pub fn noise_step<T: Scalar>(
    x_prev: &LatentPose<T>,
    k: usize,
    eps: &[T; POSE_DIM],
    sched: &NoiseSchedule<T>,
) -> Result<LatentPose<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("single-step noising starts at k = 1".into()));
    }
    sched.check_k(k)?;
    let (a, b) = (sched.alpha(k).sqrt(), sched.beta(k).sqrt());
    Ok(LatentPose(std::array::from_fn(|i| a * x_prev.0[i] + b * eps[i])))
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> [T; POSE_DIM] {
    std::array::from_fn(|_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

/// Sinusoidal embedding of the step index: pairs `(sin(k w_i), cos(k w_i))`
/// with geometrically spaced frequencies.
pub fn time_embedding<T: Scalar>(k: usize, dim: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half.max(1) as f64);
        let arg = k as f64 * freq;
        out[2 * i] = T::lit(arg.sin());
        out[2 * i + 1] = T::lit(arg.cos());
    }
    if dim % 2 == 1 {
        out[dim - 1] = T::lit(k as f64 / 1000.0);
    }
}

/// Noise-prediction network `eps_theta(x_k, k, phi)`.
///
/// Input row layout: `[x (7) | time embedding | phi | null flag]`. The null
/// condition zeroes `phi` and sets the flag, so the flag's first-layer weight
/// column acts as the learned null embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet<T> {
    net: FeedForwardNet<T>,
    time_dim: usize,
    cond_dim: usize,
}

impl<T: Scalar> ScoreNet<T> {
    pub fn init<R: Rng + ?Sized>(
        hidden: &[usize],
        time_dim: usize,
        cond_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![POSE_DIM + time_dim + cond_dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(POSE_DIM);
        let net = FeedForwardNet::init(&dims, activation, OutputHead::Linear, rng)?;
        Ok(Self {
            net,
            time_dim,
            cond_dim,
        })
    }

    pub fn from_net(net: FeedForwardNet<T>, time_dim: usize, cond_dim: usize) -> Result<Self> {
        check_dim("score net input", POSE_DIM + time_dim + cond_dim + 1, net.input_dim())?;
        check_dim("score net output", POSE_DIM, net.output_dim())?;
        Ok(Self {
            net,
            time_dim,
            cond_dim,
        })
    }

    pub fn net(&self) -> &FeedForwardNet<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FeedForwardNet<T> {
        &mut self.net
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn cast<U: Scalar>(&self) -> ScoreNet<U> {
        ScoreNet {
            net: self.net.cast(),
            time_dim: self.time_dim,
            cond_dim: self.cond_dim,
        }
    }

    /// Writes one input row; `phi = None` selects the null condition.
    pub fn fill_input(&self, row: &mut [T], x: &[T], k: usize, phi: Option<&[T]>) -> Result<()> {
        check_dim("score net input row", self.input_dim(), row.len())?;
        fill_row(self.time_dim, self.cond_dim, row, x, k, phi)
    }

    /// Noise predictions for a batch of latents (rows) sharing step and condition.
    pub fn eps_batch(&self, x: ArrayView2<T>, k: usize, phi: Option<&[T]>) -> Result<Array2<T>> {
        check_dim("latent batch width", POSE_DIM, x.ncols())?;
        let fixed = self.fixed_input(k, phi)?;
        self.net.forward_batch_fixed(x, &fixed)
    }

    /// Time embedding and condition folded into the first layer, for
    /// repeated batches at one step.
    pub fn fixed_input(&self, k: usize, phi: Option<&[T]>) -> Result<FixedInput<T>> {
        let mut template = vec![T::zero(); self.input_dim()];
        self.fill_input(&mut template, &[T::zero(); POSE_DIM], k, phi)?;
        self.net.fix_trailing_input(POSE_DIM, &template[POSE_DIM..])
    }

    pub fn eps(&self, x: &LatentPose<T>, k: usize, phi: Option<&[T]>) -> Result<[T; POSE_DIM]> {
        let mut row = vec![T::zero(); self.input_dim()];
        self.fill_input(&mut row, &x.0, k, phi)?;
        let out = self.net.forward(&row)?;
        Ok(std::array::from_fn(|i| out[i]))
    }

    pub fn save(&self, path: impl AsRef<Path>, schedule_steps: usize, kind: ScheduleKind) -> Result<()> {
        let mut extra = BTreeMap::new();
        extra.insert("role".into(), serde_json::json!("score"));
        extra.insert("time_dim".into(), serde_json::json!(self.time_dim));
        extra.insert("cond_dim".into(), serde_json::json!(self.cond_dim));
        extra.insert("schedule_steps".into(), serde_json::json!(schedule_steps));
        extra.insert("schedule_kind".into(), serde_json::json!(kind.name()));
        nn::save_model(path, &self.net, extra)
    }

    pub fn from_file(file: &nn::ModelFile) -> Result<Self> {
        if file.extra_str("role") != Some("score") {
            return Err(Error::Format("model file is not a score network".into()));
        }
        let get = |key: &str| {
            file.meta
                .extra
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("score model metadata lacks `{key}`")))
        };
        Self::from_net(file.to_net()?, get("time_dim")?, get("cond_dim")?)
    }
}

fn fill_row<T: Scalar>(time_dim: usize, cond_dim: usize, row: &mut [T], x: &[T], k: usize, phi: Option<&[T]>) -> Result<()> {
    check_dim("latent pose", POSE_DIM, x.len())?;
    row[..POSE_DIM].copy_from_slice(x);
    let t0 = POSE_DIM;
    let c0 = t0 + time_dim;
    time_embedding(k, time_dim, &mut row[t0..c0]);
    match phi {
        Some(p) => {
            check_dim("condition embedding", cond_dim, p.len())?;
            row[c0..c0 + cond_dim].copy_from_slice(p);
            row[c0 + cond_dim] = T::zero();
        }
        None => {
            row[c0..c0 + cond_dim].fill(T::zero());
            row[c0 + cond_dim] = T::one();
        }
    }
    Ok(())
}

/// One diffusion training example: a clean latent and its condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreExample<T> {
    pub x0: LatentPose<T>,
    pub phi: Vec<T>,
}

/// Mean over the batch of `||eps - eps_theta(x_k, k, phi)||^2`, with
/// `k ~ U{1..K}`, `eps ~ N(0, I)` and the condition replaced by the null
/// token with probability `p_drop`.
pub fn score_matching_loss<T: Scalar, R: Rng + ?Sized>(
    net: &ScoreNet<T>,
    sched: &NoiseSchedule<T>,
    batch: &[&ScoreExample<T>],
    p_drop: f64,
    rng: &mut R,
) -> Result<(T, Gradients<T>)> {
    loss_impl(&net.net, net.time_dim, net.cond_dim, sched, batch, p_drop, rng)
}

fn loss_impl<T: Scalar, R: Rng + ?Sized>(
    net: &FeedForwardNet<T>,
    time_dim: usize,
    cond_dim: usize,
    sched: &NoiseSchedule<T>,
    batch: &[&ScoreExample<T>],
    p_drop: f64,
    rng: &mut R,
) -> Result<(T, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_dim("score net input", POSE_DIM + time_dim + cond_dim + 1, net.input_dim())?;
    let n = batch.len();
    let mut input = Array2::zeros((n, net.input_dim()));
    let mut eps_all = Array2::zeros((n, POSE_DIM));
    for (i, ex) in batch.iter().enumerate() {
        let k = rng.random_range(1..=sched.steps());
        let eps = standard_normal::<T, _>(rng);
        let drop = rng.random::<f64>() < p_drop;
        let xk = forward_sample(&ex.x0, k, &eps, sched)?;
        let mut row = input.row_mut(i);
        let row = row.as_slice_mut().expect("row-major");
        fill_row(time_dim, cond_dim, row, &xk.0, k, if drop { None } else { Some(&ex.phi) })?;
        for j in 0..POSE_DIM {
            eps_all[[i, j]] = eps[j];
        }
    }
    let trace = net.forward_trace(input.view())?;
    let resid = trace.output() - &eps_all;
    let nt = T::lit(n as f64);
    let loss = resid.iter().map(|&r| r * r).sum::<T>() / nt;
    let two = T::lit(2.0);
    let cot = resid.mapv(|r| two * r / nt);
    let (grads, _) = net.backward(&trace, Cotangent::Output(cot.view()))?;
    Ok((loss, grads))
}

/// Trains a score network on `data` with classifier-free condition dropout.
pub fn train_score_net<T: Scalar>(
    net: &mut ScoreNet<T>,
    sched: &NoiseSchedule<T>,
    data: &[ScoreExample<T>],
    p_drop: f64,
    config: &TrainerConfig,
) -> Result<TrainReport> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::Config(format!("p_drop must lie in [0, 1], got {p_drop}")));
    }
    for ex in data {
        check_dim("condition embedding", net.cond_dim, ex.phi.len())?;
    }
    let (time_dim, cond_dim) = (net.time_dim, net.cond_dim);
    nn::train(&mut net.net, data, config, |inner, batch, rng: &mut ChaCha8Rng| {
        loss_impl(inner, time_dim, cond_dim, sched, batch, p_drop, rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn cosine_schedule_terminal_alpha_bar_is_small() {
        for k in [50, 100, 256, 1000] {
            let s = make_schedule::<f64>(k, ScheduleKind::Cosine).unwrap();
            assert!(s.alpha_bar(k) <= 1e-3, "K={k}: {}", s.alpha_bar(k));
        }
    }

    #[test]
    fn schedule_invariants() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for k in [2, 4, 17, 256] {
                let s = make_schedule::<f64>(k, kind).unwrap();
                assert_eq!(s.alpha_bar(0), 1.0);
                assert_eq!(s.betas().len(), k);
                for i in 1..=k {
                    assert!(s.beta(i) > 0.0 && s.beta(i) < 1.0);
                    assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
                    if i > 1 {
                        assert!(s.beta(i) >= s.beta(i - 1));
                    }
                }
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(make_schedule::<f64>(1, ScheduleKind::Cosine).is_err());
        assert!(ScheduleKind::from_name("sigmoid").is_err());
    }

    #[test]
    fn csv_has_header_and_k_rows() {
        let s = make_schedule::<f64>(4, ScheduleKind::Cosine).unwrap();
        let csv = s.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "k,beta,alpha,alpha_bar");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("4,"));
    }

    #[test]
    fn forward_sample_trivial_cases() {
        let s = make_schedule::<f64>(10, ScheduleKind::Cosine).unwrap();
        let x0 = LatentPose([0.5, -0.2, 0.1, 1.0, 0.0, 0.0, 0.3]);
        let eps = [0.3; POSE_DIM];
        assert_eq!(forward_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let noiseless = forward_sample(&x0, 6, &[0.0; POSE_DIM], &s).unwrap();
        for i in 0..POSE_DIM {
            assert_abs_diff_eq!(noiseless.0[i], s.alpha_bar(6).sqrt() * x0.0[i], epsilon = 1e-15);
        }
        assert!(forward_sample(&x0, 11, &eps, &s).is_err());
    }

    #[test]
    fn time_embedding_is_bounded_and_distinct() {
        let mut a = [0.0f64; 16];
        let mut b = [0.0f64; 16];
        time_embedding(3, 16, &mut a);
        time_embedding(4, 16, &mut b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }

    #[test]
    fn latent_round_trip_canonicalizes() {
        let ws = Workspace::default();
        let pose = ReorientPose::new([0.1, -0.3, 0.05], [-0.5, 0.5, -0.5, 0.5]).unwrap();
        assert!(pose.quaternion[0] > 0.0);
        let back = ReorientPose::from_latent(&pose.to_latent::<f64>(&ws), &ws).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(back.position[i], pose.position[i], epsilon = 1e-12);
        }
        assert!(back.is_valid());
        assert!(ReorientPose::new([0.0; 3], [0.0; 4]).is_err());
    }

    #[test]
    fn oracle_network_gives_zero_loss_shape() {
        // zero network: loss should be close to E||eps||^2 = 7
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sched = make_schedule::<f64>(50, ScheduleKind::Cosine).unwrap();
        let mut net = ScoreNet::<f64>::init(&[8], 4, 2, Activation::Silu, &mut rng).unwrap();
        for l in net.net_mut().layers_mut() {
            l.weight.fill(0.0);
        }
        let data: Vec<ScoreExample<f64>> = (0..10_000)
            .map(|_| ScoreExample {
                x0: LatentPose::zeros(),
                phi: vec![0.1, 0.2],
            })
            .collect();
        let refs: Vec<&ScoreExample<f64>> = data.iter().collect();
        let (loss, _) = score_matching_loss(&net, &sched, &refs, 0.1, &mut rng).unwrap();
        assert!((loss - 7.0).abs() / 7.0 < 0.05, "loss {loss}");
    }

    #[test]
    fn full_dropout_leaves_condition_weights_without_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sched = make_schedule::<f64>(20, ScheduleKind::Cosine).unwrap();
        let net = ScoreNet::<f64>::init(&[12, 12], 4, 3, Activation::Silu, &mut rng).unwrap();
        let data: Vec<ScoreExample<f64>> = (0..64)
            .map(|i| ScoreExample {
                x0: LatentPose([i as f64 / 64.0; POSE_DIM]),
                phi: vec![1.0, -2.0, 0.5],
            })
            .collect();
        let refs: Vec<_> = data.iter().collect();
        let (_, g) = score_matching_loss(&net, &sched, &refs, 1.0, &mut rng).unwrap();
        let phi_cols = POSE_DIM + 4..POSE_DIM + 4 + 3;
        assert!(g.first_layer_columns(phi_cols).iter().all(|&v| v == 0.0));
        let null_col = POSE_DIM + 4 + 3..POSE_DIM + 4 + 4;
        assert!(g.first_layer_columns(null_col).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn eps_batch_matches_single_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ScoreNet::<f64>::init(&[16], 6, 2, Activation::Silu, &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, POSE_DIM), |(i, j)| (i * 7 + j) as f64 * 0.1 - 1.0);
        let phi = [0.3, -0.7];
        let batch = net.eps_batch(x.view(), 9, Some(&phi)).unwrap();
        for i in 0..3 {
            let single = net
                .eps(&LatentPose::from_slice(x.row(i).as_slice().unwrap()).unwrap(), 9, Some(&phi))
                .unwrap();
            for j in 0..POSE_DIM {
                assert_abs_diff_eq!(single[j], batch[[i, j]], epsilon = 1e-14);
            }
        }
    }
}
