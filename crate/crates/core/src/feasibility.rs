//! Grasp-feasibility discriminators: success probability of a grasp for a
//! candidate reorientation pose under a scene-task condition.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ReorientPose, Workspace, POSE_DIM};
use crate::error::{check_dim, Error, Result};
use crate::nn::{self, Activation, Cotangent, FeedForwardNet, FixedInput, OutputHead, TrainReport, TrainerConfig};
use crate::scalar::Scalar;

pub const GRASP_DIM: usize = 6;

/// Suction grasp: contact point and outward unit surface normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl GraspPose {
    pub fn new(point: [f64; 3], normal: [f64; 3]) -> Result<Self> {
        let n = normal.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n > 1e-12) || !n.is_finite() || point.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("grasp normal must be finite and non-zero".into()));
        }
        Ok(Self {
            point,
            normal: normal.map(|c| c / n),
        })
    }

    /// Network features: normalized point then normal.
    pub fn features<T: Scalar>(&self, ws: &Workspace) -> [T; GRASP_DIM] {
        let p = ws.normalize(self.point);
        [p[0], p[1], p[2], self.normal[0], self.normal[1], self.normal[2]].map(T::lit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    /// Reorientation from the pile given a pick grasp.
    Reorient,
    /// Placement from the reorientation pose given a place grasp.
    Place,
}

impl ModelRole {
    pub fn name(self) -> &'static str {
        match self {
            ModelRole::Reorient => "reorient",
            ModelRole::Place => "place",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "reorient" => Ok(ModelRole::Reorient),
            "place" => Ok(ModelRole::Place),
            other => Err(Error::InvalidArgument(format!("unknown model role `{other}`"))),
        }
    }
}

/// One labeled candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRecord {
    pub grasp: GraspPose,
    pub pose: ReorientPose,
    pub phi: Vec<f64>,
    pub label: u8,
}

/// Success predictor with input layout `[grasp 6 | pose 7 | phi]`.
///
/// The quaternion part of the pose is normalized before entering the
/// network, so predictions depend only on the rotation direction of the
/// 4-vector; gradients account for that normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityModel<T> {
    role: ModelRole,
    net: FeedForwardNet<T>,
    cond_dim: usize,
}

const QUAT_NORM_FLOOR: f64 = 1e-6;

impl<T: Scalar> FeasibilityModel<T> {
    pub fn init<R: Rng + ?Sized>(
        role: ModelRole,
        hidden: &[usize],
        cond_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![GRASP_DIM + POSE_DIM + cond_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let net = FeedForwardNet::init(&dims, activation, OutputHead::Sigmoid, rng)?;
        Ok(Self { role, net, cond_dim })
    }

    pub fn from_net(role: ModelRole, net: FeedForwardNet<T>) -> Result<Self> {
        if net.head() != OutputHead::Sigmoid || net.output_dim() != 1 {
            return Err(Error::InvalidArgument("feasibility net needs a single sigmoid output".into()));
        }
        let in_dim = net.input_dim();
        if in_dim < GRASP_DIM + POSE_DIM {
            return Err(Error::DimensionMismatch {
                what: "feasibility input",
                expected: GRASP_DIM + POSE_DIM,
                got: in_dim,
            });
        }
        Ok(Self {
            role,
            net,
            cond_dim: in_dim - GRASP_DIM - POSE_DIM,
        })
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    pub fn net(&self) -> &FeedForwardNet<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FeedForwardNet<T> {
        &mut self.net
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn cast<U: Scalar>(&self) -> FeasibilityModel<U> {
        FeasibilityModel {
            role: self.role,
            net: self.net.cast(),
            cond_dim: self.cond_dim,
        }
    }

    fn fill_row(&self, row: &mut [T], grasp: &[T], pose: &[T], phi: &[T]) -> Result<()> {
        check_dim("grasp features", GRASP_DIM, grasp.len())?;
        check_dim("pose input", POSE_DIM, pose.len())?;
        check_dim("condition embedding", self.cond_dim, phi.len())?;
        row[..GRASP_DIM].copy_from_slice(grasp);
        let p0 = GRASP_DIM;
        row[p0..p0 + 3].copy_from_slice(&pose[..3]);
        let n = quat_norm(&pose[3..]);
        for i in 0..4 {
            row[p0 + 3 + i] = pose[3 + i] / n;
        }
        row[p0 + POSE_DIM..].copy_from_slice(phi);
        Ok(())
    }

    fn build_input(&self, grasps: ArrayView2<T>, poses: ArrayView2<T>, phi: &[T]) -> Result<Array2<T>> {
        check_dim("grasp batch width", GRASP_DIM, grasps.ncols())?;
        check_dim("pose batch width", POSE_DIM, poses.ncols())?;
        check_dim("batch rows", grasps.nrows(), poses.nrows())?;
        let mut input = Array2::zeros((grasps.nrows(), self.input_dim()));
        for i in 0..grasps.nrows() {
            let g = grasps.row(i).to_vec();
            let p = poses.row(i).to_vec();
            let mut row = input.row_mut(i);
            self.fill_row(row.as_slice_mut().expect("row-major"), &g, &p, phi)?;
        }
        Ok(input)
    }

    /// Success probability for a latent-form pose (normalized position, raw
    /// quaternion components).
    pub fn predict_latent(&self, grasp: &[T], pose: &[T], phi: &[T]) -> Result<T> {
        let mut row = vec![T::zero(); self.input_dim()];
        self.fill_row(&mut row, grasp, pose, phi)?;
        Ok(self.net.forward(&row)?[0])
    }

    pub fn predict(&self, grasp: &GraspPose, pose: &ReorientPose, phi: &[T], ws: &Workspace) -> Result<T> {
        let g = grasp.features::<T>(ws);
        let p = pose.to_latent::<T>(ws);
        self.predict_latent(&g, &p.0, phi)
    }

    /// Row-wise predictions for paired grasp and pose rows.
    pub fn predict_batch(&self, grasps: ArrayView2<T>, poses: ArrayView2<T>, phi: &[T]) -> Result<Array1<T>> {
        let input = self.build_input(grasps, poses, phi)?;
        Ok(self.net.forward_batch(input.view())?.column(0).to_owned())
    }

    /// Prediction and its gradient with respect to the 7 pose inputs.
    pub fn pose_gradient(&self, grasp: &[T], pose: &[T], phi: &[T]) -> Result<(T, [T; POSE_DIM])> {
        let g = ArrayView2::from_shape((1, grasp.len()), grasp).expect("row");
        let p = ArrayView2::from_shape((1, pose.len()), pose).expect("row");
        let (v, d) = self.pose_gradient_batch(g, p, phi)?;
        Ok((v[0], std::array::from_fn(|i| d[[0, i]])))
    }

    /// Batched form of [`pose_gradient`](Self::pose_gradient).
    pub fn pose_gradient_batch(
        &self,
        grasps: ArrayView2<T>,
        poses: ArrayView2<T>,
        phi: &[T],
    ) -> Result<(Array1<T>, Array2<T>)> {
        let input = self.build_input(grasps, poses, phi)?;
        let trace = self.net.forward_trace(input.view())?;
        let n = input.nrows();
        let cot = Array2::from_elem((n, 1), T::one());
        let (_, dx) = self.net.backward(&trace, Cotangent::Output(cot.view()))?;
        let values = trace.output().column(0).to_owned();
        Ok((values, pose_chain(&dx, poses)))
    }

    /// Condition folded into the first layer for repeated batches.
    pub fn fixed_condition(&self, phi: &[T]) -> Result<FixedInput<T>> {
        check_dim("condition embedding", self.cond_dim, phi.len())?;
        self.net.fix_trailing_input(GRASP_DIM + POSE_DIM, phi)
    }

    fn variable_input(&self, grasps: ArrayView2<T>, poses: ArrayView2<T>) -> Result<Array2<T>> {
        check_dim("grasp batch width", GRASP_DIM, grasps.ncols())?;
        check_dim("pose batch width", POSE_DIM, poses.ncols())?;
        check_dim("batch rows", grasps.nrows(), poses.nrows())?;
        let mut input = Array2::zeros((grasps.nrows(), GRASP_DIM + POSE_DIM));
        for i in 0..grasps.nrows() {
            for j in 0..GRASP_DIM {
                input[[i, j]] = grasps[[i, j]];
            }
            for j in 0..3 {
                input[[i, GRASP_DIM + j]] = poses[[i, j]];
            }
            let q: [T; 4] = std::array::from_fn(|j| poses[[i, 3 + j]]);
            let n = quat_norm(&q);
            for j in 0..4 {
                input[[i, GRASP_DIM + 3 + j]] = q[j] / n;
            }
        }
        Ok(input)
    }

    /// [`predict_batch`](Self::predict_batch) with a precomputed condition.
    pub fn predict_batch_fixed(&self, grasps: ArrayView2<T>, poses: ArrayView2<T>, fixed: &FixedInput<T>) -> Result<Array1<T>> {
        let input = self.variable_input(grasps, poses)?;
        Ok(self.net.forward_batch_fixed(input.view(), fixed)?.column(0).to_owned())
    }

    /// [`pose_gradient_batch`](Self::pose_gradient_batch) with a precomputed condition.
    pub fn pose_gradient_batch_fixed(
        &self,
        grasps: ArrayView2<T>,
        poses: ArrayView2<T>,
        fixed: &FixedInput<T>,
    ) -> Result<(Array1<T>, Array2<T>)> {
        let input = self.variable_input(grasps, poses)?;
        let trace = self.net.forward_trace_fixed(input.view(), fixed)?;
        let n = input.nrows();
        let cot = Array2::from_elem((n, 1), T::one());
        let dx = self.net.input_gradient(&trace, cot.view())?;
        Ok((trace.output().column(0).to_owned(), pose_chain(&dx, poses)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut extra = BTreeMap::new();
        extra.insert("role".into(), serde_json::json!(self.role.name()));
        extra.insert("cond_dim".into(), serde_json::json!(self.cond_dim));
        nn::save_model(path, &self.net, extra)
    }

    pub fn from_file(file: &nn::ModelFile) -> Result<Self> {
        let role = file
            .extra_str("role")
            .ok_or_else(|| Error::Format("feasibility model metadata lacks `role`".into()))?;
        Self::from_net(ModelRole::from_name(role)?, file.to_net()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(&nn::load_model(path)?)
    }
}

/// Maps input gradients over `[grasp | position | q / |q|]` back to the raw
/// latent pose.
fn pose_chain<T: Scalar>(dx: &Array2<T>, poses: ArrayView2<T>) -> Array2<T> {
    let n = dx.nrows();
    let p0 = GRASP_DIM;
    let mut grad = Array2::zeros((n, POSE_DIM));
    for i in 0..n {
        for j in 0..3 {
            grad[[i, j]] = dx[[i, p0 + j]];
        }
        let q: [T; 4] = std::array::from_fn(|j| poses[[i, 3 + j]]);
        let nrm = quat_norm(&q);
        let qh: [T; 4] = q.map(|c| c / nrm);
        let gq: [T; 4] = std::array::from_fn(|j| dx[[i, p0 + 3 + j]]);
        let dot = (0..4).map(|j| qh[j] * gq[j]).sum::<T>();
        for j in 0..4 {
            grad[[i, 3 + j]] = (gq[j] - qh[j] * dot) / nrm;
        }
    }
    grad
}

fn quat_norm<T: Scalar>(q: &[T]) -> T {
    let n = q.iter().map(|&c| c * c).sum::<T>().sqrt();
    n.max(T::lit(QUAT_NORM_FLOOR))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeasibilityTrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub trainer: TrainerConfig,
    /// Fraction of records held out for accuracy reporting.
    pub holdout_fraction: f64,
    /// Randomly negate training quaternions (same rotation) with probability 1/2.
    pub sign_augmentation: bool,
}

impl Default for FeasibilityTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            trainer: TrainerConfig {
                learning_rate: 2e-3,
                epochs: 60,
                batch_size: 128,
                final_lr_factor: 0.05,
                ..TrainerConfig::default()
            },
            holdout_fraction: 0.1,
            sign_augmentation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityTrainReport {
    pub role: ModelRole,
    pub n_train: usize,
    pub n_holdout: usize,
    pub positive_fraction: f64,
    /// Majority count over minority count.
    pub imbalance_ratio: f64,
    pub class_weights: [f64; 2],
    pub train: TrainReport,
    pub holdout_accuracy: Option<f64>,
    pub holdout_auc: Option<f64>,
}

struct Example<T> {
    row: Vec<T>,
    label: f64,
}

/// Trains a feasibility model with binary cross-entropy. Classes are
/// reweighted by inverse frequency when the imbalance exceeds 3:1.
pub fn train_feasibility<T: Scalar>(
    role: ModelRole,
    records: &[FeasibilityRecord],
    ws: &Workspace,
    config: &FeasibilityTrainConfig,
) -> Result<(FeasibilityModel<T>, FeasibilityTrainReport)> {
    if records.is_empty() {
        return Err(Error::Dataset("no feasibility records".into()));
    }
    let n_pos = records.iter().filter(|r| r.label == 1).count();
    if records.iter().any(|r| r.label > 1) {
        return Err(Error::Dataset("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_pos == records.len() {
        return Err(Error::Dataset(format!(
            "single-class dataset for {} model ({n_pos} positives of {})",
            role.name(),
            records.len()
        )));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
    }
    let cond_dim = records[0].phi.len();
    let n_neg = records.len() - n_pos;
    let imbalance = n_pos.max(n_neg) as f64 / n_pos.min(n_neg) as f64;
    let class_weights = if imbalance > 3.0 {
        let n = records.len() as f64;
        [n / (2.0 * n_neg as f64), n / (2.0 * n_pos as f64)]
    } else {
        [1.0, 1.0]
    };
    log::info!(
        "{} model: {} records, {:.1}% positive, imbalance {:.2}:1",
        role.name(),
        records.len(),
        100.0 * n_pos as f64 / records.len() as f64,
        imbalance
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed ^ 0x5eed_f00d);
    let mut model = FeasibilityModel::<T>::init(role, &config.hidden, cond_dim, config.activation, &mut rng)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((records.len() as f64) * config.holdout_fraction).floor() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);

    let to_example = |r: &FeasibilityRecord| -> Result<Example<T>> {
        check_dim("condition embedding", cond_dim, r.phi.len())?;
        let g = r.grasp.features::<T>(ws);
        let p = r.pose.to_latent::<T>(ws);
        let phi: Vec<T> = r.phi.iter().map(|&v| T::lit(v)).collect();
        let mut row = vec![T::zero(); model.input_dim()];
        model.fill_row(&mut row, &g, &p.0, &phi)?;
        Ok(Example {
            row,
            label: r.label as f64,
        })
    };
    let train_set: Vec<Example<T>> = train_idx.iter().map(|&i| to_example(&records[i])).collect::<Result<_>>()?;
    let hold_set: Vec<Example<T>> = hold_idx.iter().map(|&i| to_example(&records[i])).collect::<Result<_>>()?;

    let in_dim = model.input_dim();
    let augment = config.sign_augmentation;
    let report = nn::train(&mut model.net, &train_set, &config.trainer, |net, batch, rng| {
        let n = batch.len();
        let mut x = Array2::zeros((n, in_dim));
        for (i, ex) in batch.iter().enumerate() {
            let mut row = x.row_mut(i);
            let row = row.as_slice_mut().expect("row-major");
            row.copy_from_slice(&ex.row);
            if augment && rng.random::<bool>() {
                for v in &mut row[GRASP_DIM + 3..GRASP_DIM + POSE_DIM] {
                    *v = -*v;
                }
            }
        }
        let trace = net.forward_trace(x.view())?;
        let mut cot = Array2::zeros((n, 1));
        let mut wsum = 0.0;
        for ex in batch {
            wsum += class_weights[ex.label as usize];
        }
        let mut loss = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            let w = class_weights[ex.label as usize];
            let z = trace.logits()[[i, 0]].to_f64_lossy();
            // stable BCE from the logit
            loss += w * (z.max(0.0) - z * ex.label + (-z.abs()).exp().ln_1p());
            let p = trace.output()[[i, 0]].to_f64_lossy();
            cot[[i, 0]] = T::lit(w * (p - ex.label) / wsum);
        }
        let (g, _) = net.backward(&trace, Cotangent::Logits(cot.view()))?;
        Ok((T::lit(loss / wsum), g))
    })?;

    let (acc, auc) = if hold_set.is_empty() {
        (None, None)
    } else {
        let x = Array2::from_shape_fn((hold_set.len(), in_dim), |(i, j)| hold_set[i].row[j]);
        let p = model.net.forward_batch(x.view())?;
        let scores: Vec<f64> = p.column(0).iter().map(|v| v.to_f64_lossy()).collect();
        let labels: Vec<bool> = hold_set.iter().map(|e| e.label > 0.5).collect();
        let correct = scores.iter().zip(&labels).filter(|(s, l)| (**s > 0.5) == **l).count();
        (Some(correct as f64 / labels.len() as f64), roc_auc(&scores, &labels))
    };
    if let Some(a) = acc {
        log::info!("{} model held-out accuracy {:.3}, AUC {:?}", role.name(), a, auc);
    }
    let report = FeasibilityTrainReport {
        role,
        n_train: train_set.len(),
        n_holdout: hold_set.len(),
        positive_fraction: n_pos as f64 / records.len() as f64,
        imbalance_ratio: imbalance,
        class_weights,
        train: report,
        holdout_accuracy: acc,
        holdout_auc: auc,
    };
    Ok((model, report))
}

/// Area under the ROC curve via the rank-sum statistic; ties count half.
/// `None` when one class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Drops majority-class records at random until the majority share is at
/// most `max_share`.
pub fn balance_records<R: Rng + ?Sized>(records: Vec<FeasibilityRecord>, max_share: f64, rng: &mut R) -> Vec<FeasibilityRecord> {
    balance_by_label(records, |r| r.label, max_share, rng)
}

/// [`balance_records`] for any item with a binary label.
pub fn balance_by_label<X, R: Rng + ?Sized>(
    items: Vec<X>,
    label: impl Fn(&X) -> u8,
    max_share: f64,
    rng: &mut R,
) -> Vec<X> {
    let n_pos = items.iter().filter(|r| label(r) == 1).count();
    let n_neg = items.len() - n_pos;
    let (major, minor) = if n_pos >= n_neg { (1u8, n_neg) } else { (0u8, n_pos) };
    let n_major = n_pos.max(n_neg);
    if minor == 0 || (n_major as f64) <= max_share * items.len() as f64 {
        return items;
    }
    let keep_major = ((max_share / (1.0 - max_share)) * minor as f64).floor() as usize;
    let mut major_idx: Vec<usize> = items
        .iter()
        .enumerate()
        .filter(|(_, r)| label(r) == major)
        .map(|(i, _)| i)
        .collect();
    major_idx.shuffle(rng);
    let mut keep = vec![true; items.len()];
    for &i in &major_idx[keep_major.min(major_idx.len())..] {
        keep[i] = false;
    }
    items
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect()
}

pub fn write_records_jsonl<W: Write>(mut w: W, records: &[FeasibilityRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(r: R) -> Result<Vec<FeasibilityRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeasibilityRecord =
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        if rec.label > 1 {
            return Err(Error::Dataset(format!("line {}: label must be 0 or 1", i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> FeasibilityModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        FeasibilityModel::init(ModelRole::Reorient, &[16, 16], 4, Activation::Silu, &mut rng).unwrap()
    }

    #[test]
    fn zero_last_layer_predicts_one_half() {
        let mut m = model();
        let last = m.net_mut().layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let v = m.predict_latent(&[0.1; 6], &[0.2, 0.0, -0.3, 1.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model();
        let g = [0.1, -0.2, 0.3, 0.0, 0.0, 1.0];
        let p = [0.3, -0.5, 0.1, 0.8, -0.3, 0.2, 0.4];
        let phi = [0.5, -0.5, 0.25, 1.0];
        let (_, grad) = m.pose_gradient(&g, &p, &phi).unwrap();
        let h = 1e-5;
        for i in 0..POSE_DIM {
            let mut a = p;
            let mut b = p;
            a[i] += h;
            b[i] -= h;
            let fd = (m.predict_latent(&g, &a, &phi).unwrap() - m.predict_latent(&g, &b, &phi).unwrap()) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err <= 1e-4, "component {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn constant_network_has_zero_pose_gradient() {
        let mut m = model();
        for l in m.net_mut().layers_mut().iter_mut() {
            l.weight.fill(0.0);
        }
        let (_, grad) = m
            .pose_gradient(&[0.0; 6], &[0.1, 0.2, 0.3, 0.5, 0.5, 0.5, 0.5], &[0.0; 4])
            .unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quaternion_scale_and_sign_handling() {
        let m = model();
        let g = [0.0; 6];
        let phi = [0.0; 4];
        let a = m.predict_latent(&g, &[0.1, 0.1, 0.1, 0.5, 0.5, 0.5, 0.5], &phi).unwrap();
        let b = m.predict_latent(&g, &[0.1, 0.1, 0.1, 1.0, 1.0, 1.0, 1.0], &phi).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auc_of_perfect_and_reversed_rankings() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, true, false, true];
        assert_eq!(roc_auc(&s, &l), Some(1.0));
        let rev: Vec<bool> = l.iter().map(|x| !x).collect();
        assert_eq!(roc_auc(&s, &rev), Some(0.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(roc_auc(&s, &[true; 4]), None);
    }

    fn record(label: u8) -> FeasibilityRecord {
        FeasibilityRecord {
            grasp: GraspPose::new([0.0, -0.4, 0.05], [0.0, 0.0, 1.0]).unwrap(),
            pose: ReorientPose::identity_at([0.3, 0.2, 0.1]),
            phi: vec![0.5, -1.0],
            label,
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let recs = vec![record(1); 10];
        let err = train_feasibility::<f64>(ModelRole::Place, &recs, &Workspace::default(), &Default::default());
        assert!(matches!(err, Err(Error::Dataset(_))));
    }

    #[test]
    fn balancing_caps_majority_share() {
        let mut recs = vec![record(0); 90];
        recs.extend(vec![record(1); 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = balance_records(recs, 0.6, &mut rng);
        let pos = out.iter().filter(|r| r.label == 1).count();
        assert_eq!(pos, 10);
        assert!(out.len() - pos <= 15);
        assert!((out.len() - pos) as f64 <= 0.6 * out.len() as f64 + 1e-9);
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![record(0), record(1)];
        let mut buf = Vec::new();
        write_records_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"quaternion\""));
        assert_eq!(read_records_jsonl(buf.as_slice()).unwrap(), recs);
    }
}
