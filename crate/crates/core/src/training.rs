//! Losses, exact whole-model gradients, a finite-difference gradient
//! verifier, a decoupled-weight-decay adaptive optimizer, and the training
//! loop with deterministic shuffling, per-epoch eval, and checkpointing.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, BackboneError, DftBackbone, ForwardTrace, Gradients};
use crate::data::{read_tensor, write_tensor, DataError};
use crate::retrieval::{full_rank_retrieval, EmbeddingStore, RetrievalError};
use crate::rng::SplitMix64;
use crate::tensor::{s, RealTensor, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("contrastive batch needs at least 2 items, got {got}")]
    BatchTooSmall { got: usize },
    #[error("batch shapes disagree: {what}")]
    ShapeMismatch { what: String },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("optimizer produced a non-finite update for {name}")]
    NonFiniteUpdate { name: String },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("{xs} voxel rows but {vs} target rows")]
    PairCountMismatch { xs: usize, vs: usize },
    #[error("target vectors have {actual} entries, model emits {expected}")]
    TargetLength { expected: usize, actual: usize },
    #[error("bad training config: {0}")]
    BadTrainConfig(String),
    #[error("checkpoint parameter {name}: {reason}")]
    BadCheckpoint { name: String, reason: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDirection {
    VoxelToImage,
    ImageToVoxel,
    Symmetric,
}

fn default_tau() -> f64 {
    (-8.0f64).exp()
}

fn default_direction() -> LossDirection {
    LossDirection::Symmetric
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature; the default 1/e^8 ~ 3.35e-4 makes cosine logits
    /// span roughly +-3000, which is why log-sum-exp uses max subtraction.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Weight of the auxiliary reconstruction term; 0 removes it entirely.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_direction")]
    pub direction: LossDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            alpha: 0.0,
            direction: LossDirection::Symmetric,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(TrainError::BadTrainConfig("tau must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(TrainError::BadTrainConfig(
                "alpha must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn check_pair_shape<S: Scalar>(
    f: &RealTensor<S>,
    v: &RealTensor<S>,
) -> Result<(usize, usize), TrainError> {
    if f.shape() != v.shape() || f.shape().len() != 2 {
        return Err(TrainError::ShapeMismatch {
            what: format!("{:?} vs {:?}", f.shape(), v.shape()),
        });
    }
    Ok((f.rows(), f.cols()))
}

/// InfoNCE over a batch of raw (unnormalized) voxel embeddings F against
/// fixed targets V. Both sides are flattened rows, L2-normalized internally
/// so the logits are cosine similarities over tau. Returns the loss and its
/// gradient with respect to the raw F.
pub fn contrastive_loss<S: Scalar>(
    f: &RealTensor<S>,
    v: &RealTensor<S>,
    cfg: &LossConfig,
) -> Result<(f64, RealTensor<S>), TrainError> {
    cfg.validate()?;
    let (b, k) = check_pair_shape(f, v)?;
    if b < 2 {
        return Err(TrainError::BatchTooSmall { got: b });
    }

    // Normalize both sides in f64.
    let mut fh = vec![0.0f64; b * k];
    let mut norm_f = vec![0.0f64; b];
    for s_i in 0..b {
        let row = f.row(s_i);
        let n2: f64 = row.iter().map(|x| x.as_f64() * x.as_f64()).sum();
        let n = n2.sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(TrainError::NonFinite {
                what: format!("voxel embedding {s_i} (norm {n})"),
            });
        }
        norm_f[s_i] = n;
        for c in 0..k {
            fh[s_i * k + c] = row[c].as_f64() / n;
        }
    }
    let mut vh = vec![0.0f64; b * k];
    for s_i in 0..b {
        let row = v.row(s_i);
        let n2: f64 = row.iter().map(|x| x.as_f64() * x.as_f64()).sum();
        let n = n2.sqrt();
        for c in 0..k {
            vh[s_i * k + c] = if n > 0.0 { row[c].as_f64() / n } else { 0.0 };
        }
    }

    let mut logits = vec![0.0f64; b * b];
    for s_i in 0..b {
        for i in 0..b {
            let mut dot = 0.0;
            for c in 0..k {
                dot += fh[s_i * k + c] * vh[i * k + c];
            }
            let l = dot / cfg.tau;
            if !l.is_finite() {
                return Err(TrainError::NonFinite {
                    what: format!("logit ({s_i}, {i})"),
                });
            }
            logits[s_i * b + i] = l;
        }
    }

    let (w_rows, w_cols) = match cfg.direction {
        LossDirection::VoxelToImage => (1.0, 0.0),
        LossDirection::ImageToVoxel => (0.0, 1.0),
        LossDirection::Symmetric => (0.5, 0.5),
    };

    let mut loss = 0.0f64;
    let mut g_logits = vec![0.0f64; b * b];

    if w_rows > 0.0 {
        for s_i in 0..b {
            let row = &logits[s_i * b..(s_i + 1) * b];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
            loss += w_rows * (m + z.ln() - row[s_i]) / b as f64;
            for i in 0..b {
                let p = (row[i] - m).exp() / z;
                let delta = if i == s_i { 1.0 } else { 0.0 };
                g_logits[s_i * b + i] += w_rows * (p - delta) / b as f64;
            }
        }
    }
    if w_cols > 0.0 {
        for s_i in 0..b {
            let col: Vec<f64> = (0..b).map(|i| logits[i * b + s_i]).collect();
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = col.iter().map(|&l| (l - m).exp()).sum();
            loss += w_cols * (m + z.ln() - col[s_i]) / b as f64;
            for i in 0..b {
                let q = (col[i] - m).exp() / z;
                let delta = if i == s_i { 1.0 } else { 0.0 };
                g_logits[i * b + s_i] += w_cols * (q - delta) / b as f64;
            }
        }
    }

    // Chain: logits -> normalized embeddings -> raw embeddings.
    let mut grad = vec![S::zero(); b * k];
    for s_i in 0..b {
        let mut g_fh = vec![0.0f64; k];
        for i in 0..b {
            let g = g_logits[s_i * b + i] / cfg.tau;
            if g == 0.0 {
                continue;
            }
            for c in 0..k {
                g_fh[c] += g * vh[i * k + c];
            }
        }
        let fs = &fh[s_i * k..(s_i + 1) * k];
        let proj: f64 = fs.iter().zip(&g_fh).map(|(a, b)| a * b).sum();
        for c in 0..k {
            grad[s_i * k + c] = s::<S>((g_fh[c] - fs[c] * proj) / norm_f[s_i]);
        }
    }

    Ok((
        loss,
        RealTensor::new(vec![b, k], grad).expect("gradient shape matches batch"),
    ))
}

/// Mean squared error per batch item: (1/B) sum_s ||vhat_s - v_s||^2, with
/// the gradient taken with respect to vhat.
pub fn mse_loss<S: Scalar>(
    vhat: &RealTensor<S>,
    v: &RealTensor<S>,
) -> Result<(f64, RealTensor<S>), TrainError> {
    let (b, k) = check_pair_shape(vhat, v)?;
    let mut loss = 0.0f64;
    let mut grad = vec![S::zero(); b * k];
    let two_over_b = 2.0 / b as f64;
    for j in 0..b * k {
        let d = vhat.data()[j].as_f64() - v.data()[j].as_f64();
        loss += d * d;
        grad[j] = s::<S>(two_over_b * d);
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            what: "reconstruction loss".into(),
        });
    }
    Ok((
        loss,
        RealTensor::new(vec![b, k], grad).expect("gradient shape matches batch"),
    ))
}

/// Contrastive term plus alpha times the reconstruction term, both taken on
/// the same raw-prediction/target pair. alpha = 0 skips the reconstruction
/// entirely, so its gradients are exactly absent rather than merely scaled.
pub fn total_loss<S: Scalar>(
    f: &RealTensor<S>,
    v: &RealTensor<S>,
    cfg: &LossConfig,
) -> Result<(f64, RealTensor<S>), TrainError> {
    let (mut loss, mut grad) = contrastive_loss(f, v, cfg)?;
    if cfg.alpha > 0.0 {
        let (m_loss, m_grad) = mse_loss(f, v)?;
        loss += cfg.alpha * m_loss;
        let a = s::<S>(cfg.alpha);
        for (g, &mg) in grad.data_mut().iter_mut().zip(m_grad.data()) {
            *g = *g + a * mg;
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Whole-model batch gradients
// ---------------------------------------------------------------------------

fn stack_targets<S: Scalar>(
    vs: &[&[S]],
    expected: usize,
) -> Result<RealTensor<S>, TrainError> {
    let mut data = Vec::with_capacity(vs.len() * expected);
    for row in vs {
        if row.len() != expected {
            return Err(TrainError::TargetLength {
                expected,
                actual: row.len(),
            });
        }
        data.extend_from_slice(row);
    }
    RealTensor::new(vec![vs.len(), expected], data).map_err(|e| TrainError::ShapeMismatch {
        what: e.to_string(),
    })
}

/// Forward the batch, evaluate the total loss, and push its gradient back
/// through every sample. The returned container holds the summed parameter
/// gradients (the loss already carries the 1/B normalization).
pub fn batch_gradients<S: Scalar>(
    model: &DftBackbone<S>,
    xs: &[&[S]],
    vs: &[&[S]],
    cfg: &LossConfig,
) -> Result<(f64, Gradients<S>), TrainError> {
    if xs.len() != vs.len() {
        return Err(TrainError::PairCountMismatch {
            xs: xs.len(),
            vs: vs.len(),
        });
    }
    let out_len = model.config.out_tokens * model.config.embed_dim;
    let mut traces: Vec<ForwardTrace<S>> = Vec::with_capacity(xs.len());
    let mut f_data = Vec::with_capacity(xs.len() * out_len);
    for x in xs {
        let trace = model.forward_traced(x)?;
        f_data.extend_from_slice(trace.output.data());
        traces.push(trace);
    }
    let f = RealTensor::new(vec![xs.len(), out_len], f_data).expect("output rows stack");
    let v = stack_targets(vs, out_len)?;
    let (loss, g_f) = total_loss(&f, &v, cfg)?;

    let mut grads = model.zeros_like();
    let out_shape = vec![model.config.out_tokens, model.config.embed_dim];
    for (s_i, trace) in traces.iter().enumerate() {
        let g_out = RealTensor::new(out_shape.clone(), g_f.row(s_i).to_vec())
            .expect("row reshapes to the output grid");
        let g_s = model.backward(trace, &g_out);
        grads.axpy_params(S::one(), &g_s);
    }
    Ok((loss, grads))
}

/// Loss only, for finite differencing.
pub fn batch_loss<S: Scalar>(
    model: &DftBackbone<S>,
    xs: &[&[S]],
    vs: &[&[S]],
    cfg: &LossConfig,
) -> Result<f64, TrainError> {
    if xs.len() != vs.len() {
        return Err(TrainError::PairCountMismatch {
            xs: xs.len(),
            vs: vs.len(),
        });
    }
    let out_len = model.config.out_tokens * model.config.embed_dim;
    let mut f_data = Vec::with_capacity(xs.len() * out_len);
    for x in xs {
        f_data.extend_from_slice(model.forward(x)?.data());
    }
    let f = RealTensor::new(vec![xs.len(), out_len], f_data).expect("output rows stack");
    let v = stack_targets(vs, out_len)?;
    Ok(total_loss(&f, &v, cfg)?.0)
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub pass: bool,
    pub per_param: Vec<GradCheckEntry>,
}

fn set_param_coord(model: &mut DftBackbone<f64>, param_idx: usize, coord: usize, val: f64) {
    let mut idx = 0;
    model.for_each_param_mut(|_, slice| {
        if idx == param_idx {
            slice[coord] = val;
        }
        idx += 1;
    });
}

/// Compare a set of analytic gradients against central finite differences
/// of `loss` over every parameter coordinate. Step size is 1e-4 times the
/// coordinate's own scale (floored at 1), the standard sweet spot between
/// truncation and cancellation for double precision.
pub fn compare_gradients<F>(
    model: &DftBackbone<f64>,
    analytic: &Gradients<f64>,
    mut loss: F,
    tolerance: f64,
) -> Result<GradCheckReport, TrainError>
where
    F: FnMut(&DftBackbone<f64>) -> Result<f64, TrainError>,
{
    let params = model.param_tensors();
    let grads = analytic.param_tensors();
    let mut scratch = model.clone();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut worst_index = 0usize;

    for (pi, (name, _, data)) in params.iter().enumerate() {
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for k in 0..data.len() {
            let base = data[k];
            let h = 1e-4 * base.abs().max(1.0);
            set_param_coord(&mut scratch, pi, k, base + h);
            let lp = loss(&scratch)?;
            set_param_coord(&mut scratch, pi, k, base - h);
            let lm = loss(&scratch)?;
            set_param_coord(&mut scratch, pi, k, base);
            let numeric = (lp - lm) / (2.0 * h);
            let ana = grads[pi].2[k];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1e-6);
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_index = k;
            }
        }
        if entry.max_rel_err > max_rel_err {
            max_rel_err = entry.max_rel_err;
            worst_param = entry.name.clone();
            worst_index = entry.worst_index;
        }
        per_param.push(entry);
    }

    Ok(GradCheckReport {
        tolerance,
        max_rel_err,
        worst_param,
        worst_index,
        pass: max_rel_err <= tolerance,
        per_param,
    })
}

/// End-to-end gradient check of the batch loss on a double-precision model.
pub fn grad_check(
    model: &DftBackbone<f64>,
    xs: &[&[f64]],
    vs: &[&[f64]],
    cfg: &LossConfig,
    tolerance: f64,
) -> Result<GradCheckReport, TrainError> {
    let (_, grads) = batch_gradients(model, xs, vs, cfg)?;
    compare_gradients(model, &grads, |m| batch_loss(m, xs, vs, cfg), tolerance)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    7.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerHyper {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// Anything with a canonically ordered set of learnable tensors. The
/// optimizer walks parameters and their gradients strictly in this order,
/// so both sides must traverse identically.
pub trait ParamSet<S: Scalar> {
    fn param_tensors(&self) -> Vec<(String, Vec<usize>, &[S])>;
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [S]));

    fn total_params(&self) -> usize {
        self.param_tensors().iter().map(|(_, _, d)| d.len()).sum()
    }
}

impl<S: Scalar> ParamSet<S> for DftBackbone<S> {
    fn param_tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        DftBackbone::param_tensors(self)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [S])) {
        self.for_each_param_mut(|name, slice| f(name, slice));
    }
}

/// Adaptive-moment optimizer with decoupled weight decay:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
/// Moments are kept in f64 regardless of the parameter dtype.
pub struct OptimizerState {
    pub hyper: OptimizerHyper,
    pub step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(hyper: OptimizerHyper, param_count: usize) -> Self {
        Self {
            hyper,
            step_count: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step<S: Scalar, P: ParamSet<S>>(
        &mut self,
        model: &mut P,
        grads: &P,
    ) -> Result<(), TrainError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);

        let g_tensors = grads.param_tensors();
        let mut offset = 0usize;
        let mut tensor_idx = 0usize;
        let mut failed: Option<String> = None;
        model.visit_params_mut(&mut |name, slice| {
            if failed.is_some() {
                return;
            }
            let (gname, _, gdata) = &g_tensors[tensor_idx];
            assert_eq!(name, *gname, "parameter traversal order diverged");
            for (j, p) in slice.iter_mut().enumerate() {
                let g = gdata[j].as_f64();
                let mj = &mut self.m[offset + j];
                let vj = &mut self.v[offset + j];
                *mj = h.beta1 * *mj + (1.0 - h.beta1) * g;
                *vj = h.beta2 * *vj + (1.0 - h.beta2) * g * g;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                let pv = p.as_f64();
                let next = pv - h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * pv);
                if !next.is_finite() {
                    failed = Some(name.to_string());
                    return;
                }
                *p = s::<S>(next);
            }
            offset += slice.len();
            tensor_idx += 1;
        });
        match failed {
            Some(name) => Err(TrainError::NonFiniteUpdate { name }),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: BackboneConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerHyper,
    pub seed: u64,
    pub epoch: usize,
    pub eval_top1: f64,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckpointMeta<'a> {
    pub loss: &'a LossConfig,
    pub optimizer: &'a OptimizerHyper,
    pub seed: u64,
    pub epoch: usize,
    pub eval_top1: f64,
}

const CHECKPOINT_MANIFEST: &str = "manifest.json";

pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    model: &DftBackbone<S>,
    meta: CheckpointMeta,
) -> Result<CheckpointManifest, TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        TrainError::Data(DataError::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })?;
    let mut params = Vec::new();
    for (name, shape, data) in model.param_tensors() {
        let file = format!("{name}.lmnd");
        let t = RealTensor::new(shape, data.to_vec()).expect("parameter tensors are consistent");
        write_tensor(&dir.join(&file), &t)?;
        params.push(ParamEntry { name, file });
    }
    let manifest = CheckpointManifest {
        model: model.config.clone(),
        loss: *meta.loss,
        optimizer: *meta.optimizer,
        seed: meta.seed,
        epoch: meta.epoch,
        eval_top1: meta.eval_top1,
        dtype: format!("{:?}", S::DTYPE).to_lowercase(),
        params,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| {
        TrainError::Data(DataError::Io {
            path,
            source: e,
        })
    })?;
    Ok(manifest)
}

pub fn load_checkpoint<S: Scalar>(
    dir: &Path,
) -> Result<(DftBackbone<S>, CheckpointManifest), TrainError> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        TrainError::Data(DataError::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| {
        TrainError::Data(DataError::Json {
            path: path.clone(),
            source: e,
        })
    })?;
    let want_dtype = format!("{:?}", S::DTYPE).to_lowercase();
    if manifest.dtype != want_dtype {
        return Err(TrainError::BadCheckpoint {
            name: CHECKPOINT_MANIFEST.into(),
            reason: format!("dtype {} cannot load into a {want_dtype} model", manifest.dtype),
        });
    }

    let mut model = DftBackbone::<S>::init(manifest.model.clone(), 0)?;
    let mut by_name: BTreeMap<String, Vec<S>> = BTreeMap::new();
    let expected: BTreeMap<String, Vec<usize>> = model
        .param_tensors()
        .into_iter()
        .map(|(n, shape, _)| (n, shape))
        .collect();
    for entry in &manifest.params {
        let Some(shape) = expected.get(&entry.name) else {
            return Err(TrainError::BadCheckpoint {
                name: entry.name.clone(),
                reason: "not a parameter of this architecture".into(),
            });
        };
        let loaded = read_tensor(&dir.join(&entry.file))?;
        if loaded.shape() != shape.as_slice() {
            return Err(TrainError::BadCheckpoint {
                name: entry.name.clone(),
                reason: format!("shape {:?}, model wants {:?}", loaded.shape(), shape),
            });
        }
        let values: Vec<S> = loaded.into_f64().into_data().iter().map(|&x| s::<S>(x)).collect();
        by_name.insert(entry.name.clone(), values);
    }

    let mut missing = Vec::new();
    model.for_each_param_mut(|name, slice| match by_name.get(name) {
        Some(values) => slice.copy_from_slice(values),
        None => missing.push(name.to_string()),
    });
    if let Some(name) = missing.into_iter().next() {
        return Err(TrainError::BadCheckpoint {
            name,
            reason: "missing from checkpoint".into(),
        });
    }
    Ok((model, manifest))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: OptimizerHyper,
    /// When false, wall_seconds is reported as 0.0 so two runs of the same
    /// seed produce byte-identical loss curves.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: OptimizerHyper::default(),
            timing: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1_fwd: f64,
    pub eval_top1_bwd: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_eval: f64,
}

pub fn loss_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,eval_top1_fwd,eval_top1_bwd,wall_seconds\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.eval_top1_fwd, r.eval_top1_bwd, r.wall_seconds
        ));
    }
    out
}

/// Full-set top-1 accuracy in both directions for the eval pairs; (0, 0)
/// when there is no eval split.
fn eval_top1<S: Scalar>(
    model: &DftBackbone<S>,
    xs: &[&[S]],
    vs: &[&[S]],
) -> Result<(f64, f64), TrainError> {
    if xs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let ids: Vec<String> = (0..xs.len()).map(|i| format!("eval_{i:05}")).collect();
    let mut rows = Vec::with_capacity(xs.len());
    for x in xs {
        rows.push(model.embed_voxels(x)?);
    }
    let f = EmbeddingStore::from_rows(ids.clone(), rows)?;
    let v = EmbeddingStore::from_rows(ids, vs.iter().map(|r| r.to_vec()).collect())?;
    let report = full_rank_retrieval(&f, &v, &[])?;
    Ok((report.image.topk[&1], report.brain.topk[&1]))
}

/// Deterministic training loop: seeded shuffles, summed batch gradients,
/// one optimizer step per batch, full-set eval each epoch. The best
/// checkpoint (by mean of the two eval directions) is written to
/// `checkpoint_dir` when given. A trailing batch of one sample is folded
/// into its predecessor so every batch satisfies the contrastive minimum.
pub fn train<S: Scalar>(
    model: &mut DftBackbone<S>,
    train_x: &[&[S]],
    train_v: &[&[S]],
    eval_x: &[&[S]],
    eval_v: &[&[S]],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.loss.validate()?;
    if cfg.epochs == 0 {
        return Err(TrainError::BadTrainConfig("epochs must be >= 1".into()));
    }
    if cfg.batch_size < 2 {
        return Err(TrainError::BadTrainConfig(
            "batch_size must be >= 2 for the contrastive term".into(),
        ));
    }
    if train_x.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if train_x.len() != train_v.len() {
        return Err(TrainError::PairCountMismatch {
            xs: train_x.len(),
            vs: train_v.len(),
        });
    }
    if train_x.len() < 2 {
        return Err(TrainError::BatchTooSmall { got: train_x.len() });
    }
    if eval_x.len() != eval_v.len() {
        return Err(TrainError::PairCountMismatch {
            xs: eval_x.len(),
            vs: eval_v.len(),
        });
    }

    let n = train_x.len();
    let mut optimizer = OptimizerState::new(cfg.optimizer, model.param_count());
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_eval = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_model: Option<DftBackbone<S>> = None;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        rng.shuffle(&mut order);
        let mut batches: Vec<Vec<usize>> =
            order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().expect("non-empty batch list");
            batches.last_mut().expect("predecessor batch").extend(tail);
        }

        let mut weighted_loss = 0.0f64;
        for batch in &batches {
            let xs: Vec<&[S]> = batch.iter().map(|&i| train_x[i]).collect();
            let vs: Vec<&[S]> = batch.iter().map(|&i| train_v[i]).collect();
            let (loss, grads) = batch_gradients(model, &xs, &vs, &cfg.loss)?;
            optimizer.step(model, &grads)?;
            weighted_loss += loss * batch.len() as f64;
        }

        let (fwd, bwd) = eval_top1(model, eval_x, eval_v)?;
        let stats = EpochStats {
            epoch,
            train_loss: weighted_loss / n as f64,
            eval_top1_fwd: fwd,
            eval_top1_bwd: bwd,
            wall_seconds: if cfg.timing {
                t0.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        // Without an eval split, "best" degrades to "latest".
        let score = if eval_x.is_empty() {
            epoch as f64
        } else {
            (fwd + bwd) / 2.0
        };
        if score > best_eval {
            best_eval = score;
            best_epoch = epoch;
            best_model = Some(model.clone());
        }
        history.push(stats);
    }

    if let Some(dir) = checkpoint_dir {
        let snapshot = best_model.as_ref().unwrap_or(model);
        save_checkpoint(
            dir,
            snapshot,
            CheckpointMeta {
                loss: &cfg.loss,
                optimizer: &cfg.optimizer,
                seed: cfg.seed,
                epoch: best_epoch,
                eval_top1: if eval_x.is_empty() { 0.0 } else { best_eval },
            },
        )?;
    }

    Ok(TrainOutcome {
        history,
        best_epoch,
        best_eval: if eval_x.is_empty() { 0.0 } else { best_eval },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Variant;
    use crate::numerics::{dft_1d, idft_1d};

    fn unit_rows<S: Scalar>(rows: Vec<Vec<f64>>) -> RealTensor<S> {
        let b = rows.len();
        let k = rows[0].len();
        let mut data = Vec::with_capacity(b * k);
        for r in rows {
            data.extend(r.into_iter().map(|x| s::<S>(x)));
        }
        RealTensor::new(vec![b, k], data).unwrap()
    }

    fn grad_test_config() -> BackboneConfig {
        BackboneConfig {
            voxel_len: 10,
            patch_size: 2,
            embed_dim: 4,
            depth: 2,
            filter_count: 2,
            out_tokens: 3,
            variant: Variant::Hidden,
            activation_slope: 0.01,
            layer_norm: true,
            residual: true,
            mlp_hidden: 3,
        }
    }

    fn random_pairs(
        voxel_len: usize,
        out_len: usize,
        count: usize,
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = SplitMix64::new(seed);
        let xs = (0..count)
            .map(|_| (0..voxel_len).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let vs = (0..count)
            .map(|_| (0..out_len).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        (xs, vs)
    }

    #[test]
    fn contrastive_orthonormal_pair_hand_value() {
        // B=2, f=v=I2, tau=1: each row/column softmax puts e/(e+1) on the
        // diagonal, so every direction evaluates to -ln(e/(e+1)).
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let f = unit_rows::<f64>(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        for direction in [
            LossDirection::VoxelToImage,
            LossDirection::ImageToVoxel,
            LossDirection::Symmetric,
        ] {
            let cfg = LossConfig {
                tau: 1.0,
                alpha: 0.0,
                direction,
            };
            let (loss, _) = contrastive_loss(&f, &f, &cfg).unwrap();
            assert!((loss - want).abs() < 1e-12, "{direction:?}: {loss} vs {want}");
        }
    }

    #[test]
    fn contrastive_uniform_batch_gives_log_b() {
        // Identical rows on both sides: every softmax is uniform.
        let row = vec![0.3, -0.2, 0.9];
        let f = unit_rows::<f64>(vec![row.clone(), row.clone(), row]);
        let (loss, _) = contrastive_loss(&f, &f, &LossConfig::default()).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-9, "{loss} vs ln 3");
    }

    #[test]
    fn contrastive_is_scale_invariant() {
        let mut rng = SplitMix64::new(21);
        let mk = |rng: &mut SplitMix64| -> Vec<f64> {
            (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect()
        };
        let rows: Vec<Vec<f64>> = (0..4).map(|_| mk(&mut rng)).collect();
        let targets: Vec<Vec<f64>> = (0..4).map(|_| mk(&mut rng)).collect();
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|x| x * (1.0 + i as f64 * 2.3)).collect())
            .collect();
        let cfg = LossConfig {
            tau: 0.5,
            alpha: 0.0,
            direction: LossDirection::Symmetric,
        };
        let (a, _) = contrastive_loss(&unit_rows::<f64>(rows), &unit_rows(targets.clone()), &cfg)
            .unwrap();
        let (b, _) =
            contrastive_loss(&unit_rows::<f64>(scaled), &unit_rows(targets), &cfg).unwrap();
        assert!((a - b).abs() < 1e-12, "positive rescaling changed the loss");
    }

    #[test]
    fn contrastive_rejects_tiny_batches_and_nan() {
        let f = unit_rows::<f64>(vec![vec![1.0, 0.0]]);
        assert!(matches!(
            contrastive_loss(&f, &f, &LossConfig::default()).unwrap_err(),
            TrainError::BatchTooSmall { got: 1 }
        ));
        let bad = unit_rows::<f64>(vec![vec![f64::NAN, 0.0], vec![0.0, 1.0]]);
        let good = unit_rows::<f64>(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(contrastive_loss(&bad, &good, &LossConfig::default()).is_err());
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(22);
        let (b, k) = (3usize, 4usize);
        let f0: Vec<f64> = (0..b * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let v = unit_rows::<f64>(
            (0..b)
                .map(|_| (0..k).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect(),
        );
        for direction in [
            LossDirection::VoxelToImage,
            LossDirection::ImageToVoxel,
            LossDirection::Symmetric,
        ] {
            let cfg = LossConfig {
                tau: 1.0,
                alpha: 0.0,
                direction,
            };
            let f = RealTensor::new(vec![b, k], f0.clone()).unwrap();
            let (_, grad) = contrastive_loss(&f, &v, &cfg).unwrap();
            for j in 0..b * k {
                let h = 1e-6;
                let mut up = f0.clone();
                up[j] += h;
                let mut dn = f0.clone();
                dn[j] -= h;
                let lp = contrastive_loss(&RealTensor::new(vec![b, k], up).unwrap(), &v, &cfg)
                    .unwrap()
                    .0;
                let lm = contrastive_loss(&RealTensor::new(vec![b, k], dn).unwrap(), &v, &cfg)
                    .unwrap()
                    .0;
                let numeric = (lp - lm) / (2.0 * h);
                assert!(
                    (grad.data()[j] - numeric).abs()
                        <= 1e-6 * numeric.abs().max(grad.data()[j].abs()).max(1e-3),
                    "{direction:?} coordinate {j}: {} vs {numeric}",
                    grad.data()[j]
                );
            }
        }
    }

    #[test]
    fn mse_hand_values_and_oracle() {
        let a = unit_rows::<f64>(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);

        let vhat = unit_rows::<f64>(vec![vec![3.0, 4.0]]);
        let v = unit_rows::<f64>(vec![vec![0.0, 0.0]]);
        let (loss, grad) = mse_loss(&vhat, &v).unwrap();
        assert_eq!(loss, 25.0);
        assert_eq!(grad.data(), &[6.0, 8.0]); // (2/B) * diff

        let mut rng = SplitMix64::new(23);
        let (b, k) = (4usize, 6usize);
        let x: Vec<f64> = (0..b * k).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..b * k).map(|_| rng.normal()).collect();
        let (loss, _) = mse_loss(
            &RealTensor::new(vec![b, k], x.clone()).unwrap(),
            &RealTensor::new(vec![b, k], y.clone()).unwrap(),
        )
        .unwrap();
        let mut want = 0.0;
        for j in 0..b * k {
            want += (x[j] - y[j]) * (x[j] - y[j]);
        }
        want /= b as f64;
        assert!((loss - want).abs() <= 1e-10);
    }

    #[test]
    fn total_loss_is_additive_in_alpha() {
        let f = unit_rows::<f64>(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = unit_rows::<f64>(vec![vec![0.8, 0.1], vec![0.2, 0.7]]);
        let base = LossConfig {
            tau: 1.0,
            alpha: 0.0,
            direction: LossDirection::Symmetric,
        };
        let (contr, g0) = total_loss(&f, &v, &base).unwrap();
        let (contr_only, gc) = contrastive_loss(&f, &v, &base).unwrap();
        assert_eq!(contr, contr_only, "alpha = 0 must be pure contrastive");
        assert_eq!(g0.data(), gc.data());

        let (mse, _) = mse_loss(&f, &v).unwrap();
        for alpha in [0.5, 1.0] {
            let cfg = LossConfig { alpha, ..base };
            let (tot, _) = total_loss(&f, &v, &cfg).unwrap();
            assert!((tot - (contr + alpha * mse)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gradient_zeroes_every_parameter() {
        let model = DftBackbone::<f64>::init(grad_test_config(), 31).unwrap();
        let x: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 - 0.4).collect();
        let trace = model.forward_traced(&x).unwrap();
        let grads = model.backward(&trace, &RealTensor::zeros(vec![3, 4]));
        grads.for_each_param(|name, data| {
            assert!(
                data.iter().all(|v| *v == 0.0),
                "{name} has nonzero gradient from zero upstream"
            );
        });
    }

    #[test]
    fn dft_gradient_is_the_inverse_transform_adjoint() {
        // Loss g(X) = sum(a_re . X_re + a_im . X_im) over X = dft(t) for
        // real t. The analytic gradient n * Re(idft(a)) must match central
        // differences through the actual transform.
        let (n, d) = (6usize, 2usize);
        let mut rng = SplitMix64::new(24);
        let t0: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a_re: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a_im: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |t: &[f64]| -> f64 {
            let x = dft_1d(&RealTensor::new(vec![n, d], t.to_vec()).unwrap());
            let mut l = 0.0;
            for j in 0..n * d {
                l += a_re[j] * x.re()[j] + a_im[j] * x.im()[j];
            }
            l
        };
        let a = crate::tensor::ComplexTensor::new(vec![n, d], a_re.clone(), a_im.clone()).unwrap();
        let adj = idft_1d(&a);
        for j in 0..n * d {
            let analytic = n as f64 * adj.re()[j];
            let h = 1e-5;
            let mut up = t0.clone();
            up[j] += h;
            let mut dn = t0.clone();
            dn[j] -= h;
            let numeric = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() <= 1e-8 * numeric.abs().max(1.0),
                "coordinate {j}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn grad_check_passes_on_the_full_tiny_backbone() {
        let model = DftBackbone::<f64>::init(grad_test_config(), 33).unwrap();
        assert!(model.param_count() <= 500, "meant to be a tiny model");
        let (xs, vs) = random_pairs(10, 12, 3, 34);
        let xs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let vs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let cfg = LossConfig {
            tau: 1.0,
            alpha: 0.5,
            direction: LossDirection::Symmetric,
        };
        let report = grad_check(&model, &xs, &vs, &cfg, 1e-6).unwrap();
        assert!(
            report.pass,
            "max rel err {} at {}[{}]",
            report.max_rel_err, report.worst_param, report.worst_index
        );
    }

    #[test]
    fn grad_check_is_roundoff_exact_for_an_affine_model() {
        // Zero filters + identity activation + no normalization make the
        // model affine in its parameters along any single coordinate, and a
        // pure quadratic loss is differenced exactly by central differences.
        let cfg = BackboneConfig {
            voxel_len: 8,
            patch_size: 2,
            embed_dim: 3,
            depth: 1,
            filter_count: 1,
            out_tokens: 2,
            variant: Variant::Hidden,
            activation_slope: 1.0,
            layer_norm: false,
            residual: true,
            mlp_hidden: 0,
        };
        let mut model = DftBackbone::<f64>::init(cfg, 35).unwrap();
        let (re, im) = model.blocks[0].filters.planes_mut();
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v = 0.0);

        let (xs, vs) = random_pairs(8, 6, 2, 36);
        let xs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let vs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();

        // Reconstruction-only loss, assembled from public pieces.
        let quad_loss = |m: &DftBackbone<f64>| -> Result<f64, TrainError> {
            let mut f_data = Vec::new();
            for x in &xs {
                f_data.extend_from_slice(m.forward(x)?.data());
            }
            let f = RealTensor::new(vec![2, 6], f_data).unwrap();
            let v = stack_targets(&vs, 6)?;
            Ok(mse_loss(&f, &v)?.0)
        };
        let mut analytic = model.zeros_like();
        {
            let mut f_data = Vec::new();
            let mut traces = Vec::new();
            for x in &xs {
                let tr = model.forward_traced(x).unwrap();
                f_data.extend_from_slice(tr.output.data());
                traces.push(tr);
            }
            let f = RealTensor::new(vec![2, 6], f_data).unwrap();
            let v = stack_targets(&vs, 6).unwrap();
            let (_, g_f) = mse_loss(&f, &v).unwrap();
            for (s_i, tr) in traces.iter().enumerate() {
                let g_out = RealTensor::new(vec![2, 3], g_f.row(s_i).to_vec()).unwrap();
                analytic.axpy_params(1.0, &model.backward(tr, &g_out));
            }
        }
        let report = compare_gradients(&model, &analytic, quad_loss, 1e-8).unwrap();
        assert!(
            report.pass,
            "max rel err {} at {}[{}]",
            report.max_rel_err, report.worst_param, report.worst_index
        );
    }

    #[test]
    fn grad_check_flags_a_corrupted_coordinate() {
        let model = DftBackbone::<f64>::init(grad_test_config(), 37).unwrap();
        let (xs, vs) = random_pairs(10, 12, 3, 38);
        let xs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let vs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let cfg = LossConfig {
            tau: 1.0,
            alpha: 0.5,
            direction: LossDirection::Symmetric,
        };
        let (_, mut grads) = batch_gradients(&model, &xs, &vs, &cfg).unwrap();

        // Corrupt the largest-magnitude filter gradient by 1%.
        let target = "blocks.0.filters.re";
        let mut coord = 0usize;
        grads.for_each_param_mut(|name, slice| {
            if name == target {
                let mut best = 0usize;
                for (j, v) in slice.iter().enumerate() {
                    if v.abs() > slice[best].abs() {
                        best = j;
                    }
                }
                slice[best] = slice[best] * 1.01;
                coord = best;
            }
        });
        let report =
            compare_gradients(&model, &grads, |m| batch_loss(m, &xs, &vs, &cfg), 1e-6).unwrap();
        assert!(!report.pass, "1% corruption must fail a 1e-6 gate");
        assert_eq!(report.worst_param, target);
        assert_eq!(report.worst_index, coord);
    }

    #[test]
    fn optimizer_hand_recursion_first_step() {
        // One step with g=1 everywhere, wd=0: m_hat = 1, v_hat = 1, so every
        // parameter moves by exactly lr / (1 + eps).
        let mut model = DftBackbone::<f64>::init(grad_test_config(), 39).unwrap();
        let before: Vec<f64> = {
            let mut v = Vec::new();
            model.for_each_param(|_, slice| v.extend_from_slice(slice));
            v
        };
        let mut grads = model.zeros_like();
        grads.for_each_param_mut(|_, slice| slice.iter_mut().for_each(|g| *g = 1.0));
        let hyper = OptimizerHyper {
            weight_decay: 0.0,
            ..OptimizerHyper::default()
        };
        let mut opt = OptimizerState::new(hyper, model.param_count());
        opt.step(&mut model, &grads).unwrap();
        let expected_delta = 1e-3 * (1.0 / (1.0 + 1e-8));
        let mut idx = 0;
        model.for_each_param(|name, slice| {
            for v in slice {
                let delta = before[idx] - v;
                assert!(
                    (delta - expected_delta).abs() < 1e-15,
                    "{name}: moved {delta}, want {expected_delta}"
                );
                idx += 1;
            }
        });
    }

    #[test]
    fn optimizer_pure_decay_contracts_parameters() {
        let cfg = grad_test_config();
        let mut model = DftBackbone::<f64>::init(cfg, 40).unwrap();
        model.for_each_param_mut(|_, slice| slice.iter_mut().for_each(|v| *v = 1.0));
        let zeros = model.zeros_like();
        let mut opt = OptimizerState::new(OptimizerHyper::default(), model.param_count());
        opt.step(&mut model, &zeros).unwrap();
        model.for_each_param(|name, slice| {
            for v in slice {
                assert!((*v - 0.993).abs() < 1e-15, "{name}: {v} after pure decay");
            }
        });
    }

    #[test]
    fn optimizer_aborts_on_non_finite_update() {
        let mut model = DftBackbone::<f64>::init(grad_test_config(), 41).unwrap();
        let mut grads = model.zeros_like();
        grads.for_each_param_mut(|name, slice| {
            if name == "embedder.bias" {
                slice[0] = f64::INFINITY;
            }
        });
        let mut opt = OptimizerState::new(OptimizerHyper::default(), model.param_count());
        match opt.step(&mut model, &grads).unwrap_err() {
            TrainError::NonFiniteUpdate { name } => assert_eq!(name, "embedder.bias"),
            other => panic!("wrong error: {other:?}"),
        }
    }

    fn separable_task(
        voxel_len: usize,
        out_len: usize,
        n_train: usize,
        n_eval: usize,
        seed: u64,
    ) -> (Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut rng = SplitMix64::new(seed);
        let map: Vec<f64> = (0..voxel_len * out_len).map(|_| rng.normal()).collect();
        let mut make = |count: usize| -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
            let mut xs = Vec::new();
            let mut vs = Vec::new();
            for _ in 0..count {
                let mut v: Vec<f64> = (0..out_len).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter_mut().for_each(|a| *a /= norm);
                let x: Vec<f32> = (0..voxel_len)
                    .map(|r| {
                        (0..out_len)
                            .map(|c| map[r * out_len + c] * v[c])
                            .sum::<f64>() as f32
                    })
                    .collect();
                xs.push(x);
                vs.push(v.iter().map(|&a| a as f32).collect());
            }
            (xs, vs)
        };
        let (tx, tv) = make(n_train);
        let (ex, ev) = make(n_eval);
        (tx, tv, ex, ev)
    }

    fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            seed,
            loss: LossConfig::default(),
            optimizer: OptimizerHyper {
                weight_decay: 0.0,
                ..OptimizerHyper::default()
            },
            timing: false,
        }
    }

    fn small_train_model(seed: u64) -> DftBackbone<f32> {
        // The channel MLP matters here: the frequency stages mix along the
        // token axis only, so without it the model cannot realize a general
        // voxel-to-target linear map.
        DftBackbone::<f32>::init(
            BackboneConfig {
                voxel_len: 24,
                patch_size: 6,
                embed_dim: 6,
                depth: 2,
                filter_count: 2,
                out_tokens: 2,
                variant: Variant::Hidden,
                activation_slope: 0.01,
                layer_norm: true,
                residual: true,
                mlp_hidden: 16,
            },
            seed,
        )
        .unwrap()
    }

    fn as_refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn lr_zero_epoch_leaves_parameters_untouched() {
        let (tx, tv, ex, ev) = separable_task(24, 12, 10, 4, 50);
        let mut model = small_train_model(51);
        let before: Vec<f32> = {
            let mut v = Vec::new();
            model.for_each_param(|_, s| v.extend_from_slice(s));
            v
        };
        let mut cfg = train_cfg(1, 52);
        cfg.optimizer.lr = 0.0;
        let initial_loss = {
            let xs = as_refs(&tx);
            let vs = as_refs(&tv);
            // Whole-set loss at init, batched the same way the loop batches.
            batch_loss(&model, &xs[..8], &vs[..8], &cfg.loss).unwrap()
        };
        let out = train(
            &mut model,
            &as_refs(&tx),
            &as_refs(&tv),
            &as_refs(&ex),
            &as_refs(&ev),
            &cfg,
            None,
        )
        .unwrap();
        let after: Vec<f32> = {
            let mut v = Vec::new();
            model.for_each_param(|_, s| v.extend_from_slice(s));
            v
        };
        assert_eq!(before, after, "lr = 0 must not move parameters");
        // The reported loss is an average over the epoch's batches; with
        // frozen parameters every batch sees the init model.
        assert!(out.history[0].train_loss.is_finite());
        assert!(initial_loss.is_finite());
    }

    #[test]
    fn same_seed_replays_bit_identical_curves() {
        let (tx, tv, ex, ev) = separable_task(24, 12, 12, 5, 53);
        let run = || -> String {
            let mut model = small_train_model(54);
            let out = train(
                &mut model,
                &as_refs(&tx),
                &as_refs(&tv),
                &as_refs(&ex),
                &as_refs(&ev),
                &train_cfg(3, 55),
                None,
            )
            .unwrap();
            loss_csv(&out.history)
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.starts_with("epoch,train_loss,eval_top1_fwd,eval_top1_bwd,wall_seconds\n"));
        for line in a.lines().skip(1) {
            assert!(line.ends_with(",0"), "timing off must zero wall_seconds: {line}");
        }
    }

    #[test]
    fn training_improves_separable_retrieval() {
        let (tx, tv, ex, ev) = separable_task(24, 12, 256, 12, 56);
        let mut model = small_train_model(57);
        let mut cfg = train_cfg(30, 58);
        cfg.batch_size = 16;
        cfg.optimizer.lr = 5e-3;
        // A mild temperature keeps the softmax informative on a 12-item
        // eval set; the extreme default is tuned for much larger batches.
        cfg.loss.tau = 0.05;
        let out = train(
            &mut model,
            &as_refs(&tx),
            &as_refs(&tv),
            &as_refs(&ex),
            &as_refs(&ev),
            &cfg,
            None,
        )
        .unwrap();
        let first = &out.history[0];
        let last = out.history.last().unwrap();
        let mean = |s: &EpochStats| (s.eval_top1_fwd + s.eval_top1_bwd) / 2.0;
        assert!(
            mean(last) >= mean(first),
            "eval regressed: {} -> {}",
            mean(first),
            mean(last)
        );
        assert!(
            out.best_eval >= 0.75,
            "separable task should retrieve well, got {}",
            out.best_eval
        );
        assert!(
            last.train_loss < first.train_loss,
            "loss did not decrease: {} -> {}",
            first.train_loss,
            last.train_loss
        );
    }

    #[test]
    fn trailing_singleton_batch_is_folded_in() {
        // 9 items at batch 4 leaves a 1-sample tail; the loop must fold it
        // into the previous batch rather than fail the contrastive minimum.
        let (tx, tv, ex, ev) = separable_task(24, 12, 9, 2, 59);
        let mut model = small_train_model(60);
        let mut cfg = train_cfg(1, 61);
        cfg.batch_size = 4;
        let out = train(
            &mut model,
            &as_refs(&tx),
            &as_refs(&tv),
            &as_refs(&ex),
            &as_refs(&ev),
            &cfg,
            None,
        );
        assert!(out.is_ok(), "{:?}", out.err());
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_train_model(62);
        let loss = LossConfig::default();
        let hyper = OptimizerHyper::default();
        let manifest = save_checkpoint(
            dir.path(),
            &model,
            CheckpointMeta {
                loss: &loss,
                optimizer: &hyper,
                seed: 63,
                epoch: 4,
                eval_top1: 0.875,
            },
        )
        .unwrap();
        assert_eq!(manifest.dtype, "f32");
        assert_eq!(manifest.seed, 63);

        let (loaded, read_back) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(read_back.epoch, 4);
        assert_eq!(read_back.eval_top1, 0.875);
        let collect = |m: &DftBackbone<f32>| -> Vec<f32> {
            let mut v = Vec::new();
            m.for_each_param(|_, s| v.extend_from_slice(s));
            v
        };
        assert_eq!(collect(&model), collect(&loaded));
    }

    #[test]
    fn checkpoint_load_rejects_wrong_dtype_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_train_model(64);
        let loss = LossConfig::default();
        let hyper = OptimizerHyper::default();
        save_checkpoint(
            dir.path(),
            &model,
            CheckpointMeta {
                loss: &loss,
                optimizer: &hyper,
                seed: 0,
                epoch: 1,
                eval_top1: 0.0,
            },
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()).unwrap_err(),
            TrainError::BadCheckpoint { .. }
        ));
        std::fs::remove_file(dir.path().join("embedder.pos.lmnd")).unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }

    #[test]
    fn train_saves_the_best_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (tx, tv, ex, ev) = separable_task(24, 12, 16, 8, 65);
        let mut model = small_train_model(66);
        let out = train(
            &mut model,
            &as_refs(&tx),
            &as_refs(&tv),
            &as_refs(&ex),
            &as_refs(&ev),
            &train_cfg(4, 67),
            Some(dir.path()),
        )
        .unwrap();
        let (_, manifest) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(manifest.epoch, out.best_epoch);
        assert_eq!(manifest.eval_top1, out.best_eval);
        assert_eq!(manifest.seed, 67);
    }
}
