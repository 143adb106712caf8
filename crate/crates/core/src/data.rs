//! On-disk formats and dataset assembly: a minimal binary tensor container,
//! JSON dataset manifests, trial averaging, and a seeded synthetic dataset
//! generator used for end-to-end checks.
//!
//! Tensor container layout (all integers little-endian):
//!   magic    4 bytes  "LMND"
//!   version  u16      currently 1
//!   dtype    u8       0 = f32, 1 = f64
//!   ndim     u8
//!   dims     ndim x u64
//!   payload  row-major scalars, little-endian
//! Writing then reading a tensor reproduces it bit for bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::{EmbeddingStore, RetrievalError};
use crate::rng::SplitMix64;
use crate::tensor::{Dtype, RealTensor, Scalar, ShapeError};

pub const TENSOR_MAGIC: [u8; 4] = *b"LMND";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"LMND\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported container version {found}")]
    BadVersion { path: PathBuf, found: u16 },
    #[error("{path}: unknown dtype code {code}")]
    BadDtype { path: PathBuf, code: u8 },
    #[error("{path}: header truncated ({got} of {needed} bytes)")]
    HeaderTruncated {
        path: PathBuf,
        needed: usize,
        got: usize,
    },
    #[error("{path}: payload has {actual} bytes, dims imply {expected}")]
    PayloadSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: dims {dims:?} overflow")]
    ShapeOverflow { path: PathBuf, dims: Vec<u64> },
    #[error("{path}: {source}")]
    Shape {
        path: PathBuf,
        source: ShapeError,
    },
    #[error("manifest {path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
    #[error("manifest {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("trial averaging over an empty set")]
    EmptyTrials,
    #[error("trial {index} has length {got}, expected {expected}")]
    TrialLength {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Store(#[from] RetrievalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

pub fn encode_tensor<S: Scalar>(t: &RealTensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.shape().len() + t.len() * S::DTYPE.byte_width());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(S::DTYPE.code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &RealTensor<S>) -> Result<(), DataError> {
    let bytes = encode_tensor(t);
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

/// A tensor read back from disk, tagged by its stored precision.
#[derive(Debug, Clone)]
pub enum LoadedTensor {
    F32(RealTensor<f32>),
    F64(RealTensor<f64>),
}

impl LoadedTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            LoadedTensor::F32(t) => t.shape(),
            LoadedTensor::F64(t) => t.shape(),
        }
    }

    /// Widening conversion; exact for f32 payloads.
    pub fn into_f64(self) -> RealTensor<f64> {
        match self {
            LoadedTensor::F32(t) => t.map(|v| v as f64),
            LoadedTensor::F64(t) => t,
        }
    }

    /// Narrowing conversion; lossy for f64 payloads.
    pub fn into_f32(self) -> RealTensor<f32> {
        match self {
            LoadedTensor::F32(t) => t,
            LoadedTensor::F64(t) => t.map(|v| v as f32),
        }
    }
}

pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<LoadedTensor, DataError> {
    let need = |n: usize| -> Result<(), DataError> {
        if bytes.len() < n {
            Err(DataError::HeaderTruncated {
                path: path.to_path_buf(),
                needed: n,
                got: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(8)?;
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != TENSOR_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(DataError::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let dtype = Dtype::from_code(bytes[6]).ok_or(DataError::BadDtype {
        path: path.to_path_buf(),
        code: bytes[6],
    })?;
    let ndim = bytes[7] as usize;
    need(8 + 8 * ndim)?;
    let mut dims_u64 = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 8 * i;
        dims_u64.push(u64::from_le_bytes(
            bytes[off..off + 8].try_into().expect("8-byte slice"),
        ));
    }
    let mut count: u64 = 1;
    for &d in &dims_u64 {
        count = count.checked_mul(d).ok_or_else(|| DataError::ShapeOverflow {
            path: path.to_path_buf(),
            dims: dims_u64.clone(),
        })?;
    }
    let payload = &bytes[8 + 8 * ndim..];
    let expected = count
        .checked_mul(dtype.byte_width() as u64)
        .ok_or_else(|| DataError::ShapeOverflow {
            path: path.to_path_buf(),
            dims: dims_u64.clone(),
        })?;
    if payload.len() as u64 != expected {
        return Err(DataError::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() as u64,
        });
    }
    let shape: Vec<usize> = dims_u64.iter().map(|&d| d as usize).collect();
    let wrap_shape = |source: ShapeError| DataError::Shape {
        path: path.to_path_buf(),
        source,
    };
    match dtype {
        Dtype::F32 => {
            let data: Vec<f32> = payload.chunks_exact(4).map(f32::read_le).collect();
            Ok(LoadedTensor::F32(
                RealTensor::new(shape, data).map_err(wrap_shape)?,
            ))
        }
        Dtype::F64 => {
            let data: Vec<f64> = payload.chunks_exact(8).map(f64::read_le).collect();
            Ok(LoadedTensor::F64(
                RealTensor::new(shape, data).map_err(wrap_shape)?,
            ))
        }
    }
}

pub fn read_tensor(path: &Path) -> Result<LoadedTensor, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    decode_tensor(path, &bytes)
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One presented trial: which stimulus, which file, and which row of that
/// file (files may hold a single vector or a [trials, voxel_len] stack).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub stimulus_id: String,
    pub voxel_file: String,
    pub trial_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingFiles {
    pub tensor: String,
    pub ids: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subject: String,
    pub split: Split,
    pub voxel_len: usize,
    pub records: Vec<TrialRecord>,
    /// Embedding spaces by name; "hidden" and "cls" are what the models use,
    /// "class_prompts" carries zero-shot class centers.
    #[serde(default)]
    pub embeddings: BTreeMap<String, EmbeddingFiles>,
    /// stimulus id -> class id (a row of the class_prompts store).
    #[serde(default)]
    pub class_labels: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }
}

// ---------------------------------------------------------------------------
// Trial averaging
// ---------------------------------------------------------------------------

/// Elementwise mean over repeated presentations of one stimulus, accumulated
/// in f64.
pub fn average_trials<S: Scalar>(trials: &[&[S]]) -> Result<Vec<S>, DataError> {
    let first = trials.first().ok_or(DataError::EmptyTrials)?;
    let len = first.len();
    let mut acc = vec![0.0f64; len];
    for (index, t) in trials.iter().enumerate() {
        if t.len() != len {
            return Err(DataError::TrialLength {
                index,
                expected: len,
                got: t.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(t.iter()) {
            *a += v.as_f64();
        }
    }
    let inv = 1.0 / trials.len() as f64;
    Ok(acc.into_iter().map(|a| S::from_f64(a * inv)).collect())
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// A manifest resolved into memory. Test splits hold one voxel row per
/// stimulus (trials averaged); train splits keep every trial as its own row,
/// so `voxel_ids` may repeat there.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub voxel_ids: Vec<String>,
    /// [rows, voxel_len]
    pub voxels: RealTensor<f32>,
    pub hidden: Option<EmbeddingStore<f32>>,
    pub cls: Option<EmbeddingStore<f32>>,
    pub class_prompts: Option<EmbeddingStore<f32>>,
}

impl Dataset {
    /// Target rows from `store` aligned with `voxel_ids`, for training and
    /// evaluation against a chosen embedding space.
    pub fn targets_from<'a>(
        &self,
        store: &'a EmbeddingStore<f32>,
    ) -> Result<Vec<&'a [f32]>, DataError> {
        self.voxel_ids
            .iter()
            .map(|id| {
                store
                    .position(id)
                    .map(|p| store.row(p))
                    .ok_or_else(|| RetrievalError::UnknownId(id.clone()).into())
            })
            .collect()
    }

    /// Voxel rows re-keyed as an embedding store (valid for test splits
    /// where stimulus ids are unique).
    pub fn voxel_store(&self) -> Result<EmbeddingStore<f32>, RetrievalError> {
        EmbeddingStore::new(
            self.voxel_ids.clone(),
            vec![self.manifest.voxel_len],
            self.voxels.data().to_vec(),
        )
    }
}

fn load_embedding_store(
    dir: &Path,
    files: &EmbeddingFiles,
) -> Result<EmbeddingStore<f32>, DataError> {
    let tensor_path = dir.join(&files.tensor);
    let ids_path = dir.join(&files.ids);
    if !tensor_path.exists() {
        return Err(DataError::MissingFile(tensor_path));
    }
    if !ids_path.exists() {
        return Err(DataError::MissingFile(ids_path));
    }
    let tensor = read_tensor(&tensor_path)?.into_f32();
    let ids: Vec<String> = std::fs::read_to_string(&ids_path)
        .map_err(io_err(&ids_path))?
        .lines()
        .map(str::to_string)
        .collect();
    Ok(EmbeddingStore::from_tensor(ids, &tensor)?)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let invalid = |reason: String| DataError::Invalid {
        path: manifest_path.to_path_buf(),
        reason,
    };

    if manifest.voxel_len == 0 {
        return Err(invalid("voxel_len must be positive".into()));
    }
    if manifest.records.is_empty() {
        return Err(invalid("manifest has no trial records".into()));
    }

    // Load each referenced voxel file once; validate shape against the
    // manifest's voxel_len.
    let mut cache: BTreeMap<&str, RealTensor<f32>> = BTreeMap::new();
    for rec in &manifest.records {
        if cache.contains_key(rec.voxel_file.as_str()) {
            continue;
        }
        let path = dir.join(&rec.voxel_file);
        if !path.exists() {
            return Err(DataError::MissingFile(path));
        }
        let t = read_tensor(&path)?.into_f32();
        let ok = match t.shape() {
            [l] => *l == manifest.voxel_len,
            [_, l] => *l == manifest.voxel_len,
            _ => false,
        };
        if !ok {
            return Err(invalid(format!(
                "{}: voxel tensor shape {:?} does not match voxel_len {}",
                rec.voxel_file,
                t.shape(),
                manifest.voxel_len
            )));
        }
        cache.insert(rec.voxel_file.as_str(), t);
    }

    let trial_row = |rec: &TrialRecord| -> Result<Vec<f32>, DataError> {
        let t = &cache[rec.voxel_file.as_str()];
        match t.shape() {
            [_] => {
                if rec.trial_index != 0 {
                    Err(invalid(format!(
                        "{}: trial_index {} into a single-trial file",
                        rec.voxel_file, rec.trial_index
                    )))
                } else {
                    Ok(t.data().to_vec())
                }
            }
            [rows, _] => {
                if rec.trial_index >= *rows {
                    Err(invalid(format!(
                        "{}: trial_index {} out of range ({} trials)",
                        rec.voxel_file, rec.trial_index, rows
                    )))
                } else {
                    Ok(t.row(rec.trial_index).to_vec())
                }
            }
            _ => unreachable!("shape validated above"),
        }
    };

    let (voxel_ids, rows): (Vec<String>, Vec<Vec<f32>>) = match manifest.split {
        Split::Train => {
            // Every trial is its own training row.
            let mut ids = Vec::with_capacity(manifest.records.len());
            let mut rows = Vec::with_capacity(manifest.records.len());
            for rec in &manifest.records {
                ids.push(rec.stimulus_id.clone());
                rows.push(trial_row(rec)?);
            }
            (ids, rows)
        }
        Split::Test => {
            // Group trials by stimulus in first-appearance order, average.
            let mut order: Vec<&str> = Vec::new();
            let mut groups: BTreeMap<&str, Vec<Vec<f32>>> = BTreeMap::new();
            for rec in &manifest.records {
                if !groups.contains_key(rec.stimulus_id.as_str()) {
                    order.push(&rec.stimulus_id);
                }
                groups
                    .entry(rec.stimulus_id.as_str())
                    .or_default()
                    .push(trial_row(rec)?);
            }
            let mut ids = Vec::with_capacity(order.len());
            let mut rows = Vec::with_capacity(order.len());
            for id in order {
                let trials = &groups[id];
                let views: Vec<&[f32]> = trials.iter().map(Vec::as_slice).collect();
                ids.push(id.to_string());
                rows.push(average_trials(&views)?);
            }
            (ids, rows)
        }
    };

    let n = rows.len();
    let voxels = RealTensor::new(
        vec![n, manifest.voxel_len],
        rows.into_iter().flatten().collect(),
    )
    .map_err(|source| DataError::Shape {
        path: manifest_path.to_path_buf(),
        source,
    })?;

    let load_space = |name: &str| -> Result<Option<EmbeddingStore<f32>>, DataError> {
        match manifest.embeddings.get(name) {
            None => Ok(None),
            Some(files) => {
                let store = load_embedding_store(&dir, files)?;
                // Every stimulus must have a target in the store.
                for id in &voxel_ids {
                    if store.position(id).is_none() && name != "class_prompts" {
                        return Err(invalid(format!(
                            "embedding space {name:?} is missing stimulus {id:?}"
                        )));
                    }
                }
                Ok(Some(store))
            }
        }
    };

    let hidden = load_space("hidden")?;
    let cls = load_space("cls")?;
    let class_prompts = load_space("class_prompts")?;

    if !manifest.class_labels.is_empty() {
        if let Some(prompts) = &class_prompts {
            for (id, label) in &manifest.class_labels {
                if prompts.position(label).is_none() {
                    return Err(invalid(format!(
                        "label {label:?} for stimulus {id:?} has no prompt row"
                    )));
                }
            }
        }
    }

    Ok(Dataset {
        manifest,
        voxel_ids,
        voxels,
        hidden,
        cls,
        class_prompts,
    })
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Recipe for a linearly generated voxel/embedding dataset: target rows are
/// unit-normalized Gaussians, voxels are a fixed seeded linear response to
/// the target grid plus Gaussian noise. `map_seed` pins the response operator
/// (and class centers), `noise_seed` pins the per-item draws, so train and
/// test splits built with different noise seeds share the same underlying map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub voxel_len: usize,
    /// [tokens, dim] for grid targets or [dim] for flat vectors.
    pub embed_shape: Vec<usize>,
    pub noise_sigma: f64,
    pub map_seed: u64,
    pub noise_seed: u64,
    /// 0 = free-form pairs; otherwise items cluster tightly around this many
    /// unit class centers and a class_prompts store + labels are emitted.
    #[serde(default)]
    pub class_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub embed_size: usize,
}

fn normalize_in_place(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: &str| DataError::Invalid {
            path: PathBuf::from("<synthetic spec>"),
            reason: reason.to_string(),
        };
        if self.n_train == 0 && self.n_test == 0 {
            return Err(bad("need at least one item"));
        }
        if self.voxel_len == 0 {
            return Err(bad("voxel_len must be positive"));
        }
        if self.embed_shape.is_empty() || self.embed_shape.iter().any(|&e| e == 0) {
            return Err(bad("embed_shape must be non-empty with positive extents"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(bad("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }

    fn embed_size(&self) -> usize {
        self.embed_shape.iter().product()
    }

    fn cls_dim(&self) -> usize {
        *self.embed_shape.last().expect("validated non-empty")
    }
}

/// The ground-truth voxel response operator: voxels come in contiguous
/// groups of `d` (the target grid's channel width); each group reads its own
/// mixture of the target's rows and pushes it through one shared channel-to-
/// voxel map. The operator stays linear — an ordinary least-squares fit
/// recovers it — but its factored form gives it finite complexity (a few
/// thousand coefficients rather than voxel_len x embed_size), so a model
/// trained on a few hundred pairs has something generalizable to find.
/// With unit-variance factors and unit-norm targets the clean response has
/// unit variance per voxel, making `noise_sigma` a direct noise-to-signal
/// ratio.
struct SynthMap {
    /// [n_groups, n_rows]: weight of each target row in each voxel group.
    token_mix: Vec<f64>,
    /// [d, d] row-major by within-group voxel position: row q holds the
    /// channel weights read by voxel q of each group.
    channel_map: Vec<f64>,
    n_rows: usize,
    d: usize,
    voxel_len: usize,
}

impl SynthMap {
    fn draw(spec: &SyntheticSpec) -> Self {
        let d = spec.cls_dim();
        let n_rows = spec.embed_size() / d;
        let n_groups = spec.voxel_len.div_ceil(d);
        let mut rng = SplitMix64::substream(spec.map_seed, 0);
        let token_mix = (0..n_groups * n_rows).map(|_| rng.normal()).collect();
        let channel_map = (0..d * d).map(|_| rng.normal()).collect();
        Self {
            token_mix,
            channel_map,
            n_rows,
            d,
            voxel_len: spec.voxel_len,
        }
    }

    /// Append the clean (noise-free) voxel response for one flattened target.
    fn respond(&self, v: &[f64], out: &mut Vec<f64>) {
        let (d, n_rows) = (self.d, self.n_rows);
        let mut mixed = vec![0.0; d];
        for g in 0..self.voxel_len.div_ceil(d) {
            let mix = &self.token_mix[g * n_rows..(g + 1) * n_rows];
            for (c, m) in mixed.iter_mut().enumerate() {
                *m = (0..n_rows).map(|r| mix[r] * v[r * d + c]).sum::<f64>();
            }
            let width = d.min(self.voxel_len - g * d);
            for q in 0..width {
                let col = &self.channel_map[q * d..(q + 1) * d];
                out.push(mixed.iter().zip(col).map(|(m, w)| m * w).sum());
            }
        }
    }
}

struct SplitData {
    ids: Vec<String>,
    voxels: Vec<f32>,          // n x voxel_len
    hidden: Vec<f32>,          // n x embed_size
    cls: Vec<f32>,             // n x cls_dim
    labels: BTreeMap<String, String>,
}

fn generate_split(
    spec: &SyntheticSpec,
    map: &SynthMap,
    centers: &[Vec<f64>],
    prefix: &str,
    n: usize,
    noise_stream: u64,
) -> SplitData {
    let k = spec.embed_size();
    let d = spec.cls_dim();
    let mut rng = SplitMix64::substream(spec.noise_seed, noise_stream);
    let mut out = SplitData {
        ids: Vec::with_capacity(n),
        voxels: Vec::with_capacity(n * spec.voxel_len),
        hidden: Vec::with_capacity(n * k),
        cls: Vec::with_capacity(n * d),
        labels: BTreeMap::new(),
    };
    for i in 0..n {
        let id = format!("{prefix}_{i:05}");
        // Target embedding.
        let mut v: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        if !centers.is_empty() {
            let c = i % centers.len();
            let spread = 0.05 / (k as f64).sqrt();
            for (vj, cj) in v.iter_mut().zip(&centers[c]) {
                *vj = cj + spread * *vj;
            }
            out.labels.insert(id.clone(), format!("class_{c:03}"));
        }
        normalize_in_place(&mut v);
        // Voxel response: shared linear operator plus per-voxel noise.
        let mut clean = Vec::with_capacity(spec.voxel_len);
        map.respond(&v, &mut clean);
        out.voxels
            .extend(clean.iter().map(|&c| (c + spec.noise_sigma * rng.normal()) as f32));
        // cls view: unit-normalized leading row of the target grid.
        let mut cls: Vec<f64> = v[..d].to_vec();
        normalize_in_place(&mut cls);
        out.hidden.extend(v.iter().map(|&x| x as f32));
        out.cls.extend(cls.iter().map(|&x| x as f32));
        out.ids.push(id);
    }
    out
}

fn write_split(
    spec: &SyntheticSpec,
    dir: &Path,
    split: Split,
    subject: &str,
    data: SplitData,
    centers: &[Vec<f64>],
) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n = data.ids.len();
    let mut embed_dims = vec![n];
    embed_dims.extend_from_slice(&spec.embed_shape);

    write_tensor(
        &dir.join("voxels.lmnd"),
        &RealTensor::new(vec![n, spec.voxel_len], data.voxels).expect("voxel rows consistent"),
    )?;
    write_tensor(
        &dir.join("emb_hidden.lmnd"),
        &RealTensor::new(embed_dims, data.hidden).expect("hidden rows consistent"),
    )?;
    write_tensor(
        &dir.join("emb_cls.lmnd"),
        &RealTensor::new(vec![n, spec.cls_dim()], data.cls).expect("cls rows consistent"),
    )?;
    let ids_text = data.ids.join("\n") + "\n";
    std::fs::write(dir.join("ids.txt"), &ids_text).map_err(io_err(dir))?;

    let mut embeddings = BTreeMap::new();
    for name in ["hidden", "cls"] {
        embeddings.insert(
            name.to_string(),
            EmbeddingFiles {
                tensor: format!("emb_{name}.lmnd"),
                ids: "ids.txt".to_string(),
            },
        );
    }
    if !centers.is_empty() {
        // Prompts live in the cls space: the same leading-row view items get,
        // so prompt-vs-image similarity is computed between commensurate rows.
        let d = spec.cls_dim();
        let flat: Vec<f32> = centers
            .iter()
            .flat_map(|c| {
                let mut row = c[..d].to_vec();
                normalize_in_place(&mut row);
                row.into_iter().map(|x| x as f32)
            })
            .collect();
        write_tensor(
            &dir.join("class_prompts.lmnd"),
            &RealTensor::new(vec![centers.len(), d], flat).expect("center rows consistent"),
        )?;
        let prompt_ids: String = (0..centers.len())
            .map(|c| format!("class_{c:03}\n"))
            .collect();
        std::fs::write(dir.join("class_ids.txt"), &prompt_ids).map_err(io_err(dir))?;
        embeddings.insert(
            "class_prompts".to_string(),
            EmbeddingFiles {
                tensor: "class_prompts.lmnd".to_string(),
                ids: "class_ids.txt".to_string(),
            },
        );
        debug_assert_eq!(centers[0].len(), spec.embed_size());
    }

    let manifest = DatasetManifest {
        subject: subject.to_string(),
        split,
        voxel_len: spec.voxel_len,
        records: data
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| TrialRecord {
                stimulus_id: id.clone(),
                voxel_file: "voxels.lmnd".to_string(),
                trial_index: i,
            })
            .collect(),
        embeddings,
        class_labels: data.labels,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

/// Generate train/ and test/ splits under `out_dir`. Identical specs produce
/// byte-identical trees.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthSummary, DataError> {
    spec.validate()?;
    let k = spec.embed_size();

    // The voxel response operator and class centers derive from map_seed alone.
    let map = SynthMap::draw(spec);
    let centers: Vec<Vec<f64>> = if spec.class_count > 0 {
        let mut c_rng = SplitMix64::substream(spec.map_seed, 1);
        (0..spec.class_count)
            .map(|_| {
                let mut c: Vec<f64> = (0..k).map(|_| c_rng.normal()).collect();
                normalize_in_place(&mut c);
                c
            })
            .collect()
    } else {
        Vec::new()
    };

    let train = generate_split(spec, &map, &centers, "train", spec.n_train, 0);
    let test = generate_split(spec, &map, &centers, "test", spec.n_test, 1);
    let train_manifest = write_split(spec, &out_dir.join("train"), Split::Train, "synth", train, &centers)?;
    let test_manifest = write_split(spec, &out_dir.join("test"), Split::Test, "synth", test, &centers)?;

    Ok(SynthSummary {
        train_manifest,
        test_manifest,
        n_train: spec.n_train,
        n_test: spec.n_test,
        embed_size: k,
    })
}
