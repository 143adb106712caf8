//! The CLS-space projector (a deterministic residual stack mapping voxel
//! CLS embeddings toward image CLS embeddings), an exact cosine KNN index
//! with on-disk snapshots, the two-stage retrieval that first narrows by
//! CLS and then re-ranks by full hidden-grid similarity, and a small JSON
//! wire protocol so the KNN stage can live behind an HTTP endpoint.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_tensor, write_tensor, DataError};
use crate::linalg::{add_row_bias, col_sums, layer_norm_bwd, layer_norm_fwd, leaky, leaky_grad, matmul, matmul_nt, matmul_tn, LnCache};
use crate::retrieval::{cosine_sim_flagged, EmbeddingStore, RetrievalError};
use crate::rng::SplitMix64;
use crate::tensor::{s, RealTensor, Scalar};
use crate::training::{total_loss, LossConfig, OptimizerState, ParamSet, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    BadK,
    #[error("knn index is empty")]
    EmptyIndex,
    #[error("duplicate id {0} in knn index")]
    DuplicateId(String),
    #[error("index row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("index row {row} has norm {norm}, expected unit length")]
    NotUnit { row: usize, norm: f64 },
    #[error("candidate {id} is missing from the hidden store")]
    CandidateMissing { id: String },
    #[error("unsupported metric {0:?}; only cosine is implemented")]
    BadMetric(String),
    #[error("remote endpoint returned HTTP {status}: {body}")]
    RemoteStatus { status: u16, body: String },
    #[error("remote response malformed: {0}")]
    RemoteMalformed(String),
    #[error("remote request failed: {0}")]
    RemoteTransport(String),
    #[error("remote results violate the wire contract: {0}")]
    RemoteContract(String),
    #[error("bad projector config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

// ---------------------------------------------------------------------------
// Residual CLS projector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProjBlock<S> {
    pub norm_gain: Vec<S>,
    pub norm_bias: Vec<S>,
    pub fc1_w: RealTensor<S>, // [d, d]
    pub fc1_b: Vec<S>,
    pub fc2_w: RealTensor<S>, // [d, d]
    pub fc2_b: Vec<S>,
}

/// Residual stack: x + fc2(sigma(fc1(norm(x)))) per block. The contraction
/// weights start at zero, so a freshly initialized projector is exactly the
/// identity map.
#[derive(Debug, Clone)]
pub struct ClsProjector<S> {
    pub dim: usize,
    pub slope: f64,
    pub blocks: Vec<ProjBlock<S>>,
}

pub struct ProjBlockTrace<S> {
    ln: LnCache<S>,
    normed: RealTensor<S>, // fc1 input
    z1: RealTensor<S>,     // fc1 pre-activation
    h: RealTensor<S>,      // fc1 post-activation
}

impl<S: Scalar> ClsProjector<S> {
    pub const DEFAULT_DEPTH: usize = 4;

    pub fn init(dim: usize, depth: usize, slope: f64, seed: u64) -> Result<Self, ProjectorError> {
        if dim == 0 {
            return Err(ProjectorError::BadConfig("dim must be >= 1".into()));
        }
        if depth == 0 {
            return Err(ProjectorError::BadConfig("depth must be >= 1".into()));
        }
        if !slope.is_finite() {
            return Err(ProjectorError::BadConfig("slope must be finite".into()));
        }
        let mut rng = SplitMix64::new(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let blocks = (0..depth)
            .map(|_| ProjBlock {
                norm_gain: vec![S::one(); dim],
                norm_bias: vec![S::zero(); dim],
                fc1_w: RealTensor::from_fn(vec![dim, dim], |_| {
                    s::<S>(rng.uniform(-bound, bound))
                }),
                fc1_b: (0..dim).map(|_| s::<S>(rng.uniform(-bound, bound))).collect(),
                fc2_w: RealTensor::zeros(vec![dim, dim]),
                fc2_b: vec![S::zero(); dim],
            })
            .collect();
        Ok(Self { dim, slope, blocks })
    }

    /// Batched forward over [b, d] rows with per-block traces for backward.
    pub fn forward_batch(
        &self,
        x: &RealTensor<S>,
    ) -> Result<(RealTensor<S>, Vec<ProjBlockTrace<S>>), ProjectorError> {
        if x.cols() != self.dim {
            return Err(ProjectorError::DimMismatch {
                expected: self.dim,
                actual: x.cols(),
            });
        }
        let slope = s::<S>(self.slope);
        let mut cur = x.clone();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (normed, ln) = layer_norm_fwd(&cur, &blk.norm_gain, &blk.norm_bias);
            let mut z1 = matmul(&normed, &blk.fc1_w);
            add_row_bias(&mut z1, &blk.fc1_b);
            let h = z1.map(|z| leaky(z, slope));
            let mut m = matmul(&h, &blk.fc2_w);
            add_row_bias(&mut m, &blk.fc2_b);
            cur.add_assign(&m).expect("residual branch keeps the shape");
            traces.push(ProjBlockTrace { ln, normed, z1, h });
        }
        Ok((cur, traces))
    }

    /// Single-vector convenience form.
    pub fn project(&self, f_cls: &[S]) -> Result<Vec<S>, ProjectorError> {
        let x = RealTensor::new(vec![1, f_cls.len()], f_cls.to_vec()).map_err(|_| {
            ProjectorError::DimMismatch {
                expected: self.dim,
                actual: f_cls.len(),
            }
        })?;
        Ok(self.forward_batch(&x)?.0.into_data())
    }

    /// Parameter gradients plus the gradient at the input, both batched.
    pub fn backward_batch(
        &self,
        traces: &[ProjBlockTrace<S>],
        g_out: &RealTensor<S>,
    ) -> (ClsProjector<S>, RealTensor<S>) {
        let slope = s::<S>(self.slope);
        let mut g_cur = g_out.clone();
        let mut g_blocks: Vec<ProjBlock<S>> = Vec::with_capacity(self.blocks.len());
        for (blk, tr) in self.blocks.iter().zip(traces).rev() {
            // out = x + fc2(sigma(fc1(norm(x)))): the branch sees g_cur, and
            // the residual path forwards it unchanged underneath.
            let g_m = &g_cur;
            let g_h = matmul_nt(g_m, &blk.fc2_w);
            let g_w2 = matmul_tn(&tr.h, g_m);
            let g_b2 = col_sums(g_m);
            let g_z1 = RealTensor::from_fn(tr.z1.shape().to_vec(), |j| {
                g_h.data()[j] * leaky_grad(tr.z1.data()[j], slope)
            });
            let g_normed = matmul_nt(&g_z1, &blk.fc1_w);
            let g_w1 = matmul_tn(&tr.normed, &g_z1);
            let g_b1 = col_sums(&g_z1);
            let (g_x_branch, g_gain, g_bias) = layer_norm_bwd(&tr.ln, &blk.norm_gain, &g_normed);

            g_blocks.push(ProjBlock {
                norm_gain: g_gain,
                norm_bias: g_bias,
                fc1_w: g_w1,
                fc1_b: g_b1,
                fc2_w: g_w2,
                fc2_b: g_b2,
            });
            let mut g_in = g_x_branch;
            g_in.add_assign(&g_cur).expect("residual shapes match");
            g_cur = g_in;
        }
        g_blocks.reverse();
        (
            ClsProjector {
                dim: self.dim,
                slope: self.slope,
                blocks: g_blocks,
            },
            g_cur,
        )
    }

    pub fn zeros_like(&self) -> ClsProjector<S> {
        let mut g = self.clone();
        g.visit_params_mut(&mut |_, slice| slice.iter_mut().for_each(|v| *v = S::zero()));
        g
    }

    pub fn axpy_params(&mut self, c: S, other: &Self) {
        let theirs = ParamSet::param_tensors(other);
        let mut idx = 0;
        self.visit_params_mut(&mut |name, slice| {
            let (oname, _, odata) = &theirs[idx];
            assert_eq!(name, *oname, "parameter traversal order diverged");
            for (a, &b) in slice.iter_mut().zip(odata.iter()) {
                *a = *a + c * b;
            }
            idx += 1;
        });
    }

    pub fn param_count(&self) -> usize {
        self.total_params()
    }
}

impl<S: Scalar> ParamSet<S> for ClsProjector<S> {
    fn param_tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out: Vec<(String, Vec<usize>, &[S])> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm_gain"), vec![b.norm_gain.len()], &b.norm_gain));
            out.push((format!("blocks.{i}.norm_bias"), vec![b.norm_bias.len()], &b.norm_bias));
            out.push((format!("blocks.{i}.fc1_w"), b.fc1_w.shape().to_vec(), b.fc1_w.data()));
            out.push((format!("blocks.{i}.fc1_b"), vec![b.fc1_b.len()], &b.fc1_b));
            out.push((format!("blocks.{i}.fc2_w"), b.fc2_w.shape().to_vec(), b.fc2_w.data()));
            out.push((format!("blocks.{i}.fc2_b"), vec![b.fc2_b.len()], &b.fc2_b));
        }
        out
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [S])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.norm_gain"), &mut b.norm_gain);
            f(&format!("blocks.{i}.norm_bias"), &mut b.norm_bias);
            f(&format!("blocks.{i}.fc1_w"), b.fc1_w.data_mut());
            f(&format!("blocks.{i}.fc1_b"), &mut b.fc1_b);
            f(&format!("blocks.{i}.fc2_w"), b.fc2_w.data_mut());
            f(&format!("blocks.{i}.fc2_b"), &mut b.fc2_b);
        }
    }
}

/// Free-function form used by the retrieval pipeline.
pub fn project_cls<S: Scalar>(
    f_cls: &[S],
    p: &ClsProjector<S>,
) -> Result<Vec<S>, ProjectorError> {
    p.project(f_cls)
}

/// Train the projector on (voxel CLS, image CLS) pairs with the combined
/// contrastive + reconstruction objective. Returns per-epoch mean loss.
pub fn train_projector<S: Scalar>(
    proj: &mut ClsProjector<S>,
    xs: &[&[S]],
    vs: &[&[S]],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, ProjectorError> {
    cfg.loss.validate().map_err(ProjectorError::Train)?;
    if xs.is_empty() {
        return Err(ProjectorError::Train(TrainError::EmptyDataset));
    }
    if xs.len() != vs.len() {
        return Err(ProjectorError::Train(TrainError::PairCountMismatch {
            xs: xs.len(),
            vs: vs.len(),
        }));
    }
    for row in xs.iter().chain(vs.iter()) {
        if row.len() != proj.dim {
            return Err(ProjectorError::DimMismatch {
                expected: proj.dim,
                actual: row.len(),
            });
        }
    }
    if cfg.batch_size < 2 {
        return Err(ProjectorError::Train(TrainError::BadTrainConfig(
            "batch_size must be >= 2 for the contrastive term".into(),
        )));
    }

    let n = xs.len();
    let d = proj.dim;
    let mut optimizer = OptimizerState::new(cfg.optimizer, proj.param_count());
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut batches: Vec<Vec<usize>> =
            order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().expect("non-empty batch list");
            batches.last_mut().expect("predecessor batch").extend(tail);
        }
        let mut weighted = 0.0;
        for batch in &batches {
            let b = batch.len();
            let mut x_data = Vec::with_capacity(b * d);
            let mut v_data = Vec::with_capacity(b * d);
            for &i in batch {
                x_data.extend_from_slice(xs[i]);
                v_data.extend_from_slice(vs[i]);
            }
            let x = RealTensor::new(vec![b, d], x_data).expect("batch stacks");
            let v = RealTensor::new(vec![b, d], v_data).expect("batch stacks");
            let (out, traces) = proj.forward_batch(&x)?;
            let (loss, g_out) = total_loss(&out, &v, &cfg.loss)?;
            let (grads, _) = proj.backward_batch(&traces, &g_out);
            optimizer.step(proj, &grads)?;
            weighted += loss * b as f64;
        }
        history.push(weighted / n as f64);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Exact KNN index
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct KnnIndex<S> {
    ids: Vec<String>,
    dim: usize,
    /// Unit-normalized rows, [count, dim].
    rows: RealTensor<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnHit {
    pub id: String,
    pub score: f64,
}

impl<S: Scalar> KnnIndex<S> {
    /// Build from raw rows; each row is L2-normalized on the way in.
    pub fn build(ids: Vec<String>, rows: &RealTensor<S>) -> Result<Self, ProjectorError> {
        if rows.shape().len() != 2 || ids.len() != rows.rows() {
            return Err(ProjectorError::DimMismatch {
                expected: ids.len(),
                actual: rows.rows(),
            });
        }
        if ids.is_empty() {
            return Err(ProjectorError::EmptyIndex);
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.clone()) {
                return Err(ProjectorError::DuplicateId(id.clone()));
            }
        }
        let (count, dim) = (rows.rows(), rows.cols());
        let mut data = vec![S::zero(); count * dim];
        for r in 0..count {
            let row = rows.row(r);
            let norm = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(ProjectorError::ZeroRow { row: r });
            }
            for c in 0..dim {
                data[r * dim + c] = s::<S>(row[c].as_f64() / norm);
            }
        }
        Ok(Self {
            ids,
            dim,
            rows: RealTensor::new(vec![count, dim], data).expect("normalized rows stack"),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Exact top-k by cosine. Ties break toward the lexicographically
    /// smaller id; k beyond the item count returns everything.
    pub fn search(&self, query: &[S], k: usize) -> Result<Vec<KnnHit>, ProjectorError> {
        if k == 0 {
            return Err(ProjectorError::BadK);
        }
        if query.len() != self.dim {
            return Err(ProjectorError::DimMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let qn = query.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        let q: Vec<f64> = if qn > 0.0 {
            query.iter().map(|x| x.as_f64() / qn).collect()
        } else {
            vec![0.0; self.dim]
        };
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|r| {
                let row = self.rows.row(r);
                let dot: f64 = row.iter().zip(&q).map(|(a, b)| a.as_f64() * b).sum();
                (r, dot)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        });
        scored.truncate(k.min(self.len()));
        Ok(scored
            .into_iter()
            .map(|(r, score)| KnnHit {
                id: self.ids[r].clone(),
                score,
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<(), ProjectorError> {
        std::fs::create_dir_all(dir).map_err(|e| map_io(dir, e))?;
        write_tensor(&dir.join("matrix.lmnd"), &self.rows)?;
        let ids_text = self.ids.join("\n") + "\n";
        std::fs::write(dir.join("ids.txt"), ids_text).map_err(|e| map_io(dir, e))?;
        let manifest = IndexManifest {
            metric: "cosine".into(),
            count: self.len(),
            dim: self.dim,
            matrix: "matrix.lmnd".into(),
            ids: "ids.txt".into(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), json).map_err(|e| map_io(dir, e))?;
        Ok(())
    }

    /// Load a snapshot, re-validating the unit-row invariant (1e-5 slack).
    pub fn load(dir: &Path) -> Result<Self, ProjectorError> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| map_io(&manifest_path, e))?;
        let manifest: IndexManifest = serde_json::from_str(&text).map_err(|e| {
            ProjectorError::Data(DataError::Json {
                path: manifest_path.clone(),
                source: e,
            })
        })?;
        if manifest.metric != "cosine" {
            return Err(ProjectorError::BadMetric(manifest.metric));
        }
        let ids_text = std::fs::read_to_string(dir.join(&manifest.ids))
            .map_err(|e| map_io(&dir.join(&manifest.ids), e))?;
        let ids: Vec<String> = ids_text.lines().map(|l| l.to_string()).collect();
        let rows = read_tensor(&dir.join(&manifest.matrix))?.into_f64();
        if ids.len() != manifest.count || rows.rows() != manifest.count || rows.cols() != manifest.dim {
            return Err(ProjectorError::DimMismatch {
                expected: manifest.count,
                actual: ids.len().min(rows.rows()),
            });
        }
        for r in 0..rows.rows() {
            let norm = rows.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(ProjectorError::NotUnit { row: r, norm });
            }
        }
        let cast = rows.map(|x| s::<S>(x));
        let mut seen = std::collections::BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.clone()) {
                return Err(ProjectorError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            ids,
            dim: cast.cols(),
            rows: cast,
        })
    }
}

fn map_io(path: &Path, e: std::io::Error) -> ProjectorError {
    ProjectorError::Data(DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    metric: String,
    count: usize,
    dim: usize,
    matrix: String,
    ids: String,
}

/// Free-function form mirroring the index method.
pub fn knn_search<S: Scalar>(
    idx: &KnnIndex<S>,
    query: &[S],
    k: usize,
) -> Result<Vec<KnnHit>, ProjectorError> {
    idx.search(query, k)
}

// ---------------------------------------------------------------------------
// Two-stage retrieval
// ---------------------------------------------------------------------------

pub const DEFAULT_CANDIDATES: usize = 16;

#[derive(Debug, Clone, Serialize)]
pub struct TwoStageOutcome {
    pub best_id: String,
    /// Stage-1 candidates in KNN order (descending CLS score).
    pub candidates: Vec<KnnHit>,
    /// Stage-2 hidden-space similarity of the winner.
    pub best_similarity: f64,
}

/// Stage 2 alone: re-rank an already-fetched candidate list by full
/// hidden-grid cosine against the query. Shared by the local path and the
/// remote-endpoint path.
pub fn two_stage_rerank<S: Scalar>(
    f_hidden: &[S],
    candidates: Vec<KnnHit>,
    hidden_store: &EmbeddingStore<S>,
) -> Result<TwoStageOutcome, ProjectorError> {
    if candidates.is_empty() {
        return Err(ProjectorError::EmptyIndex);
    }
    let mut best: Option<(usize, f64)> = None;
    for (pos, hit) in candidates.iter().enumerate() {
        let Some(row) = hidden_store.position(&hit.id) else {
            return Err(ProjectorError::CandidateMissing { id: hit.id.clone() });
        };
        let stored = hidden_store.row(row);
        if stored.len() != f_hidden.len() {
            return Err(ProjectorError::DimMismatch {
                expected: f_hidden.len(),
                actual: stored.len(),
            });
        }
        let (sim, _) = cosine_sim_flagged(f_hidden, stored);
        let sim = sim.as_f64();
        // Strictly-greater keeps the earliest candidate on ties, which is
        // deterministic because stage 1 orders by score then id.
        if best.map_or(true, |(_, b)| sim > b) {
            best = Some((pos, sim));
        }
    }
    let (pos, best_similarity) = best.expect("candidate list is non-empty");
    Ok(TwoStageOutcome {
        best_id: candidates[pos].id.clone(),
        candidates,
        best_similarity,
    })
}

/// Narrow with the projected CLS embedding, then pick the candidate whose
/// full hidden-grid embedding best matches the query's.
pub fn two_stage_retrieve<S: Scalar>(
    f_hidden: &[S],
    f_cls: &[S],
    proj: &ClsProjector<S>,
    idx: &KnnIndex<S>,
    hidden_store: &EmbeddingStore<S>,
    k: usize,
) -> Result<TwoStageOutcome, ProjectorError> {
    let projected = proj.project(f_cls)?;
    let candidates = idx.search(&projected, k)?;
    two_stage_rerank(f_hidden, candidates, hidden_store)
}

// ---------------------------------------------------------------------------
// KNN wire protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnQuery {
    pub embedding: Vec<f64>,
    pub k: usize,
    pub metric: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnResponse {
    pub results: Vec<KnnHit>,
}

/// A loopback KNN service wrapping a local index. Binds to the given
/// address ("127.0.0.1:0" picks a free port), serves POST /knn, and stops
/// when the handle is dropped or `stop` is called.
pub struct KnnServer {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl KnnServer {
    pub fn spawn(index: KnnIndex<f64>, bind: &str) -> Result<Self, ProjectorError> {
        let server = tiny_http::Server::http(bind)
            .map_err(|e| ProjectorError::RemoteTransport(format!("bind {bind}: {e}")))?;
        let addr = match server.server_addr() {
            tiny_http::ListenAddr::IP(a) => a,
            other => {
                return Err(ProjectorError::RemoteTransport(format!(
                    "unsupported listen address {other:?}"
                )))
            }
        };
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let handle = std::thread::spawn(move || {
            while !stop_flag.load(Ordering::Relaxed) {
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(request)) => handle_request(&index, request),
                    Ok(None) => continue,
                    Err(_) => break,
                }
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    /// Block until the serving thread exits (it never does unless the
    /// process is killed or another handle sets the stop flag).
    pub fn wait(mut self) {
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for KnnServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn respond_json(request: tiny_http::Request, status: u16, body: String) {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
        .expect("static header is valid");
    let response = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(header);
    let _ = request.respond(response);
}

fn handle_request(index: &KnnIndex<f64>, mut request: tiny_http::Request) {
    let path_ok = request.url() == "/knn";
    let method_ok = request.method() == &tiny_http::Method::Post;
    if !path_ok {
        return respond_json(request, 404, r#"{"error":"unknown path"}"#.into());
    }
    if !method_ok {
        return respond_json(request, 405, r#"{"error":"POST required"}"#.into());
    }
    let mut body = String::new();
    if request.as_reader().read_to_string(&mut body).is_err() {
        return respond_json(request, 400, r#"{"error":"unreadable body"}"#.into());
    }
    let query: KnnQuery = match serde_json::from_str(&body) {
        Ok(q) => q,
        Err(e) => {
            return respond_json(
                request,
                400,
                format!(r#"{{"error":"bad query: {e}"}}"#),
            )
        }
    };
    if query.metric != "cosine" {
        return respond_json(
            request,
            400,
            format!(r#"{{"error":"unsupported metric {}"}}"#, query.metric),
        );
    }
    match index.search(&query.embedding, query.k) {
        Ok(results) => {
            let body = serde_json::to_string(&KnnResponse { results })
                .expect("response serializes");
            respond_json(request, 200, body);
        }
        Err(e) => respond_json(request, 400, format!(r#"{{"error":"{e}"}}"#)),
    }
}

pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_secs(10);

/// POST the query to `<endpoint>/knn` and parse the hit list. Semantics
/// mirror the local `knn_search` exactly; every failure mode is a typed
/// error rather than an empty result.
pub fn remote_knn_search(
    endpoint: &str,
    query: &[f64],
    k: usize,
    timeout: Option<Duration>,
) -> Result<Vec<KnnHit>, ProjectorError> {
    if k == 0 {
        return Err(ProjectorError::BadK);
    }
    let url = format!("{}/knn", endpoint.trim_end_matches('/'));
    let body = serde_json::to_string(&KnnQuery {
        embedding: query.to_vec(),
        k,
        metric: "cosine".into(),
    })
    .expect("query serializes");

    let agent = ureq::AgentBuilder::new()
        .timeout(timeout.unwrap_or(DEFAULT_REMOTE_TIMEOUT))
        .build();
    let response = match agent
        .post(&url)
        .set("Content-Type", "application/json")
        .send_string(&body)
    {
        Ok(r) => r,
        Err(ureq::Error::Status(status, resp)) => {
            let body = resp.into_string().unwrap_or_default();
            return Err(ProjectorError::RemoteStatus { status, body });
        }
        Err(ureq::Error::Transport(t)) => {
            return Err(ProjectorError::RemoteTransport(t.to_string()))
        }
    };
    let text = response
        .into_string()
        .map_err(|e| ProjectorError::RemoteTransport(e.to_string()))?;
    // serde_json reports line and column, which is the offset contract.
    let parsed: KnnResponse =
        serde_json::from_str(&text).map_err(|e| ProjectorError::RemoteMalformed(e.to_string()))?;
    if parsed.results.len() > k {
        return Err(ProjectorError::RemoteContract(format!(
            "{} results for k = {k}",
            parsed.results.len()
        )));
    }
    for pair in parsed.results.windows(2) {
        if pair[1].score > pair[0].score {
            return Err(ProjectorError::RemoteContract(
                "scores are not non-increasing".into(),
            ));
        }
    }
    Ok(parsed.results)
}

/// Report produced by projector training runs for downstream inspection.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectorEvalReport {
    pub n_pairs: usize,
    pub mse: f64,
    pub target_variance: f64,
    pub r_squared: f64,
}

/// Held-out reconstruction quality: mean squared error against the mean
/// per-coordinate variance of the targets, summarized as R^2.
pub fn eval_projector<S: Scalar>(
    proj: &ClsProjector<S>,
    xs: &[&[S]],
    vs: &[&[S]],
) -> Result<ProjectorEvalReport, ProjectorError> {
    if xs.is_empty() || xs.len() != vs.len() {
        return Err(ProjectorError::Train(TrainError::PairCountMismatch {
            xs: xs.len(),
            vs: vs.len(),
        }));
    }
    let n = xs.len();
    let d = proj.dim;
    let mut mse = 0.0f64;
    let mut mean = vec![0.0f64; d];
    for v in vs {
        if v.len() != d {
            return Err(ProjectorError::DimMismatch {
                expected: d,
                actual: v.len(),
            });
        }
        for c in 0..d {
            mean[c] += v[c].as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = 0.0f64;
    for (x, v) in xs.iter().zip(vs) {
        let out = proj.project(x)?;
        for c in 0..d {
            let diff = out[c].as_f64() - v[c].as_f64();
            mse += diff * diff;
            let centered = v[c].as_f64() - mean[c];
            var += centered * centered;
        }
    }
    mse /= n as f64;
    var /= n as f64;
    let r_squared = if var > 0.0 { 1.0 - mse / var } else { 0.0 };
    Ok(ProjectorEvalReport {
        n_pairs: n,
        mse,
        target_variance: var,
        r_squared,
    })
}

// ---------------------------------------------------------------------------
// Projector checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectorManifest {
    pub dim: usize,
    pub depth: usize,
    pub slope: f64,
    pub dtype: String,
    pub seed: u64,
    pub loss: LossConfig,
    pub params: Vec<crate::training::ParamEntry>,
}

pub fn save_projector<S: Scalar>(
    dir: &Path,
    proj: &ClsProjector<S>,
    seed: u64,
    loss: &LossConfig,
) -> Result<(), ProjectorError> {
    std::fs::create_dir_all(dir).map_err(|e| map_io(dir, e))?;
    let mut params = Vec::new();
    for (name, shape, data) in ParamSet::param_tensors(proj) {
        let file = format!("{name}.lmnd");
        let t = RealTensor::new(shape, data.to_vec()).expect("parameter tensors are consistent");
        write_tensor(&dir.join(&file), &t)?;
        params.push(crate::training::ParamEntry { name, file });
    }
    let manifest = ProjectorManifest {
        dim: proj.dim,
        depth: proj.blocks.len(),
        slope: proj.slope,
        dtype: format!("{:?}", S::DTYPE).to_lowercase(),
        seed,
        loss: *loss,
        params,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| map_io(&path, e))?;
    Ok(())
}

pub fn load_projector<S: Scalar>(
    dir: &Path,
) -> Result<(ClsProjector<S>, ProjectorManifest), ProjectorError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| map_io(&path, e))?;
    let manifest: ProjectorManifest = serde_json::from_str(&text).map_err(|e| {
        ProjectorError::Data(DataError::Json {
            path: path.clone(),
            source: e,
        })
    })?;
    let want_dtype = format!("{:?}", S::DTYPE).to_lowercase();
    if manifest.dtype != want_dtype {
        return Err(ProjectorError::BadConfig(format!(
            "dtype {} cannot load into a {want_dtype} projector",
            manifest.dtype
        )));
    }
    let mut proj = ClsProjector::<S>::init(manifest.dim, manifest.depth, manifest.slope, 0)?;
    let mut by_name: BTreeMap<String, Vec<S>> = BTreeMap::new();
    let expected: BTreeMap<String, Vec<usize>> = ParamSet::param_tensors(&proj)
        .into_iter()
        .map(|(n, shape, _)| (n, shape))
        .collect();
    for entry in &manifest.params {
        let Some(shape) = expected.get(&entry.name) else {
            return Err(ProjectorError::BadConfig(format!(
                "{} is not a parameter of this projector",
                entry.name
            )));
        };
        let loaded = read_tensor(&dir.join(&entry.file))?;
        if loaded.shape() != shape.as_slice() {
            return Err(ProjectorError::BadConfig(format!(
                "{} has shape {:?}, projector wants {:?}",
                entry.name,
                loaded.shape(),
                shape
            )));
        }
        let values: Vec<S> = loaded.into_f64().into_data().iter().map(|&x| s::<S>(x)).collect();
        by_name.insert(entry.name.clone(), values);
    }
    let mut missing = Vec::new();
    proj.visit_params_mut(&mut |name, slice| match by_name.get(name) {
        Some(values) => slice.copy_from_slice(values),
        None => missing.push(name.to_string()),
    });
    if let Some(name) = missing.into_iter().next() {
        return Err(ProjectorError::BadConfig(format!(
            "{name} missing from projector checkpoint"
        )));
    }
    Ok((proj, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::OptimizerHyper;
    use std::io::Write;

    fn random_rows(count: usize, dim: usize, seed: u64) -> RealTensor<f64> {
        let mut rng = SplitMix64::new(seed);
        RealTensor::from_fn(vec![count, dim], |_| rng.uniform(-1.0, 1.0))
    }

    fn ids(count: usize) -> Vec<String> {
        (0..count).map(|i| format!("item_{i:04}")).collect()
    }

    #[test]
    fn fresh_projector_is_the_identity() {
        let proj = ClsProjector::<f64>::init(6, 4, 0.01, 9).unwrap();
        let x: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.8).collect();
        let out = proj.project(&x).unwrap();
        assert_eq!(out, x, "zero-initialized residual branches must vanish");
    }

    #[test]
    fn projector_matches_scalar_block_oracle() {
        let (d, depth) = (5usize, 2usize);
        let mut proj = ClsProjector::<f64>::init(d, depth, 0.01, 10).unwrap();
        let mut rng = SplitMix64::new(11);
        // Give every tensor (including the zero-initialized contractions)
        // random values.
        proj.visit_params_mut(&mut |_, slice| {
            slice.iter_mut().for_each(|v| *v = rng.uniform(-0.7, 0.7))
        });
        let x: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let got = proj.project(&x).unwrap();

        // Layer-by-layer scalar oracle.
        let mut cur = x.clone();
        for blk in &proj.blocks {
            let mean: f64 = cur.iter().sum::<f64>() / d as f64;
            let var: f64 = cur.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + 1e-5).sqrt();
            let normed: Vec<f64> = (0..d)
                .map(|c| (cur[c] - mean) * istd * blk.norm_gain[c] + blk.norm_bias[c])
                .collect();
            let z1: Vec<f64> = (0..d)
                .map(|q| {
                    blk.fc1_b[q]
                        + (0..d).map(|c| normed[c] * blk.fc1_w.data()[c * d + q]).sum::<f64>()
                })
                .collect();
            let h: Vec<f64> = z1.iter().map(|&z| if z >= 0.0 { z } else { 0.01 * z }).collect();
            let m: Vec<f64> = (0..d)
                .map(|q| {
                    blk.fc2_b[q]
                        + (0..d).map(|c| h[c] * blk.fc2_w.data()[c * d + q]).sum::<f64>()
                })
                .collect();
            for c in 0..d {
                cur[c] += m[c];
            }
        }
        for (a, b) in got.iter().zip(&cur) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn projector_gradients_match_finite_differences() {
        let (d, depth, b) = (4usize, 2usize, 3usize);
        let mut proj = ClsProjector::<f64>::init(d, depth, 0.01, 12).unwrap();
        let mut rng = SplitMix64::new(13);
        proj.visit_params_mut(&mut |_, slice| {
            slice.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5))
        });
        let x = random_rows(b, d, 14);
        let v = random_rows(b, d, 15);
        let cfg = LossConfig {
            tau: 1.0,
            alpha: 0.5,
            direction: crate::training::LossDirection::Symmetric,
        };

        let (out, traces) = proj.forward_batch(&x).unwrap();
        let (_, g_out) = total_loss(&out, &v, &cfg).unwrap();
        let (analytic, _) = proj.backward_batch(&traces, &g_out);

        let loss_of = |p: &ClsProjector<f64>| -> f64 {
            let (out, _) = p.forward_batch(&x).unwrap();
            total_loss(&out, &v, &cfg).unwrap().0
        };
        let params = ParamSet::param_tensors(&proj);
        let grads = ParamSet::param_tensors(&analytic);
        let (mut worst_rel, mut worst_abs) = (0.0f64, 0.0f64);
        for (pi, (_, _, data)) in params.iter().enumerate() {
            for k in 0..data.len() {
                let base = data[k];
                let h = 1e-4 * base.abs().max(1.0);
                let mut scratch = proj.clone();
                let mut idx = 0;
                scratch.visit_params_mut(&mut |_, slice| {
                    if idx == pi {
                        slice[k] = base + h;
                    }
                    idx += 1;
                });
                let lp = loss_of(&scratch);
                let mut idx = 0;
                scratch.visit_params_mut(&mut |_, slice| {
                    if idx == pi {
                        slice[k] = base - h;
                    }
                    idx += 1;
                });
                let lm = loss_of(&scratch);
                let numeric = (lp - lm) / (2.0 * h);
                let ana = grads[pi].2[k];
                let scale = ana.abs().max(numeric.abs());
                // Two bands: meaningful coordinates compare relatively;
                // near-zero ones compare absolutely, where the central
                // difference itself carries ~1e-11 of roundoff noise.
                if scale > 1e-4 {
                    worst_rel = worst_rel.max((ana - numeric).abs() / scale);
                } else {
                    worst_abs = worst_abs.max((ana - numeric).abs());
                }
            }
        }
        assert!(worst_rel <= 1e-6, "worst relative gradient error {worst_rel}");
        assert!(worst_abs <= 1e-8, "worst near-zero gradient error {worst_abs}");
    }

    fn centered_unit(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mean = v.iter().sum::<f64>() / d as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// Noiseless pairs v = M x with centered unit-norm inputs, so the
    /// normalization inside each block is exactly linear and the residual
    /// stack can represent M exactly.
    fn linear_map_pairs(
        d: usize,
        n_train: usize,
        n_eval: usize,
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = SplitMix64::new(seed);
        let map: Vec<f64> = (0..d * d).map(|_| rng.normal() * 0.5).collect();
        let mut make = |count: usize| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            let mut xs = Vec::new();
            let mut vs = Vec::new();
            for _ in 0..count {
                let x = centered_unit(&mut rng, d);
                let v: Vec<f64> = (0..d)
                    .map(|r| (0..d).map(|c| map[r * d + c] * x[c]).sum())
                    .collect();
                xs.push(x);
                vs.push(v);
            }
            (xs, vs)
        };
        let (tx, tv) = make(n_train);
        let (ex, ev) = make(n_eval);
        (tx, tv, ex, ev)
    }

    fn linear_map_cfg(loss: LossConfig, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            seed: 18,
            loss,
            optimizer: OptimizerHyper {
                lr: 3e-3,
                weight_decay: 0.0,
                ..OptimizerHyper::default()
            },
            timing: false,
        }
    }

    #[test]
    fn projector_learns_a_noiseless_linear_map() {
        let d = 8usize;
        let (tx, tv, ex, ev) = linear_map_pairs(d, 192, 48, 16);
        let mut proj = ClsProjector::<f64>::init(d, 2, 1.0, 17).unwrap();
        // Reconstruction-dominant mix: a high temperature flattens the
        // contrastive gradients (which do not vanish even at the exact
        // solution) so the squared error can be driven to the floor.
        let loss = LossConfig {
            tau: 4.0,
            alpha: 8.0,
            direction: crate::training::LossDirection::Symmetric,
        };
        let history =
            train_projector(&mut proj, &refs(&tx), &refs(&tv), &linear_map_cfg(loss, 300))
                .unwrap();
        assert!(history.last().unwrap() < history.first().unwrap());

        let report = eval_projector(&proj, &refs(&ex), &refs(&ev)).unwrap();
        assert!(
            report.mse <= 1e-3,
            "held-out mse {} after noiseless training",
            report.mse
        );
    }

    #[test]
    fn alpha_half_training_explains_most_target_variance() {
        let d = 8usize;
        let (tx, tv, ex, ev) = linear_map_pairs(d, 192, 48, 42);
        let mut proj = ClsProjector::<f64>::init(d, 2, 1.0, 43).unwrap();
        // The balanced mix cannot reach the exact map (the contrastive term
        // keeps pulling), but it must land well under the target variance.
        let loss = LossConfig {
            tau: 0.1,
            alpha: 0.5,
            direction: crate::training::LossDirection::Symmetric,
        };
        train_projector(&mut proj, &refs(&tx), &refs(&tv), &linear_map_cfg(loss, 200)).unwrap();
        let report = eval_projector(&proj, &refs(&ex), &refs(&ev)).unwrap();
        assert!(
            report.r_squared > 0.5,
            "r^2 {} (mse {} vs variance {})",
            report.r_squared,
            report.mse,
            report.target_variance
        );
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn knn_finds_a_stored_row_first() {
        let rows = random_rows(10, 4, 19);
        let idx = KnnIndex::build(ids(10), &rows).unwrap();
        let hits = idx.search(rows.row(3), 3).unwrap();
        assert_eq!(hits[0].id, "item_0003");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert!(hits[0].score >= hits[1].score && hits[1].score >= hits[2].score);
    }

    #[test]
    fn knn_k_beyond_count_returns_everything() {
        let rows = random_rows(5, 3, 20);
        let idx = KnnIndex::build(ids(5), &rows).unwrap();
        let hits = idx.search(rows.row(0), 50).unwrap();
        assert_eq!(hits.len(), 5);
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let (n, d) = (100usize, 8usize);
        let rows = random_rows(n, d, 21);
        let idx = KnnIndex::build(ids(n), &rows).unwrap();
        let mut rng = SplitMix64::new(22);
        let q: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let hits = idx.search(&q, 10).unwrap();

        // Oracle: normalize everything by hand and fully sort.
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut oracle: Vec<(String, f64)> = (0..n)
            .map(|r| {
                let row = rows.row(r);
                let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
                (format!("item_{r:04}"), dot / (rn * qn))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        for (hit, want) in hits.iter().zip(&oracle) {
            assert_eq!(hit.id, want.0);
            assert!((hit.score - want.1).abs() < 1e-9);
        }
    }

    #[test]
    fn knn_ties_break_by_ascending_id() {
        // Two identical rows: both score 1 against themselves.
        let rows = RealTensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let idx = KnnIndex::build(
            vec!["zebra".into(), "apple".into(), "mango".into()],
            &rows,
        )
        .unwrap();
        let hits = idx.search(&[1.0, 0.0], 2).unwrap();
        assert_eq!(hits[0].id, "mango", "tie must prefer the smaller id");
        assert_eq!(hits[1].id, "zebra");
    }

    #[test]
    fn knn_build_and_search_validation() {
        let rows = random_rows(3, 2, 23);
        assert!(matches!(
            KnnIndex::build(vec!["a".into(), "a".into(), "b".into()], &rows).unwrap_err(),
            ProjectorError::DuplicateId(_)
        ));
        let idx = KnnIndex::build(ids(3), &rows).unwrap();
        assert!(matches!(idx.search(&[1.0, 0.0], 0).unwrap_err(), ProjectorError::BadK));
        assert!(matches!(
            idx.search(&[1.0], 1).unwrap_err(),
            ProjectorError::DimMismatch { expected: 2, actual: 1 }
        ));
        let mut zero_rows = random_rows(2, 2, 24);
        zero_rows.data_mut()[2] = 0.0;
        zero_rows.data_mut()[3] = 0.0;
        assert!(matches!(
            KnnIndex::build(ids(2), &zero_rows).unwrap_err(),
            ProjectorError::ZeroRow { row: 1 }
        ));
    }

    #[test]
    fn knn_snapshot_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let rows = random_rows(6, 3, 25);
        let idx = KnnIndex::build(ids(6), &rows).unwrap();
        idx.save(dir.path()).unwrap();
        let loaded = KnnIndex::<f64>::load(dir.path()).unwrap();
        assert_eq!(loaded.ids(), idx.ids());
        let q = [0.4, -0.2, 0.9];
        assert_eq!(
            idx.search(&q, 4).unwrap(),
            loaded.search(&q, 4).unwrap(),
            "snapshot must preserve search results exactly"
        );

        // Corrupt one row's scale; the unit-norm invariant must catch it.
        let matrix_path = dir.path().join("matrix.lmnd");
        let t = read_tensor(&matrix_path).unwrap().into_f64();
        let mut data = t.data().to_vec();
        for c in 0..3 {
            data[3 + c] *= 2.0;
        }
        write_tensor(
            &matrix_path,
            &RealTensor::new(vec![6, 3], data).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            KnnIndex::<f64>::load(dir.path()).unwrap_err(),
            ProjectorError::NotUnit { row: 1, .. }
        ));
    }

    fn two_stage_fixture(
        n: usize,
        d_cls: usize,
        d_hidden: usize,
        seed: u64,
    ) -> (KnnIndex<f64>, EmbeddingStore<f64>, RealTensor<f64>, RealTensor<f64>) {
        let cls = random_rows(n, d_cls, seed);
        let hidden = random_rows(n, d_hidden, seed + 1);
        let idx = KnnIndex::build(ids(n), &cls).unwrap();
        let store = EmbeddingStore::from_tensor(ids(n), &hidden).unwrap();
        (idx, store, cls, hidden)
    }

    #[test]
    fn two_stage_picks_the_paired_item_when_embeddings_match() {
        let (idx, store, cls, hidden) = two_stage_fixture(20, 4, 6, 26);
        let proj = ClsProjector::<f64>::init(4, 2, 0.01, 27).unwrap(); // identity
        let out =
            two_stage_retrieve(hidden.row(7), cls.row(7), &proj, &idx, &store, 16).unwrap();
        assert_eq!(out.best_id, "item_0007");
        assert!(out.candidates.iter().any(|h| h.id == "item_0007"));
        assert!((out.best_similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_stage_with_k1_is_pure_cls_retrieval() {
        let (idx, store, cls, _) = two_stage_fixture(15, 4, 6, 28);
        let proj = ClsProjector::<f64>::init(4, 2, 0.01, 29).unwrap();
        let mut rng = SplitMix64::new(30);
        let f_hidden: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let out = two_stage_retrieve(&f_hidden, cls.row(4), &proj, &idx, &store, 1).unwrap();
        let stage1 = idx.search(cls.row(4), 1).unwrap();
        assert_eq!(out.best_id, stage1[0].id);
        assert_eq!(out.candidates.len(), 1);
    }

    #[test]
    fn two_stage_matches_exhaustive_oracle() {
        let n = 200usize;
        let (idx, store, cls, hidden) = two_stage_fixture(n, 5, 8, 31);
        let proj = ClsProjector::<f64>::init(5, 3, 0.01, 32).unwrap();
        let mut rng = SplitMix64::new(33);
        for _ in 0..10 {
            let q_cls: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let q_hidden: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let got =
                two_stage_retrieve(&q_hidden, &q_cls, &proj, &idx, &store, 16).unwrap();

            // Oracle: explicit stage 1 (cosine sort with id tie-break) then
            // stage 2 (argmax hidden cosine over those candidates).
            let projected = proj.project(&q_cls).unwrap();
            let qn = projected.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut stage1: Vec<(String, f64)> = (0..n)
                .map(|r| {
                    let row = cls.row(r);
                    let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 =
                        row.iter().zip(&projected).map(|(a, b)| a * b).sum();
                    (format!("item_{r:04}"), dot / (rn * qn))
                })
                .collect();
            stage1.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            stage1.truncate(16);
            let mut best: Option<(String, f64)> = None;
            for (id, _) in &stage1 {
                let r: usize = id[5..].parse().unwrap();
                let row = hidden.row(r);
                let hn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let qn2 = q_hidden.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = row.iter().zip(&q_hidden).map(|(a, b)| a * b).sum();
                let sim = dot / (hn * qn2);
                if best.as_ref().map_or(true, |(_, b)| sim > *b) {
                    best = Some((id.clone(), sim));
                }
            }
            assert_eq!(got.best_id, best.unwrap().0);
        }
    }

    #[test]
    fn two_stage_names_missing_candidates() {
        let (idx, _, cls, hidden) = two_stage_fixture(5, 3, 4, 34);
        let proj = ClsProjector::<f64>::init(3, 1, 0.01, 35).unwrap();
        // Store that lacks item_0000..item_0002.
        let store = EmbeddingStore::from_rows(
            vec!["item_0003".into(), "item_0004".into()],
            vec![hidden.row(3).to_vec(), hidden.row(4).to_vec()],
        )
        .unwrap();
        let err =
            two_stage_retrieve(hidden.row(0), cls.row(0), &proj, &idx, &store, 5).unwrap_err();
        match err {
            ProjectorError::CandidateMissing { id } => assert!(id.starts_with("item_")),
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn loopback_server_equals_local_search_exactly() {
        let rows = random_rows(30, 5, 36);
        let idx = KnnIndex::build(ids(30), &rows).unwrap();
        let server = KnnServer::spawn(idx.clone(), "127.0.0.1:0").unwrap();
        let mut rng = SplitMix64::new(37);
        for _ in 0..5 {
            let q: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let local = idx.search(&q, 16).unwrap();
            let remote = remote_knn_search(&server.url(), &q, 16, None).unwrap();
            assert_eq!(local, remote, "loopback must be bit-identical");
        }
        server.stop();
    }

    #[test]
    fn remote_k_zero_fails_before_any_network_io() {
        // The endpoint is unreachable on purpose; validation must fire first.
        let err = remote_knn_search("http://127.0.0.1:1", &[1.0], 0, None).unwrap_err();
        assert!(matches!(err, ProjectorError::BadK));
    }

    #[test]
    fn server_rejects_bad_paths_metrics_and_bodies() {
        let rows = random_rows(4, 3, 38);
        let idx = KnnIndex::build(ids(4), &rows).unwrap();
        let server = KnnServer::spawn(idx, "127.0.0.1:0").unwrap();
        let url = server.url();

        let post = |path: &str, body: &str| -> u16 {
            match ureq::post(&format!("{url}{path}")).send_string(body) {
                Ok(r) => r.status(),
                Err(ureq::Error::Status(code, _)) => code,
                Err(e) => panic!("transport failure: {e}"),
            }
        };
        assert_eq!(post("/other", "{}"), 404);
        assert_eq!(post("/knn", "not json"), 400);
        assert_eq!(
            post("/knn", r#"{"embedding":[1,0,0],"k":2,"metric":"euclidean"}"#),
            400
        );
        assert_eq!(
            post("/knn", r#"{"embedding":[1,0,0],"k":2,"metric":"cosine"}"#),
            200
        );
        server.stop();
    }

    /// One-shot HTTP stub that returns a fixed response to whatever arrives.
    fn raw_http_stub(response: &'static str) -> String {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 4096];
                let _ = std::io::Read::read(&mut stream, &mut buf);
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    #[test]
    fn remote_surfaces_truncated_json_with_position() {
        let endpoint = raw_http_stub(
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: 18\r\n\r\n{\"results\": [{\"id\"",
        );
        let err = remote_knn_search(&endpoint, &[1.0, 0.0], 2, Some(Duration::from_secs(2)))
            .unwrap_err();
        match err {
            ProjectorError::RemoteMalformed(msg) => {
                assert!(
                    msg.contains("line") && msg.contains("column"),
                    "parse position missing from: {msg}"
                );
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn remote_surfaces_http_errors_with_status() {
        let endpoint = raw_http_stub(
            "HTTP/1.1 503 Service Unavailable\r\nContent-Length: 9\r\n\r\noverload!",
        );
        let err = remote_knn_search(&endpoint, &[1.0, 0.0], 2, Some(Duration::from_secs(2)))
            .unwrap_err();
        match err {
            ProjectorError::RemoteStatus { status, body } => {
                assert_eq!(status, 503);
                assert_eq!(body, "overload!");
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn projector_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut proj = ClsProjector::<f32>::init(6, 3, 0.01, 39).unwrap();
        let mut rng = SplitMix64::new(40);
        proj.visit_params_mut(&mut |_, slice| {
            slice.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0) as f32)
        });
        save_projector(dir.path(), &proj, 41, &LossConfig::default()).unwrap();
        let (loaded, manifest) = load_projector::<f32>(dir.path()).unwrap();
        assert_eq!(manifest.depth, 3);
        assert_eq!(manifest.seed, 41);
        let collect = |p: &ClsProjector<f32>| -> Vec<f32> {
            let mut out = Vec::new();
            for (_, _, d) in ParamSet::param_tensors(p) {
                out.extend_from_slice(d);
            }
            out
        };
        assert_eq!(collect(&proj), collect(&loaded));
    }
}
