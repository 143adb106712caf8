//! Retrieval evaluation: candidate-pool accuracy with seeded distractor
//! sampling, full-ranking accuracy, and prompt-based zero-shot
//! classification. All similarity comparisons run in f64 regardless of the
//! store's scalar type so that rankings don't wobble with storage precision.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::{RealTensor, Scalar};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding store is empty")]
    EmptyStore,
    #[error("duplicate id {0:?} in embedding store")]
    DuplicateId(String),
    #[error("store has {ids} ids but {rows} rows")]
    IdCountMismatch { ids: usize, rows: usize },
    #[error("row {index} has length {got}, expected {expected}")]
    RowLength {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("stores disagree at row {index}: {left:?} vs {right:?}")]
    IdsNotAligned {
        index: usize,
        left: String,
        right: String,
    },
    #[error("stores have different dims: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("pool size {pool} needs at least 2")]
    PoolTooSmall { pool: usize },
    #[error("pool size {pool} exceeds the {available} available candidates")]
    PoolTooLarge { pool: usize, available: usize },
    #[error("top-k value {k} is invalid for pool size {pool}")]
    BadTopK { k: usize, pool: usize },
    #[error("protocol needs at least one seed")]
    NoSeeds,
    #[error("query vector has length {got}, store rows have {expected}")]
    QueryDim { expected: usize, got: usize },
    #[error("id {0:?} not present in store")]
    UnknownId(String),
    #[error("no class label recorded for stimulus {0:?}")]
    MissingLabel(String),
    #[error("label {label:?} for stimulus {id:?} matches no prompt class")]
    UnknownClass { id: String, label: String },
}

// ---------------------------------------------------------------------------
// Embedding store
// ---------------------------------------------------------------------------

/// Ordered id -> row mapping. Rows may themselves be multi-axis (e.g. a
/// tokens x dim grid); they are stored flattened and `row_shape` remembers
/// the original layout.
#[derive(Debug, Clone)]
pub struct EmbeddingStore<S> {
    ids: Vec<String>,
    row_shape: Vec<usize>,
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> EmbeddingStore<S> {
    pub fn new(
        ids: Vec<String>,
        row_shape: Vec<usize>,
        data: Vec<S>,
    ) -> Result<Self, RetrievalError> {
        if ids.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        let dim: usize = row_shape.iter().product();
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(RetrievalError::IdCountMismatch {
                ids: ids.len(),
                rows: if dim == 0 { 0 } else { data.len() / dim },
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            ids,
            row_shape,
            dim,
            data,
        })
    }

    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<S>>) -> Result<Self, RetrievalError> {
        if rows.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        let dim = rows[0].len();
        for (index, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(RetrievalError::RowLength {
                    index,
                    expected: dim,
                    got: r.len(),
                });
            }
        }
        let data: Vec<S> = rows.into_iter().flatten().collect();
        Self::new(ids, vec![dim], data)
    }

    /// Rows from a tensor whose leading axis indexes items; trailing axes
    /// form the per-item row shape.
    pub fn from_tensor(ids: Vec<String>, t: &RealTensor<S>) -> Result<Self, RetrievalError> {
        let shape = t.shape();
        if shape.len() < 2 {
            return Err(RetrievalError::RowLength {
                index: 0,
                expected: 2,
                got: shape.len(),
            });
        }
        if shape[0] != ids.len() {
            return Err(RetrievalError::IdCountMismatch {
                ids: ids.len(),
                rows: shape[0],
            });
        }
        Self::new(ids, shape[1..].to_vec(), t.data().to_vec())
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

    pub fn row_shape(&self) -> &[usize] {
        &self.row_shape
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[S] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Unit-normalized rows in f64. Zero rows are left as zeros, which makes
    /// their similarity to everything 0.
    fn unit_rows_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for r in 0..self.len() {
            let row = self.row(r);
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if norm > 0.0 {
                out.extend(row.iter().map(|v| v.as_f64() / norm));
            } else {
                out.extend(std::iter::repeat(0.0).take(self.dim));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

/// Cosine similarity with a degeneracy flag: the flag is true when either
/// vector has zero norm, in which case the similarity is reported as 0.
///
/// Panics if the lengths differ; that is a caller bug, not a data condition.
pub fn cosine_sim_flagged<S: Scalar>(a: &[S], b: &[S]) -> (S, bool) {
    assert_eq!(a.len(), b.len(), "cosine_sim: length mismatch");
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return (S::zero(), true);
    }
    (S::from_f64(dot / (na.sqrt() * nb.sqrt())), false)
}

pub fn cosine_sim<S: Scalar>(a: &[S], b: &[S]) -> S {
    cosine_sim_flagged(a, b).0
}

/// Full pairwise cosine matrix sim[s * n + i] = cos(f_s, v_i), in f64.
fn similarity_matrix<S: Scalar>(
    f: &EmbeddingStore<S>,
    v: &EmbeddingStore<S>,
) -> Result<Vec<f64>, RetrievalError> {
    if f.dim() != v.dim() {
        return Err(RetrievalError::DimMismatch {
            left: f.dim(),
            right: v.dim(),
        });
    }
    for (index, (a, b)) in f.ids().iter().zip(v.ids()).enumerate() {
        if a != b {
            return Err(RetrievalError::IdsNotAligned {
                index,
                left: a.clone(),
                right: b.clone(),
            });
        }
    }
    if f.len() != v.len() {
        return Err(RetrievalError::IdCountMismatch {
            ids: f.len(),
            rows: v.len(),
        });
    }
    let (n, d) = (f.len(), f.dim());
    let fu = f.unit_rows_f64();
    let vu = v.unit_rows_f64();
    let mut sim = vec![0.0f64; n * n];
    for s in 0..n {
        let frow = &fu[s * d..(s + 1) * d];
        for i in 0..n {
            let vrow = &vu[i * d..(i + 1) * d];
            sim[s * n + i] = frow.iter().zip(vrow).map(|(a, b)| a * b).sum();
        }
    }
    Ok(sim)
}

// ---------------------------------------------------------------------------
// Candidate-pool protocol
// ---------------------------------------------------------------------------

/// How pooled retrieval accuracy is measured: for every query, the paired
/// item is hidden among `pool_size - 1` seeded random distractors and must
/// out-rank all of them. Repeated over `n_seeds` independent pool draws.
#[derive(Debug, Clone, serde::Deserialize, Serialize)]
pub struct RetrievalProtocol {
    pub pool_size: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub top_k: Vec<usize>,
}

impl Default for RetrievalProtocol {
    fn default() -> Self {
        Self {
            pool_size: 300,
            n_seeds: 30,
            base_seed: 0,
            top_k: vec![1, 5],
        }
    }
}

/// Distractor rows for query `exclude`: the first `count` entries of a
/// Fisher-Yates shuffle of all other rows. One generator per seed is shared
/// across queries (ascending query order), so a whole sweep is pinned by
/// (base_seed + seed_index) alone.
pub fn sample_distractors(
    rng: &mut SplitMix64,
    n: usize,
    exclude: usize,
    count: usize,
) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..n).filter(|&i| i != exclude).collect();
    rng.partial_shuffle(&mut candidates, count);
    candidates.truncate(count);
    candidates
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionReport {
    pub direction: String,
    pub pool_size: usize,
    pub n_seeds: usize,
    /// Mean over seeds of per-seed top-1 accuracy.
    pub acc_mean: f64,
    pub acc_per_seed: Vec<f64>,
    /// Mean top-k hit rate per requested k (k=1 always included).
    pub topk: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub n_items: usize,
    pub image: DirectionReport,
    pub brain: DirectionReport,
}

struct DirectionTally {
    // hits[seed][k_index]
    hits: Vec<Vec<usize>>,
}

impl DirectionTally {
    fn new(n_seeds: usize, n_ks: usize) -> Self {
        Self {
            hits: vec![vec![0; n_ks]; n_seeds],
        }
    }

    fn report(
        &self,
        direction: &str,
        ks: &[usize],
        n_samples: usize,
        proto: &RetrievalProtocol,
    ) -> DirectionReport {
        let per_seed_rate = |k_idx: usize| -> Vec<f64> {
            self.hits
                .iter()
                .map(|row| row[k_idx] as f64 / n_samples as f64)
                .collect()
        };
        let mean = |rates: &[f64]| rates.iter().sum::<f64>() / rates.len() as f64;

        let top1 = per_seed_rate(0);
        let mut topk = BTreeMap::new();
        for (k_idx, &k) in ks.iter().enumerate() {
            topk.insert(k, mean(&per_seed_rate(k_idx)));
        }
        DirectionReport {
            direction: direction.to_string(),
            pool_size: proto.pool_size,
            n_seeds: proto.n_seeds,
            acc_mean: mean(&top1),
            acc_per_seed: top1,
            topk,
        }
    }
}

/// Pooled retrieval accuracy in both directions. `f` holds model outputs
/// (voxel embeddings), `v` the paired target embeddings, ids aligned.
/// Image retrieval queries with a voxel row against an image pool; brain
/// retrieval queries with an image against a voxel pool. Rank ties count
/// against the query.
pub fn eval_pool_retrieval<S: Scalar>(
    f: &EmbeddingStore<S>,
    v: &EmbeddingStore<S>,
    proto: &RetrievalProtocol,
) -> Result<RetrievalReport, RetrievalError> {
    let n = f.len();
    if proto.pool_size < 2 {
        return Err(RetrievalError::PoolTooSmall {
            pool: proto.pool_size,
        });
    }
    if proto.pool_size > n {
        return Err(RetrievalError::PoolTooLarge {
            pool: proto.pool_size,
            available: n,
        });
    }
    if proto.n_seeds == 0 {
        return Err(RetrievalError::NoSeeds);
    }
    // k = 1 is the headline number and always measured.
    let mut ks: Vec<usize> = Vec::with_capacity(proto.top_k.len() + 1);
    ks.push(1);
    for &k in &proto.top_k {
        if k == 0 || k > proto.pool_size {
            return Err(RetrievalError::BadTopK {
                k,
                pool: proto.pool_size,
            });
        }
        if !ks.contains(&k) {
            ks.push(k);
        }
    }

    let sim = similarity_matrix(f, v)?;
    let mut image = DirectionTally::new(proto.n_seeds, ks.len());
    let mut brain = DirectionTally::new(proto.n_seeds, ks.len());

    for seed_idx in 0..proto.n_seeds {
        let mut rng = SplitMix64::new(proto.base_seed.wrapping_add(seed_idx as u64));
        for s in 0..n {
            let pool = sample_distractors(&mut rng, n, s, proto.pool_size - 1);
            let paired = sim[s * n + s];
            // Count distractors ranking at or above the paired item.
            let mut worse_img = 0usize;
            let mut worse_brn = 0usize;
            for &d in &pool {
                if sim[s * n + d] >= paired {
                    worse_img += 1;
                }
                if sim[d * n + s] >= paired {
                    worse_brn += 1;
                }
            }
            for (k_idx, &k) in ks.iter().enumerate() {
                if worse_img < k {
                    image.hits[seed_idx][k_idx] += 1;
                }
                if worse_brn < k {
                    brain.hits[seed_idx][k_idx] += 1;
                }
            }
        }
    }

    Ok(RetrievalReport {
        n_items: n,
        image: image.report("voxel_to_image", &ks, n, proto),
        brain: brain.report("image_to_voxel", &ks, n, proto),
    })
}

// ---------------------------------------------------------------------------
// Full-ranking protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FullRankDirection {
    pub direction: String,
    /// 1-based rank of the paired item for each query, ties counted against.
    pub ranks: Vec<usize>,
    pub topk: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FullRankReport {
    pub n_items: usize,
    pub image: FullRankDirection,
    pub brain: FullRankDirection,
}

/// Rank every query against the entire aligned store (no pooling).
pub fn full_rank_retrieval<S: Scalar>(
    f: &EmbeddingStore<S>,
    v: &EmbeddingStore<S>,
    top_k: &[usize],
) -> Result<FullRankReport, RetrievalError> {
    let n = f.len();
    let sim = similarity_matrix(f, v)?;
    let mut ks: Vec<usize> = vec![1];
    for &k in top_k {
        if k == 0 || k > n {
            return Err(RetrievalError::BadTopK { k, pool: n });
        }
        if !ks.contains(&k) {
            ks.push(k);
        }
    }

    let rank_of = |s: usize, by_row: bool| -> usize {
        let paired = sim[s * n + s];
        let mut above = 0usize;
        for i in 0..n {
            if i == s {
                continue;
            }
            let x = if by_row { sim[s * n + i] } else { sim[i * n + s] };
            if x >= paired {
                above += 1;
            }
        }
        above + 1
    };

    let build = |by_row: bool, direction: &str| -> FullRankDirection {
        let ranks: Vec<usize> = (0..n).map(|s| rank_of(s, by_row)).collect();
        let mut topk = BTreeMap::new();
        for &k in &ks {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            topk.insert(k, hits as f64 / n as f64);
        }
        FullRankDirection {
            direction: direction.to_string(),
            ranks,
            topk,
        }
    };

    Ok(FullRankReport {
        n_items: n,
        image: build(true, "voxel_to_image"),
        brain: build(false, "image_to_voxel"),
    })
}

/// Full similarity matrix as CSV (header row of ids, one row per query).
pub fn similarity_csv<S: Scalar>(
    f: &EmbeddingStore<S>,
    v: &EmbeddingStore<S>,
) -> Result<String, RetrievalError> {
    let n = f.len();
    let sim = similarity_matrix(f, v)?;
    let mut out = String::from("id");
    for id in v.ids() {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for s in 0..n {
        out.push_str(f.id(s));
        for i in 0..n {
            out.push(',');
            out.push_str(&format!("{}", sim[s * n + i]));
        }
        out.push('\n');
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Zero-shot classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ZeroShotOutcome {
    pub query_id: String,
    /// Test image the query retrieved (top-1 over the candidate images).
    pub retrieved_id: String,
    /// Class ids ranked by similarity to the retrieved image, best first.
    pub ranked_classes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationReport {
    pub n_queries: usize,
    pub class_count: usize,
    /// 1 / class_count, the accuracy of guessing.
    pub chance: f64,
    pub topk: BTreeMap<usize, f64>,
    pub outcomes: Vec<ZeroShotOutcome>,
}

/// Two-hop zero-shot classification for a single query embedding: retrieve
/// the closest test image, then rank class prompts against that image.
/// Ties break toward the lower row index (images) / lexicographically
/// smaller id (classes) so results are reproducible.
pub fn zero_shot_classify<S: Scalar>(
    query: &[S],
    images: &EmbeddingStore<S>,
    prompts: &EmbeddingStore<S>,
) -> Result<(usize, Vec<usize>), RetrievalError> {
    if query.len() != images.dim() {
        return Err(RetrievalError::QueryDim {
            expected: images.dim(),
            got: query.len(),
        });
    }
    if images.dim() != prompts.dim() {
        return Err(RetrievalError::DimMismatch {
            left: images.dim(),
            right: prompts.dim(),
        });
    }
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for i in 0..images.len() {
        let s = cosine_sim_flagged(query, images.row(i)).0.as_f64();
        if s > best_sim {
            best_sim = s;
            best = i;
        }
    }
    let retrieved = images.row(best);
    let mut ranked: Vec<usize> = (0..prompts.len()).collect();
    let sims: Vec<f64> = ranked
        .iter()
        .map(|&c| cosine_sim_flagged(retrieved, prompts.row(c)).0.as_f64())
        .collect();
    ranked.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| prompts.id(a).cmp(prompts.id(b)))
    });
    Ok((best, ranked))
}

/// Zero-shot classification over a whole aligned store of query embeddings.
/// `labels` maps stimulus id -> class id (a prompt-store id).
pub fn classify_store<S: Scalar>(
    queries: &EmbeddingStore<S>,
    images: &EmbeddingStore<S>,
    prompts: &EmbeddingStore<S>,
    labels: &BTreeMap<String, String>,
    top_k: &[usize],
) -> Result<ClassificationReport, RetrievalError> {
    let mut ks: Vec<usize> = vec![1];
    for &k in top_k {
        if k == 0 || k > prompts.len() {
            return Err(RetrievalError::BadTopK {
                k,
                pool: prompts.len(),
            });
        }
        if !ks.contains(&k) {
            ks.push(k);
        }
    }
    let max_k = ks.iter().copied().max().unwrap_or(1);

    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut outcomes = Vec::with_capacity(queries.len());
    for q in 0..queries.len() {
        let qid = queries.id(q).to_string();
        let truth = labels
            .get(&qid)
            .ok_or_else(|| RetrievalError::MissingLabel(qid.clone()))?;
        let truth_pos = prompts
            .position(truth)
            .ok_or_else(|| RetrievalError::UnknownClass {
                id: qid.clone(),
                label: truth.clone(),
            })?;
        let (img, ranked) = zero_shot_classify(queries.row(q), images, prompts)?;
        let rank = ranked
            .iter()
            .position(|&c| c == truth_pos)
            .expect("every class index appears in the ranking");
        for (&k, h) in hits.iter_mut() {
            if rank < k {
                *h += 1;
            }
        }
        outcomes.push(ZeroShotOutcome {
            query_id: qid,
            retrieved_id: images.id(img).to_string(),
            ranked_classes: ranked
                .iter()
                .take(max_k)
                .map(|&c| prompts.id(c).to_string())
                .collect(),
        });
    }

    let n = queries.len();
    Ok(ClassificationReport {
        n_queries: n,
        class_count: prompts.len(),
        chance: 1.0 / prompts.len() as f64,
        topk: hits
            .into_iter()
            .map(|(k, h)| (k, h as f64 / n as f64))
            .collect(),
        outcomes,
    })
}
