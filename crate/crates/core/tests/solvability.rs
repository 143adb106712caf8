//! Before trusting any model on the synthetic voxel task, establish that the
//! task itself is solvable: a plain ridge regression from voxels to target
//! embeddings must already retrieve well above 90% at pool size 100. A model
//! that can't beat this baseline is broken; a task where ridge fails is not
//! a meaningful benchmark.

mod common;

use common::oracles::ridge_fit_predict;
use specvox::data::{generate_synthetic, load_dataset, SyntheticSpec};
use specvox::retrieval::{eval_pool_retrieval, EmbeddingStore, RetrievalProtocol};

/// The synthetic recipe the end-to-end checks use everywhere: 500 train and
/// 100 test pairs, 2000 voxels, 16x64 target grids, noise at 10% of signal.
pub fn e2e_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_train: 500,
        n_test: 100,
        voxel_len: 2000,
        embed_shape: vec![16, 64],
        noise_sigma: 0.1,
        map_seed: 11,
        noise_seed: 12,
        class_count: 0,
    }
}

#[test]
fn ridge_oracle_solves_the_synthetic_task() {
    let dir = tempfile::tempdir().unwrap();
    let summary = generate_synthetic(&e2e_spec(), dir.path()).unwrap();
    let train = load_dataset(&summary.train_manifest).unwrap();
    let test = load_dataset(&summary.test_manifest).unwrap();

    let hidden_train = train.hidden.as_ref().expect("hidden targets");
    let hidden_test = test.hidden.as_ref().expect("hidden targets");
    let targets = train.targets_from(hidden_train).unwrap();

    let preds = ridge_fit_predict(&train.voxels, &targets, &test.voxels, 1.0);
    let pred_rows: Vec<Vec<f32>> = preds
        .iter()
        .map(|r| r.iter().map(|&v| v as f32).collect())
        .collect();
    let pred_store = EmbeddingStore::from_rows(test.voxel_ids.clone(), pred_rows).unwrap();

    let proto = RetrievalProtocol {
        pool_size: 100,
        n_seeds: 10,
        base_seed: 0,
        top_k: vec![1],
    };
    let report = eval_pool_retrieval(&pred_store, hidden_test, &proto).unwrap();
    println!(
        "ridge oracle pool-100 top-1: image {:.3}, brain {:.3}",
        report.image.acc_mean, report.brain.acc_mean
    );
    assert!(
        report.image.acc_mean > 0.90,
        "ridge oracle image retrieval {} <= 0.90: task may not be solvable",
        report.image.acc_mean
    );
    assert!(
        report.brain.acc_mean > 0.90,
        "ridge oracle brain retrieval {} <= 0.90: task may not be solvable",
        report.brain.acc_mean
    );
}
