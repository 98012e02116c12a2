//! Key-key-prompt pools: storage, cluster-trained keys, nearest-key routing
//! and the `(visual key, textual key) -> prompt` index.

mod features;
mod kmeans;
mod pool;

pub use features::{encode_dataset, EncodedInstance, ModalityFeatures};
pub use kmeans::{mini_batch_kmeans, ClusterStats, KMeansFit, KMeansSettings, KeyInit};
pub use pool::{assignment_stats, KeyKeyPromptPool, KeyLayout, KeyTrainingOutcome, Selection};

use crate::datagen::TaskDataset;
use crate::encoders::ModelState;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2D};

use crate::numerics::l2_distance;

/// Row-major prompt id for visual key `m` and textual key `n`: `m * s_t + n`.
pub fn prompt_index(m: usize, n: usize, s_v: usize, s_t: usize) -> Result<usize> {
    if m >= s_v || n >= s_t {
        return Err(Error::Index(format!(
            "key pair ({m}, {n}) outside a {s_v}x{s_t} grid"
        )));
    }
    Ok(m * s_t + n)
}

/// Nearest key by Euclidean distance; ties go to the lowest key id.
pub fn select_key(feature: &[f64], keys: &Tensor2D) -> Result<(usize, f64)> {
    if keys.rows() == 0 {
        return Err(Error::Usage("no keys to select from".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, key) in keys.iter_rows().enumerate() {
        let d = l2_distance(feature, key)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Encodes a task's training split and runs stage-1 key clustering on `pool`.
pub fn train_keys(
    pool: &mut KeyKeyPromptPool,
    dataset: &TaskDataset,
    model: &ModelState,
    settings: &KMeansSettings,
    rng: &mut Rng,
) -> Result<KeyTrainingOutcome> {
    if pool.keys_frozen() {
        return Err(Error::Usage(format!("keys of task {} are frozen", pool.task_id())));
    }
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train keys on an empty dataset".into()));
    }
    let encoded = encode_dataset(model, dataset)?;
    let features = ModalityFeatures::collect(&encoded, pool.layout())?;
    pool.train_keys(&features, settings, rng)
}

/// Mean distance from each point to its assigned key, averaged within each
/// task and then across tasks. Returns `(visual, textual)`.
pub fn clustering_error(pools: &[KeyKeyPromptPool], datasets: &[&TaskDataset], model: &ModelState) -> Result<(f64, f64)> {
    let encoded = datasets
        .iter()
        .map(|d| encode_dataset(model, d))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = datasets.iter().map(|d| d.task_id).collect();
    clustering_error_encoded(pools, &encoded, &ids)
}

/// [`clustering_error`] over already-encoded datasets tagged with task ids.
pub fn clustering_error_encoded(
    pools: &[KeyKeyPromptPool],
    datasets: &[Vec<EncodedInstance>],
    task_ids: &[usize],
) -> Result<(f64, f64)> {
    if pools.is_empty() || pools.len() != datasets.len() || datasets.len() != task_ids.len() {
        return Err(Error::Usage(format!(
            "{} pools for {} datasets",
            pools.len(),
            datasets.len()
        )));
    }
    let mut visual = 0.0;
    let mut textual = 0.0;
    for ((pool, data), &id) in pools.iter().zip(datasets).zip(task_ids) {
        if pool.task_id() != id {
            return Err(Error::Usage(format!(
                "pool of task {} paired with dataset of task {id}",
                pool.task_id()
            )));
        }
        if data.is_empty() {
            return Err(Error::Usage(format!("dataset of task {id} is empty")));
        }
        let features = ModalityFeatures::collect(data, pool.layout())?;
        visual += mean_assigned_distance(&features.visual, pool.visual_keys())?;
        textual += mean_assigned_distance(&features.textual, pool.textual_keys())?;
    }
    let n = pools.len() as f64;
    Ok((visual / n, textual / n))
}

fn mean_assigned_distance(points: &Tensor2D, keys: &Tensor2D) -> Result<f64> {
    let mut total = 0.0;
    for p in points.iter_rows() {
        total += select_key(p, keys)?.1;
    }
    Ok(total / points.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_task, TaskSpec};
    use crate::encoders::ModelDims;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn prompt_index_cases() {
        assert_eq!(prompt_index(0, 0, 3, 3).unwrap(), 0);
        assert_eq!(prompt_index(1, 2, 3, 3).unwrap(), 5);
        // Literal `m * S_v + n` agrees on square grids.
        assert_eq!(1 * 3 + 2, 5);
        let mut seen: Vec<usize> = (0..2)
            .flat_map(|m| (0..4).map(move |n| prompt_index(m, n, 2, 4).unwrap()))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert!(matches!(prompt_index(2, 0, 2, 4), Err(Error::Index(_))));
        assert!(matches!(prompt_index(0, 4, 2, 4), Err(Error::Index(_))));
    }

    #[test]
    fn prompt_index_is_bijective_up_to_ten() {
        for s_v in 1..=10 {
            for s_t in 1..=10 {
                let mut hit = vec![false; s_v * s_t];
                for m in 0..s_v {
                    for n in 0..s_t {
                        let id = prompt_index(m, n, s_v, s_t).unwrap();
                        assert!(!hit[id]);
                        hit[id] = true;
                    }
                }
                assert!(hit.iter().all(|&h| h));
            }
        }
    }

    #[test]
    fn select_key_cases() {
        let keys = Tensor2D::from_rows(&[[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]).unwrap();
        assert_eq!(select_key(&[5.0, 5.0], &keys).unwrap(), (2, 0.0));
        assert_eq!(select_key(&[0.5, 0.0], &keys).unwrap().0, 0);
        assert!(matches!(select_key(&[0.0], &Tensor2D::zeros(0, 1)), Err(Error::Usage(_))));

        let mut rng = Rng::new(12);
        for _ in 0..50 {
            let keys = rng.uniform_tensor(6, 4, -1.0, 1.0);
            let f: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let dists: Vec<f64> = keys
                .iter_rows()
                .map(|k| k.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            let mut best = 0;
            for i in 1..6 {
                if dists[i] < dists[best] {
                    best = i;
                }
            }
            assert_eq!(select_key(&f, &keys).unwrap().0, best);
        }
    }

    fn pool_with_keys(v: Tensor2D, t: Tensor2D) -> KeyKeyPromptPool {
        let s_v = v.rows();
        let s_t = t.rows();
        let d = v.cols();
        let mut pool = KeyKeyPromptPool::new(0, KeyLayout::Dual, s_v, s_t, 2, d, &mut Rng::new(1)).unwrap();
        pool.set_keys(v, t).unwrap();
        pool
    }

    #[test]
    fn select_prompt_on_keys() {
        let v = Tensor2D::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let t = Tensor2D::from_rows(&[[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0]]).unwrap();
        let pool = pool_with_keys(v, t);
        // Two identical tokens pool to themselves.
        let vt = Tensor2D::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let tt = Tensor2D::from_rows(&[[2.0, 0.0]]).unwrap();
        let (prompt, sel) = pool.select_prompt(&vt, &tt).unwrap();
        assert_eq!((sel.visual_key, sel.textual_key, sel.prompt_id), (1, 0, 3));
        assert_eq!(sel.distance, 0.0);
        assert_eq!(prompt, pool.prompt(3));

        let off = Tensor2D::from_rows(&[[1.0, 1.5]]).unwrap();
        let (_, sel) = pool.select_prompt(&off, &tt).unwrap();
        assert!(sel.distance > 0.0);
    }

    #[test]
    fn select_prompt_matches_exhaustive_pair_scan() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let pool = pool_with_keys(rng.uniform_tensor(3, 4, -1.0, 1.0), rng.uniform_tensor(4, 4, -1.0, 1.0));
            let vf: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let tf: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut best = (0, 0, f64::INFINITY);
            for m in 0..3 {
                for n in 0..4 {
                    let d = l2_distance(&vf, pool.visual_keys().row(m)).unwrap()
                        + l2_distance(&tf, pool.textual_keys().row(n)).unwrap();
                    if d < best.2 {
                        best = (m, n, d);
                    }
                }
            }
            let sel = pool.select_features(&vf, &tf).unwrap();
            assert_eq!((sel.visual_key, sel.textual_key), (best.0, best.1));
            assert!((sel.distance - best.2).abs() < 1e-12);
        }
    }

    #[test]
    fn freeze_blocks_training_and_is_idempotent() {
        let mut pool = KeyKeyPromptPool::new(0, KeyLayout::Dual, 2, 2, 3, 4, &mut Rng::new(0)).unwrap();
        pool.freeze_keys();
        pool.freeze_keys();
        assert!(pool.keys_frozen());
        let feats = ModalityFeatures {
            visual: Tensor2D::zeros(4, 4),
            textual: Tensor2D::zeros(4, 4),
        };
        assert!(matches!(
            pool.train_keys(&feats, &KMeansSettings::default(), &mut Rng::new(0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn pool_invariants() {
        for layout in [KeyLayout::Dual, KeyLayout::VisualOnly, KeyLayout::TextualOnly, KeyLayout::FirstToken] {
            let pool = KeyKeyPromptPool::new(3, layout, 3, 3, 10, 8, &mut Rng::new(2)).unwrap();
            assert_eq!(pool.prompts().len(), pool.visual_key_count() * pool.textual_key_count());
            assert_eq!(pool.prompts().len(), 9);
            assert!(pool
                .prompts()
                .iter()
                .all(|p| p.shape() == (10, 8) && p.as_slice().iter().all(|v| v.abs() <= 0.1)));
            assert_eq!(layout.to_string().parse::<KeyLayout>().unwrap(), layout);
        }
        assert!(KeyKeyPromptPool::new(0, KeyLayout::Dual, 0, 3, 10, 8, &mut Rng::new(2)).is_err());
    }

    #[test]
    fn clustering_error_cases() {
        let keys = Tensor2D::from_rows(&[[0.0, 0.0]]).unwrap();
        let pts = Tensor2D::from_rows(&[[3.0, 0.0], [0.0, 5.0]]).unwrap();
        assert_eq!(mean_assigned_distance(&pts, &keys).unwrap(), 4.0);
        assert_eq!(mean_assigned_distance(&keys, &keys).unwrap(), 0.0);

        let pool = pool_with_keys(keys.clone(), keys.clone());
        let enc = vec![
            EncodedInstance::from_tokens(Tensor2D::row_vector(&[3.0, 0.0]), Tensor2D::row_vector(&[0.0, 0.0]), 0).unwrap(),
            EncodedInstance::from_tokens(Tensor2D::row_vector(&[0.0, 5.0]), Tensor2D::row_vector(&[0.0, 0.0]), 0).unwrap(),
        ];
        let (v, t) = clustering_error_encoded(&[pool.clone()], &[enc.clone()], &[0]).unwrap();
        assert_eq!((v, t), (4.0, 0.0));
        assert!(matches!(clustering_error_encoded(&[pool.clone()], &[enc.clone()], &[1]), Err(Error::Usage(_))));
        assert!(matches!(clustering_error_encoded(&[pool], &[], &[]), Err(Error::Usage(_))));
    }

    fn blob_task(seed: u64) -> (ModelState, crate::datagen::Task) {
        let dims = ModelDims::default();
        let model = ModelState::new(dims, seed).unwrap();
        let mut rng = Rng::new(seed + 1);
        let spec = TaskSpec {
            task_id: 0,
            visual_centers: rng.uniform_tensor(3, dims.raw_dim, -2.0, 2.0),
            textual_centers: rng.uniform_tensor(3, dims.raw_dim, -2.0, 2.0),
            noise_sigma: 0.15,
            label_table: vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]],
            num_answers: dims.num_answers,
            train_count: 300,
            test_count: 30,
            visual_tokens: dims.visual_tokens,
            textual_tokens: dims.textual_tokens,
        };
        (model, make_task(&spec, seed).unwrap())
    }

    #[test]
    fn trained_keys_have_lower_error_than_initial_ones() {
        let mut improved = 0;
        for seed in 0..6 {
            let (model, task) = blob_task(seed);
            let mut pool = KeyKeyPromptPool::new(0, KeyLayout::Dual, 3, 3, 4, 32, &mut Rng::new(seed)).unwrap();
            let settings = KMeansSettings::default();
            let mut rng = Rng::new(seed + 10);
            let mut init = pool.clone();
            let enc = encode_dataset(&model, &task.train).unwrap();
            let feats = ModalityFeatures::collect(&enc, KeyLayout::Dual).unwrap();
            init.initialize_keys(&feats, settings.batch_size, &mut rng.clone()).unwrap();
            train_keys(&mut pool, &task.train, &model, &settings, &mut rng).unwrap();
            assert_eq!(init.visual_keys(), &pool_initial(&feats, &settings, seed + 10));
            let mut random = KeyKeyPromptPool::new(0, KeyLayout::Dual, 3, 3, 4, 32, &mut Rng::new(seed)).unwrap();
            let mut key_rng = Rng::new(seed + 20);
            random
                .set_keys(key_rng.uniform_tensor(3, 32, -1.0, 1.0), key_rng.uniform_tensor(3, 32, -1.0, 1.0))
                .unwrap();
            let (ev0, et0) = clustering_error(&[init], &[&task.train], &model).unwrap();
            let (ev1, et1) = clustering_error(&[pool], &[&task.train], &model).unwrap();
            let (evr, etr) = clustering_error(&[random], &[&task.train], &model).unwrap();
            assert!(ev1 < evr && et1 < etr);
            if ev1 + et1 < ev0 + et0 - 1e-9 {
                improved += 1;
            }
        }
        assert!(improved >= 3);
    }

    fn pool_initial(feats: &ModalityFeatures, settings: &KMeansSettings, seed: u64) -> Tensor2D {
        let mut pool = KeyKeyPromptPool::new(0, KeyLayout::Dual, 3, 3, 4, 32, &mut Rng::new(0)).unwrap();
        pool.train_keys(feats, settings, &mut Rng::new(seed)).unwrap().initial_visual_keys
    }

    #[test]
    fn scaling_features_and_keys_keeps_selection() {
        let mut rng = Rng::new(31);
        for _ in 0..100 {
            let keys = rng.uniform_tensor(5, 3, -1.0, 1.0);
            let f: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let c = rng.uniform(0.01, 100.0);
            let scaled: Vec<f64> = f.iter().map(|v| v * c).collect();
            assert_eq!(select_key(&f, &keys).unwrap().0, select_key(&scaled, &keys.scale(c)).unwrap().0);
        }
    }

    proptest! {
        #[test]
        fn selection_is_deterministic(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let pool = pool_with_keys(rng.uniform_tensor(3, 4, -1.0, 1.0), rng.uniform_tensor(3, 4, -1.0, 1.0));
            let v = rng.uniform_tensor(2, 4, -1.0, 1.0);
            let t = rng.uniform_tensor(5, 4, -1.0, 1.0);
            let a = pool.select_prompt(&v, &t).unwrap().1;
            let b = pool.clone().select_prompt(&v, &t).unwrap().1;
            prop_assert_eq!(a, b);
        }
    }
}
