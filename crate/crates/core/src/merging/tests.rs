use rand::Rng;
use proptest::prelude::*;

use super::*;
use crate::model::ModelConfig;

/// Independent oracle: (min, max) slot index whose source matches `id`.
fn oracle_range(slots: &[(u64, usize)], id: u64) -> Option<(usize, usize)> {
    let mut lo = None;
    let mut hi = None;
    for (i, s) in slots.iter().enumerate() {
        if s.0 == id {
            if lo.is_none() {
                lo = Some(i);
            }
            hi = Some(i);
        }
    }
    Some((lo?, hi?))
}

/// Oracle check that exactly the slots in [st, ed] come from `id`, in increasing frame order.
fn oracle_exact_run(slots: &[(u64, usize)], id: u64, st: usize, ed: usize) -> bool {
    slots.iter().enumerate().all(|(i, s)| (s.0 == id) == (st <= i && i <= ed))
        && slots[st..=ed].windows(2).all(|w| w[0].1 < w[1].1)
}

fn seed_with_perm(n: usize, want: &[usize]) -> u64 {
    (0..10_000).find(|&s| permutation(n, s) == want).expect("some seed yields the permutation")
}

fn seqs(ids: &[u64], t: usize, c: usize) -> Vec<FrameTokenSequence> {
    ids.iter()
        .map(|&id| FrameTokenSequence {
            video_id: id,
            tokens: Tensor::new(
                vec![t, c],
                (0..t * c).map(|i| id as f64 * 100.0 + i as f64).collect(),
            )
            .unwrap(),
        })
        .collect()
}

fn texts(lens: &[usize]) -> Vec<TokenizedText> {
    let cfg = ModelConfig::default();
    lens.iter()
        .enumerate()
        .map(|(i, &n)| {
            let words: Vec<usize> = (0..n - 2).map(|k| 10 + k).collect();
            TokenizedText::from_words(i as u64, &words, &cfg).unwrap()
        })
        .collect()
}

fn sample_cfg(strategy: VideoMergeStrategy) -> VideoMergeConfig {
    VideoMergeConfig {
        strategy,
        k: 24,
        k_p_min: 1,
        k_p_max: 16,
        hard_top_m: 3,
        seed: 0,
    }
}

fn random_similarity(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for _ in 0..n {
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        rows.push(v.into_iter().map(|x| x / norm).collect());
    }
    compute_video_similarity(&Tensor::from_rows(&rows).unwrap())
}

#[test]
fn shuffle_single_video() {
    let plan = plan_shuffle(&[42], 8, 3).unwrap();
    assert_eq!(plan.boundary(42), Some((0, 7)));
    plan.validate().unwrap();
}

#[test]
fn shuffle_known_permutation() {
    let seed = seed_with_perm(3, &[2, 0, 1]);
    let plan = plan_shuffle(&[0, 1, 2], 2, seed).unwrap();
    assert_eq!(plan.permutation, vec![2, 0, 1]);
    assert_eq!(oracle_range(&plan.slots, 0), Some((2, 3)));
    assert_eq!(plan.boundary(0), Some((2, 3)));
}

#[test]
fn shuffle_plans_match_oracle_over_seeds() {
    let ids = [10, 11, 12, 13];
    for seed in 0..200 {
        let plan = plan_shuffle(&ids, 8, seed).unwrap();
        plan.validate().unwrap();
        for &id in &ids {
            let (st, ed) = oracle_range(&plan.slots, id).unwrap();
            assert_eq!(plan.boundary(id), Some((st, ed)));
            assert_eq!(ed - st, 7);
            assert!(oracle_exact_run(&plan.slots, id, st, ed));
        }
    }
}

#[test]
fn shuffle_tensor_follows_plan() {
    let batch = seqs(&[5, 6, 7], 2, 3);
    let (merged, plan) = merge_videos_shuffle(&batch, 9).unwrap();
    assert_eq!(merged.shape(), &[6, 3]);
    for (slot, &(vid, f)) in plan.slots.iter().enumerate() {
        let src = batch.iter().find(|s| s.video_id == vid).unwrap();
        assert_eq!(merged.row(slot), src.tokens.row(f));
    }
}

#[test]
fn shuffle_rejects_inconsistent_lengths() {
    let mut batch = seqs(&[1, 2], 3, 2);
    batch[1].tokens = Tensor::zeros(&[2, 2]);
    assert!(merge_videos_shuffle(&batch, 0).is_err());
}

#[test]
fn sampling_paper_operating_point_is_valid() {
    let cfg = VideoMergeConfig {
        strategy: VideoMergeStrategy::HardSampling,
        k: 128,
        k_p_min: 1,
        k_p_max: 32,
        hard_top_m: 10,
        seed: 0,
    };
    cfg.validate().unwrap();
    let ids: Vec<u64> = (0..16).collect();
    let sim = random_similarity(16, 4);
    let plan = plan_sample(&ids, 8, 3, &cfg, Some(&sim), 1).unwrap();
    assert_eq!(plan.len(), 128);
    plan.validate().unwrap();
}

#[test]
fn sampling_without_background() {
    let cfg = VideoMergeConfig {
        strategy: VideoMergeStrategy::Sampling,
        k: 4,
        k_p_min: 4,
        k_p_max: 4,
        hard_top_m: 1,
        seed: 0,
    };
    let plan = plan_sample(&[7], 4, 0, &cfg, None, 0).unwrap();
    assert_eq!(plan.boundary(7), Some((0, 3)));
    assert!(plan.slots.iter().all(|s| s.0 == 7));
    assert_eq!(plan.slots.iter().map(|s| s.1).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn sampled_plans_match_oracle_over_draws() {
    let ids: Vec<u64> = (100..108).collect();
    for strategy in [VideoMergeStrategy::Sampling, VideoMergeStrategy::HardSampling] {
        let cfg = sample_cfg(strategy);
        for seed in 0..500 {
            let q = (seed % 8) as usize;
            let sim = random_similarity(8, seed);
            let plan = plan_sample(&ids, 8, q, &cfg, Some(&sim), seed).unwrap();
            plan.validate().unwrap();
            let qid = ids[q];
            let (st, ed) = oracle_range(&plan.slots, qid).unwrap();
            assert_eq!(plan.boundary(qid), Some((st, ed)));
            assert!(oracle_exact_run(&plan.slots, qid, st, ed));
            assert_eq!(plan.len(), cfg.k);
            let k = ed - st + 1;
            assert!((cfg.k_p_min..=8).contains(&k));
        }
    }
}

#[test]
fn hard_sampling_background_comes_from_top_m() {
    let ids: Vec<u64> = (0..8).collect();
    let cfg = sample_cfg(VideoMergeStrategy::HardSampling);
    for seed in 0..200 {
        let q = (seed % 8) as usize;
        let sim = random_similarity(8, seed + 1000);
        let plan = plan_sample(&ids, 4, q, &cfg, Some(&sim), seed).unwrap();
        // oracle: j is in the pool iff fewer than m other candidates beat it
        let allowed: Vec<u64> = (0..8)
            .filter(|&j| j != q)
            .filter(|&j| {
                let better = (0..8)
                    .filter(|&o| o != q && o != j)
                    .filter(|&o| sim.at(q, o) > sim.at(q, j) || (sim.at(q, o) == sim.at(q, j) && o < j))
                    .count();
                better < cfg.hard_top_m
            })
            .map(|j| j as u64)
            .collect();
        for s in &plan.slots {
            assert!(s.0 == q as u64 || allowed.contains(&s.0));
        }
    }
}

#[test]
fn background_frames_do_not_repeat_until_exhausted() {
    let cfg = VideoMergeConfig {
        strategy: VideoMergeStrategy::Sampling,
        k: 9,
        k_p_min: 1,
        k_p_max: 1,
        hard_top_m: 1,
        seed: 0,
    };
    // one background video with 8 frames: 8 background slots must be a permutation of its frames
    for seed in 0..50 {
        let plan = plan_sample(&[0, 1], 8, 0, &cfg, None, seed).unwrap();
        let mut bg: Vec<usize> = plan.slots.iter().filter(|s| s.0 == 1).map(|s| s.1).collect();
        bg.sort_unstable();
        assert_eq!(bg, (0..8).collect::<Vec<_>>());
    }
}

#[test]
fn sampling_errors() {
    let cfg = sample_cfg(VideoMergeStrategy::Sampling);
    assert!(matches!(plan_sample(&[1], 8, 0, &cfg, None, 0), Err(Error::Merge(_))));
    let hard = sample_cfg(VideoMergeStrategy::HardSampling);
    assert!(plan_sample(&[1, 2, 3], 8, 0, &hard, None, 0).is_err());
    let sim = Tensor::identity(2);
    assert!(matches!(
        plan_sample(&[1, 2, 3], 8, 0, &hard, Some(&sim), 0),
        Err(Error::Shape { .. })
    ));
    let batch = seqs(&[1, 2], 8, 2);
    assert!(merge_videos_sample(&batch, 99, &cfg, None, 0).is_err());
}

#[test]
fn similarity_examples() {
    let same = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
    let s = compute_video_similarity(&same);
    assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    let s = compute_video_similarity(&Tensor::identity(3));
    assert_eq!(s, Tensor::identity(3));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|_| {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let s = compute_video_similarity(&Tensor::from_rows(&rows).unwrap());
    for i in 0..5 {
        for j in 0..5 {
            let dot: f64 = (0..4).map(|k| rows[i][k] * rows[j][k]).sum();
            assert!((s.at(i, j) - dot).abs() < 1e-12);
        }
        assert_eq!(s.at(i, i), 1.0);
    }
}

#[test]
fn word_merge_examples() {
    let one = texts(&[6]);
    let (merged, plan) = merge_texts_words(&one, 0, 160).unwrap();
    assert_eq!(merged.len(), 6);
    assert_eq!(plan.spans[&0], (0, 5));

    let two = texts(&[5, 7]);
    let seed = seed_with_perm(2, &[1, 0]);
    let (merged, plan) = merge_texts_words(&two, seed, 160).unwrap();
    assert_eq!(merged.len(), 12);
    assert_eq!(oracle_range(&plan.slots, 0), Some((7, 11)));
    assert_eq!(plan.spans[&0], (7, 11));
    assert_eq!(merged[7], ModelConfig::default().cls_token_id);
    assert_eq!(merged[11], ModelConfig::default().sep_token_id);

    assert!(merge_texts_words(&texts(&[10, 10]), 0, 19).is_err());
}

#[test]
fn word_merge_spans_match_oracle_over_seeds() {
    let batch = texts(&[4, 9, 6, 12]);
    for seed in 0..200 {
        let (merged, plan) = merge_texts_words(&batch, seed, 160).unwrap();
        plan.validate().unwrap();
        for t in &batch {
            let (st, ed) = oracle_range(&plan.slots, t.text_id).unwrap();
            assert_eq!(plan.spans[&t.text_id], (st, ed));
            assert!(oracle_exact_run(&plan.slots, t.text_id, st, ed));
            assert_eq!(&merged[st..=ed], t.ids.as_slice());
        }
    }
}

#[test]
fn cls_merge_examples() {
    let two = texts(&[5, 7]);
    let seed = seed_with_perm(2, &[1, 0]);
    let (order, plan) = merge_texts_cls(&two, seed).unwrap();
    assert_eq!(order, vec![1, 0]);
    assert_eq!(plan.matched_index[&0], 1);
    plan.validate().unwrap();

    let four = texts(&[4, 4, 4, 4]);
    let id_seed = seed_with_perm(4, &[0, 1, 2, 3]);
    let (_, plan) = merge_texts_cls(&four, id_seed).unwrap();
    for i in 0..4u64 {
        assert_eq!(plan.matched_index[&i], i as usize);
    }
    assert!(merge_texts_cls(&texts(&[4]), 0).is_err());
}

#[test]
fn cls_merge_matches_oracle_over_seeds() {
    let batch = texts(&[4, 5, 6, 7, 8]);
    for seed in 0..200 {
        let (_, plan) = merge_texts_cls(&batch, seed).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.slots.len(), batch.len());
        for t in &batch {
            let (m, m2) = oracle_range(&plan.slots, t.text_id).unwrap();
            assert_eq!(m, m2);
            assert_eq!(plan.matched_index[&t.text_id], m);
        }
    }
}

#[test]
fn invert_plan_examples() {
    let seed = seed_with_perm(3, &[0, 1, 2]);
    let plan = plan_shuffle(&[4, 5, 6], 3, seed).unwrap();
    assert_eq!(invert_plan(&plan, 0).unwrap(), (4, 0));
    for (&id, &(st, ed)) in &plan.boundaries {
        assert_eq!(invert_plan(&plan, st).unwrap().0, id);
        assert_eq!(invert_plan(&plan, ed).unwrap().0, id);
    }
    let rebuilt: Vec<_> = (0..plan.len()).map(|i| invert_plan(&plan, i).unwrap()).collect();
    assert_eq!(rebuilt, plan.slots);
    assert!(matches!(invert_plan(&plan, 9), Err(Error::Index { .. })));
}

#[test]
fn plan_json_round_trip_and_validation() {
    let plan = plan_shuffle(&[1, 2, 3, 4], 8, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    plan.save_json(&path).unwrap();
    assert_eq!(MergePlan::load_json(&path).unwrap(), plan);
    assert_eq!(plan.to_json(), plan_shuffle(&[1, 2, 3, 4], 8, 7).unwrap().to_json());
    let v: serde_json::Value = serde_json::from_str(&plan.to_json()).unwrap();
    for key in ["strategy", "seed", "slots", "permutation", "boundaries"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["slots"][0].as_array().unwrap().len(), 2);

    let mut broken = plan.clone();
    broken.boundaries.insert(1, (0, 3));
    std::fs::write(&path, broken.to_json()).unwrap();
    assert!(MergePlan::load_json(&path).is_err());
}

proptest! {
    #[test]
    fn shuffle_is_a_video_level_permutation(b in 1usize..9, t in 1usize..6, seed in any::<u64>()) {
        let ids: Vec<u64> = (0..b as u64).map(|i| i * 3 + 1).collect();
        let plan = plan_shuffle(&ids, t, seed).unwrap();
        let mut got = plan.slots.clone();
        got.sort_unstable();
        let mut want: Vec<(u64, usize)> = ids.iter().flat_map(|&id| (0..t).map(move |f| (id, f))).collect();
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>(), q in 0usize..6) {
        let ids: Vec<u64> = (0..6).collect();
        let cfg = sample_cfg(VideoMergeStrategy::HardSampling);
        let sim = random_similarity(6, seed ^ 0xabc);
        let a = plan_sample(&ids, 8, q, &cfg, Some(&sim), seed).unwrap();
        let b = plan_sample(&ids, 8, q, &cfg, Some(&sim), seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
