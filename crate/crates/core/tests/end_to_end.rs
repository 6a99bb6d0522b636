use proptest::prelude::*;
use tvl_core::merging::{
    apply_video_plan, invert_plan, merge_texts_cls, merge_texts_words, plan_sample, plan_shuffle, VideoMergeConfig,
    VideoMergeStrategy,
};
use tvl_core::model::{FrameTokenSequence, ModelConfig, TokenizedText};
use tvl_core::synthdata::{Generator, GeneratorConfig};
use tvl_core::trainer::run;
use tvl_core::{RunConfig, Tensor};

fn frames(video_id: u64, t: usize, d: usize) -> FrameTokenSequence {
    let data = (0..t * d).map(|i| video_id as f64 * 100.0 + i as f64).collect();
    FrameTokenSequence { video_id, tokens: Tensor::new(vec![t, d], data).unwrap() }
}

proptest! {
    #[test]
    fn merged_rows_come_from_the_slots_they_name(b in 1usize..8, seed in any::<u64>()) {
        let batch: Vec<_> = (0..b as u64).map(|v| frames(v + 10, 8, 3)).collect();
        let ids: Vec<u64> = batch.iter().map(|f| f.video_id).collect();
        let plan = plan_shuffle(&ids, 8, seed).unwrap();
        let merged = apply_video_plan(&batch, &plan).unwrap();
        prop_assert_eq!(merged.rows(), b * 8);
        for s in 0..plan.slots.len() {
            let (vid, f) = invert_plan(&plan, s).unwrap();
            let src = &batch[(vid - 10) as usize].tokens;
            prop_assert_eq!(merged.row(s), src.row(f));
        }
        for (&vid, &(st, ed)) in &plan.boundaries {
            prop_assert_eq!(ed - st + 1, 8);
            prop_assert!(plan.slots[st..=ed].iter().all(|s| s.0 == vid));
        }
    }

    #[test]
    fn sampled_plans_hold_one_ordered_positive_run(query in 0usize..8, seed in any::<u64>(), hard in any::<bool>()) {
        let ids: Vec<u64> = (0..8).collect();
        let strategy = if hard { VideoMergeStrategy::HardSampling } else { VideoMergeStrategy::Sampling };
        let cfg = VideoMergeConfig { strategy, ..VideoMergeConfig::default() };
        let sim = tvl_core::merging::compute_video_similarity(&Tensor::new(vec![8, 2], (0..16).map(|i| (i as f64).sin()).collect()).unwrap());
        let plan = plan_sample(&ids, 8, query, &cfg, Some(&sim), seed).unwrap();
        prop_assert_eq!(plan.slots.len(), 128);
        let (st, ed) = plan.boundary(query as u64).unwrap();
        let k = ed - st + 1;
        prop_assert!((cfg.k_p_min..=cfg.k_p_max).contains(&k));
        prop_assert_eq!(plan.slots.iter().filter(|s| s.0 == query as u64).count(), k);
        prop_assert!(plan.slots[st..=ed].windows(2).all(|w| w[0].1 < w[1].1));
    }

    #[test]
    fn text_plans_keep_every_sentence_intact(n in 2usize..6, seed in any::<u64>()) {
        let cfg = ModelConfig::default();
        let batch: Vec<_> = (0..n as u64)
            .map(|i| TokenizedText::from_words(i, &[4 + i as usize, 20, 30 + i as usize], &cfg).unwrap())
            .collect();
        let (merged, plan) = merge_texts_words(&batch, seed, 160).unwrap();
        for t in &batch {
            let (st, ed) = plan.spans[&t.text_id];
            prop_assert_eq!(&merged[st..=ed], &t.ids[..]);
        }
        let (cls, plan) = merge_texts_cls(&batch, seed).unwrap();
        prop_assert_eq!(cls.len(), n);
        prop_assert_eq!(plan.permutation.len(), n);
    }
}

#[test]
fn generated_pairs_carry_their_concept_words() {
    let model = ModelConfig::default();
    let gen = Generator::new(GeneratorConfig::default(), &model).unwrap();
    let pairs = gen.generate_batch(8, 3, true).unwrap();
    let mut concepts: Vec<_> = pairs.iter().map(|p| p.concept_id).collect();
    concepts.sort();
    concepts.dedup();
    assert_eq!(concepts.len(), 8);
    for p in &pairs {
        assert_eq!(p.raw_frames.shape(), &[8, 32]);
        let vocab = gen.config().concept_vocab(p.concept_id);
        assert!(p.text.ids.iter().any(|id| vocab.contains(id)));
    }
    assert_eq!(pairs, gen.generate_batch(8, 3, true).unwrap());
}

#[test]
fn short_run_lowers_the_loss_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::with_output_dir(dir.path());
    cfg.train.steps = 120;
    cfg.train.eval_every = 0;
    cfg.train.eval.gallery_size = 8;
    cfg.train.eval.queries = 8;
    let summary = run(&cfg, None).unwrap();
    assert_eq!(summary.steps_completed, 120);
    assert!(summary.final_checkpoint.exists());
    let mean = |r: &[tvl_core::trainer::StepRecord]| r.iter().map(|s| s.losses.total).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&summary.records[..20]), mean(&summary.records[100..]));
    assert!(tail < head, "{head} -> {tail}");
    assert!(summary.final_eval.is_some());
}
