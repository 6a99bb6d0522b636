use super::*;
use crate::tensor::{finite_difference_check, GradCheckReport};

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        n_heads: 2,
        d_ff: 2,
        proj_dim: 2,
        text_vocab_size: 7,
        max_text_len: 2,
        frames_per_video: 2,
        raw_frame_dim: 3,
        n_layers_text: 1,
        n_layers_fusion: 1,
        max_merged_len: 8,
        pad_token_id: 0,
        cls_token_id: 1,
        sep_token_id: 2,
        mask_token_id: 3,
        init_std: 0.3,
    }
}

fn tiny() -> (TemporalModel, ParamStore) {
    let m = TemporalModel::new(tiny_config()).unwrap();
    let p = m.init_params(5, 0.07);
    (m, p)
}

fn raw_frames(cfg: &ModelConfig, salt: f64) -> Tensor {
    let n = cfg.frames_per_video * cfg.raw_frame_dim;
    Tensor::new(
        vec![cfg.frames_per_video, cfg.raw_frame_dim],
        (0..n).map(|i| ((i as f64 + salt) * 0.731).sin()).collect(),
    )
    .unwrap()
}

fn check_flat<F>(store: &ParamStore, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &BoundParams<'_>) -> crate::Result<Var>,
{
    finite_difference_check(
        |g, flat| {
            let p = store.bind_flat(g, flat)?;
            f(g, &p)
        },
        &store.flatten(),
        1e-5,
        1e-5,
    )
    .unwrap()
}

#[test]
fn tiny_config_stays_under_500_parameters() {
    let (_, p) = tiny();
    assert!(p.num_scalars() <= 500, "{}", p.num_scalars());
}

#[test]
fn config_validation_rejects_bad_fields() {
    let mut c = ModelConfig::default();
    c.validate().unwrap();
    c.n_heads = 5;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.sep_token_id = c.cls_token_id;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.mask_token_id = c.text_vocab_size;
    assert!(c.validate().is_err());
}

#[test]
fn tokenized_text_contract() {
    let cfg = tiny_config();
    let t = TokenizedText::from_words(3, &[4, 5], &cfg).unwrap();
    assert_eq!(t.ids, vec![1, 4, 5, 2]);
    assert!(TokenizedText::from_words(3, &[4, 5, 6], &cfg).is_err());
    let bad = TokenizedText { text_id: 0, ids: vec![1, 2, 4, 2] };
    assert!(bad.validate(&cfg).is_err());
}

#[test]
fn encode_video_zero_input_gives_position_embeddings() {
    let (m, p) = tiny();
    let cfg = m.config().clone();
    let zero = Tensor::zeros(&[cfg.frames_per_video, cfg.raw_frame_dim]);
    let seq = m.encode_video_tokens(&p, 9, &zero).unwrap();
    assert_eq!(seq.video_id, 9);
    assert_eq!(seq.tokens, *p.get("video.temporal_pos").unwrap());
}

#[test]
fn encode_video_default_shape_and_mismatch() {
    let m = TemporalModel::new(ModelConfig::default()).unwrap();
    let p = m.init_params(1, 0.07);
    let cfg = m.config();
    let seq = m.encode_video_tokens(&p, 0, &raw_frames(cfg, 0.0)).unwrap();
    assert_eq!(seq.tokens.shape(), &[8, 64]);
    let wrong = Tensor::zeros(&[7, cfg.raw_frame_dim]);
    assert!(m.encode_video_tokens(&p, 0, &wrong).is_err());
}

#[test]
fn encode_video_projection_gradient() {
    let (m, p) = tiny();
    let raw = raw_frames(m.config(), 1.0);
    let report = check_flat(&p, |g, b| {
        let r = g.constant(raw.clone());
        let v = m.encode_video(g, b, r)?;
        let sq = g.mul(v, v)?;
        Ok(g.sum(sq))
    });
    assert!(report.passed(), "{report:?}");
}

#[test]
fn encode_text_shapes_determinism_and_order_sensitivity() {
    let m = TemporalModel::new(ModelConfig::default()).unwrap();
    let p = m.init_params(2, 0.07);
    let cfg = m.config().clone();
    let words: Vec<usize> = (0..cfg.max_text_len).map(|i| 10 + i).collect();
    let text = TokenizedText::from_words(0, &words, &cfg).unwrap();

    let run = |t: &TokenizedText| {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let out = m.encode_text(&mut g, &b, t, false).unwrap();
        g.value(out).clone()
    };
    let a = run(&text);
    assert_eq!(a.shape(), &[cfg.max_text_len + 2, cfg.d_model]);
    assert_eq!(a, run(&text));

    let mut swapped = text.clone();
    swapped.ids.swap(1, 2);
    assert_ne!(a, run(&swapped));

    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let long: Vec<usize> = vec![cfg.cls_token_id; cfg.max_text_len + 3];
    assert!(m.encode_ids(&mut g, &b, &long, false).is_err());
}

#[test]
fn causal_text_encoding_ignores_future_tokens() {
    let (m, p) = tiny();
    let cfg = m.config().clone();
    let a = TokenizedText::from_words(0, &[4, 5], &cfg).unwrap();
    let b = TokenizedText::from_words(0, &[4, 6], &cfg).unwrap();
    let run = |t: &TokenizedText| {
        let mut g = Graph::new();
        let bp = p.bind_frozen(&mut g);
        let out = m.encode_text(&mut g, &bp, t, true).unwrap();
        g.value(out).clone()
    };
    let (ra, rb) = (run(&a), run(&b));
    assert_eq!(ra.row(0), rb.row(0));
    assert_eq!(ra.row(1), rb.row(1));
    assert_ne!(ra.row(2), rb.row(2));
}

fn fuse_value(m: &TemporalModel, p: &ParamStore, frames: &Tensor, words: &Tensor, mask: &[bool]) -> Tensor {
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let f = g.constant(frames.clone());
    let w = g.constant(words.clone());
    let mut batch = MultiModalBatch::new(&mut g, f, w).unwrap();
    batch.attention_mask = mask.to_vec();
    let out = m.fuse(&mut g, &b, &batch).unwrap();
    g.value(out).clone()
}

#[test]
fn fuse_minimal_batch_and_length_limit() {
    let (m, p) = tiny();
    let f = Tensor::full(&[1, 4], 0.5);
    let w = Tensor::full(&[1, 4], -0.5);
    let out = fuse_value(&m, &p, &f, &w, &[true, true]);
    assert_eq!(out.shape(), &[2, 4]);

    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let fv = g.constant(Tensor::zeros(&[6, 4]));
    let wv = g.constant(Tensor::zeros(&[3, 4]));
    let batch = MultiModalBatch::new(&mut g, fv, wv).unwrap();
    assert!(m.fuse(&mut g, &b, &batch).is_err());
}

#[test]
fn masked_slot_content_does_not_reach_other_slots() {
    let (m, p) = tiny();
    let frames = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
    let words = Tensor::new(vec![2, 4], (0..8).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap();
    let mask = [true, false, true, true, true];
    let base = fuse_value(&m, &p, &frames, &words, &mask);
    let mut perturbed = frames.clone();
    for v in &mut perturbed.data_mut()[4..8] {
        *v += 3.0;
    }
    let other = fuse_value(&m, &p, &perturbed, &words, &mask);
    for slot in [0, 2, 3, 4] {
        assert_eq!(base.row(slot), other.row(slot), "slot {slot}");
    }
    // sanity: without the mask the perturbation does propagate
    let open = [true; 5];
    assert_ne!(
        fuse_value(&m, &p, &frames, &words, &open).row(0),
        fuse_value(&m, &p, &perturbed, &words, &open).row(0)
    );
}

#[test]
fn attention_rows_over_unmasked_slots_sum_to_one() {
    let (m, p) = tiny();
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let f = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
    let w = g.constant(Tensor::full(&[2, 4], 0.2));
    let mut batch = MultiModalBatch::new(&mut g, f, w).unwrap();
    batch.attention_mask = vec![true, true, false, true, true];
    let mut trace = Vec::new();
    m.fuse_traced(&mut g, &b, &batch, Some(&mut trace)).unwrap();
    assert_eq!(trace.len(), m.config().n_layers_fusion * m.config().n_heads);
    for probs in trace {
        let v = g.value(probs);
        for r in 0..v.rows() {
            let row = v.row(r);
            assert_eq!(row[2], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn fusion_depth_is_configurable() {
    for depth in [3, 6, 12] {
        let cfg = ModelConfig {
            n_layers_fusion: depth,
            ..tiny_config()
        };
        let m = TemporalModel::new(cfg).unwrap();
        let p = m.init_params(0, 0.07);
        assert!(p.get(&format!("fusion.layer{}.attn.wqkv", depth - 1)).is_some());
        assert!(p.get(&format!("fusion.layer{depth}.attn.wqkv")).is_none());
        let out = fuse_value(&m, &p, &Tensor::full(&[2, 4], 0.1), &Tensor::full(&[1, 4], 0.3), &[true; 3]);
        assert_eq!(out.shape(), &[3, 4]);
    }
}

#[test]
fn boundary_head_shape_and_zero_weights() {
    let (m, mut p) = tiny();
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let x = g.constant(Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64).sin()).collect()).unwrap());
    let r = m.boundary_head(&mut g, &b, x).unwrap();
    assert_eq!(g.shape(r), &[5, 2]);

    for name in ["head.boundary.w1", "head.boundary.w2"] {
        let t = p.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let x = g.constant(Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64).sin()).collect()).unwrap());
    let r = m.boundary_head(&mut g, &b, x).unwrap();
    let s = g.softmax(r, 0).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn match_head_symmetry_and_length() {
    let (m, p) = tiny();
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let x = g.constant(Tensor::full(&[2, 4], 0.7));
    let r = m.match_head(&mut g, &b, x).unwrap();
    let v = g.value(r).data();
    assert_eq!(v.len(), 2);
    assert_eq!(v[0], v[1]);
    let x = g.constant(Tensor::full(&[5, 4], 0.7));
    let r = m.match_head(&mut g, &b, x).unwrap();
    assert_eq!(g.shape(r), &[5]);
}

#[test]
fn head_gradients_match_finite_differences() {
    let (m, p) = tiny();
    let input = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.77).sin()).collect()).unwrap();
    let report = check_flat(&p, |g, b| {
        let x = g.constant(input.clone());
        let r = m.boundary_head(g, b, x)?;
        let r2 = g.mul(r, r)?;
        Ok(g.sum(r2))
    });
    assert!(report.passed(), "boundary: {report:?}");
    let report = check_flat(&p, |g, b| {
        let x = g.constant(input.clone());
        let r = m.match_head(g, b, x)?;
        g.cross_entropy(r, 1)
    });
    assert!(report.passed(), "match: {report:?}");
}

#[test]
fn heads_are_not_dead() {
    let (m, p) = tiny();
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let x = g.param(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.4).cos()).collect()).unwrap());
    let r = m.boundary_head(&mut g, &b, x).unwrap();
    let c = g.slice_cols(r, 0, 1).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().norm() > 1e-8);

    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let x = g.param(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.4).cos()).collect()).unwrap());
    let r = m.match_head(&mut g, &b, x).unwrap();
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().norm() > 1e-8);
}

#[test]
fn contrastive_projection_is_unit_norm_and_scale_invariant() {
    let (m, p) = tiny();
    let frames = Tensor::new(vec![2, 4], vec![0.3, -0.2, 0.5, 0.1, 0.9, 0.4, -0.3, 0.2]).unwrap();
    let cls = Tensor::vector(vec![0.2, 0.1, -0.4, 0.8]);
    let run = |f: &Tensor| {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let fv = g.constant(f.clone());
        let cv = g.constant(cls.clone());
        let (v, t) = m.project_for_contrastive(&mut g, &b, fv, cv).unwrap();
        (g.value(v).clone(), g.value(t).clone())
    };
    let (v, t) = run(&frames);
    assert!((v.norm() - 1.0).abs() < 1e-9);
    assert!((t.norm() - 1.0).abs() < 1e-9);
    let (v2, _) = run(&frames.map(|x| 2.0 * x));
    for (a, b) in v.data().iter().zip(v2.data()) {
        assert!((a - b).abs() < 1e-15);
    }

    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g);
    let fv = g.constant(Tensor::zeros(&[2, 4]));
    let cv = g.constant(cls.clone());
    assert!(matches!(
        m.project_for_contrastive(&mut g, &b, fv, cv),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let (m, p) = tiny();
    let (_, p2) = tiny();
    assert_eq!(p, p2);
    let words = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap();
    let frames = Tensor::new(vec![2, 4], (0..8).map(|i| (i as f64 * 0.2).cos()).collect()).unwrap();
    let a = fuse_value(&m, &p, &frames, &words, &[true; 5]);
    let b = fuse_value(&m, &p2, &frames, &words, &[true; 5]);
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (_, p) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.json");
    p.save_json(&path).unwrap();
    let q = ParamStore::load_json(&path).unwrap();
    assert_eq!(p.len(), q.len());
    for ((na, a), (nb, b)) in p.iter().zip(q.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn compatibility_check_lists_mismatched_shapes() {
    let (_, p) = tiny();
    let other = TemporalModel::new(ModelConfig {
        d_model: 6,
        ..tiny_config()
    })
    .unwrap()
    .init_params(0, 0.07);
    let err = p.check_compatible(&other).unwrap_err().to_string();
    assert!(err.contains("video.proj.w") && err.contains("[3, 4]") && err.contains("[3, 6]"), "{err}");
    p.check_compatible(&p.clone()).unwrap();
}
