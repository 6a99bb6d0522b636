use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Full-sort oracle: position of `target` after a stable sort by descending score.
fn oracle_rank(row: &[f64], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == target).unwrap()
}

/// Exhaustive pair search with the same tie order: smaller end, then smaller start.
fn oracle_decode(r: &Tensor) -> (usize, usize) {
    let m = r.rows();
    let mut best = (0, 0);
    let mut score = f64::NEG_INFINITY;
    for ed in 0..m {
        for st in 0..=ed {
            let s = r.at(st, 0) + r.at(ed, 1);
            if s > score {
                score = s;
                best = (st, ed);
            }
        }
    }
    best
}

/// Counts shared and covered indices one by one.
fn oracle_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let hi = a.1.max(b.1);
    let (mut inter, mut union) = (0, 0);
    for i in 0..=hi {
        let ia = a.0 <= i && i <= a.1;
        let ib = b.0 <= i && i <= b.1;
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    inter as f64 / union as f64
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, levels: Option<u32>) -> Tensor {
    let data = (0..r * c)
        .map(|_| match levels {
            Some(l) => rng.random_range(0..l) as f64,
            None => rng.random_range(-1.0..1.0),
        })
        .collect();
    Tensor::new(vec![r, c], data).unwrap()
}

#[test]
fn identity_similarity_gives_perfect_recall() {
    let r = recall_at_k(&Tensor::identity(5), &[0, 1, 2, 3, 4], &[1, 5]).unwrap();
    assert_eq!(r.recall_at[&1], 1.0);
    assert_eq!(r.recall_at[&5], 1.0);
    assert_eq!(r.n_queries, 5);
}

#[test]
fn anti_diagonal_truth_gives_zero_recall() {
    let r = recall_at_k(&Tensor::identity(4), &[3, 2, 1, 0], &[1]).unwrap();
    assert_eq!(r.recall_at[&1], 0.0);
}

#[test]
fn recall_errors() {
    assert!(recall_at_k(&Tensor::identity(3), &[0, 1, 2], &[4]).is_err());
    assert!(recall_at_k(&Tensor::identity(3), &[0, 1, 2], &[0]).is_err());
    assert!(recall_at_k(&Tensor::identity(3), &[0, 1], &[1]).is_err());
    assert!(recall_at_k(&Tensor::identity(3), &[0, 1, 3], &[1]).is_err());
}

#[test]
fn ties_break_toward_lower_index() {
    let sim = Tensor::full(&[2, 3], 0.5);
    let r = recall_at_k(&sim, &[0, 2], &[1, 2, 3]).unwrap();
    assert_eq!(r.recall_at[&1], 0.5);
    assert_eq!(r.recall_at[&2], 0.5);
    assert_eq!(r.recall_at[&3], 1.0);
}

#[test]
fn recall_matches_full_sort_oracle_on_all_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for q in 1..=16 {
        for gsz in 1..=16 {
            let levels = if (q + gsz) % 2 == 0 { Some(3) } else { None };
            let sim = random_matrix(&mut rng, q, gsz, levels);
            let gt: Vec<usize> = (0..q).map(|_| rng.random_range(0..gsz)).collect();
            let ks: Vec<usize> = (1..=gsz).collect();
            let r = recall_at_k(&sim, &gt, &ks).unwrap();
            for &k in &ks {
                let want = (0..q).filter(|&i| oracle_rank(sim.row(i), gt[i]) < k).count() as f64 / q as f64;
                assert_eq!(r.recall_at[&k], want);
            }
            assert_eq!(r.recall_at[&gsz], 1.0);
            assert!(ks.windows(2).all(|w| r.recall_at[&w[0]] <= r.recall_at[&w[1]]));
        }
    }
}

#[test]
fn boundary_metric_examples() {
    let perfect = boundary_metrics(&[(1, 3), (0, 0)], &[(1, 3), (0, 0)]).unwrap();
    assert_eq!(perfect, LocalizationResult { start_acc: 1.0, end_acc: 1.0, both_acc: 1.0, mean_iou: 1.0 });
    let r = boundary_metrics(&[(0, 3)], &[(2, 5)]).unwrap();
    assert!((r.mean_iou - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(temporal_iou((0, 1), (3, 4)), 0.0);
    let mixed = boundary_metrics(&[(1, 3), (2, 4)], &[(1, 4), (2, 4)]).unwrap();
    assert_eq!(mixed.start_acc, 1.0);
    assert_eq!(mixed.end_acc, 0.5);
    assert_eq!(mixed.both_acc, 0.5);
    assert!(mixed.both_acc <= mixed.start_acc.min(mixed.end_acc));
    assert!(matches!(boundary_metrics(&[], &[]), Err(Error::Empty(_))));
    assert!(boundary_metrics(&[(3, 1)], &[(0, 1)]).is_err());
}

#[test]
fn iou_matches_interval_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let mut iv = || {
            let a = rng.random_range(0..64usize);
            let b = rng.random_range(0..64usize);
            (a.min(b), a.max(b))
        };
        let (a, b) = (iv(), iv());
        assert_eq!(temporal_iou(a, b), oracle_iou(a, b));
        assert_eq!(temporal_iou(a, b), temporal_iou(b, a));
        assert_eq!(temporal_iou(a, b) == 1.0, a == b);
    }
}

#[test]
fn decode_examples() {
    let mut r = Tensor::zeros(&[6, 2]);
    r.data_mut()[2 * 2] = 5.0;
    r.data_mut()[4 * 2 + 1] = 5.0;
    assert_eq!(decode_boundary(&r).unwrap(), (2, 4));
    // column argmaxes out of order: start peak at 4, end peak at 1
    let mut r = Tensor::zeros(&[6, 2]);
    r.data_mut()[4 * 2] = 5.0;
    r.data_mut()[2] = 3.0;
    r.data_mut()[3] = 5.0;
    let (st, ed) = decode_boundary(&r).unwrap();
    assert!(st <= ed);
    assert_eq!((st, ed), oracle_decode(&r));
    assert_eq!(decode_boundary(&Tensor::zeros(&[1, 2])).unwrap(), (0, 0));
    assert!(decode_boundary(&Tensor::zeros(&[3, 3])).is_err());
}

#[test]
fn decode_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..1000 {
        let m = rng.random_range(1..=64);
        let levels = if i % 3 == 0 { Some(4) } else { None };
        let r = random_matrix(&mut rng, m, 2, levels);
        assert_eq!(decode_boundary(&r).unwrap(), oracle_decode(&r));
    }
}

#[test]
fn heatmap_of_identical_embeddings_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heat.csv");
    let e = Tensor::full(&[3, 4], 0.5);
    let t = Tensor::full(&[2, 4], 2.0);
    let mut b = BTreeMap::new();
    b.insert(7u64, (1, 2));
    export_similarity_heatmap(&e, &t, &b, &path).unwrap();
    let back = read_heatmap(&path).unwrap();
    assert_eq!(back.shape(), &[3, 2]);
    assert!(back.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(heatmap_sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(side["boundaries"]["7"], serde_json::json!([1, 2]));
    assert!(matches!(
        export_similarity_heatmap(&e, &t, &b, &dir.path().join("no/such/dir.csv")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn boundary_contrast_examples() {
    assert_eq!(boundary_contrast(&[0.0, 1.0, 1.0, 0.0], 1, 2), Some(1.0));
    assert_eq!(boundary_contrast(&[0.5, 0.5], 0, 1), None);
}

proptest! {
    #[test]
    fn decode_always_ordered(data in proptest::collection::vec(-5.0f64..5.0, 2..128)) {
        let m = data.len() / 2;
        let r = Tensor::new(vec![m, 2], data[..2 * m].to_vec()).unwrap();
        let (st, ed) = decode_boundary(&r).unwrap();
        prop_assert!(st <= ed && ed < m);
        prop_assert_eq!((st, ed), oracle_decode(&r));
    }

    #[test]
    fn iou_symmetric_and_bounded(a0 in 0usize..40, a1 in 0usize..40, b0 in 0usize..40, b1 in 0usize..40) {
        let a = (a0.min(a1), a0.max(a1));
        let b = (b0.min(b1), b0.max(b1));
        let v = temporal_iou(a, b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, temporal_iou(b, a));
    }
}
