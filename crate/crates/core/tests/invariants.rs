use proptest::prelude::*;

use purge_gate::adapt::{entropy, select_purge_size};
use purge_gate::cloud::{dist_sq, Point, PointCloud};
use purge_gate::corruptions::{apply_corruption, CorruptionKind, CorruptionSpec};
use purge_gate::model::Logits;
use purge_gate::tokenizer::{farthest_point_centers, knn_indices, tokenize};

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), min..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fps_picks_distinct_points(pts in cloud(1, 60), frac in 0.0f64..1.0, start in 0usize..1000) {
        let n = pts.len();
        let count = 1 + ((n - 1) as f64 * frac) as usize;
        let c = PointCloud::new(pts, None).unwrap();
        let idx = farthest_point_centers(&c, count, start % n).unwrap();
        prop_assert_eq!(idx.len(), count);
        prop_assert_eq!(idx[0], start % n);
        let mut s = idx.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), count);
    }

    #[test]
    fn knn_is_sorted_by_distance(pts in cloud(1, 60), k_frac in 0.0f64..1.0, c in prop::array::uniform3(-1.0f64..1.0)) {
        let k = 1 + ((pts.len() - 1) as f64 * k_frac) as usize;
        let idx = knn_indices(&pts, &c, k);
        prop_assert_eq!(idx.len(), k);
        let d: Vec<f64> = idx.iter().map(|&i| dist_sq(&pts[i], &c)).collect();
        prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        let worst = d[k - 1];
        let closer = pts.iter().filter(|p| dist_sq(p, &c) < worst).count();
        prop_assert!(closer < k);
    }

    #[test]
    fn tokens_are_local_offsets(pts in cloud(20, 80)) {
        let c = PointCloud::new(pts.clone(), None).unwrap();
        let t = tokenize(&c, 8, 4, 0).unwrap();
        prop_assert_eq!(t.tokens.len(), 8);
        for (tok, &src) in t.tokens.iter().zip(&t.source_indices) {
            prop_assert_eq!(tok.center, pts[src]);
            prop_assert_eq!(tok.neighborhood.len(), 4);
            for (off, &j) in tok.neighborhood.iter().zip(&tok.neighbor_indices) {
                for a in 0..3 {
                    prop_assert!((off[a] - (pts[j][a] - tok.center[a])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn corruptions_keep_labels_and_finite_points(
        pts in cloud(32, 96),
        kind in 0usize..CorruptionKind::ALL.len(),
        severity in 1u8..=5,
        seed in any::<u64>(),
    ) {
        let c = PointCloud::new(pts, Some(2)).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::ALL[kind], severity, seed).unwrap();
        let out = apply_corruption(&c, &spec).unwrap();
        prop_assert_eq!(out.label, Some(2));
        prop_assert!(!out.points().is_empty());
        prop_assert!(out.points().iter().all(|p| p.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn entropy_is_bounded(z in prop::collection::vec(-50.0f64..50.0, 2..8)) {
        let h = entropy(&Logits(z.clone()));
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (z.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn selection_returns_minimum_entropy(arms in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6)) {
        let per: Vec<(usize, Logits)> = arms.into_iter().enumerate().map(|(i, z)| (2 * i, Logits(z))).collect();
        let (l, _) = select_purge_size(&per).unwrap();
        let h = |l: usize| entropy(&per.iter().find(|p| p.0 == l).unwrap().1);
        let min = per.iter().map(|p| entropy(&p.1)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(h(l), min);
        let first = per.iter().find(|p| entropy(&p.1) == min).unwrap().0;
        prop_assert_eq!(l, first);
    }
}
