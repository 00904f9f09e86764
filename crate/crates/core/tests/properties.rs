use proptest::prelude::*;
use rehearsal_core::netcore::{softmax, SIMPLEX_TOL};
use rehearsal_core::regularizers::{diversity_term, entropy_term, im_loss};
use rehearsal_core::{
    compute_acc, compute_fr, AccuracyMatrix, BufferEntry, DenseMatrix, PredictionBatch,
    ReplayBuffer,
};

fn logits() -> impl Strategy<Value = DenseMatrix> {
    (1usize..=16, 2usize..=12).prop_flat_map(|(b, k)| {
        prop::collection::vec(-500.0f64..500.0, b * k)
            .prop_map(move |data| DenseMatrix::new(b, k, data).unwrap())
    })
}

fn batch() -> impl Strategy<Value = PredictionBatch> {
    logits().prop_map(|z| softmax(&z).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_lie_on_simplex(z in logits()) {
        let p = softmax(&z).unwrap();
        for r in 0..p.batch_size() {
            let row = p.row(r);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        }
    }

    #[test]
    fn im_is_bounded(p in batch()) {
        let v = im_loss(&p);
        prop_assert!(v <= 1e-9);
        prop_assert!(v >= -(p.num_classes() as f64).ln() - 1e-9);
    }

    #[test]
    fn im_splits_into_entropy_and_diversity(p in batch()) {
        prop_assert!((im_loss(&p) - entropy_term(&p) - diversity_term(&p)).abs() <= 1e-12);
    }

    #[test]
    fn im_ignores_row_order(p in batch(), shift in 0usize..16) {
        let b = p.batch_size();
        let rows: Vec<Vec<f64>> = (0..b).map(|r| p.row((r + shift) % b).to_vec()).collect();
        let q = PredictionBatch::new(DenseMatrix::from_rows(&rows).unwrap()).unwrap();
        prop_assert!((im_loss(&p) - im_loss(&q)).abs() <= 1e-12);
    }

    #[test]
    fn buffer_respects_caps(
        budget in 1usize..6,
        k in 2usize..8,
        seed in any::<u64>(),
        labels in prop::collection::vec(0usize..8, 0..400),
    ) {
        let mut buf = ReplayBuffer::new(budget, k, seed);
        for (i, &l) in labels.iter().enumerate() {
            let entry = BufferEntry { features: vec![i as f64], label: l % k, stored_logits: None, insert_task: 0 };
            buf.insert(entry).unwrap();
            prop_assert!(buf.per_class_counts().values().all(|&c| c <= budget));
            prop_assert!(buf.len() <= buf.capacity());
        }
    }

    #[test]
    fn buffer_is_deterministic(seed in any::<u64>(), labels in prop::collection::vec(0usize..3, 0..200)) {
        let fill = || {
            let mut buf = ReplayBuffer::new(2, 3, seed);
            for (i, &l) in labels.iter().enumerate() {
                buf.insert(BufferEntry { features: vec![i as f64], label: l, stored_logits: None, insert_task: 0 }).unwrap();
            }
            buf.entries().to_vec()
        };
        prop_assert_eq!(fill(), fill());
    }

    #[test]
    fn metrics_shift_with_constant(
        t in 2usize..7,
        c in -0.2f64..0.2,
        cells in prop::collection::vec(0.2f64..0.8, 28),
    ) {
        let mut it = cells.iter().copied();
        let rows: Vec<Vec<f64>> = (0..t).map(|i| (i..t).map(|_| it.next().unwrap()).collect()).collect();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        let (a, b) = (AccuracyMatrix::from_rows(rows).unwrap(), AccuracyMatrix::from_rows(shifted).unwrap());
        prop_assert!((compute_acc(&b).unwrap() - compute_acc(&a).unwrap() - c).abs() <= 1e-12);
        prop_assert!((compute_fr(&b).unwrap() - compute_fr(&a).unwrap()).abs() <= 1e-12);
        let (acc, fr) = (compute_acc(&a).unwrap(), compute_fr(&a).unwrap());
        prop_assert!((0.0..=1.0).contains(&acc) && (-1.0..=1.0).contains(&fr));
    }
}
