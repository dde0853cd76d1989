use proptest::prelude::*;
use rand::SeedableRng;

use fedcpu::bound::{optimality_gap_bound, BoundConstants, ScheduleEntry};
use fedcpu::coeff_select::mismatch;
use fedcpu::lattice::{LatticeKind, LatticeSpec};
use fedcpu::learning::{generate_blobs, partition_dataset, BlobSpec, PartitionMode};
use fedcpu::seed::SimRng;

fn kind() -> impl Strategy<Value = LatticeKind> {
    prop_oneof![
        Just(LatticeKind::Identity),
        Just(LatticeKind::Hexagonal),
        Just(LatticeKind::E8)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoder_fixes_lattice_points(k in kind(), scale in 0.1f64..3.0, z in prop::collection::vec(-20i64..20, 8)) {
        let lat = LatticeSpec::new(k, scale).unwrap();
        let g = lat.generator();
        let n = lat.block_dim();
        let zc = nalgebra::DVector::from_iterator(n, z[..n].iter().map(|&v| v as f64));
        let p: Vec<f64> = (g * zc).iter().copied().collect();
        let q = lat.nearest_point(&p).unwrap().point;
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn decoder_output_is_lattice_point(k in kind(), scale in 0.1f64..3.0, x in prop::collection::vec(-10f64..10.0, 8)) {
        let lat = LatticeSpec::new(k, scale).unwrap();
        let q = lat.nearest_point(&x[..lat.block_dim()]).unwrap().point;
        prop_assert!(lat.contains(&q, 1e-9));
    }

    #[test]
    fn mismatch_is_scale_invariant(a in prop::collection::vec(0i64..50, 1..8), c in 1i64..20) {
        prop_assume!(a.iter().any(|&v| v > 0));
        let scaled: Vec<i64> = a.iter().map(|v| v * c).collect();
        let (m, ms) = (mismatch(&a), mismatch(&scaled));
        prop_assert!((m - ms).abs() <= 1e-12 * m);
        prop_assert!(m >= 1.0 / a.len() as f64 - 1e-12 && m <= 1.0 + 1e-12);
    }

    #[test]
    fn bound_grows_with_qmse(q1 in 0.0f64..1.0, dq in 0.0f64..1.0, lr in 0.001f64..0.2, t in 1usize..6) {
        let c = BoundConstants::default();
        let sched = |q: f64| -> Vec<ScheduleEntry> {
            (0..t).map(|_| ScheduleEntry { lr, a: vec![1, 2, 1], qmse: q }).collect()
        };
        let lo = optimality_gap_bound(&c, &sched(q1), 2, 10).unwrap().value;
        let hi = optimality_gap_bound(&c, &sched(q1 + dq), 2, 10).unwrap().value;
        prop_assert!(hi >= lo);
    }

    #[test]
    fn iid_partition_covers_every_sample(k in 1usize..12, seed in 0u64..1000) {
        let mut rng = SimRng::seed_from_u64(seed);
        let spec = BlobSpec { train_samples: 300, test_samples: 10, ..Default::default() };
        let (train, _) = generate_blobs(&spec, &mut rng).unwrap();
        let sharded = partition_dataset(&train, k, PartitionMode::Iid, 1.0, &mut rng).unwrap();
        prop_assert_eq!(sharded.shards.len(), k);
        prop_assert_eq!(sharded.sizes().iter().sum::<usize>(), train.len());
        prop_assert!(sharded.sizes().iter().all(|&n| n > 0));
    }

    #[test]
    fn noniid_shards_hold_two_classes(k in 2usize..10, seed in 0u64..1000) {
        let mut rng = SimRng::seed_from_u64(seed);
        let spec = BlobSpec { classes: 4, train_samples: 400, test_samples: 10, ..Default::default() };
        let (train, _) = generate_blobs(&spec, &mut rng).unwrap();
        let sharded = partition_dataset(&train, k, PartitionMode::Noniid, 1.0, &mut rng).unwrap();
        prop_assert_eq!(sharded.sizes().iter().sum::<usize>(), train.len());
        for (i, shard) in sharded.shards.iter().enumerate() {
            let allowed = [(2 * i) % 4, (2 * i + 1) % 4];
            prop_assert!(shard.labels().iter().all(|l| allowed.contains(l)));
        }
    }
}

#[test]
fn constant_schedule_matches_geometric_sum() {
    let c = BoundConstants {
        smoothness: 2.0,
        pl: 0.5,
        grad_var: 1.5,
        initial_gap: 3.0,
    };
    let (lr, tau, batch, k, t) = (0.02, 4usize, 32usize, 5usize, 25usize);
    let sched: Vec<ScheduleEntry> = (0..t)
        .map(|_| ScheduleEntry {
            lr,
            a: vec![1; k],
            qmse: 0.0,
        })
        .collect();
    let got = optimality_gap_bound(&c, &sched, tau, batch).unwrap().value;
    let tf = tau as f64;
    let cc = 1.0 - lr * tf * c.pl;
    let e = c.smoothness.powi(2) * lr.powi(3) / 2.0 * (tf * (tf - 1.0) / 2.0) * c.grad_var / batch as f64
        + c.smoothness / 2.0 * lr * lr * c.grad_var / batch as f64 * tf / k as f64;
    let want = cc.powi(t as i32) * c.initial_gap + e * (1.0 - cc.powi(t as i32)) / (1.0 - cc);
    assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
}
