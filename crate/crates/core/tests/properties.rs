use dcond::augment::{channel_multi_formation, multi_formation, ImageBatch};
use dcond::condense::{matching_objective, Method};
use dcond::data::{
    init_synthetic, load_dataset, load_synthetic, per_class_partition, save_dataset, save_synthetic,
    stratified_split, InitMode, LabeledDataset,
};
use dcond::discrepancy::{characteristic_discrepancy, hausdorff_distance, wasserstein1, Frequencies};
use dcond::harness::AccuracyStats;
use dcond::kernels::{gram_matrix, kernel_eval, mmd_squared, KernelSpec};
use dcond::matrix::Matrix;
use dcond::models::{sgd_train, Activation, Mlp, TrainConfig};
use dcond::spaces::{fit_linear_autoencoder, push_forward_dataset, Direction, LinearAutoencoder};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(0.0f64..1.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn matrix_with_cols(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Matrix> {
    rows.prop_flat_map(move |r| {
        prop::collection::vec(0.0f64..1.0, r * cols).prop_map(move |v| Matrix::from_vec(r, cols, v).unwrap())
    })
}

/// Every class gets at least two rows.
fn dataset() -> impl Strategy<Value = LabeledDataset> {
    (2usize..=3, 1usize..=3, 2usize..=5).prop_flat_map(|(c, n, per)| {
        prop::collection::vec(0.0f64..1.0, c * per * n).prop_map(move |v| {
            let x = Matrix::from_vec(c * per, n, v).unwrap();
            let labels = (0..c * per).map(|i| i % c).collect();
            LabeledDataset::new(x, labels, c).unwrap()
        })
    })
}

fn pair(cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (Matrix, Matrix)> {
    cols.prop_flat_map(|n| (matrix_with_cols(1..=6, n), matrix_with_cols(1..=6, n)))
}

fn min_eigenvalue(k: &Matrix) -> f64 {
    let m = DMatrix::from_row_slice(k.rows(), k.cols(), k.as_slice());
    m.symmetric_eigenvalues().min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_csv_round_trip(d in dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_dataset(&d, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        prop_assert_eq!(back.labels(), d.labels());
        prop_assert!(back.features().max_abs_diff(d.features()) <= 1e-12);
    }

    #[test]
    fn synthetic_round_trip_and_subsample(d in dataset(), per in 1usize..=2, seed: u64) {
        let s = init_synthetic(&d, per, InitMode::Subsample, seed).unwrap();
        prop_assert_eq!(s.len(), per * d.class_count());
        for (row, &y) in s.features().iter_rows().zip(s.labels()) {
            let found = d.features().iter_rows().zip(d.labels()).any(|(r, &l)| l == y && r == row);
            prop_assert!(found);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        save_synthetic(&s, &path).unwrap();
        let back = load_synthetic(&path).unwrap();
        prop_assert_eq!(back.labels(), s.labels());
        prop_assert!(back.features().max_abs_diff(s.features()) <= 1e-12);
    }

    #[test]
    fn partition_is_a_permutation(d in dataset(), seed: u64) {
        let part = per_class_partition(&d).unwrap();
        let mut all: Vec<usize> = part.iter().flat_map(|(_, idx)| idx.to_vec()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        let (train, held) = stratified_split(&d, 0.5, seed).unwrap();
        prop_assert_eq!(train.len() + held.len(), d.len());
        for y in 0..d.class_count() {
            prop_assert!(!train.class_rows(y).is_empty());
        }
    }

    #[test]
    fn gamma_exponential_is_symmetric(
        (x, y) in (1usize..=5).prop_flat_map(|n| (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(0.0f64..1.0, n))),
        gamma in 0.1f64..=2.0,
        c in 0.1f64..5.0,
    ) {
        let k = KernelSpec::gamma_exponential(gamma, c).unwrap();
        prop_assert_eq!(kernel_eval(&k, &x, &y).unwrap(), kernel_eval(&k, &y, &x).unwrap());
    }

    #[test]
    fn gram_matrices_are_psd(x in matrix(1..=20, 1..=4), family in 0usize..4, seed in 0u64..1000) {
        let n = x.cols();
        let spec = match family {
            0 => KernelSpec::gaussian(1.3).unwrap(),
            1 => KernelSpec::gamma_exponential(1.0, 0.7).unwrap(),
            2 => KernelSpec::Linear,
            _ => KernelSpec::random_feature(32, n, 0.8, seed).unwrap(),
        };
        let k = gram_matrix(&spec, &x, &x).unwrap();
        prop_assert!(min_eigenvalue(&k) >= -1e-8);
    }

    #[test]
    fn ntk_gram_is_psd_and_symmetric(x in matrix_with_cols(1..=8, 2), seed in 0u64..100) {
        let m = Mlp::new(&[2, 5, 2], Activation::Tanh, seed).unwrap();
        let spec = KernelSpec::empirical_ntk(vec![m]).unwrap();
        let k = gram_matrix(&spec, &x, &x).unwrap();
        prop_assert!(k.max_abs_diff(&k.transpose()) <= 1e-12);
        prop_assert!(min_eigenvalue(&k) >= -1e-8);
    }

    #[test]
    fn gaussian_mmd_separates_distinct_sets((t, s) in pair(1..=3)) {
        let same = t.rows() == s.rows() && {
            let mut a: Vec<Vec<u64>> = t.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            let mut b: Vec<Vec<u64>> = s.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            a.sort();
            b.sort();
            a == b
        };
        prop_assume!(!same);
        prop_assert!(mmd_squared(&KernelSpec::gaussian(1.0).unwrap(), &t, &s).unwrap() > 0.0);
    }

    #[test]
    fn pullback_of_identity_is_the_base_kernel((t, s) in pair(1..=4)) {
        let base = KernelSpec::gaussian(0.9).unwrap();
        let pb = KernelSpec::pullback(LinearAutoencoder::identity(t.cols()), base.clone());
        for (x, y) in t.iter_rows().zip(s.iter_rows()) {
            prop_assert_eq!(kernel_eval(&pb, x, y).unwrap(), kernel_eval(&base, x, y).unwrap());
        }
    }

    #[test]
    fn pullback_mmd_equals_latent_mmd(d in dataset(), s in matrix_with_cols(1..=5, 3)) {
        prop_assume!(d.dim() == 3);
        let ae = fit_linear_autoencoder(&d, 2).unwrap();
        let base = KernelSpec::gaussian(1.1).unwrap();
        let pb = KernelSpec::pullback(ae.clone(), base.clone());
        let lhs = mmd_squared(&pb, d.features(), &s).unwrap();
        let zt = push_forward_dataset(&ae, d.features(), Direction::Encode).unwrap();
        let zs = push_forward_dataset(&ae, &s, Direction::Encode).unwrap();
        prop_assert!((lhs - mmd_squared(&base, &zt, &zs).unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn autoencoder_stays_orthonormal_after_round_trip(d in dataset(), m in 1usize..=3) {
        prop_assume!(m < d.dim());
        let ae = fit_linear_autoencoder(&d, m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.json");
        ae.save(&path).unwrap();
        let back = LinearAutoencoder::load(&path).unwrap();
        let cols = back.columns();
        for i in 0..m {
            for j in 0..m {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn w1_and_hausdorff_vanish_only_on_equal_sets((t, s) in pair(1..=3)) {
        let mut rev = t.clone();
        for i in 0..t.rows() {
            rev.row_mut(i).copy_from_slice(t.row(t.rows() - 1 - i));
        }
        prop_assert!(wasserstein1(&t, &rev).unwrap().abs() <= 1e-12);
        prop_assert_eq!(hausdorff_distance(&t, &rev).unwrap(), 0.0);
        let dh = hausdorff_distance(&t, &s).unwrap();
        prop_assert_eq!(dh, hausdorff_distance(&s, &t).unwrap());
        let shifted = {
            let mut m = t.clone();
            m.map_inplace(|v| v + 0.5);
            m
        };
        prop_assert!(wasserstein1(&t, &shifted).unwrap() > 0.0);
        prop_assert!(hausdorff_distance(&t, &shifted).unwrap() > 0.0);
    }

    #[test]
    fn characteristic_discrepancy_is_a_pseudometric(
        sets in (1usize..=3).prop_flat_map(|n| prop::collection::vec(matrix_with_cols(1..=6, n), 3)),
        seed: u64,
    ) {
        let f = Frequencies::Sampled { count: 16, seed };
        let cd = |a: usize, b: usize| characteristic_discrepancy(&sets[a], &sets[b], &f).unwrap();
        prop_assert!((cd(0, 1) - cd(1, 0)).abs() <= 1e-12);
        prop_assert!(cd(0, 2) <= cd(0, 1) + cd(1, 2) + 1e-12);
        prop_assert!(cd(0, 0) <= 1e-12);
    }

    #[test]
    fn matching_objectives_vanish_at_the_real_set(d in dataset(), seed in 0u64..100) {
        let m = Mlp::new(&[d.dim(), 4, d.class_count()], Activation::Relu, seed).unwrap();
        for method in [Method::Dm, Method::Gm, Method::Moment, Method::Sam] {
            let (v, _) = matching_objective(method, false, &m, &d, d.features(), d.labels()).unwrap();
            prop_assert!(v.abs() <= 1e-12, "{} gave {}", method.name(), v);
        }
    }

    #[test]
    fn objectives_ignore_row_order_within_classes(d in dataset(), s in matrix_with_cols(2..=4, 1), seed in 0u64..100) {
        prop_assume!(d.dim() == 1);
        let c = d.class_count();
        let sl: Vec<usize> = (0..s.rows()).map(|i| i % c).collect();
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.reverse();
        let permuted = d.subset(&order);
        let m = Mlp::new(&[1, 4, c], Activation::Tanh, seed).unwrap();
        for method in [Method::Dm, Method::Gm, Method::Moment, Method::Sam] {
            let a = matching_objective(method, false, &m, &d, &s, &sl).unwrap().0;
            let b = matching_objective(method, false, &m, &permuted, &s, &sl).unwrap().0;
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn training_is_deterministic_and_snapshot_zero_is_init(d in dataset(), seed in 0u64..100) {
        let m = Mlp::new(&[d.dim(), 4, d.class_count()], Activation::Relu, seed).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 2, seed, ..TrainConfig::default() };
        let (a, traj) = sgd_train(&m, d.features(), d.labels(), &cfg, true).unwrap();
        let (b, _) = sgd_train(&m, d.features(), d.labels(), &cfg, false).unwrap();
        prop_assert_eq!(a.params(), b.params());
        let traj = traj.unwrap();
        prop_assert_eq!(traj.snapshot(0), m.params());
        prop_assert_eq!(traj.snapshot(traj.len() - 1), a.params());
    }

    #[test]
    fn formation_keeps_range_and_leading_rows(
        (b, c, h, w) in (1usize..=2, 1usize..=3, 2usize..=4, 2usize..=4),
        seed: u64,
    ) {
        let len = b * c * h * w;
        let data: Vec<f64> = (0..len).map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64 / 999.0).collect();
        let x = ImageBatch::new([b, c, h, w], data).unwrap();
        let mf = multi_formation(&x, 1).unwrap();
        let cm = channel_multi_formation(&x, seed).unwrap();
        for v in mf.as_slice().iter().chain(cm.as_slice()) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(v));
        }
        prop_assert_eq!(&cm.as_slice()[..len], x.as_slice());
    }

    #[test]
    fn accuracy_stats_are_bounded(values in prop::collection::vec(0.0f64..=1.0, 1..10)) {
        let s = AccuracyStats::from_values(values);
        prop_assert!((0.0..=1.0).contains(&s.mean));
        prop_assert!(s.std >= 0.0);
    }
}
