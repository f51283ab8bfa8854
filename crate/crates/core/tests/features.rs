use std::sync::Arc;

use approx::assert_abs_diff_eq;
use hgm_core::features::*;
use hgm_core::geometry::{apply_transform, Payload, Point3, PointCloud, Rotation3, CANONICAL, INTRINSIC, LABELS};
use hgm_core::{HgmError, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .unwrap()
}

fn to_dmatrix(x: &Tensor) -> DMatrix<f64> {
    DMatrix::from_fn(x.rows(), x.cols(), |i, j| x.at(i, j) as f64)
}

fn cloud_with_canonical(seed: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point3> = (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(0.0..0.1),
            )
        })
        .collect();
    let canon = Tensor::new(vec![n, 3], pts.iter().flat_map(|p| p.to_f32()).collect()).unwrap();
    let labels = (0..n).map(|i| (i % 3) as i32).collect();
    PointCloud::new(pts)
        .unwrap()
        .with_payload(CANONICAL, Payload::Features(canon.clone()))
        .unwrap()
        .with_payload(INTRINSIC, Payload::Features(canon))
        .unwrap()
        .with_payload(LABELS, Payload::Labels(labels))
        .unwrap()
}

#[test]
fn pca_identical_rows_project_to_zero() {
    let row: Vec<f32> = (0..6).map(|i| i as f32 * 0.5).collect();
    let x = Tensor::from_rows(&vec![row.clone(); 5]).unwrap();
    let m = fit_pca(&x, 2).unwrap();
    for (a, b) in m.mean().iter().zip(&row) {
        assert_abs_diff_eq!(*a, *b as f64, epsilon = 1e-12);
    }
    assert!(pca_project(&m, &x).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn pca_rank_k_data_reconstructs() {
    // rows = offset + a·e1 + b·e2 within a 2-d affine subspace of R^6
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dirs = random_matrix(4, 2, 6);
    let rows: Vec<Vec<f32>> = (0..30)
        .map(|_| {
            let (a, b) = (rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0));
            (0..6).map(|j| 0.3 + a * dirs.at(0, j) + b * dirs.at(1, j)).collect()
        })
        .collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let m = fit_pca(&x, 2).unwrap();
    let z = pca_project(&m, &x).unwrap();
    for i in 0..x.rows() {
        for j in 0..6 {
            let rec: f64 = m.mean()[j]
                + (0..2).map(|c| z.at(i, c) as f64 * m.components()[c][j]).sum::<f64>();
            assert_abs_diff_eq!(rec, x.at(i, j) as f64, epsilon = 1e-6);
        }
    }
}

#[test]
fn pca_reconstruction_error_matches_svd_oracle() {
    let x = random_matrix(11, 100, 64);
    let k = 5;
    let m = fit_pca(&x, k).unwrap();

    let xm = to_dmatrix(&x);
    let mean = xm.row_mean();
    let mut centred = xm.clone();
    for mut r in centred.row_iter_mut() {
        r -= &mean;
    }
    let svd = centred.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let discarded: f64 = sv[k..].iter().map(|s| s * s).sum();

    let comps = DMatrix::from_fn(k, 64, |i, j| m.components()[i][j]);
    let z = &centred * comps.transpose();
    let recon = &z * &comps;
    let err = (&centred - recon).norm_squared();
    assert_abs_diff_eq!(err, discarded, epsilon = 1e-6);

    // orthonormal rows and the sign convention
    let gram = &comps * comps.transpose();
    assert!((gram - DMatrix::<f64>::identity(k, k)).abs().max() < 1e-6);
    for c in m.components() {
        let lead = c.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
        assert!(lead > 0.0);
    }
}

#[test]
fn pca_projection_examples() {
    let x = random_matrix(5, 40, 8);
    let m = fit_pca(&x, 3).unwrap();
    let mean: Vec<f32> = m.mean().iter().map(|v| *v as f32).collect();
    let at_mean = pca_project(&m, &Tensor::from_rows(std::slice::from_ref(&mean)).unwrap()).unwrap();
    assert!(at_mean.data().iter().all(|v| v.abs() < 1e-6));

    let shifted: Vec<f32> = m.mean().iter().zip(&m.components()[0]).map(|(a, b)| (a + b) as f32).collect();
    let e1 = pca_project(&m, &Tensor::from_rows(&[shifted]).unwrap()).unwrap();
    assert_abs_diff_eq!(e1.data()[0], 1.0, epsilon = 1e-6);
    assert_abs_diff_eq!(e1.data()[1], 0.0, epsilon = 1e-6);
    assert_abs_diff_eq!(e1.data()[2], 0.0, epsilon = 1e-6);

    let batch = pca_project(&m, &x).unwrap();
    for i in 0..x.rows() {
        let single = pca_project(&m, &Tensor::from_rows(&[x.row(i).to_vec()]).unwrap()).unwrap();
        assert_eq!(single.data(), batch.row(i));
    }
    assert!(matches!(pca_project(&m, &random_matrix(1, 2, 7)), Err(HgmError::DimMismatch(_))));
}

#[test]
fn pca_projections_are_centred_and_decorrelated() {
    let x = random_matrix(21, 200, 16);
    let m = fit_pca(&x, 4).unwrap();
    let xm = to_dmatrix(&x);
    let comps = DMatrix::from_fn(4, 16, |i, j| m.components()[i][j]);
    let mean = DMatrix::from_fn(1, 16, |_, j| m.mean()[j]);
    let mut centred = xm;
    for mut r in centred.row_iter_mut() {
        r -= &mean;
    }
    let z = centred * comps.transpose();
    for c in 0..4 {
        assert!(z.column(c).mean().abs() < 1e-9);
    }
    let cov = z.transpose() * &z / 200.0;
    let largest = cov.diagonal().max();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert!(cov[(i, j)].abs() < 1e-6 * largest);
            }
        }
    }
}

#[test]
fn similarity_descriptor_examples() {
    let anchors = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
    let f = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
    let s = similarity_descriptor(&f, &anchors).unwrap();
    assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
    assert_eq!(s.row(1)[2], 1.0);

    let f = random_matrix(8, 10, 8);
    let a = random_matrix(9, 3, 8);
    let s = similarity_descriptor(&f, &a).unwrap();
    for i in 0..10 {
        for j in 0..3 {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for c in 0..8 {
                let (x, y) = (f.at(i, c) as f64, a.at(j, c) as f64);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            assert_abs_diff_eq!(s.at(i, j) as f64, dot / (na.sqrt() * nb.sqrt()), epsilon = 1e-6);
        }
    }
    assert!(similarity_descriptor(&f, &random_matrix(1, 2, 5)).is_err());
}

#[test]
fn deformable_single_matching_anchor_gives_ones() {
    let cloud = cloud_with_canonical(2, 12);
    let cfg = SyntheticProviderConfig { noise_sigma: 0.0, ..Default::default() };
    #[derive(Debug)]
    struct Constant;
    impl FeatureProvider for Constant {
        fn id(&self) -> &str {
            "constant"
        }
        fn feature_dim(&self) -> usize {
            4
        }
        fn compute(&self, cloud: &PointCloud) -> hgm_core::Result<Tensor> {
            Ok(Tensor::full(&[cloud.len(), 4], 0.5))
        }
    }
    let anchors = Tensor::full(&[1, 4], 0.5);
    let d = build_descriptors(&cloud, ObjectCategory::Deformable, &Constant, Some(DescriptorContext::Anchors(&anchors)))
        .unwrap();
    assert_eq!(d.data.shape(), &[12, 4]);
    for i in 0..12 {
        assert_eq!(d.data.at(i, 0), 1.0);
        assert_eq!(&d.data.row(i)[1..], cloud.point(i).to_f32().as_slice());
    }

    let rigid = SyntheticRigidProvider::new(cfg).unwrap();
    let feats = rigid.compute(&cloud).unwrap();
    let pca = fit_pca(&feats, 5).unwrap();
    let d = build_descriptors(&cloud, ObjectCategory::Rigid, &rigid, Some(DescriptorContext::Pca(&pca))).unwrap();
    assert_eq!(d.data.cols(), 8);
    assert_eq!(d.route, DescriptorRoute::Pca { k: 5 });
    assert_eq!(d.coords(), cloud.coords());
}

#[test]
fn rigid_features_follow_the_object_not_the_pose() {
    let reg = ProviderRegistry::synthetic(SyntheticProviderConfig::default()).unwrap();
    let p = reg.provider_for(ObjectCategory::Rigid).unwrap();
    let cloud = cloud_with_canonical(4, 50);
    let moved = apply_transform(
        &cloud,
        &Rotation3::from_axis_angle(Point3::new(0.3, -1.0, 0.4), 1.1).unwrap(),
        Point3::new(0.5, -0.2, 0.9),
    );
    let a = p.compute(&cloud).unwrap();
    let b = p.compute(&moved).unwrap();
    // clipped noise bounds the gap at exactly 3σ, plus f32 rounding
    assert!(a.max_abs_diff(&b) <= 3.0 * 0.01 + 1e-6);
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn deformable_features_ignore_deformation() {
    let cfg = SyntheticProviderConfig { noise_sigma: 0.0, ..Default::default() };
    let p = SyntheticDeformableProvider::new(cfg).unwrap();
    let cloud = cloud_with_canonical(6, 40);
    let mut warped = cloud.clone();
    let pts = cloud.points().iter().map(|q| Point3::new(q.x, q.y, q.z + 0.2 * (5.0 * q.x).sin())).collect();
    warped.set_points(pts).unwrap();
    assert_eq!(p.compute(&cloud).unwrap(), p.compute(&warped).unwrap());
}

#[test]
fn registry_can_force_one_provider() {
    let mut reg = ProviderRegistry::synthetic(SyntheticProviderConfig::default()).unwrap();
    reg.force_single(SyntheticRigidProvider::ID).unwrap();
    assert_eq!(reg.provider_for(ObjectCategory::Deformable).unwrap().id(), "rigid-synth");
    assert!(reg.route(ObjectCategory::Rigid, "missing").is_err());
    let mut empty = ProviderRegistry::new();
    empty.register(Arc::new(SyntheticRigidProvider::new(SyntheticProviderConfig::default()).unwrap()));
    assert!(matches!(provider_for(ObjectCategory::Rigid, &empty), Err(HgmError::NoProvider(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn similarity_values_are_bounded(seed in 0u64..10_000) {
        let s = similarity_descriptor(&random_matrix(seed, 6, 5), &random_matrix(seed + 1, 4, 5)).unwrap();
        prop_assert!(s.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn descriptor_tail_is_the_cloud(seed in 0u64..10_000, n in 3usize..20) {
        let cloud = cloud_with_canonical(seed, n);
        let anchors = random_matrix(seed, 3, 64);
        let p = SyntheticDeformableProvider::new(SyntheticProviderConfig::default()).unwrap();
        let d = build_descriptors(&cloud, ObjectCategory::Deformable, &p, Some(DescriptorContext::Anchors(&anchors))).unwrap();
        prop_assert_eq!(d.data.cols(), 6);
        prop_assert_eq!(d.coords(), cloud.coords());
    }
}
