use gradient_atoms::ekfac::{
    build_basis, eigendecompose, ekfac_correct_eigenvalues, estimate_factors, orthogonality_error,
    project, project_row, select_topk, unproject, ModuleEigen, TokenSample,
};
use gradient_atoms::{
    EkfacBasis, GradientSet, KfacStats, LambdaMode, ModuleRegistry, PreconditioningMode,
    ProjectionConfig,
};
use ndarray::{array, Array1, Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

fn rotation(theta: f64) -> Array2<f64> {
    let (s, c) = theta.sin_cos();
    array![[c, -s], [s, c]]
}

/// A random orthogonal matrix from the eigenvectors of a random symmetric one.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let m = Array2::from_shape_simple_fn((n, n), || StandardNormal.sample(rng));
    let sym = &m + &m.t();
    gradient_atoms::ekfac::symmetric_eigen(&sym).unwrap().0
}

fn basis_from_parts(
    shapes: &[(usize, usize)],
    parts: Vec<(Array2<f64>, Array2<f64>, Array1<f64>)>,
    k: usize,
) -> EkfacBasis {
    let registry = ModuleRegistry::from_shapes(
        shapes
            .iter()
            .enumerate()
            .map(|(i, &(o, n))| (format!("m{i}"), o, n)),
    )
    .unwrap();
    let mut eigen = Vec::new();
    let mut lambdas = Vec::new();
    for (q_a, q_s, lambda) in parts {
        eigen.push(ModuleEigen {
            eig_a: Array1::zeros(q_a.nrows()),
            eig_s: Array1::zeros(q_s.nrows()),
            kfac_lambda: Array1::zeros(lambda.len()),
            q_a,
            q_s,
        });
        lambdas.push(lambda);
    }
    EkfacBasis::new(registry, &eigen, lambdas, k, LambdaMode::Ekfac).unwrap()
}

/// Dense `(Q_S ⊗ Q_A)` acting on row-major flattened `out × in` matrices.
fn kron(q_s: &Array2<f64>, q_a: &Array2<f64>) -> Array2<f64> {
    let (o, n) = (q_s.nrows(), q_a.nrows());
    let mut out = Array2::zeros((o * n, o * n));
    for i in 0..o {
        for j in 0..n {
            for p in 0..o {
                for q in 0..n {
                    out[[p * n + q, i * n + j]] = q_s[[p, i]] * q_a[[q, j]];
                }
            }
        }
    }
    out
}

fn cfg(k: usize) -> ProjectionConfig {
    ProjectionConfig {
        k,
        epsilon: 1e-8,
        ..ProjectionConfig::default()
    }
}

fn max_abs(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a - b).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v))
}

#[test]
fn kfac_lambda_is_product_of_factor_eigenvalues() {
    let registry = ModuleRegistry::from_shapes([("m", 1, 2)]).unwrap();
    let stats = KfacStats {
        registry,
        modules: vec![gradient_atoms::ekfac::ModuleStats {
            a: array![[4.0, 0.0], [0.0, 1.0]],
            s: array![[9.0]],
        }],
        token_count: 1,
    };
    let eigen = eigendecompose(&estimate_factors(&stats).unwrap()).unwrap();
    assert_eq!(eigen[0].kfac_lambda, array![36.0, 9.0]);
}

#[test]
fn eigendecomposition_reconstructs_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Array2::from_shape_simple_fn((5, 5), || StandardNormal.sample(&mut rng));
    let a: Array2<f64> = m.dot(&m.t());
    let (q, vals) = gradient_atoms::ekfac::symmetric_eigen(&a).unwrap();
    let rebuilt = q.dot(&Array2::from_diag(&vals)).dot(&q.t());
    let err = (&rebuilt - &a)
        .mapv(f64::abs)
        .fold(0.0f64, |x, &y| x.max(y));
    assert!(err < 1e-8);
    assert!(orthogonality_error(q.view()) < 1e-8);
    assert!(vals.windows(2).into_iter().all(|w| w[0] >= w[1]));
}

#[test]
fn identity_factor_gives_full_projector() {
    let (q, _) = gradient_atoms::ekfac::symmetric_eigen(&Array2::eye(4)).unwrap();
    let proj = q.dot(&q.t());
    let err = (&proj - &Array2::<f64>::eye(4))
        .mapv(f64::abs)
        .fold(0.0f64, |x, &y| x.max(y));
    assert!(err < 1e-12);
}

#[test]
fn single_token_with_unit_rotated_gradient_gives_unit_lambda() {
    // Identity bases and all-ones a, δ make every rotated product equal 1.
    let registry = ModuleRegistry::from_shapes([("m", 2, 3)]).unwrap();
    let eigen = vec![ModuleEigen {
        q_a: Array2::eye(3),
        eig_a: Array1::zeros(3),
        q_s: Array2::eye(2),
        eig_s: Array1::zeros(2),
        kfac_lambda: Array1::zeros(6),
    }];
    let sample = TokenSample {
        inputs: vec![Array1::ones(3)],
        grads: vec![Array1::ones(2)],
    };
    let lambda = ekfac_correct_eigenvalues(&registry, &eigen, &[sample]).unwrap();
    assert_eq!(lambda[0], Array1::<f64>::ones(6));
}

#[test]
fn topk_examples() {
    assert_eq!(
        select_topk(array![3.0, 1.0, 2.0].view(), 2).unwrap(),
        vec![0, 2]
    );
    assert_eq!(
        select_topk(array![5.0, 5.0, 1.0].view(), 2).unwrap(),
        vec![0, 1]
    );
    assert_eq!(
        select_topk(array![1.0, 3.0, 2.0].view(), 3).unwrap(),
        vec![1, 2, 0]
    );
    assert!(select_topk(array![1.0].view(), 0).is_err());
    assert!(select_topk(array![1.0].view(), 2).is_err());
}

#[test]
fn scalar_module_preconditioning_arithmetic() {
    let basis = basis_from_parts(
        &[(1, 1)],
        vec![(array![[1.0]], array![[1.0]], array![3.0])],
        1,
    );
    let c = ProjectionConfig {
        k: 1,
        epsilon: 1.0,
        ..ProjectionConfig::default()
    };
    let z = project_row(&basis, &c, array![4.0].view()).unwrap();
    assert!((z[0] - 2.0).abs() < 1e-15);
}

#[test]
fn rotated_two_by_two_module_matches_dense_oracle() {
    let q_a = rotation(std::f64::consts::FRAC_PI_4);
    let q_s = rotation(0.3);
    let lambda = array![4.0, 3.0, 2.0, 1.0];
    let basis = basis_from_parts(
        &[(2, 2)],
        vec![(q_a.clone(), q_s.clone(), lambda.clone())],
        4,
    );
    let g = array![0.7, -1.2, 0.4, 2.0];
    let z = project_row(&basis, &cfg(4), g.view()).unwrap();
    let rotated = kron(&q_s, &q_a).t().dot(&g);
    // top-k order is by descending lambda, which here is the flat order
    let expect = &rotated / &lambda.mapv(|l| (l + 1e-8).sqrt());
    assert!(max_abs(&z, &expect) < 1e-12);
}

#[test]
fn unproject_of_project_is_the_dense_subspace_projector() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(o, n, k) in &[(3, 3, 4), (4, 4, 7), (2, 4, 8), (4, 1, 2)] {
        let q_a = random_orthogonal(n, &mut rng);
        let q_s = random_orthogonal(o, &mut rng);
        let lambda: Array1<f64> = (0..o * n)
            .map(|_| Uniform::new(0.1, 5.0).unwrap().sample(&mut rng))
            .collect();
        let basis = basis_from_parts(
            &[(o, n)],
            vec![(q_a.clone(), q_s.clone(), lambda.clone())],
            k,
        );
        let g: Array1<f64> = (0..o * n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let z = project_row(&basis, &cfg(k), g.view()).unwrap();
        let back = unproject(z.view(), &basis, &cfg(k)).unwrap();

        let big = kron(&q_s, &q_a);
        let cols = big.select(Axis(1), &basis.modules[0].topk);
        let oracle = cols.dot(&cols.t()).dot(&g);
        assert!(max_abs(&back, &oracle) < 1e-8, "{o}x{n} k={k}");
    }
}

#[test]
fn keep_mode_skips_the_eigenvalue_rescaling() {
    let basis = basis_from_parts(
        &[(1, 2)],
        vec![(Array2::eye(2), array![[1.0]], array![4.0, 1.0])],
        2,
    );
    let mut c = cfg(2);
    c.unproject_preconditioning = PreconditioningMode::Keep;
    let v = unproject(array![1.0, 1.0].view(), &basis, &c).unwrap();
    assert_eq!(v, array![1.0, 1.0]);
    c.unproject_preconditioning = PreconditioningMode::Invert;
    let v = unproject(array![1.0, 1.0].view(), &basis, &c).unwrap();
    assert!(max_abs(&v, &array![2.0, 1.0]) < 1e-8);
}

#[test]
fn registry_and_length_mismatch_are_rejected() {
    let basis = basis_from_parts(
        &[(1, 2)],
        vec![(Array2::eye(2), array![[1.0]], array![1.0, 1.0])],
        2,
    );
    assert!(project_row(&basis, &cfg(2), array![1.0].view()).is_err());
    assert!(unproject(array![1.0].view(), &basis, &cfg(2)).is_err());
    assert!(unproject(array![1.0].view(), &basis, &cfg(1)).is_err());
    let gs = GradientSet::new(
        ModuleRegistry::from_shapes([("other", 1, 2)]).unwrap(),
        Array2::zeros((1, 2)),
        vec!["a".into()],
    )
    .unwrap();
    assert!(project(&gs, &basis, &cfg(2), false).is_err());
}

/// Rank-one per-token gradients δ aᵀ with independent Gaussian δ ~ N(0, S) and
/// a ~ N(0, A) have exactly Kronecker covariance S ⊗ A.
fn kronecker_samples(
    o: usize,
    n: usize,
    count: usize,
    seed: u64,
) -> (ModuleRegistry, Vec<TokenSample>, GradientSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_a = random_orthogonal(n, &mut rng);
    let q_s = random_orthogonal(o, &mut rng);
    let sd_a: Array1<f64> = (0..n).map(|j| 2.0 / (1.0 + j as f64)).collect();
    let sd_s: Array1<f64> = (0..o).map(|i| 1.5 / (1.0 + 0.5 * i as f64)).collect();
    let registry = ModuleRegistry::from_shapes([("m", o, n)]).unwrap();
    let mut samples = Vec::with_capacity(count);
    let mut values = Array2::zeros((count, o * n));
    for r in 0..count {
        let za: Array1<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let zs: Array1<f64> = (0..o).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = q_a.dot(&(&za * &sd_a));
        let d = q_s.dot(&(&zs * &sd_s));
        for i in 0..o {
            for j in 0..n {
                values[[r, i * n + j]] = d[i] * a[j];
            }
        }
        samples.push(TokenSample {
            inputs: vec![a],
            grads: vec![d],
        });
    }
    let ids = (0..count).map(|i| format!("g{i}")).collect();
    let gs = GradientSet::new(registry.clone(), values, ids).unwrap();
    (registry, samples, gs)
}

#[test]
fn full_projection_whitens_kronecker_gradients() {
    let (o, n) = (4, 5);
    let (registry, samples, gs) = kronecker_samples(o, n, 5000, 21);
    let stats = KfacStats::from_samples(registry, &samples).unwrap();
    let c = cfg(o * n);
    let basis = build_basis(&stats, Some(&samples), &c).unwrap();
    let proj = project(&gs, &basis, &c, false).unwrap();
    let vars = proj.values.var_axis(Axis(0), 0.0);
    let inside = vars.iter().filter(|&&v| (0.8..=1.25).contains(&v)).count();
    assert!(inside as f64 >= 0.95 * vars.len() as f64, "{vars}");
}

#[test]
fn ekfac_and_kfac_eigenvalues_agree_on_kronecker_data() {
    let (o, n) = (3, 4);
    let (registry, samples, _) = kronecker_samples(o, n, 5000, 33);
    let stats = KfacStats::from_samples(registry.clone(), &samples).unwrap();
    let eigen = eigendecompose(&estimate_factors(&stats).unwrap()).unwrap();
    let ekfac = ekfac_correct_eigenvalues(&registry, &eigen, &samples).unwrap();
    let kfac = &eigen[0].kfac_lambda;
    let top = kfac.fold(0.0f64, |m, &v| m.max(v));
    for (e, k) in ekfac[0].iter().zip(kfac.iter()) {
        if *k > 0.01 * top {
            assert!((e - k).abs() / k < 0.2, "ekfac {e} vs kfac {k}");
        }
    }
}

#[test]
fn white_noise_inputs_give_scaled_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sd = 0.5;
    let registry = ModuleRegistry::from_shapes([("m", 2, 6)]).unwrap();
    let samples: Vec<TokenSample> = (0..10_000)
        .map(|_| TokenSample {
            inputs: vec![(0..6)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                })
                .collect()],
            grads: vec![(0..2).map(|_| StandardNormal.sample(&mut rng)).collect()],
        })
        .collect();
    let stats = KfacStats::from_samples(registry, &samples).unwrap();
    let target = Array2::<f64>::eye(6) * (sd * sd);
    let err = (&stats.modules[0].a - &target)
        .mapv(f64::abs)
        .fold(0.0f64, |m, &v| m.max(v));
    assert!(err < 0.1, "{err}");
}

#[test]
fn one_hot_inputs_give_rank_one_factor() {
    let registry = ModuleRegistry::from_shapes([("m", 1, 3)]).unwrap();
    let samples: Vec<TokenSample> = (0..5)
        .map(|i| TokenSample {
            inputs: vec![array![1.0, 0.0, 0.0]],
            grads: vec![array![i as f64]],
        })
        .collect();
    let factors = estimate_factors(&KfacStats::from_samples(registry, &samples).unwrap()).unwrap();
    let mut e1 = Array2::zeros((3, 3));
    e1[[0, 0]] = 1.0;
    assert_eq!(factors.modules[0].a, e1);
    let a = &factors.modules[0].a;
    assert_eq!(a - &a.t(), Array2::<f64>::zeros((3, 3)));
}

#[test]
fn basis_file_round_trips() {
    let (registry, samples, _) = kronecker_samples(3, 3, 200, 8);
    let stats = KfacStats::from_samples(registry, &samples).unwrap();
    let basis = build_basis(&stats, Some(&samples), &cfg(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("basis.gat");
    basis.write(&path).unwrap();
    let back = EkfacBasis::read(&path).unwrap();
    assert_eq!(back, basis);
    assert_eq!(back.fingerprint(), basis.fingerprint());

    let stats_path = dir.path().join("stats.gat");
    stats.write(&stats_path).unwrap();
    assert_eq!(KfacStats::read(&stats_path).unwrap(), stats);
}

#[test]
fn ekfac_mode_needs_token_samples() {
    let (registry, samples, _) = kronecker_samples(2, 2, 50, 9);
    let stats = KfacStats::from_samples(registry, &samples).unwrap();
    assert!(build_basis(&stats, None, &cfg(2)).is_err());
    let kfac = ProjectionConfig {
        lambda_mode: LambdaMode::Kfac,
        ..cfg(2)
    };
    assert!(build_basis(&stats, None, &kfac).is_ok());
}

fn two_module_basis(seed: u64) -> EkfacBasis {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [(3, 4), (2, 3)];
    let parts = shapes
        .iter()
        .map(|&(o, n)| {
            let lambda: Array1<f64> = (0..o * n)
                .map(|_| Uniform::new(0.01, 3.0).unwrap().sample(&mut rng))
                .collect();
            (
                random_orthogonal(n, &mut rng),
                random_orthogonal(o, &mut rng),
                lambda,
            )
        })
        .collect();
    basis_from_parts(&shapes, parts, 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn project_inverts_unproject(seed in 0u64..10, z in prop::collection::vec(-3.0f64..3.0, 10)) {
        let basis = two_module_basis(seed);
        let z = Array1::from(z);
        let c = cfg(5);
        let v = unproject(z.view(), &basis, &c).unwrap();
        let back = project_row(&basis, &c, v.view()).unwrap();
        let scale = z.mapv(f64::abs).fold(1.0f64, |m, &x| m.max(x));
        prop_assert!(max_abs(&back, &z) <= 1e-10 * scale);
    }

    #[test]
    fn unproject_project_is_idempotent(seed in 0u64..10, g in prop::collection::vec(-3.0f64..3.0, 18)) {
        let basis = two_module_basis(seed);
        let c = cfg(5);
        let g = Array1::from(g);
        let once = unproject(project_row(&basis, &c, g.view()).unwrap().view(), &basis, &c).unwrap();
        let twice = unproject(project_row(&basis, &c, once.view()).unwrap().view(), &basis, &c).unwrap();
        prop_assert!(max_abs(&once, &twice) <= 1e-10);
        // the retained component never grows
        prop_assert!(once.dot(&once) <= g.dot(&g) + 1e-10);
    }
}
