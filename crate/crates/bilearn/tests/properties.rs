//! Randomized structural invariants across the kernel, model, loss, and
//! split layers. Deterministic examples live next to the code they pin
//! down; this file checks what must hold for *any* valid input: symmetry
//! and positive semidefiniteness of built Gram matrices, the square-root
//! contract of both factorization routines, storage-format equivalences
//! and persistence of the model, the Fenchel-Young inequality for the
//! losses, and partition properties of the cross-validation splits.

use bilearn::data::{kfold_split, rmse};
use bilearn::kernels::{
    dirac_gram, factor_gram, linear_gram, pivoted_cholesky, AttrKernel, AttributeMatrix,
    GramFactor, GramMatrix, KernelSpec, Side,
};
use bilearn::losses::{loss_conjugate, loss_eval, loss_grad, LossKind, LossSpec};
use bilearn::model::{embed_new, predict_new, Coeffs, OperatorModel, RatingsDataset};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn matrix(rows: usize, cols: usize, half_width: f64) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-half_width..half_width, rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

#[derive(Debug, Clone)]
struct GramCase {
    spec: KernelSpec,
    n: usize,
    attrs: AttributeMatrix,
}

fn gram_case() -> impl Strategy<Value = GramCase> {
    (2usize..9, 1usize..4).prop_flat_map(|(n, d)| {
        let family = prop_oneof![
            Just(None),
            Just(Some(AttrKernel::Linear)),
            (0.3..3.0f64).prop_map(|h| Some(AttrKernel::Rbf { bandwidth: h })),
        ];
        (
            matrix(n, d, 2.0),
            0.0..=1.0f64,
            family,
            prop_oneof![Just(None), (0.0..2.0f64).prop_map(Some)],
        )
            .prop_map(move |(feats, w, fam, offset)| {
                let w = if fam.is_some() { w } else { 0.0 };
                GramCase {
                    spec: KernelSpec::new(Side::User, w, fam, offset).unwrap(),
                    n,
                    attrs: AttributeMatrix::new(feats).unwrap(),
                }
            })
    })
}

fn psd_case() -> impl Strategy<Value = GramMatrix> {
    (2usize..10, 1usize..5)
        .prop_flat_map(|(n, r)| matrix(n, r, 1.5))
        .prop_filter("needs a nonzero root", |a| a.norm() > 0.1)
        .prop_map(|a| GramMatrix::from_entries(&a * a.transpose()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn built_grams_are_symmetric_and_positive_semidefinite(case in gram_case()) {
        let k = case.spec.build_gram(case.n, Some(&case.attrs)).unwrap();
        let e = k.entries();
        prop_assert_eq!(e, &e.transpose());
        let eig = e.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max).max(1.0);
        let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(
            lmin >= -1e-10 * lmax,
            "eigenvalue {} on a kernel that mixes only psd parts",
            lmin
        );
    }

    #[test]
    fn mix_weight_blends_attribute_and_identity_entries(
        (n, w, feats) in (2usize..8, 0.0..=1.0f64, 1usize..4)
            .prop_flat_map(|(n, w, d)| (Just(n), Just(w), matrix(n, d, 2.0)))
    ) {
        let attrs = AttributeMatrix::new(feats).unwrap();
        let spec = KernelSpec::new(Side::Object, w, Some(AttrKernel::Linear), None).unwrap();
        let mixed = spec.build_gram(n, Some(&attrs)).unwrap();
        let attr_part = linear_gram(&attrs.l2_normalized()).unwrap();
        let dirac = dirac_gram(n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expected = attr_part.entries()[(i, j)] * w + dirac.entries()[(i, j)] * (1.0 - w);
                prop_assert!((mixed.entries()[(i, j)] - expected).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn both_square_roots_reproduce_their_gram(k in psd_case()) {
        let scale = 1.0 + k.entries().norm();
        let eig_root = factor_gram(&k, 1e-10).unwrap();
        let chol_root = pivoted_cholesky(&k, 1e-10).unwrap();
        for f in [&eig_root, &chol_root] {
            prop_assert!(f.m() <= k.n());
            let resid = (f.x() * f.x().transpose() - k.entries()).norm();
            prop_assert!(resid <= 1e-8 * scale, "residual {}", resid);
        }
        let cross = (eig_root.x() * eig_root.x().transpose()
            - chol_root.x() * chol_root.x().transpose())
        .norm();
        prop_assert!(cross <= 1e-8 * scale, "roots disagree by {}", cross);
    }
}

#[derive(Debug, Clone)]
struct ModelCase {
    xfac: GramFactor,
    yfac: GramFactor,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    mean: f64,
    data: RatingsDataset,
}

impl ModelCase {
    fn dense_model(&self) -> OperatorModel {
        let alpha = &self.u * self.v.transpose();
        OperatorModel::new(
            self.xfac.clone(),
            self.yfac.clone(),
            Coeffs::Dense(alpha),
            self.mean,
        )
        .unwrap()
    }

    fn factored_model(&self) -> OperatorModel {
        OperatorModel::new(
            self.xfac.clone(),
            self.yfac.clone(),
            Coeffs::Factored {
                u: self.u.clone(),
                v: self.v.clone(),
            },
            self.mean,
        )
        .unwrap()
    }
}

fn model_case() -> impl Strategy<Value = ModelCase> {
    (2usize..6, 2usize..6).prop_flat_map(|(n_x, n_y)| {
        (1usize..=n_x, 1usize..=n_y).prop_flat_map(move |(m_x, m_y)| {
            let r_cap = m_x.min(m_y);
            (1usize..=r_cap).prop_flat_map(move |r| {
                (
                    matrix(n_x, m_x, 2.0),
                    matrix(n_y, m_y, 2.0),
                    matrix(m_x, r, 1.0),
                    matrix(m_y, r, 1.0),
                    -1.0..1.0f64,
                    proptest::collection::vec((0..n_x, 0..n_y, -2.0..2.0f64), 1..12),
                )
                    .prop_map(move |(xf, yf, u, v, mean, obs)| ModelCase {
                        xfac: GramFactor::from_matrix(xf).unwrap(),
                        yfac: GramFactor::from_matrix(yf).unwrap(),
                        u,
                        v,
                        mean,
                        data: RatingsDataset::new(obs, n_x, n_y).unwrap(),
                    })
            })
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn factored_and_dense_coefficients_predict_identically(case in model_case()) {
        let dense = case.dense_model();
        let fact = case.factored_model();
        let pd = dense.predict_all(&case.data).unwrap();
        let pf = fact.predict_all(&case.data).unwrap();
        prop_assert_eq!(&pd, &pf);
        for (i, &(a, b, _)) in case.data.observations().iter().enumerate() {
            prop_assert_eq!(
                dense.predict_pair(a, b).unwrap(),
                fact.predict_pair(a, b).unwrap()
            );
            let single = fact.predict_pair(a, b).unwrap();
            prop_assert!((pf[i] - single).abs() <= 1e-10 * (1.0 + single.abs()));
        }
    }

    #[test]
    fn zero_padded_factor_columns_change_nothing(case in model_case()) {
        let r = case.u.ncols();
        let r_cap = case.u.nrows().min(case.v.nrows());
        let mut u2 = DMatrix::zeros(case.u.nrows(), r_cap);
        u2.view_mut((0, 0), (case.u.nrows(), r)).copy_from(&case.u);
        let mut v2 = DMatrix::zeros(case.v.nrows(), r_cap);
        v2.view_mut((0, 0), (case.v.nrows(), r)).copy_from(&case.v);
        let padded = OperatorModel::new(
            case.xfac.clone(),
            case.yfac.clone(),
            Coeffs::Factored { u: u2, v: v2 },
            case.mean,
        )
        .unwrap();
        let fact = case.factored_model();
        let base = fact.predict_all(&case.data).unwrap();
        let alt = padded.predict_all(&case.data).unwrap();
        for (p, q) in base.iter().zip(&alt) {
            prop_assert!((p - q).abs() <= 1e-10 * (1.0 + p.abs()));
        }
        let s_base = fact.singular_values();
        let s_pad = padded.singular_values();
        prop_assert!(s_base.numerical_rank() <= r);
        prop_assert!(s_pad.numerical_rank() <= r);
        for (a, b) in s_base.values().iter().zip(s_pad.values()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn models_survive_a_disk_round_trip(case in model_case(), tag_specs: bool) {
        let dir = tempfile::tempdir().unwrap();
        for (name, mut model) in [
            ("dense.bin", case.dense_model()),
            ("factored.bin", case.factored_model()),
        ] {
            if tag_specs {
                model = model.with_kernel_specs(
                    KernelSpec::dirac(Side::User),
                    KernelSpec::new(
                        Side::Object,
                        0.5,
                        Some(AttrKernel::Rbf { bandwidth: 1.25 }),
                        Some(0.5),
                    )
                    .unwrap(),
                );
            }
            let path = dir.path().join(name);
            model.save(&path).unwrap();
            let back = OperatorModel::load(&path).unwrap();
            prop_assert_eq!(&model, &back);
        }
    }
}

#[derive(Debug, Clone)]
struct EmbedCase {
    x_attrs: AttributeMatrix,
    y_attrs: AttributeMatrix,
    bandwidth: f64,
    alpha: DMatrix<f64>,
    mean: f64,
    pairs: Vec<(usize, usize)>,
}

fn embed_case() -> impl Strategy<Value = EmbedCase> {
    (2usize..7, 2usize..7, 1usize..3).prop_flat_map(|(n_x, n_y, d)| {
        (
            matrix(n_x, d, 2.0),
            matrix(n_y, d, 2.0),
            0.5..2.0f64,
            matrix(n_x, n_y, 1.0),
            -1.0..1.0f64,
            proptest::collection::vec((0..n_x, 0..n_y), 1..8),
        )
            .prop_map(|(xa, ya, bandwidth, alpha, mean, pairs)| EmbedCase {
                x_attrs: AttributeMatrix::new(xa).unwrap(),
                y_attrs: AttributeMatrix::new(ya).unwrap(),
                bandwidth,
                alpha,
                mean,
                pairs,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // A kernel vector copied from a training row must score exactly like the
    // training entity it came from. Mixing half the identity in keeps both
    // Gram matrices strictly positive definite, so the embedding is unique.
    #[test]
    fn kernel_row_embeddings_reproduce_training_predictions(case in embed_case()) {
        let fam = Some(AttrKernel::Rbf { bandwidth: case.bandwidth });
        let xspec = KernelSpec::new(Side::User, 0.5, fam, None).unwrap();
        let yspec = KernelSpec::new(Side::Object, 0.5, fam, None).unwrap();
        let kx = xspec.build_gram(case.x_attrs.rows(), Some(&case.x_attrs)).unwrap();
        let ky = yspec.build_gram(case.y_attrs.rows(), Some(&case.y_attrs)).unwrap();
        let fx = factor_gram(&kx, 1e-10).unwrap();
        let fy = factor_gram(&ky, 1e-10).unwrap();
        prop_assert_eq!(fx.m(), kx.n());
        prop_assert_eq!(fy.m(), ky.n());
        let model = OperatorModel::new(fx, fy, Coeffs::Dense(case.alpha.clone()), case.mean).unwrap();
        for &(a, b) in &case.pairs {
            let k_x: Vec<f64> = kx.entries().row(a).iter().cloned().collect();
            let k_y: Vec<f64> = ky.entries().row(b).iter().cloned().collect();
            let fresh = predict_new(&model, &k_x, &k_y).unwrap();
            let stored = model.predict_pair(a, b).unwrap();
            prop_assert!(
                (fresh - stored).abs() <= 1e-6 * (1.0 + stored.abs()),
                "{} vs {}", fresh, stored
            );
        }
    }
}

fn loss_case() -> impl Strategy<Value = (LossSpec, f64, f64)> {
    let spec = prop_oneof![
        (-3.0..3.0f64).prop_map(|t| LossSpec::new(LossKind::Squared, t).unwrap()),
        prop_oneof![Just(1.0), Just(-1.0)]
            .prop_map(|t| LossSpec::new(LossKind::Logistic, t).unwrap()),
    ];
    (spec, -5.0..5.0f64, -5.0..5.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn losses_obey_fenchel_young_with_equality_at_the_gradient((spec, v, w) in loss_case()) {
        let f = loss_eval(&spec, v);
        let at_grad = loss_grad(&spec, v);
        let tight = f + loss_conjugate(&spec, at_grad) - v * at_grad;
        prop_assert!(
            tight.abs() <= 1e-8 * (1.0 + f.abs() + (v * at_grad).abs()),
            "gap {} at the maximizing slope", tight
        );
        let elsewhere = loss_grad(&spec, w);
        let slack = f + loss_conjugate(&spec, elsewhere) - v * elsewhere;
        prop_assert!(
            slack >= -1e-9 * (1.0 + f.abs() + (v * elsewhere).abs()),
            "inequality violated by {}", slack
        );
    }
}

fn split_case() -> impl Strategy<Value = (RatingsDataset, usize, u64)> {
    (2usize..6).prop_flat_map(|k| {
        (k..60usize).prop_flat_map(move |len| {
            (proptest::collection::vec(-1.0..1.0f64, len), 0u64..1000).prop_map(
                move |(ts, seed)| {
                    let obs = ts.iter().enumerate().map(|(i, &t)| (i, 0, t)).collect();
                    (RatingsDataset::new(obs, len, 1).unwrap(), k, seed)
                },
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn folds_partition_observations_with_balanced_complements((d, k, seed) in split_case()) {
        let n = d.len();
        let folds = kfold_split(&d, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let sizes: Vec<usize> = folds.iter().map(|(_, test)| test.len()).collect();
        let lo = *sizes.iter().min().unwrap();
        let hi = *sizes.iter().max().unwrap();
        prop_assert!(lo >= 1 && hi - lo <= 1, "fold sizes {:?}", sizes);
        let mut all_tests: Vec<usize> = folds.iter().flat_map(|(_, t)| t.clone()).collect();
        all_tests.sort_unstable();
        prop_assert_eq!(all_tests, (0..n).collect::<Vec<_>>());
        for (train, test) in &folds {
            prop_assert_eq!(train.len() + test.len(), n);
            let mut merged: Vec<usize> = train.iter().chain(test).copied().collect();
            merged.sort_unstable();
            prop_assert_eq!(merged, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn folds_are_a_pure_function_of_the_seed((d, k, seed) in split_case()) {
        let once = kfold_split(&d, k, seed).unwrap();
        let twice = kfold_split(&d, k, seed).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn rmse_is_a_symmetric_shift_detecting_metric(
        (ts, c) in (proptest::collection::vec(-2.0..2.0f64, 1..30), -2.0..2.0f64)
    ) {
        prop_assert_eq!(rmse(&ts, &ts).unwrap(), 0.0);
        let shifted: Vec<f64> = ts.iter().map(|t| t + c).collect();
        let forward = rmse(&shifted, &ts).unwrap();
        let backward = rmse(&ts, &shifted).unwrap();
        prop_assert_eq!(forward, backward);
        prop_assert!((forward - c.abs()).abs() <= 1e-9 * (1.0 + c.abs()));
    }
}

#[test]
fn factorization_round_trips_a_dense_200_entity_gram() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 200;
    let d = 60;
    let a = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let k = GramMatrix::from_entries(&a * a.transpose()).unwrap();
    let scale = 1.0 + k.entries().norm();
    let eig_root = factor_gram(&k, 1e-10).unwrap();
    let chol_root = pivoted_cholesky(&k, 1e-10).unwrap();
    for f in [&eig_root, &chol_root] {
        assert_eq!(f.m(), d, "rank-{d} gram should yield a width-{d} root");
        let resid = (f.x() * f.x().transpose() - k.entries()).norm();
        assert!(resid <= 1e-8 * scale, "residual {resid:.3e}");
    }
}

#[test]
fn loading_rejects_foreign_and_truncated_files() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"NOTMODEL plus trailing bytes").unwrap();
    assert!(OperatorModel::load(&junk).is_err());

    let xf = GramFactor::from_matrix(DMatrix::from_element(3, 2, 1.0)).unwrap();
    let yf = GramFactor::from_matrix(DMatrix::from_element(4, 2, 0.5)).unwrap();
    let model =
        OperatorModel::new(xf, yf, Coeffs::Dense(DMatrix::from_element(2, 2, 0.1)), 0.0).unwrap();
    let whole = dir.path().join("model.bin");
    model.save(&whole).unwrap();
    let bytes = std::fs::read(&whole).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(OperatorModel::load(&cut).is_err());
    assert!(OperatorModel::load(&whole).is_ok());
}

#[test]
fn prediction_entry_points_reject_out_of_range_queries() {
    let xf = GramFactor::from_matrix(DMatrix::from_element(3, 2, 1.0)).unwrap();
    let yf = GramFactor::from_matrix(DMatrix::from_element(4, 2, 0.5)).unwrap();
    let model =
        OperatorModel::new(xf, yf, Coeffs::Dense(DMatrix::from_element(2, 2, 0.1)), 0.0).unwrap();
    assert!(model.predict_pair(3, 0).is_err());
    assert!(model.predict_pair(0, 4).is_err());
    assert!(embed_new(model.xfactor(), &[1.0, 2.0]).is_err());
    let other = RatingsDataset::new(vec![(0, 0, 1.0)], 5, 4).unwrap();
    assert!(model.predict_all(&other).is_err());
}
