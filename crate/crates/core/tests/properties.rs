//! Property tests for the library's structural invariants: orthogonality,
//! idempotence, least-squares optimality, edit algebra, metric symmetry,
//! and serialization round trips.

use latent_axes::axes::{build_bank, extend_axis, fit_axis, ExtensionMode, LatentDataset};
use latent_axes::editing::{apply_edit, apply_plan, traverse, EditPlan};
use latent_axes::image::ImageGrid;
use latent_axes::io;
use latent_axes::linalg::{
    cosine_similarity, gram_schmidt, residual_perp, solve_ols, Matrix, Vector,
};
use latent_axes::losses::{pixel_loss, PixelLossKind};
use latent_axes::metrics::psnr;
use latent_axes::toyworld::make_world;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn vecs_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..10, 1usize..5).prop_flat_map(|(dim, count)| {
        prop::collection::vec(prop::collection::vec(-5.0..5.0f64, dim), count)
    })
}

fn seeded_image(h: usize, w: usize, seed: u64) -> ImageGrid {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    ImageGrid::from_fn(h, w, |_, _| rng.gen::<f64>())
}

proptest! {
    #![proptest_config(cfg(192))]

    #[test]
    fn gram_schmidt_output_is_orthonormal_and_spans(inputs in vecs_strategy()) {
        let vectors: Vec<Vector> = inputs
            .iter()
            .map(|v| Vector::new(v.clone()).unwrap())
            .collect();
        if let Ok(out) = gram_schmidt(&vectors, 1e-9) {
            for i in 0..out.len() {
                for j in 0..out.len() {
                    let target = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((out[i].dot(&out[j]) - target).abs() <= 1e-10);
                }
            }
            // First output keeps the first input's direction exactly.
            let first = vectors[0].div_scalar(vectors[0].norm());
            for i in 0..first.dim() {
                prop_assert_eq!(out[0][i], first[i]);
            }
            // Span preserved: every input is reproduced by its projections.
            for v in &vectors {
                let mut recon = Vector::zeros(v.dim());
                for e in &out {
                    recon = recon.axpy(e.dot(v), e);
                }
                let err = recon.axpy(-1.0, v).norm();
                prop_assert!(err <= 1e-8 * v.norm().max(1.0));
            }
        }
    }

    #[test]
    fn residual_perp_idempotent_and_basis_order_free(inputs in vecs_strategy()) {
        let vectors: Vec<Vector> = inputs
            .iter()
            .map(|v| Vector::new(v.clone()).unwrap())
            .collect();
        prop_assume!(vectors.len() >= 2);
        let (head, tail) = vectors.split_at(vectors.len() - 1);
        let basis = match gram_schmidt(head, 1e-9) {
            Ok(b) => b,
            Err(_) => return Ok(()),
        };
        let v = &tail[0];
        let r1 = residual_perp(v, &basis).unwrap();
        let r2 = residual_perp(&r1, &basis).unwrap();
        let scale = v.norm().max(1.0);
        prop_assert!(r2.axpy(-1.0, &r1).norm() <= 1e-12 * scale);
        for e in &basis {
            prop_assert!(e.dot(&r1).abs() <= 1e-12 * scale);
        }
        let mut reversed = basis.clone();
        reversed.reverse();
        let r3 = residual_perp(v, &reversed).unwrap();
        prop_assert!(r3.axpy(-1.0, &r1).norm() <= 1e-12 * scale);
    }

    #[test]
    fn ols_satisfies_normal_equations(
        rows in 4usize..24,
        cols in 1usize..5,
        seed in any::<u64>(),
        intercept in any::<bool>(),
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x = Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect(),
        )
        .unwrap();
        let y = Vector::new((0..rows).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()).unwrap();
        let sol = solve_ols(&x, &y, intercept).unwrap();

        // Residual of the normal equations on the augmented design.
        let q = if intercept { cols + 1 } else { cols };
        let design = |r: usize, c: usize| -> f64 {
            if intercept {
                if c == 0 { 1.0 } else { x.get(r, c - 1) }
            } else {
                x.get(r, c)
            }
        };
        let mut xty_inf: f64 = 0.0;
        let mut resid_inf: f64 = 0.0;
        for c in 0..q {
            let mut xty = 0.0;
            let mut xtr = 0.0;
            for r in 0..rows {
                let mut pred = 0.0;
                for c2 in 0..q {
                    pred += design(r, c2) * sol.weights[c2];
                }
                xty += design(r, c) * y[r];
                xtr += design(r, c) * (y[r] - pred);
            }
            xty_inf = xty_inf.max(xty.abs());
            resid_inf = resid_inf.max(xtr.abs());
        }
        prop_assert!(resid_inf <= 1e-8 * xty_inf.max(1.0), "resid {resid_inf}");
    }

    #[test]
    fn cosine_similarity_symmetric_and_bounded(
        a in prop::collection::vec(-5.0..5.0f64, 2..8),
        b_seed in any::<u64>(),
    ) {
        let dim = a.len();
        let mut rng = ChaCha12Rng::seed_from_u64(b_seed);
        let b: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let va = Vector::new(a).unwrap();
        let vb = Vector::new(b).unwrap();
        prop_assume!(va.norm() > 1e-9 && vb.norm() > 1e-9);
        let ab = cosine_similarity(&va, &vb).unwrap();
        let ba = cosine_similarity(&vb, &va).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn psnr_symmetric_and_shift_invariant(seed in any::<u64>(), shift in -0.4..0.4f64) {
        let a = seeded_image(12, 12, seed);
        let b = seeded_image(12, 12, seed.wrapping_add(1));
        let pa = psnr(&a, &b, 1.0).unwrap();
        let pb = psnr(&b, &a, 1.0).unwrap();
        prop_assert_eq!(pa, pb);
        let shifted = |img: &ImageGrid| {
            ImageGrid::new(
                img.height(),
                img.width(),
                img.pixels().iter().map(|p| p + shift).collect(),
            )
            .unwrap()
        };
        let ps = psnr(&shifted(&a), &shifted(&b), 1.0).unwrap();
        prop_assert!((pa - ps).abs() <= 1e-9);
    }

    #[test]
    fn pixel_losses_nonnegative_zero_and_symmetric(seed in any::<u64>()) {
        let a = seeded_image(10, 10, seed);
        let b = seeded_image(10, 10, seed.wrapping_add(9));
        for kind in [PixelLossKind::Mse, PixelLossKind::Mae, PixelLossKind::LogCosh] {
            let ab = pixel_loss(kind, &a, &b).unwrap();
            let ba = pixel_loss(kind, &b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-15);
            prop_assert_eq!(pixel_loss(kind, &a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn fit_axis_direction_is_label_scale_equivariant(
        seed in any::<u64>(),
        c in 0.1..10.0f64,
    ) {
        let world = make_world(6, 2, 0.0, 0.05, 8, 8, seed % 1000).unwrap();
        let ds = world.sample_dataset(40, seed.wrapping_add(1)).unwrap();
        let scaled = LatentDataset::new(
            ds.attr_names().to_vec(),
            ds.latents().to_vec(),
            (0..ds.len())
                .map(|i| ds.label_row(i).iter().map(|v| c * v).collect())
                .collect(),
        )
        .unwrap();
        let d1 = fit_axis(&ds, "attr00").unwrap().direction;
        let d2 = fit_axis(&scaled, "attr00").unwrap().direction;
        let diff = d1.axpy(-1.0, &d2).norm();
        prop_assert!(diff <= 1e-12, "direction moved by {diff}");
    }

    #[test]
    fn edits_commute_and_cancel_on_orthonormal_banks(
        seed in any::<u64>(),
        alpha1 in -4.0..4.0f64,
        alpha2 in -4.0..4.0f64,
    ) {
        let world = make_world(8, 3, 0.0, 0.0, 8, 8, seed % 1000).unwrap();
        let ds = world.sample_dataset(60, seed.wrapping_add(2)).unwrap();
        let bank = build_bank(&ds, world.names()).unwrap();
        let z = ds.latent(0);

        let ab = apply_plan(
            z,
            &bank,
            &EditPlan::new(vec![("attr00".into(), alpha1), ("attr01".into(), alpha2)]),
        )
        .unwrap();
        let ba = apply_plan(
            z,
            &bank,
            &EditPlan::new(vec![("attr01".into(), alpha2), ("attr00".into(), alpha1)]),
        )
        .unwrap();
        prop_assert!(ab.axpy(-1.0, &ba).norm() <= 1e-12 * z.norm().max(1.0));

        let cancel = apply_plan(
            z,
            &bank,
            &EditPlan::new(vec![("attr02".into(), alpha1), ("attr02".into(), -alpha1)]),
        )
        .unwrap();
        prop_assert!(cancel.axpy(-1.0, z).norm() <= 1e-12 * z.norm().max(1.0));
    }

    #[test]
    fn edit_linearity_in_the_noiseless_world(seed in any::<u64>(), alpha in -5.0..5.0f64) {
        let world = make_world(8, 3, 0.0, 0.0, 8, 8, seed % 1000).unwrap();
        let ds = world.sample_dataset(60, seed.wrapping_add(3)).unwrap();
        let bank = build_bank(&ds, world.names()).unwrap();
        let z = ds.latent(1);
        let before = world.true_scores(z).unwrap();
        for (j, name) in world.names().iter().enumerate() {
            let edited = apply_edit(z, &bank, name, alpha).unwrap();
            let after = world.true_scores(&edited).unwrap();
            let d = bank
                .direction(name, latent_axes::axes::AxisSource::Decoupled)
                .unwrap();
            let expect = alpha * world.true_dir(j).dot(d);
            prop_assert!(((after[j] - before[j]) - expect).abs() <= 1e-10 * alpha.abs().max(1.0));
        }
    }

    #[test]
    fn traverse_is_an_arithmetic_progression(
        seed in any::<u64>(),
        start in -4.0..0.0f64,
        span in 0.5..6.0f64,
        steps in 2usize..9,
    ) {
        let world = make_world(6, 2, 0.0, 0.0, 8, 8, seed % 1000).unwrap();
        let ds = world.sample_dataset(40, seed.wrapping_add(4)).unwrap();
        let bank = build_bank(&ds, world.names()).unwrap();
        let z = ds.latent(0);
        let end = start + span;
        let seq = traverse(z, &bank, "attr01", start, end, steps).unwrap();

        prop_assert_eq!(&seq[0], &apply_edit(z, &bank, "attr01", start).unwrap());
        prop_assert_eq!(&seq[steps - 1], &apply_edit(z, &bank, "attr01", end).unwrap());
        let d = bank
            .direction("attr01", latent_axes::axes::AxisSource::Decoupled)
            .unwrap();
        let h = (end - start) / (steps - 1) as f64;
        for i in 1..steps {
            let diff = seq[i].axpy(-1.0, &seq[i - 1]);
            let err = diff.axpy(-h, d).norm();
            prop_assert!(err <= 1e-12 * (1.0 + z.norm()));
        }
    }

    #[test]
    fn residual_extension_is_base_order_free(seed in any::<u64>()) {
        let world = make_world(12, 4, 0.4, 0.0, 8, 8, seed % 1000).unwrap();
        let ds = world.sample_dataset(120, seed.wrapping_add(5)).unwrap();
        let names = world.names().to_vec();
        let fwd: Vec<String> = names[..3].to_vec();
        let mut rev = fwd.clone();
        rev.reverse();

        let bank_fwd = build_bank(&ds, &fwd).unwrap();
        let bank_rev = build_bank(&ds, &rev).unwrap();
        let e1 = extend_axis(&bank_fwd, &ds, &names[3], ExtensionMode::Residual, None).unwrap();
        let e2 = extend_axis(&bank_rev, &ds, &names[3], ExtensionMode::Residual, None).unwrap();
        let d1 = &e1.extensions()[0].d_out;
        let d2 = &e2.extensions()[0].d_out;
        prop_assert!(d1.axpy(-1.0, d2).norm() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(cfg(32))]

    #[test]
    fn dataset_csv_round_trip(seed in any::<u64>(), n in 1usize..8, p in 1usize..6) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let latents: Vec<Vector> = (0..n)
            .map(|_| {
                Vector::new((0..p).map(|_| rng.gen::<f64>() * 1e3 - 5e2).collect()).unwrap()
            })
            .collect();
        let labels: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let ds = LatentDataset::new(vec!["u".into(), "v".into()], latents, labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        io::write_dataset(&path, &ds).unwrap();
        let back = io::read_dataset(&path).unwrap();
        prop_assert_eq!(ds, back);
    }

    #[test]
    fn bank_json_round_trip(seed in any::<u64>()) {
        let world = make_world(10, 3, 0.3, 0.01, 8, 8, seed % 1000).unwrap();
        let ds = world.sample_dataset(80, seed.wrapping_add(6)).unwrap();
        let names = world.names().to_vec();
        let bank = build_bank(&ds, &names[..2]).unwrap();
        let bank = extend_axis(&bank, &ds, &names[2], ExtensionMode::Residual, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        io::write_axis_bank(&path, &bank).unwrap();
        let back = io::read_axis_bank(&path).unwrap();
        prop_assert_eq!(bank, back);
    }

    #[test]
    fn f64raw_round_trip(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let img = ImageGrid::from_fn(h, w, |_, _| rng.gen::<f64>() * 2e6 - 1e6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.f64");
        io::write_image(&path, &img, io::ImageFormat::F64Raw).unwrap();
        let back = io::read_image(&path).unwrap();
        prop_assert_eq!(img, back);
    }

    #[test]
    fn build_bank_is_deterministic(seed in any::<u64>()) {
        let world = make_world(8, 3, 0.2, 0.02, 8, 8, seed % 1000).unwrap();
        let ds = world.sample_dataset(50, seed.wrapping_add(7)).unwrap();
        let names = world.names().to_vec();
        let a = build_bank(&ds, &names).unwrap();
        let b = build_bank(&ds, &names).unwrap();
        prop_assert_eq!(a, b);
    }
}
