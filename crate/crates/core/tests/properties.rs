mod common;

use cgkn::assimilation::cg_filter;
use cgkn::cli::content_hash;
use cgkn::diffcore::{Matrix, Tape};
use cgkn::eval::{correlation, nrmse};
use cgkn::models::{drift_batch, CgModel, Dims};
use cgkn::systems::{make_l96, make_psbse, make_psbse_with, Normalization, PsbseParams};
use cgkn::training::{total_loss, LossWeights, TrainSchedule};
use common::*;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> Matrix {
    Matrix::new(rows, cols, vals[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cg_drift_is_affine_in_latent(seed in 0u64..1000, a in -2.0f64..2.0, vals in prop::collection::vec(-2.0f64..2.0, 21)) {
        let m = toy_cgkn(seed);
        let u1 = matrix(3, 1, &vals[0..]);
        let v1 = matrix(3, 3, &vals[3..]);
        let v2 = matrix(3, 3, &vals[12..]);
        let mix = v1.scale(a).add(&v2.scale(1.0 - a));
        let (p1, q1) = drift_batch(&m, &u1, &v1).unwrap();
        let (p2, q2) = drift_batch(&m, &u1, &v2).unwrap();
        let (pm, qm) = drift_batch(&m, &u1, &mix).unwrap();
        let pe = p1.scale(a).add(&p2.scale(1.0 - a));
        let qe = q1.scale(a).add(&q2.scale(1.0 - a));
        for (x, y) in pm.data().iter().chain(qm.data()).zip(pe.data().iter().chain(qe.data())) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn loss_and_gradients_are_deterministic(seed in 0u64..1000) {
        let m = toy_cgkn(seed);
        let fw = toy_windows(seed, 3, TOY_N_S + 1);
        let dw = toy_windows(seed + 1, 2, TOY_N_L);
        for term in TERMS {
            let a = toy_loss(&m, term, &fw, &dw, true);
            let b = toy_loss(&m, term, &fw, &dw, true);
            prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
            prop_assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn total_loss_is_linear_in_weights(seed in 0u64..1000, c in 0.1f64..10.0) {
        let m = toy_cgkn(seed);
        let fw = toy_windows(seed, 3, TOY_N_S + 1);
        let dw = toy_windows(seed + 1, 2, TOY_N_L);
        let schedule = TrainSchedule { n_s: TOY_N_S, n_l: TOY_N_L, n_b: TOY_N_B, ..TrainSchedule::default() };
        let w = LossWeights::defaults(m.dims());
        let scaled = LossWeights { ae: c * w.ae, u: c * w.u, v: c * w.v, da: c * w.da };
        let eval = |w: &LossWeights| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, false);
            let l = total_loss(&mut tape, b.as_ref(), &m, w, &fw, &dw, &schedule, TOY_DT).unwrap();
            tape.scalar(l.total)
        };
        let (base, big) = (eval(&w), eval(&scaled));
        prop_assert!((big - c * base).abs() <= 1e-12 * big.abs().max(1.0));
    }

    #[test]
    fn psbse_quadratic_terms_conserve_energy(x in prop::array::uniform3(-10.0f64..10.0)) {
        let quad = make_psbse_with(PsbseParams { beta_x: 0.0, beta_y: 0.0, beta_z: 0.0, ..PsbseParams::default() });
        let q = quad.drift(&x);
        let dot: f64 = q.iter().zip(&x).map(|(a, b)| a * b).sum();
        let scale: f64 = x.iter().map(|v| v * v).sum::<f64>().powf(1.5) * 5.0;
        prop_assert!(dot.abs() <= 1e-9 * scale.max(1.0));
        prop_assert_eq!(make_psbse().drift(&x).len(), 3);
    }

    #[test]
    fn l96_quadratic_terms_conserve_energy(x in prop::collection::vec(-15.0f64..15.0, 4..48)) {
        let sys = make_l96(x.len(), 0.0, 0.5).unwrap();
        // Zero forcing leaves the quadratic part minus the damping -x_i.
        let q: Vec<f64> = sys.drift(&x).iter().zip(&x).map(|(d, xi)| d + xi).collect();
        let dot: f64 = q.iter().zip(&x).map(|(a, b)| a * b).sum();
        let scale: f64 = x.iter().map(|v| v.abs().powi(3)).sum();
        prop_assert!(dot.abs() <= 1e-9 * scale.max(1.0));
    }

    #[test]
    fn nrmse_matches_naive_loops(rows in 2usize..12, cols in 1usize..5, vals in prop::collection::vec(-5.0f64..5.0, 120)) {
        let t = matrix(rows, cols, &vals[..]);
        let a = matrix(rows, cols, &vals[60..]);
        let mut expect = 0.0;
        let mut degenerate = false;
        for c in 0..cols {
            let mut mean = 0.0;
            for r in 0..rows { mean += t[(r, c)]; }
            mean /= rows as f64;
            let mut var = 0.0;
            let mut se = 0.0;
            for r in 0..rows {
                var += (t[(r, c)] - mean) * (t[(r, c)] - mean);
                se += (t[(r, c)] - a[(r, c)]) * (t[(r, c)] - a[(r, c)]);
            }
            if var == 0.0 { degenerate = true; }
            expect += (se / rows as f64).sqrt() / (var / rows as f64).sqrt();
        }
        expect /= cols as f64;
        match nrmse(&t, &a) {
            Ok(v) => prop_assert!((v - expect).abs() <= 1e-12 * expect.max(1.0)),
            Err(_) => prop_assert!(degenerate),
        }
    }

    #[test]
    fn correlation_is_bounded_and_affine_invariant(vals in prop::collection::vec(-5.0f64..5.0, 40), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let x = &vals[..20];
        let y = &vals[20..];
        if let Ok(r) = correlation(x, y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let ya: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            prop_assert!((correlation(x, &ya).unwrap() - r).abs() < 1e-9);
        }
    }

    #[test]
    fn content_hash_changes_iff_bytes_change(a in prop::collection::vec(any::<u8>(), 0..64), b in prop::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(content_hash(&a) == content_hash(&b), a == b);
        prop_assert_eq!(content_hash(&a), content_hash(&a.clone()));
    }

    #[test]
    fn normalization_round_trips(vals in prop::collection::vec(-50.0f64..50.0, 30)) {
        let x = matrix(10, 3, &vals);
        if let Ok(n) = Normalization::fit(&x) {
            let back = n.invert(&n.apply(&x));
            for (p, q) in back.data().iter().zip(x.data()) {
                prop_assert!((p - q).abs() <= 1e-10 * (1.0 + q.abs()));
            }
        }
    }

    #[test]
    fn filter_covariance_stays_symmetric_psd(seed in 0u64..500) {
        let m = two_latent_linear();
        let (u1, _) = simulate_linear(&m, 400, 0.01, seed);
        let r0 = Matrix::identity(2).scale(0.5);
        let post = cg_filter(&m, &u1, 0.01, 0.0, &[0.0, 0.0], &r0).unwrap();
        prop_assert_eq!(post.len(), 401);
        for r in 0..post.len() {
            prop_assert!(post.var_v.row(r).iter().all(|v| *v > 0.0));
        }
        let last = post.cov.last().unwrap();
        prop_assert!((last[(0, 1)] - last[(1, 0)]).abs() < 1e-12);
        let det = last[(0, 0)] * last[(1, 1)] - last[(0, 1)] * last[(1, 0)];
        prop_assert!(det > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn tape_gradients_match_finite_differences(seed in 0u64..10_000) {
        for term in TERMS {
            let err = gradient_check(seed, term);
            prop_assert!(err < 1e-4, "{term:?}: relative error {err:e}");
        }
    }
}

#[test]
fn toy_dims_match_gradient_suite() {
    assert_eq!(
        toy_cgkn(0).dims(),
        Dims {
            d_u1: 1,
            d_u2: 2,
            d_v: 3
        }
    );
}
