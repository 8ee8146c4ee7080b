mod common;

use common::{config, estimator, random_fn, rel, rng};
use nalgebra::DMatrix;
use rand::Rng;
use robust_mlmc::grid::{GridFunction, GridHierarchy};
use robust_mlmc::mlmc::SeedSequence;
use robust_mlmc::optim::{frozen_drift, parabola_linesearch, MlmcModel};
use robust_mlmc::pde::{assemble, hessian_pieces, Reaction};

#[test]
fn operator_is_symmetric_positive_definite_with_compact_stencil() {
    let mut r = rng(1);
    for (dim, m0) in [(1, 8), (2, 4), (2, 8)] {
        let h = GridHierarchy::new(m0, 0, dim).unwrap();
        let k = GridFunction::new(0, (0..h.len(0)).map(|_| r.random_range(-2.0_f64..2.0).exp()).collect());
        let dense = assemble(&k, dim).unwrap().to_dense();
        let n = dense.len();
        let a = DMatrix::from_fn(n, n, |i, j| dense[i][j]);
        assert!((&a - a.transpose()).amax() < 1e-14);
        let min = a.clone().symmetric_eigen().eigenvalues.min();
        assert!(min > 0.0, "d={dim} m={m0}: {min}");
        for i in 0..n {
            let nnz = (0..n).filter(|&j| a[(i, j)] != 0.0).count();
            assert!(nnz <= 2 * dim + 1);
        }
    }
}

#[test]
fn single_realization_hessian_is_symmetric() {
    let c = config("problem1-desk", |c| c.problem.max_level = 1);
    let spec = c.problem.to_spec().unwrap();
    let est = estimator(&c);
    let h = spec.hierarchy;
    let mut r = rng(2);
    let k = est.field().conductivity(robust_mlmc::field::SampleKey::new(4, 0), 1).unwrap();
    let u = random_fn(&h, 1, &mut r);
    let real = spec.realize(&k, &u).unwrap();
    let p = vec![0.0; h.len(1)];
    let beta = spec.mask_on(1);
    let apply = |du: &GridFunction| -> GridFunction {
        let (_, dp) = hessian_pieces(&spec, &real, &p, du, None).unwrap();
        let v = (0..du.len())
            .map(|i| 2.0 * spec.alpha * du.values[i] + beta.values[i] * dp[i])
            .collect();
        GridFunction::new(1, v)
    };
    for _ in 0..10 {
        let v = random_fn(&h, 1, &mut r);
        let w = random_fn(&h, 1, &mut r);
        let a = apply(&v).inner_product(&w).unwrap();
        let b = v.inner_product(&apply(&w)).unwrap();
        assert!(rel(a, b) < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn nonlinear_hessian_matches_gradient_differences() {
    let c = config("problem3-desk", |c| c.problem.max_level = 1);
    let est = estimator(&c);
    let h = *est.hierarchy();
    let mut r = rng(3);
    let u = random_fn(&h, 1, &mut r).scaled(2.0);
    let rep = est.gradient(&u, 5e-2, &mut SeedSequence::new(8)).unwrap();
    let f = rep.frozen;
    let du = random_fn(&h, 1, &mut r);
    let hv = est.replay_hessian_vector(&f, &u, &du).unwrap().estimate;
    let step = 1e-4;
    let gp = est.replay_gradient(&f, &u.axpy(step, &du).unwrap()).unwrap().estimate;
    let gm = est.replay_gradient(&f, &u.axpy(-step, &du).unwrap()).unwrap().estimate;
    let fd = gp.axpy(-1.0, &gm).unwrap().scaled(0.5 / step);
    let err = fd.axpy(-1.0, &hv).unwrap().norm() / hv.norm();
    assert!(err < 1e-6, "relative error {err}");
    assert!(matches!(c.problem.reaction, Reaction::ExpShift { .. }));
}

#[test]
fn linesearch_step_zeroes_directional_derivative_without_noise() {
    let c = config("problem1-desk", |c| {
        c.problem.sigma2 = 0.0;
        c.problem.max_level = 2;
    });
    let est = estimator(&c);
    let h = *est.hierarchy();
    let mut seeds = SeedSequence::new(1);
    let mut r = rng(4);
    let u = random_fn(&h, 2, &mut r);
    let g0 = est.gradient(&u, 1e-3, &mut seeds).unwrap();
    let f = g0.frozen;
    for d in [g0.estimate.scaled(-1.0), random_fn(&h, 2, &mut r)] {
        let d = if g0.estimate.inner_product(&d).unwrap() > 0.0 { d.scaled(-1.0) } else { d };
        let trial = est.replay_gradient(&f, &u.axpy(1.0, &d).unwrap()).unwrap().estimate;
        let s = parabola_linesearch(&g0.estimate, &trial, &d, 1.0, 0).unwrap();
        let g = est.replay_gradient(&f, &u.axpy(s, &d).unwrap()).unwrap().estimate;
        let slope = g.inner_product(&d).unwrap();
        let slope0 = g0.estimate.inner_product(&d).unwrap();
        assert!((slope / slope0).abs() < 1e-8, "phi'(s) = {slope}, phi'(0) = {slope0}");
    }
}

#[test]
fn frozen_samples_overfit_while_fresh_norm_levels_off() {
    let c = config("problem1-desk", |c| {
        c.problem.max_level = 2;
        c.problem.alpha = 1e-3;
        c.problem.sigma2 = 0.5;
    });
    let est = estimator(&c);
    let u0 = est.hierarchy().zeros(2);
    let mut model = MlmcModel::new(&est, 6);
    let pts = frozen_drift(&mut model, &c.optimizer, &u0, 8).unwrap();
    let last = pts.last().unwrap();
    assert!(last.frozen_norm < 1e-4 * pts[0].frozen_norm, "{pts:?}");
    let tail: Vec<f64> = pts[pts.len() - 3..].iter().map(|p| p.fresh_norm).collect();
    let (lo, hi) = tail.iter().fold((f64::MAX, 0.0_f64), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi < 3.0 * lo, "fresh norms do not level off: {tail:?}");
    assert!(lo > 1e3 * last.frozen_norm, "fresh norm follows the frozen one: {pts:?}");
}
