//! Independent oracles for the multiplier solver: single-frequency closed
//! forms, homogeneous-medium solutions, the E-form/polarization cross-path,
//! and the pointwise membership of iterates.

use nalgebra::DMatrix;

use xrel::field::{field_inner, CoefficientField, ExtendedField, FieldFlavor};
use xrel::grid::Grid;
use xrel::physics::{build_m, psi, MChoice, ReferenceTensor};
use xrel::solver::{
    coeff_dl_mul, make_manifold_field, make_source_field, maximal_source_space_of,
    membership_report, solve_e_form, PolarizationSolver, SolveOptions, SpectralOps,
};
use xrel::tensor_space::{frob_norm, EndoMatrix, TensorSpaceSpec};
use xrel::transforms::{dykhne_manifold, w_transform};

fn grid32() -> Grid {
    Grid::square(TensorSpaceSpec::new(2, 1).unwrap(), 32).unwrap()
}

/// Field A·cos(k·x + φ) for a lattice mode (n1, n2).
fn cosine_mode(grid: &Grid, a: &EndoMatrix, mode: [i64; 2], phase: f64) -> ExtendedField {
    let mut f = ExtendedField::zeros(grid, FieldFlavor::General);
    for cell in 0..grid.ncells() {
        let pos = grid.position(cell);
        let arg = 2.0 * std::f64::consts::PI
            * (mode[0] as f64 * pos[0] / grid.axis_length(0)
                + mode[1] as f64 * pos[1] / grid.axis_length(1))
            + phase;
        let v = arg.cos();
        f.set(cell, &(a * v));
    }
    f
}

fn wavevector(grid: &Grid, mode: [i64; 2]) -> [f64; 2] {
    [
        2.0 * std::f64::consts::PI * mode[0] as f64 / grid.axis_length(0),
        2.0 * std::f64::consts::PI * mode[1] as f64 / grid.axis_length(1),
    ]
}

#[test]
fn apply_gamma_recovers_gradient_part() {
    // F = L0·E + J with E a gradient-type mode (k⊗a) and J divergence-free
    // (k⊥⊗b): ΓF = E exactly at resolved modes.
    let grid = grid32();
    let spec = *grid.spec();
    let l0 = ReferenceTensor::isotropic(&spec, 1.3).unwrap();
    let m = build_m(&spec, &l0, &MChoice::SphereAverage { order: None }).unwrap();
    let ops = SpectralOps::new(&grid, &l0, &m);

    let mode = [3i64, -2i64];
    let k = wavevector(&grid, mode);
    let kn = (k[0] * k[0] + k[1] * k[1]).sqrt();
    let khat = [k[0] / kn, k[1] / kn];
    // Extended amplitudes are q×q; every column of the E amplitude lies in
    // range(Γ₁(k)) = span{k̂} (m = 1), every column of the J amplitude in the
    // orthogonal complement span{k̂⊥}.
    let e_amp = DMatrix::from_row_slice(
        2,
        2,
        &[khat[0] * 0.8, khat[0] * -0.3, khat[1] * 0.8, khat[1] * -0.3],
    );
    let j_amp = DMatrix::from_row_slice(
        2,
        2,
        &[-khat[1] * 0.5, -khat[1] * 1.1, khat[0] * 0.5, khat[0] * 1.1],
    );

    let e = cosine_mode(&grid, &e_amp, mode, 0.37);
    let j = cosine_mode(&grid, &j_amp, mode, -1.1);
    let mut f = e.left_mul(l0.matrix(), FieldFlavor::General);
    f.add_scaled(&j, 1.0);

    let ge = ops.apply_gamma(&f);
    assert!(
        ge.distance(&e) / e.norm() < 1e-12,
        "gamma recovery error {}",
        ge.distance(&e) / e.norm()
    );

    // J-type fields are annihilated.
    let gj = ops.apply_gamma(&j);
    assert!(gj.norm() / j.norm() < 1e-13);

    // Constants map to zero.
    let mut c = ExtendedField::zeros(&grid, FieldFlavor::General);
    for cell in 0..grid.ncells() {
        c.set(cell, &EndoMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]));
    }
    assert!(ops.apply_gamma(&c).norm() < 1e-12 * c.norm());
    // ... and Ψ(constant) = M·constant.
    let pc = ops.apply_psi(&c);
    let expect = c.left_mul(&m, FieldFlavor::General);
    assert!(pc.distance(&expect) < 1e-12 * c.norm());
}

#[test]
fn apply_psi_single_mode_matches_symbol() {
    let grid = grid32();
    let spec = *grid.spec();
    let l0 = ReferenceTensor::isotropic(&spec, 1.0).unwrap();
    let m = build_m(&spec, &l0, &MChoice::SphereAverage { order: None }).unwrap();
    let ops = SpectralOps::new(&grid, &l0, &m);

    let a = EndoMatrix::from_row_slice(2, 2, &[0.7, -0.2, 0.4, 1.1]);
    let mode = [5i64, 1i64];
    let f = cosine_mode(&grid, &a, mode, 0.9);
    let pf = ops.apply_psi(&f);

    let k = wavevector(&grid, mode);
    let symbol = psi(&spec, &k, &l0, &m);
    let expect = cosine_mode(&grid, &(&symbol * &a), mode, 0.9);
    assert!(pf.distance(&expect) / expect.norm() < 1e-12);

    // Linearity on random pairs.
    let b = EndoMatrix::from_row_slice(2, 2, &[-0.3, 0.8, 0.1, -0.6]);
    let g = cosine_mode(&grid, &b, [1, 4], -0.2);
    let mut fg = f.clone();
    fg.add_scaled(&g, 2.5);
    let lhs = ops.apply_psi(&fg);
    let mut rhs = ops.apply_psi(&f);
    rhs.add_scaled(&ops.apply_psi(&g), 2.5);
    assert!(lhs.distance(&rhs) / lhs.norm() < 1e-13);
}

#[test]
fn homogeneous_single_mode_closed_form() {
    // L(x) ≡ L1 on the Dykhne manifold, single-mode source: the fixed point is
    // ℙ̂(k) = (I − K₁Ψ(k))⁻¹K₁𝕊̂(k) mode by mode.
    let grid = grid32();
    let ms = dykhne_manifold(1.0).unwrap();
    let l1 = EndoMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, (1.0 + 0.09) / 2.0]);
    // det(l1) = 2*(1.09/2) − 0.09 = 1 exactly.
    assert!((l1.determinant() - 1.0).abs() < 1e-14);
    let lfield = CoefficientField::homogeneous(&grid, &l1).unwrap();
    let solver = PolarizationSolver::new(lfield, &ms.l0, &ms.m).unwrap();

    let s_amp = EndoMatrix::identity(2, 2);
    let mode = [2i64, 3i64];
    let src = cosine_mode(&grid, &s_amp, mode, 0.0);
    let opts = SolveOptions {
        tol: 1e-12,
        ..Default::default()
    };
    let (p, diag) = solver.solve(&src, &opts).unwrap();
    assert!(diag.final_residual <= 1e-12);

    let k = wavevector(&grid, mode);
    let k1 = w_transform(&l1, ms.l0.matrix(), &ms.m).unwrap();
    let psi_k = psi(&ms.spec, &k, &ms.l0, &ms.m);
    let amp = (EndoMatrix::identity(2, 2) - &k1 * &psi_k)
        .lu()
        .solve(&(&k1 * &s_amp))
        .unwrap();
    let expect = cosine_mode(&grid, &amp, mode, 0.0);
    let err = p.distance(&expect) / expect.norm();
    assert!(err < 1e-10, "closed-form mismatch {err}");

    // Zero-source and zero-contrast cases collapse to zero.
    let zero = ExtendedField::zeros(&grid, FieldFlavor::Source);
    let (p0, _) = solver.solve(&zero, &opts).unwrap();
    assert_eq!(p0.norm(), 0.0);
    let l0field = CoefficientField::homogeneous(&grid, ms.l0.matrix()).unwrap();
    let trivial = PolarizationSolver::new(l0field, &ms.l0, &ms.m).unwrap();
    let (pt, _) = trivial.solve(&src, &opts).unwrap();
    assert_eq!(pt.norm(), 0.0);
}

#[test]
fn e_form_homogeneous_single_mode_closed_form() {
    // 𝔼 = Γℍ − Γ(L−L0)𝔼 per mode: Ê = (I + Γ(k)(L1−L0))⁻¹Γ(k)Ĥ.
    let grid = grid32();
    let ms = dykhne_manifold(1.0).unwrap();
    let l1 = EndoMatrix::from_row_slice(2, 2, &[1.6, 0.0, 0.0, 0.625]);
    let lfield = CoefficientField::homogeneous(&grid, &l1).unwrap();

    let h_amp = EndoMatrix::from_row_slice(2, 2, &[0.4, 1.0, -0.7, 0.2]);
    let mode = [1i64, -4i64];
    let h = cosine_mode(&grid, &h_amp, mode, 0.55);
    let opts = SolveOptions {
        tol: 1e-12,
        ..Default::default()
    };
    let (e, j, _) = solve_e_form(&h, &lfield, &ms.l0, &opts).unwrap();

    let k = wavevector(&grid, mode);
    let g = xrel::physics::gamma(&ms.spec, &k, &ms.l0);
    let dl = &l1 - ms.l0.matrix();
    let e_amp = (EndoMatrix::identity(2, 2) + &g * &dl)
        .lu()
        .solve(&(&g * &h_amp))
        .unwrap();
    let expect = cosine_mode(&grid, &e_amp, mode, 0.55);
    assert!(e.distance(&expect) / expect.norm().max(1e-300) < 1e-10);

    // J = L·E − H is divergence-free.
    let l0m = ReferenceTensor::isotropic(&ms.spec, 1.0).unwrap();
    let m = build_m(&ms.spec, &l0m, &MChoice::SphereAverage { order: None }).unwrap();
    let ops = SpectralOps::new(&grid, &l0m, &m);
    assert!(ops.gamma1_projection_norm(&j) < 1e-11);

    // Zero source gives zero fields.
    let zero = ExtendedField::zeros(&grid, FieldFlavor::General);
    let (e0, j0, _) = solve_e_form(&zero, &lfield, &ms.l0, &opts).unwrap();
    assert_eq!(e0.norm(), 0.0);
    assert_eq!(j0.norm(), 0.0);
}

/// Shared setup for the random-medium experiments.
fn dykhne_experiment(
    n: usize,
    contrast: f64,
    seed: u64,
) -> (Grid, xrel::transforms::ManifoldSpec, CoefficientField, ExtendedField) {
    let ms = dykhne_manifold(1.0).unwrap();
    let grid = Grid::square(ms.spec, n).unwrap();
    let lfield = make_manifold_field(&ms, &grid, contrast, 0.125, seed).unwrap();
    let s = maximal_source_space_of(&ms);
    let src = make_source_field(&s, None, &grid, 0.125, 1.0, seed).unwrap();
    (grid, ms, lfield, src)
}

#[test]
fn manifold_field_stays_on_manifold_with_requested_contrast() {
    let (_grid, ms, lfield, _src) = dykhne_experiment(32, 8.0, 99);
    assert!(lfield.contrast() <= 8.0 + 1e-9);
    assert!(lfield.contrast() > 7.5, "amplitude search should come close");
    for cell in (0..lfield.grid().ncells()).step_by(17) {
        let l = lfield.get(cell);
        assert!((l.determinant() - 1.0).abs() < 1e-10);
        assert!(ms.membership(&l).unwrap() < 1e-10);
    }
    // Determinism.
    let ms2 = dykhne_manifold(1.0).unwrap();
    let grid2 = Grid::square(ms2.spec, 32).unwrap();
    let lf2 = make_manifold_field(&ms2, &grid2, 8.0, 0.125, 99).unwrap();
    assert_eq!(lfield.data, lf2.data);

    // Zero-amplitude limit.
    let lf0 = make_manifold_field(&ms, lfield.grid(), 1.0, 0.125, 99).unwrap();
    for cell in 0..lf0.grid().ncells() {
        assert!(frob_norm(&(lf0.get(cell) - ms.l0.matrix())) < 1e-15);
    }
}

#[test]
fn source_field_values_stay_in_sd() {
    let (grid, ms, _lf, _src) = dykhne_experiment(32, 2.0, 5);
    let s = maximal_source_space_of(&ms);
    let d = EndoMatrix::from_row_slice(2, 2, &[1.2, -0.3, 0.4, 0.9]);
    let src = make_source_field(&s, Some(&d), &grid, 0.125, 2.0, 42).unwrap();
    let (sd, _) = xrel::tensor_space::right_multiply_space(&s, &d).unwrap();
    for cell in (0..grid.ncells()).step_by(13) {
        let v = src.get(cell);
        assert!(sd.residual(&v) < 1e-13 * frob_norm(&v).max(1.0));
    }
    let zero = make_source_field(&s, Some(&d), &grid, 0.125, 0.0, 42).unwrap();
    assert_eq!(zero.norm(), 0.0);
}

#[test]
fn central_membership_is_discrete_exact() {
    // The iteration preserves the closure subspace cellwise, so membership
    // lands at roundoff, far below the acceptance tolerance.
    let (_grid, ms, lfield, src) = dykhne_experiment(32, 8.0, 7);
    let solver = PolarizationSolver::new(lfield, &ms.l0, &ms.m).unwrap();
    let opts = SolveOptions::default();
    let (p, diag) = solver.solve(&src, &opts).unwrap();
    assert!(diag.final_residual <= opts.tol);
    let rep = membership_report(&p, &ms.k0, None, 1e-6);
    assert!(
        rep.max_residual < 1e-11,
        "membership should be roundoff-level, got {}",
        rep.max_residual
    );

    // Γℙ = −𝔼, orthogonality, and divergence-free 𝕁.
    let e = solver.ops().e_from_p(&p);
    let j = solver.ops().j_from_pe(&p, &e);
    let mut gp = solver.ops().apply_gamma(&p);
    gp.add_scaled(&e, 1.0);
    assert!(gp.norm() / e.norm() < 10.0 * opts.tol);
    assert!(field_inner(&j, &e).abs() / (j.norm() * e.norm()) < 10.0 * opts.tol);
    assert!(solver.ops().gamma1_projection_norm(&j) < 10.0 * opts.tol);
}

#[test]
fn cross_path_polarization_equals_e_form() {
    // Solve the same discrete problem through both routes: the polarization
    // fixed point (with its reported zero-mode source offset) and the E-form
    // iteration on ℍ = −(L−L0)(𝕊 − offset).
    let (grid, ms, lfield, src) = dykhne_experiment(32, 6.0, 21);
    let solver = PolarizationSolver::new(lfield.clone(), &ms.l0, &ms.m).unwrap();
    let opts = SolveOptions {
        tol: 1e-11,
        ..Default::default()
    };
    let (p, diag) = solver.solve(&src, &opts).unwrap();
    let _ = &diag.zero_mode_offset;

    // Effective source of the torus solve: 𝕊 − M·(special part of ℙ), the
    // k = 0 and Nyquist content the loop's Ψ̃ does not act on.
    let special = solver.ops().special_part(&p);
    let mut src_eff = src.clone();
    src_eff.add_scaled(&special.left_mul(&ms.m, FieldFlavor::Source), -1.0);
    let mut h = coeff_dl_mul(&lfield, &ms.l0, &src_eff, FieldFlavor::General);
    h.scale(-1.0);
    let (e, j, _) = solve_e_form(&h, &lfield, &ms.l0, &opts).unwrap();
    let mut p_e = j.clone();
    p_e.add_scaled(&e.left_mul(ms.l0.matrix(), FieldFlavor::General), -1.0);

    let rel = p_e.distance(&p) / p.norm();
    assert!(rel < 10.0 * opts.tol, "cross-path disagreement {rel}");
}

#[test]
fn partial_sums_match_fixed_point_at_small_lambda_and_stay_in_k() {
    let (grid, ms, lfield, _src) = dykhne_experiment(32, 8.0, 7);
    let solver = PolarizationSolver::new(lfield, &ms.l0, &ms.m).unwrap();
    let s = maximal_source_space_of(&ms);
    let src = make_source_field(&s, None, &grid, 0.125, 1.0, 7).unwrap();

    let lambda = 0.1;
    let sums = solver.partial_sums(&src, lambda, 6).unwrap();
    for psum in &sums {
        let rep = membership_report(psum, &ms.k0, None, 1e-10);
        assert!(rep.max_residual < 1e-10, "partial sum residual {}", rep.max_residual);
    }
    // Longer recursion, same invariant (order cap applies to the op, not the
    // mathematics).
    let mut cur = sums[0].clone();
    let mut ks = solver.apply_k(&src);
    ks.scale(lambda);
    for _ in 0..20 {
        let psip = solver.ops().apply_psi_fluct(&cur);
        let mut next = xrel::solver::cellwise_mul(solver.kfield(), &psip, FieldFlavor::Polarization);
        next.scale(lambda);
        next.add_scaled(&ks, 1.0);
        cur = next;
        let rep = membership_report(&cur, &ms.k0, None, 1e-10);
        assert!(rep.max_residual < 1e-10);
    }

    let (fp, _) = xrel::greens::solve_at_lambda(&solver, &src, lambda, &SolveOptions {
        tol: 1e-12,
        ..Default::default()
    })
    .unwrap();
    let rel = sums[6].distance(&fp) / fp.norm();
    assert!(rel < 1e-6, "order-6 sum vs fixed point {rel}");
}

#[test]
fn basis_change_covariance() {
    // Sources in S·D give polarizations in K·D.
    let (grid, ms, lfield, _src) = dykhne_experiment(32, 6.0, 3);
    let solver = PolarizationSolver::new(lfield, &ms.l0, &ms.m).unwrap();
    let s = maximal_source_space_of(&ms);
    let d = EndoMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.2, 1.3]);
    let src = make_source_field(&s, Some(&d), &grid, 0.125, 1.0, 17).unwrap();
    let (p, _) = solver.solve(&src, &SolveOptions::default()).unwrap();
    let (kd, _) = xrel::tensor_space::right_multiply_space(&ms.k0, &d).unwrap();
    let rep = membership_report(&p, &kd, None, 1e-6);
    assert!(rep.max_residual < 1e-10, "K·D membership {}", rep.max_residual);
    // Against plain K it must fail (the change of basis matters).
    let plain = membership_report(&p, &ms.k0, None, 1e-6);
    assert!(plain.max_residual > 1e-2);
}

#[test]
fn solver_is_deterministic() {
    let (_g1, ms, lf1, s1) = dykhne_experiment(32, 8.0, 123);
    let (_g2, _ms2, lf2, s2) = dykhne_experiment(32, 8.0, 123);
    assert_eq!(lf1.data, lf2.data);
    assert_eq!(s1.data, s2.data);
    let solver1 = PolarizationSolver::new(lf1, &ms.l0, &ms.m).unwrap();
    let solver2 = PolarizationSolver::new(lf2, &ms.l0, &ms.m).unwrap();
    let (p1, _) = solver1.solve(&s1, &SolveOptions::default()).unwrap();
    let (p2, _) = solver2.solve(&s2, &SolveOptions::default()).unwrap();
    assert_eq!(p1.data, p2.data);
}

#[test]
fn apply_k_matches_w_transform_cellwise() {
    let (grid, ms, lfield, _s) = dykhne_experiment(32, 4.0, 11);
    let solver = PolarizationSolver::new(lfield.clone(), &ms.l0, &ms.m).unwrap();
    let mut f = ExtendedField::zeros(&grid, FieldFlavor::General);
    for cell in 0..grid.ncells() {
        let x = cell as f64;
        f.set(
            cell,
            &EndoMatrix::from_row_slice(2, 2, &[x.sin(), x.cos(), 0.5, -0.25]),
        );
    }
    let kf = solver.apply_k(&f);
    for cell in (0..grid.ncells()).step_by(29) {
        let k = w_transform(&lfield.get(cell), ms.l0.matrix(), &ms.m).unwrap();
        let expect = &k * f.get(cell);
        assert!(frob_norm(&(kf.get(cell) - expect)) < 1e-13);
    }
}
