//! The central field experiment: a random conductivity field pinned to the
//! constant-determinant manifold, a source valued in the source space, and the
//! resulting polarization field confined to the closure subspace cell by cell.
//!
//!     cargo run --release --example polarization_membership

use xrel::field::field_inner;
use xrel::grid::Grid;
use xrel::solver::{
    make_manifold_field, make_source_field, maximal_source_space_of, membership_report,
    PolarizationSolver, SolveOptions,
};
use xrel::transforms::dykhne_manifold;

fn main() {
    let ms = dykhne_manifold(1.0).unwrap();
    let grid = Grid::square(ms.spec, 64).unwrap();

    let lfield = make_manifold_field(&ms, &grid, 8.0, 0.125, 7).unwrap();
    println!(
        "coefficient field: 64x64, contrast {:.3}, every cell with det = 1",
        lfield.contrast()
    );

    let source_space = maximal_source_space_of(&ms);
    let src = make_source_field(&source_space, None, &grid, 0.125, 1.0, 7).unwrap();

    let solver = PolarizationSolver::new(lfield, &ms.l0, &ms.m).unwrap();
    let opts = SolveOptions::default();
    let (p, diag) = solver.solve(&src, &opts).unwrap();
    println!(
        "fixed point: {} iterations, residual {:.3e}",
        diag.iterations, diag.final_residual
    );

    let rep = membership_report(&p, &ms.k0, None, 1e-6);
    println!(
        "polarization membership: max {:.3e}, mean {:.3e} over {} cells -> {}",
        rep.max_residual,
        rep.mean_residual,
        rep.cells,
        if rep.pass { "PASS" } else { "FAIL" }
    );

    // Field-level identities that come with the fixed point.
    let e = solver.ops().e_from_p(&p);
    let j = solver.ops().j_from_pe(&p, &e);
    let mut gp = solver.ops().apply_gamma(&p);
    gp.add_scaled(&e, 1.0);
    println!("|Gamma P + E| / |E|      = {:.3e}", gp.norm() / e.norm());
    println!(
        "|<J, E>| / (|J||E|)      = {:.3e}",
        field_inner(&j, &e).abs() / (j.norm() * e.norm())
    );
    println!(
        "divergence content of J  = {:.3e}",
        solver.ops().gamma1_projection_norm(&j)
    );
}
