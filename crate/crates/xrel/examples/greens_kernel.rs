//! Point-source kernel experiment: solves for the q columns of the kernel
//! field T(x, x0) and checks its off-diagonal membership in the closure
//! subspace.
//!
//!     cargo run --release --example greens_kernel

use xrel::greens::{assemble_t, kernel_membership, solve_point_source, DeltaSpec};
use xrel::grid::Grid;
use xrel::solver::{make_manifold_field, PolarizationSolver, SolveOptions};
use xrel::tensor_space::EndoMatrix;
use xrel::transforms::dykhne_manifold;

fn main() {
    let ms = dykhne_manifold(1.0).unwrap();
    let n = 128;
    let grid = Grid::square(ms.spec, n).unwrap();
    let lfield = make_manifold_field(&ms, &grid, 8.0, 0.125, 11).unwrap();
    let solver = PolarizationSolver::new(lfield, &ms.l0, &ms.m).unwrap();

    let eps = 3.0 / n as f64;
    let delta = DeltaSpec {
        center: vec![n / 2, n / 2],
        width: eps,
    };
    // S0 = I lies in the source space, so T itself lands in K off-diagonal.
    let s0 = EndoMatrix::identity(2, 2);
    let (p, diag) = solve_point_source(&solver, &s0, &delta, &SolveOptions::default()).unwrap();
    println!(
        "point-source solve on {n}x{n}: {} iterations, residual {:.3e}",
        diag.iterations, diag.final_residual
    );

    let t = assemble_t(&p, &s0, &delta).unwrap();
    let rep = kernel_membership(&t, &ms.k0, 1e-5);
    println!(
        "off-diagonal kernel membership (exclusion radius 5 eps): max {:.3e}, mean {:.3e} over {} cells -> {}",
        rep.max_residual,
        rep.mean_residual,
        rep.cells,
        if rep.pass { "PASS" } else { "FAIL" }
    );

    // Radial profile of the kernel magnitude.
    println!("r_cells,|T|");
    let c = grid.index(&delta.center);
    for r in [6usize, 9, 12, 16, 24, 32, 48] {
        let cell = grid.index(&[n / 2 + r, n / 2]);
        println!("{r},{:.6e}", t.field.cell_norm(cell));
        let _ = c;
    }
}
