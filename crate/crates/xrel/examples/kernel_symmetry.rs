//! Adjoint symmetry of the kernel and reciprocity of the solution operator:
//! two point-source solves sampled with matching bumps agree under transpose,
//! and two compact-source solves satisfy <G h, h'> = <h, G h'>.
//!
//!     cargo run --release --example kernel_symmetry

use xrel::field::{field_inner, ExtendedField, FieldFlavor};
use xrel::greens::{adjoint_symmetry_check, smooth_delta, DeltaSpec};
use xrel::grid::Grid;
use xrel::solver::{make_manifold_field, solve_e_form, PolarizationSolver, SolveOptions};
use xrel::tensor_space::EndoMatrix;
use xrel::transforms::dykhne_manifold;

fn main() {
    let ms = dykhne_manifold(1.0).unwrap();
    let n = 256;
    let grid = Grid::square(ms.spec, n).unwrap();
    let lfield = make_manifold_field(&ms, &grid, 8.0, 0.125, 11).unwrap();
    let solver = PolarizationSolver::new(lfield.clone(), &ms.l0, &ms.m).unwrap();

    let eps = 3.0 / n as f64;
    let x0 = [n / 2 - 16, n / 2];
    let x1 = [n / 2 + 16, n / 2];
    let rep = adjoint_symmetry_check(&solver, &x0, &x1, eps, &SolveOptions::default()).unwrap();
    println!(
        "adjoint symmetry |T(x1,x0) - T(x0,x1)^T| / |T| = {:.3e}",
        rep.residual
    );

    // Reciprocity through the E-form route with two compact sources.
    let mk_source = |center: [usize; 2], amp: &EndoMatrix| -> ExtendedField {
        let d = DeltaSpec {
            center: center.to_vec(),
            width: eps,
        };
        let w = smooth_delta(&grid, &d).unwrap();
        let mut f = ExtendedField::zeros(&grid, FieldFlavor::Source);
        for cell in 0..grid.ncells() {
            if w[cell] != 0.0 {
                f.set(cell, &(amp * w[cell]));
            }
        }
        f
    };
    let h1 = mk_source(x0, &EndoMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.4, 0.7]));
    let h2 = mk_source(x1, &EndoMatrix::from_row_slice(2, 2, &[-0.3, 1.1, 0.6, 0.2]));
    let opts = SolveOptions::default();
    let (e1, _, _) = solve_e_form(&h1, &lfield, &ms.l0, &opts).unwrap();
    let (e2, _, _) = solve_e_form(&h2, &lfield, &ms.l0, &opts).unwrap();
    let a = field_inner(&e1, &h2);
    let b = field_inner(&e2, &h1);
    println!(
        "reciprocity <G h, h'> vs <h, G h'>: {a:.6e} vs {b:.6e} (rel diff {:.3e})",
        (a - b).abs() / a.abs().max(b.abs())
    );
}
