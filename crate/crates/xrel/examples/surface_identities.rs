//! Surface identities on the embedded disk: the boundary moment of the vector
//! potential lies in the gradient-constraint subspace, and the partial
//! null-Lagrangian volume integrals reduce to boundary data.
//!
//!     cargo run --release --example surface_identities

use xrel::boundary::{
    c_space, embedding_experiment, null_lagrangian_check, null_lagrangian_pair_check,
    potential_from_q_2d, surface_moment_check, Domain, EmbeddingSetup,
};
use xrel::grid::Grid;
use xrel::solver::{make_manifold_field_blended, maximal_source_space_of, SolveOptions};
use xrel::tensor_space::{right_multiply_space, EndoMatrix};
use xrel::transforms::{dykhne_manifold, w_inverse};

fn main() {
    let ms = dykhne_manifold(1.0).unwrap();
    let n = 256;
    let grid = Grid::square(ms.spec, n).unwrap();
    let radius = n as f64 / 4.0;
    let domain = Domain::disk(&grid, Some(radius)).unwrap();

    let k_ext = 0.8 * &ms.k0.basis()[0];
    let blend = Domain::disk_blend(&grid, radius, radius / 5.0);
    let interior =
        make_manifold_field_blended(&ms, &grid, 8.0, 0.25, 17, Some(&k_ext), Some(&blend)).unwrap();
    let d = EndoMatrix::from_row_slice(2, 2, &[1.05, 0.2, -0.15, 0.95]);
    let s_space = maximal_source_space_of(&ms);
    let s0 = (s_space.basis()[0].clone() + 0.5 * &s_space.basis()[1]) * &d;
    let (kd, _) = right_multiply_space(&ms.k0, &d).unwrap();
    let setup = EmbeddingSetup {
        mspec: &ms,
        domain: &domain,
        interior: &interior,
        exterior: w_inverse(&k_ext, ms.l0.matrix(), &ms.m).unwrap(),
        x0: vec![0, n / 2],
        s0,
        delta_width: 6.0 / n as f64,
        kd,
    };
    let out = embedding_experiment(&setup, 1e-5, 1e-4, &SolveOptions::default(), 17).unwrap();

    // Vector potential w with Q = R-perp grad w, built from (J, J-tilde).
    let w = potential_from_q_2d(&domain, &out.j, &out.jt).unwrap();
    println!(
        "potential: {} components on {} vertices, loop closure {:.3e}",
        w.t,
        w.values.len(),
        w.loop_closure
    );

    let cs = c_space(&out.dspace);
    let normals = cs.complement();
    println!("gradient constraint space C: dim {} (so {} normals)", cs.dim(), normals.dim());

    let (_integral, res, scale) = surface_moment_check(&domain, &w, &cs).unwrap();
    println!("surface moment membership: residual/scale = {:.3e}", res / scale);

    for (i, nmat) in normals.basis().iter().enumerate() {
        let rep = null_lagrangian_check(&domain, &w, &out.j, &out.jt, nmat, &cs).unwrap();
        println!(
            "null-Lagrangian {i}: volume vs surface mismatch = {:.3e} of scale {:.3e}",
            rep.residual, rep.scale
        );
    }
    let pair =
        null_lagrangian_pair_check(&domain, &w, &normals.basis()[0], &normals.basis()[1]).unwrap();
    println!(
        "pair identity: mismatch {:.3e}, boundary potential closure {:.3e}",
        pair.residual, pair.w1_closure
    );
}
