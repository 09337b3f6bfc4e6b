//! Closure algebra of an exact relation: checks that the trace-free symmetric
//! subspace is closed under triple products with the multiplier Ψ(n) sampled
//! over the circle, and computes the maximal source space.
//!
//!     cargo run --release --example closure_algebra

use xrel::physics::psi_samples;
use xrel::tensor_space::{closure_check, maximal_source_space, EndoMatrix, DEFAULT_RANK_TOL};
use xrel::transforms::dykhne_manifold;

fn main() {
    let ms = dykhne_manifold(1.0).unwrap();
    println!("closure space K0: dim {}", ms.k0.dim());

    let samples = psi_samples(&ms.spec, &ms.l0, &ms.m, 100, &[]);
    let report = closure_check(&ms.k0, &samples, 1e-12).unwrap();
    println!(
        "closure check over {} products: max residual {:.3e} -> {}",
        report.checks,
        report.max_residual,
        if report.pass { "PASS" } else { "FAIL" }
    );

    let s = maximal_source_space(&ms.k0, DEFAULT_RANK_TOL);
    println!("maximal source space S: dim {}", s.dim());
    let id = EndoMatrix::identity(2, 2);
    let rperp = EndoMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    println!(
        "  contains I (residual {:.3e}) and R-perp (residual {:.3e})",
        s.residual(&id),
        s.residual(&rperp)
    );

    // The worked 3-product instance: diagonal × generic × generic, all
    // trace-free symmetric, lands back in the space.
    let b1 = EndoMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    let psi = EndoMatrix::from_row_slice(2, 2, &[2.0, 3.0, 3.0, -2.0]);
    let b2 = EndoMatrix::from_row_slice(2, 2, &[4.0, 5.0, 5.0, -4.0]);
    let prod = xrel::tensor_space::triple_product(&b1, &psi, &b2);
    println!("triple product instance:\n{prod}");
}
