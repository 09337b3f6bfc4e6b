//! Rank-one lamination trajectories on the constant-determinant manifold:
//! mixes two anisotropic conductivities across volume fractions and lamination
//! directions, and verifies det L* stays pinned.
//!
//!     cargo run --release --example lamination_trajectories > trajectories.csv

use xrel::tensor_space::EndoMatrix;
use xrel::transforms::{dykhne_manifold, laminate};

fn main() {
    let ms = dykhne_manifold(1.0).unwrap();
    let la = EndoMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
    let lb = EndoMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);

    println!("f,n_angle,Lstar_11,Lstar_12,Lstar_22,det,membership_residual");
    let mut worst_det: f64 = 0.0;
    for ia in 0..4 {
        let angle = std::f64::consts::PI * ia as f64 / 4.0;
        let n = [angle.cos(), angle.sin()];
        for i in 0..51 {
            let f = i as f64 / 50.0;
            let l = laminate(&ms.spec, &la, &lb, f, &n, &ms.l0).unwrap();
            let det = l.determinant();
            worst_det = worst_det.max((det - 1.0).abs());
            println!(
                "{f},{angle},{},{},{},{det},{:.3e}",
                l[(0, 0)],
                l[(0, 1)],
                l[(1, 1)],
                ms.membership(&l).unwrap()
            );
        }
    }
    eprintln!("max |det - 1| over all trajectories: {worst_det:.3e}");
}
