//! Two-phase rank-one boundary flux equality: boundary data chosen through
//! the simultaneous congruence of the phase tensors forces the boundary flux
//! n·J onto a single predictable direction, independent of the microstructure.
//!
//!     cargo run --release --example two_phase_flux

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use xrel::boundary::{milgrom_flux_check, FdMesh, TwoPhaseSpec};
use xrel::tensor_space::EndoMatrix;

fn main() {
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(23);
    let m = 2;
    let rand_spd = |rng: &mut rand_chacha::ChaCha12Rng| {
        let g = EndoMatrix::from_fn(m, m, |_, _| rng.gen::<f64>() - 0.5);
        let q = g.qr().q();
        let eigs: Vec<f64> = (0..m).map(|_| 0.5 + 1.5 * rng.gen::<f64>()).collect();
        let d = EndoMatrix::from_fn(m, m, |r, c| if r == c { eigs[r] } else { 0.0 });
        let a = &q * d * q.transpose();
        0.5 * (&a + a.transpose())
    };
    let a1 = rand_spd(&mut rng);
    let a2 = rand_spd(&mut rng);
    println!("phase 1:\n{a1}");
    println!("phase 2:\n{a2}");

    let mesh = FdMesh {
        nx: 64,
        ny: 64,
        h: 1.0 / 64.0,
    };
    let spec = TwoPhaseSpec::checkerboard(a1, a2, &mesh, 8).unwrap();
    let rep = milgrom_flux_check(&spec, &mesh, 0).unwrap();

    println!("singular value ratio of the stacked boundary flux: {:.3e}", rep.sv_ratio);
    println!("angle to the predicted direction: |sin| = {:.3e}", rep.sin_angle);
    println!("recovered direction: {:?}", rep.recovered);
    println!("predicted direction: {:?}", rep.predicted);
    println!("discrete conservation defect: {:.3e}", rep.conservation_max);
}
