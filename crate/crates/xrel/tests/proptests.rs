//! Property tests for the algebra layer: projection geometry, closure
//! linearity, transform roundtrips, and the dump format.

use proptest::prelude::*;

use xrel::field::{read_field_raw, write_field, ExtendedField, FieldFlavor};
use xrel::grid::Grid;
use xrel::physics::{build_m, psi, MChoice, ReferenceTensor};
use xrel::tensor_space::{
    adjoint_endo, frob_norm, inner_product, EndoMatrix, Subspace, TensorSpaceSpec,
};
use xrel::transforms::{l_lambda, w_inverse, w_transform};

fn mat2_strategy(range: f64) -> impl Strategy<Value = EndoMatrix> {
    proptest::collection::vec(-range..range, 4)
        .prop_map(|v| EndoMatrix::from_row_slice(2, 2, &v))
}

fn spd2_strategy() -> impl Strategy<Value = EndoMatrix> {
    // L = QᵀDQ with a rotation Q and eigenvalues in [0.4, 3].
    (0.0..std::f64::consts::PI, 0.4..3.0, 0.4..3.0).prop_map(|(th, a, b)| {
        let q = EndoMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let d = EndoMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b]);
        &q * d * q.transpose()
    })
}

proptest! {
    /// Projection is idempotent and satisfies Pythagoras.
    #[test]
    fn projection_geometry(mats in proptest::collection::vec(mat2_strategy(2.0), 1..4),
                           probe in mat2_strategy(3.0)) {
        let s = Subspace::from_span(&mats, 1e-10).unwrap();
        let p1 = s.project(&probe);
        let p2 = s.project(&p1);
        prop_assert!(frob_norm(&(&p2 - &p1)) < 1e-12 * frob_norm(&probe).max(1.0));
        let r = s.residual(&probe);
        let lhs = r * r + frob_norm(&p1).powi(2);
        let rhs = frob_norm(&probe).powi(2);
        prop_assert!((lhs - rhs).abs() < 1e-12 * rhs.max(1.0));
    }

    /// ⟨A·X, Y⟩ = ⟨X, adjoint(A)·Y⟩.
    #[test]
    fn adjoint_identity(a in mat2_strategy(2.0), x in mat2_strategy(2.0), y in mat2_strategy(2.0)) {
        let lhs = inner_product(&(&a * &x), &y).unwrap();
        let rhs = inner_product(&x, &(adjoint_endo(&a) * &y)).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-13 * lhs.abs().max(1.0));
    }

    /// Closure of the trace-free symmetric space holds for arbitrary linear
    /// combinations of the multiplier samples (linearity of the condition).
    #[test]
    fn closure_linearity(c1 in -2.0..2.0f64, c2 in -2.0..2.0f64,
                         th1 in 0.0..std::f64::consts::TAU,
                         th2 in 0.0..std::f64::consts::TAU,
                         a in -1.5..1.5f64, b in -1.5..1.5f64,
                         d in -1.5..1.5f64, e in -1.5..1.5f64) {
        let spec = TensorSpaceSpec::new(2, 1).unwrap();
        let l0 = ReferenceTensor::isotropic(&spec, 1.0).unwrap();
        let m = build_m(&spec, &l0, &MChoice::SphereAverage { order: None }).unwrap();
        let k = xrel::transforms::trace_free_symmetric_2x2();
        let p1 = psi(&spec, &[th1.cos(), th1.sin()], &l0, &m);
        let p2 = psi(&spec, &[th2.cos(), th2.sin()], &l0, &m);
        let combo = c1 * p1 + c2 * p2;
        let b1 = EndoMatrix::from_row_slice(2, 2, &[a, b, b, -a]);
        let b2 = EndoMatrix::from_row_slice(2, 2, &[d, e, e, -d]);
        let prod = &b1 * combo * &b2;
        prop_assert!(k.residual(&prod) < 1e-12 * frob_norm(&prod).max(1.0));
    }

    /// w_inverse ∘ w_transform is the identity on coercive inputs, and the
    /// λ-interpolation is a homothety in W coordinates.
    #[test]
    fn transform_roundtrip_and_homothety(l in spd2_strategy(), lam in 0.0..1.0f64) {
        let spec = TensorSpaceSpec::new(2, 1).unwrap();
        let l0t = ReferenceTensor::isotropic(&spec, 1.0).unwrap();
        let m = build_m(&spec, &l0t, &MChoice::SphereAverage { order: None }).unwrap();
        let l0 = l0t.matrix();
        let k = w_transform(&l, l0, &m).unwrap();
        let back = w_inverse(&k, l0, &m).unwrap();
        prop_assert!(frob_norm(&(&back - &l)) < 1e-11 * frob_norm(&l).max(1.0));

        let ll = l_lambda(&l, l0, &m, lam).unwrap();
        let wll = w_transform(&ll, l0, &m).unwrap();
        prop_assert!(frob_norm(&(&wll - lam * &k)) < 1e-11);
    }

    /// Field dump roundtrip preserves every byte of the payload.
    #[test]
    fn field_dump_roundtrip(vals in proptest::collection::vec(-1e3..1e3f64, 8 * 8 * 4)) {
        let spec = TensorSpaceSpec::new(2, 1).unwrap();
        let grid = Grid::square(spec, 8).unwrap();
        let mut f = ExtendedField::zeros(&grid, FieldFlavor::General);
        f.data.copy_from_slice(&vals);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_field(&path, &f).unwrap();
        let (d, m, sizes, data) = read_field_raw(&path).unwrap();
        prop_assert_eq!((d, m), (2, 1));
        prop_assert_eq!(sizes, vec![8, 8]);
        prop_assert_eq!(data, vals);
    }
}
